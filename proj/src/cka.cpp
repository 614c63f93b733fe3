#include "banet/cka.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace banet::cka {

namespace {

void require_square(const Matrix& k, const char* what) {
    if (k.rank() != 2 || k.dim(0) != k.dim(1)) throw ShapeError(std::string(what) + ": expected a square matrix");
    if (k.dim(0) < 2) throw ShapeError(std::string(what) + ": need at least two samples");
}

// H K H
Matrix center(const Matrix& k) {
    const std::size_t m = k.dim(0);
    std::vector<double> row_mean(m, 0.0), col_mean(m, 0.0);
    double all = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            row_mean[i] += k(i, j);
            col_mean[j] += k(i, j);
        }
    }
    for (std::size_t i = 0; i < m; ++i) {
        all += row_mean[i];
        row_mean[i] /= static_cast<double>(m);
        col_mean[i] /= static_cast<double>(m);
    }
    all /= static_cast<double>(m * m);
    Matrix c(k.shape());
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) c(i, j) = k(i, j) - row_mean[i] - col_mean[j] + all;
    }
    return c;
}

// X minus its per-column mean.
Matrix center_columns(const Matrix& x) {
    const std::size_t m = x.dim(0), d = x.dim(1);
    Matrix out = x;
    for (std::size_t e = 0; e < d; ++e) {
        double mean = 0.0;
        for (std::size_t i = 0; i < m; ++i) mean += x(i, e);
        mean /= static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) out(i, e) -= mean;
    }
    return out;
}

double frobenius_sq(const Matrix& k) {
    double s = 0.0;
    for (double v : k.data()) s += v * v;
    return s;
}

}  // namespace

Matrix gram(const Matrix& x) {
    if (x.rank() != 2) throw ShapeError("gram: expected [m, d] features");
    const std::size_t m = x.dim(0), d = x.dim(1);
    if (m < 2) throw ShapeError("gram: need at least two samples");
    x.check_finite("gram input");
    Matrix k(Shape{m, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = i; j < m; ++j) {
            double s = 0.0;
            for (std::size_t e = 0; e < d; ++e) s += x(i, e) * x(j, e);
            k(i, j) = s;
            k(j, i) = s;
        }
    }
    return k;
}

double hsic(const Matrix& k, const Matrix& l) {
    require_square(k, "hsic");
    require_square(l, "hsic");
    if (k.shape() != l.shape()) throw ShapeError("hsic: size mismatch " + shape_str(k.shape()) + " vs " + shape_str(l.shape()));
    const std::size_t m = k.dim(0);
    // tr(K H L H) = <HKH, L> since H is symmetric and idempotent.
    const Matrix kc = center(k);
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) s += kc(i, j) * l(j, i);
    }
    const double denom = static_cast<double>(m - 1) * static_cast<double>(m - 1);
    return s / denom;
}

double cka(const Matrix& k, const Matrix& l) {
    const double kk = hsic(k, k);
    const double ll = hsic(l, l);
    const double m = static_cast<double>(k.dim(0));
    // Below this the centered Gram matrix is indistinguishable from roundoff.
    const double noise = 16.0 * m * std::numeric_limits<double>::epsilon();
    const double floor = noise * noise / ((m - 1) * (m - 1));
    if (!(kk > floor * frobenius_sq(k)) || !(ll > floor * frobenius_sq(l))) {
        throw DegenerateError("cka: features are constant across samples");
    }
    const double v = hsic(k, l) / std::sqrt(kk * ll);
    return std::clamp(v, 0.0, 1.0);
}

double linear_cka(const Matrix& x, const Matrix& y) {
    if (x.rank() != 2 || y.rank() != 2) throw ShapeError("linear_cka: expected [m, d] features");
    if (x.dim(0) != y.dim(0)) throw ShapeError("linear_cka: sample count mismatch");
    if (x.dim(0) < 2) throw ShapeError("linear_cka: need at least two samples");
    const Matrix xc = center_columns(x), yc = center_columns(y);
    const double m = static_cast<double>(x.dim(0));
    const double noise = 16.0 * m * std::numeric_limits<double>::epsilon();
    if (!(frobenius_sq(xc) > noise * noise * frobenius_sq(x)) || !(frobenius_sq(yc) > noise * noise * frobenius_sq(y))) {
        throw DegenerateError("cka: features are constant across samples");
    }
    return cka(gram(xc), gram(yc));
}

std::string CkaMatrix::to_csv() const {
    std::ostringstream os;
    os << "block";
    for (const auto& b : branch_labels) os << ',' << b;
    os << '\n';
    os << std::setprecision(10);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        os << block_labels.at(i);
        for (std::size_t j = 0; j < branch_labels.size(); ++j) {
            os << ',';
            if (j < scores[i].size()) os << scores[i][j];
        }
        os << '\n';
    }
    return os.str();
}

CkaMatrix importance_matrix(const std::vector<BlockFeatures>& blocks) {
    if (blocks.empty()) throw std::invalid_argument("importance_matrix: model has no attention blocks");
    CkaMatrix out;
    std::size_t widest = 0;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto& bf = blocks[b];
        if (bf.weights.rank() != 2 || bf.weights.dim(0) < 2) {
            throw ShapeError("importance_matrix: need at least two samples");
        }
        std::vector<double> row;
        for (const auto& s : bf.squeezed) {
            if (s.dim(0) != bf.weights.dim(0)) throw ShapeError("importance_matrix: sample count mismatch");
            row.push_back(linear_cka(s, bf.weights));
        }
        widest = std::max(widest, row.size());
        out.block_labels.push_back("B" + std::to_string(b + 1));
        out.scores.push_back(std::move(row));
    }
    for (std::size_t j = 0; j < widest; ++j) out.branch_labels.push_back("S" + std::to_string(j + 1));
    return out;
}

}  // namespace banet::cka
