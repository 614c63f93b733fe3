#pragma once

#include <string>
#include <vector>

#include "banet/tensor.hpp"

// Linear-kernel centered kernel alignment between feature batches.
namespace banet::cka {

using Matrix = Tensor<double>;

// K = X X^T for X [m, d]; needs m >= 2.
Matrix gram(const Matrix& x);

// Biased estimator tr(K H L H) / (m-1)^2 with H = I - (1/m) 1 1^T.
double hsic(const Matrix& k, const Matrix& l);

// HSIC(K,L) / sqrt(HSIC(K,K) HSIC(L,L)), clamped to [0,1]. Throws
// DegenerateError when either Gram matrix is constant after centering.
double cka(const Matrix& k, const Matrix& l);

/// CKA(gram(X), gram(Y)) evaluated on column-centered features, which keeps
/// small sample-to-sample variation clear of roundoff in the Gram matrices.
/// Throws DegenerateError when either batch is constant across samples.
double linear_cka(const Matrix& x, const Matrix& y);

/// Per-block similarity between every squeezed branch feature S_i and the
/// block's attention weights.
struct CkaMatrix {
    std::vector<std::string> block_labels;   // B1..Bk
    std::vector<std::string> branch_labels;  // S1..Sn (widest block)
    std::vector<std::vector<double>> scores; // scores[block][branch]; blocks with fewer branches are short

    // Header "block,S1,...,Sn", then one row per block; missing cells empty.
    std::string to_csv() const;
};

// Samples are rows. One entry per block: the n squeezed features and the weights.
struct BlockFeatures {
    std::vector<Matrix> squeezed;
    Matrix weights;
};

CkaMatrix importance_matrix(const std::vector<BlockFeatures>& blocks);

}  // namespace banet::cka
