#include "banet/data.hpp"

#include <algorithm>
#include <array>
#include <stdexcept>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

namespace banet {

template <typename T>
Tensor<T> Dataset::batch_images(std::span<const std::size_t> indices) const {
    const auto& s = images.shape();
    const std::size_t per = s[1] * s[2] * s[3];
    Tensor<T> out(Shape{indices.size(), s[1], s[2], s[3]});
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const std::size_t src = indices[b];
        if (src >= size()) throw std::out_of_range("batch index out of range");
        for (std::size_t k = 0; k < per; ++k) out[b * per + k] = static_cast<T>(images[src * per + k]);
    }
    return out;
}

template Tensor<float> Dataset::batch_images<float>(std::span<const std::size_t>) const;
template Tensor<double> Dataset::batch_images<double>(std::span<const std::size_t>) const;

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(labels.at(i));
    return out;
}

void Dataset::validate() const {
    if (labels.empty()) throw FormatError("dataset is empty");
    if (images.rank() != 4 || images.dim(0) != labels.size()) throw FormatError("dataset image/label count mismatch");
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= classes) throw FormatError("dataset label out of range");
    }
}

Dataset parse_cifar10(std::span<const std::uint8_t> bytes) {
    if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
        throw FormatError("CIFAR-10: length " + std::to_string(bytes.size()) + " is not a multiple of " +
                          std::to_string(kCifarRecordBytes));
    }
    const std::size_t n = bytes.size() / kCifarRecordBytes;
    const std::size_t pixels = kCifarRecordBytes - 1;
    Dataset d;
    d.classes = 10;
    d.images = Tensor<double>(Shape{n, 3, kCifarSide, kCifarSide});
    d.labels.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
        if (rec[0] >= 10) throw FormatError("CIFAR-10: record " + std::to_string(r) + " has label " + std::to_string(rec[0]));
        d.labels[r] = rec[0];
        for (std::size_t k = 0; k < pixels; ++k) d.images[r * pixels + k] = rec[1 + k] / 255.0;
    }
    return d;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw FormatError("cannot open " + p.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

Dataset load_cifar10(const std::filesystem::path& path) {
    if (!std::filesystem::is_directory(path)) return parse_cifar10(read_file(path));
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(path)) {
        const auto name = e.path().filename().string();
        if (name.starts_with("data_batch_") && name.ends_with(".bin")) files.push_back(e.path());
    }
    if (files.empty() && std::filesystem::exists(path / "test_batch.bin")) files.push_back(path / "test_batch.bin");
    if (files.empty()) throw FormatError("no CIFAR-10 batch files in " + path.string());
    std::sort(files.begin(), files.end());
    std::vector<std::uint8_t> all;
    for (const auto& f : files) {
        auto bytes = read_file(f);
        if (bytes.size() % kCifarRecordBytes != 0) throw FormatError(f.string() + ": truncated CIFAR-10 batch");
        all.insert(all.end(), bytes.begin(), bytes.end());
    }
    return parse_cifar10(all);
}

Dataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t classes, std::size_t size) {
    if (classes == 0 || n < classes) throw std::invalid_argument("synth_dataset: need n >= classes > 0");
    if (size == 0) throw std::invalid_argument("synth_dataset: zero image size");
    constexpr std::size_t channels = 3;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.08);

    const double two_pi = 2.0 * std::numbers::pi;
    std::vector<std::array<double, channels>> base(classes);
    std::vector<std::pair<double, double>> centre(classes);
    for (std::size_t k = 0; k < classes; ++k) {
        const double phase = two_pi * static_cast<double>(k) / static_cast<double>(classes);
        for (std::size_t c = 0; c < channels; ++c) base[k][c] = 0.45 + 0.25 * std::cos(phase + two_pi * c / channels);
        centre[k] = {0.5 + 0.3 * std::cos(phase), 0.5 + 0.3 * std::sin(phase)};
    }

    Dataset d;
    d.classes = classes;
    d.images = Tensor<double>(Shape{n, channels, size, size});
    d.labels.resize(n);
    const double sigma = 0.18 * static_cast<double>(size);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = i % classes;
        d.labels[i] = static_cast<int>(k);
        const double cy = centre[k].first * (size - 1), cx = centre[k].second * (size - 1);
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t y = 0; y < size; ++y) {
                for (std::size_t x = 0; x < size; ++x) {
                    const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                    const double bump = 0.3 * std::exp(-r2 / (2 * sigma * sigma));
                    const double v = base[k][c] + bump + noise(rng);
                    d.images(i, c, y, x) = std::clamp(v, 0.0, 1.0);
                }
            }
        }
    }
    return d;
}

}  // namespace banet
