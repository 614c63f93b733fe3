#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "banet/tensor.hpp"

namespace banet {

/// Images [N,3,H,W] scaled to [0,1] with integer labels in [0, classes).
struct Dataset {
    Tensor<double> images;
    std::vector<int> labels;
    std::size_t classes = 0;

    std::size_t size() const { return labels.size(); }
    // Rows `indices` as a contiguous batch.
    template <typename T>
    Tensor<T> batch_images(std::span<const std::size_t> indices) const;
    std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
    void validate() const;
};

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarSide = 32;

// Parses CIFAR-10 binary records from memory.
Dataset parse_cifar10(std::span<const std::uint8_t> bytes);

/// Loads one CIFAR-10 binary batch file, or every data_batch_*.bin (falling
/// back to test_batch.bin) in a directory, in name order.
Dataset load_cifar10(const std::filesystem::path& path);

/// Deterministic class-conditional blobs: class k has its own per-channel
/// base intensity and a bright Gaussian bump at a class-specific position,
/// plus per-pixel Gaussian noise. Labels are assigned round-robin.
Dataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t classes, std::size_t size);

}  // namespace banet
