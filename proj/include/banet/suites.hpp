#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "banet/train.hpp"

// Gradient-check suites and ablation harnesses behind the CLI.
namespace banet {

struct CheckRecord {
    std::string suite;
    std::string name;
    double max_rel_error = 0.0;
    double threshold = 0.0;
    std::size_t coords = 0;
    std::string worst;  // "param[index]" of the worst coordinate
    double analytic = 0.0;
    double numeric = 0.0;
    bool pass() const { return max_rel_error < threshold; }
};

inline constexpr double kConvPathThreshold = 1e-6;
inline constexpr double kTransformerPathThreshold = 1e-5;

// ops, attention, blocks, transformer
std::vector<std::string> gradcheck_suite_names();

/// Runs one suite, or every suite for "all", at 64-bit with eval-mode batch
/// norm unless a check names train mode. Finite differences are taken on a
/// long double replica of each check. Throws std::invalid_argument for an
/// unknown suite.
std::vector<CheckRecord> run_gradcheck_suite(std::string_view suite, std::uint64_t seed, double eps = 1e-6);

/// Comma-separated rows with a header; `ok` is false when any row failed.
struct AblationTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    bool ok = true;
    std::string to_csv() const;
};

// Trains the conv toy model with BAv2 once per pooling strategy.
AblationTable ablate_pooling(const TrainConfig& base);

// Six bridge-source configurations on a two-bottleneck chain: tap shapes,
// output shape and a full gradient check per configuration.
AblationTable ablate_sources(std::uint64_t seed);

// Trains the transformer toy model once per integration variant (plus none).
AblationTable ablate_integration(const TrainConfig& base);

}  // namespace banet
