#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "banet/blocks.hpp"

// Symbolic parameter and FLOP counting for ImageNet ResNets with channel
// attention, without allocating or executing anything.
namespace banet::audit {

struct StagePlan {
    std::size_t blocks = 0;
    std::size_t width = 0;
    std::size_t stride = 1;
};

struct ArchSpec {
    std::string name;
    BlockKind block = BlockKind::bottleneck;
    std::size_t input_size = 224;
    std::size_t in_channels = 3;
    std::size_t stem_channels = 64;
    std::vector<StagePlan> stages;
    AttentionKind attention = AttentionKind::none;
    std::size_t reduction = 16;
    std::size_t classes = 1000;

    // Every block spec in execution order, attention resolved.
    std::vector<BlockSpec> resolved_blocks() const;
    std::size_t block_count() const;
};

/// Costs in raw units. FLOPs follow the multiply-accumulate convention: a
/// conv costs Cout*Cin*kh*kw*H'*W', a linear Din*Dout, and batch norm,
/// activations, pooling, residual adds and channel rescaling one op per
/// element touched.
struct Cost {
    std::uint64_t params = 0;
    std::uint64_t flops = 0;
    std::uint64_t attention_params = 0;
    std::uint64_t attention_params_per_channel_bn = 0;  // BN charged once per channel
    std::uint64_t attention_flops = 0;

    Cost& operator+=(const Cost& o);
};

struct StageCost {
    std::string name;
    Cost cost;
};

ArchSpec build_arch(std::string_view backbone, AttentionKind attention, std::size_t reduction = 16);

// One residual block at the given input resolution (square).
Cost block_cost(const BlockSpec& spec, std::size_t in_size);

std::vector<StageCost> stage_costs(const ArchSpec& spec);
std::uint64_t count_params(const ArchSpec& spec);
std::uint64_t count_flops(const ArchSpec& spec);

struct ReferenceCell {
    std::string backbone;
    std::string variant;
    double params_millions = 0.0;
    double flops_g = 0.0;
};

// Reads `backbone,variant,params_millions,flops_g` rows; '#' lines are comments.
std::vector<ReferenceCell> load_reference_table(const std::filesystem::path& path);
std::vector<ReferenceCell> parse_reference_table(std::string_view text);

// Default location of the bundled reference table.
std::filesystem::path default_reference_path();

inline constexpr double kParamsTolerancePct = 0.5;
inline constexpr double kFlopsTolerancePct = 2.0;

struct AuditReport {
    std::string arch;
    AttentionKind attention = AttentionKind::none;
    std::size_t reduction = 16;
    std::uint64_t params_total = 0;
    std::uint64_t params_total_per_channel_bn = 0;
    std::uint64_t flops_total = 0;
    std::vector<StageCost> per_stage;
    Cost attention_overhead;
    std::optional<ReferenceCell> reference;
    double params_delta_pct = 0.0;
    double flops_delta_pct = 0.0;

    bool params_pass() const;
    bool flops_pass() const;
    bool pass() const { return params_pass() && flops_pass(); }
};

AuditReport audit_report(const ArchSpec& spec, const std::vector<ReferenceCell>& references);
nlohmann::json to_json(const AuditReport& report);

}  // namespace banet::audit
