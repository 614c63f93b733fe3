#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <map>
#include <random>

#include "banet/audit.hpp"

using namespace banet;
using namespace banet::audit;

namespace {

const std::vector<ReferenceCell>& references() {
    static const auto cells = load_reference_table(default_reference_path());
    return cells;
}

// Reference cells, written out independently of the data file.
struct Cell {
    const char* backbone;
    AttentionKind attn;
    double params_m;
    double flops_g;
};

const Cell kTable[] = {
    {"resnet50", AttentionKind::none, 25.56, 4.13},  {"resnet50", AttentionKind::se, 28.07, 4.14},
    {"resnet50", AttentionKind::bav1, 28.71, 4.15},  {"resnet50", AttentionKind::bav2, 28.70, 4.15},
    {"resnet101", AttentionKind::none, 44.55, 7.87}, {"resnet101", AttentionKind::se, 49.29, 7.88},
    {"resnet101", AttentionKind::bav1, 50.49, 7.89}, {"resnet101", AttentionKind::bav2, 50.48, 7.89},
};

}  // namespace

TEST(BuildArch, StagePlans) {
    EXPECT_EQ(build_arch("resnet50", AttentionKind::none).block_count(), 16u);
    EXPECT_EQ(build_arch("resnet101", AttentionKind::none).block_count(), 33u);
    EXPECT_EQ(build_arch("resnet18", AttentionKind::none).block_count(), 8u);
    EXPECT_EQ(build_arch("resnet34", AttentionKind::none).block_count(), 16u);
    EXPECT_THROW(build_arch("resnet152", AttentionKind::none), std::invalid_argument);
}

TEST(BuildArch, BridgeBlocksUseEveryConv) {
    const auto blocks = build_arch("resnet101", AttentionKind::bav2).resolved_blocks();
    ASSERT_EQ(blocks.size(), 33u);
    for (const auto& b : blocks) {
        EXPECT_EQ(b.attention.kind, AttentionKind::bav2);
        EXPECT_EQ(b.attention.sources.value_or(BridgeSourceConfig::all_convs(b.kind)).sources.size(), 3u);
    }
    for (const auto& b : build_arch("resnet34", AttentionKind::bav1).resolved_blocks()) {
        EXPECT_EQ(b.attention.sources.value_or(BridgeSourceConfig::all_convs(b.kind)).sources.size(), 2u);
    }
}

TEST(CountFlops, PointwiseConvClosedForm) {
    BlockSpec s;
    s.kind = BlockKind::bottleneck;
    s.in_channels = 256;
    s.width = 64;
    const Cost c = block_cost(s, 56);
    // conv1 is 256->64 and conv3 64->256, both 1x1 at 56x56.
    EXPECT_GE(c.flops, 2u * 64u * 256u * 56u * 56u);
    EXPECT_EQ(64ull * 256ull * 56ull * 56ull, 51380224ull);
}

TEST(CountFlops, SeOverheadIsAboutTenMega) {
    const double base = static_cast<double>(count_flops(build_arch("resnet50", AttentionKind::none)));
    const double se = static_cast<double>(count_flops(build_arch("resnet50", AttentionKind::se)));
    EXPECT_NEAR((se - base) / 1e9, 0.01, 0.01);
}

TEST(ReferenceCells, ParamsAndFlopsWithinTolerance) {
    for (const Cell& cell : kTable) {
        const ArchSpec spec = build_arch(cell.backbone, cell.attn);
        const double p = static_cast<double>(count_params(spec));
        const double f = static_cast<double>(count_flops(spec));
        EXPECT_LE(std::abs(p / (cell.params_m * 1e6) - 1.0) * 100.0, 0.5) << cell.backbone << " " << to_string(cell.attn);
        EXPECT_LE(std::abs(f / (cell.flops_g * 1e9) - 1.0) * 100.0, 2.0) << cell.backbone << " " << to_string(cell.attn);
    }
}

TEST(ReferenceCells, DataFileMatchesTable) {
    ASSERT_EQ(references().size(), 8u);
    for (const Cell& cell : kTable) {
        bool found = false;
        for (const auto& r : references()) {
            if (r.backbone == cell.backbone && r.variant == to_string(cell.attn)) {
                found = true;
                EXPECT_DOUBLE_EQ(r.params_millions, cell.params_m);
                EXPECT_DOUBLE_EQ(r.flops_g, cell.flops_g);
            }
        }
        EXPECT_TRUE(found) << cell.backbone << " " << to_string(cell.attn);
    }
}

TEST(ReferenceCells, Bav2IsSlightlySmallerThanBav1) {
    const auto v1 = count_params(build_arch("resnet50", AttentionKind::bav1));
    const auto v2 = count_params(build_arch("resnet50", AttentionKind::bav2));
    EXPECT_LT(v2, v1);
    EXPECT_NEAR((static_cast<double>(v1) - static_cast<double>(v2)) / 1e6, 0.01, 0.01);
}

TEST(Report, PassFlagsAndAdditivity) {
    for (const char* backbone : {"resnet18", "resnet34", "resnet50", "resnet101"}) {
        for (AttentionKind a : {AttentionKind::none, AttentionKind::se, AttentionKind::bav1, AttentionKind::bav2}) {
            const AuditReport r = audit_report(build_arch(backbone, a), references());
            Cost sum;
            for (const auto& s : r.per_stage) sum += s.cost;
            EXPECT_EQ(sum.params, r.params_total);
            EXPECT_EQ(sum.flops, r.flops_total);
            EXPECT_EQ(sum.attention_params, r.attention_overhead.params);
            if (r.reference) {
                EXPECT_TRUE(r.pass()) << backbone << " " << to_string(a);
            }
            if (a == AttentionKind::none) {
                EXPECT_EQ(r.attention_overhead.params, 0u);
                EXPECT_EQ(r.attention_overhead.flops, 0u);
            }
        }
    }
}

TEST(Report, DeltaFlagsFailure) {
    std::vector<ReferenceCell> wrong{{"resnet50", "bav2", 27.0, 4.15}};
    const AuditReport r = audit_report(build_arch("resnet50", AttentionKind::bav2), wrong);
    EXPECT_FALSE(r.params_pass());
    EXPECT_TRUE(r.flops_pass());
}

TEST(Report, MonotoneInAttention) {
    for (const char* backbone : {"resnet18", "resnet34", "resnet50", "resnet101"}) {
        const ArchSpec base = build_arch(backbone, AttentionKind::none);
        for (AttentionKind a : {AttentionKind::se, AttentionKind::bav1, AttentionKind::bav2}) {
            EXPECT_GT(count_params(build_arch(backbone, a)), count_params(base));
            EXPECT_GT(count_flops(build_arch(backbone, a)), count_flops(base));
        }
    }
}

// Symbolic block costs against instantiated blocks, and the closed-form
// integration extras for every distinct ResNet-50 bottleneck.
TEST(Consistency, SymbolicEqualsInstantiated) {
    for (AttentionKind a : {AttentionKind::none, AttentionKind::se, AttentionKind::bav1, AttentionKind::bav2}) {
        const ArchSpec arch = build_arch("resnet50", a);
        std::map<std::tuple<std::size_t, std::size_t, std::size_t>, bool> seen;
        for (const BlockSpec& b : arch.resolved_blocks()) {
            if (!seen.emplace(std::tuple{b.in_channels, b.width, b.stride}, true).second) continue;
            std::mt19937_64 rng(0);
            ResidualBlock<float> block("b", b, rng);
            const Cost c = block_cost(b, 56);
            EXPECT_EQ(c.params, count_elements(block.parameters()));
            if (a == AttentionKind::none) continue;
            const auto attn = block.attention_parameters();
            EXPECT_EQ(c.attention_params, count_elements(attn));
            if (a == AttentionKind::se) continue;
            const auto compact = enumerate_attention_params(attn, a, Counting::per_channel_bn);
            EXPECT_EQ(c.attention_params_per_channel_bn, compact.total());
            const std::size_t n = 3, cn = b.out_channels(), r = 16;
            EXPECT_EQ(compact.extras(), a == AttentionKind::bav1 ? n * (cn / r) : n + cn / r);
        }
    }
}

TEST(Runtime, AllCellsUnderFiveSeconds) {
    const auto start = std::chrono::steady_clock::now();
    for (const Cell& cell : kTable) (void)audit_report(build_arch(cell.backbone, cell.attn), references());
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 5.0);
}

TEST(ReferenceTable, ParsesCommentsAndRejectsGarbage) {
    const auto cells = parse_reference_table("# note\nbackbone,variant,params_millions,flops_g\nresnet50,se,28.07,4.14\n");
    ASSERT_EQ(cells.size(), 1u);
    EXPECT_EQ(cells[0].variant, "se");
    EXPECT_ANY_THROW(parse_reference_table("backbone,variant,params_millions,flops_g\nresnet50,se,abc,4.14\n"));
}
