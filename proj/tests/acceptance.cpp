// One PASS/FAIL line per acceptance criterion; exits nonzero when any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "banet/audit.hpp"
#include "banet/cka.hpp"
#include "banet/suites.hpp"
#include "banet/train.hpp"
#include "support/schema.hpp"

using namespace banet;

namespace {

using Clock = std::chrono::steady_clock;
using T4 = Tensor<double>;

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

T4 random(Shape s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return T4::normal(std::move(s), 0.0, 1.0, rng);
}

struct Cell {
    const char* backbone;
    AttentionKind attn;
    double params_m;
    double flops_g;
};

const Cell kCells[] = {
    {"resnet50", AttentionKind::none, 25.56, 4.13},  {"resnet50", AttentionKind::se, 28.07, 4.14},
    {"resnet50", AttentionKind::bav1, 28.71, 4.15},  {"resnet50", AttentionKind::bav2, 28.70, 4.15},
    {"resnet101", AttentionKind::none, 44.55, 7.87}, {"resnet101", AttentionKind::se, 49.29, 7.88},
    {"resnet101", AttentionKind::bav1, 50.49, 7.89}, {"resnet101", AttentionKind::bav2, 50.48, 7.89},
};

void table_cells(Outcome& o, bool flops) {
    const auto start = Clock::now();
    double worst = 0.0;
    for (const Cell& c : kCells) {
        const auto spec = audit::build_arch(c.backbone, c.attn);
        const double got = static_cast<double>(flops ? audit::count_flops(spec) : audit::count_params(spec));
        const double ref = flops ? c.flops_g * 1e9 : c.params_m * 1e6;
        const double delta = std::abs(got / ref - 1.0) * 100.0;
        worst = std::max(worst, delta);
        o.require(delta <= (flops ? 2.0 : 0.5), std::string(c.backbone) + "+" + to_string(c.attn));
    }
    const double t = seconds_since(start);
    o.require(t < 5.0, "runtime");
    o.detail << "worst delta " << worst << "% over 8 cells, " << t << " s";
}

Outcome params_criterion() {
    Outcome o;
    table_cells(o, false);
    return o;
}

Outcome flops_criterion() {
    Outcome o;
    table_cells(o, true);
    return o;
}

Outcome arithmetic_criterion() {
    Outcome o;
    std::size_t checked = 0;
    for (AttentionKind kind : {AttentionKind::bav1, AttentionKind::bav2}) {
        std::map<std::size_t, bool> widths;
        for (const BlockSpec& b : audit::build_arch("resnet50", kind).resolved_blocks()) {
            if (!widths.emplace(b.width, true).second) continue;
            const std::size_t n = 3, cn = b.out_channels(), r = b.attention.reduction;
            const std::size_t expect = kind == AttentionKind::bav1 ? n * (cn / r) : n + cn / r;
            std::mt19937_64 rng(0);
            ResidualBlock<float> block("b", b, rng);
            const auto enumerated = enumerate_attention_params(block.attention_parameters(), kind, Counting::per_channel_bn);
            const auto closed = attention_param_count(block.ba->branch_widths(), cn, r, kind, Counting::per_channel_bn);
            const std::string tag = to_string(kind) + " C_n=" + std::to_string(cn);
            o.require(enumerated.extras() == expect, tag + " enumerated extras");
            o.require(attention_extra_params(n, cn, r, kind, Counting::per_channel_bn) == expect, tag + " formula");
            o.require(closed == enumerated, tag + " closed form vs modules");
            o.require(audit::block_cost(b, 56).attention_params_per_channel_bn == enumerated.total(), tag + " audit");
            ++checked;
        }
    }
    o.detail << checked << " (variant, width) pairs";
    return o;
}

Outcome gradient_criterion() {
    Outcome o;
    const auto start = Clock::now();
    const auto records = run_gradcheck_suite("all", 0);
    const double t = seconds_since(start);
    double worst_ratio = 0.0;
    for (const auto& r : records) {
        const bool transformer_path = r.suite == "transformer" || r.name == "layernorm" || r.name == "mhsa";
        const double limit = transformer_path ? kTransformerPathThreshold : kConvPathThreshold;
        o.require(r.max_rel_error < limit, r.suite + "/" + r.name + " above the criterion limit");
        o.require(r.pass(), r.suite + "/" + r.name);
        worst_ratio = std::max(worst_ratio, r.max_rel_error / r.threshold);
    }
    o.require(!records.empty(), "no checks ran");
    o.require(t < 120.0, "runtime");
    o.detail << records.size() << " checks, worst error/threshold " << worst_ratio << ", " << t << " s";
    return o;
}

BlockSpec small_block(BlockKind kind, AttentionKind attn) {
    BlockSpec s;
    s.kind = kind;
    s.in_channels = kind == BlockKind::bottleneck ? 16 : 8;
    s.width = 8;
    s.attention.kind = attn;
    s.attention.reduction = 2;
    return s;
}

void perturb(const std::vector<BatchNorm<double>*>& bns, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> pos(0.5, 1.5), any(-0.5, 0.5);
    for (auto* bn : bns) {
        for (auto& v : bn->gamma.value.data()) v = pos(rng);
        for (auto& v : bn->beta.value.data()) v = any(rng);
        for (auto& v : bn->state.running_mean.data()) v = any(rng);
        for (auto& v : bn->state.running_var.data()) v = pos(rng);
    }
}

Outcome degeneracy_criterion() {
    Outcome o;
    // (a) single adjacent source, f = 1, identity generation BN against SE.
    for (PoolKind kind : {PoolKind::avg, PoolKind::avg_max, PoolKind::avg_std, PoolKind::dct}) {
        const PoolingStrategy pooling{kind, 4};
        std::mt19937_64 rng(1);
        SeAttention<double> se("se", 16, 4, pooling, rng);
        BridgeAttention<double> ba("ba", AttentionKind::bav2, {16}, 16, 4, pooling, rng);
        ba.branch_proj[0].value = se.w1.value;
        ba.w2.value = se.w2.value;
        ba.fusion.value.fill(1.0);
        ba.gen_bn.set_identity();
        Graph<double> g;
        std::vector<Var<double>> xs{g.constant(random({4, 16, 3, 3}, 2))};
        o.require(se.forward(g, xs[0]).value() == ba.forward(g, xs, Mode::eval).value(), "(a) " + to_string(kind));
    }
    // (b) unit fusion and identity BNs: BAv2 against BAv1.
    {
        std::mt19937_64 r1(3), r2(3);
        BridgeAttention<double> v2("ba", AttentionKind::bav2, {4, 8, 16}, 16, 4, {}, r1);
        BridgeAttention<double> v1("ba", AttentionKind::bav1, {4, 8, 16}, 16, 4, {}, r2);
        for (std::size_t i = 0; i < 3; ++i) v1.branch_proj[i].value = v2.branch_proj[i].value;
        v1.w2.value = v2.w2.value;
        v2.fusion.value.fill(1.0);
        v2.gen_bn.set_identity();
        for (auto& bn : v1.branch_bn) bn.set_identity();
        Graph<double> g;
        std::vector<Var<double>> xs{g.constant(random({3, 4, 4, 4}, 4)), g.constant(random({3, 8, 4, 4}, 5)),
                                    g.constant(random({3, 16, 2, 2}, 6))};
        o.require(v2.forward(g, xs, Mode::eval).value() == v1.forward(g, xs, Mode::eval).value(), "(b)");
    }
    // (c) bypass against the attention-free block.
    std::size_t blocks = 0;
    for (BlockKind kind : {BlockKind::basic, BlockKind::bottleneck}) {
        for (AttentionKind attn : {AttentionKind::se, AttentionKind::bav1, AttentionKind::bav2}) {
            std::mt19937_64 r1(7), r2(8);
            ResidualBlock<double> with("b", small_block(kind, attn), r1);
            ResidualBlock<double> plain("b", small_block(kind, AttentionKind::none), r2);
            perturb(with.batchnorms(), 9);
            assign_by_name(plain.parameters(), with.parameters());
            auto pb = plain.batchnorms();
            auto wb = with.batchnorms();
            for (std::size_t i = 0; i < pb.size(); ++i) pb[i]->state = wb[i]->state;
            const T4 x = random({2, kind == BlockKind::bottleneck ? 16u : 8u, 6, 6}, 10);
            Graph<double> g;
            const T4 a = with.forward(g, g.constant(x), {Mode::eval, true}).value();
            const T4 b = plain.forward(g, g.constant(x), {Mode::eval, false}).value();
            o.require(a == b, "(c) " + to_string(attn));
            ++blocks;
        }
    }
    o.detail << "SE x4 poolings, BAv1/BAv2, bypass x" << blocks << " blocks, exact at 64-bit";
    return o;
}

double hsic_brute(const cka::Matrix& k, const cka::Matrix& l) {
    const std::size_t m = k.dim(0);
    auto h = [m](std::size_t i, std::size_t j) { return (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(m); };
    double s = 0;
    for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = 0; b < m; ++b)
            for (std::size_t c = 0; c < m; ++c)
                for (std::size_t d = 0; d < m; ++d) s += k(a, b) * h(b, c) * l(c, d) * h(d, a);
    return s / ((m - 1.0) * (m - 1.0));
}

// Q from Gram-Schmidt on a random square matrix.
cka::Matrix random_orthogonal(std::size_t n, std::uint64_t seed) {
    cka::Matrix q = random({n, n}, seed);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t p = 0; p < j; ++p) {
            double dot = 0;
            for (std::size_t i = 0; i < n; ++i) dot += q(i, j) * q(i, p);
            for (std::size_t i = 0; i < n; ++i) q(i, j) -= dot * q(i, p);
        }
        double norm = 0;
        for (std::size_t i = 0; i < n; ++i) norm += q(i, j) * q(i, j);
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < n; ++i) q(i, j) /= norm;
    }
    return q;
}

cka::Matrix matmul(const cka::Matrix& a, const cka::Matrix& b) {
    cka::Matrix out({a.dim(0), b.dim(1)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t k = 0; k < a.dim(1); ++k)
            for (std::size_t j = 0; j < b.dim(1); ++j) out(i, j) += a(i, k) * b(k, j);
    return out;
}

Outcome cka_criterion() {
    Outcome o;
    double worst_self = 0, worst_sym = 0, worst_inv = 0, worst_hsic = 0;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const cka::Matrix x = random({64, 16}, 100 + s), y = random({64, 16}, 200 + s);
        const cka::Matrix k = cka::gram(x), l = cka::gram(y);
        worst_self = std::max(worst_self, std::abs(cka::cka(k, k) - 1.0));
        worst_sym = std::max(worst_sym, std::abs(cka::cka(k, l) - cka::cka(l, k)));
        const double base = cka::cka(k, l);
        cka::Matrix xs = x;
        for (auto& v : xs.data()) v *= -7.5;
        worst_inv = std::max(worst_inv, std::abs(cka::cka(cka::gram(xs), l) - base));
        const cka::Matrix xq = matmul(x, random_orthogonal(16, 300 + s));
        worst_inv = std::max(worst_inv, std::abs(cka::cka(cka::gram(xq), l) - base));
    }
    for (std::size_t m = 2; m <= 8; ++m) {
        const cka::Matrix k = cka::gram(random({m, 3}, 400 + m)), l = cka::gram(random({m, 5}, 500 + m));
        worst_hsic = std::max(worst_hsic, std::abs(cka::hsic(k, l) - hsic_brute(k, l)));
    }
    o.require(worst_self <= 1e-12, "self");
    o.require(worst_sym <= 1e-12, "symmetry");
    o.require(worst_inv <= 1e-10, "invariance");
    o.require(worst_hsic <= 1e-10, "hsic");
    o.detail << "self " << worst_self << ", sym " << worst_sym << ", invariance " << worst_inv << ", hsic "
             << worst_hsic;
    return o;
}

Outcome learning_criterion() {
    Outcome o;
    TrainConfig cfg;
    cfg.model.arch = "toy4";
    cfg.model.attention = AttentionKind::bav2;
    cfg.synth_samples = 256;
    cfg.epochs = 50;
    auto run = [](const TrainConfig& c) {
        return training_precision() == 64 ? train<double>(c) : train<float>(c);
    };
    auto first_hit = [](const TrainResult& r) {
        for (const auto& e : r.epochs)
            if (e.accuracy >= 0.99) return static_cast<long>(e.epoch);
        return -1L;
    };
    const TrainResult a = run(cfg), b = run(cfg);
    bool same = a.epochs.size() == b.epochs.size() && a.final_accuracy == b.final_accuracy;
    for (std::size_t i = 0; same && i < a.epochs.size(); ++i)
        same = a.epochs[i].loss == b.epochs[i].loss && a.epochs[i].accuracy == b.epochs[i].accuracy;
    TrainConfig bypass = cfg;
    bypass.bypass_attention = true;
    const TrainResult c = run(bypass);
    o.require(first_hit(a) >= 0 && a.final_accuracy >= 0.99, "bav2 accuracy");
    o.require(same, "reproducibility");
    o.require(first_hit(c) >= 0 && c.final_accuracy >= 0.99, "bypass convergence");
    o.detail << "bav2 hits 99% at epoch " << first_hit(a) << " (final " << a.final_accuracy << "), bypass at epoch "
             << first_hit(c) << " (final " << c.final_accuracy << "), rerun " << (same ? "identical" : "differs");
    return o;
}

Outcome format_criterion() {
    Outcome o;
    // CIFAR: a crafted file read back through the loader against its own bytes.
    const auto path = std::filesystem::temp_directory_path() / "banet_acceptance_cifar.bin";
    std::vector<std::uint8_t> bytes(3 * kCifarRecordBytes);
    std::mt19937_64 rng(11);
    for (std::size_t r = 0; r < 3; ++r) {
        bytes[r * kCifarRecordBytes] = static_cast<std::uint8_t>(r * 4 + 1);
        for (std::size_t i = 1; i < kCifarRecordBytes; ++i) bytes[r * kCifarRecordBytes + i] = static_cast<std::uint8_t>(rng());
    }
    std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                 static_cast<std::streamsize>(bytes.size()));
    const Dataset d = load_cifar10(path);
    bool exact = d.size() == 3;
    for (std::size_t r = 0; exact && r < 3; ++r) {
        exact = d.labels[r] == bytes[r * kCifarRecordBytes];
        for (std::size_t i = 0; exact && i < 3072; ++i)
            exact = std::lround(d.images[r * 3072 + i] * 255.0) == bytes[r * kCifarRecordBytes + 1 + i];
    }
    o.require(exact, "cifar round trip");
    bool rejects = false;
    try {
        parse_cifar10(std::span(bytes.data(), kCifarRecordBytes - 1));
    } catch (const FormatError&) {
        rejects = true;
    }
    o.require(rejects, "truncated cifar accepted");

    const auto audit_schema = testing::load_json(testing::schema_path("audit_report.schema.json"));
    const auto refs = audit::load_reference_table(audit::default_reference_path());
    std::size_t reports = 0;
    for (const char* backbone : {"resnet18", "resnet34", "resnet50", "resnet101"}) {
        for (AttentionKind a : {AttentionKind::none, AttentionKind::se, AttentionKind::bav1, AttentionKind::bav2}) {
            const auto j = audit::to_json(audit::audit_report(audit::build_arch(backbone, a), refs));
            o.require(testing::validate(j, audit_schema).empty(), std::string("audit schema ") + backbone);
            ++reports;
        }
    }
    const auto cka_schema = testing::load_json(testing::schema_path("cka_matrix.schema.json"));
    TrainConfig cfg;
    cfg.synth_samples = 64;
    auto model = make_model<double>(cfg.model);
    const auto doc = testing::csv_document(importance_matrix(*model, load_dataset(cfg), 64).to_csv());
    o.require(testing::validate(doc, cka_schema).empty(), "cka schema");
    for (const auto& row : doc["rows"]) o.require(row.size() == doc["header"].size(), "ragged cka row");
    o.require(!testing::validate(testing::csv_document("block,S1\nB1,2\n"), cka_schema).empty(), "bad csv accepted");
    o.detail << "3-record CIFAR fixture exact, " << reports << " audit reports and a CKA CSV validated";
    return o;
}

}  // namespace

int main() {
    const std::pair<const char*, std::function<Outcome()>> criteria[] = {
        {"1 parameter counts", params_criterion},   {"2 FLOPs", flops_criterion},
        {"3 parameter arithmetic", arithmetic_criterion}, {"4 gradient suite", gradient_criterion},
        {"5 degeneracies", degeneracy_criterion},   {"6 CKA", cka_criterion},
        {"7 learning check", learning_criterion},   {"8 formats", format_criterion},
    };
    int failed = 0;
    for (const auto& [name, run] : criteria) {
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail << "threw: " << e.what();
        }
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail.str() << std::endl;
        failed += !o.pass;
    }
    std::cout << (failed ? "acceptance: FAIL (" + std::to_string(failed) + " of 8)" : std::string("acceptance: PASS"))
              << std::endl;
    return failed ? 1 : 0;
}
