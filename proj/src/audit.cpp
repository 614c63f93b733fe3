#include "banet/audit.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#ifndef BANET_DATA_DIR
#define BANET_DATA_DIR "data"
#endif

namespace banet::audit {

Cost& Cost::operator+=(const Cost& o) {
    params += o.params;
    flops += o.flops;
    attention_params += o.attention_params;
    attention_params_per_channel_bn += o.attention_params_per_channel_bn;
    attention_flops += o.attention_flops;
    return *this;
}

std::vector<BlockSpec> ArchSpec::resolved_blocks() const {
    std::vector<BlockSpec> out;
    std::size_t in = stem_channels;
    std::size_t prev_out = 0;
    for (const auto& st : stages) {
        for (std::size_t b = 0; b < st.blocks; ++b) {
            BlockSpec spec;
            spec.kind = block;
            spec.in_channels = in;
            spec.width = st.width;
            spec.stride = b == 0 ? st.stride : 1;
            spec.attention.kind = attention;
            spec.attention.reduction = reduction;
            spec.prev_out_channels = prev_out;
            out.push_back(spec);
            in = spec.out_channels();
            prev_out = in;
        }
    }
    return out;
}

std::size_t ArchSpec::block_count() const {
    std::size_t n = 0;
    for (const auto& st : stages) n += st.blocks;
    return n;
}

ArchSpec build_arch(std::string_view backbone, AttentionKind attention, std::size_t reduction) {
    ArchSpec spec;
    spec.name = std::string(backbone);
    spec.attention = attention;
    spec.reduction = reduction;
    std::vector<std::size_t> plan;
    if (backbone == "resnet18") {
        spec.block = BlockKind::basic;
        plan = {2, 2, 2, 2};
    } else if (backbone == "resnet34") {
        spec.block = BlockKind::basic;
        plan = {3, 4, 6, 3};
    } else if (backbone == "resnet50") {
        spec.block = BlockKind::bottleneck;
        plan = {3, 4, 6, 3};
    } else if (backbone == "resnet101") {
        spec.block = BlockKind::bottleneck;
        plan = {3, 4, 23, 3};
    } else {
        throw std::invalid_argument("unknown backbone '" + std::string(backbone) + "'");
    }
    const std::size_t widths[] = {64, 128, 256, 512};
    for (std::size_t i = 0; i < 4; ++i) spec.stages.push_back({plan[i], widths[i], i == 0 ? 1u : 2u});
    return spec;
}

namespace {

using u64 = std::uint64_t;

u64 conv_macs(u64 cin, u64 cout, u64 k, u64 out_size) { return cout * cin * k * k * out_size * out_size; }

// Pooling cost: one op per element read per statistic.
u64 pool_ops(const PoolingStrategy& p, u64 channels, u64 area) { return p.statistics() * channels * area; }

}  // namespace

Cost block_cost(const BlockSpec& spec, std::size_t in_size) {
    if (spec.kind == BlockKind::transformer) throw std::invalid_argument("block_cost: residual blocks only");
    const u64 w = spec.width, out = spec.out_channels(), cin = spec.in_channels;
    const u64 in_sz = in_size;
    const u64 out_sz = (in_size - 1) / spec.stride + 1;
    const u64 in_area = in_sz * in_sz, out_area = out_sz * out_sz;
    Cost c;
    // (channels, area) of every conv stage output, in tap order conv1, conv2, adjacent.
    u64 conv1_area = 0;
    if (spec.kind == BlockKind::bottleneck) {
        c.params += cin * w + w * w * 9 + w * out;
        c.flops += conv_macs(cin, w, 1, in_sz) + conv_macs(w, w, 3, out_sz) + conv_macs(w, out, 1, out_sz);
        c.params += 2 * (w + w + out);                    // bn1..bn3
        c.flops += w * in_area + w * out_area + out * out_area;  // bn
        c.flops += w * in_area + w * out_area;                 // relu after bn1, bn2
        conv1_area = in_area;
    } else {
        c.params += cin * w * 9 + w * w * 9;
        c.flops += conv_macs(cin, w, 3, out_sz) + conv_macs(w, w, 3, out_sz);
        c.params += 2 * (w + w);
        c.flops += 2 * w * out_area;  // bn
        c.flops += w * out_area;      // relu after bn1
        conv1_area = out_area;
    }
    if (spec.has_downsample()) {
        c.params += cin * out + 2 * out;
        c.flops += conv_macs(cin, out, 1, out_sz) + out * out_area;
    }
    c.flops += out * out_area;  // residual add
    c.flops += out * out_area;  // final relu

    const AttentionConfig& a = spec.attention;
    if (a.kind == AttentionKind::none) return c;
    const u64 red = out / a.reduction;
    const std::size_t s = a.pooling.statistics();
    u64 af = 0;
    std::vector<std::size_t> widths;
    if (a.kind == AttentionKind::se) {
        af += pool_ops(a.pooling, out, out_area) + red * s * out;
        widths = {out};
    } else {
        BridgeSourceConfig src = a.sources.value_or(BridgeSourceConfig::all_convs(spec.kind));
        src.validate(spec.kind);
        for (Tap t : src.sources) {
            u64 ch = 0, area = 0;
            switch (t) {
                case Tap::curr_conv1: ch = w; area = conv1_area; break;
                case Tap::curr_conv2: ch = w; area = out_area; break;
                case Tap::adjacent: ch = out; area = out_area; break;
                case Tap::prev_conv_last:
                case Tap::prev_end: ch = spec.prev_out_channels; area = in_area; break;
                case Tap::prev_attn: ch = spec.prev_out_channels; area = 1; break;
            }
            if (ch == 0) throw std::invalid_argument("block_cost: tap " + to_string(t) + " has no predecessor");
            widths.push_back(ch);
            af += pool_ops(a.pooling, ch, area) + red * s * ch;
        }
        const u64 n = widths.size();
        af += a.kind == AttentionKind::bav1 ? n * red + (n - 1) * red : n * red + (n - 1) * red + red;
    }
    af += red;              // relu
    af += out * red;        // W2
    af += out;              // sigmoid
    af += out * out_area;   // channel rescale
    const auto actual = attention_param_count(widths, out, a.reduction, a.kind, Counting::actual, s);
    const auto compact = attention_param_count(widths, out, a.reduction, a.kind, Counting::per_channel_bn, s);
    c.attention_params = actual.total();
    c.attention_params_per_channel_bn = compact.total();
    c.attention_flops = af;
    c.params += c.attention_params;
    c.flops += af;
    return c;
}

std::vector<StageCost> stage_costs(const ArchSpec& spec) {
    std::vector<StageCost> out;
    const u64 stem = spec.stem_channels;
    const u64 conv_out = (spec.input_size + 2 * 3 - 7) / 2 + 1;
    const u64 pool_out = (conv_out + 2 * 1 - 3) / 2 + 1;
    StageCost s0{"stem", {}};
    s0.cost.params = spec.in_channels * stem * 49 + 2 * stem;
    s0.cost.flops = conv_macs(spec.in_channels, stem, 7, conv_out) + 2 * stem * conv_out * conv_out  // bn, relu
                    + stem * conv_out * conv_out;                                               // max pool
    out.push_back(s0);

    std::size_t size = pool_out;
    const auto blocks = spec.resolved_blocks();
    std::size_t bi = 0;
    for (std::size_t si = 0; si < spec.stages.size(); ++si) {
        StageCost sc{"layer" + std::to_string(si + 1), {}};
        for (std::size_t b = 0; b < spec.stages[si].blocks; ++b, ++bi) {
            sc.cost += block_cost(blocks[bi], size);
            size = (size - 1) / blocks[bi].stride + 1;
        }
        out.push_back(sc);
    }
    const u64 feat = blocks.empty() ? stem : blocks.back().out_channels();
    StageCost head{"head", {}};
    head.cost.params = feat * spec.classes + spec.classes;
    head.cost.flops = feat * size * size + feat * spec.classes;
    out.push_back(head);
    return out;
}

std::uint64_t count_params(const ArchSpec& spec) {
    std::uint64_t n = 0;
    for (const auto& s : stage_costs(spec)) n += s.cost.params;
    return n;
}

std::uint64_t count_flops(const ArchSpec& spec) {
    std::uint64_t n = 0;
    for (const auto& s : stage_costs(spec)) n += s.cost.flops;
    return n;
}

std::vector<ReferenceCell> parse_reference_table(std::string_view text) {
    std::vector<ReferenceCell> cells;
    std::istringstream in{std::string(text)};
    std::string line;
    bool header_seen = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::istringstream ls(line);
        std::string f;
        while (std::getline(ls, f, ',')) fields.push_back(f);
        if (!header_seen) {
            if (fields != std::vector<std::string>{"backbone", "variant", "params_millions", "flops_g"}) {
                throw FormatError("reference table: unexpected header '" + line + "'");
            }
            header_seen = true;
            continue;
        }
        if (fields.size() != 4) throw FormatError("reference table line " + std::to_string(lineno) + ": 4 fields expected");
        try {
            cells.push_back({fields[0], fields[1], std::stod(fields[2]), std::stod(fields[3])});
        } catch (const std::logic_error&) {
            throw FormatError("reference table line " + std::to_string(lineno) + ": bad number");
        }
    }
    if (!header_seen) throw FormatError("reference table: missing header");
    return cells;
}

std::vector<ReferenceCell> load_reference_table(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open reference table " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_reference_table(ss.str());
}

std::filesystem::path default_reference_path() {
    return std::filesystem::path(BANET_DATA_DIR) / "imagenet_reference.csv";
}

bool AuditReport::params_pass() const {
    return reference && std::abs(params_delta_pct) <= kParamsTolerancePct;
}

bool AuditReport::flops_pass() const {
    return reference && std::abs(flops_delta_pct) <= kFlopsTolerancePct;
}

AuditReport audit_report(const ArchSpec& spec, const std::vector<ReferenceCell>& references) {
    AuditReport r;
    r.arch = spec.name;
    r.attention = spec.attention;
    r.reduction = spec.reduction;
    r.per_stage = stage_costs(spec);
    Cost total;
    for (const auto& s : r.per_stage) total += s.cost;
    r.params_total = total.params;
    r.flops_total = total.flops;
    r.attention_overhead.params = total.attention_params;
    r.attention_overhead.flops = total.attention_flops;
    r.attention_overhead.attention_params = total.attention_params;
    r.attention_overhead.attention_params_per_channel_bn = total.attention_params_per_channel_bn;
    r.attention_overhead.attention_flops = total.attention_flops;
    r.params_total_per_channel_bn = total.params - total.attention_params + total.attention_params_per_channel_bn;
    if (r.params_total != count_params(spec)) throw std::logic_error("audit: stage breakdown does not add up");
    for (const auto& c : references) {
        if (c.backbone == spec.name && c.variant == to_string(spec.attention)) r.reference = c;
    }
    if (r.reference) {
        r.params_delta_pct = 100.0 * (static_cast<double>(r.params_total) / 1e6 - r.reference->params_millions) /
                             r.reference->params_millions;
        r.flops_delta_pct =
            100.0 * (static_cast<double>(r.flops_total) / 1e9 - r.reference->flops_g) / r.reference->flops_g;
    }
    return r;
}

nlohmann::json to_json(const AuditReport& r) {
    using nlohmann::json;
    json stages = json::array();
    for (const auto& s : r.per_stage) {
        stages.push_back({{"name", s.name}, {"params", s.cost.params}, {"flops", s.cost.flops}});
    }
    json j;
    j["arch"] = r.arch;
    j["attention"] = to_string(r.attention);
    j["r"] = r.reduction;
    j["params_total"] = r.params_total;
    j["params_total_per_channel_bn"] = r.params_total_per_channel_bn;
    j["flops_total"] = r.flops_total;
    j["per_stage"] = stages;
    j["attention_overhead"] = {{"params", r.attention_overhead.attention_params},
                               {"params_per_channel_bn", r.attention_overhead.attention_params_per_channel_bn},
                               {"flops", r.attention_overhead.attention_flops}};
    if (r.reference) {
        j["params_paper_ref"] = r.reference->params_millions * 1e6;
        j["flops_paper_ref"] = r.reference->flops_g * 1e9;
        j["delta_pct"] = r.params_delta_pct;
        j["flops_delta_pct"] = r.flops_delta_pct;
        j["status"] = {{"params", r.params_pass() ? "PASS" : "FAIL"}, {"flops", r.flops_pass() ? "PASS" : "FAIL"}};
    } else {
        j["params_paper_ref"] = nullptr;
        j["flops_paper_ref"] = nullptr;
        j["delta_pct"] = nullptr;
        j["flops_delta_pct"] = nullptr;
        j["status"] = {{"params", "NO_REFERENCE"}, {"flops", "NO_REFERENCE"}};
    }
    return j;
}

}  // namespace banet::audit
