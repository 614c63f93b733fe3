#include "banet/models.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

namespace banet {

namespace {

struct ToyStage {
    std::size_t width;
    std::size_t stride;
};

constexpr std::size_t kStemChannels = 16;
constexpr ToyStage kToyPlan[] = {{4, 1}, {8, 2}, {8, 1}, {16, 2}};

}  // namespace

std::size_t ModelConfig::conv_blocks() const {
    if (arch == "toy2") return 2;
    if (arch == "toy3") return 3;
    if (arch == "toy4") return 4;
    throw std::invalid_argument("unknown model '" + arch + "' (expected toy2, toy3, toy4 or transformer)");
}

void ModelConfig::validate() const {
    if (classes < 2) throw std::invalid_argument("model needs at least two classes");
    if (reduction == 0) throw std::invalid_argument("reduction ratio must be positive");
    if (is_transformer()) {
        if (attention == AttentionKind::bav1) throw std::invalid_argument("transformer integrations use bav2 or se");
        return;
    }
    conv_blocks();
    if (sources) sources->validate(BlockKind::bottleneck);
}

template <typename T>
ToyConvNet<T>::ToyConvNet(const ModelConfig& cfg) : Classifier<T>(cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    stem = Conv2d<T>("stem", 3, kStemChannels, 3, 1, 1, rng);
    stem_bn = BatchNorm<T>("stem_bn", kStemChannels);
    const std::size_t n = cfg.conv_blocks();
    blocks.reserve(n);
    std::size_t in = kStemChannels, prev_out = 0;
    for (std::size_t i = 0; i < n; ++i) {
        BlockSpec spec;
        spec.kind = BlockKind::bottleneck;
        spec.in_channels = in;
        spec.width = kToyPlan[i].width;
        spec.stride = kToyPlan[i].stride;
        spec.prev_out_channels = prev_out;
        spec.attention.kind = cfg.attention;
        spec.attention.reduction = cfg.reduction;
        spec.attention.pooling = cfg.pooling;
        if (cfg.sources && (i > 0 || !cfg.sources->needs_predecessor())) spec.attention.sources = cfg.sources;
        blocks.emplace_back("block" + std::to_string(i + 1), spec, rng);
        in = prev_out = spec.out_channels();
    }
    head = Linear<T>("head", in, cfg.classes, true, rng);
}

template <typename T>
Var<T> ToyConvNet<T>::forward(Graph<T>& g, Var<T> images, const ForwardOptions& opts,
                              std::vector<AttentionTrace<T>>* traces) {
    Var<T> h = relu(stem_bn.forward(g, stem.forward(g, images), opts.mode));
    std::vector<BlockTrace<T>> trs(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        h = blocks[i].forward(g, h, opts, i ? &trs[i - 1] : nullptr, &trs[i]);
    }
    if (traces) {
        traces->clear();
        for (auto& t : trs) {
            if (t.weights.valid()) traces->push_back({t.squeezed, t.weights});
        }
    }
    return head.forward(g, gap(h));
}

template <typename T>
std::vector<Parameter<T>*> ToyConvNet<T>::parameters() {
    std::vector<Parameter<T>*> out;
    stem.parameters(out);
    stem_bn.parameters(out);
    for (auto& b : blocks) {
        for (auto* p : b.parameters()) out.push_back(p);
    }
    head.parameters(out);
    return out;
}

template <typename T>
std::vector<BatchNorm<T>*> ToyConvNet<T>::batchnorms() {
    std::vector<BatchNorm<T>*> out{&stem_bn};
    for (auto& b : blocks) {
        for (auto* bn : b.batchnorms()) out.push_back(bn);
    }
    return out;
}

template <typename T>
ToyTransformer<T>::ToyTransformer(const ModelConfig& cfg) : Classifier<T>(cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    embed = Linear<T>("embed", 3 * kPatch * kPatch, kDim, true, rng);
    TransformerSpec spec;
    spec.dim = kDim;
    spec.heads = 2;
    spec.reduction = cfg.reduction;
    spec.pooling = cfg.pooling;
    spec.integration = cfg.attention == AttentionKind::none ? Integration::none : cfg.integration;
    if (cfg.attention == AttentionKind::se && spec.integration != Integration::se_mlp) {
        throw std::invalid_argument("se attention in the transformer requires the se_mlp integration");
    }
    stage.emplace("stage", spec, rng);
    head = Linear<T>("head", kDim, cfg.classes, true, rng);
}

template <typename T>
Var<T> ToyTransformer<T>::forward(Graph<T>& g, Var<T> images, const ForwardOptions& opts,
                                  std::vector<AttentionTrace<T>>* traces) {
    Var<T> tokens = embed.forward(g, patchify(images, kPatch));
    std::vector<TransformerTrace<T>> trs;
    TransformerTrace<T> st;
    Var<T> h = stage->forward(g, tokens, opts, &trs, &st);
    if (traces) {
        traces->clear();
        for (auto& t : trs) {
            if (t.weights.valid()) traces->push_back({t.squeezed, t.weights});
        }
        if (st.weights.valid()) traces->push_back({st.squeezed, st.weights});
    }
    return head.forward(g, token_mean(h));
}

template <typename T>
std::vector<Parameter<T>*> ToyTransformer<T>::parameters() {
    std::vector<Parameter<T>*> out;
    embed.parameters(out);
    for (auto* p : stage->parameters()) out.push_back(p);
    head.parameters(out);
    return out;
}

template <typename T>
std::vector<BatchNorm<T>*> ToyTransformer<T>::batchnorms() {
    return stage->batchnorms();
}

template <typename T>
std::unique_ptr<Classifier<T>> make_model(const ModelConfig& cfg) {
    if (cfg.is_transformer()) return std::make_unique<ToyTransformer<T>>(cfg);
    return std::make_unique<ToyConvNet<T>>(cfg);
}

// Checkpoint layout, little-endian host order:
//   "BANETCK1", u64 entry count, then per entry:
//   u64 name length, name bytes, u64 rank, u64 extents..., f64 values...
// Running statistics are stored as "<bn>.running_mean" / "<bn>.running_var".
namespace {

constexpr char kMagic[8] = {'B', 'A', 'N', 'E', 'T', 'C', 'K', '1'};

std::string bn_prefix(const std::string& gamma_name) {
    const std::string suffix = ".gamma";
    return gamma_name.ends_with(suffix) ? gamma_name.substr(0, gamma_name.size() - suffix.size()) : gamma_name;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> checkpoint_entries(Classifier<T>& model) {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto* p : model.parameters()) out.emplace_back(p->name, &p->value);
    for (auto* bn : model.batchnorms()) {
        const std::string pre = bn_prefix(bn->gamma.name);
        out.emplace_back(pre + ".running_mean", &bn->state.running_mean);
        out.emplace_back(pre + ".running_var", &bn->state.running_var);
    }
    return out;
}

void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("checkpoint truncated");
    return v;
}

}  // namespace

template <typename T>
void save_checkpoint(Classifier<T>& model, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write " + path.string());
    auto entries = checkpoint_entries(model);
    os.write(kMagic, sizeof kMagic);
    write_u64(os, entries.size());
    for (auto& [name, t] : entries) {
        write_u64(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u64(os, t->rank());
        for (std::size_t d : t->shape()) write_u64(os, d);
        for (T v : t->data()) {
            const double d = static_cast<double>(v);
            os.write(reinterpret_cast<const char*>(&d), sizeof d);
        }
    }
    if (!os) throw FormatError("failed writing " + path.string());
}

template <typename T>
void load_checkpoint(Classifier<T>& model, const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    char magic[sizeof kMagic];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw FormatError(path.string() + " is not a checkpoint");
    }
    std::map<std::string, Tensor<double>> stored;
    const std::uint64_t count = read_u64(is);
    for (std::uint64_t e = 0; e < count; ++e) {
        const std::uint64_t len = read_u64(is);
        if (len > 4096) throw FormatError("checkpoint: implausible name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint truncated");
        const std::uint64_t rank = read_u64(is);
        if (rank > 8) throw FormatError("checkpoint: implausible rank");
        Shape shape(rank);
        for (auto& d : shape) d = read_u64(is);
        std::vector<double> values(shape_size(shape));
        if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)))) {
            throw FormatError("checkpoint truncated");
        }
        stored.emplace(std::move(name), Tensor<double>(shape, std::move(values)));
    }
    for (auto& [name, t] : checkpoint_entries(model)) {
        auto it = stored.find(name);
        if (it == stored.end()) throw FormatError("checkpoint is missing " + name);
        if (it->second.shape() != t->shape()) throw FormatError("checkpoint shape mismatch for " + name);
        *t = it->second.template cast<T>();
    }
}

template <typename T>
std::vector<cka::BlockFeatures> collect_block_features(Classifier<T>& model, const Dataset& data, std::size_t m,
                                                       std::size_t batch) {
    if (m < 2) throw std::invalid_argument("importance_matrix: need at least two samples");
    if (m > data.size()) throw std::invalid_argument("importance_matrix: more samples requested than available");
    const AttentionKind kind = model.config().attention;
    if (kind != AttentionKind::bav1 && kind != AttentionKind::bav2) {
        throw std::invalid_argument("importance_matrix: model has no bridge attention");
    }
    if (batch == 0) batch = m;

    std::vector<std::vector<std::vector<double>>> squeezed;  // [block][branch] rows flattened
    std::vector<std::vector<double>> weights;
    std::vector<std::vector<std::size_t>> widths;
    std::vector<std::size_t> weight_width;
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t start = 0; start < m; start += batch) {
        const std::size_t len = std::min(batch, m - start);
        std::span<const std::size_t> rows(idx.data() + start, len);
        Graph<T> g;
        std::vector<AttentionTrace<T>> traces;
        model.forward(g, g.constant(data.batch_images<T>(rows)), ForwardOptions{Mode::eval, false}, &traces);
        if (start == 0) {
            squeezed.resize(traces.size());
            weights.resize(traces.size());
            widths.resize(traces.size());
            weight_width.resize(traces.size());
            for (std::size_t b = 0; b < traces.size(); ++b) {
                squeezed[b].resize(traces[b].squeezed.size());
                for (auto& s : traces[b].squeezed) widths[b].push_back(s.shape()[1]);
                weight_width[b] = traces[b].weights.shape()[1];
            }
        }
        for (std::size_t b = 0; b < traces.size(); ++b) {
            for (std::size_t i = 0; i < traces[b].squeezed.size(); ++i) {
                for (T v : traces[b].squeezed[i].value().data()) squeezed[b][i].push_back(static_cast<double>(v));
            }
            for (T v : traces[b].weights.value().data()) weights[b].push_back(static_cast<double>(v));
        }
    }
    std::vector<cka::BlockFeatures> out(squeezed.size());
    for (std::size_t b = 0; b < squeezed.size(); ++b) {
        for (std::size_t i = 0; i < squeezed[b].size(); ++i) {
            out[b].squeezed.emplace_back(Shape{m, widths[b][i]}, std::move(squeezed[b][i]));
        }
        out[b].weights = cka::Matrix(Shape{m, weight_width[b]}, std::move(weights[b]));
    }
    return out;
}

template <typename T>
cka::CkaMatrix importance_matrix(Classifier<T>& model, const Dataset& data, std::size_t m, std::size_t batch) {
    return cka::importance_matrix(collect_block_features(model, data, m, batch));
}

#define BANET_INSTANTIATE_MODELS(T)                                                                            \
    template class ToyConvNet<T>;                                                                              \
    template class ToyTransformer<T>;                                                                          \
    template std::unique_ptr<Classifier<T>> make_model<T>(const ModelConfig&);                                 \
    template void save_checkpoint<T>(Classifier<T>&, const std::filesystem::path&);                            \
    template void load_checkpoint<T>(Classifier<T>&, const std::filesystem::path&);                            \
    template std::vector<cka::BlockFeatures> collect_block_features<T>(Classifier<T>&, const Dataset&,         \
                                                                       std::size_t, std::size_t);              \
    template cka::CkaMatrix importance_matrix<T>(Classifier<T>&, const Dataset&, std::size_t, std::size_t);

BANET_INSTANTIATE_MODELS(float)
BANET_INSTANTIATE_MODELS(double)

}  // namespace banet
