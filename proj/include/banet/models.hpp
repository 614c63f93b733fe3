#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "banet/cka.hpp"
#include "banet/data.hpp"
#include "banet/transformer.hpp"

namespace banet {

struct ModelConfig {
    // toy2 | toy3 | toy4 (conv net with that many blocks) or transformer
    std::string arch = "toy4";
    AttentionKind attention = AttentionKind::bav2;
    std::size_t reduction = 4;
    PoolingStrategy pooling;
    // Applied to every block that has a predecessor when it names prev_* taps;
    // the first block then keeps the all-convs default.
    std::optional<BridgeSourceConfig> sources;
    Integration integration = Integration::ba_mlp;  // transformer only
    std::size_t classes = 4;
    std::uint64_t seed = 0;

    bool is_transformer() const { return arch == "transformer"; }
    std::size_t conv_blocks() const;
    void validate() const;
};

// Squeezed features and weights of one attention module in one forward pass.
template <typename T>
struct AttentionTrace {
    std::vector<Var<T>> squeezed;
    Var<T> weights;
};

/// Image classifier producing logits [N, classes] from images [N,3,H,W].
template <typename T>
class Classifier {
public:
    virtual ~Classifier() = default;
    virtual Var<T> forward(Graph<T>& g, Var<T> images, const ForwardOptions& opts,
                           std::vector<AttentionTrace<T>>* traces = nullptr) = 0;
    virtual std::vector<Parameter<T>*> parameters() = 0;
    virtual std::vector<BatchNorm<T>*> batchnorms() = 0;
    const ModelConfig& config() const { return config_; }

protected:
    explicit Classifier(ModelConfig cfg) : config_(std::move(cfg)) {}
    ModelConfig config_;
};

/// 3x3 stem (3 -> 16) then bottleneck blocks of widths 4, 8 (stride 2), 8,
/// 16 (stride 2), reduction 4 by default, global average pool and a linear head.
template <typename T>
class ToyConvNet : public Classifier<T> {
public:
    explicit ToyConvNet(const ModelConfig& cfg);
    Var<T> forward(Graph<T>& g, Var<T> images, const ForwardOptions& opts,
                   std::vector<AttentionTrace<T>>* traces = nullptr) override;
    std::vector<Parameter<T>*> parameters() override;
    std::vector<BatchNorm<T>*> batchnorms() override;

    Conv2d<T> stem;
    BatchNorm<T> stem_bn;
    std::vector<ResidualBlock<T>> blocks;
    Linear<T> head;
};

/// 8x8 patch embedding (width 16), one two-block transformer stage, token
/// mean pooling and a linear head.
template <typename T>
class ToyTransformer : public Classifier<T> {
public:
    static constexpr std::size_t kPatch = 8;
    static constexpr std::size_t kDim = 16;

    explicit ToyTransformer(const ModelConfig& cfg);
    Var<T> forward(Graph<T>& g, Var<T> images, const ForwardOptions& opts,
                   std::vector<AttentionTrace<T>>* traces = nullptr) override;
    std::vector<Parameter<T>*> parameters() override;
    std::vector<BatchNorm<T>*> batchnorms() override;

    Linear<T> embed;
    std::optional<TransformerStage<T>> stage;
    Linear<T> head;
};

template <typename T>
std::unique_ptr<Classifier<T>> make_model(const ModelConfig& cfg);

// Parameters plus batch-norm running statistics, keyed by parameter name.
template <typename T>
void save_checkpoint(Classifier<T>& model, const std::filesystem::path& path);
template <typename T>
void load_checkpoint(Classifier<T>& model, const std::filesystem::path& path);

/// Runs the first m samples through the model in eval mode and scores every
/// squeezed branch feature against its block's attention weights. Throws
/// std::invalid_argument when m < 2, m exceeds the dataset, or the model has
/// no bridge attention.
template <typename T>
cka::CkaMatrix importance_matrix(Classifier<T>& model, const Dataset& data, std::size_t m, std::size_t batch = 64);

template <typename T>
std::vector<cka::BlockFeatures> collect_block_features(Classifier<T>& model, const Dataset& data, std::size_t m,
                                                       std::size_t batch = 64);

}  // namespace banet
