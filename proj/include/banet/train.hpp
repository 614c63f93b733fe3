#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "banet/models.hpp"

namespace banet {

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
    ModelConfig model;
    OptimizerKind optimizer = OptimizerKind::sgd;
    double lr = 0.01;
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    bool bypass_attention = false;
    // "synthetic" or a CIFAR-10 binary file/directory.
    std::string dataset = "synthetic";
    std::size_t synth_samples = 256;
    std::size_t synth_size = 16;
    // Checkpoint written after training when set.
    std::string checkpoint;

    void validate() const;
};

// Reads TrainConfig field names from a flat JSON object; unknown keys are errors.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
nlohmann::json to_json(const TrainConfig& cfg);

// Loads the configured dataset; synthetic sets use cfg.seed and cfg.model.classes.
Dataset load_dataset(const TrainConfig& cfg);

struct EpochMetrics {
    std::size_t epoch = 0;
    double loss = 0.0;      // mean training cross-entropy over the epoch
    double accuracy = 0.0;  // train-mode accuracy over the epoch's batches
};

struct TrainResult {
    std::vector<EpochMetrics> epochs;
    double final_accuracy = 0.0;  // eval-mode accuracy on the training set
};

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Mini-batch cross-entropy training with a seeded per-epoch shuffle. Throws
/// DivergenceError when the loss becomes non-finite.
template <typename T>
TrainResult train(Classifier<T>& model, const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Builds the model from cfg.model (seeded by cfg.seed) and trains it.
template <typename T>
TrainResult train(const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Index of the largest entry of each row; ties go to the lowest index.
std::vector<int> argmax_rows(const Tensor<double>& logits);
double top1_accuracy(const Tensor<double>& logits, const std::vector<int>& labels);

// Eval-mode top-1 accuracy. Throws std::invalid_argument on an empty dataset.
template <typename T>
double evaluate(Classifier<T>& model, const Dataset& data, std::size_t batch = 64,
                const ForwardOptions& opts = {Mode::eval, false});

// 32 unless BANET_TRAIN_PRECISION=64.
int training_precision();

}  // namespace banet
