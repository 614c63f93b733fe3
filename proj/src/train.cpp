#include "banet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <random>
#include <sstream>

namespace banet {

void TrainConfig::validate() const {
    model.validate();
    if (epochs == 0) throw std::invalid_argument("epochs must be positive");
    if (batch_size < 2) throw std::invalid_argument("batch size must be at least 2 while batch norm trains");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be finite and non-negative");
    if (dataset == "synthetic" && synth_samples < model.classes) {
        throw std::invalid_argument("synthetic dataset needs at least one sample per class");
    }
}

namespace {

OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd or adam)");
}

BridgeSourceConfig parse_sources(const nlohmann::json& j) {
    BridgeSourceConfig cfg;
    if (j.is_string()) {
        std::stringstream ss(j.get<std::string>());
        std::string item;
        while (std::getline(ss, item, '+')) cfg.sources.push_back(parse_tap(item));
    } else {
        for (const auto& e : j) cfg.sources.push_back(parse_tap(e.get<std::string>()));
    }
    return cfg;
}

}  // namespace

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
    if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "model") c.model.arch = v.get<std::string>();
        else if (key == "attention") c.model.attention = parse_attention_kind(v.get<std::string>());
        else if (key == "reduction") c.model.reduction = v.get<std::size_t>();
        else if (key == "pooling") c.model.pooling.kind = parse_pool_kind(v.get<std::string>());
        else if (key == "dct_components") c.model.pooling.dct_components = v.get<std::size_t>();
        else if (key == "sources") c.model.sources = parse_sources(v);
        else if (key == "integration") c.model.integration = parse_integration(v.get<std::string>());
        else if (key == "classes") c.model.classes = v.get<std::size_t>();
        else if (key == "optimizer") c.optimizer = parse_optimizer(v.get<std::string>());
        else if (key == "lr") c.lr = v.get<double>();
        else if (key == "epochs") c.epochs = v.get<std::size_t>();
        else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
        else if (key == "seed") c.seed = v.get<std::uint64_t>();
        else if (key == "bypass_attention") c.bypass_attention = v.get<bool>();
        else if (key == "dataset") c.dataset = v.get<std::string>();
        else if (key == "synth_samples") c.synth_samples = v.get<std::size_t>();
        else if (key == "synth_size") c.synth_size = v.get<std::size_t>();
        else if (key == "checkpoint") c.checkpoint = v.get<std::string>();
        else throw std::invalid_argument("unknown config key '" + key + "'");
    }
    return c;
}

nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["model"] = c.model.arch;
    j["attention"] = to_string(c.model.attention);
    j["reduction"] = c.model.reduction;
    j["pooling"] = to_string(c.model.pooling.kind);
    j["dct_components"] = c.model.pooling.dct_components;
    if (c.model.sources) j["sources"] = c.model.sources->label();
    j["integration"] = to_string(c.model.integration);
    j["classes"] = c.model.classes;
    j["optimizer"] = c.optimizer == OptimizerKind::sgd ? "sgd" : "adam";
    j["lr"] = c.lr;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["seed"] = c.seed;
    j["bypass_attention"] = c.bypass_attention;
    j["dataset"] = c.dataset;
    j["synth_samples"] = c.synth_samples;
    j["synth_size"] = c.synth_size;
    if (!c.checkpoint.empty()) j["checkpoint"] = c.checkpoint;
    return j;
}

Dataset load_dataset(const TrainConfig& cfg) {
    if (cfg.dataset == "synthetic") return synth_dataset(cfg.seed, cfg.synth_samples, cfg.model.classes, cfg.synth_size);
    Dataset d = load_cifar10(cfg.dataset);
    if (cfg.model.classes != d.classes) throw std::invalid_argument("CIFAR-10 needs classes = 10");
    return d;
}

int training_precision() {
    const char* env = std::getenv("BANET_TRAIN_PRECISION");
    if (!env || !*env) return 32;
    const std::string v = env;
    if (v == "32") return 32;
    if (v == "64") return 64;
    throw std::invalid_argument("BANET_TRAIN_PRECISION must be 32 or 64, got '" + v + "'");
}

std::vector<int> argmax_rows(const Tensor<double>& logits) {
    if (logits.rank() != 2 || logits.dim(1) == 0) throw ShapeError("argmax_rows: expected [N, K] logits");
    std::vector<int> out(logits.dim(0));
    for (std::size_t n = 0; n < logits.dim(0); ++n) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < logits.dim(1); ++k) {
            if (logits(n, k) > logits(n, best)) best = k;
        }
        out[n] = static_cast<int>(best);
    }
    return out;
}

double top1_accuracy(const Tensor<double>& logits, const std::vector<int>& labels) {
    if (labels.empty()) throw std::invalid_argument("accuracy of an empty set");
    const auto pred = argmax_rows(logits);
    if (pred.size() != labels.size()) throw ShapeError("accuracy: logits/labels count mismatch");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

namespace {

template <typename T>
class Optimizer {
public:
    Optimizer(std::vector<Parameter<T>*> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
        for (auto* p : params_) {
            m_.emplace_back(p->value.shape());
            if (cfg.optimizer == OptimizerKind::adam) v_.emplace_back(p->value.shape());
        }
    }

    void step() {
        ++t_;
        const T lr = static_cast<T>(cfg_.lr);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto value = params_[k]->value.data();
            auto grad = params_[k]->grad.data();
            auto m = m_[k].data();
            if (cfg_.optimizer == OptimizerKind::sgd) {
                for (std::size_t i = 0; i < value.size(); ++i) {
                    m[i] = kMomentum * m[i] + grad[i];
                    value[i] -= lr * m[i];
                }
            } else {
                auto v = v_[k].data();
                const T c1 = T(1) - static_cast<T>(std::pow(kBeta1, static_cast<double>(t_)));
                const T c2 = T(1) - static_cast<T>(std::pow(kBeta2, static_cast<double>(t_)));
                for (std::size_t i = 0; i < value.size(); ++i) {
                    m[i] = T(kBeta1) * m[i] + T(1 - kBeta1) * grad[i];
                    v[i] = T(kBeta2) * v[i] + T(1 - kBeta2) * grad[i] * grad[i];
                    value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + T(kAdamEps));
                }
            }
        }
    }

private:
    static constexpr T kMomentum = T(0.9);
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kAdamEps = 1e-8;

    std::vector<Parameter<T>*> params_;
    const TrainConfig& cfg_;
    std::vector<Tensor<T>> m_, v_;
    std::size_t t_ = 0;
};

Tensor<double> to_double(const Tensor<float>& t) { return t.cast<double>(); }
const Tensor<double>& to_double(const Tensor<double>& t) { return t; }

}  // namespace

template <typename T>
double evaluate(Classifier<T>& model, const Dataset& data, std::size_t batch, const ForwardOptions& opts) {
    if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
    if (batch == 0) batch = data.size();
    std::size_t hit = 0;
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t start = 0; start < idx.size(); start += batch) {
        std::span<const std::size_t> rows(idx.data() + start, std::min(batch, idx.size() - start));
        Graph<T> g;
        Var<T> logits = model.forward(g, g.constant(data.batch_images<T>(rows)), opts);
        const auto pred = argmax_rows(to_double(logits.value()));
        for (std::size_t i = 0; i < rows.size(); ++i) hit += pred[i] == data.labels[rows[i]];
    }
    return static_cast<double>(hit) / static_cast<double>(data.size());
}

template <typename T>
TrainResult train(Classifier<T>& model, const Dataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    data.validate();
    if (data.classes != cfg.model.classes) throw std::invalid_argument("dataset/model class count mismatch");

    auto params = model.parameters();
    Optimizer<T> opt(params, cfg);
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    const ForwardOptions fwd{Mode::train, cfg.bypass_attention};

    TrainResult result;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double loss_sum = 0.0;
        std::size_t hit = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t len = std::min(cfg.batch_size, order.size() - start);
            // A trailing single-sample batch cannot be batch-normalized.
            if (len < 2) break;
            std::span<const std::size_t> rows(order.data() + start, len);
            const auto labels = data.batch_labels(rows);
            zero_grads(params);
            Graph<T> g;
            const std::string where = "epoch " + std::to_string(epoch) + ", batch starting " + std::to_string(start);
            Var<T> logits, loss;
            try {
                logits = model.forward(g, g.constant(data.batch_images<T>(rows)), fwd);
                loss = softmax_cross_entropy(logits, labels);
            } catch (const NumericError& e) {
                throw DivergenceError(std::string(e.what()) + " at " + where);
            }
            const double l = static_cast<double>(loss.value().item());
            if (!std::isfinite(l)) throw DivergenceError("loss became non-finite at " + where);
            g.backward(loss);
            opt.step();
            loss_sum += l * static_cast<double>(len);
            const auto pred = argmax_rows(to_double(logits.value()));
            for (std::size_t i = 0; i < len; ++i) hit += pred[i] == labels[i];
        }
        const std::size_t seen = order.size() - (order.size() % cfg.batch_size == 1 ? 1 : 0);
        EpochMetrics m{epoch, loss_sum / static_cast<double>(seen), static_cast<double>(hit) / static_cast<double>(seen)};
        result.epochs.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    result.final_accuracy = evaluate(model, data, 64, ForwardOptions{Mode::eval, cfg.bypass_attention});
    return result;
}

template <typename T>
TrainResult train(const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    ModelConfig mc = cfg.model;
    mc.seed = cfg.seed;
    auto model = make_model<T>(mc);
    const Dataset data = load_dataset(cfg);
    TrainResult r = train(*model, data, cfg, on_epoch);
    if (!cfg.checkpoint.empty()) save_checkpoint(*model, cfg.checkpoint);
    return r;
}

#define BANET_INSTANTIATE_TRAIN(T)                                                                        \
    template TrainResult train<T>(Classifier<T>&, const Dataset&, const TrainConfig&, const EpochCallback&); \
    template TrainResult train<T>(const TrainConfig&, const EpochCallback&);                                 \
    template double evaluate<T>(Classifier<T>&, const Dataset&, std::size_t, const ForwardOptions&);

BANET_INSTANTIATE_TRAIN(float)
BANET_INSTANTIATE_TRAIN(double)

}  // namespace banet
