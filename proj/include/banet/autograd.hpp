#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "banet/tensor.hpp"

namespace banet {

enum class Mode { train, eval };

// What a learnable tensor is for. Parameter counting conventions key off this.
enum class ParamRole { weight, bias, bn_gamma, bn_beta, fusion, ln_gamma, ln_beta, input };

template <typename T>
struct Parameter {
    Parameter() = default;
    Parameter(std::string n, ParamRole r, Tensor<T> v)
        : name(std::move(n)), role(r), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad = Tensor<T>(value.shape()); }

    std::string name;
    ParamRole role = ParamRole::weight;
    Tensor<T> value;
    Tensor<T> grad;
};

template <typename T>
class Graph;

/// Handle to a node in a Graph. Cheap to copy; only valid while its graph lives.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Graph<T>* g, std::size_t id) : g_(g), id_(id) {}

    bool valid() const { return g_ != nullptr; }
    Graph<T>& graph() const { return *g_; }
    std::size_t id() const { return id_; }
    const Tensor<T>& value() const { return g_->value(id_); }
    const Shape& shape() const { return value().shape(); }

private:
    Graph<T>* g_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// vector is already a topological order and backward is a reverse sweep.
template <typename T>
class Graph {
public:
    // Given dL/d(out), returns dL/d(input_k) for each input; an empty tensor
    // means "no gradient for this input".
    using BackwardFn = std::function<std::vector<Tensor<T>>(const Tensor<T>&)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<T> constant(Tensor<T> value) {
        value.check_finite("constant");
        nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false, nullptr, "constant"});
        return {this, nodes_.size() - 1};
    }

    /// Leaf bound to a persistent parameter. The same parameter always maps to
    /// the same node; backward() accumulates into Parameter::grad.
    Var<T> param(Parameter<T>& p) {
        if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
        p.value.check_finite("parameter " + p.name);
        nodes_.push_back(Node{p.value, {}, {}, nullptr, true, &p, "param"});
        param_nodes_[&p] = nodes_.size() - 1;
        return {this, nodes_.size() - 1};
    }

    Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn, const char* op) {
        value.check_finite(op);
        bool needs = false;
        for (std::size_t in : inputs) {
            if (in >= nodes_.size()) throw std::logic_error("graph input does not precede node");
            needs = needs || nodes_[in].requires_grad;
        }
        nodes_.push_back(Node{std::move(value), {}, std::move(inputs), needs ? std::move(fn) : BackwardFn{},
                              needs, nullptr, op});
        return {this, nodes_.size() - 1};
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    const Tensor<T>& grad(std::size_t id) const { return nodes_.at(id).grad; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    void backward(Var<T> loss) {
        if (loss.value().size() != 1) {
            throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
        }
        for (auto& n : nodes_) n.grad = Tensor<T>();
        nodes_[loss.id()].grad = Tensor<T>(loss.shape(), T(1));
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& node = nodes_[i];
            if (!node.requires_grad || node.grad.empty()) continue;
            if (node.param) {
                node.param->grad += node.grad;
                continue;
            }
            if (!node.backward) continue;
            std::vector<Tensor<T>> gins = node.backward(node.grad);
            for (std::size_t k = 0; k < node.inputs.size(); ++k) {
                if (k >= gins.size() || gins[k].empty()) continue;
                Node& in = nodes_[node.inputs[k]];
                if (!in.requires_grad) continue;
                if (in.grad.empty()) {
                    in.grad = std::move(gins[k]);
                } else {
                    in.grad += gins[k];
                }
            }
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        bool requires_grad = false;
        Parameter<T>* param = nullptr;
        const char* op = "";
    };

    std::deque<Node> nodes_;  // stable references as the graph grows
    std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
};

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
    for (auto* p : params) p->zero_grad();
}

template <typename T>
std::size_t count_elements(const std::vector<Parameter<T>*>& params) {
    std::size_t n = 0;
    for (auto* p : params) n += p->value.size();
    return n;
}

}  // namespace banet
