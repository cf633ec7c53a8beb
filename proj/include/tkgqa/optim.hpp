#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <unordered_set>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tkgqa/autodiff.hpp"
#include "tkgqa/errors.hpp"
#include "tkgqa/rng.hpp"
#include "tkgqa/tensor.hpp"

namespace tkgqa {

// Named trainable leaves. Insertion order is fixed so every optimizer sweep
// and serialization pass walks parameters in the same sequence.
class ParameterStore {
public:
    NodeRef add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw UsageError("parameter already registered: " + name);
        NodeRef p = leaf(std::move(init));
        index_[name] = items_.size();
        items_.emplace_back(name, p);
        return p;
    }

    NodeRef add_normal(const std::string& name, std::vector<std::size_t> shape, Rng& rng,
                       double stddev) {
        Tensor t(std::move(shape));
        for (double& v : t.data) v = rng.normal(0.0, stddev);
        return add(name, std::move(t));
    }

    NodeRef add_zeros(const std::string& name, std::vector<std::size_t> shape) {
        return add(name, Tensor(std::move(shape)));
    }

    NodeRef get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw UsageError("unknown parameter: " + name);
        return items_[it->second].second;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t count() const { return items_.size(); }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& [name, p] : items_) n += p->value.size();
        return n;
    }

    const std::vector<std::pair<std::string, NodeRef>>& items() const { return items_; }

    void zero_grad() {
        for (auto& [name, p] : items_)
            if (p->grad.size()) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
    }

    void scale_grad(double c) {
        for (auto& [name, p] : items_)
            if (p->grad.size())
                for (double& g : p->grad.data) g *= c;
    }

    // Snapshot of current gradients; parameters that did not participate in
    // the last backward pass report zeros.
    std::map<std::string, Tensor> gradients() const {
        std::map<std::string, Tensor> out;
        for (const auto& [name, p] : items_)
            out.emplace(name, p->grad.size() ? p->grad : Tensor(p->value.shape));
        return out;
    }

private:
    std::vector<std::pair<std::string, NodeRef>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Adam with bias correction. Moment buffers are keyed by parameter index so
// late-registered parameters are still picked up.
class Adam {
public:
    explicit Adam(ParameterStore& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : params_(params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    void step() {
        ++t_;
        if (m_.size() < params_.count()) {
            for (std::size_t i = m_.size(); i < params_.count(); ++i) {
                const auto& p = params_.items()[i].second;
                m_.emplace_back(p->value.shape);
                v_.emplace_back(p->value.shape);
            }
        }
        double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.count(); ++i) {
            NodeRef p = params_.items()[i].second;
            if (!p->grad.size()) continue;
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (std::size_t j = 0; j < p->value.size(); ++j) {
                double g = p->grad.data[j];
                m.data[j] = beta1_ * m.data[j] + (1.0 - beta1_) * g;
                v.data[j] = beta2_ * v.data[j] + (1.0 - beta2_) * g * g;
                double mhat = m.data[j] / c1;
                double vhat = v.data[j] / c2;
                p->value.data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    ParameterStore& params_;
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
};

// Plain SGD, used where Adam's moment state would obscure a test.
class Sgd {
public:
    explicit Sgd(ParameterStore& params, double lr) : params_(params), lr_(lr) {}

    void step() {
        for (const auto& [name, p] : params_.items()) {
            if (!p->grad.size()) continue;
            for (std::size_t j = 0; j < p->value.size(); ++j)
                p->value.data[j] -= lr_ * p->grad.data[j];
        }
    }

private:
    ParameterStore& params_;
    double lr_;
};

// Central-difference audit of the backward pass. `build_loss` must
// reconstruct the graph from the stored parameter values on every call.
// Returns the worst relative error over all parameter coordinates.
namespace detail {
// Activation signs of every relu reachable from root, in deterministic
// topological order. Graphs built by the same code align element-wise, so
// two evaluations can be compared sign-by-sign.
inline std::vector<bool> relu_signs(const NodeRef& root) {
    std::unordered_set<Node*> seen;
    std::vector<Node*> order;
    topo_visit(root.get(), seen, order);
    std::vector<bool> signs;
    for (Node* n : order)
        if (std::strcmp(n->op, "relu") == 0)
            for (double v : n->inputs[0]->value.data) signs.push_back(v > 0.0);
    return signs;
}
}  // namespace detail

// Central differences are invalid where the loss is not differentiable; a
// coordinate whose ±eps evaluations disagree on any relu's activation sign
// straddles a kink and is skipped (optionally counted via kinks_skipped).
inline double finite_diff_check(const std::function<NodeRef()>& build_loss,
                                ParameterStore& params, double eps = 1e-5,
                                std::size_t* kinks_skipped = nullptr) {
    params.zero_grad();
    NodeRef loss = build_loss();
    backward(loss);
    std::map<std::string, Tensor> analytic = params.gradients();
    if (kinks_skipped) *kinks_skipped = 0;

    double worst = 0.0;
    for (const auto& [name, p] : params.items()) {
        const Tensor& ga = analytic.at(name);
        for (std::size_t j = 0; j < p->value.size(); ++j) {
            double saved = p->value.data[j];
            p->value.data[j] = saved + eps;
            NodeRef up = build_loss();
            double fp = up->value.data[0];
            std::vector<bool> sp = detail::relu_signs(up);
            p->value.data[j] = saved - eps;
            NodeRef dn = build_loss();
            double fm = dn->value.data[0];
            std::vector<bool> sm = detail::relu_signs(dn);
            p->value.data[j] = saved;
            if (sp != sm) {
                if (kinks_skipped) ++*kinks_skipped;
                continue;
            }
            double numeric = (fp - fm) / (2.0 * eps);
            double denom = std::max({std::abs(ga.data[j]), std::abs(numeric), 1e-8});
            worst = std::max(worst, std::abs(ga.data[j] - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace tkgqa
