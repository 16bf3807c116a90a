#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "qtypemix/tensor.hpp"

namespace qtm {

// Named trainable parameters with parallel gradient buffers. Iteration order
// is insertion order everywhere (updates, checkpoints, finite differences),
// which keeps every consumer deterministic.
template <class T>
class ParamSet {
  public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        Tensor<T> grad;
    };

    Tensor<T>& add(const std::string& name, std::vector<std::int64_t> shape) {
        require<ConfigError>(index_.find(name) == index_.end(),
                             "duplicate parameter name: ", name);
        Entry e;
        e.name = name;
        e.value = Tensor<T>(shape);
        e.grad = Tensor<T>(shape);
        index_[name] = entries_.size();
        entries_.push_back(std::move(e));
        return entries_.back().value;
    }

    // uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
    Tensor<T>& add_linear_init(const std::string& name, std::vector<std::int64_t> shape,
                               std::int64_t fan_in, RngStream& rng) {
        Tensor<T>& t = add(name, std::move(shape));
        t.init_uniform(rng, 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1)));
        return t;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t size() const { return entries_.size(); }
    Entry& entry(std::size_t i) { return entries_[i]; }
    const Entry& entry(std::size_t i) const { return entries_[i]; }

    Tensor<T>& value(const std::string& name) { return entries_[idx(name)].value; }
    const Tensor<T>& value(const std::string& name) const { return entries_[idx(name)].value; }
    Tensor<T>& grad(const std::string& name) { return entries_[idx(name)].grad; }
    const Tensor<T>& grad(const std::string& name) const { return entries_[idx(name)].grad; }

    void clear_grads() {
        for (auto& e : entries_) e.grad.zero();
    }

    std::int64_t total_scalars() const {
        std::int64_t n = 0;
        for (const auto& e : entries_) n += e.value.numel();
        return n;
    }

    double grad_sq_norm() const {
        double s = 0;
        for (const auto& e : entries_)
            for (T g : e.grad.data) s += static_cast<double>(g) * static_cast<double>(g);
        return s;
    }

    // Scales all gradients so the global norm is at most max_norm.
    // Returns the pre-clip norm.
    double clip_grad_norm(double max_norm) {
        double norm = std::sqrt(grad_sq_norm());
        if (max_norm > 0 && norm > max_norm) {
            T s = static_cast<T>(max_norm / norm);
            for (auto& e : entries_)
                for (T& g : e.grad.data) g *= s;
        }
        return norm;
    }

    // Hard copy of values (target network sync). Requires identical layout.
    void copy_values_from(const ParamSet& other) {
        require<ShapeError>(entries_.size() == other.entries_.size(),
                            "copy_values_from: parameter count mismatch");
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            require<ShapeError>(entries_[i].name == other.entries_[i].name,
                                "copy_values_from: name mismatch at ", i);
            entries_[i].value = other.entries_[i].value;
        }
    }

    std::uint64_t step_count = 0;  // incremented by the optimizer

  private:
    std::size_t idx(const std::string& name) const {
        auto it = index_.find(name);
        require<ConfigError>(it != index_.end(), "unknown parameter: ", name);
        return it->second;
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Bias-corrected Adam. beta2 defaults to 0.99, switchable interpretation of
// the single published decay coefficient lives in the caller's config.
template <class T>
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<Tensor<T>> m, v;

    void ensure_shapes(const ParamSet<T>& params) {
        if (m.size() == params.size()) return;
        m.clear();
        v.clear();
        for (std::size_t i = 0; i < params.size(); ++i) {
            m.emplace_back(params.entry(i).value.shape);
            v.emplace_back(params.entry(i).value.shape);
        }
    }
};

template <class T>
void adam_step(ParamSet<T>& params, AdamState<T>& state, double lr) {
    state.ensure_shapes(params);
    state.step += 1;
    params.step_count += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params.entry(i).value;
        const auto& g = params.entry(i).grad;
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < p.data.size(); ++k) {
            const double gk = static_cast<double>(g.data[k]);
            const double mk = b1 * static_cast<double>(m.data[k]) + (1 - b1) * gk;
            const double vk = b2 * static_cast<double>(v.data[k]) + (1 - b2) * gk * gk;
            m.data[k] = static_cast<T>(mk);
            v.data[k] = static_cast<T>(vk);
            const double mhat = mk / bc1;
            const double vhat = vk / bc2;
            p.data[k] = static_cast<T>(static_cast<double>(p.data[k]) -
                                       lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

}  // namespace qtm
