#pragma once

#include <functional>
#include <string>
#include <vector>

#include "qtypemix/params.hpp"

namespace qtm {

// Central finite differences, (f(p+h) - f(p-h)) / 2h per scalar parameter.
// f must be a pure, deterministic function of the parameter values.
template <class T>
std::vector<Tensor<double>> finite_diff_grad(const std::function<double(ParamSet<T>&)>& f,
                                             ParamSet<T>& params, double h) {
    std::vector<Tensor<double>> grads;
    grads.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params.entry(i).value;
        Tensor<double> g(p.shape);
        for (std::size_t k = 0; k < p.data.size(); ++k) {
            const T orig = p.data[k];
            p.data[k] = static_cast<T>(static_cast<double>(orig) + h);
            const double fp = f(params);
            p.data[k] = static_cast<T>(static_cast<double>(orig) - h);
            const double fm = f(params);
            p.data[k] = orig;
            g.data[k] = (fp - fm) / (2.0 * h);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::int64_t checked = 0;

    bool pass(double tol) const { return checked > 0 && max_rel_err < tol; }
};

// relative error |a - fd| / max(1, |a|, |fd|); the 1 floor keeps near-zero
// gradients from blowing up the ratio
inline double rel_err(double a, double fd) {
    double denom = std::max({1.0, std::abs(a), std::abs(fd)});
    return std::abs(a - fd) / denom;
}

// Compares analytic gradients (produced by backward_fn into params.grad)
// against central finite differences of f.
template <class T>
GradCheckReport check_grads(const std::function<double(ParamSet<T>&)>& f,
                            const std::function<void(ParamSet<T>&)>& backward_fn,
                            ParamSet<T>& params, double h = 1e-6) {
    params.clear_grads();
    backward_fn(params);
    auto fd = finite_diff_grad(f, params, h);
    GradCheckReport rep;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& g = params.entry(i).grad;
        for (std::size_t k = 0; k < g.data.size(); ++k) {
            double e = rel_err(static_cast<double>(g.data[k]), fd[i].data[k]);
            ++rep.checked;
            if (e > rep.max_rel_err) {
                rep.max_rel_err = e;
                rep.worst_param = params.entry(i).name;
            }
        }
    }
    return rep;
}

}  // namespace qtm
