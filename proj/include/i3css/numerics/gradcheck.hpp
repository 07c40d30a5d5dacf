#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "i3css/numerics/tensor.hpp"

namespace i3css {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t coordinates = 0;
};

using NamedParams = std::vector<std::pair<std::string, Tensor<double>>>;

// Compares backward() against central differences for every coordinate of
// every listed parameter (or `sample` random coordinates per parameter).
// `f` must rebuild the loss from the current parameter values on each call.
template <typename F>
GradCheckResult grad_check(F&& f, const NamedParams& params, double eps = 1e-6,
                           std::optional<std::size_t> sample = std::nullopt, std::uint64_t seed = 0) {
    auto eval = [&]() {
        NoGradGuard ng;
        double v = f().item();
        if (!std::isfinite(v)) throw NumericError("grad_check: loss is not finite");
        return v;
    };

    for (auto& [name, p] : params) const_cast<Tensor<double>&>(p).zero_grad();
    {
        auto loss = f();
        if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite");
        backward(loss);
    }

    GradCheckResult res;
    std::mt19937_64 rng(seed);
    for (auto& [name, cp] : params) {
        auto p = cp;
        std::vector<double> analytic(p.grad().begin(), p.grad().end());
        std::vector<std::size_t> coords(p.numel());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (sample && *sample < coords.size()) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(*sample);
        }
        for (auto i : coords) {
            auto data = p.data();
            const double orig = data[i];
            data[i] = orig + eps;
            const double fp = eval();
            data[i] = orig - eps;
            const double fm = eval();
            data[i] = orig;
            const double num = (fp - fm) / (2.0 * eps);
            const double a = analytic[i];
            const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8});
            ++res.coordinates;
            if (res.worst_param.empty() || rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = name;
                res.worst_index = i;
                res.analytic = a;
                res.numeric = num;
            }
        }
    }
    return res;
}

// Single-tensor form: `f` maps the point to a scalar loss.
template <typename F>
double grad_check(F&& f, Tensor<double>& point, double eps = 1e-6) {
    point.set_requires_grad(true);
    NamedParams params{{"x", point}};
    return grad_check([&]() { return f(point); }, params, eps).max_rel_error;
}

}  // namespace i3css
