#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "i3css/numerics/tensor.hpp"

namespace i3css {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
};

// Bias-corrected Adam. Parameters whose requires_grad flag is off are frozen
// and skipped; a tracked parameter without a gradient buffer is a caller bug.
template <typename T>
class Adam {
  public:
    Adam(std::vector<Tensor<T>> params, AdamOptions opts = {}) : params_(std::move(params)), opts_(opts) {
        for (auto& p : params_) {
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    void zero_grad() {
        for (auto& p : params_)
            if (p.requires_grad()) p.zero_grad();
    }

    void step() {
        for (std::size_t k = 0; k < params_.size(); ++k)
            if (params_[k].requires_grad() && !params_[k].has_grad())
                throw ContractError("adam_step: parameter " + std::to_string(k) + " of shape " +
                                    shape_str(params_[k].shape()) + " has no gradient");
        ++t_;
        const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (!p.requires_grad()) continue;
            auto data = p.data();
            auto grad = p.grad();
            auto& m = m_[k];
            auto& v = v_[k];
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double g = grad[i];
                m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g;
                v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                data[i] = static_cast<T>(data[i] - opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps));
            }
        }
    }

    std::int64_t steps() const { return t_; }
    const AdamOptions& options() const { return opts_; }
    const std::vector<double>& first_moment(std::size_t k) const { return m_.at(k); }
    const std::vector<double>& second_moment(std::size_t k) const { return v_.at(k); }

  private:
    std::vector<Tensor<T>> params_;
    AdamOptions opts_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

}  // namespace i3css
