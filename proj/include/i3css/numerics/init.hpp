#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "i3css/numerics/tensor.hpp"

namespace i3css {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T, typename Rng>
Tensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T, typename Rng>
Tensor<T> normal_param(Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v), true);
}

// Glorot-uniform weight for a [fan_in x fan_out] linear map.
template <typename T, typename Rng>
Tensor<T> xavier_param(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    return uniform_param<T>({fan_in, fan_out}, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)), rng);
}

template <typename T>
Tensor<T> zero_param(Shape shape) {
    return Tensor<T>::zeros(std::move(shape), true);
}

}  // namespace i3css
