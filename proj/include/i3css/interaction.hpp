#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "i3css/numerics/init.hpp"
#include "i3css/numerics/tensor.hpp"

namespace i3css {

// The four history/next modality pairings.
enum class ModuleKind { HtNt = 0, HsNs = 1, HtNs = 2, HsNt = 3 };

inline constexpr std::array<ModuleKind, 4> kAllModules{ModuleKind::HtNt, ModuleKind::HsNs, ModuleKind::HtNs,
                                                       ModuleKind::HsNt};

inline constexpr std::size_t index_of(ModuleKind k) { return static_cast<std::size_t>(k); }

inline std::string_view module_name(ModuleKind k) {
    switch (k) {
    case ModuleKind::HtNt: return "ht-nt";
    case ModuleKind::HsNs: return "hs-ns";
    case ModuleKind::HtNs: return "ht-ns";
    case ModuleKind::HsNt: return "hs-nt";
    }
    return "?";
}

inline std::optional<ModuleKind> parse_module(std::string_view s) {
    for (auto k : kAllModules)
        if (module_name(k) == s) return k;
    return std::nullopt;
}

inline constexpr bool history_is_text(ModuleKind k) { return k == ModuleKind::HtNt || k == ModuleKind::HtNs; }
inline constexpr bool next_is_text(ModuleKind k) { return k == ModuleKind::HtNt || k == ModuleKind::HsNt; }

// Per-module attention projections, all [d_m x d_m].
template <typename T>
struct IEParams {
    Tensor<T> W_q, W_k, W_v;

    template <typename Rng>
    static IEParams init(std::size_t d_m, Rng& rng) {
        return {xavier_param<T>(d_m, d_m, rng), xavier_param<T>(d_m, d_m, rng), xavier_param<T>(d_m, d_m, rng)};
    }

    std::size_t dim() const { return W_q.rows(); }

    NamedTensors<T> named(const std::string& prefix) const {
        return {{prefix + ".W_q", W_q}, {prefix + ".W_k", W_k}, {prefix + ".W_v", W_v}};
    }
};

// Single-head scaled dot-product attention of one query over context rows.
template <typename T>
Tensor<T> cross_attention(const Tensor<T>& query, const Tensor<T>& context, const IEParams<T>& params) {
    if (!context.defined() || context.numel() == 0) throw ContractError("cross_attention: empty context");
    if (query.rows() != 1 || query.cols() != params.dim() || context.cols() != params.dim())
        throw DimensionError("cross_attention: query " + shape_str(query.shape()) + " / context " +
                             shape_str(context.shape()) + " against d_m=" + std::to_string(params.dim()));
    auto ctx = context.rank() == 1 ? reshape(context, {1, context.cols()}) : context;
    auto q = matmul(query, params.W_q);
    auto k = matmul(ctx, params.W_k);
    auto v = matmul(ctx, params.W_v);
    auto scores = scale(matmul(q, transpose(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(params.dim()))));
    return matmul(softmax(scores), v);
}

// Prefix features F_{1->k} for k = 1..n.
//   enabled:  F_1 = H_1; F_k = LayerNorm(H_k + attention(H_k over H_1..H_{k-1})).
//   disabled: F_k = mean(H_1..H_k).
// The enabled path evaluates all prefixes at once with a causal mask.
template <typename T>
Tensor<T> interaction_enhance(const Tensor<T>& h, const IEParams<T>& params, bool ie_enabled) {
    if (!h.defined() || h.numel() == 0) throw ContractError("interaction_enhance: empty input");
    if (h.rank() != 2) throw DimensionError("interaction_enhance: expected [n x d_m], got " + shape_str(h.shape()));
    const std::size_t n = h.rows();
    if (n == 1) return h;
    if (!ie_enabled) {
        std::vector<T> avg(n * n, T(0));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j <= i; ++j) avg[i * n + j] = T(1) / static_cast<T>(i + 1);
        return matmul(Tensor<T>({n, n}, std::move(avg)), h);
    }
    if (h.cols() != params.dim())
        throw DimensionError("interaction_enhance: feature dim " + std::to_string(h.cols()) + " vs d_m=" +
                             std::to_string(params.dim()));
    auto q = matmul(h, params.W_q);
    auto k = matmul(h, params.W_k);
    auto v = matmul(h, params.W_v);
    auto scores = scale(matmul(q, transpose(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(params.dim()))));
    auto attended = matmul(causal_softmax(scores), v);
    auto fused = layer_norm_rows(slice_rows(add(h, attended), 1, n));
    return concat_rows<T>({slice_rows(h, 0, 1), fused});
}

// +1 on the diagonal, -1 elsewhere.
template <typename T>
Tensor<T> ground_truth_matrix(std::size_t n) {
    if (n == 0) throw ContractError("ground_truth_matrix: n must be positive");
    std::vector<T> v(n * n, T(-1));
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = T(1);
    return Tensor<T>({n, n}, std::move(v));
}

// M_p[i][j] = cos(F_i, H_next_j), where F_i is prefix 1->i and H_next_j is
// utterance j+1.
template <typename T>
Tensor<T> build_prediction_matrix(const Tensor<T>& f, const Tensor<T>& h_next) {
    if (f.rows() != h_next.rows())
        throw ContractError("build_prediction_matrix: " + std::to_string(f.rows()) + " prefix features vs " +
                            std::to_string(h_next.rows()) + " next features");
    if (f.cols() != h_next.cols())
        throw DimensionError("build_prediction_matrix: feature dims " + shape_str(f.shape()) + " vs " +
                             shape_str(h_next.shape()));
    auto fr = f.rank() == 1 ? reshape(f, {1, f.cols()}) : f;
    auto hr = h_next.rank() == 1 ? reshape(h_next, {1, h_next.cols()}) : h_next;
    return matmul(normalize_rows(fr), transpose(normalize_rows(hr)));
}

template <typename T>
struct AlignmentMatrices {
    Tensor<T> m_p;
    Tensor<T> m_gt;
};

template <typename T>
AlignmentMatrices<T> alignment_matrices(const Tensor<T>& f, const Tensor<T>& h_next) {
    return {build_prediction_matrix(f, h_next), ground_truth_matrix<T>(f.rows())};
}

// MSE between the prediction matrix and the +-1 target.
template <typename T>
Tensor<T> contrastive_loss(const AlignmentMatrices<T>& m) {
    return mse(m.m_p, m.m_gt);
}

}  // namespace i3css
