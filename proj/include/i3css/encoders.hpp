#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "i3css/numerics/init.hpp"
#include "i3css/numerics/tensor.hpp"

namespace i3css {

// One direction of a GRU. Row-vector convention: gate = x W + h U + b.
template <typename T>
struct GruWeights {
    Tensor<T> W_z, W_r, W_h;  // [d_in x d_h]
    Tensor<T> U_z, U_r, U_h;  // [d_h x d_h]
    Tensor<T> b_z, b_r, b_h;  // [d_h]

    template <typename Rng>
    static GruWeights init(std::size_t d_in, std::size_t d_h, Rng& rng) {
        const double k = 1.0 / std::sqrt(static_cast<double>(d_h));
        GruWeights w;
        w.W_z = uniform_param<T>({d_in, d_h}, k, rng);
        w.W_r = uniform_param<T>({d_in, d_h}, k, rng);
        w.W_h = uniform_param<T>({d_in, d_h}, k, rng);
        w.U_z = uniform_param<T>({d_h, d_h}, k, rng);
        w.U_r = uniform_param<T>({d_h, d_h}, k, rng);
        w.U_h = uniform_param<T>({d_h, d_h}, k, rng);
        w.b_z = uniform_param<T>({d_h}, k, rng);
        w.b_r = uniform_param<T>({d_h}, k, rng);
        w.b_h = uniform_param<T>({d_h}, k, rng);
        return w;
    }

    std::size_t input_dim() const { return W_z.shape()[0]; }
    std::size_t hidden_dim() const { return U_z.shape()[0]; }

    NamedTensors<T> named(const std::string& prefix) const {
        return {{prefix + ".W_z", W_z}, {prefix + ".W_r", W_r}, {prefix + ".W_h", W_h},
                {prefix + ".U_z", U_z}, {prefix + ".U_r", U_r}, {prefix + ".U_h", U_h},
                {prefix + ".b_z", b_z}, {prefix + ".b_r", b_r}, {prefix + ".b_h", b_h}};
    }
};

namespace detail {

// GRU update given the input projections x W_z, x W_r, x W_h (without bias).
template <typename T>
Tensor<T> gru_step(const Tensor<T>& xz, const Tensor<T>& xr, const Tensor<T>& xh, const Tensor<T>& h,
                   const GruWeights<T>& w) {
    auto z = sigmoid(add_row(add(xz, matmul(h, w.U_z)), w.b_z));
    auto r = sigmoid(add_row(add(xr, matmul(h, w.U_r)), w.b_r));
    auto cand = tanh(add_row(add(xh, matmul(mul(r, h), w.U_h)), w.b_h));
    // (1 - z) * h + z * cand
    return add(h, mul(z, sub(cand, h)));
}

}  // namespace detail

// Standard GRU cell. x is [d_in] or a batch [B x d_in]; h_prev matches with d_h.
template <typename T>
Tensor<T> gru_cell(const Tensor<T>& x, const Tensor<T>& h_prev, const GruWeights<T>& w) {
    if (x.cols() != w.input_dim() || h_prev.cols() != w.hidden_dim() || x.rows() != h_prev.rows() ||
        x.rank() != h_prev.rank())
        throw DimensionError("gru_cell: input " + shape_str(x.shape()) + " and state " + shape_str(h_prev.shape()) +
                             " do not fit weights with d_in=" + std::to_string(w.input_dim()) +
                             ", d_h=" + std::to_string(w.hidden_dim()));
    return detail::gru_step(matmul(x, w.W_z), matmul(x, w.W_r), matmul(x, w.W_h), h_prev, w);
}

// Runs the GRU over the rows of `x` in order (or reverse order) and returns the
// per-position hidden states as rows, in the original position order.
template <typename T>
Tensor<T> gru_sequence(const Tensor<T>& x, const GruWeights<T>& w, bool reverse) {
    const std::size_t n = x.rows();
    auto xz = matmul(x, w.W_z);
    auto xr = matmul(x, w.W_r);
    auto xh = matmul(x, w.W_h);
    auto h = Tensor<T>::zeros({1, w.hidden_dim()});
    std::vector<Tensor<T>> states(n);
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t t = reverse ? n - 1 - k : k;
        h = detail::gru_step(slice_rows(xz, t, t + 1), slice_rows(xr, t, t + 1), slice_rows(xh, t, t + 1), h, w);
        states[t] = h;
    }
    return concat_rows(states);
}

// Bidirectional GRU: row t is [forward_t ; backward_t].
template <typename T>
Tensor<T> bigru(const Tensor<T>& x, const GruWeights<T>& fwd, const GruWeights<T>& bwd) {
    return concat_cols(gru_sequence(x, fwd, false), gru_sequence(x, bwd, true));
}

struct EncoderDims {
    std::size_t d_in = 32;
    std::size_t d_h = 32;
    std::size_t d_mid = 32;
    std::size_t d_m = 16;
    std::size_t num_speakers = 2;
};

// Speaker-embedded Bi-GRU sentence encoder followed by two tanh projections.
// One instance per modality serves both the historical and the next encoder.
template <typename T>
struct EncoderParams {
    Tensor<T> speaker_table;  // [num_speakers x d_in]
    GruWeights<T> fwd, bwd;
    Tensor<T> proj1, proj1_b;  // [2 d_h x d_mid], [d_mid]
    Tensor<T> proj2, proj2_b;  // [d_mid x d_m], [d_m]

    template <typename Rng>
    static EncoderParams init(const EncoderDims& d, Rng& rng) {
        EncoderParams p;
        p.speaker_table = normal_param<T>({d.num_speakers, d.d_in}, 0.1, rng);
        p.fwd = GruWeights<T>::init(d.d_in, d.d_h, rng);
        p.bwd = GruWeights<T>::init(d.d_in, d.d_h, rng);
        p.proj1 = xavier_param<T>(2 * d.d_h, d.d_mid, rng);
        p.proj1_b = zero_param<T>({d.d_mid});
        p.proj2 = xavier_param<T>(d.d_mid, d.d_m, rng);
        p.proj2_b = zero_param<T>({d.d_m});
        return p;
    }

    EncoderDims dims() const {
        return {speaker_table.cols(), fwd.hidden_dim(), proj1.cols(), proj2.cols(), speaker_table.rows()};
    }

    NamedTensors<T> named(const std::string& prefix) const {
        NamedTensors<T> out{{prefix + ".speaker_table", speaker_table}};
        for (auto& e : fwd.named(prefix + ".gru_fwd")) out.push_back(e);
        for (auto& e : bwd.named(prefix + ".gru_bwd")) out.push_back(e);
        out.insert(out.end(), {{prefix + ".proj1", proj1},
                               {prefix + ".proj1_b", proj1_b},
                               {prefix + ".proj2", proj2},
                               {prefix + ".proj2_b", proj2_b}});
        return out;
    }
};

// Encodes sentence-level features (one row per utterance).
//   contextual = true:  Bi-GRU across the whole sequence (historical encoder).
//   contextual = false: every utterance alone as a length-1 sequence (next encoder).
template <typename T>
Tensor<T> encode_sequence(const Tensor<T>& features, std::span<const std::size_t> speaker_ids,
                          const EncoderParams<T>& params, bool contextual) {
    if (speaker_ids.empty()) throw ContractError("encode_sequence: empty utterance list");
    if (features.rank() != 2 || features.rows() != speaker_ids.size())
        throw ContractError("encode_sequence: " + std::to_string(speaker_ids.size()) + " speaker ids for features " +
                            shape_str(features.shape()));
    if (features.cols() != params.speaker_table.cols())
        throw DimensionError("encode_sequence: feature dim " + std::to_string(features.cols()) +
                             " does not match encoder input dim " + std::to_string(params.speaker_table.cols()));
    for (auto id : speaker_ids)
        if (id >= params.speaker_table.rows())
            throw ContractError("encode_sequence: unknown speaker id " + std::to_string(id));

    std::vector<std::size_t> ids(speaker_ids.begin(), speaker_ids.end());
    auto x = add(features, gather_rows(params.speaker_table, ids));

    Tensor<T> states;
    if (contextual) {
        states = bigru(x, params.fwd, params.bwd);
    } else {
        auto h0 = Tensor<T>::zeros({x.rows(), params.fwd.hidden_dim()});
        states = concat_cols(gru_cell(x, h0, params.fwd), gru_cell(x, h0, params.bwd));
    }
    auto mid = tanh(add_row(matmul(states, params.proj1), params.proj1_b));
    return tanh(add_row(matmul(mid, params.proj2), params.proj2_b));
}

// Builds a constant [n x d] feature matrix from row vectors.
template <typename T, typename Rows>
Tensor<T> feature_matrix(const Rows& rows) {
    if (rows.empty()) throw ContractError("feature_matrix: no rows");
    const std::size_t d = rows.front().size();
    std::vector<T> v;
    v.reserve(rows.size() * d);
    for (auto& r : rows) {
        if (r.size() != d) throw DimensionError("feature_matrix: ragged rows");
        for (auto x : r) v.push_back(static_cast<T>(x));
    }
    return Tensor<T>({rows.size(), d}, std::move(v));
}

}  // namespace i3css
