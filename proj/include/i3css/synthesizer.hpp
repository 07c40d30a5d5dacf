#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "i3css/encoders.hpp"
#include "i3css/interaction.hpp"
#include "i3css/numerics/init.hpp"
#include "i3css/numerics/tensor.hpp"

namespace i3css {

// Two-layer MLP d_m -> d_m -> 1 with tanh hidden activation.
template <typename T>
struct VarianceHead {
    Tensor<T> W1, b1;  // [d_m x d_m], [d_m]
    Tensor<T> W2, b2;  // [d_m x 1], [1]

    template <typename Rng>
    static VarianceHead init(std::size_t d_m, Rng& rng) {
        return {xavier_param<T>(d_m, d_m, rng), zero_param<T>({d_m}), xavier_param<T>(d_m, 1, rng),
                zero_param<T>({1})};
    }

    // One scalar per row of `x`.
    Tensor<T> operator()(const Tensor<T>& x) const {
        auto hidden = tanh(add_row(matmul(x, W1), b1));
        auto out = add_row(matmul(hidden, W2), b2);
        return reshape(out, {x.rows()});
    }

    NamedTensors<T> named(const std::string& prefix) const {
        return {{prefix + ".W1", W1}, {prefix + ".b1", b1}, {prefix + ".W2", W2}, {prefix + ".b2", b2}};
    }
};

template <typename T>
struct SynthParams {
    Tensor<T> phoneme_table;  // [vocab x d_m]
    GruWeights<T> text_fwd, text_bwd;  // d_m in, d_m/2 hidden per direction
    Tensor<T> out_proj, out_b;  // [2 (d_m/2) x d_m], [d_m]
    VarianceHead<T> pitch_head, energy_head, logdur_head;

    template <typename Rng>
    static SynthParams init(std::size_t vocab, std::size_t d_m, Rng& rng) {
        if (vocab == 0) throw ContractError("SynthParams: vocab must be at least 1");
        const std::size_t h = std::max<std::size_t>(1, d_m / 2);
        SynthParams p;
        p.phoneme_table = normal_param<T>({vocab, d_m}, 1.0, rng);
        p.text_fwd = GruWeights<T>::init(d_m, h, rng);
        p.text_bwd = GruWeights<T>::init(d_m, h, rng);
        p.out_proj = xavier_param<T>(2 * h, d_m, rng);
        p.out_b = zero_param<T>({d_m});
        p.pitch_head = VarianceHead<T>::init(d_m, rng);
        p.energy_head = VarianceHead<T>::init(d_m, rng);
        p.logdur_head = VarianceHead<T>::init(d_m, rng);
        return p;
    }

    std::size_t vocab() const { return phoneme_table.rows(); }
    std::size_t dim() const { return phoneme_table.cols(); }

    NamedTensors<T> named(const std::string& prefix) const {
        NamedTensors<T> out{{prefix + ".phoneme_table", phoneme_table}};
        for (auto& e : text_fwd.named(prefix + ".text_fwd")) out.push_back(e);
        for (auto& e : text_bwd.named(prefix + ".text_bwd")) out.push_back(e);
        out.emplace_back(prefix + ".out_proj", out_proj);
        out.emplace_back(prefix + ".out_b", out_b);
        for (auto& e : pitch_head.named(prefix + ".pitch_head")) out.push_back(e);
        for (auto& e : energy_head.named(prefix + ".energy_head")) out.push_back(e);
        for (auto& e : logdur_head.named(prefix + ".logdur_head")) out.push_back(e);
        return out;
    }
};

// Linguistic encodings of the target phonemes: embedding, Bi-GRU, projection.
template <typename T>
Tensor<T> encode_phonemes(const std::vector<std::size_t>& ids, const SynthParams<T>& params) {
    if (ids.empty()) throw ContractError("encode_phonemes: empty phoneme sequence");
    for (auto id : ids)
        if (id >= params.vocab())
            throw ContractError("encode_phonemes: phoneme id " + std::to_string(id) + " outside vocab of " +
                                std::to_string(params.vocab()));
    auto emb = gather_rows(params.phoneme_table, ids);
    auto states = bigru(emb, params.text_fwd, params.text_bwd);
    return add_row(matmul(states, params.out_proj), params.out_b);
}

// Final-prefix interaction vectors, in the order t-intra, s-intra, t-inter,
// s-inter (= HT-NT, HS-NS, HT-NS, HS-NT). An undefined slot is an ablated
// module and contributes nothing.
template <typename T>
struct InteractionFeatureSet {
    std::array<Tensor<T>, 4> f;

    Tensor<T>& operator[](ModuleKind k) { return f[index_of(k)]; }
    const Tensor<T>& operator[](ModuleKind k) const { return f[index_of(k)]; }
};

// Adds the last row of every present feature sequence to each position of P.
template <typename T>
Tensor<T> aggregate_features(const Tensor<T>& p, const InteractionFeatureSet<T>& feats) {
    std::vector<Tensor<T>> lasts;
    for (auto& f : feats.f) {
        if (!f.defined()) continue;
        if (f.cols() != p.cols())
            throw DimensionError("aggregate_features: interaction feature " + shape_str(f.shape()) +
                                 " vs linguistic encodings " + shape_str(p.shape()));
        lasts.push_back(row(f, f.rows() - 1));
    }
    if (lasts.empty()) return p;
    return add_row(p, lasts.size() == 1 ? lasts[0] : add_n(lasts));
}

template <typename T>
struct VarianceOutput {
    Tensor<T> pitch, energy, log_duration;  // [L] each
};

struct ProsodyPrediction {
    std::vector<double> pitch;
    std::vector<double> energy;
    std::vector<double> log_duration;
    std::size_t regulated_length = 0;
};

inline std::size_t duration_from_log(double log_d) {
    double r = std::round(std::exp(log_d));
    return r < 1.0 ? std::size_t{1} : static_cast<std::size_t>(r);
}

template <typename T>
VarianceOutput<T> predict_variance(const Tensor<T>& p, const SynthParams<T>& params) {
    if (p.rank() != 2 || p.cols() != params.dim())
        throw DimensionError("predict_variance: expected [L x " + std::to_string(params.dim()) + "], got " +
                             shape_str(p.shape()));
    return {params.pitch_head(p), params.energy_head(p), params.logdur_head(p)};
}

template <typename T>
ProsodyPrediction to_prediction(const VarianceOutput<T>& v) {
    ProsodyPrediction out;
    out.pitch.assign(v.pitch.data().begin(), v.pitch.data().end());
    out.energy.assign(v.energy.data().begin(), v.energy.data().end());
    out.log_duration.assign(v.log_duration.data().begin(), v.log_duration.data().end());
    for (auto d : out.log_duration) out.regulated_length += duration_from_log(d);
    return out;
}

// Repeats row i durations[i] times.
template <typename T>
Tensor<T> length_regulate(const Tensor<T>& p, const std::vector<std::size_t>& durations) {
    if (durations.size() != p.rows())
        throw ContractError("length_regulate: " + std::to_string(durations.size()) + " durations for " +
                            std::to_string(p.rows()) + " positions");
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < durations.size(); ++i) {
        if (durations[i] == 0) throw ContractError("length_regulate: zero duration at position " + std::to_string(i));
        ids.insert(ids.end(), durations[i], i);
    }
    auto mat = p.rank() == 1 ? reshape(p, {1, p.cols()}) : p;
    return gather_rows(mat, ids);
}

template <typename T>
Tensor<T> length_regulate(const Tensor<T>& p, const std::vector<int>& durations) {
    std::vector<std::size_t> d;
    for (std::size_t i = 0; i < durations.size(); ++i) {
        if (durations[i] < 1)
            throw ContractError("length_regulate: non-positive duration " + std::to_string(durations[i]) +
                                " at position " + std::to_string(i));
        d.push_back(static_cast<std::size_t>(durations[i]));
    }
    return length_regulate(p, d);
}

}  // namespace i3css
