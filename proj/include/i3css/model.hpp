#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "i3css/corpus.hpp"
#include "i3css/encoders.hpp"
#include "i3css/interaction.hpp"
#include "i3css/numerics/tensor.hpp"
#include "i3css/synthesizer.hpp"

namespace i3css {

enum class Precision { F32, F64 };

inline std::string precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

inline Precision parse_precision(const std::string& s) {
    if (s == "f32") return Precision::F32;
    if (s == "f64") return Precision::F64;
    throw ConfigError("precision must be 'f32' or 'f64', got '" + s + "'");
}

// Which interaction modules are kept.
struct ModuleFlags {
    std::array<bool, 4> on{true, true, true, true};

    bool operator[](ModuleKind k) const { return on[index_of(k)]; }
    bool& operator[](ModuleKind k) { return on[index_of(k)]; }
    bool any() const { return on[0] || on[1] || on[2] || on[3]; }
    std::size_t count() const { return std::size_t(on[0]) + on[1] + on[2] + on[3]; }

    static ModuleFlags none() { return {{false, false, false, false}}; }
    static ModuleFlags only(std::initializer_list<ModuleKind> ks) {
        auto f = none();
        for (auto k : ks) f[k] = true;
        return f;
    }
    bool operator==(const ModuleFlags&) const = default;
};

struct ModelConfig {
    std::size_t d_t = 32;
    std::size_t d_s = 48;
    std::size_t d_h_text = 32;
    std::size_t d_h_speech = 48;
    std::size_t d_m = 16;
    std::size_t vocab = 64;
    std::size_t num_speakers = 2;
    double lambda_cl = 1.0;
    ModuleFlags modules;
    bool ie_enabled = true;
    double lr = 1e-3;
    std::size_t batch_size = 16;
    std::size_t steps = 3000;
    std::uint64_t seed = 0;
    Precision precision = Precision::F32;
    std::size_t eval_every = 500;

    static ModelConfig full_scale() {
        ModelConfig c;
        c.d_t = 512;
        c.d_s = 768;
        c.d_h_text = 512;
        c.d_h_speech = 768;
        c.d_m = 256;
        c.steps = 400000;
        return c;
    }

    void validate() const {
        for (auto [name, v] : {std::pair{"d_t", d_t}, {"d_s", d_s}, {"d_h_text", d_h_text}, {"d_h_speech", d_h_speech},
                               {"d_m", d_m}, {"vocab", vocab}, {"num_speakers", num_speakers},
                               {"batch_size", batch_size}, {"eval_every", eval_every}})
            if (v == 0) throw ConfigError(std::string(name) + " must be positive");
        if (!(lambda_cl >= 0)) throw ConfigError("lambda_cl must be >= 0");
        if (!(lr >= 0)) throw ConfigError("lr must be >= 0");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"d_t", c.d_t},
         {"d_s", c.d_s},
         {"d_h_text", c.d_h_text},
         {"d_h_speech", c.d_h_speech},
         {"d_m", c.d_m},
         {"vocab", c.vocab},
         {"num_speakers", c.num_speakers},
         {"lambda_cl", c.lambda_cl},
         {"module_flags",
          {{"ht_nt", c.modules[ModuleKind::HtNt]},
           {"hs_ns", c.modules[ModuleKind::HsNs]},
           {"ht_ns", c.modules[ModuleKind::HtNs]},
           {"hs_nt", c.modules[ModuleKind::HsNt]}}},
         {"ie_enabled", c.ie_enabled},
         {"lr", c.lr},
         {"batch_size", c.batch_size},
         {"steps", c.steps},
         {"seed", c.seed},
         {"precision", precision_name(c.precision)},
         {"eval_every", c.eval_every}};
}

// Missing keys keep defaults. Unknown keys are a configuration error.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    auto uint = [](const nlohmann::json& v, const std::string& key) {
        if (!v.is_number_integer() || v.get<long long>() < 0)
            throw ConfigError("model config: " + key + " must be a nonnegative integer");
        return v.get<std::uint64_t>();
    };
    auto real = [](const nlohmann::json& v, const std::string& key) {
        if (!v.is_number()) throw ConfigError("model config: " + key + " must be a number");
        return v.get<double>();
    };
    auto boolean = [](const nlohmann::json& v, const std::string& key) {
        if (!v.is_boolean()) throw ConfigError("model config: " + key + " must be a boolean");
        return v.get<bool>();
    };
    for (auto& [key, v] : j.items()) {
        if (key == "d_t") c.d_t = uint(v, key);
        else if (key == "d_s") c.d_s = uint(v, key);
        else if (key == "d_h_text") c.d_h_text = uint(v, key);
        else if (key == "d_h_speech") c.d_h_speech = uint(v, key);
        else if (key == "d_m") c.d_m = uint(v, key);
        else if (key == "vocab") c.vocab = uint(v, key);
        else if (key == "num_speakers") c.num_speakers = uint(v, key);
        else if (key == "lambda_cl") c.lambda_cl = real(v, key);
        else if (key == "ie_enabled") c.ie_enabled = boolean(v, key);
        else if (key == "lr") c.lr = real(v, key);
        else if (key == "batch_size") c.batch_size = uint(v, key);
        else if (key == "steps") c.steps = uint(v, key);
        else if (key == "seed") c.seed = uint(v, key);
        else if (key == "eval_every") c.eval_every = uint(v, key);
        else if (key == "precision") {
            if (!v.is_string()) throw ConfigError("model config: precision must be a string");
            c.precision = parse_precision(v.get<std::string>());
        } else if (key == "module_flags") {
            if (!v.is_object()) throw ConfigError("model config: module_flags must be an object");
            for (auto& [mk, mv] : v.items()) {
                std::string dashed = mk;
                for (auto& ch : dashed)
                    if (ch == '_') ch = '-';
                auto kind = parse_module(dashed);
                if (!kind) throw ConfigError("model config: unknown module '" + mk + "'");
                c.modules[*kind] = boolean(mv, "module_flags." + mk);
            }
        } else {
            throw ConfigError("model config: unknown key '" + key + "'");
        }
    }
}

template <typename T>
struct Model;

namespace detail {
template <typename T>
std::vector<Tensor<T>*> param_slots(Model<T>& m);
}

// All learnable state of the model.
template <typename T>
struct Model {
    ModelConfig config;
    EncoderParams<T> text;
    EncoderParams<T> speech;
    std::array<IEParams<T>, 4> ie;
    SynthParams<T> synth;

    static Model init(const ModelConfig& cfg) {
        cfg.validate();
        std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x5EEDULL));
        Model m;
        m.config = cfg;
        m.text = EncoderParams<T>::init({cfg.d_t, cfg.d_h_text, cfg.d_h_text, cfg.d_m, cfg.num_speakers}, rng);
        m.speech = EncoderParams<T>::init({cfg.d_s, cfg.d_h_speech, cfg.d_h_speech, cfg.d_m, cfg.num_speakers}, rng);
        for (auto k : kAllModules) m.ie[index_of(k)] = IEParams<T>::init(cfg.d_m, rng);
        m.synth = SynthParams<T>::init(cfg.vocab, cfg.d_m, rng);
        m.apply_trainable_flags();
        return m;
    }

    const IEParams<T>& ie_for(ModuleKind k) const { return ie[index_of(k)]; }

    NamedTensors<T> named() const {
        NamedTensors<T> out = text.named("text_encoder");
        for (auto& e : speech.named("speech_encoder")) out.push_back(e);
        for (auto k : kAllModules)
            for (auto& e : ie[index_of(k)].named("ie." + std::string(module_name(k)))) out.push_back(e);
        for (auto& e : synth.named("synth")) out.push_back(e);
        return out;
    }

    std::vector<Tensor<T>> parameters() const {
        std::vector<Tensor<T>> out;
        for (auto& [n, t] : named()) out.push_back(t);
        return out;
    }

    bool text_encoder_used() const {
        const auto& f = config.modules;
        return f[ModuleKind::HtNt] || f[ModuleKind::HtNs] || (f[ModuleKind::HsNt] && config.lambda_cl > 0);
    }
    bool speech_encoder_used() const {
        const auto& f = config.modules;
        return f[ModuleKind::HsNs] || f[ModuleKind::HsNt] || (f[ModuleKind::HtNs] && config.lambda_cl > 0);
    }

    // Parameters the configured loss can never reach are frozen.
    void apply_trainable_flags() {
        for (auto& [n, t] : text.named("")) t.node()->requires_grad = text_encoder_used();
        for (auto& [n, t] : speech.named("")) t.node()->requires_grad = speech_encoder_used();
        for (auto k : kAllModules)
            for (auto& [n, t] : ie[index_of(k)].named(""))
                t.node()->requires_grad = config.modules[k] && config.ie_enabled;
        for (auto& [n, t] : synth.named("")) t.node()->requires_grad = true;
    }

    // Deep copy of every parameter.
    Model clone() const {
        Model m = *this;
        for (auto* slot : detail::param_slots(m))
            *slot = Tensor<T>(slot->shape(), slot->to_vector(), slot->requires_grad());
        return m;
    }
};

namespace detail {

template <typename T>
std::vector<Tensor<T>*> param_slots(Model<T>& m) {
    std::vector<Tensor<T>*> s;
    auto enc = [&](EncoderParams<T>& e) {
        s.push_back(&e.speaker_table);
        for (auto* g : {&e.fwd, &e.bwd})
            for (auto* t : {&g->W_z, &g->W_r, &g->W_h, &g->U_z, &g->U_r, &g->U_h, &g->b_z, &g->b_r, &g->b_h})
                s.push_back(t);
        for (auto* t : {&e.proj1, &e.proj1_b, &e.proj2, &e.proj2_b}) s.push_back(t);
    };
    enc(m.text);
    enc(m.speech);
    for (auto& p : m.ie)
        for (auto* t : {&p.W_q, &p.W_k, &p.W_v}) s.push_back(t);
    auto& y = m.synth;
    s.push_back(&y.phoneme_table);
    for (auto* g : {&y.text_fwd, &y.text_bwd})
        for (auto* t : {&g->W_z, &g->W_r, &g->W_h, &g->U_z, &g->U_r, &g->U_h, &g->b_z, &g->b_r, &g->b_h})
            s.push_back(t);
    s.push_back(&y.out_proj);
    s.push_back(&y.out_b);
    for (auto* h : {&y.pitch_head, &y.energy_head, &y.logdur_head})
        for (auto* t : {&h->W1, &h->b1, &h->W2, &h->b2}) s.push_back(t);
    return s;
}

}  // namespace detail

// Same order as Model::named().
template <typename T>
std::vector<Tensor<T>*> parameter_slots(Model<T>& m) {
    return detail::param_slots(m);
}

// ---------------------------------------------------------------------------
// Forward passes.

template <typename T>
Tensor<T> modality_matrix(std::span<const Utterance> utts, bool text) {
    std::vector<const std::vector<double>*> rows;
    for (auto& u : utts) rows.push_back(text ? &u.semantic : &u.prosodic);
    if (rows.empty()) throw ContractError("no utterances");
    const std::size_t d = rows[0]->size();
    std::vector<T> v;
    v.reserve(rows.size() * d);
    for (auto* r : rows) {
        if (r->size() != d) throw DimensionError("utterance feature dimensions differ within a dialogue");
        for (double x : *r) v.push_back(static_cast<T>(x));
    }
    return Tensor<T>({rows.size(), d}, std::move(v));
}

inline std::vector<std::size_t> speakers_of(std::span<const Utterance> utts) {
    std::vector<std::size_t> s;
    for (auto& u : utts) s.push_back(u.speaker);
    return s;
}

template <typename T>
Tensor<T> encode_utterances(std::span<const Utterance> utts, const Model<T>& model, bool text, bool contextual) {
    for (auto& u : utts) {
        const auto& f = text ? u.semantic : u.prosodic;
        if (f.empty()) throw ContractError(std::string("utterance is missing ") + (text ? "semantic" : "prosodic") +
                                           " features");
    }
    return encode_sequence(modality_matrix<T>(utts, text), speakers_of(utts), text ? model.text : model.speech,
                           contextual);
}

// Interaction features F (one row per history prefix) of every enabled module.
// Reads history utterances only.
template <typename T>
InteractionFeatureSet<T> history_features(std::span<const Utterance> history, const Model<T>& model) {
    if (history.empty()) throw ContractError("history must hold at least one utterance");
    InteractionFeatureSet<T> feats;
    Tensor<T> h_text, h_speech;
    for (auto k : kAllModules) {
        if (!model.config.modules[k]) continue;
        auto& h = history_is_text(k) ? h_text : h_speech;
        if (!h.defined()) h = encode_utterances(history, model, history_is_text(k), true);
        feats[k] = interaction_enhance(h, model.ie_for(k), model.config.ie_enabled);
    }
    return feats;
}

template <typename T>
struct ModuleResult {
    Tensor<T> features;  // F, [(N-1) x d_m]
    Tensor<T> next;      // H_next, [(N-1) x d_m]; undefined at inference
    Tensor<T> loss;      // undefined at inference
};

template <typename T>
ModuleResult<T> contrast_with_next(const Tensor<T>& features, std::span<const Utterance> next, ModuleKind kind,
                                   const Model<T>& model) {
    ModuleResult<T> r;
    r.features = features;
    r.next = encode_utterances(next, model, next_is_text(kind), false);
    r.loss = contrastive_loss(alignment_matrices(features, r.next));
    return r;
}

inline void require_dialogue(const DialogueRecord& d) {
    if (d.utterances.size() < 2)
        throw ContractError("dialogue needs at least 2 utterances, got " + std::to_string(d.utterances.size()));
}

// One interaction module end to end. With `training` off only F is computed.
template <typename T>
ModuleResult<T> run_interaction_module(ModuleKind kind, const DialogueRecord& dialogue, const Model<T>& model,
                                       bool training = true) {
    require_dialogue(dialogue);
    std::span<const Utterance> all(dialogue.utterances);
    auto history = all.first(all.size() - 1);
    auto h = encode_utterances(history, model, history_is_text(kind), true);
    auto f = interaction_enhance(h, model.ie_for(kind), model.config.ie_enabled);
    if (!training) return {f, {}, {}};
    return contrast_with_next(f, all.subspan(1), kind, model);
}

template <typename T>
VarianceOutput<T> predict_from_features(const InteractionFeatureSet<T>& feats, const std::vector<std::size_t>& phonemes,
                                        const Model<T>& model) {
    auto p = encode_phonemes(phonemes, model.synth);
    return predict_variance(aggregate_features(p, feats), model.synth);
}

// Prosody of the target utterance from history and phonemes alone.
template <typename T>
ProsodyPrediction infer(std::span<const Utterance> history, const std::vector<std::size_t>& phonemes,
                        const Model<T>& model) {
    NoGradGuard ng;
    if (phonemes.empty()) throw ContractError("infer: empty phoneme sequence");
    for (auto& u : history)
        if (u.semantic.empty() || u.prosodic.empty())
            throw ContractError("infer: history utterance is missing modality features");
    return to_prediction(predict_from_features(history_features(history, model), phonemes, model));
}

template <typename T>
struct LossBreakdown {
    Tensor<T> total;
    double pitch = 0, energy = 0, log_duration = 0;
    std::array<double, 4> contrastive{};  // mean per module; 0 for disabled modules
    double variance() const { return pitch + energy + log_duration; }
};

template <typename T>
Tensor<T> log_duration_target(const std::vector<int>& duration) {
    std::vector<T> v;
    for (int d : duration) v.push_back(static_cast<T>(std::log(static_cast<double>(d))));
    return Tensor<T>::vector(std::move(v));
}

template <typename T>
Tensor<T> real_target(const std::vector<double>& x) {
    std::vector<T> v(x.begin(), x.end());
    return Tensor<T>::vector(std::move(v));
}

// Batch objective: mean over dialogues of
//   MSE(pitch) + MSE(energy) + MSE(log duration) + lambda_cl * sum of enabled
//   module contrastive losses.
template <typename T>
LossBreakdown<T> total_loss(std::span<const DialogueRecord> batch, const Model<T>& model) {
    if (batch.empty()) throw ContractError("total_loss: empty batch");
    LossBreakdown<T> out;
    std::vector<Tensor<T>> per_dialogue;
    const double lambda = model.config.lambda_cl;
    for (auto& d : batch) {
        require_dialogue(d);
        std::span<const Utterance> all(d.utterances);
        auto feats = history_features(all.first(all.size() - 1), model);
        auto v = predict_from_features(feats, d.phonemes, model);
        auto lp = mse(v.pitch, real_target<T>(d.pitch));
        auto le = mse(v.energy, real_target<T>(d.energy));
        auto ld = mse(v.log_duration, log_duration_target<T>(d.duration));
        out.pitch += lp.item();
        out.energy += le.item();
        out.log_duration += ld.item();
        std::vector<Tensor<T>> terms{lp, le, ld};
        for (auto k : kAllModules) {
            if (!model.config.modules[k]) continue;
            if (lambda > 0) {
                auto r = contrast_with_next(feats[k], all.subspan(1), k, model);
                out.contrastive[index_of(k)] += r.loss.item();
                terms.push_back(scale(r.loss, static_cast<T>(lambda)));
            } else {
                NoGradGuard ng;
                auto r = contrast_with_next(feats[k], all.subspan(1), k, model);
                out.contrastive[index_of(k)] += r.loss.item();
            }
        }
        per_dialogue.push_back(add_n(terms));
    }
    const double n = static_cast<double>(batch.size());
    out.pitch /= n;
    out.energy /= n;
    out.log_duration /= n;
    for (auto& c : out.contrastive) c /= n;
    out.total = scale(add_n(per_dialogue), static_cast<T>(1.0 / n));
    return out;
}

// Fraction of prefixes whose most cosine-similar next feature is their own
// successor. Ties go to the lowest index.
template <typename T>
double retrieval_accuracy(const Tensor<T>& features, const Tensor<T>& next) {
    if (features.rows() != next.rows())
        throw ContractError("retrieval_accuracy: " + std::to_string(features.rows()) + " prefixes vs " +
                            std::to_string(next.rows()) + " candidates");
    NoGradGuard ng;
    auto m = build_prediction_matrix(features, next);
    const std::size_t n = features.rows();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (m.at(i, j) > m.at(i, best)) best = j;
        if (best == i) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace i3css
