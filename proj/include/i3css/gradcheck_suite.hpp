#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "i3css/corpus.hpp"
#include "i3css/encoders.hpp"
#include "i3css/interaction.hpp"
#include "i3css/model.hpp"
#include "i3css/numerics/gradcheck.hpp"
#include "i3css/numerics/tensor.hpp"
#include "i3css/synthesizer.hpp"

// Finite-difference checks of every differentiable building block, grouped by
// library module. Always runs in 64-bit.

namespace i3css {

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckEntry {
    std::string module;
    std::string op;
    GradCheckResult result;
    double seconds = 0;
    bool passed() const { return result.max_rel_error <= kGradCheckTolerance; }
};

inline const std::vector<std::string>& gradcheck_modules() {
    static const std::vector<std::string> m{"numerics", "encoders", "interaction", "synthesizer"};
    return m;
}

namespace detail {

struct SuiteDims {
    std::size_t d_in, d_h, d_m, n, vocab;
    std::optional<std::size_t> sample;  // coordinates per tensor; all when empty
};

class SuiteRunner {
  public:
    SuiteRunner(SuiteDims dims, std::uint64_t seed, double eps) : dims_(dims), rng_(seed), eps_(eps) {}

    Tensor<double> rand(Shape s, double sd = 1.0, bool param = true) {
        auto t = normal_param<double>(std::move(s), sd, rng_);
        t.set_requires_grad(param);
        return t;
    }

    void check(std::vector<GradCheckEntry>& out, const std::string& module, const std::string& op,
               const NamedParams& params, const std::function<Tensor<double>()>& f) {
        auto t0 = std::chrono::steady_clock::now();
        GradCheckEntry e{module, op, grad_check(f, params, eps_, dims_.sample, rng_()), 0.0};
        e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(std::move(e));
    }

    void numerics(std::vector<GradCheckEntry>& out) {
        const std::size_t m = dims_.n, k = dims_.d_in, n = dims_.d_h;
        auto A = rand({m, k}), B = rand({k, n}), v = rand({n}), C = rand({m, n});
        auto wo = rand({m, n}, 1.0, false);
        check(out, "numerics", "matmul", {{"A", A}, {"B", B}}, [=] { return sum(mul(matmul(A, B), wo)); });
        auto wt = rand({k, m}, 1.0, false);
        check(out, "numerics", "transpose", {{"A", A}}, [=] { return sum(mul(transpose(A), wt)); });
        check(out, "numerics", "add_row", {{"C", C}, {"v", v}}, [=] { return sum(mul(add_row(C, v), wo)); });
        check(out, "numerics", "mul", {{"C", C}}, [=] { return sum(mul(C, square(C))); });
        check(out, "numerics", "sigmoid", {{"C", C}}, [=] { return sum(mul(sigmoid(C), wo)); });
        check(out, "numerics", "tanh", {{"C", C}}, [=] { return sum(mul(tanh(C), wo)); });
        check(out, "numerics", "exp", {{"C", C}}, [=] { return sum(mul(exp(scale(C, 0.5)), wo)); });
        check(out, "numerics", "softmax", {{"C", C}}, [=] { return sum(mul(softmax(C), wo)); });
        auto S = rand({m + 1, m + 1});
        auto wS = rand({m + 1, m + 1}, 1.0, false);
        check(out, "numerics", "causal_softmax", {{"S", S}}, [=] { return sum(mul(causal_softmax(S), wS)); });
        auto u = rand({n}), w = rand({n});
        check(out, "numerics", "cosine_similarity", {{"u", u}, {"w", w}}, [=] { return cosine_similarity(u, w); });
        check(out, "numerics", "normalize_rows", {{"C", C}}, [=] { return sum(mul(normalize_rows(C), wo)); });
        check(out, "numerics", "layer_norm_rows", {{"C", C}}, [=] { return sum(mul(layer_norm_rows(C), wo)); });
        auto T = rand({m, n}, 1.0, false);
        check(out, "numerics", "mse", {{"C", C}}, [=] { return mse(tanh(C), T); });
        auto table = rand({dims_.vocab, n});
        std::vector<std::size_t> ids{0, dims_.vocab - 1, 0};
        auto wg = rand({ids.size(), n}, 1.0, false);
        check(out, "numerics", "gather_rows", {{"table", table}}, [=] { return sum(mul(tanh(gather_rows(table, ids)), wg)); });
        auto wc = rand({m, k + n}, 1.0, false);
        check(out, "numerics", "concat_slice", {{"A", A}, {"C", C}}, [=] {
            auto j = concat_cols(A, C);
            return sum(mul(concat_rows<double>({slice_rows(j, 1, m), row(j, 0)}), wc));
        });
    }

    void encoders(std::vector<GradCheckEntry>& out) {
        const std::size_t d_in = dims_.d_in, d_h = dims_.d_h, d_m = dims_.d_m, n = dims_.n;
        auto gru = GruWeights<double>::init(d_in, d_h, rng_);
        auto x = rand({d_in}), h = rand({d_h});
        auto wh = rand({d_h}, 1.0, false);
        NamedParams gp = gru.named("gru");
        gp.emplace_back("x", x);
        gp.emplace_back("h", h);
        check(out, "encoders", "gru_cell", gp, [=] { return sum(mul(gru_cell(x, h, gru), wh)); });

        auto enc = EncoderParams<double>::init({d_in, d_h, d_h, d_m, 2}, rng_);
        auto feats = rand({n, d_in}, 1.0, false);
        std::vector<std::size_t> speakers;
        for (std::size_t i = 0; i < n; ++i) speakers.push_back(i % 2);
        auto wy = rand({n, d_m}, 1.0, false);
        auto ep = enc.named("encoder");
        check(out, "encoders", "bigru_encoder_contextual", ep,
              [=] { return sum(mul(encode_sequence(feats, speakers, enc, true), wy)); });
        check(out, "encoders", "bigru_encoder_single_sentence", ep,
              [=] { return sum(mul(encode_sequence(feats, speakers, enc, false), wy)); });
    }

    void interaction(std::vector<GradCheckEntry>& out) {
        const std::size_t d = dims_.d_m, n = dims_.n;
        auto ie = IEParams<double>::init(d, rng_);
        auto q = rand({d}), ctx = rand({n, d});
        auto wq = rand({d}, 1.0, false);
        auto ip = ie.named("ie");
        auto ipx = ip;
        ipx.emplace_back("query", q);
        ipx.emplace_back("context", ctx);
        check(out, "interaction", "cross_attention", ipx, [=] { return sum(mul(cross_attention(q, ctx, ie), wq)); });

        auto H = rand({n + 1, d});
        auto wF = rand({n + 1, d}, 1.0, false);
        auto iph = ip;
        iph.emplace_back("H", H);
        check(out, "interaction", "interaction_enhance", iph,
              [=] { return sum(mul(interaction_enhance(H, ie, true), wF)); });
        check(out, "interaction", "interaction_enhance_prefix_mean", {{"H", H}},
              [=] { return sum(mul(interaction_enhance(H, ie, false), wF)); });

        auto F = rand({n, d}), Hn = rand({n, d});
        check(out, "interaction", "contrastive_loss", {{"F", F}, {"H_next", Hn}},
              [=] { return contrastive_loss(alignment_matrices(F, Hn)); });

        auto cfg = small_config();
        auto model = Model<double>::init(cfg);
        auto dialogue = small_dialogues(cfg, 1)[0];
        for (auto k : kAllModules) {
            NamedParams mp;
            for (auto& [name, t] : model.named())
                if (t.requires_grad() && name.rfind("synth", 0) != 0) mp.emplace_back(name, t);
            check(out, "interaction", "module_loss_" + std::string(module_name(k)), mp,
                  [=] { return run_interaction_module(k, dialogue, model).loss; });
        }
    }

    void synthesizer(std::vector<GradCheckEntry>& out) {
        const std::size_t d = dims_.d_m;
        auto synth = SynthParams<double>::init(dims_.vocab, d, rng_);
        std::vector<std::size_t> ids{1, 0, dims_.vocab - 1};
        auto wy = rand({ids.size(), d}, 1.0, false);
        NamedParams sp;
        for (auto& [name, t] : synth.named("synth"))
            if (name.find("_head") == std::string::npos) sp.emplace_back(name, t);
        check(out, "synthesizer", "encode_phonemes", sp, [=] { return sum(mul(encode_phonemes(ids, synth), wy)); });

        auto P = rand({dims_.n, d});
        auto tp = rand({dims_.n}, 1.0, false), te = rand({dims_.n}, 1.0, false), td = rand({dims_.n}, 1.0, false);
        NamedParams hp;
        for (auto* head : {&synth.pitch_head, &synth.energy_head, &synth.logdur_head})
            for (auto& e : head->named("head")) hp.push_back(e);
        hp.emplace_back("P", P);
        check(out, "synthesizer", "variance_heads", hp, [=] {
            auto v = predict_variance(P, synth);
            return add_n<double>({mse(v.pitch, tp), mse(v.energy, te), mse(v.log_duration, td)});
        });

        auto feats_src = rand({2, d});
        InteractionFeatureSet<double> fs;
        fs[ModuleKind::HtNt] = feats_src;
        auto wa = rand({dims_.n, d}, 1.0, false);
        check(out, "synthesizer", "aggregate_features", {{"P", P}, {"F", feats_src}},
              [=] { return sum(mul(aggregate_features(P, fs), wa)); });

        auto cfg = small_config();
        auto model = Model<double>::init(cfg);
        auto batch = small_dialogues(cfg, 2);
        NamedParams all;
        for (auto& [name, t] : model.named())
            if (t.requires_grad()) all.emplace_back(name, t);
        check(out, "synthesizer", "total_loss", all, [=] { return total_loss<double>(batch, model).total; });
    }

    ModelConfig small_config() const {
        ModelConfig c;
        c.d_t = dims_.d_in;
        c.d_s = dims_.d_in + 1;
        c.d_h_text = dims_.d_h;
        c.d_h_speech = dims_.d_h + 1;
        c.d_m = dims_.d_m;
        c.vocab = dims_.vocab;
        c.precision = Precision::F64;
        return c;
    }

    Corpus small_dialogues(const ModelConfig& c, std::size_t count) const {
        GeneratorConfig g;
        g.num_dialogues = count;
        g.turns_min = 3;
        g.turns_max = 4;
        g.d_z = 3;
        g.d_t = c.d_t;
        g.d_s = c.d_s;
        g.vocab = c.vocab;
        g.phonemes_min = 2;
        g.phonemes_max = 4;
        g.noise_sigma = 0.1;
        g.seed = 11;
        return generate_corpus(g).records;
    }

  private:
    SuiteDims dims_;
    std::mt19937_64 rng_;
    double eps_;
};

}  // namespace detail

// `module` is "all" or one of gradcheck_modules(). Small dims check every
// coordinate; default (desk) dims check a random sample per tensor. d_m is at
// least 3 because layer norm over two features is piecewise constant.
inline std::vector<GradCheckEntry> run_gradcheck_suite(const std::string& module, bool small_dims,
                                                       std::uint64_t seed = 1, std::optional<double> eps = std::nullopt) {
    if (module != "all" && std::find(gradcheck_modules().begin(), gradcheck_modules().end(), module) ==
                               gradcheck_modules().end())
        throw ContractError("unknown gradcheck module '" + module + "'");
    detail::SuiteDims dims = small_dims ? detail::SuiteDims{3, 3, 3, 3, 5, std::nullopt}
                                        : detail::SuiteDims{32, 32, 16, 5, 64, std::size_t{16}};
    // Step sizes balance truncation (~eps^2) against roundoff in the loss
    // (~ulp(f)/eps); the 1e-8 floor makes the absolute error what counts.
    detail::SuiteRunner runner(dims, seed, eps.value_or(small_dims ? 3e-5 : 5e-5));
    std::vector<GradCheckEntry> out;
    if (module == "all" || module == "numerics") runner.numerics(out);
    if (module == "all" || module == "encoders") runner.encoders(out);
    if (module == "all" || module == "interaction") runner.interaction(out);
    if (module == "all" || module == "synthesizer") runner.synthesizer(out);
    return out;
}

}  // namespace i3css
