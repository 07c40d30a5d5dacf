#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "i3css/checkpoint.hpp"
#include "i3css/corpus.hpp"
#include "i3css/model.hpp"
#include "i3css/train.hpp"

using namespace i3css;
using T = Tensor<double>;

namespace {

ModelConfig small_model() {
    ModelConfig c;
    c.d_t = 6;
    c.d_s = 8;
    c.d_h_text = 5;
    c.d_h_speech = 6;
    c.d_m = 4;
    c.vocab = 10;
    c.precision = Precision::F64;
    return c;
}

GeneratorConfig small_gen(std::size_t n, std::uint64_t seed = 3) {
    GeneratorConfig g;
    g.num_dialogues = n;
    g.d_z = 4;
    g.d_t = 6;
    g.d_s = 8;
    g.vocab = 10;
    g.seed = seed;
    return g;
}

Corpus small_corpus(std::size_t n, std::uint64_t seed = 3) { return generate_corpus(small_gen(n, seed)).records; }

void zero_tensor(const T& t) {
    for (auto& x : const_cast<T&>(t).data()) x = 0.0;
}

std::vector<double> grads_of(const Model<double>& m) {
    std::vector<double> g;
    for (auto& [name, t] : m.named())
        if (t.has_grad()) g.insert(g.end(), t.grad().begin(), t.grad().end());
        else g.insert(g.end(), t.numel(), 0.0);
    return g;
}

void zero_grads(const Model<double>& m) {
    for (auto& [name, t] : m.named()) const_cast<T&>(t).zero_grad();
}

// Variance part of the objective, recomputed outside total_loss.
T variance_loss(std::span<const DialogueRecord> batch, const Model<double>& model) {
    std::vector<T> terms;
    for (auto& d : batch) {
        std::span<const Utterance> all(d.utterances);
        auto v = predict_from_features(history_features(all.first(all.size() - 1), model), d.phonemes, model);
        terms.push_back(add_n<double>({mse(v.pitch, real_target<double>(d.pitch)),
                                       mse(v.energy, real_target<double>(d.energy)),
                                       mse(v.log_duration, log_duration_target<double>(d.duration))}));
    }
    return scale(add_n(terms), 1.0 / static_cast<double>(batch.size()));
}

std::string cut(const std::string& s, std::size_t n) { return s.substr(0, n); }

}  // namespace

TEST(TotalLoss, NoModulesReducesToVarianceTerms) {
    auto cfg = small_model();
    cfg.modules = ModuleFlags::none();
    auto model = Model<double>::init(cfg);
    auto batch = small_corpus(4);
    auto l = total_loss<double>(batch, model);
    EXPECT_NEAR(l.total.item(), variance_loss(batch, model).item(), 1e-12);
    EXPECT_NEAR(l.total.item(), l.variance(), 1e-12);
    for (double c : l.contrastive) EXPECT_EQ(c, 0.0);
}

TEST(TotalLoss, EqualsVariancePlusIndependentModuleLosses) {
    auto cfg = small_model();
    cfg.lambda_cl = 0.7;
    auto model = Model<double>::init(cfg);
    auto batch = small_corpus(5);
    double modules = 0;
    for (auto& d : batch)
        for (auto k : kAllModules) modules += run_interaction_module(k, d, model).loss.item();
    modules /= static_cast<double>(batch.size());
    const double want = variance_loss(batch, model).item() + cfg.lambda_cl * modules;
    EXPECT_NEAR(total_loss<double>(batch, model).total.item(), want, 1e-12);
}

TEST(TotalLoss, PerfectPredictionsGiveZero) {
    auto cfg = small_model();
    cfg.modules = ModuleFlags::none();
    auto model = Model<double>::init(cfg);
    zero_tensor(model.synth.logdur_head.W2);
    zero_tensor(model.synth.logdur_head.b2);
    auto batch = small_corpus(3);
    for (auto& d : batch) {
        std::span<const Utterance> all(d.utterances);
        auto p = infer(all.first(all.size() - 1), d.phonemes, model);
        d.pitch = p.pitch;
        d.energy = p.energy;
        d.duration.assign(d.phonemes.size(), 1);
    }
    EXPECT_EQ(total_loss<double>(batch, model).total.item(), 0.0);
}

TEST(TotalLoss, ZeroLambdaDetachesContrastiveGradients) {
    auto cfg = small_model();
    cfg.lambda_cl = 0.0;
    auto model = Model<double>::init(cfg);
    auto batch = small_corpus(3);
    zero_grads(model);
    auto l = total_loss<double>(batch, model);
    backward(l.total);
    auto with_total = grads_of(model);
    zero_grads(model);
    backward(variance_loss(batch, model));
    auto variance_only = grads_of(model);
    ASSERT_EQ(with_total.size(), variance_only.size());
    for (std::size_t i = 0; i < with_total.size(); ++i) EXPECT_NEAR(with_total[i], variance_only[i], 1e-14);
    // The contrastive terms are still reported.
    for (double c : l.contrastive) EXPECT_GT(c, 0.0);
}

TEST(TotalLoss, VarianceGradientReachesInteractionAndEncoders) {
    auto cfg = small_model();
    cfg.lambda_cl = 0.0;
    auto model = Model<double>::init(cfg);
    auto batch = small_corpus(3);
    zero_grads(model);
    backward(total_loss<double>(batch, model).total);
    for (auto& [name, t] : model.named()) {
        if (name.find("speaker_table") != std::string::npos) continue;  // rows of unseen speakers stay zero
        double norm = 0;
        for (double g : t.grad()) norm += g * g;
        EXPECT_GT(norm, 0.0) << name;
    }
}

TEST(TotalLoss, EmptyBatchIsContractError) {
    auto model = Model<double>::init(small_model());
    EXPECT_THROW(total_loss<double>(Corpus{}, model), ContractError);
}

TEST(Retrieval, Examples) {
    auto I = T::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    EXPECT_EQ(retrieval_accuracy(I, I), 1.0);
    auto F = T::matrix({{1, 0, 0}, {1, 0, 0}}), H = T::matrix({{0, 1, 0}, {0, 0, 1}});
    EXPECT_EQ(retrieval_accuracy(F, H), 0.5);
    EXPECT_EQ(retrieval_accuracy(T::matrix({{1, 2}}), T::matrix({{-3, 1}})), 1.0);
    EXPECT_THROW(retrieval_accuracy(I, F), ContractError);
}

TEST(Evaluate, PerfectPredictionsGiveZeroMae) {
    auto cfg = small_model();
    auto model = Model<double>::init(cfg);
    zero_tensor(model.synth.logdur_head.W2);
    zero_tensor(model.synth.logdur_head.b2);
    auto records = small_corpus(6);
    auto preds = predict_split(model, records);
    for (std::size_t i = 0; i < records.size(); ++i) {
        records[i].pitch = preds[i].pitch;
        records[i].energy = preds[i].energy;
        records[i].duration.assign(records[i].phonemes.size(), 1);
    }
    auto rep = evaluate(model, records);
    EXPECT_EQ(rep.mae_p, 0.0);
    EXPECT_EQ(rep.mae_e, 0.0);
    EXPECT_EQ(rep.mae_d, 0.0);
}

TEST(Evaluate, ZeroPredictorMatchesMeanAbsoluteTarget) {
    auto cfg = small_model();
    auto model = Model<double>::init(cfg);
    for (auto* h : {&model.synth.pitch_head, &model.synth.energy_head}) {
        zero_tensor(h->W2);
        zero_tensor(h->b2);
    }
    auto gen = small_gen(2000);
    auto records = generate_corpus(gen).records;
    auto rep = evaluate(model, records);
    double abs_sum = 0;
    std::size_t n = 0;
    for (auto& d : records)
        for (double x : d.pitch) {
            abs_sum += std::abs(x);
            ++n;
        }
    EXPECT_NEAR(rep.mae_p, abs_sum / static_cast<double>(n), 1e-9);
    EXPECT_NEAR(rep.mae_p, std::sqrt(2.0 / M_PI), 0.05);
}

TEST(Evaluate, ReportsOnlyEnabledModules) {
    auto cfg = small_model();
    cfg.modules = ModuleFlags::only({ModuleKind::HtNt, ModuleKind::HsNt});
    auto rep = evaluate(Model<double>::init(cfg), small_corpus(5));
    EXPECT_EQ(rep.retrieval_acc.size(), 2u);
    EXPECT_TRUE(rep.retrieval_acc.count("ht-nt"));
    EXPECT_TRUE(rep.retrieval_acc.count("hs-nt"));
    for (auto& [k, v] : rep.retrieval_acc) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Evaluate, PoisonedTargetFeaturesDoNotChangePredictions) {
    auto model = Model<double>::init(small_model());
    auto records = small_corpus(8);
    auto clean = predict_split(model, records);
    for (auto& d : records) {
        for (auto& x : d.utterances.back().semantic) x = std::numeric_limits<double>::quiet_NaN();
        for (auto& x : d.utterances.back().prosodic) x = std::numeric_limits<double>::quiet_NaN();
    }
    auto poisoned = predict_split(model, records);
    for (std::size_t i = 0; i < records.size(); ++i) {
        EXPECT_EQ(poisoned[i].pitch, clean[i].pitch);
        EXPECT_EQ(poisoned[i].energy, clean[i].energy);
        EXPECT_EQ(poisoned[i].log_duration, clean[i].log_duration);
        for (double x : poisoned[i].pitch) EXPECT_TRUE(std::isfinite(x));
    }
}

TEST(Infer, SingleUtteranceHistory) {
    auto model = Model<double>::init(small_model());
    auto d = small_corpus(1)[0];
    auto p = infer(std::span<const Utterance>(d.utterances.data(), 1), d.phonemes, model);
    EXPECT_EQ(p.pitch.size(), d.phonemes.size());
    EXPECT_GE(p.regulated_length, d.phonemes.size());
}

TEST(Infer, WithoutModulesDependsOnlyOnPhonemes) {
    auto cfg = small_model();
    cfg.modules = ModuleFlags::none();
    auto model = Model<double>::init(cfg);
    auto c = small_corpus(2);
    std::span<const Utterance> h0(c[0].utterances.data(), 1), h1(c[1].utterances.data(), 1);
    auto a = infer(h0, c[0].phonemes, model), b = infer(h1, c[0].phonemes, model);
    EXPECT_EQ(a.pitch, b.pitch);
    EXPECT_EQ(a.log_duration, b.log_duration);
}

TEST(Infer, DeterministicAndHistorySensitive) {
    auto model = Model<double>::init(small_model());
    auto c = small_corpus(2);
    std::span<const Utterance> h0(c[0].utterances.data(), 1), h1(c[1].utterances.data(), 1);
    auto a = infer(h0, c[0].phonemes, model), b = infer(h0, c[0].phonemes, model);
    EXPECT_EQ(a.pitch, b.pitch);
    EXPECT_NE(a.pitch, infer(h1, c[0].phonemes, model).pitch);
}

TEST(Infer, Errors) {
    auto model = Model<double>::init(small_model());
    auto d = small_corpus(1)[0];
    std::span<const Utterance> h(d.utterances.data(), 1);
    EXPECT_THROW(infer(h, {}, model), ContractError);
    d.utterances[0].semantic.clear();
    EXPECT_THROW(infer(std::span<const Utterance>(d.utterances.data(), 1), d.phonemes, model), ContractError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    for (auto prec : {Precision::F32, Precision::F64}) {
        auto cfg = small_model();
        cfg.precision = prec;
        std::string bytes;
        if (prec == Precision::F32)
            bytes = serialize_checkpoint(to_checkpoint(Model<float>::init(cfg), 12, {0.5, 2.0, -1.0, 3.0}));
        else
            bytes = serialize_checkpoint(to_checkpoint(Model<double>::init(cfg), 12, {0.5, 2.0, -1.0, 3.0}));
        auto loaded = deserialize_checkpoint(bytes);
        EXPECT_EQ(serialize_checkpoint(loaded), bytes);
        EXPECT_EQ(loaded.config, cfg);
        EXPECT_EQ(loaded.step, 12u);
        EXPECT_EQ(loaded.norm.pitch_std, 2.0);
        if (prec == Precision::F32)
            EXPECT_EQ(serialize_checkpoint(to_checkpoint(model_from_checkpoint<float>(loaded), 12, loaded.norm)), bytes);
        else
            EXPECT_EQ(serialize_checkpoint(to_checkpoint(model_from_checkpoint<double>(loaded), 12, loaded.norm)),
                      bytes);
    }
}

TEST(Checkpoint, FileRoundTrip) {
    auto ck = to_checkpoint(Model<double>::init(small_model()), 3);
    auto path = (std::filesystem::temp_directory_path() / "i3css_pipeline_test.i3ck").string();
    save_checkpoint(ck, path);
    EXPECT_EQ(serialize_checkpoint(load_checkpoint(path)), serialize_checkpoint(ck));
}

TEST(Checkpoint, CorruptMagicIsFormatError) {
    auto bytes = serialize_checkpoint(to_checkpoint(Model<double>::init(small_model())));
    bytes[0] = 'X';
    EXPECT_THROW(deserialize_checkpoint(bytes), FormatError);
    auto versioned = serialize_checkpoint(to_checkpoint(Model<double>::init(small_model())));
    versioned[4] = 9;
    EXPECT_THROW(deserialize_checkpoint(versioned), FormatError);
}

TEST(Checkpoint, TruncationIsIoErrorWithOffset) {
    auto bytes = serialize_checkpoint(to_checkpoint(Model<double>::init(small_model())));
    for (std::size_t keep : {std::size_t{6}, bytes.size() / 2, bytes.size() - 1}) {
        try {
            deserialize_checkpoint(cut(bytes, keep));
            FAIL() << "expected IoError at " << keep;
        } catch (const IoError& e) {
            EXPECT_LE(e.offset(), keep);
        }
    }
}

TEST(Checkpoint, ShapeMismatchNamesTensor) {
    auto ck = to_checkpoint(Model<double>::init(small_model()));
    ck.config.d_m = 5;
    try {
        validate_checkpoint(ck);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("text_encoder."), std::string::npos) << e.what();
    }
}

TEST(Split, EightOneOneAndDisjoint) {
    auto s = split_dialogues(2000, 4);
    EXPECT_EQ(s.train.size(), 1600u);
    EXPECT_EQ(s.val.size(), 200u);
    EXPECT_EQ(s.test.size(), 200u);
    std::vector<int> seen(2000, 0);
    for (auto* part : {&s.train, &s.val, &s.test})
        for (auto i : *part) ++seen[i];
    for (int c : seen) EXPECT_EQ(c, 1);
    EXPECT_EQ(split_dialogues(2000, 4).test, s.test);
    EXPECT_NE(split_dialogues(2000, 5).test, s.test);
}

TEST(Train, ZeroStepsReturnsInitialization) {
    auto cfg = small_model();
    cfg.steps = 0;
    auto res = train<double>(cfg, small_corpus(20));
    EXPECT_EQ(res.log.size(), 1u);
    EXPECT_EQ(res.log[0]["step"], 0);
    EXPECT_EQ(serialize_checkpoint(to_checkpoint(res.final_model)),
              serialize_checkpoint(to_checkpoint(Model<double>::init(cfg))));
}

TEST(Train, SameSeedGivesIdenticalLogs) {
    auto cfg = small_model();
    cfg.steps = 12;
    cfg.eval_every = 4;
    cfg.batch_size = 4;
    auto corpus = small_corpus(30);
    auto a = train<double>(cfg, corpus), b = train<double>(cfg, corpus);
    ASSERT_EQ(a.log.size(), 4u);
    for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].dump(), b.log[i].dump());
    EXPECT_EQ(serialize_checkpoint(to_checkpoint(a.final_model)), serialize_checkpoint(to_checkpoint(b.final_model)));
    cfg.seed = 1;
    EXPECT_NE(train<double>(cfg, corpus).log.back().dump(), a.log.back().dump());
}

TEST(Train, ValidationLossDropsBelowInitialization) {
    auto cfg = small_model();
    cfg.steps = 150;
    cfg.eval_every = 150;
    cfg.lr = 3e-3;
    auto res = train<double>(cfg, small_corpus(200));
    EXPECT_LT(res.log.back()["val_loss"].get<double>(), res.initial_val_loss);
    EXPECT_LE(res.best_val_loss, res.log.back()["val_loss"].get<double>());
}

TEST(Train, DimensionMismatchIsConfigError) {
    auto cfg = small_model();
    cfg.d_t = 7;
    EXPECT_THROW(train<double>(cfg, small_corpus(20)), ConfigError);
    cfg = small_model();
    cfg.vocab = 3;
    EXPECT_THROW(train<double>(cfg, small_corpus(20)), ConfigError);
}

TEST(Train, NonFiniteLossNamesTensor) {
    auto cfg = small_model();
    cfg.steps = 5;
    auto corpus = small_corpus(20);
    for (auto& d : corpus) d.pitch[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        train<double>(cfg, corpus);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
        EXPECT_NE(msg.find("first non-finite tensor: "), std::string::npos) << msg;
    }
}

TEST(ModelConfigJson, RoundTripAndErrors) {
    auto cfg = small_model();
    cfg.modules = ModuleFlags::only({ModuleKind::HsNs});
    cfg.ie_enabled = false;
    nlohmann::json j = cfg;
    EXPECT_EQ(j.get<ModelConfig>(), cfg);
    j["unknown"] = 1;
    EXPECT_THROW(j.get<ModelConfig>(), ConfigError);
    EXPECT_THROW(nlohmann::json({{"module_flags", {{"xx_yy", true}}}}).get<ModelConfig>(), ConfigError);
    EXPECT_THROW(nlohmann::json({{"precision", "f16"}}).get<ModelConfig>(), ConfigError);
}

TEST(Model, CloneIsDeep) {
    auto m = Model<double>::init(small_model());
    auto c = m.clone();
    m.synth.out_b.data()[0] = 42.0;
    EXPECT_NE(c.synth.out_b.at(0), 42.0);
}

TEST(Model, AblatedModulesFreezeUnreachableParameters) {
    auto cfg = small_model();
    cfg.modules = ModuleFlags::only({ModuleKind::HtNt});
    auto m = Model<double>::init(cfg);
    for (auto& [name, t] : m.named()) {
        const bool speech = name.rfind("speech_encoder", 0) == 0;
        const bool other_ie = name.rfind("ie.", 0) == 0 && name.rfind("ie.ht-nt", 0) != 0;
        EXPECT_EQ(t.requires_grad(), !(speech || other_ie)) << name;
    }
}
