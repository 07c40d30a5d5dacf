#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "i3css/numerics/gradcheck.hpp"
#include "i3css/synthesizer.hpp"
#include "reference.hpp"

using namespace i3css;
using T = Tensor<double>;

namespace {

T random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) { return normal_param<double>({r, c}, 1.0, rng); }

void expect_values(const T& t, const std::vector<double>& want, double tol = 1e-12) {
    ASSERT_EQ(t.numel(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.at(i), want[i], tol) << "index " << i;
}

ref::Gru to_ref(const GruWeights<double>& g) {
    return {ref::to_mat(g.W_z), ref::to_mat(g.W_r), ref::to_mat(g.W_h), ref::to_mat(g.U_z), ref::to_mat(g.U_r),
            ref::to_mat(g.U_h), ref::to_vec(g.b_z), ref::to_vec(g.b_r), ref::to_vec(g.b_h)};
}

double reference_head(const ref::Vec& x, const VarianceHead<double>& h) {
    auto hidden = ref::tanh_vec(ref::affine(x, ref::to_mat(h.W1), ref::to_vec(h.b1)));
    return ref::affine(hidden, ref::to_mat(h.W2), ref::to_vec(h.b2))[0];
}

void zero_all(SynthParams<double>& p) {
    for (auto& [name, t] : p.named("synth"))
        for (auto& x : const_cast<T&>(t).data()) x = 0.0;
}

}  // namespace

TEST(EncodePhonemes, MatchesReference) {
    std::mt19937_64 rng(1);
    auto p = SynthParams<double>::init(6, 4, rng);
    std::vector<std::size_t> ids{3, 0, 5};
    auto table = ref::to_mat(p.phoneme_table);
    ref::Mat xs;
    for (auto id : ids) xs.push_back(table[id]);
    auto states = ref::bigru(xs, to_ref(p.text_fwd), to_ref(p.text_bwd));
    auto got = encode_phonemes(ids, p);
    ASSERT_EQ(got.shape(), (Shape{3, 4}));
    for (std::size_t i = 0; i < 3; ++i)
        expect_values(row(got, i), ref::affine(states[i], ref::to_mat(p.out_proj), ref::to_vec(p.out_b)));
}

TEST(EncodePhonemes, SingleIdGivesOneRow) {
    std::mt19937_64 rng(2);
    auto p = SynthParams<double>::init(6, 4, rng);
    EXPECT_EQ(encode_phonemes({2}, p).shape(), (Shape{1, 4}));
}

TEST(EncodePhonemes, DistinctIdsGiveDistinctEncodings) {
    std::mt19937_64 rng(3);
    auto p = SynthParams<double>::init(6, 4, rng);
    auto a = encode_phonemes({1, 2}, p), b = encode_phonemes({2, 1}, p);
    EXPECT_NE(row(a, 0).to_vector(), row(b, 0).to_vector());
    EXPECT_NE(row(a, 0).to_vector(), row(a, 1).to_vector());
}

TEST(EncodePhonemes, Errors) {
    std::mt19937_64 rng(4);
    auto p = SynthParams<double>::init(6, 4, rng);
    EXPECT_THROW(encode_phonemes({}, p), ContractError);
    EXPECT_THROW(encode_phonemes({6}, p), ContractError);
}

TEST(AggregateFeatures, ZeroFeaturesLeaveEncodingsUnchanged) {
    std::mt19937_64 rng(5);
    auto P = random_matrix(3, 4, rng);
    InteractionFeatureSet<double> fs;
    for (auto k : kAllModules) fs[k] = T::zeros({2, 4});
    EXPECT_EQ(aggregate_features(P, fs).to_vector(), P.to_vector());
}

TEST(AggregateFeatures, UnitBasisSumsOnEveryPosition) {
    InteractionFeatureSet<double> fs;
    for (auto k : kAllModules) {
        std::vector<double> e(4, 0.0);
        e[index_of(k)] = 1.0;
        fs[k] = T::matrix(1, 4, e);
    }
    auto out = aggregate_features(T::zeros({3, 4}), fs);
    expect_values(out, std::vector<double>(12, 1.0));
}

TEST(AggregateFeatures, UsesFinalPrefixOnlyAndSkipsAblatedModules) {
    std::mt19937_64 rng(6);
    auto P = random_matrix(3, 2, rng);
    InteractionFeatureSet<double> fs;
    fs[ModuleKind::HsNt] = T::matrix({{100, 100}, {1, -2}});
    auto out = aggregate_features(P, fs);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_DOUBLE_EQ(out.at(i, 0) - P.at(i, 0), 1.0);
        EXPECT_DOUBLE_EQ(out.at(i, 1) - P.at(i, 1), -2.0);
    }
}

TEST(AggregateFeatures, DimensionMismatchIsError) {
    InteractionFeatureSet<double> fs;
    fs[ModuleKind::HtNt] = T::zeros({1, 3});
    EXPECT_THROW(aggregate_features(T::zeros({2, 4}), fs), DimensionError);
}

TEST(PredictVariance, ZeroWeightsGiveZeroPredictionsAndIdentityLength) {
    std::mt19937_64 rng(7);
    auto p = SynthParams<double>::init(6, 4, rng);
    zero_all(p);
    auto pred = to_prediction(predict_variance(random_matrix(5, 4, rng), p));
    EXPECT_EQ(pred.pitch, std::vector<double>(5, 0.0));
    EXPECT_EQ(pred.energy, std::vector<double>(5, 0.0));
    EXPECT_EQ(pred.log_duration, std::vector<double>(5, 0.0));
    EXPECT_EQ(pred.regulated_length, 5u);
}

TEST(PredictVariance, IdenticalRowsGiveIdenticalPredictions) {
    std::mt19937_64 rng(8);
    auto p = SynthParams<double>::init(6, 3, rng);
    auto r = random_matrix(1, 3, rng);
    auto v = predict_variance(concat_rows<double>({r, r, r}), p);
    for (auto* t : {&v.pitch, &v.energy, &v.log_duration}) {
        EXPECT_EQ(t->at(0), t->at(1));
        EXPECT_EQ(t->at(1), t->at(2));
    }
}

TEST(PredictVariance, MatchesReferenceMlp) {
    std::mt19937_64 rng(9);
    auto p = SynthParams<double>::init(6, 3, rng);
    for (auto& [name, t] : p.named("synth"))
        if (name.find(".b") != std::string::npos)
            for (auto& x : const_cast<T&>(t).data()) x = std::normal_distribution<double>(0, 0.5)(rng);
    auto X = random_matrix(2, 3, rng);
    auto v = predict_variance(X, p);
    auto rows = ref::to_mat(X);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_NEAR(v.pitch.at(i), reference_head(rows[i], p.pitch_head), 1e-12);
        EXPECT_NEAR(v.energy.at(i), reference_head(rows[i], p.energy_head), 1e-12);
        EXPECT_NEAR(v.log_duration.at(i), reference_head(rows[i], p.logdur_head), 1e-12);
    }
}

TEST(ProsodyPrediction, RegulatedLengthFollowsRoundingRule) {
    VarianceOutput<double> v{T::vector({0, 0, 0}), T::vector({0, 0, 0}), T::vector({std::log(2.6), -5.0, std::log(3.4)})};
    auto pred = to_prediction(v);
    EXPECT_EQ(pred.regulated_length, 3u + 1u + 3u);
    EXPECT_EQ(duration_from_log(std::log(1.49)), 1u);
    EXPECT_EQ(duration_from_log(-100.0), 1u);
}

TEST(LengthRegulate, Examples) {
    auto P = T::matrix({{1, 10}, {2, 20}});
    EXPECT_EQ(length_regulate(P, std::vector<int>{1, 1}).to_vector(), P.to_vector());
    expect_values(length_regulate(P, std::vector<int>{2, 3}), {1, 10, 1, 10, 2, 20, 2, 20, 2, 20});
}

TEST(LengthRegulate, ConservesTotalLength) {
    std::mt19937_64 rng(10);
    std::uniform_int_distribution<int> dur(1, 8);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<int> d(1 + trial % 6);
        int total = 0;
        for (auto& x : d) total += x = dur(rng);
        EXPECT_EQ(length_regulate(random_matrix(d.size(), 2, rng), d).rows(), static_cast<std::size_t>(total));
    }
}

TEST(LengthRegulate, NonPositiveDurationIsContractError) {
    auto P = T::matrix({{1, 10}, {2, 20}});
    EXPECT_THROW(length_regulate(P, std::vector<int>{1, 0}), ContractError);
    EXPECT_THROW(length_regulate(P, std::vector<int>{-1, 2}), ContractError);
}

TEST(SynthGradients, PhonemeEncoderAndHeadsPassGradCheck) {
    std::mt19937_64 rng(11);
    auto p = SynthParams<double>::init(5, 4, rng);
    std::vector<std::size_t> ids{4, 1, 1};
    auto tp = normal_param<double>({3}, 1.0, rng), te = normal_param<double>({3}, 1.0, rng);
    auto td = normal_param<double>({3}, 1.0, rng);
    auto r = grad_check(
        [&] {
            auto v = predict_variance(encode_phonemes(ids, p), p);
            return add_n<double>({mse(v.pitch, tp), mse(v.energy, te), mse(v.log_duration, td)});
        },
        p.named("synth"));
    EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "]";
}
