#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "i3css/numerics/adam.hpp"
#include "i3css/numerics/gradcheck.hpp"
#include "i3css/numerics/init.hpp"
#include "i3css/numerics/tensor.hpp"

using namespace i3css;
using T = Tensor<double>;

namespace {

void expect_values(const T& t, const std::vector<double>& want, double tol = 1e-12) {
    ASSERT_EQ(t.numel(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.at(i), want[i], tol) << "index " << i;
}

T random(Shape s, std::mt19937_64& rng, double sd = 1.0) {
    auto t = normal_param<double>(std::move(s), sd, rng);
    return t;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    auto I = T::matrix({{1, 0}, {0, 1}});
    auto B = T::matrix({{1.5, -2, 3}, {4, 5, -6.25}});
    expect_values(matmul(I, B), B.to_vector());
}

TEST(Matmul, ZeroMatrixGivesZero) {
    auto Z = T::zeros({2, 2});
    auto B = T::matrix({{1, 2, 3}, {4, 5, 6}});
    expect_values(matmul(Z, B), std::vector<double>(6, 0.0));
}

TEST(Matmul, HandExpandedProduct) {
    auto C = matmul(T::matrix({{1, 2}, {3, 4}}), T::matrix({{5}, {6}}));
    EXPECT_EQ(C.shape(), (Shape{2, 1}));
    expect_values(C, {17, 39});
}

TEST(Matmul, MismatchNamesBothShapes) {
    try {
        matmul(T::zeros({2, 3}), T::zeros({2, 3}));
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    }
}

TEST(Softmax, ConstantInputIsUniform) {
    expect_values(softmax(T::vector({2.5, 2.5, 2.5})), {1.0 / 3, 1.0 / 3, 1.0 / 3});
}

TEST(Softmax, LogThreeExample) { expect_values(softmax(T::vector({0.0, std::log(3.0)})), {0.25, 0.75}); }

TEST(Softmax, SumsToOneAndIsShiftInvariant) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        auto v = random({7}, rng, 5.0);
        auto s = softmax(v);
        double total = 0;
        for (double x : s.data()) {
            EXPECT_GT(x, 0.0);
            total += x;
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
        expect_values(softmax(add_scalar(v, 123.0)), s.to_vector(), 1e-12);
    }
}

TEST(Softmax, LargeInputsStayFinite) {
    auto s = softmax(T::vector({1000.0, 1001.0}));
    EXPECT_TRUE(all_finite(s));
    EXPECT_NEAR(s.at(1), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(CausalSoftmax, RowsSeeOnlyEarlierPositions) {
    auto s = causal_softmax(T::matrix({{5, 100, 100}, {-3, 100, 100}, {0, std::log(3.0), 100}}));
    expect_values(s, {0, 0, 0, 1, 0, 0, 0.25, 0.75, 0});
}

TEST(Cosine, Examples) {
    auto v = T::vector({0.3, -2.0, 4.0});
    EXPECT_NEAR(cosine_similarity(v, v).item(), 1.0, 1e-12);
    EXPECT_NEAR(cosine_similarity(v, neg(v)).item(), -1.0, 1e-12);
    EXPECT_EQ(cosine_similarity(T::vector({1, 0}), T::vector({0, 1})).item(), 0.0);
}

TEST(Cosine, ZeroVectorGivesZero) {
    EXPECT_EQ(cosine_similarity(T::vector({0, 0}), T::vector({1, 2})).item(), 0.0);
}

TEST(Cosine, ShapeMismatchIsDimensionError) {
    EXPECT_THROW(cosine_similarity(T::vector({1, 0}), T::vector({1, 0, 0})), DimensionError);
}

TEST(Mse, Examples) {
    auto A = T::matrix({{1, -1}, {-1, 1}});
    EXPECT_EQ(mse(A, A).item(), 0.0);
    EXPECT_EQ(mse(A, T::zeros({2, 2})).item(), 1.0);
    EXPECT_EQ(mse(T::vector({2}), T::vector({0})).item(), 4.0);
    EXPECT_THROW(mse(A, T::zeros({4})), DimensionError);
}

TEST(Backward, SquareGradient) {
    auto x = T::vector({3});
    x.set_requires_grad(true);
    backward(sum(mul(x, x)));
    expect_values(T::vector(std::vector<double>(x.grad().begin(), x.grad().end())), {6});
}

TEST(Backward, QuadraticClosedForm) {
    // loss = mse(x W, 0) with x a fixed row: dL/dW = (2/n) x^T (x W).
    std::mt19937_64 rng(5);
    auto W = random({4, 3}, rng);
    W.set_requires_grad(true);
    auto x = random({1, 4}, rng);
    auto y = matmul(x, W);
    backward(mse(y, T::zeros({1, 3})));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            EXPECT_NEAR(W.grad()[i * 3 + j], 2.0 / 3.0 * x.at(i) * y.at(j), 1e-12);
}

TEST(Backward, NonScalarIsContractError) {
    auto x = T::vector({1, 2});
    x.set_requires_grad(true);
    EXPECT_THROW(backward(mul(x, x)), ContractError);
}

TEST(Backward, SecondPassDoublesLeafGradients) {
    std::mt19937_64 rng(8);
    auto W = random({3, 3}, rng);
    W.set_requires_grad(true);
    auto x = random({2, 3}, rng);
    auto loss = sum(tanh(matmul(x, W)));
    backward(loss);
    std::vector<double> once(W.grad().begin(), W.grad().end());
    backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(W.grad()[i], 2 * once[i], 1e-12);
}

TEST(Backward, SharedSubgraphVisitedOnce) {
    auto x = T::vector({2});
    x.set_requires_grad(true);
    auto y = mul(x, x);  // used twice below
    backward(sum(add(y, y)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(NoGrad, GuardStopsRecording) {
    auto x = T::vector({1});
    x.set_requires_grad(true);
    {
        NoGradGuard ng;
        EXPECT_FALSE(mul(x, x).requires_grad());
    }
    EXPECT_TRUE(mul(x, x).requires_grad());
}

TEST(GradCheck, QuadraticIsExact) {
    auto x = T::vector({1.0});
    EXPECT_LE(grad_check([](const T& p) { return sum(mul(p, p)); }, x, 1e-5), 1e-8);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
    auto x = T::vector({1.0, 2.0});
    EXPECT_EQ(grad_check([](const T& p) { return sum(scale(p, 0.0)); }, x), 0.0);
}

TEST(GradCheck, DetectsWrongGradient) {
    // A hand-built node whose backward rule is deliberately off by a factor 2.
    auto x = T::vector({0.7});
    auto bad = [](const T& p) {
        return detail::record<double>({1}, {p.at(0) * p.at(0)}, "bad_square", {p.node()},
                                      [pn = p.node()](Node<double>& n) {
                                          pn->ensure_grad();
                                          pn->grad[0] += 4.0 * pn->data[0] * n.grad[0];
                                      });
    };
    EXPECT_GT(grad_check(bad, x), 0.4);
}

TEST(GradCheck, NonFiniteLossIsNumericError) {
    auto x = T::vector({1.0});
    EXPECT_THROW(grad_check([](const T& p) { return scale(sum(p), std::nan("")); }, x), NumericError);
}

// Five random small-shape points for each differentiable operation.
TEST(GradCheck, EveryOperationAtRandomPoints) {
    using Fn = std::function<T(const T&)>;
    std::mt19937_64 rng(17);
    for (int point = 0; point < 5; ++point) {
        const std::size_t m = 2 + point % 2, n = 3;
        auto B = random({n, 2}, rng), R = random({m, n}, rng), v = random({n}, rng), u = random({n}, rng);
        auto S = random({n, n}, rng);
        std::vector<std::pair<std::string, Fn>> cases{
            {"matmul_left", [&](const T& x) { return sum(mul(matmul(x, B), random({m, 2}, rng))); }},
            {"transpose", [&](const T& x) { return sum(mul(transpose(x), transpose(R))); }},
            {"add", [&](const T& x) { return sum(mul(add(x, R), R)); }},
            {"sub", [&](const T& x) { return sum(mul(sub(R, x), R)); }},
            {"mul", [&](const T& x) { return sum(mul(mul(x, x), R)); }},
            {"add_row", [&](const T& x) { return sum(mul(add_row(x, v), R)); }},
            {"add_scalar_scale_neg", [&](const T& x) { return sum(mul(neg(scale(add_scalar(x, 0.3), 1.7)), R)); }},
            {"sigmoid", [&](const T& x) { return sum(mul(sigmoid(x), R)); }},
            {"tanh", [&](const T& x) { return sum(mul(tanh(x), R)); }},
            {"exp", [&](const T& x) { return sum(mul(exp(scale(x, 0.5)), R)); }},
            {"square_mean", [&](const T& x) { return mean(square(x)); }},
            {"softmax", [&](const T& x) { return sum(mul(softmax(x), R)); }},
            {"layer_norm_rows", [&](const T& x) { return sum(mul(layer_norm_rows(x), R)); }},
            {"normalize_rows", [&](const T& x) { return sum(mul(normalize_rows(x), R)); }},
            {"mse", [&](const T& x) { return mse(tanh(x), R); }},
            {"concat_cols", [&](const T& x) { return sum(mul(concat_cols(x, R), concat_cols(R, R))); }},
            {"slice_row_concat",
             [&](const T& x) { return sum(mul(concat_rows<double>({row(x, m - 1), slice_rows(x, 0, m - 1)}), R)); }},
            {"gather_rows", [&](const T& x) { return sum(mul(gather_rows(x, {1, 0, 1}), random({3, n}, rng))); }},
            {"reshape", [&](const T& x) { return sum(mul(reshape(x, {m * n}), reshape(R, {m * n}))); }},
            {"add_n", [&](const T& x) { return sum(mul(add_n<double>({x, mul(x, x), R}), R)); }},
        };
        // The random readouts inside some lambdas must stay fixed across the
        // evaluations of one check, so each case gets a frozen copy of rng.
        for (auto& [name, f] : cases) {
            auto x = random({m, n}, rng);
            auto saved = rng;
            auto frozen = [&](const T& p) {
                rng = saved;
                return f(p);
            };
            EXPECT_LE(grad_check(frozen, x), 1e-4) << name << " at point " << point;
        }
        auto cs = random({n, n}, rng);
        EXPECT_LE(grad_check([&](const T& x) { return sum(mul(causal_softmax(x), S)); }, cs), 1e-4);
        auto a = random({n}, rng);
        EXPECT_LE(grad_check([&](const T& x) { return cosine_similarity(x, u); }, a), 1e-4);
    }
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
    auto p = T::vector({1.0, -2.0, 0.5});
    p.set_requires_grad(true);
    Adam<double> opt({p}, {0.01, 0.9, 0.98, 1e-9});
    opt.zero_grad();
    backward(sum(mul(p, T::vector({3.0, -0.5, 1e-3}))));
    opt.step();
    EXPECT_NEAR(p.at(0), 1.0 - 0.01, 1e-8);
    EXPECT_NEAR(p.at(1), -2.0 + 0.01, 1e-8);
    EXPECT_NEAR(p.at(2), 0.5 - 0.01 * 1e-3 / (1e-3 + 1e-9), 1e-12);
}

TEST(Adam, ZeroGradientFreshStateIsNoOp) {
    auto p = T::vector({1.0, 2.0});
    p.set_requires_grad(true);
    Adam<double> opt({p});
    opt.zero_grad();
    opt.step();
    expect_values(p, {1.0, 2.0}, 0.0);
}

TEST(Adam, FrozenParameterUnchanged) {
    auto a = T::vector({1.0}), b = T::vector({1.0});
    a.set_requires_grad(true);
    Adam<double> opt({a, b});
    opt.zero_grad();
    backward(sum(mul(a, b)));
    opt.step();
    EXPECT_NE(a.at(0), 1.0);
    EXPECT_EQ(b.at(0), 1.0);
}

TEST(Adam, MissingGradientIsContractError) {
    auto a = T::vector({1.0});
    a.set_requires_grad(true);
    Adam<double> opt({a});
    EXPECT_THROW(opt.step(), ContractError);
}

TEST(Adam, ZeroLearningRateIsExactNoOp) {
    std::mt19937_64 rng(2);
    auto p = random({4, 4}, rng);
    p.set_requires_grad(true);
    auto before = p.to_vector();
    Adam<double> opt({p}, {0.0, 0.9, 0.98, 1e-9});
    for (int i = 0; i < 3; ++i) {
        opt.zero_grad();
        backward(sum(tanh(p)));
        opt.step();
    }
    EXPECT_EQ(p.to_vector(), before);
}

TEST(Tensor, ShapeInvariants) {
    EXPECT_THROW(T({2, 2}, {1, 2, 3}), DimensionError);
    EXPECT_THROW(T({0}, {}), DimensionError);
    auto t = T::zeros({2, 3}, true);
    t.zero_grad();
    EXPECT_EQ(t.grad().size(), t.numel());
}
