#include <gtest/gtest.h>

#include "support.hpp"

using namespace dfp;

namespace {

BlockDictionary with_lambda(ArchSpec s, double lambda, fixtures::Rng& rng) {
    s.lambda = lambda;
    return fixtures::random_dictionary(s, rng);
}

BlockDictionary orthonormal_shallow(Index k, double lambda, fixtures::Rng& rng) {
    std::normal_distribution<double> n;
    Matrix A(k, k);
    for (Index i = 0; i < A.size(); ++i) A.data()[i] = n(rng);
    const Matrix Q = Eigen::HouseholderQR<Matrix>(A).householderQ();
    ArchSpec s = spec_from_widths(Family::chain, {k, k});
    s.lambda = lambda;
    return load_params(build_structure(s), Eigen::Map<const Vector>(Matrix(Q.transpose()).data(), k * k));
}

} // namespace

TEST(Threshold, Examples) {
    Vector v(3);
    v << 0.5, 1.5, -2.0;
    const Vector got = nonneg_soft_threshold(v, 1.0);
    EXPECT_EQ(got, (Vector(3) << 0.0, 0.5, 0.0).finished());
    EXPECT_EQ(nonneg_soft_threshold(v, 0.0), (Vector(3) << 0.5, 1.5, 0.0).finished());
    EXPECT_THROW(nonneg_soft_threshold(v, -0.1), std::invalid_argument);
}

TEST(Threshold, IsTheProxOfTheConstrainedL1) {
    // argmin_w 1/2 (w - v)^2 + lambda w over w >= 0, checked by brute force.
    for (double v : {-1.0, 0.2, 0.7, 3.0})
        for (double lam : {0.0, 0.3, 1.0}) {
            double best = 0.0, best_val = std::numeric_limits<double>::infinity();
            for (int i = 0; i <= 40000; ++i) {
                const double w = 4.0 * i / 40000.0;
                const double val = 0.5 * (w - v) * (w - v) + lam * w;
                if (val < best_val) best_val = val, best = w;
            }
            Vector one(1);
            one << v;
            EXPECT_NEAR(nonneg_soft_threshold(one, lam)[0], best, 1e-4);
        }
}

TEST(ForwardPass, ZeroWeightsGiveZero) {
    auto s = spec_from_widths(Family::chain, {3, 4, 2});
    s.lambda = 0.0;
    const auto d = load_params(build_structure(s), Vector::Zero(param_count(s)));
    const auto w = forward_pass(d, Vector::Random(3));
    ASSERT_EQ(w.size(), 2u);
    EXPECT_EQ(w[0], Vector::Zero(4));
    EXPECT_EQ(w[1], Vector::Zero(2));
}

TEST(ForwardPass, ChainMatchesLayeredRelu) {
    fixtures::Rng rng(71);
    for (int t = 0; t < 20; ++t) {
        auto s = fixtures::random_spec(Family::chain, rng);
        s.lambda = 0.1;
        const auto d = fixtures::random_dictionary(s, rng);
        const Vector x = Vector::Random(s.input.units);
        const auto w = forward_pass(d, x);
        Vector cur = x;
        for (Index j = 0; j < d.depth(); ++j) {
            cur = (d.at(j, j)->weights.transpose() * cur).array().operator-(0.1).max(0.0).matrix();
            EXPECT_LE((w[static_cast<std::size_t>(j)] - cur).cwiseAbs().maxCoeff(), 1e-14);
        }
    }
}

TEST(ForwardPass, ResidualPassesSkipThrough) {
    // Zeroing the block into layer 3 leaves relu(w_1) there.
    auto s = expand_family(Family::residual, 3, 4, 3);
    s.lambda = 0.0;
    fixtures::Rng rng(72);
    auto d = fixtures::random_dictionary(s, rng);
    for (auto& b : d.blocks)
        if (b.row == 2 && b.col == 2) b.weights.setZero();
    const auto w = forward_pass(d, Vector::Random(3));
    EXPECT_LE((w[2] - w[0].cwiseMax(0.0)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ForwardPass, DenseSumsAllSources) {
    auto s = spec_from_widths(Family::dense, {2, 3, 2});
    s.lambda = 0.0;
    fixtures::Rng rng(73);
    const auto d = fixtures::random_dictionary(s, rng);
    const Vector x = Vector::Random(2);
    const auto w = forward_pass(d, x);
    const Vector w1 = (d.at(0, 0)->weights.transpose() * x).cwiseMax(0.0);
    const Vector w2 = (d.at(0, 1)->weights.transpose() * x + d.at(1, 1)->weights.transpose() * w1).cwiseMax(0.0);
    EXPECT_LE((w[0] - w1).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LE((w[1] - w2).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_THROW(forward_pass(d, Vector::Zero(5)), std::invalid_argument);
}

TEST(ForwardPass, ConvMatchesMaterializedTranspose) {
    fixtures::Rng rng(74);
    auto s = fixtures::conv1d_single();
    s.lambda = 0.05;
    const auto d = fixtures::random_dictionary(s, rng);
    const Vector x = Vector::Random(16);
    const Vector want = (materialize(d).transpose() * x).array().operator-(0.05).max(0.0).matrix();
    EXPECT_LE((forward_pass(d, x)[0] - want).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Solver, OrthonormalClosedForm) {
    fixtures::Rng rng(75);
    for (int t = 0; t < 10; ++t) {
        const auto d = orthonormal_shallow(5, 0.2, rng);
        const Vector x = Vector::Random(5);
        auto p = make_problem(d, x);
        SolveOptions o;
        o.warm_start = t % 2 == 0;
        const auto r = solve_dca(p, o);
        const Vector want = nonneg_soft_threshold(materialize(d).transpose() * x, 0.2);
        EXPECT_LE((r.w - want).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LE((forward_pass(d, x)[0] - want).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Solver, MonotoneAndNoWorseThanForward) {
    fixtures::Rng rng(76);
    for (auto f : {Family::chain, Family::residual, Family::dense})
        for (int t = 0; t < 10; ++t) {
            const auto d = with_lambda(fixtures::random_spec(f, rng, 3, 6), 0.05, rng);
            auto p = make_problem(d, Vector::Random(d.row_dims.front()));
            const double forward = objective(p, stack(forward_pass(d, p.x)));
            SolveOptions o;
            o.max_iters = 2000;
            o.accelerate = t % 2 == 1;
            const auto r = solve_dca(p, o);
            for (std::size_t i = 1; i < r.history.size(); ++i) EXPECT_LE(r.history[i], r.history[i - 1]);
            EXPECT_LE(r.objective, forward);
            EXPECT_NEAR(r.objective, objective(p, r.w), 1e-12);
            EXPECT_TRUE((r.w.array() >= 0.0).all());
        }
}

TEST(Solver, ColdAndWarmStartsAgree) {
    // The problem is convex, so both starts approach one optimal value.
    fixtures::Rng rng(77);
    const auto d = with_lambda(spec_from_widths(Family::chain, {3, 4, 3}), 0.1, rng);
    auto p = make_problem(d, Vector::Random(3));
    SolveOptions o;
    o.max_iters = 200000;
    o.tol = 1e-15;
    o.accelerate = true;
    const double warm = solve_dca(p, o).objective;
    o.warm_start = false;
    const double cold = solve_dca(p, o).objective;
    EXPECT_NEAR(warm, cold, 1e-8);
}

TEST(Solver, LargeLambdaGivesZero) {
    fixtures::Rng rng(78);
    const auto d = with_lambda(spec_from_widths(Family::chain, {3, 4, 3}), 1e6, rng);
    auto p = make_problem(d, Vector::Random(3));
    const auto r = solve_dca(p);
    EXPECT_EQ(r.w, Vector::Zero(7));
    EXPECT_NEAR(r.objective, 0.5 * p.x.squaredNorm(), 1e-15);
}

TEST(Solver, ObjectiveRejectsNegativeCodes) {
    fixtures::Rng rng(79);
    const auto d = with_lambda(spec_from_widths(Family::chain, {2, 3}), 0.1, rng);
    const auto p = make_problem(d, Vector::Ones(2));
    EXPECT_TRUE(std::isinf(objective(p, -Vector::Ones(3))));
}

TEST(Solver, SpectralNormMatchesEigen) {
    fixtures::Rng rng(80);
    for (int t = 0; t < 10; ++t) {
        const Matrix B = materialize(fixtures::random_dictionary(fixtures::random_spec(Family::dense, rng), rng));
        const double want = Eigen::JacobiSVD<Matrix>(B).singularValues()[0];
        EXPECT_NEAR(squared_spectral_norm(B, 1e-13), want * want, 1e-8 * want * want);
    }
}

TEST(Thresholds, Examples) {
    EXPECT_DOUBLE_EQ(uniqueness_threshold(0.5), 1.5);
    EXPECT_DOUBLE_EQ(uniqueness_threshold(0.2), 3.0);
    EXPECT_DOUBLE_EQ(uniqueness_threshold(1.0), 1.0);
    EXPECT_TRUE(std::isinf(uniqueness_threshold(0.0)));
    EXPECT_DOUBLE_EQ(stability_cap(0.5), 0.75);
    EXPECT_DOUBLE_EQ(stability_cap(0.2), 1.5);
    EXPECT_NEAR(robustness_denominator(0.2, 1), 0.4, 1e-15);
    EXPECT_NEAR(robustness_denominator(0.1, 2), 0.3, 1e-15);
    EXPECT_NEAR(robustness_denominator(0.5, 1), -0.5, 1e-15);
    EXPECT_THROW(uniqueness_threshold(1.5), std::invalid_argument);
    EXPECT_THROW(stability_cap(-0.1), std::invalid_argument);
    EXPECT_THROW(robustness_denominator(0.1, 0), std::invalid_argument);
}

TEST(Thresholds, MonotoneInCoherence) {
    for (int i = 1; i < 20; ++i) {
        const double mu = 0.05 * i, next = 0.05 * (i + 1);
        EXPECT_GT(uniqueness_threshold(mu), uniqueness_threshold(next));
        EXPECT_GT(stability_cap(mu), stability_cap(next));
        EXPECT_GT(robustness_denominator(mu, 2), robustness_denominator(next, 2));
    }
}

TEST(Recovery, IncoherentSupportsAreRecovered) {
    // Random 40x80 dictionaries, 2-sparse nonnegative codes well inside the
    // coherence regime: the solver's support should match almost always.
    fixtures::Rng rng(81);
    std::normal_distribution<double> n;
    int trials = 0, hits = 0;
    for (int t = 0; t < 60; ++t) {
        Matrix W(40, 80);
        for (Index i = 0; i < W.size(); ++i) W.data()[i] = n(rng);
        W.colwise().normalize();
        ArchSpec s = spec_from_widths(Family::chain, {40, 80});
        s.lambda = 0.02;
        const Matrix Wt = W.transpose();
        const auto d = load_params(build_structure(s), Eigen::Map<const Vector>(Wt.data(), Wt.size()));
        Vector code = Vector::Zero(80);
        const Index a = fixtures::uniform_int(rng, 0, 79);
        Index b = fixtures::uniform_int(rng, 0, 78);
        if (b >= a) ++b;
        code[a] = 1.0 + std::abs(n(rng));
        code[b] = 1.0 + std::abs(n(rng));
        auto p = make_problem(d, W * code);
        SolveOptions o;
        o.accelerate = true;
        o.max_iters = 20000;
        const auto r = solve_dca(p, o);
        std::vector<Index> support;
        for (Index i = 0; i < 80; ++i)
            if (r.w[i] > 0.1) support.push_back(i);
        ++trials;
        if (support == std::vector<Index>{std::min(a, b), std::max(a, b)}) ++hits;
    }
    EXPECT_GE(static_cast<double>(hits) / trials, 0.95);
}

TEST(Recovery, ErrorStaysWithinNoisePlusShrinkage) {
    // Orthonormal dictionary, code well above lambda: the coefficients move by
    // at most the noise plus lambda on each support entry.
    fixtures::Rng rng(82);
    const double lambda = 0.01;
    const auto d = orthonormal_shallow(6, lambda, rng);
    const Matrix B = materialize(d);
    Vector code = Vector::Zero(6);
    code[1] = 2.0;
    code[4] = 3.0;
    const Vector dir = Vector::Random(6).normalized();
    auto clean = make_problem(d, B * code);
    EXPECT_NEAR((solve_dca(clean).w - code).norm(), lambda * std::sqrt(2.0), 1e-10);
    for (double eps : {1e-3, 2e-3, 4e-3, 8e-3}) {
        auto p = make_problem(d, B * code + eps * dir);
        EXPECT_LE((solve_dca(p).w - code).norm(), eps + lambda * std::sqrt(2.0) + 1e-12);
    }
}
