#include <gtest/gtest.h>

#include "support.hpp"

using namespace dfp;

TEST(FramePotential, OrthonormalSquareIsZero) {
    const Matrix Q = Eigen::HouseholderQR<Matrix>(Matrix::Random(4, 4)).householderQ();
    const auto d = fixtures::shallow_dictionary(Q);
    EXPECT_NEAR(frame_potential(d), 0.0, 1e-28);
    EXPECT_NEAR(mutual_coherence(d), 0.0, 1e-14);
}

TEST(FramePotential, ZeroWhenNoOffdiagonalSlots) {
    const auto d = fixtures::shallow_dictionary(Matrix::Constant(3, 1, 2.0));
    EXPECT_EQ(d.structural_offdiag, 0);
    EXPECT_EQ(frame_potential(d), 0.0);
}

TEST(FramePotential, ChainUnitExample) {
    auto d = load_params(build_structure(spec_from_widths(Family::chain, {1, 1, 1})), Vector::Ones(2));
    EXPECT_NEAR(frame_potential(d), 0.5, 1e-15);
    EXPECT_NEAR(mutual_coherence(d), 1.0 / std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(mutual_coherence(d, true), 0.0, 1e-15); // the only coupling is negative
}

TEST(FramePotential, PlanarEtf) {
    const auto d = fixtures::shallow_dictionary(fixtures::planar_etf());
    EXPECT_NEAR(frame_potential(d), 0.25, 1e-15);
    EXPECT_NEAR(mutual_coherence(d), 0.5, 1e-15);
    EXPECT_NEAR(std::sqrt(frame_potential(d)), mutual_coherence(d), 1e-15);
}

TEST(Coherence, TwoAxesAndDiagonal) {
    Matrix B(2, 3);
    B << 1, 0, 1 / std::sqrt(2.0), 0, 1, 1 / std::sqrt(2.0);
    const auto d = fixtures::shallow_dictionary(B);
    EXPECT_NEAR(mutual_coherence(d), 0.70710678118654752, 1e-15);
    EXPECT_NEAR(mutual_coherence(d, true), 0.70710678118654752, 1e-15);
}

TEST(Coherence, OneSidedIgnoresNegatives) {
    Matrix B(2, 2);
    B << 1, -1, 0, 0.1;
    const auto d = fixtures::shallow_dictionary(B);
    EXPECT_GT(mutual_coherence(d), 0.9);
    EXPECT_EQ(mutual_coherence(d, true), 0.0);
}

TEST(FramePotential, MatchesOracleAndShallowFormula) {
    fixtures::Rng rng(31);
    std::vector<ArchSpec> specs = fixtures::conv_specs();
    for (auto f : {Family::chain, Family::residual, Family::dense})
        for (int t = 0; t < 20; ++t) specs.push_back(fixtures::random_spec(f, rng));
    for (const auto& s : specs) {
        const auto d = fixtures::random_dictionary(s, rng);
        const double oracle = fixtures::potential_from_gram(gram_oracle(d), count_offdiag(s));
        EXPECT_NEAR(frame_potential(d), oracle, 1e-10);
        const double mu = mutual_coherence(d);
        EXPECT_GE(mu, 0.0);
        EXPECT_LE(mu, 1.0 + 1e-15);
        EXPECT_LE(frame_potential(d), mu * mu + 1e-15);
    }
    for (int t = 0; t < 20; ++t) {
        const Index rows = fixtures::uniform_int(rng, 1, 6);
        const Index k = fixtures::uniform_int(rng, 2, 9);
        const Matrix W = Matrix::Random(rows, k);
        const Matrix G = fixtures::normalized_gram(W);
        const double classical = (G.squaredNorm() - static_cast<double>(k)) / static_cast<double>(k * (k - 1));
        EXPECT_NEAR(frame_potential(fixtures::shallow_dictionary(W)), classical, 1e-14);
    }
}

TEST(Gradient, MatchesFiniteDifferences) {
    fixtures::Rng rng(41);
    std::vector<ArchSpec> specs;
    for (auto f : {Family::chain, Family::residual, Family::dense})
        for (int t = 0; t < 20; ++t) specs.push_back(fixtures::random_spec(f, rng, 3, 5));
    for (const auto& s : fixtures::conv_specs()) specs.push_back(s);
    for (const auto& s : specs) {
        const auto d = fixtures::random_dictionary(s, rng);
        const Vector g = potential_gradient(d);
        const Vector fd = fixtures::fd_gradient(d);
        ASSERT_EQ(g.size(), fd.size());
        const double scale = std::max(fd.cwiseAbs().maxCoeff(), 1e-8);
        for (Index i = 0; i < g.size(); ++i)
            EXPECT_LE(std::abs(g[i] - fd[i]), 1e-5 * std::max(std::abs(fd[i]), scale))
                << to_string(s.family) << " coordinate " << i;
    }
}

TEST(Gradient, ShallowRadialDirectionIsFlat) {
    fixtures::Rng rng(43);
    for (int t = 0; t < 10; ++t) {
        const Matrix W = Matrix::Random(3, 5);
        const auto d = fixtures::shallow_dictionary(W);
        const Vector g = potential_gradient(d);
        for (Index c = 0; c < 5; ++c) {
            double dir = 0.0;
            for (Index r = 0; r < 3; ++r) dir += g[r * 5 + c] * W(r, c);
            EXPECT_NEAR(dir, 0.0, 1e-14);
        }
    }
}

TEST(Gradient, NoSlotsForFixedBlocks) {
    const auto s = expand_family(Family::residual, 4, 3, 2);
    const auto d = build_dictionary(s, {}, 2);
    EXPECT_EQ(potential_gradient(d).size(), param_count(s));
}

TEST(Report, FieldsAndJson) {
    const auto d = fixtures::shallow_dictionary(fixtures::planar_etf());
    const auto r = evaluate(d);
    EXPECT_NEAR(r.frame_potential, 0.25, 1e-15);
    EXPECT_NEAR(r.coherence, 0.5, 1e-15);
    EXPECT_EQ(r.n_offdiag, 6);
    EXPECT_EQ(r.atom_count, 3);
    EXPECT_LE(r.grad_norm, 1e-12);
    const json j = to_json(r);
    for (const char* key : {"frame_potential", "coherence", "one_sided_coherence", "grad_norm", "n_offdiag", "atom_count"})
        EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(j.size(), 6u);
}

TEST(Report, GradientVanishesAtMinimizedEtf) {
    MinimizeConfig cfg;
    cfg.restarts = 1;
    const auto res = minimize_potential(spec_from_widths(Family::chain, {2, 3}), cfg);
    EXPECT_NEAR(res.best_potential, 0.25, 1e-10);
    EXPECT_LE(res.report.grad_norm, 1e-8);
}

TEST(FramePotential, SinglePairEqualsSquaredCoherence) {
    // One off-diagonal pair: F^2 and mu^2 coincide, so rounding must not push
    // the potential above the coherence.
    fixtures::Rng rng(44);
    std::normal_distribution<double> n;
    for (int t = 0; t < 2000; ++t) {
        Matrix W(2 + t % 4, 2);
        for (Index i = 0; i < W.size(); ++i) W.data()[i] = n(rng);
        const auto d = fixtures::shallow_dictionary(W);
        const double mu = mutual_coherence(d);
        EXPECT_LE(frame_potential(d), mu * mu);
        EXPECT_DOUBLE_EQ(frame_potential(d), mu * mu);
    }
}
