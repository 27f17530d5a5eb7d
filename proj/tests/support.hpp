#pragma once

// Shared test helpers: seeded random spec generators and reference
// computations that do not go through the library's blockwise code paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "dfp/dfp.hpp"

namespace dfp::fixtures {

using Rng = std::mt19937_64;

inline Index uniform_int(Rng& rng, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }

/// Random widths k_0..k_l with every width in [lo, hi] and the total atom
/// plus row count kept under `budget`.
inline std::vector<Index> random_widths(Rng& rng, Index max_depth, Index lo, Index hi, Index budget = 200) {
    for (;;) {
        const Index depth = uniform_int(rng, 1, max_depth);
        std::vector<Index> w;
        for (Index j = 0; j <= depth; ++j) w.push_back(uniform_int(rng, lo, hi));
        Index rows = 0, cols = 0;
        for (Index j = 0; j < depth; ++j) rows += w[j];
        for (Index j = 1; j <= depth; ++j) cols += w[j];
        if (rows + cols <= budget) return w;
    }
}

/// Random spec of the given family. Residual specs use equal hidden widths
/// so identity edges are well formed.
inline ArchSpec random_spec(Family family, Rng& rng, Index max_depth = 4, Index hi = 8) {
    if (family == Family::residual) {
        const Index depth = uniform_int(rng, 3, std::max<Index>(3, max_depth));
        const Index width = uniform_int(rng, 1, hi);
        return expand_family(Family::residual, depth, width, uniform_int(rng, 1, hi));
    }
    return spec_from_widths(family, random_widths(rng, max_depth, 1, hi));
}

/// The convolution geometry of the two-in, five-out, width-three example, in 1D.
inline ArchSpec conv1d_single(Index extent = 8) {
    ArchSpec s;
    s.family = Family::custom;
    s.input = LayerGeom::conv_input({extent}, 2);
    s.layers.push_back(LayerGeom::conv_layer({extent}, 2, 5, {3}));
    s.edges = {{0, 1, EdgeKind::learned}};
    validate(s);
    return s;
}

/// Two strided conv layers plus a dense read-out, 1D.
inline ArchSpec conv1d_chain() {
    ArchSpec s;
    s.input = LayerGeom::conv_input({8}, 2);
    s.layers.push_back(LayerGeom::conv_layer({8}, 2, 5, {3}));
    s.layers.push_back(LayerGeom::conv_layer({8}, 5, 3, {3}, {2}));
    s.layers.push_back(LayerGeom::dense_layer(6));
    s.edges = chain_edges(3);
    validate(s);
    return s;
}

/// 2D conv layers with a learned skip.
inline ArchSpec conv2d_skip() {
    ArchSpec s;
    s.family = Family::custom;
    s.input = LayerGeom::conv_input({4, 4}, 2);
    s.layers.push_back(LayerGeom::conv_layer({4, 4}, 2, 5, {3, 3}));
    s.layers.push_back(LayerGeom::conv_layer({4, 4}, 5, 5, {3, 1}));
    s.layers.push_back(LayerGeom::conv_layer({4, 4}, 5, 3, {3, 3}, {2, 2}));
    s.edges = {{0, 1, EdgeKind::learned}, {1, 2, EdgeKind::learned}, {1, 3, EdgeKind::learned},
               {2, 3, EdgeKind::learned}};
    validate(s);
    return s;
}

/// 2D conv chain with an identity skip between equal-shaped layers.
inline ArchSpec conv2d_residual() {
    ArchSpec s;
    s.family = Family::custom;
    s.input = LayerGeom::conv_input({4, 4}, 2);
    s.layers.push_back(LayerGeom::conv_layer({4, 4}, 2, 5, {3, 3}));
    s.layers.push_back(LayerGeom::conv_layer({4, 4}, 5, 5, {3, 3}));
    s.layers.push_back(LayerGeom::conv_layer({4, 4}, 5, 5, {1, 3}));
    s.edges = {{0, 1, EdgeKind::learned}, {1, 2, EdgeKind::learned}, {2, 3, EdgeKind::learned},
               {1, 3, EdgeKind::identity}};
    validate(s);
    return s;
}

inline std::vector<ArchSpec> conv_specs() {
    return {conv1d_single(), conv1d_single(5), conv1d_chain(), conv2d_skip(), conv2d_residual()};
}

inline BlockDictionary random_dictionary(const ArchSpec& spec, Rng& rng) {
    return build_dictionary(spec, {}, rng());
}

/// Normalized Gram of an explicit matrix, column by column.
inline Matrix normalized_gram(const Matrix& B) {
    Matrix G(B.cols(), B.cols());
    for (Index i = 0; i < B.cols(); ++i)
        for (Index j = 0; j < B.cols(); ++j) G(i, j) = B.col(i).dot(B.col(j)) / (B.col(i).norm() * B.col(j).norm());
    return G;
}

/// Frame potential from an explicit Gram and a given N(G).
inline double potential_from_gram(const Matrix& G, Index n_offdiag) {
    if (n_offdiag == 0) return 0.0;
    double s = 0.0;
    for (Index i = 0; i < G.rows(); ++i)
        for (Index j = 0; j < G.cols(); ++j)
            if (i != j) s += G(i, j) * G(i, j);
    return s / static_cast<double>(n_offdiag);
}

/// Central differences of the potential in every learned coordinate.
inline Vector fd_gradient(const BlockDictionary& d, double h = 1e-5) {
    const Vector theta = flatten_params(d);
    const BlockDictionary base = build_structure(d.spec);
    Vector g(theta.size());
    for (Index i = 0; i < theta.size(); ++i) {
        Vector p = theta, m = theta;
        p[i] += h;
        m[i] -= h;
        const double fp = potential_from_gram(normalized_gram(materialize(load_params(base, p))), d.structural_offdiag);
        const double fm = potential_from_gram(normalized_gram(materialize(load_params(base, m))), d.structural_offdiag);
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// Chain bound at per-unit magnitudes, written directly from the block
/// traces and cross-block norms.
inline double chain_bound_direct(const std::vector<Index>& k, const std::vector<std::vector<double>>& c) {
    const std::size_t l = k.size() - 1;
    double num = 0.0, total = 0.0;
    for (std::size_t j = 1; j <= l; ++j) {
        // Unbounded magnitudes enter through their limits: the column is all
        // weight, with no share left for the -I part and no cross term.
        double tr = 0.0;
        if (j == l) tr += static_cast<double>(k[j]);
        else
            for (double v : c[j - 1]) tr += std::isinf(v) ? 1.0 : v * v / (v * v + 1.0);
        if (j > 1)
            for (double v : c[j - 2]) tr += std::isinf(v) ? 0.0 : 1.0 / (v * v + 1.0);
        num += tr * tr / static_cast<double>(k[j - 1]);
        if (j < l)
            for (double v : c[j - 1]) num += std::isinf(v) ? 0.0 : 2.0 * std::pow(v / (v * v + 1.0), 2);
        total += static_cast<double>(k[j]);
    }
    Index n = 0;
    for (std::size_t j = 1; j <= l; ++j) {
        n += k[j] * (k[j] - 1);
        if (j < l) n += 2 * k[j] * k[j + 1];
    }
    return std::max(0.0, (num - total) / static_cast<double>(n));
}

/// Brute-force minimum of chain_bound_direct over per-unit log magnitudes in
/// [ln 1e-8, ln 1e8]: a full grid, then repeated zooming around the best few
/// grid points. Only practical for a handful of hidden units.
inline double chain_bound_grid(const std::vector<Index>& k, int points = 41, int rounds = 40, int seeds = 6) {
    const double L = std::log(1e8);
    std::vector<std::size_t> layer_of;
    for (std::size_t j = 1; j + 1 < k.size(); ++j)
        for (Index n = 0; n < k[j]; ++n) layer_of.push_back(j);
    const std::size_t dims = layer_of.size();
    auto eval = [&](const std::vector<double>& x) {
        std::vector<std::vector<double>> c(k.size() >= 2 ? k.size() - 2 : 0);
        for (std::size_t i = 0; i < dims; ++i) c[layer_of[i] - 1].push_back(std::exp(x[i]));
        return chain_bound_direct(k, c);
    };
    if (dims == 0) return eval({});

    // Enumerate a grid over [lo, hi]^dims and return the best `keep` points.
    auto scan = [&](const std::vector<double>& lo, const std::vector<double>& hi, std::size_t keep, int points) {
        std::vector<std::pair<double, std::vector<double>>> best;
        std::vector<int> idx(dims, 0);
        std::vector<double> x(dims);
        for (;;) {
            for (std::size_t i = 0; i < dims; ++i) x[i] = lo[i] + (hi[i] - lo[i]) * idx[i] / (points - 1);
            const double v = eval(x);
            if (best.size() < keep || v < best.back().first) {
                best.emplace_back(v, x);
                std::sort(best.begin(), best.end(), [](auto& a, auto& b) { return a.first < b.first; });
                if (best.size() > keep) best.pop_back();
            }
            std::size_t d = 0;
            while (d < dims && ++idx[d] == points) idx[d++] = 0;
            if (d == dims) break;
        }
        return best;
    };
    const auto starts = scan(std::vector<double>(dims, -L), std::vector<double>(dims, L), seeds, points);
    double result = std::numeric_limits<double>::infinity();
    for (const auto& [v0, x0] : starts) {
        std::vector<double> centre = x0;
        double half = 2.0 * L / (points - 1);
        double v = v0;
        for (int r = 0; r < rounds; ++r) {
            std::vector<double> lo(dims), hi(dims);
            for (std::size_t i = 0; i < dims; ++i) {
                lo[i] = std::max(-L, centre[i] - half);
                hi[i] = std::min(L, centre[i] + half);
            }
            const auto b = scan(lo, hi, 1, 9);
            if (b.front().first <= v) {
                v = b.front().first;
                centre = b.front().second;
            }
            half *= 0.5;
        }
        result = std::min(result, v);
    }
    return result;
}

/// Three unit vectors in the plane at 120 degrees.
inline Matrix planar_etf() {
    Matrix B(2, 3);
    for (int i = 0; i < 3; ++i) {
        const double a = 2.0 * std::acos(-1.0) * i / 3.0;
        B(0, i) = std::cos(a);
        B(1, i) = std::sin(a);
    }
    return B;
}

/// Single dense layer spec whose only block is `W`.
inline BlockDictionary shallow_dictionary(const Matrix& W) {
    const auto spec = spec_from_widths(Family::chain, {W.rows(), W.cols()});
    BlockDictionary d = build_structure(spec);
    Vector v(W.size());
    for (Index r = 0; r < W.rows(); ++r)
        for (Index c = 0; c < W.cols(); ++c) v[r * W.cols() + c] = W(r, c);
    return load_params(d, v);
}

} // namespace dfp::fixtures
