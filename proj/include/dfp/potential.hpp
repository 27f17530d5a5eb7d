#pragma once

// Deep frame potential, coherence, and the analytic gradient of the
// potential with respect to the learned parameters.

#include <algorithm>
#include <cmath>

#include "gram.hpp"

namespace dfp {

struct PotentialReport {
    double frame_potential = 0.0;
    double coherence = 0.0;
    double one_sided_coherence = 0.0;
    double grad_norm = 0.0;
    Index n_offdiag = 0;
    Index atom_count = 0;
};

inline json to_json(const PotentialReport& r) {
    return json{{"frame_potential", r.frame_potential}, {"coherence", r.coherence},
                {"one_sided_coherence", r.one_sided_coherence}, {"grad_norm", r.grad_norm},
                {"n_offdiag", r.n_offdiag}, {"atom_count", r.atom_count}};
}

/// Mean squared off-diagonal Gram entry over the N(G) structural slots.
/// Returns 0 when N(G) = 0.
inline double frame_potential(const GramBlocks& g) {
    if (g.n_offdiag == 0) return 0.0;
    double s = 0.0;
    for (Index a = 0; a < g.layers; ++a)
        for (Index b = a; b < g.layers; ++b) {
            const Matrix* m = g.block(a, b);
            if (!m) continue;
            if (a != b) {
                s += 2.0 * m->squaredNorm();
                continue;
            }
            // Summed entry by entry: subtracting the unit diagonal from the
            // full norm would cancel most of the digits of small potentials.
            for (Index j = 0; j < m->cols(); ++j)
                for (Index i = 0; i < m->rows(); ++i)
                    if (i != j) s += (*m)(i, j) * (*m)(i, j);
        }
    return s / static_cast<double>(g.n_offdiag);
}

inline double frame_potential(const BlockDictionary& d) { return frame_potential(gram_blocks(d)); }

/// Largest off-diagonal |G_ij|, or with `one_sided` the largest G_ij clamped at 0.
inline double mutual_coherence(const GramBlocks& g, bool one_sided = false) {
    double mu = 0.0;
    for (Index a = 0; a < g.layers; ++a)
        for (Index b = a; b < g.layers; ++b) {
            const Matrix* m = g.block(a, b);
            if (!m) continue;
            for (Index j = 0; j < m->cols(); ++j)
                for (Index i = 0; i < m->rows(); ++i) {
                    if (a == b && i == j) continue;
                    const double v = one_sided ? (*m)(i, j) : std::abs((*m)(i, j));
                    mu = std::max(mu, v);
                }
        }
    return mu;
}

inline double mutual_coherence(const BlockDictionary& d, bool one_sided = false) {
    return mutual_coherence(gram_blocks(d), one_sided);
}

struct PotentialGradient {
    double value = 0.0;
    Vector gradient;
    GramBlocks gram;
};

/// F^2 and dF^2/dtheta in flatten_params order.
///
/// With B~ = B N^-1 and s_i = sum_{j != i} G_ij^2, the column gradient is
///
///     df/db_i = (4 / (N(G) n_i)) ( (B~ G_off)_i - b~_i s_i ),
///
/// restricted to learned entries and summed over shared conv taps.
inline PotentialGradient potential_and_gradient(const BlockDictionary& d) {
    PotentialGradient out;
    out.gram = gram_blocks(d);
    const GramBlocks& g = out.gram;
    out.value = frame_potential(g);
    out.gradient = Vector::Zero(d.param_count());
    if (g.n_offdiag == 0) return out;

    const Index l = g.layers;
    // Off-diagonal view G_off(a, b) for any a, b.
    auto g_off = [&](Index a, Index b) -> std::optional<Matrix> {
        if (a <= b) {
            const Matrix* m = g.block(a, b);
            if (!m) return std::nullopt;
            Matrix r = *m;
            if (a == b) r.diagonal().setZero();
            return r;
        }
        const Matrix* m = g.block(b, a);
        if (!m) return std::nullopt;
        return Matrix(m->transpose());
    };

    std::vector<Vector> s(static_cast<std::size_t>(l));
    std::vector<Vector> inv(static_cast<std::size_t>(l));
    for (Index a = 0; a < l; ++a) {
        s[a] = Vector::Zero(g.col_norms[a].size());
        inv[a] = g.col_norms[a].cwiseInverse();
    }
    for (Index a = 0; a < l; ++a)
        for (Index b = a; b < l; ++b) {
            const Matrix* m = g.block(a, b);
            if (!m) continue;
            if (a == b) {
                Matrix off = *m;
                off.diagonal().setZero();
                s[a] += off.rowwise().squaredNorm();
            } else {
                s[a] += m->rowwise().squaredNorm();
                s[b] += m->colwise().squaredNorm().transpose();
            }
        }

    const double scale = 4.0 / static_cast<double>(g.n_offdiag);
    for (const auto& blk : d.blocks) {
        if (!blk.learned()) continue;
        const Index a = blk.col;
        // P = sum over blocks B_rc in this row of B_rc N_c^-1 G_off(c, a).
        Matrix P = Matrix::Zero(blk.rows, blk.cols);
        for (const auto& other : d.blocks) {
            if (other.row != blk.row) continue;
            auto go = g_off(other.col, a);
            if (!go) continue;
            P += detail::block_times(other, inv[other.col].asDiagonal() * (*go));
        }
        double* gout = out.gradient.data() + blk.param_offset;
        if (blk.kind == BlockKind::learned_dense) {
            const Matrix Bn = blk.weights * inv[a].asDiagonal();
            const Matrix grad = scale * (P - Bn * s[a].asDiagonal()) * inv[a].asDiagonal();
            for (Index r = 0; r < blk.rows; ++r)
                for (Index c = 0; c < blk.cols; ++c) gout[r * blk.cols + c] = grad(r, c);
        } else {
            blk.for_each_conv_entry([&](Index r, Index c, Index f) {
                const double bn = blk.filter[f] * inv[a][c];
                gout[f] += scale * (P(r, c) - bn * s[a][c]) * inv[a][c];
            });
        }
    }
    return out;
}

inline Vector potential_gradient(const BlockDictionary& d) { return potential_and_gradient(d).gradient; }

inline PotentialReport evaluate(const BlockDictionary& d) {
    const auto pg = potential_and_gradient(d);
    PotentialReport r;
    r.frame_potential = pg.value;
    r.coherence = mutual_coherence(pg.gram, false);
    r.one_sided_coherence = mutual_coherence(pg.gram, true);
    r.grad_norm = pg.gradient.norm();
    r.n_offdiag = pg.gram.n_offdiag;
    r.atom_count = pg.gram.trace;
    return r;
}

} // namespace dfp
