#pragma once

// Normalized Gram matrix of a block dictionary, computed block by block:
//
//     G_ab = N_a^-1 ( sum_r B_ra^T B_rb ) N_b^-1
//
// over the row blocks r in which both column blocks have structure. Only
// a <= b is stored.

#include <cmath>
#include <optional>
#include <vector>

#include "dictionary.hpp"

namespace dfp {

struct GramBlocks {
    Index layers = 0;
    std::vector<std::optional<Matrix>> grid; // layers x layers, upper triangle used
    std::vector<Vector> col_norms;
    Index n_offdiag = 0;
    Index trace = 0;

    /// Block (a, b) for a <= b, or nullptr when structurally zero.
    const Matrix* block(Index a, Index b) const {
        const auto& m = grid[static_cast<std::size_t>(a * layers + b)];
        return m ? &*m : nullptr;
    }
};

/// Per-layer global column norms N_j; identity blocks contribute 1 per column.
inline std::vector<Vector> column_norms(const BlockDictionary& d) {
    std::vector<Vector> sq;
    for (auto k : d.col_dims) sq.push_back(Vector::Zero(k));
    for (const auto& b : d.blocks) sq[b.col] += b.col_sq_norms();
    for (std::size_t a = 0; a < sq.size(); ++a)
        for (Index n = 0; n < sq[a].size(); ++n)
            if (!(sq[a][n] > 0.0) || !std::isfinite(sq[a][n]))
                throw ZeroColumnError(static_cast<Index>(a) + 1, n);
    for (auto& v : sq) v = v.array().sqrt().matrix();
    return sq;
}

namespace detail {

/// A^T B for two conv blocks over the same row space, from per-channel-pair
/// filter cross-correlations. The inner product of atoms at output positions
/// qa and qb depends only on (qa*sa - qb*sb) mod extent.
inline Matrix conv_tproduct(const Block& A, const Block& B) {
    const ConvShape& ca = A.conv;
    const ConvShape& cb = B.conv;
    const auto n = ca.extent;
    const auto oa = ca.out_extent();
    const auto ob = cb.out_extent();
    const std::array<Index, 2> ha{(ca.kernel[0] - 1) / 2, (ca.kernel[1] - 1) / 2};
    const std::array<Index, 2> hb{(cb.kernel[0] - 1) / 2, (cb.kernel[1] - 1) / 2};

    Matrix out = Matrix::Zero(A.cols, B.cols);
    std::vector<double> corr(static_cast<std::size_t>(n[0] * n[1]));
    for (Index ia = 0; ia < ca.out_channels; ++ia)
        for (Index ib = 0; ib < cb.out_channels; ++ib) {
            std::fill(corr.begin(), corr.end(), 0.0);
            for (Index ci = 0; ci < ca.in_channels; ++ci)
                for (Index ay = 0; ay < ca.kernel[0]; ++ay)
                    for (Index ax = 0; ax < ca.kernel[1]; ++ax) {
                        const double fa = A.filter[ca.filter_index(ia, ci, ay, ax)];
                        if (fa == 0.0) continue;
                        for (Index by = 0; by < cb.kernel[0]; ++by)
                            for (Index bx = 0; bx < cb.kernel[1]; ++bx) {
                                const Index dy = ConvShape::wrap((hb[0] - by) - (ha[0] - ay), n[0]);
                                const Index dx = ConvShape::wrap((hb[1] - bx) - (ha[1] - ax), n[1]);
                                corr[dy * n[1] + dx] += fa * B.filter[cb.filter_index(ib, ci, by, bx)];
                            }
                    }
            for (Index py = 0; py < oa[0]; ++py)
                for (Index px = 0; px < oa[1]; ++px)
                    for (Index qy = 0; qy < ob[0]; ++qy)
                        for (Index qx = 0; qx < ob[1]; ++qx) {
                            const Index dy = ConvShape::wrap(py * ca.stride[0] - qy * cb.stride[0], n[0]);
                            const Index dx = ConvShape::wrap(px * ca.stride[1] - qx * cb.stride[1], n[1]);
                            out(ca.col_of(ia, py, px), cb.col_of(ib, qy, qx)) = corr[dy * n[1] + dx];
                        }
        }
    return out;
}

/// B * X for any block kind.
inline Matrix block_times(const Block& B, const Matrix& X) {
    switch (B.kind) {
    case BlockKind::learned_dense: return B.weights * X;
    case BlockKind::learned_conv: return Matrix(B.sparse() * X);
    case BlockKind::identity: return X;
    case BlockKind::neg_identity: return -X;
    case BlockKind::zero: return Matrix::Zero(B.rows, X.cols());
    }
    return Matrix::Zero(B.rows, X.cols());
}

} // namespace detail

/// A^T B for two blocks sharing a row block.
inline Matrix block_tproduct(const Block& A, const Block& B) {
    if (A.fixed_identity()) return A.identity_sign() * B.dense();
    if (B.fixed_identity()) return B.identity_sign() * A.dense().transpose();
    const bool a_conv = A.kind == BlockKind::learned_conv;
    const bool b_conv = B.kind == BlockKind::learned_conv;
    if (a_conv && b_conv) return detail::conv_tproduct(A, B);
    if (a_conv) return Matrix(A.sparse().transpose() * B.weights);
    if (b_conv) return Matrix(A.weights.transpose() * B.sparse());
    return A.weights.transpose() * B.weights;
}

inline GramBlocks gram_blocks(const BlockDictionary& d) {
    GramBlocks g;
    g.layers = d.depth();
    g.grid.resize(static_cast<std::size_t>(g.layers * g.layers));
    g.col_norms = column_norms(d);
    g.n_offdiag = d.structural_offdiag;
    g.trace = d.total_cols();

    std::vector<Vector> inv;
    for (const auto& n : g.col_norms) inv.push_back(n.cwiseInverse());

    // blocks are sorted by (row, col), so each row's members are contiguous
    // and pairs within a row come out with a <= b in a fixed order.
    std::size_t i = 0;
    while (i < d.blocks.size()) {
        std::size_t end = i;
        while (end < d.blocks.size() && d.blocks[end].row == d.blocks[i].row) ++end;
        for (std::size_t p = i; p < end; ++p)
            for (std::size_t q = p; q < end; ++q) {
                const Block& A = d.blocks[p];
                const Block& B = d.blocks[q];
                auto& slot = g.grid[static_cast<std::size_t>(A.col * g.layers + B.col)];
                Matrix m = block_tproduct(A, B);
                if (slot) *slot += m;
                else slot = std::move(m);
            }
        i = end;
    }
    for (Index a = 0; a < g.layers; ++a)
        for (Index b = a; b < g.layers; ++b) {
            auto& slot = g.grid[static_cast<std::size_t>(a * g.layers + b)];
            if (!slot) continue;
            *slot = inv[a].asDiagonal() * (*slot) * inv[b].asDiagonal();
            if (a == b) slot->diagonal().setOnes();
        }
    return g;
}

/// Full symmetric Gram matrix assembled from its blocks.
inline Matrix to_dense(const GramBlocks& g) {
    std::vector<Index> off{0};
    for (const auto& n : g.col_norms) off.push_back(off.back() + n.size());
    Matrix out = Matrix::Zero(off.back(), off.back());
    for (Index a = 0; a < g.layers; ++a)
        for (Index b = a; b < g.layers; ++b) {
            const Matrix* m = g.block(a, b);
            if (!m) continue;
            out.block(off[a], off[b], m->rows(), m->cols()) = *m;
            if (a != b) out.block(off[b], off[a], m->cols(), m->rows()) = m->transpose();
        }
    return out;
}

/// Dense reference: normalize the materialized dictionary and form B~^T B~.
inline Matrix gram_oracle(const BlockDictionary& d, Index cap = default_materialize_cap) {
    const Matrix B = materialize(d, cap);
    const auto co = d.col_offsets();
    Vector norms = B.colwise().norm().transpose();
    for (Index c = 0; c < norms.size(); ++c)
        if (!(norms[c] > 0.0)) {
            const auto layer = std::upper_bound(co.begin(), co.end(), c) - co.begin();
            throw ZeroColumnError(layer, c - co[layer - 1]);
        }
    const Matrix Bn = B * norms.cwiseInverse().asDiagonal();
    return Bn.transpose() * Bn;
}

/// N(G) from the connectivity pattern alone.
inline Index count_offdiag(const ArchSpec& spec) { return build_structure(spec).structural_offdiag; }

} // namespace dfp
