#pragma once

// Nonnegative sparse coding over the induced dictionary: the thresholding
// prox, the layered (feed-forward) approximation, a proximal-gradient solver
// for the joint problem, and the coherence-based recovery thresholds.

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "dictionary.hpp"

namespace dfp {

/// max(v - lambda, 0) elementwise, i.e. relu(v - lambda).
inline Vector nonneg_soft_threshold(const Vector& v, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("lambda must be nonnegative");
    return (v.array() - lambda).max(0.0).matrix();
}

namespace detail {

inline Vector block_transpose_times(const Block& b, const Vector& x) {
    switch (b.kind) {
    case BlockKind::learned_dense: return b.weights.transpose() * x;
    case BlockKind::learned_conv: return b.sparse().transpose() * x;
    case BlockKind::identity: return x;
    case BlockKind::neg_identity: return -x;
    case BlockKind::zero: return Vector::Zero(b.cols);
    }
    return Vector::Zero(b.cols);
}

} // namespace detail

/// Layered thresholding: w_0 = x and w_d = relu(sum over incoming edges of
/// W_sd^T w_s - lambda_d), where identity edges pass w_s through unchanged.
/// Returns w_1 .. w_l.
inline std::vector<Vector> forward_pass(const BlockDictionary& d, const Vector& x) {
    if (x.size() != d.row_dims.front())
        throw std::invalid_argument("input has length " + std::to_string(x.size()) + ", expected " +
                                    std::to_string(d.row_dims.front()));
    const Index l = d.depth();
    std::vector<Vector> w{x};
    for (Index layer = 1; layer <= l; ++layer) {
        Vector pre = Vector::Zero(d.col_dims[layer - 1]);
        // The block in row `layer` of this column is the fixed -I that ties the
        // layer to its own reconstruction; only rows above it feed forward.
        for (const auto& b : d.blocks)
            if (b.col == layer - 1 && b.row < layer) pre += detail::block_transpose_times(b, w[b.row]);
        w.push_back(nonneg_soft_threshold(pre, d.spec.lambda_for(layer)));
    }
    w.erase(w.begin());
    return w;
}

struct SparseProblem {
    BlockDictionary dict;
    Vector x;
    std::vector<double> lambdas; // one per layer
    Vector w;                    // stacked coefficients, length sum k_j

    /// (x, 0, ..., 0) padded to the dictionary's row count.
    Vector target() const {
        Vector t = Vector::Zero(dict.total_rows());
        t.head(x.size()) = x;
        return t;
    }
};

inline SparseProblem make_problem(const BlockDictionary& d, const Vector& x) {
    if (x.size() != d.row_dims.front()) throw std::invalid_argument("input length does not match the dictionary");
    SparseProblem p{d, x, {}, Vector::Zero(d.total_cols())};
    for (Index j = 1; j <= d.depth(); ++j) {
        const double lam = d.spec.lambda_for(j);
        if (lam < 0.0) throw std::invalid_argument("lambda must be nonnegative");
        p.lambdas.push_back(lam);
    }
    return p;
}

inline Vector stack(const std::vector<Vector>& parts) {
    Index n = 0;
    for (const auto& v : parts) n += v.size();
    Vector out(n);
    Index off = 0;
    for (const auto& v : parts) {
        out.segment(off, v.size()) = v;
        off += v.size();
    }
    return out;
}

namespace detail {

inline double penalty(const SparseProblem& p, const Vector& w) {
    const auto co = p.dict.col_offsets();
    double s = 0.0;
    for (std::size_t j = 0; j < p.lambdas.size(); ++j)
        s += p.lambdas[j] * w.segment(co[j], co[j + 1] - co[j]).lpNorm<1>();
    return s;
}

inline Vector prox(const SparseProblem& p, const Vector& v, double step) {
    const auto co = p.dict.col_offsets();
    Vector out(v.size());
    for (std::size_t j = 0; j < p.lambdas.size(); ++j)
        out.segment(co[j], co[j + 1] - co[j]) =
            nonneg_soft_threshold(v.segment(co[j], co[j + 1] - co[j]), step * p.lambdas[j]);
    return out;
}

} // namespace detail

/// 1/2 ||B w - x~||^2 + sum_j lambda_j ||w_j||_1, or +inf if w leaves w >= 0.
inline double objective(const SparseProblem& p, const Matrix& B, const Vector& w) {
    if ((w.array() < 0.0).any()) return std::numeric_limits<double>::infinity();
    return 0.5 * (B * w - p.target()).squaredNorm() + detail::penalty(p, w);
}

inline double objective(const SparseProblem& p, const Vector& w) { return objective(p, materialize(p.dict), w); }

/// Largest eigenvalue of B^T B by power iteration, to relative tolerance `tol`.
inline double squared_spectral_norm(const Matrix& B, double tol = 1e-8, Index max_iters = 100000) {
    if (B.cols() == 0) return 0.0;
    Vector v = Vector::Ones(B.cols()).normalized();
    double prev = 0.0;
    for (Index it = 0; it < max_iters; ++it) {
        Vector u = B.transpose() * (B * v);
        const double val = u.norm();
        if (val == 0.0) return 0.0;
        v = u / val;
        if (std::abs(val - prev) <= tol * val) return val;
        prev = val;
    }
    return prev;
}

struct SolveOptions {
    Index max_iters = 10000;
    double tol = 1e-12;
    bool accelerate = false;
    /// Start from the layered-thresholding activations rather than zero.
    bool warm_start = true;
};

struct SolveResult {
    Vector w;
    double objective = 0.0;
    Index iterations = 0;
    bool converged = false;
    double step = 0.0;
    std::vector<double> history; // objective at every iterate, start included
};

/// Proximal gradient w <- prox(w - eta B^T (B w - x~)) with eta = 1/L.
inline SolveResult solve_dca(SparseProblem& p, const SolveOptions& opt = {}) {
    const Matrix B = materialize(p.dict);
    const Vector t = p.target();
    // Power iteration approaches L from below; the margin keeps eta <= 1/L.
    const double L = squared_spectral_norm(B) * (1.0 + 1e-6);
    SolveResult res;
    res.step = L > 0.0 ? 1.0 / L : 1.0;

    Vector w = opt.warm_start ? stack(forward_pass(p.dict, p.x)) : Vector::Zero(B.cols());
    double f = objective(p, B, w);
    if (!std::isfinite(f)) throw std::runtime_error("objective is not finite at the starting point");
    res.history.push_back(f);
    Vector y = w;
    double momentum = 1.0;
    for (Index it = 0; it < opt.max_iters; ++it) {
        ++res.iterations;
        const Vector& base = opt.accelerate ? y : w;
        Vector next = detail::prox(p, base - res.step * (B.transpose() * (B * base - t)), res.step);
        double fn = objective(p, B, next);
        if (!std::isfinite(fn)) throw std::runtime_error("objective became non-finite; step too large");
        if (opt.accelerate) {
            if (fn > f) {
                // Restart momentum to keep the sequence monotone.
                momentum = 1.0;
                next = detail::prox(p, w - res.step * (B.transpose() * (B * w - t)), res.step);
                fn = objective(p, B, next);
                y = next;
            } else {
                const double m2 = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum * momentum));
                y = next + ((momentum - 1.0) / m2) * (next - w);
                momentum = m2;
            }
        }
        const double decrease = f - fn;
        w = std::move(next);
        f = fn;
        res.history.push_back(f);
        if (decrease <= opt.tol * std::max(std::abs(f), std::numeric_limits<double>::min())) {
            res.converged = true;
            break;
        }
    }
    res.w = w;
    res.objective = f;
    p.w = w;
    return res;
}

/// Sparsity below which a representation is the unique sparsest one: (1 + 1/mu) / 2.
inline double uniqueness_threshold(double mu) {
    if (mu < 0.0 || mu > 1.0) throw std::invalid_argument("coherence must lie in [0, 1]");
    if (mu == 0.0) return std::numeric_limits<double>::infinity();
    return 0.5 * (1.0 + 1.0 / mu);
}

/// Sparsity up to which recovery is stable under noise: (1 + 1/mu) / 4.
inline double stability_cap(double mu) {
    if (mu < 0.0 || mu > 1.0) throw std::invalid_argument("coherence must lie in [0, 1]");
    if (mu == 0.0) return std::numeric_limits<double>::infinity();
    return 0.25 * (1.0 + 1.0 / mu);
}

/// 1 - mu (4 s - 1); nonpositive values mean the error bound says nothing.
inline double robustness_denominator(double mu, Index s) {
    if (s < 1) throw std::invalid_argument("sparsity must be >= 1");
    return 1.0 - mu * (4.0 * static_cast<double>(s) - 1.0);
}

} // namespace dfp
