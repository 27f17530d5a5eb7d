#pragma once

// Reference bounds: the Welch bound for unstructured frames and a lower
// bound on the frame potential of fully connected chains.
//
// For a chain with column magnitudes c_jn (norm of column n of B_j), the
// row-space Gram H = B~ B~^T has the same Frobenius norm as G, its cross
// blocks have norm sum_n (c/(c^2+1))^2 exactly, and each diagonal block is
// bounded below through its trace and rank k_{j-1}. Summing and dividing by
// N(G) gives a bound that holds for every c; minimizing it over c gives the
// architecture bound.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "archspec.hpp"

namespace dfp {

/// sqrt((k - d) / (d (k - 1))), the smallest coherence of k unit vectors in R^d.
inline double welch_bound(Index d, Index k) {
    if (d < 1 || k < 1) throw std::invalid_argument("welch_bound: dimensions must be positive");
    if (k < d) throw std::invalid_argument("welch_bound: k = " + std::to_string(k) + " is below d = " + std::to_string(d));
    if (k == 1) return 0.0;
    return std::sqrt(static_cast<double>(k - d) / static_cast<double>(d * (k - 1)));
}

/// Squared norm of the cross block for a layer of k units sharing magnitude c.
inline double chain_h_cross_norm(Index k, double c) {
    const double t = c / (c * c + 1.0);
    return static_cast<double>(k) * t * t;
}

inline double chain_h_cross_norm(std::span<const double> c) {
    double s = 0.0;
    for (double v : c) {
        if (std::isinf(v)) continue;
        const double t = v / (v * v + 1.0);
        s += t * t;
    }
    return s;
}

namespace detail {

// 1/(c^2+1) and c^2/(c^2+1), exact at c = 0 and c = inf.
inline double inv_share(double c) { return std::isinf(c) ? 0.0 : 1.0 / (c * c + 1.0); }
inline double own_share(double c) { return 1.0 - inv_share(c); }

inline void check_widths(const std::vector<Index>& widths) {
    if (widths.size() < 2) throw std::invalid_argument("chain bound needs at least one layer");
    for (auto k : widths)
        if (k < 1) throw std::invalid_argument("chain bound widths must be positive");
}

inline void check_layer(const std::vector<Index>& widths, Index j) {
    const Index l = static_cast<Index>(widths.size()) - 1;
    if (j < 1 || j > l)
        throw std::out_of_range("layer " + std::to_string(j) + " outside 1.." + std::to_string(l));
}

} // namespace detail

/// Lower bound on ||H_jj||^2 with one magnitude per layer; c[j-1] is c_j.
/// The last layer has unit-normalized columns, so c_l is not used.
inline double chain_h_diag_bound(const std::vector<Index>& widths, const std::vector<double>& c, Index j) {
    detail::check_widths(widths);
    detail::check_layer(widths, j);
    const Index l = static_cast<Index>(widths.size()) - 1;
    if (static_cast<Index>(c.size()) < l - 1) throw std::invalid_argument("need a magnitude for every hidden layer");
    double tr = j == l ? static_cast<double>(widths[j]) : static_cast<double>(widths[j]) * detail::own_share(c[j - 1]);
    if (j > 1) tr += static_cast<double>(widths[j - 1]) * detail::inv_share(c[j - 2]);
    return tr * tr / static_cast<double>(widths[j - 1]);
}

/// Per-unit version; c[j-1] holds the k_j magnitudes of layer j.
inline double chain_h_diag_bound(const std::vector<Index>& widths, const std::vector<std::vector<double>>& c, Index j) {
    detail::check_widths(widths);
    detail::check_layer(widths, j);
    const Index l = static_cast<Index>(widths.size()) - 1;
    if (static_cast<Index>(c.size()) < l - 1) throw std::invalid_argument("need magnitudes for every hidden layer");
    double tr = 0.0;
    if (j == l) tr = static_cast<double>(widths[j]);
    else
        for (double v : c[j - 1]) tr += detail::own_share(v);
    if (j > 1)
        for (double v : c[j - 2]) tr += detail::inv_share(v);
    return tr * tr / static_cast<double>(widths[j - 1]);
}

/// N(G) of a fully connected chain.
inline Index chain_offdiag_count(const std::vector<Index>& widths) {
    Index n = 0;
    for (std::size_t j = 1; j < widths.size(); ++j) {
        n += widths[j] * (widths[j] - 1);
        if (j + 1 < widths.size()) n += 2 * widths[j] * widths[j + 1];
    }
    return n;
}

/// The assembled bound on F^2 at fixed per-unit magnitudes, clamped at 0.
inline double chain_bound_at(const std::vector<Index>& widths, const std::vector<std::vector<double>>& c) {
    detail::check_widths(widths);
    const Index l = static_cast<Index>(widths.size()) - 1;
    const Index n = chain_offdiag_count(widths);
    if (n == 0) return 0.0;
    double num = 0.0;
    for (Index j = 1; j <= l; ++j) {
        num += chain_h_diag_bound(widths, c, j) - static_cast<double>(widths[j]);
        if (j < l) num += 2.0 * chain_h_cross_norm(c[j - 1]);
    }
    return std::max(0.0, num / static_cast<double>(n));
}

inline double chain_bound_at(const std::vector<Index>& widths, const std::vector<double>& c) {
    std::vector<std::vector<double>> units;
    for (std::size_t j = 0; j + 2 < widths.size(); ++j) units.emplace_back(static_cast<std::size_t>(widths[j + 1]), c[j]);
    return chain_bound_at(widths, units);
}

enum class BoundMode { per_unit, uniform };

struct ChainBound {
    double bound = 0.0;
    /// Minimizing magnitudes per hidden layer (one entry per unit, or a single
    /// entry in uniform mode). Infinite values mean the infimum is approached
    /// as that column grows without bound.
    std::vector<std::vector<double>> c_star;
    Index iterations = 0;
    bool converged = false;
    BoundMode mode = BoundMode::per_unit;
};

inline json to_json(const ChainBound& b) {
    json cs = json::array();
    for (const auto& layer : b.c_star) {
        json row = json::array();
        for (double v : layer) row.push_back(std::isinf(v) ? json(nullptr) : json(v));
        cs.push_back(row);
    }
    return json{{"bound", b.bound},
                {"c_star", cs},
                {"iterations", b.iterations},
                {"converged", b.converged},
                {"mode", b.mode == BoundMode::per_unit ? "per_unit" : "uniform"}};
}

namespace detail {

// Per-unit minimization. Write u_jn = 1/(c_jn^2+1) and S_j = sum_n u_jn in
// [0, k_j]. The diagonal terms depend on c only through the S_j, and for a
// fixed S_j the cross term sum_n u(1-u) is concave, so its minimum puts every
// u at 0 or 1 except one: r(1-r) with r = frac(S_j). What remains is a
// function of the chain-coupled S_j.
class PerUnitBound {
public:
    explicit PerUnitBound(const std::vector<Index>& widths)
        : k_(widths), l_(static_cast<Index>(widths.size()) - 1) {}

    // S has l+1 entries with S[0] = S[l] = 0.
    double numerator(const std::vector<double>& S) const {
        double num = 0.0;
        for (Index j = 1; j <= l_; ++j) num += pair_term(j, S[j - 1], S[j]);
        for (Index j = 1; j < l_; ++j) num += 2.0 * frac_cost(S[j]);
        return num - total();
    }

    ChainBound solve(Index max_sweeps = 10000) const {
        ChainBound out;
        out.mode = BoundMode::per_unit;
        std::vector<double> S(static_cast<std::size_t>(l_ + 1), 0.0);
        if (l_ > 1) grid_start(S);
        double cur = numerator(S);
        out.converged = true;
        for (Index sweep = 0; sweep < max_sweeps && l_ > 1; ++sweep) {
            ++out.iterations;
            for (Index j = 1; j < l_; ++j) S[j] = line_min(S, j);
            const double next = numerator(S);
            const bool done = cur - next <= 1e-15 * std::max(1.0, std::abs(cur));
            cur = std::min(cur, next);
            if (done) break;
            if (sweep + 1 == max_sweeps) out.converged = false;
        }
        const Index n = chain_offdiag_count(k_);
        out.bound = n == 0 ? 0.0 : std::max(0.0, cur / static_cast<double>(n));
        for (Index j = 1; j < l_; ++j) out.c_star.push_back(magnitudes(S[j], k_[j]));
        return out;
    }

private:
    std::vector<Index> k_;
    Index l_;

    double total() const {
        double t = 0.0;
        for (Index j = 1; j <= l_; ++j) t += static_cast<double>(k_[j]);
        return t;
    }

    // Trace bound of row block j from S_{j-1} (prev) and S_j (cur).
    double pair_term(Index j, double prev, double cur) const {
        const double tr = static_cast<double>(k_[j]) - cur + prev;
        return tr * tr / static_cast<double>(k_[j - 1]);
    }

    static double frac_cost(double s) {
        const double r = s - std::floor(s);
        return r * (1.0 - r);
    }

    // Local objective in S_j with neighbours fixed.
    double local(const std::vector<double>& S, Index j, double s) const {
        return pair_term(j, S[j - 1], s) + pair_term(j + 1, s, S[j + 1]) + 2.0 * frac_cost(s);
    }

    // Exact minimum over [0, k_j]: on each unit interval the local objective
    // is a quadratic, so compare the endpoints and any interior vertex.
    double line_min(const std::vector<double>& S, Index j) const {
        const double a = 1.0 / static_cast<double>(k_[j - 1]);
        const double b = 1.0 / static_cast<double>(k_[j]);
        const double P = static_cast<double>(k_[j]) + S[j - 1];
        const double Q = static_cast<double>(k_[j + 1]) - S[j + 1];
        const double alpha = a + b - 2.0;
        double best_s = S[j];
        double best = local(S, j, best_s);
        auto consider = [&](double s) {
            const double v = local(S, j, s);
            if (v < best) {
                best = v;
                best_s = s;
            }
        };
        for (Index m = 0; m <= k_[j]; ++m) consider(static_cast<double>(m));
        if (alpha > 0.0)
            for (Index m = 0; m < k_[j]; ++m) {
                const double beta = -2.0 * P * a + 2.0 * Q * b + 2.0 * static_cast<double>(2 * m + 1);
                const double s = -beta / (2.0 * alpha);
                if (s > static_cast<double>(m) && s < static_cast<double>(m + 1)) consider(s);
            }
        return best_s;
    }

    // Dynamic program over a grid of each S_j, exploiting the chain coupling.
    void grid_start(std::vector<double>& S) const {
        Index kmax = 1;
        for (Index j = 1; j < l_; ++j) kmax = std::max(kmax, k_[j]);
        const Index per_unit = std::clamp<Index>(1024 / kmax, 16, 256);
        const double h = 1.0 / static_cast<double>(per_unit);
        auto grid = [&](Index j) {
            std::vector<double> g;
            for (Index i = 0; i <= k_[j] * per_unit; ++i) g.push_back(static_cast<double>(i) * h);
            return g;
        };
        // cost[i]: best value of the terms up to row block j given S_j = g[i].
        std::vector<std::vector<double>> grids;
        std::vector<std::vector<std::size_t>> arg;
        std::vector<double> cost;
        grids.push_back(grid(1));
        for (double s : grids[0]) cost.push_back(pair_term(1, 0.0, s) + 2.0 * frac_cost(s));
        arg.emplace_back();
        for (Index j = 2; j < l_; ++j) {
            const auto& gp = grids.back();
            auto g = grid(j);
            std::vector<double> next(g.size(), std::numeric_limits<double>::infinity());
            std::vector<std::size_t> from(g.size(), 0);
            for (std::size_t i = 0; i < g.size(); ++i) {
                for (std::size_t p = 0; p < gp.size(); ++p) {
                    const double v = cost[p] + pair_term(j, gp[p], g[i]);
                    if (v < next[i]) {
                        next[i] = v;
                        from[i] = p;
                    }
                }
                next[i] += 2.0 * frac_cost(g[i]);
            }
            grids.push_back(std::move(g));
            arg.push_back(std::move(from));
            cost = std::move(next);
        }
        std::size_t best = 0;
        double best_v = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < cost.size(); ++i) {
            const double v = cost[i] + pair_term(l_, grids.back()[i], 0.0);
            if (v < best_v) {
                best_v = v;
                best = i;
            }
        }
        for (Index j = l_ - 1; j >= 1; --j) {
            S[j] = grids[j - 1][best];
            if (j > 1) best = arg[j - 1][best];
        }
    }

    static std::vector<double> magnitudes(double s, Index k) {
        std::vector<double> c;
        const auto whole = static_cast<Index>(std::floor(s));
        const double r = s - static_cast<double>(whole);
        for (Index i = 0; i < whole && i < k; ++i) c.push_back(0.0);
        if (r > 0.0 && whole < k) c.push_back(std::sqrt(1.0 / r - 1.0));
        while (static_cast<Index>(c.size()) < k) c.push_back(std::numeric_limits<double>::infinity());
        return c;
    }
};

inline constexpr double log_c_limit = 18.420680743952367; // ln(1e8)

// Golden-section minimum of f on [a, b].
template <class F>
double golden_min(F&& f, double a, double b, double tol) {
    const double g = 0.6180339887498949;
    double x1 = b - g * (b - a);
    double x2 = a + g * (b - a);
    double f1 = f(x1);
    double f2 = f(x2);
    while (b - a > tol) {
        if (f1 <= f2) {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    return f1 <= f2 ? x1 : x2;
}

inline ChainBound uniform_bound(const std::vector<Index>& widths, Index max_sweeps) {
    ChainBound out;
    out.mode = BoundMode::uniform;
    const Index l = static_cast<Index>(widths.size()) - 1;
    std::vector<double> x(static_cast<std::size_t>(std::max<Index>(l - 1, 0)), 0.0);
    auto value = [&](const std::vector<double>& xs) {
        std::vector<double> c;
        for (double v : xs) c.push_back(std::exp(v));
        return chain_bound_at(widths, c);
    };
    double cur = value(x);
    out.converged = true;
    for (Index sweep = 0; sweep < max_sweeps && l > 1; ++sweep) {
        ++out.iterations;
        for (std::size_t j = 0; j < x.size(); ++j) {
            auto f = [&](double v) {
                auto t = x;
                t[j] = v;
                return value(t);
            };
            const int n = 400;
            const double lo = -log_c_limit;
            const double step = 2.0 * log_c_limit / n;
            int best = 0;
            double best_v = std::numeric_limits<double>::infinity();
            for (int i = 0; i <= n; ++i) {
                const double v = f(lo + step * i);
                if (v < best_v) {
                    best_v = v;
                    best = i;
                }
            }
            const double a = lo + step * std::max(best - 1, 0);
            const double b = lo + step * std::min(best + 1, n);
            const double cand = golden_min(f, a, b, 1e-10);
            const double pick = f(cand) <= best_v ? cand : lo + step * best;
            if (f(pick) <= f(x[j])) x[j] = pick;
        }
        const double next = value(x);
        const bool done = cur - next <= 1e-15 * std::max(1.0, std::abs(cur));
        cur = std::min(cur, next);
        if (done) break;
        if (sweep + 1 == max_sweeps) out.converged = false;
    }
    out.bound = cur;
    for (std::size_t j = 0; j < x.size(); ++j) out.c_star.push_back({std::exp(x[j])});
    return out;
}

} // namespace detail

/// Lower bound on the frame potential of any chain with these widths
/// (k_0 .. k_l). `uniform` restricts every layer to a single magnitude; that
/// restriction is not a valid bound in general and is kept for comparison.
inline ChainBound chain_lower_bound(const std::vector<Index>& widths, BoundMode mode = BoundMode::per_unit,
                                    Index max_sweeps = 10000) {
    detail::check_widths(widths);
    if (mode == BoundMode::uniform) return detail::uniform_bound(widths, max_sweeps);
    return detail::PerUnitBound(widths).solve(max_sweeps);
}

inline ChainBound chain_lower_bound(const ArchSpec& spec, BoundMode mode = BoundMode::per_unit) {
    if (spec.family != Family::chain) throw SpecError("family", "the closed-form bound covers chain networks only");
    if (spec.input.kind != GeomKind::dense)
        throw SpecError("input", "the closed-form bound covers fully connected layers only");
    for (std::size_t i = 0; i < spec.layers.size(); ++i)
        if (spec.layers[i].kind != GeomKind::dense)
            throw SpecError("layers[" + std::to_string(i) + "]", "the closed-form bound covers fully connected layers only");
    return chain_lower_bound(spec.widths(), mode);
}

} // namespace dfp
