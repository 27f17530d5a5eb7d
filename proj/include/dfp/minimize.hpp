#pragma once

// First-order minimization of the deep frame potential over the learned
// parameters, with seeded restarts, and batch scoring of architectures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bound.hpp"
#include "parallel.hpp"
#include "potential.hpp"

namespace dfp {

enum class StepRule { fixed, adaptive_first_order };

inline const char* to_string(StepRule r) { return r == StepRule::fixed ? "fixed" : "adaptive_first_order"; }

struct MinimizeConfig {
    Index max_iters = 20000;
    StepRule step_rule = StepRule::adaptive_first_order;
    double init_step = 1e-2;
    double rel_tol = 1e-9;
    Index window = 100;
    Index restarts = 3;
    std::uint64_t seed = 0;
    InitPolicy init{};
    unsigned jobs = 1; // threads across restarts

    void check() const {
        if (max_iters < 1) throw std::invalid_argument("max_iters must be >= 1");
        if (!(init_step > 0.0)) throw std::invalid_argument("init_step must be positive");
        if (!(rel_tol > 0.0)) throw std::invalid_argument("rel_tol must be positive");
        if (window < 1) throw std::invalid_argument("window must be >= 1");
        if (restarts < 1) throw std::invalid_argument("restarts must be >= 1");
    }
};

/// Fields that determine the result; `jobs` is excluded on purpose.
inline json to_json(const MinimizeConfig& c) {
    return json{{"max_iters", c.max_iters},
                {"step_rule", to_string(c.step_rule)},
                {"init_step", c.init_step},
                {"rel_tol", c.rel_tol},
                {"window", c.window},
                {"restarts", c.restarts},
                {"seed", c.seed},
                {"init", {{"kind", c.init.kind == InitPolicy::Kind::gaussian ? "gaussian" : "gaussian_fan_in"},
                          {"scale", c.init.scale}}}};
}

struct RestartOutcome {
    double final_value = std::numeric_limits<double>::infinity();
    Index iterations = 0;
    bool converged = false;
    Index reseeds = 0;
    std::string failure; // non-empty if the trajectory broke down
};

struct MinimizeResult {
    double best_potential = std::numeric_limits<double>::infinity();
    Vector best_params;
    Index best_restart = 0;
    std::vector<RestartOutcome> per_restart;
    double wall_time = 0.0;
    PotentialReport report;
};

inline json to_json(const MinimizeResult& r, bool with_params = false) {
    json runs = json::array();
    for (const auto& o : r.per_restart) {
        json row{{"final_value", o.final_value}, {"iterations", o.iterations}, {"converged", o.converged},
                 {"reseeds", o.reseeds}};
        if (!o.failure.empty()) row["failure"] = o.failure;
        runs.push_back(row);
    }
    json j{{"best_potential", r.best_potential},
           {"best_restart", r.best_restart},
           {"per_restart", runs},
           {"wall_time", r.wall_time},
           {"report", to_json(r.report)}};
    if (with_params) j["best_params"] = std::vector<double>(r.best_params.data(), r.best_params.data() + r.best_params.size());
    return j;
}

class MinimizeError : public std::runtime_error {
public:
    MinimizeError(const std::string& what, std::vector<RestartOutcome> runs)
        : std::runtime_error(what), runs_(std::move(runs)) {}
    const std::vector<RestartOutcome>& runs() const noexcept { return runs_; }

private:
    std::vector<RestartOutcome> runs_;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t restart_seed(std::uint64_t seed, Index restart) {
    return splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(restart));
}

/// Redraws every learned entry feeding a global column whose norm is below
/// `floor`. Returns how many columns were redrawn.
inline Index reseed_small_columns(BlockDictionary& d, const InitPolicy& init, NormalSource& normal,
                                  double floor = 1e-8) {
    std::vector<Vector> sq;
    for (auto k : d.col_dims) sq.push_back(Vector::Zero(k));
    for (const auto& b : d.blocks) sq[b.col] += b.col_sq_norms();
    Index count = 0;
    for (std::size_t a = 0; a < sq.size(); ++a)
        for (Index n = 0; n < sq[a].size(); ++n) {
            if (sq[a][n] >= floor * floor && std::isfinite(sq[a][n])) continue;
            ++count;
            for (auto& b : d.blocks) {
                if (b.col != static_cast<Index>(a) || !b.learned()) continue;
                const double sd = init.stddev(b);
                if (b.kind == BlockKind::learned_dense) {
                    for (Index r = 0; r < b.rows; ++r) b.weights(r, n) = sd * normal();
                } else {
                    // All shifts of a channel share the filter; redraw that channel.
                    const Index co = n / b.conv.out_positions();
                    const Index per = b.conv.in_channels * b.conv.taps();
                    for (Index i = 0; i < per; ++i) b.filter[co * per + i] = sd * normal();
                }
            }
            // Shared conv channels cover several columns; refresh the norms.
            sq[a].setZero();
            for (const auto& b : d.blocks)
                if (b.col == static_cast<Index>(a)) sq[a] += b.col_sq_norms();
        }
    return count;
}

struct Trajectory {
    RestartOutcome outcome;
    Vector params;
};

inline Trajectory run_restart(const ArchSpec& spec, const MinimizeConfig& cfg, Index restart) {
    Trajectory t;
    RestartOutcome& out = t.outcome;
    const std::uint64_t seed = restart_seed(cfg.seed, restart);
    BlockDictionary d = build_dictionary(spec, cfg.init, seed);
    NormalSource guard_rng{seed, 0x5eedULL};
    out.reseeds += reseed_small_columns(d, cfg.init, guard_rng);

    Vector theta = flatten_params(d);
    auto eval = [&](const Vector& p, double& f, Vector& g) -> bool {
        detail::assign_params(d, std::span<const double>(p.data(), static_cast<std::size_t>(p.size())));
        try {
            auto pg = potential_and_gradient(d);
            if (!std::isfinite(pg.value) || !pg.gradient.allFinite()) return false;
            f = pg.value;
            g = std::move(pg.gradient);
            return true;
        } catch (const ZeroColumnError&) {
            return false;
        }
    };

    double f = 0.0;
    Vector g;
    if (!eval(theta, f, g)) {
        out.failure = "objective not finite at the initial point";
        t.params = theta;
        return t;
    }
    if (theta.size() == 0) {
        out.final_value = f;
        out.converged = true;
        t.params = theta;
        return t;
    }

    const bool adaptive = cfg.step_rule == StepRule::adaptive_first_order;
    double step = cfg.init_step;
    Vector second = Vector::Zero(theta.size());
    const double beta = 0.999;
    Index accepted = 0;
    std::deque<double> history{f};
    Vector trial_theta;
    Vector trial_g;
    double trial_f = 0.0;

    while (out.iterations < cfg.max_iters) {
        ++out.iterations;
        Vector dir;
        if (adaptive) {
            const Vector v = beta * second + (1.0 - beta) * g.cwiseAbs2();
            const double corr = 1.0 - std::pow(beta, static_cast<double>(accepted + 1));
            dir = g.array() / ((v.array() / corr).sqrt() + 1e-12);
            second = v;
        } else {
            dir = g;
            step = cfg.init_step;
        }
        bool ok = false;
        while (step > 1e-18) {
            trial_theta = theta - step * dir;
            if (eval(trial_theta, trial_f, trial_g) && trial_f <= f) {
                ok = true;
                break;
            }
            step *= 0.5;
            if (out.iterations >= cfg.max_iters) break;
            ++out.iterations;
        }
        if (!ok) {
            // No descent along the current direction at any usable step.
            out.converged = true;
            break;
        }
        theta = trial_theta;
        f = trial_f;
        g = trial_g;
        ++accepted;
        if (adaptive) step = std::min(step * 1.2, 1.0);

        detail::assign_params(d, std::span<const double>(theta.data(), static_cast<std::size_t>(theta.size())));
        if (Index n = reseed_small_columns(d, cfg.init, guard_rng); n > 0) {
            out.reseeds += n;
            theta = flatten_params(d);
            if (!eval(theta, f, g)) {
                out.failure = "objective not finite after reseeding a column";
                break;
            }
            history.clear();
        }

        history.push_back(f);
        if (static_cast<Index>(history.size()) > cfg.window + 1) history.pop_front();
        if (f == 0.0) {
            out.converged = true;
            break;
        }
        if (static_cast<Index>(history.size()) == cfg.window + 1) {
            const double old = history.front();
            if ((old - f) <= cfg.rel_tol * old) {
                out.converged = true;
                break;
            }
        }
    }
    out.final_value = f;
    t.params = theta;
    if (!std::isfinite(f) && out.failure.empty()) out.failure = "objective diverged";
    return t;
}

} // namespace detail

/// Runs cfg.restarts independent descents and keeps the lowest potential.
/// The result depends only on (spec, cfg), not on thread scheduling.
inline MinimizeResult minimize_potential(const ArchSpec& spec, const MinimizeConfig& cfg = {}) {
    cfg.check();
    const auto start = std::chrono::steady_clock::now();
    std::vector<detail::Trajectory> runs(static_cast<std::size_t>(cfg.restarts));
    parallel_for(runs.size(), cfg.jobs, [&](std::size_t r) { runs[r] = detail::run_restart(spec, cfg, static_cast<Index>(r)); });

    MinimizeResult res;
    bool any = false;
    for (std::size_t r = 0; r < runs.size(); ++r) {
        res.per_restart.push_back(runs[r].outcome);
        const auto& o = runs[r].outcome;
        if (!o.failure.empty() || !std::isfinite(o.final_value)) continue;
        if (!any || o.final_value < res.best_potential) {
            any = true;
            res.best_potential = o.final_value;
            res.best_restart = static_cast<Index>(r);
        }
    }
    if (!any) {
        std::string msg = "all " + std::to_string(runs.size()) + " restarts failed:";
        for (std::size_t r = 0; r < runs.size(); ++r)
            msg += " [" + std::to_string(r) + "] " + runs[r].outcome.failure + " after " +
                   std::to_string(runs[r].outcome.iterations) + " iterations;";
        throw MinimizeError(msg, res.per_restart);
    }
    res.best_params = std::move(runs[static_cast<std::size_t>(res.best_restart)].params);
    res.report = evaluate(load_params(build_structure(spec), res.best_params));
    res.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
}

struct ScoreRow {
    std::string id;
    Index params = 0;
    double potential = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> bound;
    Index n_offdiag = 0;
    double seconds = 0.0;
    std::string error;

    bool ok() const { return error.empty(); }
};

inline json to_json(const ScoreRow& r) {
    json j{{"id", r.id}, {"params", r.params}, {"n_offdiag", r.n_offdiag}, {"seconds", r.seconds}};
    j["potential"] = r.ok() ? json(r.potential) : json(nullptr);
    j["bound"] = r.bound ? json(*r.bound) : json(nullptr);
    if (!r.ok()) j["error"] = r.error;
    return j;
}

/// Ascending by potential, then parameter count, then id. Failed rows last.
inline void sort_rows(std::vector<ScoreRow>& rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const ScoreRow& a, const ScoreRow& b) {
        if (a.ok() != b.ok()) return a.ok();
        if (a.ok() && a.potential != b.potential) return a.potential < b.potential;
        if (a.params != b.params) return a.params < b.params;
        return a.id < b.id;
    });
}

/// Scores one spec; failures are captured in the row.
inline ScoreRow score_one(const ArchSpec& spec, const MinimizeConfig& cfg) {
    ScoreRow row;
    row.id = spec.id;
    const auto start = std::chrono::steady_clock::now();
    try {
        ArchSpec checked = spec;
        validate(checked);
        row.params = param_count(spec);
        row.n_offdiag = count_offdiag(spec);
        const auto res = minimize_potential(spec, cfg);
        row.potential = res.best_potential;
        if (spec.family == Family::chain && spec.input.kind == GeomKind::dense &&
            std::all_of(spec.layers.begin(), spec.layers.end(), [](const LayerGeom& g) { return g.kind == GeomKind::dense; }))
            row.bound = chain_lower_bound(spec).bound;
    } catch (const std::exception& ex) {
        row.error = ex.what();
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return row;
}

/// Minimizes every spec (up to `jobs` at once) and returns the sorted table.
inline std::vector<ScoreRow> score_architectures(const std::vector<ArchSpec>& specs, const MinimizeConfig& cfg,
                                                 unsigned jobs = 1) {
    if (specs.empty()) throw std::invalid_argument("score_architectures needs at least one spec");
    std::vector<ScoreRow> rows(specs.size());
    MinimizeConfig inner = cfg;
    inner.jobs = 1;
    parallel_for(specs.size(), jobs, [&](std::size_t i) { rows[i] = score_one(specs[i], inner); });
    sort_rows(rows);
    return rows;
}

} // namespace dfp
