// dfp: score feed-forward architectures by their minimum deep frame potential.
//
// Machine-readable output goes to stdout (or --out), a short human summary to
// stderr. Exit status: 0 success, 1 usage or spec error, 2 computation failure.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dfp/csv.hpp"
#include "dfp/dfp.hpp"
#include "dfp/records.hpp"

namespace fs = std::filesystem;
using namespace dfp;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::uint64_t seed = 0;
    unsigned jobs = 1;
    std::string out;
    std::string format; // empty: per-command default
    bool no_cache = false;
    Index restarts = 3;
    Index max_iters = 20000;
    double tol = 1e-9;
    std::string cache_dir = ".dfp-runs";
};

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw UsageError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ArchSpec load_spec(const fs::path& p) {
    ArchSpec s = parse_spec(read_file(p));
    if (s.id.empty()) s.id = p.stem().string();
    return s;
}

MinimizeConfig minimize_config(const Options& o) {
    MinimizeConfig c;
    c.seed = o.seed;
    c.restarts = o.restarts;
    c.max_iters = o.max_iters;
    c.rel_tol = o.tol;
    c.jobs = o.jobs;
    c.check();
    return c;
}

/// Writes to --out if given, else stdout.
class Sink {
public:
    explicit Sink(const std::string& path) {
        if (!path.empty()) {
            file_ = std::make_unique<std::ofstream>(path, std::ios::binary);
            if (!*file_) throw UsageError("cannot write " + path);
        }
    }
    std::ostream& os() { return file_ ? *file_ : std::cout; }

private:
    std::unique_ptr<std::ofstream> file_;
};

/// --format if given, else the command's default.
bool wants_csv(const Options& o, bool csv_default) { return o.format.empty() ? csv_default : o.format == "csv"; }

void emit_json(const Options& o, const json& j) {
    Sink s(o.out);
    s.os() << j.dump(2) << '\n';
}

BlockDictionary dictionary_for(const ArchSpec& spec, const std::string& dict_path, std::uint64_t seed) {
    if (dict_path.empty()) return build_dictionary(spec, {}, seed);
    BlockDictionary d = load_dictionary(dict_path);
    if (to_json(d.spec) != to_json(spec)) throw UsageError(dict_path + " was saved for a different spec");
    return d;
}

// ---------------------------------------------------------------------------
// Cached minimization shared by minimize, rank and sweep.

struct Scored {
    json results;
    bool cached = false;
    double seconds = 0.0;
    std::string config_hash;
};

class Runner {
public:
    explicit Runner(const Options& o)
        : opts_(o), store_(o.cache_dir, [](const std::string& w) { std::cerr << "warning: " << w << '\n'; }) {}

    static json config_json(const MinimizeConfig& c) { return json{{"command", "minimize"}, {"minimize", to_json(c)}}; }

    Scored minimize(const ArchSpec& spec, const MinimizeConfig& cfg, Vector* params = nullptr) {
        const auto start = std::chrono::steady_clock::now();
        const json cj = config_json(cfg);
        Scored out;
        out.config_hash = config_hash(cj);
        if (!opts_.no_cache && !params) {
            if (auto hit = store_.lookup(spec_hash(spec), out.config_hash)) {
                out.results = hit->results;
                out.cached = true;
                out.seconds = elapsed(start);
                return out;
            }
        }
        const auto res = minimize_potential(spec, cfg);
        if (params) *params = res.best_params;
        out.results = to_json(res);
        if (!opts_.no_cache) store_.append(make_record(spec, cj, out.results));
        out.seconds = elapsed(start);
        return out;
    }

private:
    static double elapsed(std::chrono::steady_clock::time_point start) {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }

    Options opts_;
    RecordStore store_;
};

std::optional<double> chain_bound_if_any(const ArchSpec& spec) {
    if (spec.family != Family::chain || spec.input.kind != GeomKind::dense) return std::nullopt;
    for (const auto& g : spec.layers)
        if (g.kind != GeomKind::dense) return std::nullopt;
    return chain_lower_bound(spec).bound;
}

ScoreRow score_row(Runner& runner, const ArchSpec& spec, const MinimizeConfig& cfg) {
    ScoreRow row;
    row.id = spec.id;
    const auto start = std::chrono::steady_clock::now();
    try {
        row.params = param_count(spec);
        row.n_offdiag = count_offdiag(spec);
        const Scored s = runner.minimize(spec, cfg);
        row.potential = s.results.at("best_potential").get<double>();
        row.bound = chain_bound_if_any(spec);
    } catch (const std::exception& ex) {
        row.error = ex.what();
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return row;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_describe(const Options& o, const std::string& path) {
    const ArchSpec spec = load_spec(path);
    const auto d = build_structure(spec);
    json j{{"spec", to_json(spec)},
           {"param_count", param_count(spec)},
           {"n_offdiag", d.structural_offdiag},
           {"atom_count", d.total_cols()},
           {"rows", d.total_rows()},
           {"widths", spec.widths()}};
    emit_json(o, j);
    std::cerr << spec.id << ": " << to_string(spec.family) << ", depth " << spec.depth() << ", "
              << param_count(spec) << " params, N(G) = " << d.structural_offdiag << '\n';
    return 0;
}

int cmd_gram(const Options& o, const std::string& path, const std::string& dict_path, bool magnitude) {
    const ArchSpec spec = load_spec(path);
    const auto d = dictionary_for(spec, dict_path, o.seed);
    const Matrix G = to_dense(gram_blocks(d));
    if (!wants_csv(o, true)) {
        json rows = json::array();
        for (Index i = 0; i < G.rows(); ++i) {
            json r = json::array();
            for (Index k = 0; k < G.cols(); ++k) r.push_back(magnitude ? std::abs(G(i, k)) : G(i, k));
            rows.push_back(r);
        }
        emit_json(o, json{{"gram", rows}, {"n_offdiag", d.structural_offdiag}, {"atom_count", d.total_cols()}});
    } else if (!o.out.empty()) {
        // Signed Gram plus a magnitude companion for heat-map plotting.
        {
            Sink s(o.out);
            csv::write_matrix(s.os(), G, magnitude);
        }
        fs::path abs = o.out;
        abs.replace_extension(".abs.csv");
        std::ofstream a(abs, std::ios::binary);
        if (!a) throw UsageError("cannot write " + abs.string());
        csv::write_matrix(a, G, true);
    } else {
        csv::write_matrix(std::cout, G, magnitude);
    }
    std::cerr << spec.id << ": Gram " << G.rows() << "x" << G.cols() << '\n';
    return 0;
}

int cmd_potential(const Options& o, const std::string& path, const std::string& dict_path) {
    const ArchSpec spec = load_spec(path);
    const auto rep = evaluate(dictionary_for(spec, dict_path, o.seed));
    emit_json(o, to_json(rep));
    std::cerr << spec.id << ": F^2 = " << csv::number(rep.frame_potential) << ", mu = " << csv::number(rep.coherence)
              << '\n';
    return 0;
}

int cmd_minimize(const Options& o, const std::string& path, const std::string& save_dict) {
    const ArchSpec spec = load_spec(path);
    const auto cfg = minimize_config(o);
    Runner runner(o);
    Vector params;
    const Scored s = runner.minimize(spec, cfg, save_dict.empty() ? nullptr : &params);
    if (!save_dict.empty()) save_dictionary(load_params(build_structure(spec), params), save_dict);
    const double pot = s.results.at("best_potential").get<double>();
    if (wants_csv(o, false)) {
        Sink sink(o.out);
        csv::write_row(sink.os(), csv::ranking_header());
        csv::write_row(sink.os(), {csv::field(spec.id), std::to_string(param_count(spec)), csv::number(pot),
                                   csv::number(chain_bound_if_any(spec)), csv::number(s.seconds)});
    } else {
        emit_json(o, json{{"spec_id", spec.id},
                          {"spec_hash", spec_hash(spec)},
                          {"config_hash", s.config_hash},
                          {"cached", s.cached},
                          {"seconds", s.seconds},
                          {"result", s.results}});
    }
    std::cerr << spec.id << ": min F^2 = " << csv::number(pot) << (s.cached ? " (cached)" : "") << '\n';
    return 0;
}

int cmd_bound(const Options& o, const std::string& path, const std::string& mode) {
    const ArchSpec spec = load_spec(path);
    if (mode != "per_unit" && mode != "uniform") throw UsageError("--mode must be per_unit or uniform");
    const auto b = chain_lower_bound(spec, mode == "uniform" ? BoundMode::uniform : BoundMode::per_unit);
    emit_json(o, to_json(b));
    std::cerr << spec.id << ": chain bound " << csv::number(b.bound) << '\n';
    return 0;
}

std::vector<ArchSpec> collect_specs(const std::vector<std::string>& inputs) {
    std::vector<ArchSpec> specs;
    for (const auto& in : inputs) {
        const fs::path p(in);
        if (fs::is_directory(p)) {
            std::vector<fs::path> files;
            for (const auto& e : fs::directory_iterator(p))
                if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
            std::sort(files.begin(), files.end());
            for (const auto& f : files) specs.push_back(load_spec(f));
        } else if (p.extension() == ".jsonl") {
            std::istringstream lines(read_file(p));
            std::string line;
            Index n = 0;
            while (std::getline(lines, line)) {
                ++n;
                if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
                try {
                    ArchSpec s = parse_spec(line);
                    if (s.id.empty()) s.id = p.stem().string() + ":" + std::to_string(n);
                    specs.push_back(std::move(s));
                } catch (const SpecError& ex) {
                    throw SpecError("", p.string() + " line " + std::to_string(n) + ": " + ex.what());
                }
            }
        } else {
            specs.push_back(load_spec(p));
        }
    }
    if (specs.empty()) throw UsageError("no specs found");
    return specs;
}

int cmd_rank(const Options& o, const std::vector<std::string>& inputs) {
    const auto specs = collect_specs(inputs);
    auto cfg = minimize_config(o);
    cfg.jobs = 1;
    Runner runner(o);
    std::vector<ScoreRow> rows(specs.size());
    parallel_for(specs.size(), o.jobs, [&](std::size_t i) { rows[i] = score_row(runner, specs[i], cfg); });
    sort_rows(rows);
    Sink sink(o.out);
    if (wants_csv(o, true)) {
        csv::write_ranking(sink.os(), rows);
    } else {
        json arr = json::array();
        for (const auto& r : rows) arr.push_back(to_json(r));
        sink.os() << arr.dump(2) << '\n';
    }
    const auto failed = std::count_if(rows.begin(), rows.end(), [](const ScoreRow& r) { return !r.ok(); });
    std::cerr << "ranked " << rows.size() << " specs";
    if (failed) std::cerr << ", " << failed << " failed";
    std::cerr << '\n';
    return failed == static_cast<long>(rows.size()) ? 2 : 0;
}

std::vector<Index> parse_int_list(const std::string& text, const char* flag) {
    std::vector<Index> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            if (auto dots = item.find(".."); dots != std::string::npos) {
                const Index a = std::stoll(item.substr(0, dots));
                const Index b = std::stoll(item.substr(dots + 2));
                if (b < a) throw UsageError(std::string(flag) + ": empty range " + item);
                for (Index v = a; v <= b; ++v) out.push_back(v);
            } else {
                out.push_back(std::stoll(item));
            }
        } catch (const std::logic_error&) {
            throw UsageError(std::string(flag) + ": cannot parse \"" + item + "\"");
        }
    }
    if (out.empty()) throw UsageError(std::string(flag) + " is empty");
    return out;
}

int cmd_sweep(const Options& o, const std::string& families, const std::string& depths, const std::string& widths,
              std::optional<Index> input_width) {
    std::vector<std::string> fams;
    {
        std::stringstream ss(families);
        std::string f;
        while (std::getline(ss, f, ','))
            if (!f.empty()) fams.push_back(f);
    }
    if (fams.empty()) throw UsageError("--family is empty");
    for (const auto& f : fams) {
        const auto fam = family_from_string(f);
        if (!fam || *fam == Family::custom) throw UsageError("unknown family \"" + f + "\"");
    }
    const auto ds = parse_int_list(depths, "--depths");
    const auto ws = parse_int_list(widths, "--widths");

    struct Cell {
        std::string family;
        Index depth, width;
        ScoreRow row;
    };
    std::vector<Cell> cells;
    for (const auto& f : fams)
        for (auto d : ds)
            for (auto w : ws) cells.push_back({f, d, w, {}});

    auto cfg = minimize_config(o);
    cfg.jobs = 1;
    Runner runner(o);
    parallel_for(cells.size(), o.jobs, [&](std::size_t i) {
        auto& c = cells[i];
        try {
            ArchSpec spec = expand_family(c.family, c.depth, c.width, input_width);
            spec.id = c.family + "-d" + std::to_string(c.depth) + "-w" + std::to_string(c.width);
            c.row = score_row(runner, spec, cfg);
        } catch (const std::exception& ex) {
            c.row.id = c.family + "-d" + std::to_string(c.depth) + "-w" + std::to_string(c.width);
            c.row.error = ex.what();
        }
    });

    Sink sink(o.out);
    if (wants_csv(o, true)) {
        csv::write_row(sink.os(), {"family", "depth", "width", "params", "n_offdiag", "potential", "bound", "seconds",
                                   "status"});
        for (const auto& c : cells)
            csv::write_row(sink.os(), {c.family, std::to_string(c.depth), std::to_string(c.width),
                                       std::to_string(c.row.params), std::to_string(c.row.n_offdiag),
                                       c.row.ok() ? csv::number(c.row.potential) : std::string{},
                                       csv::number(c.row.bound), csv::number(c.row.seconds),
                                       c.row.ok() ? "ok" : "failed"});
    } else {
        json arr = json::array();
        for (const auto& c : cells) {
            json j = to_json(c.row);
            j["family"] = c.family;
            j["depth"] = c.depth;
            j["width"] = c.width;
            j["status"] = c.row.ok() ? "ok" : "failed";
            arr.push_back(j);
        }
        sink.os() << arr.dump(2) << '\n';
    }
    const auto failed = std::count_if(cells.begin(), cells.end(), [](const Cell& c) { return !c.row.ok(); });
    std::cerr << "swept " << cells.size() << " configurations";
    if (failed) std::cerr << ", " << failed << " failed";
    std::cerr << '\n';
    return 0;
}

int cmd_sparse_check(const Options& o, const std::string& path, Index trials, std::optional<double> lambda) {
    ArchSpec spec = load_spec(path);
    if (lambda) {
        spec.lambda = *lambda;
        spec.layer_lambda.clear();
    }
    if (trials < 1) throw UsageError("--trials must be >= 1");
    Index monotone_violations = 0, ordering_violations = 0, unconverged = 0;
    double worst_increase = 0.0, mean_gain = 0.0;
    for (Index t = 0; t < trials; ++t) {
        const auto d = build_dictionary(spec, {}, detail::splitmix64(o.seed) ^ static_cast<std::uint64_t>(t));
        NormalSource normal{o.seed, static_cast<std::uint64_t>(t), 0x78ULL};
        Vector x(d.row_dims.front());
        for (Index i = 0; i < x.size(); ++i) x[i] = normal();
        auto prob = make_problem(d, x);
        const Matrix B = materialize(d);
        const double f_forward = objective(prob, B, stack(forward_pass(d, x)));
        SolveOptions opt;
        opt.max_iters = o.max_iters;
        const auto res = solve_dca(prob, opt);
        bool mono = true;
        for (std::size_t i = 1; i < res.history.size(); ++i) {
            const double inc = res.history[i] - res.history[i - 1];
            if (inc > 0.0) {
                mono = false;
                worst_increase = std::max(worst_increase, inc);
            }
        }
        if (!mono) ++monotone_violations;
        if (res.objective > f_forward) ++ordering_violations;
        if (!res.converged) ++unconverged;
        mean_gain += (f_forward - res.objective) / static_cast<double>(trials);
    }
    const auto rep = evaluate(build_dictionary(spec, {}, o.seed));
    const bool pass = monotone_violations == 0 && ordering_violations == 0;
    emit_json(o, json{{"spec_id", spec.id},
                      {"trials", trials},
                      {"monotone_violations", monotone_violations},
                      {"worst_increase", worst_increase},
                      {"ordering_violations", ordering_violations},
                      {"mean_objective_gain", mean_gain},
                      {"unconverged", unconverged},
                      {"coherence", rep.coherence},
                      {"uniqueness_threshold", uniqueness_threshold(std::min(rep.coherence, 1.0))},
                      {"stability_cap", stability_cap(std::min(rep.coherence, 1.0))},
                      {"pass", pass}});
    std::cerr << spec.id << ": sparse checks " << (pass ? "passed" : "FAILED") << " over " << trials << " trials\n";
    return pass ? 0 : 2;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Score feed-forward architectures by their minimum deep frame potential."};
    app.require_subcommand(1);
    Options o;
    app.add_option("--seed", o.seed, "Random seed for initialization and restarts");
    app.add_option("--jobs", o.jobs, "Worker threads for batch commands")->check(CLI::Range(1u, 1024u));
    app.add_option("--out", o.out, "Write machine-readable output here instead of stdout");
    app.add_option("--format", o.format, "Output format")->check(CLI::IsMember({"json", "csv"}));
    app.add_flag("--no-cache", o.no_cache, "Always recompute; do not read or write the record store");
    app.add_option("--restarts", o.restarts, "Minimizer restarts")->check(CLI::PositiveNumber);
    app.add_option("--max-iters", o.max_iters, "Iteration cap per restart")->check(CLI::PositiveNumber);
    app.add_option("--tol", o.tol, "Relative decrease tolerance over a 100-iteration window")->check(CLI::PositiveNumber);
    app.add_option("--cache-dir", o.cache_dir, "Record store directory");

    std::string spec_path, dict_path, save_dict, mode = "per_unit", families, depths, widths;
    std::vector<std::string> inputs;
    bool magnitude = false;
    Index trials = 100;
    std::optional<Index> input_width;
    std::optional<double> lambda;

    auto spec_arg = [&](CLI::App* sub) { sub->add_option("spec", spec_path, "Spec JSON file")->required(); };

    auto* describe = app.add_subcommand("describe", "Canonical spec, parameter count and N(G)");
    spec_arg(describe);
    auto* gram = app.add_subcommand("gram", "Normalized Gram matrix (CSV, plus |G| companion with --out)");
    spec_arg(gram);
    gram->add_option("--dict", dict_path, "Saved dictionary to use instead of a seeded draw");
    gram->add_flag("--magnitude", magnitude, "Emit |G| instead of G");
    auto* potential = app.add_subcommand("potential", "Frame potential report for one dictionary");
    spec_arg(potential);
    potential->add_option("--dict", dict_path, "Saved dictionary to use instead of a seeded draw");
    auto* minimize = app.add_subcommand("minimize", "Minimize the frame potential of one spec");
    spec_arg(minimize);
    minimize->add_option("--save-dict", save_dict, "Write the best dictionary (JSON + .params.bin sidecar)");
    auto* bound = app.add_subcommand("bound", "Closed-form lower bound for a chain spec");
    spec_arg(bound);
    bound->add_option("--mode", mode, "per_unit (default) or uniform");
    auto* rank = app.add_subcommand("rank", "Minimize and rank many specs");
    rank->add_option("inputs", inputs, "Spec files, directories or JSON-lines files")->required();
    auto* sparse = app.add_subcommand("sparse-check", "Check the sparse coding invariants on random instances");
    spec_arg(sparse);
    sparse->add_option("--trials", trials, "Random instances");
    sparse->add_option("--lambda", lambda, "Override the spec's sparsity weight");
    auto* sweep = app.add_subcommand("sweep", "Potential against parameter count over a family grid");
    sweep->add_option("--family", families, "Comma-separated families (chain, resnet, densenet, ...)")->required();
    sweep->add_option("--depths", depths, "Depths, e.g. 2..10 or 2,4,8")->required();
    sweep->add_option("--widths", widths, "Widths, e.g. 4,8,16")->required();
    sweep->add_option("--input-width", input_width, "Input size (defaults to the width)");
    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }
    if (wants_csv(o, false) && (potential->parsed() || describe->parsed() || bound->parsed() || sparse->parsed())) {
        std::cerr << "error: --format csv is not available for this command\n";
        return 1;
    }

    try {
        if (describe->parsed()) return cmd_describe(o, spec_path);
        if (gram->parsed()) return cmd_gram(o, spec_path, dict_path, magnitude);
        if (potential->parsed()) return cmd_potential(o, spec_path, dict_path);
        if (minimize->parsed()) return cmd_minimize(o, spec_path, save_dict);
        if (bound->parsed()) return cmd_bound(o, spec_path, mode);
        if (rank->parsed()) return cmd_rank(o, inputs);
        if (sparse->parsed()) return cmd_sparse_check(o, spec_path, trials, lambda);
        if (sweep->parsed()) return cmd_sweep(o, families, depths, widths, input_width);
    } catch (const SpecError& e) {
        std::cerr << "error: invalid spec: " << e.what() << '\n';
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
