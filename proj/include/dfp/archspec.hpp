#pragma once

// Declarative architecture descriptions: layer geometry, connectivity, and
// the JSON form they are read from and written to.

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace dfp {

using Index = std::int64_t;
using json = nlohmann::json;

/// Validation failure carrying the JSON path of the offending field.
class SpecError : public std::runtime_error {
public:
    SpecError(std::string path, const std::string& what)
        : std::runtime_error(path.empty() ? what : path + ": " + what), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

enum class GeomKind { dense, conv };
enum class EdgeKind { learned, identity };
enum class Family { chain, residual, dense, custom };

inline const char* to_string(GeomKind k) { return k == GeomKind::dense ? "dense" : "conv"; }
inline const char* to_string(EdgeKind k) { return k == EdgeKind::learned ? "learned" : "identity"; }
inline const char* to_string(Family f) {
    switch (f) {
    case Family::chain: return "chain";
    case Family::residual: return "residual";
    case Family::dense: return "dense";
    case Family::custom: return "custom";
    }
    return "custom";
}

/// Accepts the canonical tags and the "resnet"/"densenet" aliases.
inline std::optional<Family> family_from_string(const std::string& s) {
    if (s == "chain") return Family::chain;
    if (s == "residual" || s == "resnet") return Family::residual;
    if (s == "dense" || s == "densenet") return Family::dense;
    if (s == "custom") return Family::custom;
    return std::nullopt;
}

/// Geometry of one layer's output.
///
/// Convolutional layers are stored in a uniform two-dimensional form: a 1D
/// layer has spatial = {1, n}, kernel = {1, k}, stride = {1, s}. `spatial`
/// is the extent of the layer's *input*; the output extent is spatial / stride.
/// The input layer of a conv network uses in_channels = out_channels, kernel 1
/// and stride 1.
struct LayerGeom {
    GeomKind kind = GeomKind::dense;
    Index units = 0;
    int spatial_dims = 1;
    std::array<Index, 2> spatial{1, 1};
    Index in_channels = 0;
    Index out_channels = 0;
    std::array<Index, 2> kernel{1, 1};
    std::array<Index, 2> stride{1, 1};

    static LayerGeom dense_layer(Index n) {
        LayerGeom g;
        g.kind = GeomKind::dense;
        g.units = n;
        return g;
    }

    static LayerGeom conv_layer(std::vector<Index> spatial, Index in_ch, Index out_ch,
                                std::vector<Index> kernel, std::vector<Index> stride = {}) {
        LayerGeom g;
        g.kind = GeomKind::conv;
        g.spatial_dims = static_cast<int>(spatial.size());
        g.in_channels = in_ch;
        g.out_channels = out_ch;
        if (stride.empty()) stride.assign(spatial.size(), 1);
        if (kernel.size() != spatial.size() || stride.size() != spatial.size() || spatial.empty() ||
            spatial.size() > 2)
            throw SpecError("", "conv geometry needs 1 or 2 matching spatial/kernel/stride dims");
        const std::size_t off = 2 - spatial.size();
        for (std::size_t d = 0; d < spatial.size(); ++d) {
            g.spatial[off + d] = spatial[d];
            g.kernel[off + d] = kernel[d];
            g.stride[off + d] = stride[d];
        }
        return g;
    }

    static LayerGeom conv_input(std::vector<Index> spatial, Index channels) {
        return conv_layer(spatial, channels, channels, std::vector<Index>(spatial.size(), 1));
    }

    std::array<Index, 2> out_spatial() const {
        return {spatial[0] / stride[0], spatial[1] / stride[1]};
    }
    Index out_positions() const {
        const auto o = out_spatial();
        return o[0] * o[1];
    }
    Index in_positions() const { return spatial[0] * spatial[1]; }
    Index kernel_volume() const { return kernel[0] * kernel[1]; }

    /// Number of atoms (columns) this layer contributes.
    Index unit_count() const { return kind == GeomKind::dense ? units : out_channels * out_positions(); }

    /// Channel count of the layer output (dense layers count as one channel).
    Index channels() const { return kind == GeomKind::dense ? 1 : out_channels; }

    bool operator==(const LayerGeom&) const = default;
};

struct Edge {
    Index src = 0;
    Index dst = 1;
    EdgeKind kind = EdgeKind::learned;
    auto operator<=>(const Edge&) const = default;
};

/// Canonical architecture description. Layer 0 is the input.
struct ArchSpec {
    std::string id;
    Family family = Family::custom;
    LayerGeom input;
    std::vector<LayerGeom> layers;
    std::vector<Edge> edges; // sorted by (dst, src)
    double lambda = 0.0;
    std::vector<double> layer_lambda; // optional per-layer override, empty = use lambda

    Index depth() const { return static_cast<Index>(layers.size()); }

    const LayerGeom& geom(Index layer) const { return layer == 0 ? input : layers[layer - 1]; }

    /// k_j for j = 0..l.
    std::vector<Index> widths() const {
        std::vector<Index> w{input.unit_count()};
        for (const auto& g : layers) w.push_back(g.unit_count());
        return w;
    }

    std::vector<Edge> in_edges(Index dst) const {
        std::vector<Edge> out;
        for (const auto& e : edges)
            if (e.dst == dst) out.push_back(e);
        return out;
    }

    double lambda_for(Index layer) const {
        if (!layer_lambda.empty()) return layer_lambda.at(layer - 1);
        return lambda;
    }

    bool operator==(const ArchSpec&) const = default;
};

namespace detail {

inline bool is_chain_edges(const std::vector<Edge>& edges, Index depth) {
    if (static_cast<Index>(edges.size()) != depth) return false;
    for (Index j = 1; j <= depth; ++j) {
        const auto& e = edges[j - 1];
        if (e.src != j - 1 || e.dst != j || e.kind != EdgeKind::learned) return false;
    }
    return true;
}

inline void sort_edges(std::vector<Edge>& edges) {
    std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
        return std::pair(a.dst, a.src) < std::pair(b.dst, b.src);
    });
}

inline void check_geom(const LayerGeom& g, const std::string& path, bool is_input) {
    if (g.kind == GeomKind::dense) {
        if (g.units < 1) throw SpecError(path + ".units", "must be >= 1");
        return;
    }
    if (g.in_channels < 1) throw SpecError(path + ".in_channels", "must be >= 1");
    if (g.out_channels < 1) throw SpecError(path + ".out_channels", "must be >= 1");
    for (int d = 0; d < 2; ++d) {
        if (g.spatial[d] < 1) throw SpecError(path + ".spatial", "extent must be >= 1");
        if (g.kernel[d] < 1 || g.kernel[d] % 2 == 0) throw SpecError(path + ".kernel", "extent must be odd");
        if (g.kernel[d] > g.spatial[d]) throw SpecError(path + ".kernel", "extent exceeds spatial extent");
        if (g.stride[d] < 1) throw SpecError(path + ".stride", "must be >= 1");
        if (g.spatial[d] % g.stride[d] != 0) throw SpecError(path + ".stride", "must divide spatial extent");
    }
    if (is_input && (g.kernel_volume() != 1 || g.stride[0] != 1 || g.stride[1] != 1))
        throw SpecError(path, "input geometry takes no kernel or stride");
}

/// Geometric compatibility of a learned edge into a conv layer.
inline void check_conv_edge(const ArchSpec& s, const Edge& e, const std::string& path) {
    const LayerGeom& dst = s.geom(e.dst);
    const LayerGeom& src = s.geom(e.src);
    if (src.kind == GeomKind::conv) {
        if (src.out_channels != dst.in_channels)
            throw SpecError(path, "source channels " + std::to_string(src.out_channels) +
                                      " != destination in_channels " + std::to_string(dst.in_channels));
        if (src.out_spatial() != dst.spatial)
            throw SpecError(path, "source output extent does not match destination spatial extent");
    } else if (src.unit_count() != dst.in_channels * dst.in_positions()) {
        throw SpecError(path, "dense source units do not match destination in_channels x spatial");
    }
}

} // namespace detail

/// Checks every structural invariant and canonicalizes the family tag and
/// edge order in place.
inline void validate(ArchSpec& s) {
    detail::check_geom(s.input, "input", true);
    if (s.layers.empty()) throw SpecError("layers", "at least one layer required");
    for (std::size_t j = 0; j < s.layers.size(); ++j)
        detail::check_geom(s.layers[j], "layers[" + std::to_string(j) + "]", false);

    const Index l = s.depth();
    std::set<std::pair<Index, Index>> seen;
    for (std::size_t i = 0; i < s.edges.size(); ++i) {
        const Edge& e = s.edges[i];
        const std::string p = "edges[" + std::to_string(i) + "]";
        if (e.src < 0 || e.src > l) throw SpecError(p + ".src", "dangling layer index " + std::to_string(e.src));
        if (e.dst < 0 || e.dst > l) throw SpecError(p + ".dst", "dangling layer index " + std::to_string(e.dst));
        if (e.src >= e.dst) throw SpecError(p, "edge is not feed-forward (src must be < dst)");
        if (!seen.insert({e.src, e.dst}).second) throw SpecError(p, "duplicate edge");
        if (e.kind == EdgeKind::identity) {
            if (s.geom(e.src).unit_count() != s.geom(e.dst).unit_count())
                throw SpecError(p + ".kind", "identity edge joins layers of different dimension (" +
                                                 std::to_string(s.geom(e.src).unit_count()) + " vs " +
                                                 std::to_string(s.geom(e.dst).unit_count()) + ")");
        } else if (s.geom(e.dst).kind == GeomKind::conv) {
            detail::check_conv_edge(s, e, p);
        }
    }
    for (Index j = 1; j <= l; ++j) {
        const bool has_in = std::any_of(s.edges.begin(), s.edges.end(), [j](const Edge& e) { return e.dst == j; });
        if (!has_in) throw SpecError("edges", "layer " + std::to_string(j) + " has no incoming edge");
    }
    if (s.lambda < 0.0) throw SpecError("lambda", "must be nonnegative");
    if (!s.layer_lambda.empty()) {
        if (static_cast<Index>(s.layer_lambda.size()) != l)
            throw SpecError("layer_lambda", "needs one entry per layer");
        for (double v : s.layer_lambda)
            if (v < 0.0) throw SpecError("layer_lambda", "must be nonnegative");
    }

    detail::sort_edges(s.edges);
    const bool chain_edges = detail::is_chain_edges(s.edges, l);
    if (s.family == Family::chain && !chain_edges)
        throw SpecError("edges", "family \"chain\" requires exactly the learned edges (j-1, j)");
    if (chain_edges) s.family = Family::chain;
}

inline std::vector<Edge> chain_edges(Index depth) {
    std::vector<Edge> e;
    for (Index j = 1; j <= depth; ++j) e.push_back({j - 1, j, EdgeKind::learned});
    return e;
}

/// Chain edges plus an identity skip (j-1 -> j+1) for every even j < depth.
inline std::vector<Edge> residual_edges(Index depth) {
    auto e = chain_edges(depth);
    for (Index j = 2; j < depth; j += 2) e.push_back({j - 1, j + 1, EdgeKind::identity});
    detail::sort_edges(e);
    return e;
}

/// Every earlier layer, the input included, feeds every later one.
inline std::vector<Edge> dense_edges(Index depth) {
    std::vector<Edge> e;
    for (Index d = 1; d <= depth; ++d)
        for (Index s = 0; s < d; ++s) e.push_back({s, d, EdgeKind::learned});
    return e;
}

/// Builds a validated spec from a width list (widths[0] is the input size).
inline ArchSpec spec_from_widths(Family family, const std::vector<Index>& widths) {
    if (widths.size() < 2) throw SpecError("widths", "need an input width and at least one layer");
    ArchSpec s;
    s.family = family;
    s.input = LayerGeom::dense_layer(widths[0]);
    for (std::size_t j = 1; j < widths.size(); ++j) s.layers.push_back(LayerGeom::dense_layer(widths[j]));
    const Index l = s.depth();
    switch (family) {
    case Family::chain: s.edges = chain_edges(l); break;
    case Family::residual: s.edges = residual_edges(l); break;
    case Family::dense: s.edges = dense_edges(l); break;
    case Family::custom: throw SpecError("family", "custom specs need explicit layers and edges");
    }
    validate(s);
    return s;
}

/// Deterministic family generator. The input width defaults to `width`.
inline ArchSpec expand_family(Family family, Index depth, Index width, std::optional<Index> input_width = {}) {
    if (depth < 1) throw SpecError("depth", "must be >= 1");
    if (width < 1) throw SpecError("width", "must be >= 1");
    std::vector<Index> w(static_cast<std::size_t>(depth) + 1, width);
    w[0] = input_width.value_or(width);
    return spec_from_widths(family, w);
}

inline ArchSpec expand_family(const std::string& family, Index depth, Index width,
                              std::optional<Index> input_width = {}) {
    auto f = family_from_string(family);
    if (!f || *f == Family::custom) throw SpecError("family", "unknown family \"" + family + "\"");
    return expand_family(*f, depth, width, input_width);
}

/// Free parameters of one learned edge.
inline Index edge_param_count(const ArchSpec& s, const Edge& e) {
    if (e.kind == EdgeKind::identity) return 0;
    const LayerGeom& dst = s.geom(e.dst);
    if (dst.kind == GeomKind::conv) return dst.kernel_volume() * dst.in_channels * dst.out_channels;
    return s.geom(e.src).unit_count() * dst.unit_count();
}

inline Index param_count(const ArchSpec& s) {
    Index total = 0;
    for (const auto& e : s.edges) total += edge_param_count(s, e);
    return total;
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

template <class T>
T get_field(const json& j, const char* key, const std::string& path) {
    if (!j.contains(key)) throw SpecError(path + "." + key, "missing field");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& ex) {
        throw SpecError(path + "." + key, std::string("wrong type: ") + ex.what());
    }
}

inline std::vector<Index> get_dims(const json& j, const char* key, const std::string& path, std::size_t want,
                                   Index fallback) {
    if (!j.contains(key)) {
        if (fallback > 0) return std::vector<Index>(want, fallback);
        throw SpecError(path + "." + key, "missing field");
    }
    const json& v = j.at(key);
    std::vector<Index> out;
    if (v.is_number_integer()) {
        out.assign(want, v.get<Index>());
    } else if (v.is_array()) {
        for (const auto& x : v) {
            if (!x.is_number_integer()) throw SpecError(path + "." + key, "expected integers");
            out.push_back(x.get<Index>());
        }
    } else {
        throw SpecError(path + "." + key, "expected an integer or integer array");
    }
    if (want && out.size() != want) throw SpecError(path + "." + key, "expected " + std::to_string(want) + " dims");
    return out;
}

inline LayerGeom geom_from_json(const json& j, const std::string& path, bool is_input) {
    if (!j.is_object()) throw SpecError(path, "expected an object");
    const auto kind = j.value("kind", std::string("dense"));
    if (kind == "dense") return LayerGeom::dense_layer(get_field<Index>(j, "units", path));
    if (kind != "conv") throw SpecError(path + ".kind", "expected \"dense\" or \"conv\"");
    const auto spatial = get_dims(j, "spatial", path, 0, 0);
    if (spatial.empty() || spatial.size() > 2) throw SpecError(path + ".spatial", "expected 1 or 2 dims");
    if (is_input) {
        const Index ch = j.contains("channels") ? get_field<Index>(j, "channels", path)
                                                : get_field<Index>(j, "out_channels", path);
        return LayerGeom::conv_input(spatial, ch);
    }
    const auto kernel = get_dims(j, "kernel", path, spatial.size(), 0);
    const auto stride = get_dims(j, "stride", path, spatial.size(), 1);
    return LayerGeom::conv_layer(spatial, get_field<Index>(j, "in_channels", path),
                                 get_field<Index>(j, "out_channels", path), kernel, stride);
}

inline json dims_to_json(const LayerGeom& g, const std::array<Index, 2>& a) {
    json out = json::array();
    for (int d = 2 - g.spatial_dims; d < 2; ++d) out.push_back(a[d]);
    return out;
}

} // namespace detail

inline json geom_to_json(const LayerGeom& g, bool is_input) {
    if (g.kind == GeomKind::dense) return json{{"kind", "dense"}, {"units", g.units}};
    if (is_input)
        return json{{"kind", "conv"}, {"spatial", detail::dims_to_json(g, g.spatial)}, {"channels", g.out_channels}};
    return json{{"kind", "conv"},
                {"spatial", detail::dims_to_json(g, g.spatial)},
                {"in_channels", g.in_channels},
                {"out_channels", g.out_channels},
                {"kernel", detail::dims_to_json(g, g.kernel)},
                {"stride", detail::dims_to_json(g, g.stride)}};
}

/// Canonical JSON: always explicit layers and edges, fixed key order.
inline json to_json(const ArchSpec& s) {
    json j;
    if (!s.id.empty()) j["id"] = s.id;
    j["family"] = to_string(s.family);
    j["input"] = geom_to_json(s.input, true);
    j["layers"] = json::array();
    for (const auto& g : s.layers) j["layers"].push_back(geom_to_json(g, false));
    j["edges"] = json::array();
    for (const auto& e : s.edges) j["edges"].push_back({{"src", e.src}, {"dst", e.dst}, {"kind", to_string(e.kind)}});
    j["lambda"] = s.lambda;
    if (!s.layer_lambda.empty()) j["layer_lambda"] = s.layer_lambda;
    return j;
}

inline ArchSpec spec_from_json(const json& j) {
    if (!j.is_object()) throw SpecError("", "spec must be a JSON object");
    const auto fam_name = j.value("family", std::string("custom"));
    const auto fam = family_from_string(fam_name);
    if (!fam) throw SpecError("family", "unknown family \"" + fam_name + "\"");

    ArchSpec s;
    const bool explicit_layers = j.contains("layers");
    if (!explicit_layers) {
        // Shorthand: widths, or depth + width (+ optional dense input).
        if (*fam == Family::custom) throw SpecError("layers", "custom specs need explicit layers and edges");
        if (j.contains("widths")) {
            const auto w = detail::get_dims(j, "widths", "", 0, 0);
            for (std::size_t i = 0; i < w.size(); ++i)
                if (w[i] < 1) throw SpecError("widths[" + std::to_string(i) + "]", "must be >= 1");
            s = spec_from_widths(*fam, w);
        } else {
            const auto depth = detail::get_field<Index>(j, "depth", "");
            const auto width = detail::get_field<Index>(j, "width", "");
            std::optional<Index> in;
            if (j.contains("input")) {
                const auto g = detail::geom_from_json(j.at("input"), "input", true);
                if (g.kind != GeomKind::dense) throw SpecError("input", "shorthand families take a dense input");
                in = g.units;
            }
            s = expand_family(*fam, depth, width, in);
        }
    } else {
        s.family = *fam;
        if (!j.contains("input")) throw SpecError("input", "missing field");
        s.input = detail::geom_from_json(j.at("input"), "input", true);
        const json& layers = j.at("layers");
        if (!layers.is_array()) throw SpecError("layers", "expected an array");
        for (std::size_t i = 0; i < layers.size(); ++i)
            s.layers.push_back(detail::geom_from_json(layers[i], "layers[" + std::to_string(i) + "]", false));
        if (j.contains("edges")) {
            const json& edges = j.at("edges");
            if (!edges.is_array()) throw SpecError("edges", "expected an array");
            for (std::size_t i = 0; i < edges.size(); ++i) {
                const std::string p = "edges[" + std::to_string(i) + "]";
                Edge e;
                e.src = detail::get_field<Index>(edges[i], "src", p);
                e.dst = detail::get_field<Index>(edges[i], "dst", p);
                const auto kind = edges[i].value("kind", std::string("learned"));
                if (kind == "learned") e.kind = EdgeKind::learned;
                else if (kind == "identity") e.kind = EdgeKind::identity;
                else throw SpecError(p + ".kind", "expected \"learned\" or \"identity\"");
                s.edges.push_back(e);
            }
        } else {
            switch (*fam) {
            case Family::chain: s.edges = chain_edges(s.depth()); break;
            case Family::residual: s.edges = residual_edges(s.depth()); break;
            case Family::dense: s.edges = dense_edges(s.depth()); break;
            case Family::custom: throw SpecError("edges", "custom specs need explicit edges");
            }
        }
    }
    if (j.contains("id")) s.id = detail::get_field<std::string>(j, "id", "");
    if (j.contains("lambda")) s.lambda = detail::get_field<double>(j, "lambda", "");
    if (j.contains("layer_lambda")) s.layer_lambda = detail::get_field<std::vector<double>>(j, "layer_lambda", "");
    validate(s);
    return s;
}

/// Parses a JSON document; malformed text is reported as a SpecError at the root.
inline ArchSpec parse_spec(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& ex) {
        throw SpecError("", std::string("malformed JSON: ") + ex.what());
    }
    return spec_from_json(j);
}

inline std::string serialize(const ArchSpec& s) { return to_json(s).dump(); }

} // namespace dfp
