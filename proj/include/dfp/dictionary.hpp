#pragma once

// The architecture-induced block dictionary.
//
// Row block r reconstructs the activations of layer r (r = 0 is the input x),
// column block c holds the atoms of layer c+1. A learned or identity edge
// (s, d) occupies block (s, d-1); every column block c < l-1 also carries a
// fixed -I in row block c+1 that ties layer c+1 to its own reconstruction.
// For a chain this is the bidiagonal layout
//
//     [ B1   0   0 ]
//     [ -I  B2   0 ]
//     [  0  -I  B3 ]
//
// and skip edges add blocks above the diagonal. Layered thresholding over this
// system is the usual forward pass w_d = relu(sum_s W_sd^T w_s - lambda).

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "archspec.hpp"
#include "random.hpp"

namespace dfp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

/// A global dictionary column with no mass; normalization is undefined.
class ZeroColumnError : public std::runtime_error {
public:
    ZeroColumnError(Index layer, Index unit)
        : std::runtime_error("zero column at layer " + std::to_string(layer) + ", unit " + std::to_string(unit)),
          layer_(layer), unit_(unit) {}
    Index layer() const noexcept { return layer_; }
    Index unit() const noexcept { return unit_; }

private:
    Index layer_;
    Index unit_;
};

class CapacityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr Index default_materialize_cap = 10'000'000;

enum class BlockKind { learned_dense, learned_conv, identity, neg_identity, zero };

inline const char* to_string(BlockKind k) {
    switch (k) {
    case BlockKind::learned_dense: return "learned_dense";
    case BlockKind::learned_conv: return "learned_conv";
    case BlockKind::identity: return "identity";
    case BlockKind::neg_identity: return "neg_identity";
    case BlockKind::zero: return "zero";
    }
    return "zero";
}

/// Geometry of a circular, possibly strided, transposed-convolution block.
///
/// Column (co, qy, qx) is the atom of output channel co at output position
/// (qy, qx). Tap (ky, kx) of its filter for input channel ci lands on row
/// (ci, (qy*sy + hy - ky) mod H, (qx*sx + hx - kx) mod W) with h = (k-1)/2,
/// so B^T x is a circular convolution sampled at the stride.
struct ConvShape {
    Index in_channels = 1;
    Index out_channels = 1;
    std::array<Index, 2> extent{1, 1};
    std::array<Index, 2> kernel{1, 1};
    std::array<Index, 2> stride{1, 1};

    std::array<Index, 2> out_extent() const { return {extent[0] / stride[0], extent[1] / stride[1]}; }
    Index in_positions() const { return extent[0] * extent[1]; }
    Index out_positions() const { return out_extent()[0] * out_extent()[1]; }
    Index rows() const { return in_channels * in_positions(); }
    Index cols() const { return out_channels * out_positions(); }
    Index taps() const { return kernel[0] * kernel[1]; }
    Index filter_size() const { return out_channels * in_channels * taps(); }

    Index filter_index(Index co, Index ci, Index ky, Index kx) const {
        return ((co * in_channels + ci) * kernel[0] + ky) * kernel[1] + kx;
    }
    Index col_of(Index co, Index qy, Index qx) const {
        const auto o = out_extent();
        return (co * o[0] + qy) * o[1] + qx;
    }
    Index row_of(Index ci, Index qy, Index qx, Index ky, Index kx) const {
        const Index y = wrap(qy * stride[0] + (kernel[0] - 1) / 2 - ky, extent[0]);
        const Index x = wrap(qx * stride[1] + (kernel[1] - 1) / 2 - kx, extent[1]);
        return (ci * extent[0] + y) * extent[1] + x;
    }
    static Index wrap(Index v, Index n) {
        const Index m = v % n;
        return m < 0 ? m + n : m;
    }

    bool operator==(const ConvShape&) const = default;
};

/// One block of the grid. Learned blocks own their parameters.
struct Block {
    BlockKind kind = BlockKind::zero;
    Index row = 0;
    Index col = 0;
    Index rows = 0;
    Index cols = 0;
    Matrix weights;             // learned_dense, rows x cols
    ConvShape conv;             // learned_conv
    std::vector<double> filter; // learned_conv, (co, ci, ky, kx) order
    Index param_offset = 0;

    bool learned() const { return kind == BlockKind::learned_dense || kind == BlockKind::learned_conv; }
    bool fixed_identity() const { return kind == BlockKind::identity || kind == BlockKind::neg_identity; }

    Index param_size() const {
        switch (kind) {
        case BlockKind::learned_dense: return rows * cols;
        case BlockKind::learned_conv: return conv.filter_size();
        default: return 0;
        }
    }

    double identity_sign() const { return kind == BlockKind::neg_identity ? -1.0 : 1.0; }

    /// Fan-in of the forward map B^T restricted to this block.
    Index fan_in() const { return kind == BlockKind::learned_conv ? conv.in_channels * conv.taps() : rows; }

    template <class Visit>
    void for_each_conv_entry(Visit&& visit) const {
        const auto o = conv.out_extent();
        for (Index co = 0; co < conv.out_channels; ++co)
            for (Index qy = 0; qy < o[0]; ++qy)
                for (Index qx = 0; qx < o[1]; ++qx) {
                    const Index c = conv.col_of(co, qy, qx);
                    for (Index ci = 0; ci < conv.in_channels; ++ci)
                        for (Index ky = 0; ky < conv.kernel[0]; ++ky)
                            for (Index kx = 0; kx < conv.kernel[1]; ++kx)
                                visit(conv.row_of(ci, qy, qx, ky, kx), c, conv.filter_index(co, ci, ky, kx));
                }
    }

    /// Block value in sparse form. With `pattern` every structural slot is 1.
    SparseMatrix sparse(bool pattern = false) const {
        SparseMatrix out(rows, cols);
        std::vector<Eigen::Triplet<double>> trips;
        switch (kind) {
        case BlockKind::learned_dense:
            trips.reserve(static_cast<std::size_t>(rows * cols));
            for (Index c = 0; c < cols; ++c)
                for (Index r = 0; r < rows; ++r) trips.emplace_back(r, c, pattern ? 1.0 : weights(r, c));
            break;
        case BlockKind::learned_conv:
            trips.reserve(static_cast<std::size_t>(conv.cols() * conv.in_channels * conv.taps()));
            for_each_conv_entry([&](Index r, Index c, Index f) { trips.emplace_back(r, c, pattern ? 1.0 : filter[f]); });
            break;
        case BlockKind::identity:
        case BlockKind::neg_identity:
            for (Index i = 0; i < rows; ++i) trips.emplace_back(i, i, pattern ? 1.0 : identity_sign());
            break;
        case BlockKind::zero: break;
        }
        out.setFromTriplets(trips.begin(), trips.end());
        return out;
    }

    Matrix dense() const {
        if (kind == BlockKind::learned_dense) return weights;
        return Matrix(sparse());
    }

    /// Squared norm of every column of this block.
    Vector col_sq_norms() const {
        switch (kind) {
        case BlockKind::learned_dense: return weights.colwise().squaredNorm().transpose();
        case BlockKind::learned_conv: {
            // Taps of one atom land on distinct rows (kernel <= extent), so
            // every spatial shift shares its channel's filter norm.
            Vector out(cols);
            const Index per = conv.in_channels * conv.taps();
            const Index pos = conv.out_positions();
            for (Index co = 0; co < conv.out_channels; ++co) {
                double s = 0.0;
                for (Index i = 0; i < per; ++i) s += filter[co * per + i] * filter[co * per + i];
                out.segment(co * pos, pos).setConstant(s);
            }
            return out;
        }
        case BlockKind::identity:
        case BlockKind::neg_identity: return Vector::Ones(cols);
        case BlockKind::zero: return Vector::Zero(cols);
        }
        return Vector::Zero(cols);
    }

    bool operator==(const Block& o) const {
        return kind == o.kind && row == o.row && col == o.col && rows == o.rows && cols == o.cols &&
               weights == o.weights && conv == o.conv && filter == o.filter && param_offset == o.param_offset;
    }
};

struct InitPolicy {
    enum class Kind { gaussian_fan_in, gaussian } kind = Kind::gaussian_fan_in;
    double scale = 1.0;

    double stddev(const Block& b) const {
        if (kind == Kind::gaussian) return scale;
        return scale / std::sqrt(static_cast<double>(b.fan_in()));
    }
};

struct BlockDictionary {
    ArchSpec spec;
    std::vector<Index> row_dims; // k_0 .. k_{l-1}
    std::vector<Index> col_dims; // k_1 .. k_l
    std::vector<Block> blocks;   // sorted by (row, col)
    Index structural_offdiag = 0;
    double lambda = 0.0;

    Index depth() const { return static_cast<Index>(col_dims.size()); }
    Index total_rows() const { return sum(row_dims); }
    Index total_cols() const { return sum(col_dims); }
    Index param_count() const {
        Index n = 0;
        for (const auto& b : blocks) n += b.param_size();
        return n;
    }
    std::vector<Index> row_offsets() const { return offsets(row_dims); }
    std::vector<Index> col_offsets() const { return offsets(col_dims); }

    const Block* at(Index r, Index c) const {
        for (const auto& b : blocks)
            if (b.row == r && b.col == c) return &b;
        return nullptr;
    }

    bool operator==(const BlockDictionary&) const = default;

private:
    static Index sum(const std::vector<Index>& v) { return std::accumulate(v.begin(), v.end(), Index{0}); }
    static std::vector<Index> offsets(const std::vector<Index>& v) {
        std::vector<Index> o{0};
        for (auto x : v) o.push_back(o.back() + x);
        return o;
    }
};

namespace detail {

inline Block learned_block(const ArchSpec& spec, const Edge& e) {
    const LayerGeom& dst = spec.geom(e.dst);
    Block b;
    b.row = e.src;
    b.col = e.dst - 1;
    b.rows = spec.geom(e.src).unit_count();
    b.cols = dst.unit_count();
    if (dst.kind == GeomKind::conv) {
        b.kind = BlockKind::learned_conv;
        b.conv.in_channels = dst.in_channels;
        b.conv.out_channels = dst.out_channels;
        b.conv.extent = dst.spatial;
        b.conv.kernel = dst.kernel;
        b.conv.stride = dst.stride;
        b.filter.assign(static_cast<std::size_t>(b.conv.filter_size()), 0.0);
    } else {
        b.kind = BlockKind::learned_dense;
        b.weights = Matrix::Zero(b.rows, b.cols);
    }
    return b;
}

/// Structural count of nonzero off-diagonal Gram entries: two atoms interact
/// when their supports share a row in some row block.
inline Index structural_offdiag(const BlockDictionary& d) {
    const Index l = d.depth();
    std::vector<SparseMatrix> patterns;
    patterns.reserve(d.blocks.size());
    for (const auto& b : d.blocks) patterns.push_back(b.sparse(true));
    Index count = 0;
    for (Index a = 0; a < l; ++a)
        for (Index c = a; c < l; ++c) {
            Matrix overlap = Matrix::Zero(d.col_dims[a], d.col_dims[c]);
            bool any = false;
            for (std::size_t i = 0; i < d.blocks.size(); ++i) {
                if (d.blocks[i].col != a) continue;
                for (std::size_t k = 0; k < d.blocks.size(); ++k) {
                    if (d.blocks[k].col != c || d.blocks[k].row != d.blocks[i].row) continue;
                    overlap += Matrix(patterns[i].transpose() * patterns[k]);
                    any = true;
                }
            }
            if (!any) continue;
            Index nz = (overlap.array() > 0.0).count();
            if (a == c) nz -= (overlap.diagonal().array() > 0.0).count();
            count += a == c ? nz : 2 * nz;
        }
    return count;
}

} // namespace detail

/// Block grid for a validated spec with all learned payloads zero.
inline BlockDictionary build_structure(const ArchSpec& spec) {
    BlockDictionary d;
    d.spec = spec;
    d.lambda = spec.lambda;
    const auto k = spec.widths();
    const Index l = spec.depth();
    d.row_dims.assign(k.begin(), k.end() - 1);
    d.col_dims.assign(k.begin() + 1, k.end());

    for (const auto& e : spec.edges) {
        if (e.kind == EdgeKind::learned) {
            d.blocks.push_back(detail::learned_block(spec, e));
        } else {
            Block b;
            b.kind = BlockKind::identity;
            b.row = e.src;
            b.col = e.dst - 1;
            b.rows = b.cols = k[e.src];
            d.blocks.push_back(b);
        }
    }
    for (Index s = 1; s < l; ++s) {
        Block b;
        b.kind = BlockKind::neg_identity;
        b.row = s;
        b.col = s - 1;
        b.rows = b.cols = k[s];
        d.blocks.push_back(b);
    }
    std::sort(d.blocks.begin(), d.blocks.end(),
              [](const Block& a, const Block& b) { return std::pair(a.row, a.col) < std::pair(b.row, b.col); });
    Index off = 0;
    for (auto& b : d.blocks) {
        b.param_offset = off;
        off += b.param_size();
    }
    d.structural_offdiag = detail::structural_offdiag(d);
    return d;
}

/// Builds the dictionary with learned payloads drawn from `init`; the draw
/// for each block is seeded by (seed, block position), so the result depends
/// only on (spec, init, seed).
inline BlockDictionary build_dictionary(const ArchSpec& spec, const InitPolicy& init = {}, std::uint64_t seed = 0) {
    BlockDictionary d = build_structure(spec);
    for (auto& b : d.blocks) {
        if (!b.learned()) continue;
        NormalSource normal{seed, static_cast<std::uint64_t>(b.row), static_cast<std::uint64_t>(b.col)};
        const double sd = init.stddev(b);
        if (b.kind == BlockKind::learned_dense) {
            for (Index r = 0; r < b.rows; ++r)
                for (Index c = 0; c < b.cols; ++c) b.weights(r, c) = sd * normal();
        } else {
            for (auto& v : b.filter) v = sd * normal();
        }
    }
    return d;
}

inline Matrix materialize(const BlockDictionary& d, Index cap = default_materialize_cap) {
    const Index rows = d.total_rows();
    const Index cols = d.total_cols();
    if (rows * cols > cap)
        throw CapacityError("materializing " + std::to_string(rows) + "x" + std::to_string(cols) +
                            " exceeds the cap of " + std::to_string(cap) + " entries");
    const auto ro = d.row_offsets();
    const auto co = d.col_offsets();
    Matrix out = Matrix::Zero(rows, cols);
    for (const auto& b : d.blocks) out.block(ro[b.row], co[b.col], b.rows, b.cols) = b.dense();
    return out;
}

/// Learned parameters in grid order; dense payloads row-major, conv filters
/// in (co, ci, ky, kx) order.
inline Vector flatten_params(const BlockDictionary& d) {
    Vector v(d.param_count());
    for (const auto& b : d.blocks) {
        if (b.kind == BlockKind::learned_dense) {
            for (Index r = 0; r < b.rows; ++r)
                for (Index c = 0; c < b.cols; ++c) v[b.param_offset + r * b.cols + c] = b.weights(r, c);
        } else if (b.kind == BlockKind::learned_conv) {
            for (std::size_t i = 0; i < b.filter.size(); ++i) v[b.param_offset + static_cast<Index>(i)] = b.filter[i];
        }
    }
    return v;
}

namespace detail {

inline void assign_params(BlockDictionary& d, std::span<const double> v) {
    if (static_cast<Index>(v.size()) != d.param_count())
        throw std::invalid_argument("parameter vector has length " + std::to_string(v.size()) + ", expected " +
                                    std::to_string(d.param_count()));
    for (auto& b : d.blocks) {
        if (b.kind == BlockKind::learned_dense) {
            for (Index r = 0; r < b.rows; ++r)
                for (Index c = 0; c < b.cols; ++c) b.weights(r, c) = v[b.param_offset + r * b.cols + c];
        } else if (b.kind == BlockKind::learned_conv) {
            std::copy_n(v.begin() + b.param_offset, b.filter.size(), b.filter.begin());
        }
    }
}

} // namespace detail

inline BlockDictionary load_params(const BlockDictionary& d, std::span<const double> v) {
    BlockDictionary out = d;
    detail::assign_params(out, v);
    return out;
}

inline BlockDictionary load_params(const BlockDictionary& d, const Vector& v) {
    return load_params(d, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

// ---------------------------------------------------------------------------
// Serialization: grid metadata as JSON, parameters in a little-endian float64
// sidecar named by the "params_file" field.

inline json dictionary_to_json(const BlockDictionary& d, const std::string& params_file) {
    json blocks = json::array();
    for (const auto& b : d.blocks)
        blocks.push_back({{"row", b.row},
                          {"col", b.col},
                          {"kind", to_string(b.kind)},
                          {"rows", b.rows},
                          {"cols", b.cols},
                          {"offset", b.param_offset},
                          {"size", b.param_size()}});
    return json{{"spec", to_json(d.spec)},
                {"row_dims", d.row_dims},
                {"col_dims", d.col_dims},
                {"lambda", d.lambda},
                {"blocks", blocks},
                {"param_count", d.param_count()},
                {"params_file", params_file},
                {"params_format", "f64le"}};
}

inline void write_f64le(const std::filesystem::path& path, const Vector& v) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (Index i = 0; i < v.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(v[i]);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        char buf[8];
        std::memcpy(buf, &bits, 8);
        out.write(buf, 8);
    }
}

inline Vector read_f64le(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    const auto bytes = static_cast<Index>(in.tellg());
    if (bytes % 8 != 0) throw std::runtime_error(path.string() + ": size is not a multiple of 8");
    in.seekg(0);
    Vector v(bytes / 8);
    for (Index i = 0; i < v.size(); ++i) {
        char buf[8];
        in.read(buf, 8);
        std::uint64_t bits;
        std::memcpy(&bits, buf, 8);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        v[i] = std::bit_cast<double>(bits);
    }
    return v;
}

/// Writes `json_path` and its parameter sidecar next to it.
inline void save_dictionary(const BlockDictionary& d, const std::filesystem::path& json_path) {
    auto sidecar = json_path;
    sidecar.replace_extension(".params.bin");
    write_f64le(sidecar, flatten_params(d));
    std::ofstream out(json_path);
    if (!out) throw std::runtime_error("cannot write " + json_path.string());
    out << dictionary_to_json(d, sidecar.filename().string()).dump(2) << '\n';
}

inline BlockDictionary load_dictionary(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in) throw std::runtime_error("cannot read " + json_path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& ex) {
        throw SpecError("", std::string("malformed dictionary JSON: ") + ex.what());
    }
    ArchSpec spec = spec_from_json(j.at("spec"));
    BlockDictionary d = build_structure(spec);
    d.lambda = j.value("lambda", spec.lambda);
    const auto& meta = j.at("blocks");
    if (meta.size() != d.blocks.size()) throw SpecError("blocks", "block grid does not match the spec");
    for (std::size_t i = 0; i < meta.size(); ++i) {
        const auto& b = d.blocks[i];
        if (meta[i].at("row").get<Index>() != b.row || meta[i].at("col").get<Index>() != b.col ||
            meta[i].at("kind").get<std::string>() != to_string(b.kind))
            throw SpecError("blocks[" + std::to_string(i) + "]", "block metadata does not match the spec");
    }
    const Vector v = read_f64le(json_path.parent_path() / j.at("params_file").get<std::string>());
    detail::assign_params(d, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
    return d;
}

} // namespace dfp
