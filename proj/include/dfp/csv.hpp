#pragma once

// Plain CSV output: comma separated, header row, '.' decimal point, numbers
// with 12 significant digits.

#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "minimize.hpp"

namespace dfp::csv {

inline std::string number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

inline std::string number(std::optional<double> v) { return v ? number(*v) : std::string{}; }

inline std::string field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

inline void write_row(std::ostream& os, const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
    os << '\n';
}

inline const std::vector<std::string>& ranking_header() {
    static const std::vector<std::string> h{"id", "params", "potential", "bound", "seconds"};
    return h;
}

/// Ranking table; failed rows keep an empty potential.
inline void write_ranking(std::ostream& os, const std::vector<ScoreRow>& rows) {
    write_row(os, ranking_header());
    for (const auto& r : rows)
        write_row(os, {field(r.id), std::to_string(r.params), r.ok() ? number(r.potential) : std::string{},
                       number(r.bound), number(r.seconds)});
}

/// Dense matrix, one row per line, no header.
inline void write_matrix(std::ostream& os, const Matrix& m, bool magnitude = false) {
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << number(magnitude ? std::abs(m(i, j)) : m(i, j));
        os << '\n';
    }
}

} // namespace dfp::csv
