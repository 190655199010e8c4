#pragma once

// Text format for a TransformStack:
//   nonrigid-transforms v1 N=<n>
// followed by 3 lines of 4 reals per vertex (X_i row by row). Blank lines and
// lines starting with '#' are ignored after the header.

#include "nrreg/error.hpp"
#include "nrreg/mesh_io.hpp"
#include "nrreg/operators.hpp"

#include <cstdio>
#include <string>

namespace nrreg {

inline std::string encode_transforms(const TransformStack& x) {
    std::string out = "nonrigid-transforms v1 N=" + std::to_string(x.size()) + "\n";
    char buf[40];
    for (int i = 0; i < x.size(); ++i) {
        const Matrix34d b = x.block(i);
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 4; ++c) {
                std::snprintf(buf, sizeof buf, "%.17g", b(r, c));
                out += buf;
                out += c < 3 ? ' ' : '\n';
            }
        }
    }
    return out;
}

inline void save_transforms(const TransformStack& x, const std::string& path) {
    detail::write_file_bytes(path, encode_transforms(x));
}

inline TransformStack load_transforms(const std::string& path) {
    const std::string bytes = detail::read_file_bytes(path);
    detail::LineReader reader(bytes);
    std::string_view line;
    if (!reader.next(line)) throw ParseError(path, 1, "empty transform file");
    const auto head = detail::tokenize(line);
    long n = -1;
    if (head.size() != 3 || head[0] != "nonrigid-transforms" || head[1] != "v1" || head[2].substr(0, 2) != "N=" ||
        !detail::parse_long(head[2].substr(2), n) || n < 0)
        throw ParseError(path, reader.number(), "expected header 'nonrigid-transforms v1 N=<n>'");

    MatrixX3d stacked = MatrixX3d::Zero(4 * n, 3);
    long row = 0;
    while (reader.next(line)) {
        const auto tok = detail::tokenize(line);
        if (tok.empty() || tok[0].front() == '#') continue;
        if (row >= 3 * n) throw ParseError(path, reader.number(), "more rows than N=" + std::to_string(n) + " declares");
        if (tok.size() != 4) throw ParseError(path, reader.number(), "expected 4 reals per row");
        const long i = row / 3, r = row % 3;
        for (int c = 0; c < 4; ++c) {
            double v = 0.0;
            if (!detail::parse_double(tok[c], v))
                throw ParseError(path, reader.number(), "bad real '" + std::string(tok[c]) + "'");
            // stacked block i holds X_i transposed
            stacked(4 * i + c, r) = v;
        }
        ++row;
    }
    if (row != 3 * n)
        throw ParseError(path, reader.number(),
                         "truncated: " + std::to_string(row) + " of " + std::to_string(3 * n) + " rows");
    return TransformStack(std::move(stacked));
}

}  // namespace nrreg
