#pragma once

#include "nrreg/error.hpp"
#include "nrreg/geometry.hpp"
#include "nrreg/kdtree.hpp"
#include "nrreg/mesh_io.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

namespace nrreg {

/// Template-to-target index mapping. Entries are 1-based target indices with 0
/// meaning "no match"; `weights[i]` is 1 exactly when `mapping[i] != 0`.
struct CorrespondenceMap {
    std::vector<int> mapping;
    std::vector<double> weights;

    CorrespondenceMap() = default;
    explicit CorrespondenceMap(int n) : mapping(n, 0), weights(n, 0.0) {}

    int size() const { return static_cast<int>(mapping.size()); }
    bool matched(int i) const { return mapping[i] != 0; }
    /// 0-based target index; only valid when matched(i).
    int target(int i) const { return mapping[i] - 1; }

    void set(int i, int target_index) {
        mapping[i] = target_index + 1;
        weights[i] = 1.0;
    }
    void clear(int i) {
        mapping[i] = 0;
        weights[i] = 0.0;
    }

    int matched_count() const {
        int c = 0;
        for (int m : mapping) c += m != 0;
        return c;
    }
};

/// Reads whitespace-separated 0-based `i j` pairs.
inline CorrespondenceMap load_correspondences(const std::string& path, int n_template, int n_target) {
    const std::string text = detail::read_file_bytes(path);
    CorrespondenceMap corr(n_template);
    detail::LineReader reader(text);
    std::string_view line;
    while (reader.next(line)) {
        const auto tok = detail::tokenize(line);
        if (tok.empty() || tok[0][0] == '#') continue;
        if (tok.size() % 2 != 0) throw ParseError(path, reader.number(), "expected 'i j' pairs");
        for (std::size_t k = 0; k < tok.size(); k += 2) {
            long i = 0, j = 0;
            if (!detail::parse_long(tok[k], i) || !detail::parse_long(tok[k + 1], j))
                throw ParseError(path, reader.number(), "malformed index pair");
            if (i < 0 || i >= n_template)
                throw ParseError(path, reader.number(),
                                 "template index " + std::to_string(i) + " outside [0, " +
                                     std::to_string(n_template) + ")");
            if (j < 0 || j >= n_target)
                throw ParseError(path, reader.number(),
                                 "target index " + std::to_string(j) + " outside [0, " +
                                     std::to_string(n_target) + ")");
            if (corr.matched(static_cast<int>(i)))
                throw ParseError(path, reader.number(), "duplicate template index " + std::to_string(i));
            corr.set(static_cast<int>(i), static_cast<int>(j));
        }
    }
    return corr;
}

inline std::string encode_correspondences(const CorrespondenceMap& corr) {
    std::string out;
    for (int i = 0; i < corr.size(); ++i)
        if (corr.matched(i)) out += std::to_string(i) + " " + std::to_string(corr.target(i)) + "\n";
    return out;
}

struct ClosestPointOptions {
    /// Reject matches farther than this multiple of the target's mean edge length.
    double max_dist = 3.0;
    /// Reject matches whose normals differ by more than this many degrees.
    double max_normal_angle = 60.0;
};

/// Nearest target vertex for every deformed vertex, with distance and normal gating.
///
/// The normal test runs only when both shapes carry normals. An infinite
/// `max_dist` skips the edge-length scale entirely.
inline CorrespondenceMap closest_point_refresh(const Shape& deformed, const Shape& target,
                                               const ClosestPointOptions& opt = {}) {
    if (target.size() == 0) throw Error("closest_point_refresh: empty target");
    if (!(opt.max_dist > 0) || !(opt.max_normal_angle > 0))
        throw Error("closest_point_refresh: thresholds must be positive");

    double max_d2 = std::numeric_limits<double>::infinity();
    if (std::isfinite(opt.max_dist)) {
        const double l = mean_edge_length(target);
        max_d2 = (opt.max_dist * l) * (opt.max_dist * l);
    }
    const bool use_normals = opt.max_normal_angle < 180.0 && deformed.has_normals() && target.has_normals();
    const double min_cos = std::cos(opt.max_normal_angle * std::numbers::pi / 180.0);

    const KdTree tree(target.vertices);
    CorrespondenceMap corr(deformed.size());
    for (int i = 0; i < deformed.size(); ++i) {
        const Neighbor nb = tree.nearest(deformed.vertices.col(i));
        if (nb.dist2 > max_d2) continue;
        if (use_normals && deformed.normals.col(i).dot(target.normals.col(nb.index)) < min_cos) continue;
        corr.set(i, nb.index);
    }
    return corr;
}

/// Landmark entries win; refreshed entries fill the remaining slots.
inline CorrespondenceMap merge(const CorrespondenceMap& fixed, const CorrespondenceMap& refreshed) {
    if (fixed.size() != refreshed.size())
        throw Error("merge: correspondence maps differ in length (" + std::to_string(fixed.size()) + " vs " +
                    std::to_string(refreshed.size()) + ")");
    CorrespondenceMap out = fixed;
    for (int i = 0; i < out.size(); ++i)
        if (!out.matched(i) && refreshed.matched(i)) out.set(i, refreshed.target(i));
    return out;
}

}  // namespace nrreg
