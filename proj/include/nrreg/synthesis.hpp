#pragma once

#include "nrreg/error.hpp"
#include "nrreg/geometry.hpp"

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <variant>
#include <vector>

namespace nrreg {

/// Counter-based generator: value k of stream s under seed is a SplitMix64
/// finalizer applied to (key(seed, s) + (k + 1) * golden_gamma). Any draw can be
/// computed independently of the others, and results are identical on every
/// platform with IEEE doubles.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint64_t stream = 0) : key_(mix(seed ^ mix(stream + kGamma))) {}

    std::uint64_t bits(std::uint64_t counter) const { return mix(key_ + (counter + 1) * kGamma); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform(std::uint64_t counter) const {
        return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller on counters 2k and 2k+1.
    double normal(std::uint64_t k) const {
        const double u1 = 1.0 - uniform(2 * k);  // (0, 1]
        const double u2 = uniform(2 * k + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Laplace(0, 1) by inverse CDF on counter k.
    double laplace(std::uint64_t k) const {
        const double u = uniform(k) - 0.5;
        const double a = 1.0 - 2.0 * std::abs(u);
        return a > 0 ? -std::copysign(std::log(a), u) : 0.0;
    }

    /// Uniform integer in [0, n) by rejection on the 64-bit draws starting at `counter`.
    std::uint64_t below(std::uint64_t n, std::uint64_t& counter) const {
        const std::uint64_t limit = n ? (~std::uint64_t{0} - n + 1) % n : 0;  // 2^64 mod n
        for (;;) {
            const std::uint64_t r = bits(counter++);
            if (r >= limit) return r % n;
        }
    }

private:
    static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
};

namespace detail {

inline Eigen::Matrix3Xd corruption_normals(const Shape& target) {
    if (target.has_normals()) return target.normals;
    if (!target.has_faces()) throw Error("corruption needs normals or faces to derive them");
    return compute_vertex_normals(target).normals;
}

inline double corruption_scale(const Shape& target) {
    Shape s = target;
    if (s.edges.empty()) {
        if (!s.has_faces()) throw Error("corruption needs edges or faces to measure the mean edge length");
        s.edges = mesh_edges(s.faces, s.size());
    }
    return mean_edge_length(s);
}

}  // namespace detail

/// Moves every vertex along its unit normal by g_i * sigma * l_bar, g_i ~ N(0, 1).
/// Draw i belongs to vertex i, so subsets see the same displacements.
inline Shape perturb_noise(const Shape& target, double sigma, std::uint64_t seed) {
    if (!(sigma >= 0)) throw Error("sigma must be >= 0");
    Shape out = target;
    if (sigma == 0.0) return out;
    const Eigen::Matrix3Xd normals = detail::corruption_normals(target);
    const double step = sigma * detail::corruption_scale(target);
    const CounterRng rng(seed, 0);
    for (int i = 0; i < target.size(); ++i) out.vertices.col(i) += rng.normal(i) * step * normals.col(i);
    return out;
}

struct OutlierResult {
    Shape shape;
    std::vector<int> indices;  ///< displaced vertices, ascending
};

/// Displaces a uniformly drawn floor(fraction * M)-subset of vertices exactly as
/// perturb_noise would with `magnitude_sigma`.
inline OutlierResult perturb_outliers(const Shape& target, double fraction, double magnitude_sigma,
                                      std::uint64_t seed) {
    if (!(fraction >= 0 && fraction <= 1)) throw Error("outlier fraction must lie in [0, 1]");
    if (!(magnitude_sigma >= 0)) throw Error("outlier magnitude must be >= 0");
    const int m = target.size();
    const int count = static_cast<int>(std::floor(fraction * m));

    // partial Fisher-Yates on stream 1
    std::vector<int> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    const CounterRng pick(seed, 1);
    std::uint64_t counter = 0;
    for (int k = 0; k < count; ++k) {
        const int j = k + static_cast<int>(pick.below(static_cast<std::uint64_t>(m - k), counter));
        std::swap(perm[k], perm[j]);
    }
    OutlierResult res;
    res.indices.assign(perm.begin(), perm.begin() + count);
    std::sort(res.indices.begin(), res.indices.end());

    res.shape = target;
    if (count == 0 || magnitude_sigma == 0.0) return res;
    const Eigen::Matrix3Xd normals = detail::corruption_normals(target);
    const double step = magnitude_sigma * detail::corruption_scale(target);
    const CounterRng rng(seed, 0);
    for (int i : res.indices) res.shape.vertices.col(i) += rng.normal(i) * step * normals.col(i);
    return res;
}

/// A single rigid motion p -> R p + t.
struct RigidSpec {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

/// Two rigid segments split by the plane through `pivot` with normal `split_dir`.
/// The far side rotates by `angle` (radians) about the line (pivot, axis). Within
/// `band` of the plane the two rigid motions are blended linearly.
struct BendSpec {
    Eigen::Vector3d pivot = Eigen::Vector3d::Zero();
    Eigen::Vector3d axis = Eigen::Vector3d::UnitY();
    Eigen::Vector3d split_dir = Eigen::Vector3d::UnitX();
    double angle = 0.0;
    double band = 0.0;
};

/// Hard piecewise-rigid motion: vertex i follows motions[labels[i]].
struct RegionSpec {
    std::vector<int> labels;
    std::vector<RigidSpec> motions;
};

using DeformationSpec = std::variant<RigidSpec, BendSpec, RegionSpec>;

struct SynthResult {
    Shape target;
    /// g_i: ground-truth position of template vertex i (the identity index map into target).
    Eigen::Matrix3Xd ground_truth;
};

/// Blend weight of the rotated segment for a point at signed distance `s` from
/// the split plane: 0 below -band/2, 1 above +band/2, linear in between.
inline double bend_weight(double s, double band) {
    if (band <= 0) return s > 0 ? 1.0 : 0.0;
    return std::clamp((s + 0.5 * band) / band, 0.0, 1.0);
}

inline SynthResult synth_deformation(const Shape& tmpl, const DeformationSpec& spec) {
    const int n = tmpl.size();
    SynthResult res;
    res.ground_truth.resize(3, n);
    if (const auto* rigid = std::get_if<RigidSpec>(&spec)) {
        for (int i = 0; i < n; ++i)
            res.ground_truth.col(i) = rigid->rotation * tmpl.vertices.col(i) + rigid->translation;
    } else if (const auto* bend = std::get_if<BendSpec>(&spec)) {
        if (!(bend->axis.norm() > 0) || !(bend->split_dir.norm() > 0))
            throw Error("bend needs nonzero axis and split direction");
        if (!(bend->band >= 0)) throw Error("bend band must be >= 0");
        const Eigen::Matrix3d rot = Eigen::AngleAxisd(bend->angle, bend->axis.normalized()).toRotationMatrix();
        const Eigen::Vector3d dir = bend->split_dir.normalized();
        for (int i = 0; i < n; ++i) {
            const Eigen::Vector3d v = tmpl.vertices.col(i);
            const double w = bend_weight(dir.dot(v - bend->pivot), bend->band);
            const Eigen::Vector3d moved = rot * (v - bend->pivot) + bend->pivot;
            res.ground_truth.col(i) = (1.0 - w) * v + w * moved;
        }
    } else {
        const auto& reg = std::get<RegionSpec>(spec);
        if (static_cast<int>(reg.labels.size()) != n) throw Error("region labels must cover every vertex");
        std::vector<int> counts(reg.motions.size(), 0);
        for (int l : reg.labels) {
            if (l < 0 || l >= static_cast<int>(reg.motions.size())) throw Error("region label out of range");
            ++counts[l];
        }
        for (std::size_t r = 0; r < counts.size(); ++r)
            if (counts[r] == 0) throw Error("region " + std::to_string(r) + " is empty");
        for (int i = 0; i < n; ++i) {
            const RigidSpec& mo = reg.motions[reg.labels[i]];
            res.ground_truth.col(i) = mo.rotation * tmpl.vertices.col(i) + mo.translation;
        }
    }
    res.target = tmpl;
    res.target.vertices = res.ground_truth;
    res.target.colors.clear();
    if (res.target.has_faces()) res.target.normals = compute_vertex_normals(res.target).normals;
    else res.target.normals.resize(3, 0);
    return res;
}

/// Regular grid in the z = 0 plane, `nx` by `ny` vertices, split into triangles.
inline Shape make_grid(int nx, int ny, double width, double height) {
    if (nx < 2 || ny < 2) throw Error("grid needs at least 2 x 2 vertices");
    Shape s;
    s.vertices.resize(3, nx * ny);
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x)
            s.vertices.col(y * nx + x) = Eigen::Vector3d(width * x / (nx - 1), height * y / (ny - 1), 0.0);
    for (int y = 0; y + 1 < ny; ++y)
        for (int x = 0; x + 1 < nx; ++x) {
            const int a = y * nx + x, b = a + 1, c = a + nx, d = c + 1;
            s.faces.push_back({a, b, d});
            s.faces.push_back({a, d, c});
        }
    s.edges = mesh_edges(s.faces, s.size());
    s.normals = compute_vertex_normals(s).normals;
    return s;
}

/// Open tube along +x: `rings` circles of `segments` vertices, radius r, given length.
inline Shape make_tube(int rings, int segments, double radius, double length) {
    if (rings < 2 || segments < 3) throw Error("tube needs at least 2 rings of 3 vertices");
    Shape s;
    s.vertices.resize(3, rings * segments);
    for (int r = 0; r < rings; ++r)
        for (int k = 0; k < segments; ++k) {
            const double phi = 2.0 * std::numbers::pi * k / segments;
            s.vertices.col(r * segments + k) =
                Eigen::Vector3d(length * r / (rings - 1), radius * std::cos(phi), radius * std::sin(phi));
        }
    for (int r = 0; r + 1 < rings; ++r)
        for (int k = 0; k < segments; ++k) {
            const int a = r * segments + k, b = r * segments + (k + 1) % segments;
            const int c = a + segments, d = b + segments;
            s.faces.push_back({a, d, c});
            s.faces.push_back({a, b, d});
        }
    s.edges = mesh_edges(s.faces, s.size());
    s.normals = compute_vertex_normals(s).normals;
    return s;
}

/// Latitude-longitude sphere with poles; outward-facing triangles.
inline Shape make_uv_sphere(int stacks, int slices, double radius) {
    if (stacks < 2 || slices < 3) throw Error("sphere needs at least 2 stacks and 3 slices");
    Shape s;
    const int ring_count = stacks - 1;
    s.vertices.resize(3, ring_count * slices + 2);
    for (int r = 0; r < ring_count; ++r) {
        const double theta = std::numbers::pi * (r + 1) / stacks;
        for (int k = 0; k < slices; ++k) {
            const double phi = 2.0 * std::numbers::pi * k / slices;
            s.vertices.col(r * slices + k) = radius * Eigen::Vector3d(std::sin(theta) * std::cos(phi),
                                                                      std::sin(theta) * std::sin(phi),
                                                                      std::cos(theta));
        }
    }
    const int north = ring_count * slices, south = north + 1;
    s.vertices.col(north) = Eigen::Vector3d(0, 0, radius);
    s.vertices.col(south) = Eigen::Vector3d(0, 0, -radius);
    for (int k = 0; k < slices; ++k) {
        const int k1 = (k + 1) % slices;
        s.faces.push_back({north, k, k1});
        for (int r = 0; r + 1 < ring_count; ++r) {
            const int a = r * slices + k, b = r * slices + k1, c = a + slices, d = b + slices;
            s.faces.push_back({a, c, d});
            s.faces.push_back({a, d, b});
        }
        const int last = (ring_count - 1) * slices;
        s.faces.push_back({south, last + k1, last + k});
    }
    s.edges = mesh_edges(s.faces, s.size());
    s.normals = compute_vertex_normals(s).normals;
    return s;
}

/// Uniformly sampled landmark set: identity correspondences on floor(fraction * N) vertices.
inline std::vector<int> sample_landmarks(int n, double fraction, std::uint64_t seed) {
    if (!(fraction >= 0 && fraction <= 1)) throw Error("landmark fraction must lie in [0, 1]");
    const int count = static_cast<int>(std::floor(fraction * n));
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    const CounterRng pick(seed, 2);
    std::uint64_t counter = 0;
    for (int k = 0; k < count; ++k) {
        const int j = k + static_cast<int>(pick.below(static_cast<std::uint64_t>(n - k), counter));
        std::swap(perm[k], perm[j]);
    }
    std::vector<int> out(perm.begin(), perm.begin() + count);
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace nrreg
