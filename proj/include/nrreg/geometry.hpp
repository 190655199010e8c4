#pragma once

#include "nrreg/error.hpp"
#include "nrreg/kdtree.hpp"

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace nrreg {

/// Directed neighbor pair (i, j): j is in the neighborhood of reference vertex i.
struct Edge {
    int i = 0;
    int j = 0;
    friend auto operator<=>(const Edge&, const Edge&) = default;
};

using Face = std::array<int, 3>;
using Rgb = std::array<std::uint8_t, 3>;

/// Vertices plus optional faces, neighborhood graph, normals and colors.
///
/// Used for both template and target roles. `normals` has zero columns when
/// absent; `colors` is empty unless a color-mapped output is being written.
struct Shape {
    Eigen::Matrix3Xd vertices;
    std::vector<Face> faces;
    std::vector<Edge> edges;
    Eigen::Matrix3Xd normals;
    std::vector<Rgb> colors;

    int size() const { return static_cast<int>(vertices.cols()); }
    bool has_faces() const { return !faces.empty(); }
    bool has_normals() const { return size() > 0 && normals.cols() == vertices.cols(); }

    /// Vertex i as [x, y, z, 1].
    Eigen::Vector4d homogeneous(int i) const {
        return vertices.col(i).homogeneous();
    }
};

/// Directed half-edges of a triangle mesh: both (i, j) and (j, i) for every mesh
/// edge, sorted by (i, j).
inline std::vector<Edge> mesh_edges(const std::vector<Face>& faces, int n) {
    std::vector<Edge> edges;
    edges.reserve(faces.size() * 6);
    for (const Face& f : faces) {
        for (int k = 0; k < 3; ++k) {
            const int a = f[k], b = f[(k + 1) % 3];
            if (a < 0 || a >= n || b < 0 || b >= n)
                throw Error("face index out of range [0, " + std::to_string(n) + ")");
            if (a == b) continue;
            edges.push_back({a, b});
            edges.push_back({b, a});
        }
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    return edges;
}

/// Pairs of coincident points found while building a k-NN graph.
struct DuplicatePair {
    int first = 0;   // lower index, the one kept as the tie-break winner
    int second = 0;
};

/// Neighborhood graph. Meshes use their half-edges; point clouds connect each
/// vertex to its k nearest neighbors (exact, ties to the lowest index).
///
/// Coincident point pairs are appended to `duplicates` when it is non-null.
inline std::vector<Edge> build_edge_graph(const Shape& shape, int k = 6,
                                          std::vector<DuplicatePair>* duplicates = nullptr) {
    const int n = shape.size();
    if (n < 2) throw Error("edge graph needs at least 2 vertices, got " + std::to_string(n));
    if (shape.has_faces()) return mesh_edges(shape.faces, n);
    if (k <= 0) throw Error("k must be positive");
    if (k >= n)
        throw Error("k = " + std::to_string(k) + " must be smaller than the vertex count " +
                    std::to_string(n));

    const KdTree tree(shape.vertices);
    std::vector<Edge> edges;
    edges.reserve(static_cast<std::size_t>(n) * k);
    for (int i = 0; i < n; ++i) {
        for (const Neighbor& nb : tree.knn(shape.vertices.col(i), k, i)) {
            edges.push_back({i, nb.index});
            if (duplicates && nb.dist2 == 0.0 && i < nb.index) duplicates->push_back({i, nb.index});
        }
    }
    return edges;
}

/// Unique undirected edges, as (min, max) pairs sorted ascending.
inline std::vector<Edge> undirected_edges(const std::vector<Edge>& edges) {
    std::vector<Edge> out;
    out.reserve(edges.size());
    for (const Edge& e : edges) {
        if (e.i == e.j) continue;
        out.push_back({std::min(e.i, e.j), std::max(e.i, e.j)});
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

/// Mean Euclidean length over unique undirected edges (the l-bar used to scale noise).
inline double mean_edge_length(const Shape& shape) {
    const std::vector<Edge> und = undirected_edges(shape.edges);
    if (und.empty()) throw Error("mean_edge_length: shape has no edges");
    double sum = 0.0;
    for (const Edge& e : und) sum += (shape.vertices.col(e.i) - shape.vertices.col(e.j)).norm();
    return sum / static_cast<double>(und.size());
}

struct VertexNormals {
    Eigen::Matrix3Xd normals;
    /// 1 where no incident face had nonzero area and +z was substituted.
    std::vector<std::uint8_t> fallback;
};

/// Area-weighted vertex normals. Vertices without any nonzero-area incident face
/// get (0, 0, 1) and are flagged.
inline VertexNormals compute_vertex_normals(const Shape& shape) {
    if (!shape.has_faces()) throw Error("compute_vertex_normals: shape has no faces");
    const int n = shape.size();
    VertexNormals out;
    out.normals = Eigen::Matrix3Xd::Zero(3, n);
    out.fallback.assign(n, 0);
    for (const Face& f : shape.faces) {
        const Eigen::Vector3d a = shape.vertices.col(f[0]);
        const Eigen::Vector3d b = shape.vertices.col(f[1]);
        const Eigen::Vector3d c = shape.vertices.col(f[2]);
        const Eigen::Vector3d area_normal = (b - a).cross(c - a);  // |.| = 2 * area
        for (int v : f) out.normals.col(v) += area_normal;
    }
    for (int i = 0; i < n; ++i) {
        const double len = out.normals.col(i).norm();
        if (len > 0.0 && std::isfinite(len)) {
            out.normals.col(i) /= len;
        } else {
            out.normals.col(i) = Eigen::Vector3d::UnitZ();
            out.fallback[i] = 1;
        }
    }
    return out;
}

/// Axis-aligned bounding box diagonal length.
inline double bounding_box_diagonal(const Eigen::Matrix3Xd& points) {
    if (points.cols() == 0) return 0.0;
    return (points.rowwise().maxCoeff() - points.rowwise().minCoeff()).norm();
}

inline Eigen::Vector3d bounding_box_center(const Eigen::Matrix3Xd& points) {
    if (points.cols() == 0) return Eigen::Vector3d::Zero();
    return 0.5 * (points.rowwise().maxCoeff() + points.rowwise().minCoeff());
}

}  // namespace nrreg
