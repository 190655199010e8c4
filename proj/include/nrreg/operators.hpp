#pragma once

#include "nrreg/correspondence.hpp"
#include "nrreg/error.hpp"
#include "nrreg/geometry.hpp"

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include <algorithm>
#include <memory>
#include <cmath>
#include <optional>
#include <string>
#include <limits>
#include <vector>

namespace nrreg {

using SparseMatrix = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;
using Matrix34d = Eigen::Matrix<double, 3, 4>;
using MatrixX3d = Eigen::Matrix<double, Eigen::Dynamic, 3>;

/// N per-vertex affine transforms X_i (3x4), stored stacked as a 4N x 3 matrix
/// whose row block i is X_i^T. Row 4i+3 holds the translation.
class TransformStack {
public:
    TransformStack() = default;
    explicit TransformStack(MatrixX3d stacked) : stacked_(std::move(stacked)) {
        if (stacked_.rows() % 4 != 0) throw Error("TransformStack: row count must be a multiple of 4");
    }

    static TransformStack identity(int n) {
        MatrixX3d s = MatrixX3d::Zero(4 * static_cast<Eigen::Index>(n), 3);
        for (int i = 0; i < n; ++i) s.block<3, 3>(4 * i, 0).setIdentity();
        return TransformStack(std::move(s));
    }

    int size() const { return static_cast<int>(stacked_.rows() / 4); }

    Matrix34d block(int i) const { return stacked_.middleRows<4>(4 * i).transpose(); }
    void set_block(int i, const Matrix34d& x) { stacked_.middleRows<4>(4 * i) = x.transpose(); }

    /// The 3x3 linear part of X_i.
    Eigen::Matrix3d linear(int i) const { return stacked_.block<3, 3>(4 * i, 0).transpose(); }
    Eigen::Vector3d translation(int i) const { return stacked_.row(4 * i + 3).transpose(); }

    /// X_i applied to the Cartesian point p (as [p; 1]).
    Eigen::Vector3d apply(int i, const Eigen::Vector3d& p) const {
        return stacked_.middleRows<3>(4 * i).transpose() * p + translation(i);
    }

    const MatrixX3d& stacked() const { return stacked_; }
    MatrixX3d& stacked() { return stacked_; }

private:
    MatrixX3d stacked_;
};

/// Positions X_i v_i for every template vertex.
inline Eigen::Matrix3Xd apply_transforms(const TransformStack& x, const Shape& shape) {
    if (x.size() != shape.size()) throw Error("apply_transforms: transform count does not match vertex count");
    Eigen::Matrix3Xd out(3, shape.size());
    for (int i = 0; i < shape.size(); ++i) out.col(i) = x.apply(i, shape.vertices.col(i));
    return out;
}

/// Template copy with vertices moved by X; faces and graph kept, normals recomputed when faces exist.
inline Shape deform(const Shape& shape, const TransformStack& x) {
    Shape out = shape;
    out.vertices = apply_transforms(x, shape);
    out.colors.clear();
    if (out.has_faces()) out.normals = compute_vertex_normals(out).normals;
    else out.normals.resize(3, 0);
    return out;
}

/// N x 4N block-diagonal matrix with v_i^T in row i, column block i.
inline SparseMatrix assemble_V(const Shape& shape) {
    const int n = shape.size();
    if (n == 0) throw Error("assemble_V: empty shape");
    std::vector<Triplet> t;
    t.reserve(4 * static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const Eigen::Vector4d v = shape.homogeneous(i);
        for (int c = 0; c < 4; ++c) t.emplace_back(i, 4 * i + c, v[c]);
    }
    SparseMatrix V(n, 4 * n);
    V.setFromTriplets(t.begin(), t.end());
    return V;
}

/// |E| x 4N smoothness operator. Row r for edge (i, j) is k_r (x) v_i^T: +v_i^T in
/// block i and -v_i^T in block j, so (B X)_r = (X_i v_i - X_j v_i)^T.
inline SparseMatrix assemble_B(const Shape& shape, const std::vector<Edge>& edges) {
    const int n = shape.size();
    std::vector<Triplet> t;
    t.reserve(8 * edges.size());
    for (std::size_t r = 0; r < edges.size(); ++r) {
        const auto [i, j] = edges[r];
        if (i < 0 || i >= n || j < 0 || j >= n)
            throw Error("assemble_B: edge " + std::to_string(r) + " index out of range");
        const Eigen::Vector4d v = shape.homogeneous(i);
        for (int c = 0; c < 4; ++c) {
            t.emplace_back(static_cast<int>(r), 4 * i + c, v[c]);
            t.emplace_back(static_cast<int>(r), 4 * j + c, -v[c]);
        }
    }
    SparseMatrix B(static_cast<Eigen::Index>(edges.size()), 4 * static_cast<Eigen::Index>(n));
    B.setFromTriplets(t.begin(), t.end());
    return B;
}

/// Everything the inner solver needs for one outer iteration.
struct SystemMatrices {
    SparseMatrix V;
    SparseMatrix B;
    MatrixX3d target;              ///< U_f: target coordinates, zero rows where unmatched
    Eigen::VectorXd data_weights;  ///< diagonal of W_D
    Eigen::VectorXd smooth_weights;  ///< diagonal of W_S
    std::vector<Edge> edge_of_row;
    std::vector<std::uint8_t> matched;

    int vertex_count() const { return static_cast<int>(V.rows()); }
    int edge_count() const { return static_cast<int>(B.rows()); }
};

/// Builds V, B, U_f and the weight diagonals. Unmatched vertices get weight 0 and a
/// zero target row regardless of `data_weights`.
inline SystemMatrices assemble_system(const Shape& tmpl, const Shape& target, const CorrespondenceMap& corr,
                                      const Eigen::VectorXd& data_weights,
                                      const Eigen::VectorXd& smooth_weights) {
    const int n = tmpl.size();
    if (corr.size() != n) throw Error("assemble_system: correspondence length does not match template");
    if (data_weights.size() != n) throw Error("assemble_system: data weight length mismatch");
    if (smooth_weights.size() != static_cast<Eigen::Index>(tmpl.edges.size()))
        throw Error("assemble_system: smoothness weight length mismatch");

    SystemMatrices sys;
    sys.V = assemble_V(tmpl);
    sys.B = assemble_B(tmpl, tmpl.edges);
    sys.edge_of_row = tmpl.edges;
    sys.target = MatrixX3d::Zero(n, 3);
    sys.data_weights = Eigen::VectorXd::Zero(n);
    sys.matched.assign(n, 0);
    for (int i = 0; i < n; ++i) {
        if (!corr.matched(i)) continue;
        const int j = corr.target(i);
        if (j < 0 || j >= target.size()) throw Error("assemble_system: correspondence outside target");
        sys.target.row(i) = target.vertices.col(j).transpose();
        sys.data_weights[i] = data_weights[i];
        sys.matched[i] = 1;
    }
    sys.smooth_weights = smooth_weights;
    return sys;
}

/// Soft thresholding: sign(x) * max(|x| - tau, 0).
inline double shrink(double x, double tau) {
    const double m = std::abs(x) - tau;
    return m > 0.0 ? std::copysign(m, x) : 0.0;
}

template <typename Derived>
auto shrink(const Eigen::MatrixBase<Derived>& x, double tau) {
    return x.unaryExpr([tau](double v) { return shrink(v, tau); });
}

/// Proximal operator of tau * ||.||_2 on a 3-vector (radial shrink).
inline Eigen::RowVector3d block_shrink(const Eigen::RowVector3d& row, double tau) {
    const double norm = row.norm();
    if (norm <= tau || norm == 0.0) return Eigen::RowVector3d::Zero();
    return row * (1.0 - tau / norm);
}

enum class ReflectionFix { kabsch, negate };

struct ProjectionResult {
    Eigen::Matrix3d rotation;
    /// True when argmax_R tr(R^T M) over SO(3) is not unique.
    bool non_unique = false;
};

/// Nearest rotation to M in the Frobenius sense.
///
/// `kabsch` flips the singular vector of the smallest singular value when
/// det(U V^T) < 0. `negate` returns -U V^T instead, which is a rotation but in
/// general not the nearest one.
inline ProjectionResult procrustes_project(const Eigen::Matrix3d& m,
                                           ReflectionFix fix = ReflectionFix::kabsch) {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Matrix3d& u = svd.matrixU();
    const Eigen::Matrix3d& v = svd.matrixV();
    const Eigen::Vector3d s = svd.singularValues();
    const double d = (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0;

    ProjectionResult out;
    if (d > 0 || fix == ReflectionFix::kabsch) {
        out.rotation = u * Eigen::Vector3d(1.0, 1.0, d).asDiagonal() * v.transpose();
    } else {
        out.rotation = -(u * v.transpose());
    }
    const double tol = 1e-12 * std::max(s[0], 1e-300);
    out.non_unique = s[0] <= 1e-300 || s[1] <= tol || (d < 0 && s[2] > tol && s[1] - s[2] <= tol);
    return out;
}

/// The block-diagonal sum of S_i^T S_i: each 4x4 block is diag(1, 1, 1, 0), selecting
/// the linear rows of X_i^T.
inline SparseMatrix orthogonality_selector(int n) {
    std::vector<Triplet> t;
    t.reserve(3 * static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) t.emplace_back(4 * i + c, 4 * i + c, 1.0);
    SparseMatrix s(4 * n, 4 * n);
    s.setFromTriplets(t.begin(), t.end());
    return s;
}

/// sum_i S_i^T R_i in stacked layout: block i carries R_i^T in its linear rows.
inline MatrixX3d orthogonality_rhs(const std::vector<Eigen::Matrix3d>& rotations) {
    const int n = static_cast<int>(rotations.size());
    MatrixX3d out = MatrixX3d::Zero(4 * static_cast<Eigen::Index>(n), 3);
    for (int i = 0; i < n; ++i) out.block<3, 3>(4 * i, 0) = rotations[i].transpose();
    return out;
}

/// Factorized X-subproblem matrix
///   mu1 V^T W_D^2 V + mu2 B^T W_S^2 B + orth_weight * sum_i S_i^T S_i.
///
/// The three constituent matrices are built once; refactorize() recombines them
/// for new penalties and reuses the symbolic analysis.
class XSystem {
public:
    XSystem(const SystemMatrices& sys, double orth_weight) : orth_weight_(orth_weight) {
        if (orth_weight < 0) throw Error("orthogonality weight must be nonnegative");
        const Eigen::VectorXd wd2 = sys.data_weights.cwiseAbs2();
        const Eigen::VectorXd ws2 = sys.smooth_weights.cwiseAbs2();
        data_ = SparseMatrix(sys.V.transpose() * wd2.asDiagonal() * sys.V);
        smooth_ = SparseMatrix(sys.B.transpose() * ws2.asDiagonal() * sys.B);
        orth_ = orthogonality_selector(sys.vertex_count());
        check_symmetric(data_, "V^T W_D^2 V");
        check_symmetric(smooth_, "B^T W_S^2 B");
        pattern_ = SparseMatrix(data_ + smooth_ + orth_);
        ldlt_->analyzePattern(pattern_);
    }

    /// Throws SingularSystemError naming vertex blocks with non-positive pivots.
    void refactorize(double mu1, double mu2) {
        if (!(mu1 > 0) || !(mu2 > 0)) throw Error("penalties mu1, mu2 must be positive");
        matrix_ = SparseMatrix(mu1 * data_ + mu2 * smooth_ + orth_weight_ * orth_);
        ldlt_->factorize(matrix_);
        const Eigen::VectorXd d = ldlt_->vectorD();
        const double scale = d.size() ? d.cwiseAbs().maxCoeff() : 0.0;
        std::vector<int> bad;
        if (ldlt_->info() != Eigen::Success || !(scale > 0)) {
            bad = singular_diagonal_blocks();
            if (bad.empty())
                for (int b = 0; b < matrix_.rows() / 4; ++b) bad.push_back(b);
        } else {
            const auto& pinv = ldlt_->permutationPinv().indices();
            for (Eigen::Index k = 0; k < d.size(); ++k)
                if (!(d[k] > kPivotTol * scale)) bad.push_back(pinv[k] / 4);
            std::sort(bad.begin(), bad.end());
            bad.erase(std::unique(bad.begin(), bad.end()), bad.end());
        }
        if (!bad.empty()) {
            std::string list;
            for (std::size_t k = 0; k < bad.size() && k < 16; ++k) list += (k ? ", " : "") + std::to_string(bad[k]);
            if (bad.size() > 16) list += ", ...";
            factorized_ = false;
            throw SingularSystemError("X-subproblem matrix is singular or indefinite at vertex blocks {" + list + "}",
                                      std::move(bad));
        }
        factorized_ = true;
    }

    MatrixX3d solve(const MatrixX3d& rhs) const {
        if (!factorized_) throw Error("XSystem::solve called without a valid factorization");
        if (rhs.rows() != matrix_.rows()) throw Error("XSystem::solve: right-hand side has wrong row count");
        MatrixX3d x = ldlt_->solve(rhs);
        if (!x.allFinite()) throw SolverError("X-subproblem solve produced non-finite values");
        return x;
    }

    const SparseMatrix& matrix() const { return matrix_; }

private:
    /// Vertex blocks whose own 4x4 diagonal block is singular; any such block makes
    /// the whole (PSD) matrix singular.
    std::vector<int> singular_diagonal_blocks() const {
        const int nb = static_cast<int>(matrix_.rows() / 4);
        std::vector<Eigen::Matrix4d> blocks(nb, Eigen::Matrix4d::Zero());
        double scale = 1e-300;
        for (Eigen::Index k = 0; k < matrix_.outerSize(); ++k)
            for (SparseMatrix::InnerIterator it(matrix_, k); it; ++it) {
                scale = std::max(scale, std::abs(it.value()));
                if (it.row() / 4 == it.col() / 4) blocks[it.row() / 4](it.row() % 4, it.col() % 4) = it.value();
            }
        std::vector<int> out;
        for (int b = 0; b < nb; ++b) {
            Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> es(blocks[b], Eigen::EigenvaluesOnly);
            if (!(es.eigenvalues()[0] > kPivotTol * scale)) out.push_back(b);
        }
        return out;
    }

    static void check_symmetric(const SparseMatrix& m, const char* name) {
        const SparseMatrix diff = m - SparseMatrix(m.transpose());
        double worst = 0.0, scale = 0.0;
        for (Eigen::Index k = 0; k < diff.outerSize(); ++k)
            for (SparseMatrix::InnerIterator it(diff, k); it; ++it) worst = std::max(worst, std::abs(it.value()));
        for (Eigen::Index k = 0; k < m.outerSize(); ++k)
            for (SparseMatrix::InnerIterator it(m, k); it; ++it) scale = std::max(scale, std::abs(it.value()));
        if (worst > 1e-12 * std::max(1.0, scale)) throw Error(std::string(name) + " is not symmetric");
    }

    // relative pivot floor; well above rounding noise on exactly singular blocks but
    // low enough for very stiff (alpha ~ 1e12) but solvable systems
    static constexpr double kPivotTol = 64 * std::numeric_limits<double>::epsilon();

    double orth_weight_;
    SparseMatrix data_, smooth_, orth_, pattern_, matrix_;
    std::unique_ptr<Eigen::SimplicialLDLT<SparseMatrix>> ldlt_ = std::make_unique<Eigen::SimplicialLDLT<SparseMatrix>>();
    bool factorized_ = false;
};

/// One-shot factorization handle for given penalties.
inline XSystem factorize_system(double mu1, double mu2, double orth_weight, const SystemMatrices& sys) {
    XSystem x(sys, orth_weight);
    x.refactorize(mu1, mu2);
    return x;
}

inline TransformStack solve_X(const XSystem& handle, const MatrixX3d& rhs) {
    return TransformStack(handle.solve(rhs));
}

/// W_D (V X - U_f), an N x 3 matrix.
inline MatrixX3d data_residual(const SystemMatrices& sys, const TransformStack& x) {
    return sys.data_weights.asDiagonal() * (MatrixX3d(sys.V * x.stacked()) - sys.target);
}

/// W_S B X, an |E| x 3 matrix.
inline MatrixX3d smooth_residual(const SystemMatrices& sys, const TransformStack& x) {
    return sys.smooth_weights.asDiagonal() * MatrixX3d(sys.B * x.stacked());
}

}  // namespace nrreg
