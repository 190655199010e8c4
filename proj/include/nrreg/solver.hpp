#pragma once

#include "nrreg/correspondence.hpp"
#include "nrreg/error.hpp"
#include "nrreg/geometry.hpp"
#include "nrreg/operators.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace nrreg {

enum class Variant {
    dual_sparse,   ///< l1 data + l1 smoothness (the default model)
    l2,            ///< quadratic data + quadratic smoothness, one linear solve
    snr,           ///< quadratic data + l1 smoothness
    group_sparse,  ///< row-wise l2 (not squared) data + l1 smoothness
};

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::dual_sparse: return "dual_sparse";
        case Variant::l2: return "l2";
        case Variant::snr: return "snr";
        case Variant::group_sparse: return "group_sparse";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "dual_sparse") return Variant::dual_sparse;
    if (s == "l2") return Variant::l2;
    if (s == "snr") return Variant::snr;
    if (s == "group_sparse") return Variant::group_sparse;
    throw ConfigError("unknown variant '" + s + "' (expected dual_sparse, l2, snr or group_sparse)");
}

struct SolverConfig {
    double alpha = 1.0;  ///< smoothness weight
    double beta = 0.1;   ///< orthogonality weight
    double mu1_init = 1.0;
    double mu2_init = 1.0;
    double rho1 = 1.5;
    double rho2 = 1.5;
    double eps_data = 0.01;
    double eps_smooth = 0.01;
    int outer_iters = 20;
    int inner_iters = 20;
    double inner_tol = 1e-6;
    /// Outer loop stops once the mean vertex displacement between iterations falls
    /// below this fraction of the template's bounding-box diagonal.
    double outer_tol = 1e-7;
    Variant variant = Variant::dual_sparse;
    bool reweight = true;
    /// Reweight the first outer iteration from identity transforms too.
    bool reweight_first = false;
    ReflectionFix reflection_fix = ReflectionFix::kabsch;
    std::uint64_t rng_seed = 0;

    bool closest_point = true;
    double max_dist = 3.0;          ///< in multiples of the target's mean edge length
    double max_normal_angle = 60.0;  ///< degrees
    int knn = 6;                     ///< neighbors per vertex for point clouds

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("invalid solver config: " + m); };
        if (!(alpha >= 0)) fail("alpha must be >= 0");
        if (!(beta >= 0)) fail("beta must be >= 0");
        if (!(mu1_init > 0) || !(mu2_init > 0)) fail("mu1_init and mu2_init must be > 0");
        if (!(rho1 > 1) || !(rho2 > 1)) fail("rho1 and rho2 must be > 1");
        if (!(eps_data > 0) || !(eps_smooth > 0)) fail("eps_data and eps_smooth must be > 0");
        if (outer_iters < 1) fail("outer_iters must be >= 1");
        if (inner_iters < 1) fail("inner_iters must be >= 1");
        if (!(inner_tol >= 0) || !(outer_tol >= 0)) fail("tolerances must be >= 0");
        if (!(max_dist > 0) || !(max_normal_angle > 0)) fail("correspondence thresholds must be > 0");
        if (knn < 1) fail("knn must be >= 1");
    }
};

struct Energies {
    double data = 0.0;    ///< ||W_D (V X - U_f)||_1
    double smooth = 0.0;  ///< ||W_S B X||_1
    double orth = 0.0;    ///< sum_i ||S_i X_i - R_i||_F^2
    double total = 0.0;   ///< data + alpha * smooth + beta * orth
};

inline Energies evaluate_energy(const TransformStack& x, const SystemMatrices& sys,
                                const std::vector<Eigen::Matrix3d>& rotations, double alpha, double beta) {
    if (x.size() != sys.vertex_count() || static_cast<int>(rotations.size()) != x.size())
        throw Error("evaluate_energy: dimension mismatch");
    Energies e;
    e.data = data_residual(sys, x).cwiseAbs().sum();
    e.smooth = smooth_residual(sys, x).cwiseAbs().sum();
    for (int i = 0; i < x.size(); ++i) e.orth += (x.linear(i) - rotations[i]).squaredNorm();
    e.total = e.data + alpha * e.smooth + beta * e.orth;
    return e;
}

/// Nearest rotations to the linear parts of X.
inline std::vector<Eigen::Matrix3d> project_rotations(const TransformStack& x,
                                                      ReflectionFix fix = ReflectionFix::kabsch) {
    std::vector<Eigen::Matrix3d> r(x.size());
    for (int i = 0; i < x.size(); ++i) r[i] = procrustes_project(x.linear(i), fix).rotation;
    return r;
}

struct AdmmState {
    TransformStack X;
    MatrixX3d C;   ///< data auxiliary, N x 3
    MatrixX3d A;   ///< smoothness auxiliary, |E| x 3
    std::vector<Eigen::Matrix3d> R;
    MatrixX3d Y1;
    MatrixX3d Y2;
    double mu1 = 0.0;
    double mu2 = 0.0;
    /// Per-iteration ||C - W_D(V X - U_f)||_F and ||A - W_S B X||_F.
    std::vector<double> residual_data;
    std::vector<double> residual_smooth;
    int iterations = 0;
    bool converged = false;
};

/// One ADMM run on a fixed system: C, A, R, X updates, then multipliers and
/// penalties. Multipliers start at zero and penalties at their initial values.
///
/// The X step solves the exact first-order condition of the augmented
/// Lagrangian, so the orthogonality block enters with weight 2*beta.
inline AdmmState admm_solve(const SystemMatrices& sys, const TransformStack& x_init, const SolverConfig& cfg) {
    cfg.validate();
    if (cfg.variant == Variant::l2) throw ConfigError("admm_solve does not handle the l2 variant");
    const int n = sys.vertex_count();
    const int m = sys.edge_count();
    if (x_init.size() != n) throw Error("admm_solve: initial transforms do not match the system");

    AdmmState s;
    s.X = x_init;
    s.Y1 = MatrixX3d::Zero(n, 3);
    s.Y2 = MatrixX3d::Zero(m, 3);
    s.C = MatrixX3d::Zero(n, 3);
    s.A = MatrixX3d::Zero(m, 3);
    s.mu1 = cfg.mu1_init;
    s.mu2 = cfg.mu2_init;

    XSystem xsys(sys, 2.0 * cfg.beta);
    const MatrixX3d weighted_target = sys.data_weights.asDiagonal() * sys.target;
    const SparseMatrix vt_wd = SparseMatrix(sys.V.transpose() * sys.data_weights.asDiagonal());
    const SparseMatrix bt_ws = SparseMatrix(sys.B.transpose() * sys.smooth_weights.asDiagonal());
    const double row_norm_d = std::sqrt(static_cast<double>(std::max(n, 1)));
    const double row_norm_s = std::sqrt(static_cast<double>(std::max(m, 1)));

    MatrixX3d d = data_residual(sys, s.X);
    MatrixX3d sm = smooth_residual(sys, s.X);
    for (int k = 0; k < cfg.inner_iters; ++k) {
        // C-subproblem
        const MatrixX3d c_arg = d - s.Y1 / s.mu1;
        switch (cfg.variant) {
            case Variant::dual_sparse: s.C = shrink(c_arg, 1.0 / s.mu1); break;
            case Variant::snr: s.C = (s.mu1 * d - s.Y1) / (2.0 + s.mu1); break;
            case Variant::group_sparse:
                for (int i = 0; i < n; ++i) s.C.row(i) = block_shrink(c_arg.row(i), 1.0 / s.mu1);
                break;
            case Variant::l2: break;
        }
        // A-subproblem
        s.A = shrink(sm - s.Y2 / s.mu2, cfg.alpha / s.mu2);
        // R-subproblem
        s.R = project_rotations(s.X, cfg.reflection_fix);
        // X-subproblem
        xsys.refactorize(s.mu1, s.mu2);
        const MatrixX3d rhs = vt_wd * (s.Y1 + s.mu1 * (s.C + weighted_target)) + bt_ws * (s.Y2 + s.mu2 * s.A) +
                              2.0 * cfg.beta * orthogonality_rhs(s.R);
        s.X = solve_X(xsys, rhs);
        if (!s.X.stacked().allFinite())
            throw SolverError("non-finite iterate at inner iteration " + std::to_string(k + 1));

        d = data_residual(sys, s.X);
        sm = smooth_residual(sys, s.X);
        const MatrixX3d gap_d = s.C - d;
        const MatrixX3d gap_s = s.A - sm;
        s.Y1 += s.mu1 * gap_d;
        s.Y2 += s.mu2 * gap_s;
        s.mu1 *= cfg.rho1;
        s.mu2 *= cfg.rho2;
        const double r1 = gap_d.norm(), r2 = gap_s.norm();
        s.residual_data.push_back(r1);
        s.residual_smooth.push_back(r2);
        s.iterations = k + 1;
        if (std::max(r1 / row_norm_d, r2 / row_norm_s) < cfg.inner_tol) {
            s.converged = true;
            break;
        }
    }
    return s;
}

struct ReweightResult {
    Eigen::VectorXd data;    ///< diagonal of W_D
    Eigen::VectorXd smooth;  ///< diagonal of W_S
};

/// W_D(i,i) = 1 / (||X_i v_i - u_f(i)||_1 + eps_D) for matched i, else 0;
/// W_S(r,r) = 1 / (||X_i v_i - X_j v_i||_1 + eps_S) for edge row r = (i, j).
///
/// Residuals are taken unweighted, so the weights stored in `sys` are ignored.
inline ReweightResult update_weights(const TransformStack& x_prev, const SystemMatrices& sys, double eps_data,
                                     double eps_smooth) {
    if (x_prev.size() != sys.vertex_count()) throw Error("update_weights: dimension mismatch");
    const MatrixX3d d = MatrixX3d(sys.V * x_prev.stacked()) - sys.target;
    const MatrixX3d b = sys.B * x_prev.stacked();
    ReweightResult w;
    w.data = Eigen::VectorXd::Zero(sys.vertex_count());
    for (int i = 0; i < sys.vertex_count(); ++i)
        if (sys.matched[i]) w.data[i] = 1.0 / (d.row(i).cwiseAbs().sum() + eps_data);
    w.smooth.resize(sys.edge_count());
    for (int r = 0; r < sys.edge_count(); ++r) w.smooth[r] = 1.0 / (b.row(r).cwiseAbs().sum() + eps_smooth);
    return w;
}

/// argmin ||W (V X - U_f)||_F^2 + alpha ||W_S B X||_F^2 via one factorized solve.
/// Uses the data weights in `sys` as W (binary for the classic baseline).
inline TransformStack solve_l2_baseline(const SystemMatrices& sys, double alpha) {
    if (!(alpha > 0)) throw ConfigError("l2 baseline needs alpha > 0");
    XSystem xsys(sys, 0.0);
    xsys.refactorize(1.0, alpha);
    const Eigen::VectorXd w2 = sys.data_weights.cwiseAbs2();
    const MatrixX3d rhs = sys.V.transpose() * (w2.asDiagonal() * sys.target);
    return solve_X(xsys, rhs);
}

/// The snr / group_sparse comparison solvers: ADMM with the data-term step swapped.
inline AdmmState solve_variant(Variant variant, const SystemMatrices& sys, const TransformStack& x_init,
                               SolverConfig cfg) {
    if (variant != Variant::snr && variant != Variant::group_sparse)
        throw ConfigError("solve_variant expects snr or group_sparse");
    cfg.variant = variant;
    return admm_solve(sys, x_init, cfg);
}

struct IterationLog {
    int outer = 0;
    int inner = 0;  ///< inner iterations run (0 for the l2 baseline)
    Energies energies;
    std::vector<double> residual_data;
    std::vector<double> residual_smooth;
    int matched = 0;
    double displacement = 0.0;  ///< mean vertex motion since the previous outer iteration (model units)
};

struct RegistrationResult {
    TransformStack X;  ///< in the input coordinate frame
    Shape deformed;
    std::vector<IterationLog> log;
    CorrespondenceMap correspondences;  ///< the last outer iteration's map
    /// The last outer iteration's system and rotations, with X in the same
    /// normalized frame (unit bounding-box diagonal).
    TransformStack X_normalized;
    SystemMatrices system;
    std::vector<Eigen::Matrix3d> rotations;
    bool converged = false;
};

/// Uniform scale and offset taking the template to a unit bounding-box diagonal.
struct Normalization {
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    double scale = 1.0;

    static Normalization from(const Shape& s) {
        Normalization n;
        n.center = bounding_box_center(s.vertices);
        const double diag = bounding_box_diagonal(s.vertices);
        n.scale = diag > 0 ? diag : 1.0;
        return n;
    }

    Shape apply(const Shape& s) const {
        Shape out = s;
        out.vertices = (s.vertices.colwise() - center) / scale;
        return out;
    }

    /// Maps transforms acting in normalized space back to the input frame.
    TransformStack restore(const TransformStack& x) const {
        TransformStack out = x;
        for (int i = 0; i < x.size(); ++i) {
            const Eigen::Vector3d t = scale * x.translation(i) + center - x.linear(i) * center;
            out.stacked().row(4 * i + 3) = t.transpose();
        }
        return out;
    }
};

/// Ensures a neighborhood graph exists (k-NN for point clouds) and normals for meshes.
inline Shape prepare_shape(const Shape& in, int k) {
    Shape s = in;
    if (s.edges.empty()) s.edges = build_edge_graph(s, std::min(k, s.size() - 1));
    if (s.has_faces() && !s.has_normals()) s.normals = compute_vertex_normals(s).normals;
    return s;
}

/// The reweighted non-rigid ICP loop: refresh correspondences, update weights,
/// solve, repeat. Each ADMM run is warm-started from the previous transforms.
inline RegistrationResult register_nonrigid(const Shape& tmpl_in, const Shape& target_in,
                                            const CorrespondenceMap& landmarks, const SolverConfig& cfg) {
    cfg.validate();
    if (tmpl_in.size() < 2) throw Error("template needs at least 2 vertices");
    if (target_in.size() == 0) throw Error("empty target");
    if (landmarks.size() != tmpl_in.size()) throw Error("landmark map length does not match template");

    const Normalization norm = Normalization::from(tmpl_in);
    const Shape tmpl = prepare_shape(norm.apply(tmpl_in), cfg.knn);
    Shape target = norm.apply(target_in);
    if (cfg.closest_point) {
        if (target.size() >= 2) target = prepare_shape(target, cfg.knn);
        else if (std::isfinite(cfg.max_dist)) throw Error("distance gating needs a target with at least 2 vertices");
    }
    const int n = tmpl.size();
    const ClosestPointOptions cp{cfg.max_dist, cfg.max_normal_angle};

    RegistrationResult res;
    TransformStack x = TransformStack::identity(n);
    Eigen::Matrix3Xd prev_pos = tmpl.vertices;
    for (int l = 1; l <= cfg.outer_iters; ++l) {
        CorrespondenceMap corr = landmarks;
        if (cfg.closest_point) corr = merge(landmarks, closest_point_refresh(deform(tmpl, x), target, cp));
        const int matched = corr.matched_count();
        if (matched == 0) throw SolverError("no correspondences at outer iteration " + std::to_string(l));

        SystemMatrices sys = assemble_system(tmpl, target, corr, Eigen::Map<const Eigen::VectorXd>(corr.weights.data(), n),
                                             Eigen::VectorXd::Ones(static_cast<Eigen::Index>(tmpl.edges.size())));
        IterationLog entry;
        entry.outer = l;
        entry.matched = matched;
        std::vector<Eigen::Matrix3d> rotations;
        if (cfg.variant == Variant::l2) {
            x = solve_l2_baseline(sys, cfg.alpha);
            rotations = project_rotations(x, cfg.reflection_fix);
        } else {
            if (cfg.reweight && (l > 1 || cfg.reweight_first)) {
                const ReweightResult w = update_weights(x, sys, cfg.eps_data, cfg.eps_smooth);
                sys.data_weights = w.data;
                sys.smooth_weights = w.smooth;
            }
            AdmmState st = admm_solve(sys, x, cfg);
            x = std::move(st.X);
            rotations = std::move(st.R);
            entry.inner = st.iterations;
            entry.residual_data = std::move(st.residual_data);
            entry.residual_smooth = std::move(st.residual_smooth);
        }
        entry.energies = evaluate_energy(x, sys, rotations, cfg.alpha, cfg.beta);
        const Eigen::Matrix3Xd pos = apply_transforms(x, tmpl);
        entry.displacement = (pos - prev_pos).colwise().norm().mean() * norm.scale;
        prev_pos = pos;
        res.log.push_back(std::move(entry));
        res.correspondences = std::move(corr);
        res.system = std::move(sys);
        res.rotations = std::move(rotations);
        if (res.log.back().displacement < cfg.outer_tol * norm.scale) {
            res.converged = true;
            break;
        }
    }
    res.X = norm.restore(x);
    res.X_normalized = std::move(x);
    res.deformed = deform(tmpl_in, res.X);
    res.deformed.edges = tmpl_in.edges;
    return res;
}

}  // namespace nrreg
