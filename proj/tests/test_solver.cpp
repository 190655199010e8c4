#include "nrreg/metrics.hpp"
#include "nrreg/solver.hpp"
#include "nrreg/synthesis.hpp"
#include "instances.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace nrreg;

namespace {

SystemMatrices unit_system(const Shape& tmpl, const Shape& target, const CorrespondenceMap& corr) {
    return assemble_system(tmpl, target, corr, Eigen::Map<const Eigen::VectorXd>(corr.weights.data(), corr.size()),
                           Eigen::VectorXd::Ones(static_cast<Eigen::Index>(tmpl.edges.size())));
}

struct Strip {
    Shape tmpl;
    SynthResult synth;
    SystemMatrices sys;
};

// 10 x 2 grid bent by 45 degrees about the y axis through its middle.
Strip bent_strip() {
    Strip s;
    s.tmpl = make_grid(10, 2, 1.0, 0.1);
    s.tmpl.edges = build_edge_graph(s.tmpl);
    BendSpec b;
    b.pivot = Eigen::Vector3d(0.5, 0, 0);
    b.axis = Eigen::Vector3d::UnitY();
    b.angle = std::numbers::pi / 4;
    b.band = 0.25;
    s.synth = synth_deformation(s.tmpl, b);
    s.sys = unit_system(s.tmpl, s.synth.target, instances::index_map(s.tmpl.size()));
    return s;
}

double rms(double frobenius, Eigen::Index rows) { return frobenius / std::sqrt(double(std::max<Eigen::Index>(rows, 1))); }

}  // namespace

TEST(Energy, ExactAlignmentIsZero) {
    Shape s = make_grid(3, 3, 1, 1);
    s.edges = build_edge_graph(s);
    const auto sys = unit_system(s, s, instances::index_map(s.size()));
    const Energies e = evaluate_energy(TransformStack::identity(s.size()), sys,
                                       std::vector<Eigen::Matrix3d>(s.size(), Eigen::Matrix3d::Identity()), 1.0, 0.1);
    EXPECT_EQ(e.data, 0.0);
    EXPECT_EQ(e.smooth, 0.0);
    EXPECT_EQ(e.orth, 0.0);
    EXPECT_EQ(e.total, 0.0);
}

TEST(Energy, SingleTranslatedMatch) {
    Shape s = make_grid(2, 2, 1, 1);
    s.edges = build_edge_graph(s);
    Shape target = s;
    target.vertices.row(0).array() += 1.0;
    CorrespondenceMap c(s.size());
    c.set(2, 2);
    const auto sys = unit_system(s, target, c);
    const Energies e = evaluate_energy(TransformStack::identity(s.size()), sys,
                                       std::vector<Eigen::Matrix3d>(s.size(), Eigen::Matrix3d::Identity()), 1.0, 0.1);
    EXPECT_DOUBLE_EQ(e.data, 1.0);
    EXPECT_EQ(e.smooth, 0.0);
}

TEST(Energy, MatchesLoopOracle) {
    Shape tmpl;
    const auto sys = oracle::random_system(30, 4, 4, &tmpl);
    const TransformStack x(oracle::random_dense(120, 3, 5));
    std::vector<Eigen::Matrix3d> rot = project_rotations(TransformStack(oracle::random_dense(120, 3, 6)));
    const double alpha = 0.7, beta = 0.3;
    const Energies e = evaluate_energy(x, sys, rot, alpha, beta);
    EXPECT_NEAR(e.total, oracle::l1_objective_loops(x.stacked(), tmpl, sys, rot, alpha, beta), 1e-10);
    EXPECT_NEAR(e.total, e.data + alpha * e.smooth + beta * e.orth, 1e-12);
    EXPECT_THROW(evaluate_energy(x, sys, std::vector<Eigen::Matrix3d>(3), alpha, beta), Error);
}

TEST(Admm, AlignedInputIsAFixedPoint) {
    Shape s = make_uv_sphere(5, 8, 1.0);
    s.edges = build_edge_graph(s);
    const auto sys = unit_system(s, s, instances::index_map(s.size()));
    const AdmmState st = admm_solve(sys, TransformStack::identity(s.size()), SolverConfig{});
    EXPECT_EQ(st.iterations, 1);
    EXPECT_TRUE(st.converged);
    EXPECT_LT(st.residual_data[0], 1e-12);
    EXPECT_LT(st.residual_smooth[0], 1e-12);
    EXPECT_LT((st.X.stacked() - TransformStack::identity(s.size()).stacked()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Admm, SingleFreeVertexReachesItsTarget) {
    Shape t;
    t.vertices = Eigen::Vector3d(0.3, -0.2, 0.5);
    Shape u;
    u.vertices = Eigen::Vector3d(1.0, 2.0, -1.0);
    CorrespondenceMap c(1);
    c.set(0, 0);
    const auto sys = unit_system(t, u, c);
    SolverConfig cfg;
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    // with neither smoothness nor orthogonality the 4x4 block has rank one
    EXPECT_THROW(admm_solve(sys, TransformStack::identity(1), cfg), SingularSystemError);
    cfg.beta = 1e-3;
    // the X step fits C exactly here, so the primal residual is zero from the first
    // iteration on; run the full schedule instead of stopping on it
    cfg.inner_tol = 0.0;
    cfg.inner_iters = 60;
    const AdmmState st = admm_solve(sys, TransformStack::identity(1), cfg);
    const Eigen::Vector3d p = st.X.linear(0) * t.vertices.col(0) + st.X.translation(0);
    EXPECT_LT((p - u.vertices.col(0)).norm(), 1e-6);
}

TEST(Admm, BentStripMatchesConvexOracle) {
    const Strip s = bent_strip();
    // slower penalty growth with a longer run; the 20-iteration default stalls short
    // of both targets on this instance
    SolverConfig cfg;
    cfg.rho1 = cfg.rho2 = 1.2;
    cfg.inner_iters = 100;
    const AdmmState st = admm_solve(s.sys, TransformStack::identity(s.tmpl.size()), cfg);
    EXPECT_LT(rms(st.residual_data.back(), s.sys.vertex_count()), 1e-6);
    EXPECT_LT(rms(st.residual_smooth.back(), s.sys.edge_count()), 1e-6);

    const double admm_obj = evaluate_energy(st.X, s.sys, st.R, cfg.alpha, cfg.beta).total;
    const Eigen::MatrixXd xo = oracle::irls_l1(s.sys, st.R, cfg.alpha, cfg.beta, st.X.stacked());
    const double oracle_obj = oracle::l1_objective_loops(xo, s.tmpl, s.sys, st.R, cfg.alpha, cfg.beta);
    EXPECT_LE(admm_obj, 1.01 * oracle_obj);

    // penalties grow geometrically
    EXPECT_NEAR(st.mu1, cfg.mu1_init * std::pow(cfg.rho1, st.iterations), 1e-9 * st.mu1);
}

TEST(Admm, ResidualsDecreaseAfterWarmup) {
    const Strip s = bent_strip();
    const AdmmState st = admm_solve(s.sys, TransformStack::identity(s.tmpl.size()), SolverConfig{});
    for (std::size_t k = 4; k < st.residual_data.size(); ++k) {
        EXPECT_LE(st.residual_data[k], st.residual_data[k - 1] * (1 + 1e-9)) << "k=" << k;
        EXPECT_LE(st.residual_smooth[k], st.residual_smooth[k - 1] * (1 + 1e-9)) << "k=" << k;
    }
}

TEST(Admm, EachSubstepSolvesItsSubproblem) {
    Shape tmpl;
    const auto sys = oracle::random_system(25, 9, 4, &tmpl);
    SolverConfig cfg;
    cfg.inner_iters = 1;
    cfg.mu1_init = 2.0;
    cfg.mu2_init = 3.0;
    const TransformStack x0(TransformStack::identity(25).stacked() + 0.1 * oracle::random_dense(100, 3, 10));
    const AdmmState st = admm_solve(sys, x0, cfg);
    const MatrixX3d d = data_residual(sys, x0), sm = smooth_residual(sys, x0);

    // multipliers start at zero, so the C and A objectives are plain prox problems
    auto c_obj = [&](const MatrixX3d& c) { return c.cwiseAbs().sum() + 0.5 * cfg.mu1_init * (c - d).squaredNorm(); };
    auto a_obj = [&](const MatrixX3d& a) {
        return cfg.alpha * a.cwiseAbs().sum() + 0.5 * cfg.mu2_init * (a - sm).squaredNorm();
    };
    std::mt19937 gen(3);
    std::normal_distribution<double> g(0.0, 1e-3);
    for (int t = 0; t < 200; ++t) {
        MatrixX3d dc = MatrixX3d::Zero(d.rows(), 3), da = MatrixX3d::Zero(sm.rows(), 3);
        for (Eigen::Index k = 0; k < dc.size(); ++k) dc.data()[k] = g(gen);
        for (Eigen::Index k = 0; k < da.size(); ++k) da.data()[k] = g(gen);
        EXPECT_LE(c_obj(st.C), c_obj(st.C + dc));
        EXPECT_LE(a_obj(st.A), a_obj(st.A + da));
    }
    for (int i = 0; i < 25; ++i) {
        const Eigen::Matrix3d l = x0.linear(i);
        EXPECT_NEAR((st.R[i].transpose() * l).trace(), oracle::max_trace_rotation(l), 1e-6);
    }

    // X satisfies the normal equations of the augmented Lagrangian
    const XSystem xs = factorize_system(cfg.mu1_init, cfg.mu2_init, 2 * cfg.beta, sys);
    const MatrixX3d rhs = sys.V.transpose() * sys.data_weights.asDiagonal() *
                              (cfg.mu1_init * (st.C + sys.data_weights.asDiagonal() * sys.target)) +
                          sys.B.transpose() * sys.smooth_weights.asDiagonal() * (cfg.mu2_init * st.A) +
                          2 * cfg.beta * orthogonality_rhs(st.R);
    const MatrixX3d res = xs.matrix() * st.X.stacked() - rhs;
    EXPECT_LT(res.norm() / rhs.norm(), 1e-8);
}

TEST(Weights, FloorsAndUnmatched) {
    Shape s = make_grid(2, 2, 1, 1);
    s.edges = build_edge_graph(s);
    Shape target = s;
    target.vertices.col(1) += Eigen::Vector3d(0.03, -0.03, 0.03);
    CorrespondenceMap c(4);
    c.set(0, 0);
    c.set(1, 1);
    const auto sys = unit_system(s, target, c);
    const ReweightResult w = update_weights(TransformStack::identity(4), sys, 0.01, 0.01);
    EXPECT_DOUBLE_EQ(w.data[0], 100.0);
    EXPECT_NEAR(w.data[1], 10.0, 1e-12);
    EXPECT_EQ(w.data[2], 0.0);
    EXPECT_EQ(w.data[3], 0.0);
    for (Eigen::Index r = 0; r < w.smooth.size(); ++r) EXPECT_DOUBLE_EQ(w.smooth[r], 100.0);
}

TEST(Weights, SmoothnessUsesEdgeDisagreement) {
    Shape s;
    s.vertices = Eigen::Matrix3Xd::Zero(3, 2);
    s.vertices(0, 1) = 1.0;
    s.edges = {{0, 1}, {1, 0}};
    const auto sys = unit_system(s, s, instances::index_map(2));
    TransformStack x = TransformStack::identity(2);
    x.stacked()(4 * 1 + 3, 0) = 0.09;  // vertex 1 translated by 0.09 along x
    const ReweightResult w = update_weights(x, sys, 0.01, 0.01);
    EXPECT_NEAR(w.smooth[0], 10.0, 1e-12);
    EXPECT_NEAR(w.smooth[1], 10.0, 1e-12);
}

TEST(Register, RigidMotionWithSparseLandmarks) {
    const Shape t = make_tube(20, 10, 0.15, 2.0);
    RigidSpec r;
    r.rotation = Eigen::AngleAxisd(std::numbers::pi / 6, Eigen::Vector3d(1, 2, 3).normalized()).toRotationMatrix();
    r.translation = Eigen::Vector3d(0.1, 0, 0);
    const SynthResult syn = synth_deformation(t, r);
    SolverConfig cfg;
    // the 30 degree turn moves the tube ends by several edge lengths, so a looser
    // gate lets early closest-point matches latch onto the wrong ring
    cfg.max_dist = 1.0;
    const RegistrationResult res = register_nonrigid(t, syn.target, instances::landmark_map(t.size(), 0.1, 7), cfg);
    const double diag = bounding_box_diagonal(t.vertices);
    EXPECT_LT(fitting_error(res.X, t, syn.ground_truth).mean_distance, 1e-4 * diag);
    EXPECT_LE(res.log.size(), 20u);
}

TEST(Register, ConfigErrors) {
    const Shape t = make_grid(3, 3, 1, 1);
    SolverConfig cfg;
    cfg.outer_iters = 0;
    EXPECT_THROW(register_nonrigid(t, t, instances::index_map(9), cfg), ConfigError);
    cfg = SolverConfig{};
    cfg.rho1 = 1.0;
    EXPECT_THROW(register_nonrigid(t, t, instances::index_map(9), cfg), ConfigError);
    cfg = SolverConfig{};
    cfg.eps_data = 0.0;
    EXPECT_THROW(register_nonrigid(t, t, instances::index_map(9), cfg), ConfigError);
    EXPECT_THROW(variant_from_string("l3"), ConfigError);
}

TEST(Register, NoCorrespondencesIsAnError) {
    const Shape t = make_grid(3, 3, 1, 1);
    Shape far = t;
    far.vertices.row(2).array() += 100.0;
    EXPECT_THROW(register_nonrigid(t, far, CorrespondenceMap(9), SolverConfig{}), SolverError);
}

TEST(Register, ReweightingHelpsUnderOutliers) {
    const auto b = instances::tube_bend();
    const OutlierResult noisy = perturb_outliers(b.synth.target, 0.3, 3.0, 5);
    const auto corr = instances::index_map(b.tmpl.size());
    SolverConfig on, off;
    off.reweight = false;
    const double e_on = fitting_error(register_nonrigid(b.tmpl, noisy.shape, corr, on).X, b.tmpl,
                                      b.synth.ground_truth).mean_distance;
    const double e_off = fitting_error(register_nonrigid(b.tmpl, noisy.shape, corr, off).X, b.tmpl,
                                       b.synth.ground_truth).mean_distance;
    EXPECT_LE(e_on, e_off);
}

TEST(Register, Deterministic) {
    const auto b = instances::tube_bend(10, 8);
    SolverConfig cfg;
    cfg.reweight = false;
    cfg.outer_iters = 4;
    const auto corr = instances::landmark_map(b.tmpl.size(), 0.2, 3);
    const RegistrationResult a = register_nonrigid(b.tmpl, b.synth.target, corr, cfg);
    const RegistrationResult c = register_nonrigid(b.tmpl, b.synth.target, corr, cfg);
    ASSERT_EQ(a.log.size(), c.log.size());
    for (std::size_t k = 0; k < a.log.size(); ++k) {
        EXPECT_EQ(a.log[k].energies.total, c.log[k].energies.total);
        EXPECT_EQ(a.log[k].residual_data, c.log[k].residual_data);
        EXPECT_EQ(a.log[k].residual_smooth, c.log[k].residual_smooth);
        EXPECT_EQ(a.log[k].matched, c.log[k].matched);
    }
    EXPECT_EQ(a.X.stacked(), c.X.stacked());
}

TEST(L2Baseline, ExactAlignment) {
    Shape s = make_uv_sphere(4, 6, 1.0);
    s.edges = build_edge_graph(s);
    const auto sys = unit_system(s, s, instances::index_map(s.size()));
    const TransformStack x = solve_l2_baseline(sys, 1.0);
    EXPECT_LT(data_residual(sys, x).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_THROW(solve_l2_baseline(sys, 0.0), ConfigError);
}

TEST(L2Baseline, PlanarTemplateIsSingular) {
    // nothing constrains how X_i acts on the normal direction of a flat sheet
    EXPECT_THROW(solve_l2_baseline(bent_strip().sys, 1.0), SingularSystemError);
}

TEST(L2Baseline, StiffLimitLandsInSmoothnessKernel) {
    // B only asks neighbouring transforms to agree at the two edge endpoints, so
    // its kernel is larger than "all blocks equal"; the stiff limit must reach it
    const auto b = instances::tube_bend();
    Shape t = b.tmpl;
    t.edges = build_edge_graph(t);
    const auto sys = unit_system(t, b.synth.target, instances::index_map(t.size()));
    const TransformStack stiff = solve_l2_baseline(sys, 1e12);
    const TransformStack soft = solve_l2_baseline(sys, 1.0);
    EXPECT_LT(smooth_residual(sys, stiff).cwiseAbs().maxCoeff(), 1e-4);
    EXPECT_GT(smooth_residual(sys, soft).cwiseAbs().maxCoeff(), 1e-3);
    for (const Edge& e : t.edges) {
        const Eigen::Vector3d vi = t.vertices.col(e.i), vj = t.vertices.col(e.j);
        EXPECT_LT((stiff.apply(e.i, vi) - stiff.apply(e.j, vi)).norm(), 1e-4);
        EXPECT_LT((stiff.apply(e.i, vj) - stiff.apply(e.j, vj)).norm(), 1e-4);
    }
}

TEST(L2Baseline, MatchesDenseLeastSquares) {
    Shape t = make_uv_sphere(5, 7, 1.0);
    t.edges = build_edge_graph(t);
    Shape target = t;
    target.vertices += 0.2 * oracle::random_dense(3, t.size(), 12);
    Eigen::VectorXd sw = (oracle::random_dense(static_cast<Eigen::Index>(t.edges.size()), 1, 13).array().abs() + 0.2).matrix();
    CorrespondenceMap c = instances::index_map(t.size());
    for (int i = 0; i < t.size(); i += 3) c.clear(i);
    const auto sys = assemble_system(t, target, c, Eigen::Map<const Eigen::VectorXd>(c.weights.data(), c.size()), sw);
    const double alpha = 0.8;
    const TransformStack x = solve_l2_baseline(sys, alpha);
    const Eigen::MatrixXd wv = sys.data_weights.asDiagonal() * Eigen::MatrixXd(sys.V);
    const Eigen::MatrixXd wb = std::sqrt(alpha) * (sys.smooth_weights.asDiagonal() * Eigen::MatrixXd(sys.B));
    Eigen::MatrixXd a(wv.rows() + wb.rows(), wv.cols());
    a << wv, wb;
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(a.rows(), 3);
    rhs.topRows(wv.rows()) = sys.data_weights.asDiagonal() * Eigen::MatrixXd(sys.target);
    const Eigen::MatrixXd dense = a.colPivHouseholderQr().solve(rhs);
    EXPECT_LT((x.stacked() - dense).norm() / dense.norm(), 1e-8);
}

TEST(Variants, CleanRigidDataIsFitExactly) {
    Shape s = make_uv_sphere(5, 8, 1.0);
    s.edges = build_edge_graph(s);
    RigidSpec r;
    r.rotation = Eigen::AngleAxisd(0.3, Eigen::Vector3d(0, 1, 1).normalized()).toRotationMatrix();
    r.translation = Eigen::Vector3d(0.2, -0.1, 0.05);
    const SynthResult syn = synth_deformation(s, r);
    const auto sys = unit_system(s, syn.target, instances::index_map(s.size()));
    const auto x0 = TransformStack::identity(s.size());
    SolverConfig cfg;
    cfg.rho1 = cfg.rho2 = 1.05;
    cfg.inner_iters = 40;
    cfg.inner_tol = 1e-10;
    const double n_rows = std::sqrt(double(s.size()));
    EXPECT_LT(data_residual(sys, admm_solve(sys, x0, cfg).X).norm() / n_rows, 1e-6);
    EXPECT_LT(data_residual(sys, solve_variant(Variant::snr, sys, x0, cfg).X).norm() / n_rows, 1e-6);
    EXPECT_LT(data_residual(sys, solve_variant(Variant::group_sparse, sys, x0, cfg).X).norm() / n_rows, 1e-6);
    EXPECT_LT(data_residual(sys, solve_l2_baseline(sys, 1.0)).norm() / n_rows, 1e-6);
    EXPECT_THROW(solve_variant(Variant::l2, sys, x0, cfg), ConfigError);
}

TEST(Variants, DualSparseBeatsL2UnderOutliers) {
    const auto b = instances::tube_bend();
    const OutlierResult noisy = perturb_outliers(b.synth.target, 0.05, 3.0, 3);
    const auto corr = instances::index_map(b.tmpl.size());
    SolverConfig dual, snr, l2;
    snr.variant = Variant::snr;
    l2.variant = Variant::l2;
    auto err = [&](const SolverConfig& c) {
        return fitting_error(register_nonrigid(b.tmpl, noisy.shape, corr, c).X, b.tmpl, b.synth.ground_truth)
            .mean_distance;
    };
    const double e_dual = err(dual), e_snr = err(snr), e_l2 = err(l2);
    RecordProperty("dual", std::to_string(e_dual));
    RecordProperty("snr", std::to_string(e_snr));
    RecordProperty("l2", std::to_string(e_l2));
    EXPECT_LE(e_dual, e_l2);
}

TEST(Variants, ElementwiseKeepsAxisPatternGroupShrinksRadially) {
    // one residual row with a large x deviation and a small y deviation
    const Eigen::RowVector3d row(2.0, 0.5, 0.0);
    const double tau = 1.0;
    Eigen::RowVector3d elem;
    for (int k = 0; k < 3; ++k) elem[k] = shrink(row[k], tau);
    const Eigen::RowVector3d group = block_shrink(row, tau);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(elem[k], oracle::grid_prox_abs(row[k], tau), 1e-4);
    EXPECT_LT((group - oracle::grid_prox_norm(row, tau)).norm(), 1e-4);
    // element-wise zeroes the small axis and keeps x at |2| - tau
    EXPECT_EQ(elem, Eigen::RowVector3d(1.0, 0.0, 0.0));
    // the group prox keeps the direction and scales the length
    EXPECT_NEAR(group.normalized().dot(row.normalized()), 1.0, 1e-12);
    EXPECT_NEAR(group.norm(), row.norm() - tau, 1e-12);
    EXPECT_GT(group[1], 0.0);
}
