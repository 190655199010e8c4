#include "nrreg/mesh_io.hpp"
#include "nrreg/metrics.hpp"
#include "nrreg/synthesis.hpp"
#include "nrreg/transform_io.hpp"
#include "cli_runner.hpp"
#include "instances.hpp"

#include <gtest/gtest.h>

#include <json.hpp>

using namespace nrreg;
using nrreg::testing::run_cli;
using nrreg::testing::scratch_dir;
using nrreg::testing::slurp;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Cli, RegisterIdenticalShapes) {
    const auto dir = scratch_dir("identical");
    save_shape(make_uv_sphere(6, 9, 1.0), (dir / "s.obj").string());
    const auto r = run_cli(dir, "register --template s.obj --target s.obj --out out");
    ASSERT_EQ(r.code, 0) << r.err;
    const Shape def = load_shape((dir / "out/deformed.obj").string());
    const Shape tgt = load_shape((dir / "s.obj").string());
    EXPECT_LT((def.vertices - tgt.vertices).cwiseAbs().maxCoeff(), 1e-6);
    for (const char* f : {"transforms.txt", "log.json", "manifest.json"}) EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;
    EXPECT_EQ(slurp(dir / "out/transforms.txt").rfind("nonrigid-transforms v1 N=" + std::to_string(tgt.size()) + "\n", 0),
              0u);
    EXPECT_EQ(load_transforms((dir / "out/transforms.txt").string()).size(), tgt.size());
}

TEST(Cli, MissingTemplateNamesThePath) {
    const auto dir = scratch_dir("missing");
    save_shape(make_grid(3, 3, 1, 1), (dir / "t.obj").string());
    const auto r = run_cli(dir, "register --template no_such_template.obj --target t.obj --out out");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("no_such_template.obj"), std::string::npos) << r.err;
}

TEST(Cli, MaxIterationsWithoutConvergenceExitsTwoAndStillWrites) {
    const auto dir = scratch_dir("maxiter");
    ASSERT_EQ(run_cli(dir, "synth --rings 8 --segments 6 --out s").code, 0);
    const auto r = run_cli(dir, "register --template s/template.obj --target s/target.obj --outer-iters 1 --out out");
    EXPECT_EQ(r.code, 2) << r.err;
    EXPECT_TRUE(fs::exists(dir / "out/deformed.obj"));
    EXPECT_EQ(read_json(dir / "out/manifest.json")["exit_code"], 2);
}

TEST(Cli, VariantRunsProduceComparableReports) {
    const auto dir = scratch_dir("variants");
    ASSERT_EQ(run_cli(dir, "synth --out s").code, 0);
    ASSERT_EQ(run_cli(dir, "perturb --input s/target.obj --kind outliers --fraction 0.05 --seed 3 --out p").code, 0);
    // vertex order is preserved by the corruption, so i -> i pairs are valid landmarks
    CorrespondenceMap all = instances::index_map(200);
    std::ofstream(dir / "all.txt") << encode_correspondences(all);
    const std::string common =
        "register --template s/template.obj --target p/corrupted.obj --corr all.txt --ground-truth s/ground_truth.obj";
    const auto a = run_cli(dir, common + " --out dual");
    const auto b = run_cli(dir, common + " --variant l2 --out l2");
    ASSERT_NE(a.code, 1) << a.err;
    ASSERT_NE(b.code, 1) << b.err;
    const json ra = read_json(dir / "dual/error_report.json"), rb = read_json(dir / "l2/error_report.json");
    EXPECT_EQ(read_json(dir / "dual/manifest.json")["config"]["variant"], "dual_sparse");
    EXPECT_EQ(read_json(dir / "l2/manifest.json")["config"]["variant"], "l2");
    EXPECT_LE(ra["mean_distance"].get<double>(), rb["mean_distance"].get<double>());
}

TEST(Cli, PerturbNoiseAndOutliers) {
    const auto dir = scratch_dir("perturb");
    const Shape tube = make_tube(20, 10, 0.15, 2.0);
    save_shape(tube, (dir / "m.ply").string());
    ASSERT_EQ(run_cli(dir, "perturb --input m.ply --kind noise --sigma 0.3 --seed 1 --out n").code, 0);
    EXPECT_EQ(load_shape((dir / "n/corrupted.ply").string()).size(), tube.size());

    ASSERT_EQ(run_cli(dir, "perturb --input m.ply --kind outliers --fraction 0.05 --seed 1 --out o").code, 0);
    EXPECT_EQ(count_lines(slurp(dir / "o/outliers.txt")), 10);  // floor(0.05 * 200)

    ASSERT_EQ(run_cli(dir, "perturb --input m.ply --kind outliers --fraction 0.05 --seed 1 --out o2").code, 0);
    EXPECT_EQ(slurp(dir / "o/corrupted.ply"), slurp(dir / "o2/corrupted.ply"));
    EXPECT_EQ(slurp(dir / "o/outliers.txt"), slurp(dir / "o2/outliers.txt"));
    EXPECT_EQ(run_cli(dir, "perturb --input m.ply --kind wobble --out w").code, 1);
}

TEST(Cli, EvaluateGroundTruthTransforms) {
    const auto dir = scratch_dir("evaluate");
    const Shape s = make_uv_sphere(5, 7, 1.0);
    RigidSpec r;
    r.rotation = Eigen::AngleAxisd(0.5, Eigen::Vector3d::UnitY()).toRotationMatrix();
    r.translation = Eigen::Vector3d(0.5, 0, -1);
    const SynthResult syn = synth_deformation(s, r);
    TransformStack x = TransformStack::identity(s.size());
    Matrix34d blk;
    blk << r.rotation, r.translation;
    for (int i = 0; i < s.size(); ++i) x.set_block(i, blk);
    save_shape(s, (dir / "t.ply").string());
    Shape gt = s;
    gt.vertices = syn.ground_truth;
    save_shape(gt, (dir / "g.ply").string());
    save_transforms(x, (dir / "x.txt").string());
    const auto res = run_cli(dir, "evaluate --template t.ply --transforms x.txt --ground-truth g.ply --out e");
    ASSERT_EQ(res.code, 0) << res.err;
    EXPECT_LT(read_json(dir / "e/error_report.json")["mean_squared"].get<double>(), 1e-24);
    EXPECT_TRUE(fs::exists(dir / "e/error_colored.ply"));

    const auto missing = run_cli(dir, "evaluate --template t.ply --transforms x.txt --out e2");
    EXPECT_EQ(missing.code, 1);
    EXPECT_NE(missing.err.find("ground-truth"), std::string::npos);
}

TEST(Cli, FitResidualsPrefersLaplaceOnPiecewiseRigidResiduals) {
    const auto dir = scratch_dir("fit");
    const auto b = instances::tube_bend();
    save_shape(b.tmpl, (dir / "t.ply").string());
    save_shape(b.synth.target, (dir / "u.ply").string());
    std::ofstream(dir / "c.txt") << encode_correspondences(instances::landmark_map(b.tmpl.size(), 0.1, 7));
    const auto reg = run_cli(dir, "register --template t.ply --target u.ply --corr c.txt --variant snr --out r");
    ASSERT_NE(reg.code, 1) << reg.err;
    const auto r = run_cli(dir, "fit-residuals --template t.ply --target u.ply --transforms r/transforms.txt --out f");
    ASSERT_EQ(r.code, 0) << r.err;
    const json f = read_json(dir / "f/fit.json");
    for (const char* mode : {"per_axis_l1", "euclidean"})
        EXPECT_GT(f[mode]["laplace"]["loglik"].get<double>(), f[mode]["gauss"]["loglik"].get<double>()) << mode;
}

TEST(Cli, CompareWritesThreeRowsPerVariant) {
    const auto dir = scratch_dir("compare");
    ASSERT_EQ(run_cli(dir, "synth --rings 8 --segments 6 --out s").code, 0);
    const auto r = run_cli(dir,
                           "compare --template s/template.obj --ground-truth s/ground_truth.obj --index-corr "
                           "--variants dual_sparse,l2 --noise 0.3,0.7,1.0 --outer-iters 2 --out c");
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string csv = slurp(dir / "c/summary.csv");
    EXPECT_EQ(count_lines(csv), 1 + 2 * 3);
    EXPECT_EQ(csv.rfind("variant,corruption,level,alpha,", 0), 0u);
    int dual = 0, l2 = 0;
    std::istringstream in(csv);
    for (std::string line; std::getline(in, line);) {
        dual += line.rfind("dual_sparse,noise,", 0) == 0;
        l2 += line.rfind("l2,noise,", 0) == 0;
    }
    EXPECT_EQ(dual, 3);
    EXPECT_EQ(l2, 3);
}

TEST(Cli, ConfigFilePrecedence) {
    const auto dir = scratch_dir("config");
    save_shape(make_uv_sphere(4, 6, 1.0), (dir / "s.obj").string());
    std::ofstream(dir / "cfg.json") << R"({"alpha": 5.0, "eps_data": 0.02, "variant": "snr"})";
    ASSERT_EQ(run_cli(dir, "register --template s.obj --target s.obj --config cfg.json --out a").code, 0);
    ASSERT_EQ(run_cli(dir, "register --template s.obj --target s.obj --config cfg.json --alpha 2 --out b").code, 0);
    const json a = read_json(dir / "a/manifest.json")["config"], b = read_json(dir / "b/manifest.json")["config"];
    EXPECT_EQ(a["alpha"], 5.0);
    EXPECT_EQ(b["alpha"], 2.0);
    EXPECT_EQ(b["eps_data"], 0.02);
    EXPECT_EQ(b["variant"], "snr");
    EXPECT_EQ(a["beta"], 0.1);

    std::ofstream(dir / "bad.json") << R"({"alpah": 5.0})";
    const auto bad = run_cli(dir, "register --template s.obj --target s.obj --config bad.json --out c");
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.err.find("alpah"), std::string::npos);
    std::ofstream(dir / "neg.json") << R"({"rho1": 0.5})";
    EXPECT_EQ(run_cli(dir, "register --template s.obj --target s.obj --config neg.json --out d").code, 1);
}

TEST(Cli, ReplayReproducesOutputsAndDetectsChangedInputs) {
    const auto dir = scratch_dir("replay");
    ASSERT_EQ(run_cli(dir, "synth --rings 8 --segments 6 --landmarks 0.2 --seed 4 --out s").code, 0);
    const auto reg = run_cli(dir,
                             "register --template s/template.obj --target s/target.obj --corr s/landmarks.txt "
                             "--ground-truth s/ground_truth.obj --outer-iters 4 --out r");
    ASSERT_NE(reg.code, 1) << reg.err;
    const auto rep = run_cli(dir, "replay r/manifest.json --out r2");
    EXPECT_EQ(rep.code, 0) << rep.err;
    for (const char* f : {"deformed.obj", "transforms.txt", "log.json", "error_report.json"})
        EXPECT_EQ(slurp(dir / "r" / f), slurp(dir / "r2" / f)) << f;
    EXPECT_EQ(run_cli(dir, "replay s/manifest.json --out s2").code, 0);

    std::ofstream(dir / "s/target.obj", std::ios::app) << "# edited\n";
    const auto changed = run_cli(dir, "replay r/manifest.json --out r3");
    EXPECT_EQ(changed.code, 1);
    EXPECT_NE(changed.err.find("target"), std::string::npos);
}

TEST(Cli, LogLevelFromEnvironment) {
    const auto dir = scratch_dir("loglevel");
    save_shape(make_uv_sphere(4, 6, 1.0), (dir / "s.obj").string());
    const auto quiet = run_cli(dir, "register --template s.obj --target s.obj --out a");
    const auto loud = run_cli(dir, "register --template s.obj --target s.obj --out b", "NRREG_LOG_LEVEL=debug");
    EXPECT_EQ(quiet.err.find("[info]"), std::string::npos);
    EXPECT_NE(loud.err.find("[info]"), std::string::npos);
    EXPECT_NE(loud.err.find("[debug]"), std::string::npos);
}

TEST(Cli, InputsAreNotModified) {
    const auto dir = scratch_dir("readonly");
    ASSERT_EQ(run_cli(dir, "synth --rings 8 --segments 6 --out s").code, 0);
    const std::string before = slurp(dir / "s/target.obj") + slurp(dir / "s/template.obj");
    run_cli(dir, "register --template s/template.obj --target s/target.obj --outer-iters 2 --out r");
    run_cli(dir, "perturb --input s/target.obj --kind noise --sigma 0.5 --out p");
    EXPECT_EQ(slurp(dir / "s/target.obj") + slurp(dir / "s/template.obj"), before);
}
