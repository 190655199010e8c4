#include "nrreg/correspondence.hpp"
#include "nrreg/mesh_io.hpp"
#include "nrreg/metrics.hpp"
#include "nrreg/solver.hpp"
#include "nrreg/synthesis.hpp"
#include "nrreg/transform_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace nrreg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitNotConverged = 2;

std::string fnv1a64(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string hash_file(const std::string& path) { return fnv1a64(detail::read_file_bytes(path)); }

void write_text(const std::string& path, const std::string& text) { detail::write_file_bytes(path, text); }

std::string join(const fs::path& dir, const std::string& name) { return (dir / name).string(); }

class Timer {
public:
    double lap_ms() {
        const auto now = std::chrono::steady_clock::now();
        const double ms = std::chrono::duration<double, std::milli>(now - last_).count();
        last_ = now;
        return ms;
    }

private:
    std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

/// Collects everything a run needs to be replayed; written once per command.
struct Manifest {
    std::string command;
    std::vector<std::string> argv;
    json config = nullptr;
    json inputs = json::object();
    json outputs = json::object();
    json timings = json::object();
    std::uint64_t seed = 0;
    int exit_code = 0;

    void input(const std::string& key, const std::string& path) {
        inputs[key] = {{"path", path}, {"fnv1a64", hash_file(path)}};
    }
    void output(const std::string& key, const std::string& path) {
        outputs[key] = {{"path", path}, {"fnv1a64", hash_file(path)}};
    }

    void write(const fs::path& dir) const {
        json j;
        j["format"] = "nrreg-manifest v1";
        j["command"] = command;
        j["argv"] = argv;
        j["config"] = config;
        j["seed"] = seed;
        j["inputs"] = inputs;
        j["outputs"] = outputs;
        j["wall_clock_ms"] = timings;
        j["exit_code"] = exit_code;
        write_text(join(dir, "manifest.json"), j.dump(2) + "\n");
    }
};

// ---- solver configuration -------------------------------------------------

json config_to_json(const SolverConfig& c) {
    return json{{"alpha", c.alpha},
                {"beta", c.beta},
                {"mu1_init", c.mu1_init},
                {"mu2_init", c.mu2_init},
                {"rho1", c.rho1},
                {"rho2", c.rho2},
                {"eps_data", c.eps_data},
                {"eps_smooth", c.eps_smooth},
                {"outer_iters", c.outer_iters},
                {"inner_iters", c.inner_iters},
                {"inner_tol", c.inner_tol},
                {"outer_tol", c.outer_tol},
                {"variant", to_string(c.variant)},
                {"reweight", c.reweight},
                {"reweight_first", c.reweight_first},
                {"reflection_fix", c.reflection_fix == ReflectionFix::kabsch ? "kabsch" : "negate"},
                {"rng_seed", c.rng_seed},
                {"closest_point", c.closest_point},
                {"max_dist", c.max_dist},
                {"max_normal_angle", c.max_normal_angle},
                {"knn", c.knn}};
}

ReflectionFix reflection_from_string(const std::string& s) {
    if (s == "kabsch") return ReflectionFix::kabsch;
    if (s == "negate") return ReflectionFix::negate;
    throw ConfigError("unknown reflection_fix '" + s + "' (expected kabsch or negate)");
}

void apply_config_json(SolverConfig& c, const json& j, const std::string& origin) {
    if (!j.is_object()) throw ConfigError(origin + ": config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "alpha") c.alpha = v.get<double>();
            else if (key == "beta") c.beta = v.get<double>();
            else if (key == "mu1_init") c.mu1_init = v.get<double>();
            else if (key == "mu2_init") c.mu2_init = v.get<double>();
            else if (key == "rho1") c.rho1 = v.get<double>();
            else if (key == "rho2") c.rho2 = v.get<double>();
            else if (key == "eps_data") c.eps_data = v.get<double>();
            else if (key == "eps_smooth") c.eps_smooth = v.get<double>();
            else if (key == "outer_iters") c.outer_iters = v.get<int>();
            else if (key == "inner_iters") c.inner_iters = v.get<int>();
            else if (key == "inner_tol") c.inner_tol = v.get<double>();
            else if (key == "outer_tol") c.outer_tol = v.get<double>();
            else if (key == "variant") c.variant = variant_from_string(v.get<std::string>());
            else if (key == "reweight") c.reweight = v.get<bool>();
            else if (key == "reweight_first") c.reweight_first = v.get<bool>();
            else if (key == "reflection_fix") c.reflection_fix = reflection_from_string(v.get<std::string>());
            else if (key == "rng_seed") c.rng_seed = v.get<std::uint64_t>();
            else if (key == "closest_point") c.closest_point = v.get<bool>();
            else if (key == "max_dist") c.max_dist = v.get<double>();
            else if (key == "max_normal_angle") c.max_normal_angle = v.get<double>();
            else if (key == "knn") c.knn = v.get<int>();
            else throw ConfigError(origin + ": unknown config key '" + key + "'");
        } catch (const json::exception& e) {
            throw ConfigError(origin + ": bad value for '" + key + "': " + e.what());
        }
    }
}

/// Solver flags shared by register and compare. Unset flags leave the value
/// from the config file (or the built-in default) alone.
struct SolverFlags {
    std::string config_path;
    std::optional<double> alpha, beta, mu1, mu2, rho1, rho2, eps, eps_data, eps_smooth, inner_tol, outer_tol,
        max_dist, max_normal_angle;
    std::optional<int> outer_iters, inner_iters, knn;
    std::optional<std::string> variant, reflection_fix;
    std::optional<std::uint64_t> seed;
    bool no_reweight = false, reweight_first = false, no_closest_point = false;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "flat JSON file with SolverConfig fields; flags override it");
        app->add_option("--alpha", alpha, "smoothness weight");
        app->add_option("--beta", beta, "orthogonality weight");
        app->add_option("--mu1", mu1, "initial data penalty");
        app->add_option("--mu2", mu2, "initial smoothness penalty");
        app->add_option("--rho1", rho1, "data penalty growth");
        app->add_option("--rho2", rho2, "smoothness penalty growth");
        app->add_option("--eps", eps, "reweighting floor for both terms");
        app->add_option("--eps-data", eps_data);
        app->add_option("--eps-smooth", eps_smooth);
        app->add_option("--outer-iters", outer_iters);
        app->add_option("--inner-iters", inner_iters);
        app->add_option("--inner-tol", inner_tol);
        app->add_option("--outer-tol", outer_tol);
        app->add_option("--variant", variant, "dual_sparse, l2, snr or group_sparse");
        app->add_option("--reflection-fix", reflection_fix, "kabsch or negate");
        app->add_option("--seed", seed);
        app->add_option("--max-dist", max_dist, "closest-point gate in mean edge lengths");
        app->add_option("--max-normal-angle", max_normal_angle, "degrees");
        app->add_option("--knn", knn, "neighbours per vertex for point clouds");
        app->add_flag("--no-reweight", no_reweight);
        app->add_flag("--reweight-first", reweight_first);
        app->add_flag("--no-closest-point", no_closest_point);
    }

    SolverConfig resolve() const {
        SolverConfig c;
        if (!config_path.empty()) {
            json j;
            try {
                j = json::parse(detail::read_file_bytes(config_path));
            } catch (const json::parse_error& e) {
                throw ConfigError(config_path + ": " + e.what());
            }
            apply_config_json(c, j, config_path);
        }
        if (alpha) c.alpha = *alpha;
        if (beta) c.beta = *beta;
        if (mu1) c.mu1_init = *mu1;
        if (mu2) c.mu2_init = *mu2;
        if (rho1) c.rho1 = *rho1;
        if (rho2) c.rho2 = *rho2;
        if (eps) c.eps_data = c.eps_smooth = *eps;
        if (eps_data) c.eps_data = *eps_data;
        if (eps_smooth) c.eps_smooth = *eps_smooth;
        if (outer_iters) c.outer_iters = *outer_iters;
        if (inner_iters) c.inner_iters = *inner_iters;
        if (inner_tol) c.inner_tol = *inner_tol;
        if (outer_tol) c.outer_tol = *outer_tol;
        if (variant) c.variant = variant_from_string(*variant);
        if (reflection_fix) c.reflection_fix = reflection_from_string(*reflection_fix);
        if (seed) c.rng_seed = *seed;
        if (max_dist) c.max_dist = *max_dist;
        if (max_normal_angle) c.max_normal_angle = *max_normal_angle;
        if (knn) c.knn = *knn;
        if (no_reweight) c.reweight = false;
        if (reweight_first) c.reweight_first = true;
        if (no_closest_point) c.closest_point = false;
        c.validate();
        return c;
    }
};

// ---- shared helpers -------------------------------------------------------

fs::path prepare_out_dir(const std::string& out) {
    fs::path dir(out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory '" + out + "'");
    return dir;
}

std::string mesh_ext(const std::string& like) {
    return format_from_path(like) == MeshFormat::ply ? ".ply" : ".obj";
}

Eigen::Matrix3Xd load_ground_truth(const std::string& path, int n) {
    const Shape g = load_shape(path);
    if (g.size() != n)
        throw Error("ground truth '" + path + "' has " + std::to_string(g.size()) + " vertices, template has " +
                    std::to_string(n));
    return g.vertices;
}

json histogram_json(const Histogram& h) {
    return json{{"bin_width", h.bin_width}, {"bin_left", h.bin_left}, {"counts", h.counts}};
}

json error_report_json(const ErrorReport& r, double diag) {
    return json{{"mean_squared", r.mean},
                {"median_squared", r.median},
                {"max_squared", r.max},
                {"mean_distance", r.mean_distance},
                {"bbox_diagonal", diag},
                {"relative_mean_distance", diag > 0 ? r.mean_distance / diag : 0.0},
                {"histogram", histogram_json(r.histogram)},
                {"per_vertex_squared", r.per_vertex}};
}

/// Writes error_report.json and error_colored.ply; returns the report.
ErrorReport write_error_report(const TransformStack& x, const Shape& tmpl, const Eigen::Matrix3Xd& gt,
                               const fs::path& dir, Manifest& m) {
    const ErrorReport rep = fitting_error(x, tmpl, gt);
    const std::string report = join(dir, "error_report.json");
    write_text(report, error_report_json(rep, bounding_box_diagonal(tmpl.vertices)).dump(2) + "\n");
    const std::string colored = join(dir, "error_colored.ply");
    save_shape(rep.colored_mesh, colored);
    m.output("error_report", report);
    m.output("error_colored", colored);
    return rep;
}

json iteration_log_json(const RegistrationResult& r) {
    json it = json::array();
    for (const IterationLog& l : r.log) {
        it.push_back({{"outer", l.outer},
                      {"inner", l.inner},
                      {"energies",
                       {{"data", l.energies.data},
                        {"smooth", l.energies.smooth},
                        {"orth", l.energies.orth},
                        {"total", l.energies.total}}},
                      {"residuals", {{"data", l.residual_data}, {"smooth", l.residual_smooth}}},
                      {"matched", l.matched},
                      {"displacement", l.displacement}});
    }
    return json{{"converged", r.converged}, {"iterations", it}};
}

Eigen::Vector3d parse_vec3(const std::vector<double>& v, const char* name) {
    if (v.size() != 3) throw ConfigError(std::string(name) + " needs exactly 3 numbers");
    return Eigen::Vector3d(v[0], v[1], v[2]);
}

// ---- commands -------------------------------------------------------------

struct RegisterArgs {
    std::string tmpl, target, corr, out, ground_truth;
    SolverFlags solver;
};

int cmd_register(const RegisterArgs& a, Manifest& m) {
    Timer timer;
    const fs::path dir = prepare_out_dir(a.out);
    const SolverConfig cfg = a.solver.resolve();
    m.config = config_to_json(cfg);
    m.seed = cfg.rng_seed;
    m.input("template", a.tmpl);
    m.input("target", a.target);
    if (!a.solver.config_path.empty()) m.input("config", a.solver.config_path);

    const Shape tmpl = load_shape(a.tmpl);
    const Shape target = load_shape(a.target);
    CorrespondenceMap landmarks(tmpl.size());
    if (!a.corr.empty()) {
        m.input("correspondences", a.corr);
        landmarks = load_correspondences(a.corr, tmpl.size(), target.size());
    }
    Eigen::Matrix3Xd gt;
    if (!a.ground_truth.empty()) {
        m.input("ground_truth", a.ground_truth);
        gt = load_ground_truth(a.ground_truth, tmpl.size());
    }
    m.timings["load"] = timer.lap_ms();
    spdlog::info("register: template {} vertices, target {} vertices, {} landmarks, variant {}", tmpl.size(),
                 target.size(), landmarks.matched_count(), to_string(cfg.variant));

    const RegistrationResult res = register_nonrigid(tmpl, target, landmarks, cfg);
    m.timings["solve"] = timer.lap_ms();
    for (const IterationLog& l : res.log)
        spdlog::debug("outer {}: inner {} energy {:.6g} matched {} displacement {:.3g}", l.outer, l.inner,
                      l.energies.total, l.matched, l.displacement);

    const std::string deformed = join(dir, "deformed" + mesh_ext(a.tmpl));
    save_shape(res.deformed, deformed);
    m.output("deformed", deformed);
    const std::string transforms = join(dir, "transforms.txt");
    save_transforms(res.X, transforms);
    m.output("transforms", transforms);
    const std::string log = join(dir, "log.json");
    write_text(log, iteration_log_json(res).dump(2) + "\n");
    m.output("log", log);
    if (gt.size()) {
        const ErrorReport rep = write_error_report(res.X, tmpl, gt, dir, m);
        spdlog::info("mean fitting distance {:.6g} ({:.3g} of bbox diagonal)", rep.mean_distance,
                     rep.mean_distance / bounding_box_diagonal(tmpl.vertices));
    }
    m.timings["write"] = timer.lap_ms();
    if (!res.converged) spdlog::warn("stopped after {} outer iterations without converging", res.log.size());
    return res.converged ? kExitOk : kExitNotConverged;
}

struct PerturbArgs {
    std::string input, kind, out;
    double sigma = 0.3;
    double fraction = 0.05;
    double outlier_sigma = 3.0;
    std::uint64_t seed = 0;
};

int cmd_perturb(const PerturbArgs& a, Manifest& m) {
    Timer timer;
    const fs::path dir = prepare_out_dir(a.out);
    m.seed = a.seed;
    m.config = json{{"kind", a.kind}, {"sigma", a.sigma}, {"fraction", a.fraction}, {"outlier_sigma", a.outlier_sigma}};
    m.input("input", a.input);
    const Shape in = load_shape(a.input);
    m.timings["load"] = timer.lap_ms();
    const std::string shape_path = join(dir, "corrupted" + mesh_ext(a.input));
    if (a.kind == "noise") {
        save_shape(perturb_noise(in, a.sigma, a.seed), shape_path);
        m.output("corrupted", shape_path);
    } else if (a.kind == "outliers") {
        const OutlierResult r = perturb_outliers(in, a.fraction, a.outlier_sigma, a.seed);
        save_shape(r.shape, shape_path);
        m.output("corrupted", shape_path);
        std::string idx;
        for (int i : r.indices) idx += std::to_string(i) + "\n";
        const std::string idx_path = join(dir, "outliers.txt");
        write_text(idx_path, idx);
        m.output("outlier_indices", idx_path);
    } else {
        throw ConfigError("unknown --kind '" + a.kind + "' (expected noise or outliers)");
    }
    m.timings["perturb"] = timer.lap_ms();
    return kExitOk;
}

struct EvaluateArgs {
    std::string tmpl, transforms, ground_truth, out;
};

int cmd_evaluate(const EvaluateArgs& a, Manifest& m) {
    if (a.ground_truth.empty()) throw Error("evaluate needs --ground-truth");
    Timer timer;
    const fs::path dir = prepare_out_dir(a.out);
    m.input("template", a.tmpl);
    m.input("transforms", a.transforms);
    m.input("ground_truth", a.ground_truth);
    const Shape tmpl = load_shape(a.tmpl);
    const TransformStack x = load_transforms(a.transforms);
    if (x.size() != tmpl.size())
        throw Error("transform file has " + std::to_string(x.size()) + " blocks, template has " +
                    std::to_string(tmpl.size()) + " vertices");
    const Eigen::Matrix3Xd gt = load_ground_truth(a.ground_truth, tmpl.size());
    m.timings["load"] = timer.lap_ms();
    const ErrorReport rep = write_error_report(x, tmpl, gt, dir, m);
    m.timings["evaluate"] = timer.lap_ms();
    std::printf("mean_squared %.9g\nmean_distance %.9g\nmedian_squared %.9g\nmax_squared %.9g\n", rep.mean,
                rep.mean_distance, rep.median, rep.max);
    return kExitOk;
}

struct FitArgs {
    std::string tmpl, target, transforms, corr, out, mode = "both";
    double max_dist = 3.0, max_normal_angle = 60.0;
};

json fit_json(const DistributionFit& f) {
    return json{{"samples", f.samples},
                {"laplace", {{"location", f.laplace_location}, {"scale", f.laplace_scale}, {"loglik", f.loglik_laplace}}},
                {"gauss", {{"mean", f.gauss_mean}, {"std", f.gauss_std}, {"loglik", f.loglik_gauss}}},
                {"preferred", f.loglik_laplace > f.loglik_gauss ? "laplace" : "gauss"}};
}

int cmd_fit_residuals(const FitArgs& a, Manifest& m) {
    Timer timer;
    const fs::path dir = prepare_out_dir(a.out);
    m.config = json{{"mode", a.mode}, {"max_dist", a.max_dist}, {"max_normal_angle", a.max_normal_angle}};
    m.input("template", a.tmpl);
    m.input("target", a.target);
    m.input("transforms", a.transforms);
    const Shape tmpl = prepare_shape(load_shape(a.tmpl), 6);
    const Shape target = load_shape(a.target);
    const TransformStack x = load_transforms(a.transforms);
    if (x.size() != tmpl.size()) throw Error("transform count does not match the template");
    CorrespondenceMap corr(tmpl.size());
    if (!a.corr.empty()) {
        m.input("correspondences", a.corr);
        corr = load_correspondences(a.corr, tmpl.size(), target.size());
    } else {
        corr = closest_point_refresh(deform(tmpl, x), prepare_shape(target, 6), {a.max_dist, a.max_normal_angle});
    }
    m.timings["load"] = timer.lap_ms();
    const SystemMatrices sys =
        assemble_system(tmpl, target, corr, Eigen::Map<const Eigen::VectorXd>(corr.weights.data(), corr.size()),
                        Eigen::VectorXd::Ones(static_cast<Eigen::Index>(tmpl.edges.size())));
    json out = json::object();
    if (a.mode == "per_axis_l1" || a.mode == "both")
        out["per_axis_l1"] = fit_json(fit_residual_distributions(residuals_for_analysis(x, sys, ResidualMode::per_axis_l1)));
    if (a.mode == "euclidean" || a.mode == "both")
        out["euclidean"] = fit_json(fit_residual_distributions(residuals_for_analysis(x, sys, ResidualMode::euclidean)));
    if (out.empty()) throw ConfigError("unknown --mode '" + a.mode + "' (expected per_axis_l1, euclidean or both)");
    const std::string path = join(dir, "fit.json");
    write_text(path, out.dump(2) + "\n");
    m.output("fit", path);
    m.timings["fit"] = timer.lap_ms();
    return kExitOk;
}

struct CompareArgs {
    std::string tmpl, ground_truth, corr, out;
    bool index_corr = false;
    std::vector<std::string> variants{"dual_sparse", "l2"};
    std::vector<double> noise, outliers, alpha_grid;
    double outlier_sigma = 3.0;
    std::uint64_t seed = 0;
    SolverFlags solver;
};

int cmd_compare(const CompareArgs& a, Manifest& m) {
    Timer timer;
    const fs::path dir = prepare_out_dir(a.out);
    const SolverConfig base = a.solver.resolve();
    m.config = config_to_json(base);
    m.config["variants"] = a.variants;
    m.config["noise"] = a.noise;
    m.config["outliers"] = a.outliers;
    m.config["alpha_grid"] = a.alpha_grid;
    m.config["outlier_sigma"] = a.outlier_sigma;
    m.seed = a.seed;
    m.input("template", a.tmpl);
    m.input("ground_truth", a.ground_truth);
    const Shape tmpl = load_shape(a.tmpl);
    Shape clean = tmpl;
    clean.vertices = load_ground_truth(a.ground_truth, tmpl.size());
    clean.normals.resize(3, 0);
    if (clean.has_faces()) clean.normals = compute_vertex_normals(clean).normals;
    CorrespondenceMap landmarks(tmpl.size());
    if (!a.corr.empty()) {
        m.input("correspondences", a.corr);
        landmarks = load_correspondences(a.corr, tmpl.size(), tmpl.size());
    } else if (a.index_corr) {
        for (int i = 0; i < tmpl.size(); ++i) landmarks.set(i, i);
    }
    if (a.noise.empty() && a.outliers.empty()) throw ConfigError("compare needs --noise and/or --outliers levels");
    m.timings["load"] = timer.lap_ms();

    const double diag = bounding_box_diagonal(tmpl.vertices);
    std::string csv = "variant,corruption,level,alpha,mean_squared,mean_distance,relative_mean_distance\n";
    auto run_cell = [&](const std::string& variant, const std::string& kind, double level, const Shape& target) {
        SolverConfig cfg = base;
        cfg.variant = variant_from_string(variant);
        std::vector<double> alphas = a.alpha_grid.empty() ? std::vector<double>{base.alpha} : a.alpha_grid;
        double best_alpha = alphas.front();
        ErrorReport best;
        best.mean_distance = std::numeric_limits<double>::infinity();
        for (double alpha : alphas) {
            cfg.alpha = alpha;
            const RegistrationResult r = register_nonrigid(tmpl, target, landmarks, cfg);
            ErrorReport rep = fitting_error(r.X, tmpl, clean.vertices);
            spdlog::info("compare {} {}={} alpha={} mean distance {:.6g}", variant, kind, level, alpha,
                         rep.mean_distance);
            if (rep.mean_distance < best.mean_distance) {
                best = std::move(rep);
                best_alpha = alpha;
            }
        }
        char row[256];
        std::snprintf(row, sizeof row, "%s,%s,%.9g,%.9g,%.9g,%.9g,%.9g\n", variant.c_str(), kind.c_str(), level,
                      best_alpha, best.mean, best.mean_distance, best.mean_distance / diag);
        csv += row;
    };
    for (const std::string& variant : a.variants) {
        for (double s : a.noise) run_cell(variant, "noise", s, perturb_noise(clean, s, a.seed));
        for (double f : a.outliers)
            run_cell(variant, "outliers", f, perturb_outliers(clean, f, a.outlier_sigma, a.seed).shape);
    }
    m.timings["sweep"] = timer.lap_ms();
    const std::string path = join(dir, "summary.csv");
    write_text(path, csv);
    m.output("summary", path);
    return kExitOk;
}

struct SynthArgs {
    std::string tmpl, primitive = "tube", deform = "bend", out;
    int rings = 20, segments = 10;
    double radius = 0.15, length = 2.0;
    double angle_deg = 45.0, band = 0.2;
    std::vector<double> axis{0, 0, 1}, pivot{1, 0, 0}, split_dir{1, 0, 0}, translation{0, 0, 0};
    double landmarks = 0.0;
    std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a, Manifest& m) {
    Timer timer;
    const fs::path dir = prepare_out_dir(a.out);
    m.seed = a.seed;
    m.config = json{{"primitive", a.tmpl.empty() ? a.primitive : "file"},
                    {"rings", a.rings},
                    {"segments", a.segments},
                    {"radius", a.radius},
                    {"length", a.length},
                    {"deform", a.deform},
                    {"angle_deg", a.angle_deg},
                    {"axis", a.axis},
                    {"pivot", a.pivot},
                    {"split_dir", a.split_dir},
                    {"band", a.band},
                    {"translation", a.translation},
                    {"landmarks", a.landmarks}};
    Shape tmpl;
    std::string ext = ".obj";
    if (!a.tmpl.empty()) {
        m.input("template", a.tmpl);
        tmpl = load_shape(a.tmpl);
        ext = mesh_ext(a.tmpl);
    } else if (a.primitive == "tube") {
        tmpl = make_tube(a.rings, a.segments, a.radius, a.length);
    } else if (a.primitive == "grid") {
        tmpl = make_grid(a.rings, a.segments, a.length, a.length * a.segments / std::max(a.rings, 1));
    } else if (a.primitive == "sphere") {
        tmpl = make_uv_sphere(a.rings, a.segments, a.radius);
    } else {
        throw ConfigError("unknown --primitive '" + a.primitive + "' (expected tube, grid or sphere)");
    }
    const double angle = a.angle_deg * std::numbers::pi / 180.0;
    DeformationSpec deformation;
    if (a.deform == "rigid") {
        RigidSpec r;
        r.rotation = Eigen::AngleAxisd(angle, parse_vec3(a.axis, "--axis").normalized()).toRotationMatrix();
        r.translation = parse_vec3(a.translation, "--translation");
        deformation = r;
    } else if (a.deform == "bend") {
        BendSpec b;
        b.pivot = parse_vec3(a.pivot, "--pivot");
        b.axis = parse_vec3(a.axis, "--axis").normalized();
        b.split_dir = parse_vec3(a.split_dir, "--split-dir").normalized();
        b.angle = angle;
        b.band = a.band;
        deformation = b;
    } else {
        throw ConfigError("unknown --deform '" + a.deform + "' (expected rigid or bend)");
    }
    const SynthResult syn = synth_deformation(tmpl, deformation);
    m.timings["synth"] = timer.lap_ms();

    if (a.tmpl.empty()) {
        const std::string p = join(dir, "template" + ext);
        save_shape(tmpl, p);
        m.output("template", p);
    }
    const std::string target = join(dir, "target" + ext);
    save_shape(syn.target, target);
    m.output("target", target);
    Shape gt = tmpl;
    gt.vertices = syn.ground_truth;
    const std::string gt_path = join(dir, "ground_truth" + ext);
    save_shape(gt, gt_path);
    m.output("ground_truth", gt_path);
    if (a.landmarks > 0) {
        CorrespondenceMap c(tmpl.size());
        for (int i : sample_landmarks(tmpl.size(), a.landmarks, a.seed)) c.set(i, i);
        const std::string p = join(dir, "landmarks.txt");
        write_text(p, encode_correspondences(c));
        m.output("landmarks", p);
    }
    m.timings["write"] = timer.lap_ms();
    return kExitOk;
}

int run(const std::vector<std::string>& args);

int cmd_replay(const std::string& manifest_path, const std::string& out_override) {
    json j;
    try {
        j = json::parse(detail::read_file_bytes(manifest_path));
    } catch (const json::parse_error& e) {
        throw Error(manifest_path + ": " + e.what());
    }
    if (j.value("format", "") != "nrreg-manifest v1") throw Error(manifest_path + ": not an nrreg manifest");
    for (const auto& [key, in] : j["inputs"].items()) {
        const std::string path = in["path"].get<std::string>();
        if (hash_file(path) != in["fnv1a64"].get<std::string>())
            throw Error("input '" + key + "' (" + path + ") changed since the recorded run");
    }
    std::vector<std::string> argv = j["argv"].get<std::vector<std::string>>();
    fs::path out_dir = fs::path(manifest_path).parent_path();
    if (!out_override.empty()) {
        bool replaced = false;
        for (std::size_t k = 0; k + 1 < argv.size(); ++k)
            if (argv[k] == "--out") {
                argv[k + 1] = out_override;
                replaced = true;
            }
        if (!replaced) throw Error("manifest argv has no --out to redirect");
        out_dir = out_override;
    }
    spdlog::info("replaying '{}' into {}", j["command"].get<std::string>(), out_dir.string());
    const int code = run(argv);
    if (code != j["exit_code"].get<int>()) {
        std::fprintf(stderr, "replay: exit code %d differs from recorded %d\n", code, j["exit_code"].get<int>());
        return kExitError;
    }
    const json fresh = json::parse(detail::read_file_bytes(join(out_dir, "manifest.json")));
    int mismatches = 0;
    for (const auto& [key, rec] : j["outputs"].items()) {
        if (!fresh["outputs"].contains(key) ||
            fresh["outputs"][key]["fnv1a64"] != rec["fnv1a64"]) {
            std::fprintf(stderr, "replay: output '%s' differs\n", key.c_str());
            ++mismatches;
        }
    }
    if (mismatches) return kExitError;
    std::printf("replay: %zu outputs identical\n", j["outputs"].size());
    return kExitOk;
}

int run(const std::vector<std::string>& args) {
    CLI::App app{"Non-rigid registration with l1 data and smoothness terms"};
    app.require_subcommand(1);

    RegisterArgs reg;
    auto* c_reg = app.add_subcommand("register", "register a template onto a target");
    c_reg->add_option("--template", reg.tmpl)->required();
    c_reg->add_option("--target", reg.target)->required();
    c_reg->add_option("--corr", reg.corr, "fixed landmark pairs");
    c_reg->add_option("--ground-truth", reg.ground_truth, "mesh of ground-truth template positions");
    c_reg->add_option("--out", reg.out)->required();
    reg.solver.attach(c_reg);

    PerturbArgs per;
    auto* c_per = app.add_subcommand("perturb", "corrupt a shape with normal noise or outliers");
    c_per->add_option("--input", per.input)->required();
    c_per->add_option("--kind", per.kind, "noise or outliers")->required();
    c_per->add_option("--sigma", per.sigma, "noise level in mean edge lengths");
    c_per->add_option("--fraction", per.fraction, "fraction of vertices turned into outliers");
    c_per->add_option("--outlier-sigma", per.outlier_sigma, "outlier displacement level in mean edge lengths");
    c_per->add_option("--seed", per.seed);
    c_per->add_option("--out", per.out)->required();

    EvaluateArgs ev;
    auto* c_ev = app.add_subcommand("evaluate", "fitting error of a transform file against ground truth");
    c_ev->add_option("--template", ev.tmpl)->required();
    c_ev->add_option("--transforms", ev.transforms)->required();
    c_ev->add_option("--ground-truth", ev.ground_truth);
    c_ev->add_option("--out", ev.out)->required();

    FitArgs fit;
    auto* c_fit = app.add_subcommand("fit-residuals", "Laplace vs Gaussian fit of registration residuals");
    c_fit->add_option("--template", fit.tmpl)->required();
    c_fit->add_option("--target", fit.target)->required();
    c_fit->add_option("--transforms", fit.transforms)->required();
    c_fit->add_option("--corr", fit.corr, "correspondences; closest points on the deformed template when absent");
    c_fit->add_option("--mode", fit.mode, "per_axis_l1, euclidean or both");
    c_fit->add_option("--max-dist", fit.max_dist);
    c_fit->add_option("--max-normal-angle", fit.max_normal_angle);
    c_fit->add_option("--out", fit.out)->required();

    CompareArgs cmp;
    auto* c_cmp = app.add_subcommand("compare", "variant x corruption sweep with an optional alpha grid");
    c_cmp->add_option("--template", cmp.tmpl)->required();
    c_cmp->add_option("--ground-truth", cmp.ground_truth, "clean target positions, one per template vertex")
        ->required();
    c_cmp->add_option("--corr", cmp.corr);
    c_cmp->add_flag("--index-corr", cmp.index_corr, "use vertex i -> i as fixed correspondences");
    c_cmp->add_option("--variants", cmp.variants)->delimiter(',');
    c_cmp->add_option("--noise", cmp.noise, "noise levels")->delimiter(',');
    c_cmp->add_option("--outliers", cmp.outliers, "outlier fractions")->delimiter(',');
    c_cmp->add_option("--outlier-sigma", cmp.outlier_sigma);
    c_cmp->add_option("--alpha-grid", cmp.alpha_grid, "keep the best alpha per cell")->delimiter(',');
    c_cmp->add_option("--corruption-seed", cmp.seed);
    c_cmp->add_option("--out", cmp.out)->required();
    cmp.solver.attach(c_cmp);

    SynthArgs syn;
    auto* c_syn = app.add_subcommand("synth", "synthetic rigid or bend deformation with ground truth");
    c_syn->add_option("--template", syn.tmpl, "deform this mesh instead of a primitive");
    c_syn->add_option("--primitive", syn.primitive, "tube, grid or sphere");
    c_syn->add_option("--rings", syn.rings);
    c_syn->add_option("--segments", syn.segments);
    c_syn->add_option("--radius", syn.radius);
    c_syn->add_option("--length", syn.length);
    c_syn->add_option("--deform", syn.deform, "rigid or bend");
    c_syn->add_option("--angle", syn.angle_deg, "degrees");
    c_syn->add_option("--axis", syn.axis)->delimiter(',')->expected(3);
    c_syn->add_option("--pivot", syn.pivot)->delimiter(',')->expected(3);
    c_syn->add_option("--split-dir", syn.split_dir)->delimiter(',')->expected(3);
    c_syn->add_option("--translation", syn.translation)->delimiter(',')->expected(3);
    c_syn->add_option("--band", syn.band);
    c_syn->add_option("--landmarks", syn.landmarks, "fraction of vertices written as i -> i landmarks");
    c_syn->add_option("--seed", syn.seed);
    c_syn->add_option("--out", syn.out)->required();

    std::string manifest_path, replay_out;
    auto* c_rep = app.add_subcommand("replay", "re-run a manifest and check its outputs are byte-identical");
    c_rep->add_option("manifest", manifest_path)->required();
    c_rep->add_option("--out", replay_out, "write into this directory instead of the original one");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitError;
    }

    Manifest m;
    m.argv = args;
    std::string out;
    int code = kExitError;
    try {
        if (*c_rep) return cmd_replay(manifest_path, replay_out);
        if (*c_reg) {
            m.command = "register";
            out = reg.out;
            code = cmd_register(reg, m);
        } else if (*c_per) {
            m.command = "perturb";
            out = per.out;
            code = cmd_perturb(per, m);
        } else if (*c_ev) {
            m.command = "evaluate";
            out = ev.out;
            code = cmd_evaluate(ev, m);
        } else if (*c_fit) {
            m.command = "fit-residuals";
            out = fit.out;
            code = cmd_fit_residuals(fit, m);
        } else if (*c_cmp) {
            m.command = "compare";
            out = cmp.out;
            code = cmd_compare(cmp, m);
        } else if (*c_syn) {
            m.command = "synth";
            out = syn.out;
            code = cmd_synth(syn, m);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitError;
    }
    m.exit_code = code;
    m.write(out);
    return code;
}

void setup_logging() {
    auto logger = spdlog::stderr_color_st("nrreg");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    const char* env = std::getenv("NRREG_LOG_LEVEL");
    auto level = spdlog::level::warn;
    if (env && *env) {
        // from_str maps unknown names to "off"; keep the default for those instead
        const auto parsed = spdlog::level::from_str(env);
        if (parsed != spdlog::level::off || std::string(env) == "off") level = parsed;
    }
    spdlog::set_level(level);
}

}  // namespace

int main(int argc, char** argv) {
    setup_logging();
    return run(std::vector<std::string>(argv + 1, argv + argc));
}
