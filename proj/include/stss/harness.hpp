#pragma once

// Run configuration, synthetic problem generation and the four CLI commands.

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "stss/config_schema.hpp"
#include "stss/ep_engine.hpp"
#include "stss/error.hpp"
#include "stss/io.hpp"
#include "stss/json_schema.hpp"
#include "stss/kernel_algebra.hpp"
#include "stss/metrics.hpp"
#include "stss/prior_model.hpp"

namespace stss::harness {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for a sub-task identified by a path of integers.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = splitmix64(master);
  for (std::uint64_t p : path) s = splitmix64(s ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

struct PriorConfig {
  double nu0 = 0.0;
  double slab_mean = 0.0;
  double slab_variance = 1.0;
  std::string spatial_kernel = "se";
  double lengthscale = 1.0;
  double magnitude = 1.0;
  double spacing = 1.0;
  std::optional<fs::path> coordinates;
  std::string temporal_kernel = "identity";
  double temporal_lengthscale = 1.0;
  double alpha = 0.0;

  SlabParams slab() const { return {slab_mean, slab_variance}; }
};

struct SyntheticConfig {
  Index D = 0;
  Index T = 1;
  std::optional<Index> N;
  std::optional<Index> K;
  double snr_db = 20.0;
  std::string signal = "prior";
  std::vector<double> cluster_centers;
  Index cluster_half_width = 10;
  double amplitude = 1.0;
  bool normalize_columns = false;
  Likelihood likelihood = Likelihood::gaussian;
  double label_noise = 0.0;
};

struct ProblemFiles {
  fs::path A, Y;
  Likelihood likelihood = Likelihood::gaussian;
  double noise_variance = 1.0;
  std::optional<fs::path> truth;
};

struct GridConfig {
  std::string parameter;
  std::vector<double> values;
};

struct MethodConfig {
  std::string name;
  std::string scheme = "full";
  std::string prior = "structured";
};

struct PhaseConfig {
  std::vector<double> ratios;
  int trials = 20;
  std::vector<MethodConfig> methods;
  std::vector<std::string> baselines{"omp", "oracle_ridge"};
  double ridge_lambda = 1e-3;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::optional<ProblemFiles> problem;
  std::optional<SyntheticConfig> synthetic;
  PriorConfig prior;
  EPConfig ep;
  std::optional<GridConfig> grid;
  std::optional<PhaseConfig> phase;
  json raw;
  fs::path base_dir = ".";
};

inline Likelihood parse_likelihood(const std::string& s) {
  if (s == "gaussian") return Likelihood::gaussian;
  if (s == "probit") return Likelihood::probit;
  throw InputError("unknown likelihood '" + s + "'");
}

/// Validates against the declared schema, then fills the typed configuration.
inline RunConfig parse_config(const json& j, const fs::path& base_dir = ".") {
  validate_json(j, json::parse(kConfigSchema));
  RunConfig cfg;
  cfg.raw = j;
  cfg.base_dir = base_dir;
  cfg.seed = j.value("seed", std::uint64_t{0});
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };

  if (j.contains("problem")) {
    const auto& p = j["problem"];
    ProblemFiles pf;
    pf.A = resolve(p["A"].get<std::string>());
    pf.Y = resolve(p["Y"].get<std::string>());
    pf.likelihood = parse_likelihood(p.value("likelihood", "gaussian"));
    pf.noise_variance = p.value("noise_variance", 1.0);
    if (p.contains("truth")) pf.truth = resolve(p["truth"].get<std::string>());
    cfg.problem = pf;
  }
  if (j.contains("synthetic")) {
    const auto& s = j["synthetic"];
    SyntheticConfig sc;
    sc.D = s["D"].get<Index>();
    sc.T = s.value("T", Index{1});
    if (s.contains("N")) sc.N = s["N"].get<Index>();
    if (s.contains("K")) sc.K = s["K"].get<Index>();
    sc.snr_db = s.value("snr_db", 20.0);
    sc.signal = s.value("signal", "prior");
    sc.cluster_centers = s.value("cluster_centers", std::vector<double>{});
    sc.cluster_half_width = s.value("cluster_half_width", Index{10});
    sc.amplitude = s.value("amplitude", 1.0);
    sc.normalize_columns = s.value("normalize_columns", false);
    sc.likelihood = parse_likelihood(s.value("likelihood", "gaussian"));
    sc.label_noise = s.value("label_noise", 0.0);
    if (sc.K && *sc.K > sc.D * sc.T) throw InputError("config synthetic.K exceeds D*T");
    if (sc.signal == "cosine_clusters" && sc.cluster_centers.empty()) {
      throw InputError("config synthetic.cluster_centers is required for cosine_clusters");
    }
    cfg.synthetic = sc;
  }
  if (j.contains("prior")) {
    const auto& p = j["prior"];
    PriorConfig& pc = cfg.prior;
    pc.nu0 = p.value("nu0", 0.0);
    pc.slab_mean = p.value("slab_mean", 0.0);
    pc.slab_variance = p.value("slab_variance", 1.0);
    if (p.contains("spatial")) {
      const auto& s = p["spatial"];
      pc.spatial_kernel = s.value("kernel", "se");
      pc.lengthscale = s.value("lengthscale", 1.0);
      pc.magnitude = s.value("magnitude", 1.0);
      pc.spacing = s.value("spacing", 1.0);
      if (s.contains("coordinates")) pc.coordinates = resolve(s["coordinates"].get<std::string>());
    }
    if (p.contains("temporal")) {
      const auto& t = p["temporal"];
      pc.temporal_kernel = t.value("kernel", "identity");
      pc.temporal_lengthscale = t.value("lengthscale", 1.0);
      pc.alpha = t.value("alpha", 0.0);
    }
  }
  if (j.contains("ep")) {
    const auto& e = j["ep"];
    EPConfig& ec = cfg.ep;
    ec.damping = e.value("damping", ec.damping);
    ec.max_iters = e.value("max_iters", ec.max_iters);
    ec.tol = e.value("tol", ec.tol);
    ec.v_inf = e.value("v_inf", ec.v_inf);
    ec.sigma_inf = e.value("sigma_inf", ec.sigma_inf);
    ec.init_site_var = e.value("init_site_var", ec.init_site_var);
    ec.cp_inner_repeats = e.value("cp_inner_repeats", ec.cp_inner_repeats);
    ec.cp_damping_decay = e.value("cp_damping_decay", ec.cp_damping_decay);
    if (e.contains("scheme")) ec.scheme = GammaScheme::parse(e["scheme"].get<std::string>());
    ec.validate();
  }
  if (j.contains("gridsearch")) {
    const auto& g = j["gridsearch"];
    GridConfig gc;
    gc.parameter = g["parameter"].get<std::string>();
    if (g.contains("values")) {
      gc.values = g["values"].get<std::vector<double>>();
    } else if (g.contains("min") && g.contains("max") && g.contains("count")) {
      const double lo = g["min"].get<double>(), hi = g["max"].get<double>();
      const int count = g["count"].get<int>();
      if (count == 1) {
        gc.values = {lo};
      } else {
        for (int k = 0; k < count; ++k) gc.values.push_back(lo + (hi - lo) * k / (count - 1));
      }
    } else {
      throw InputError("config gridsearch needs either 'values' or 'min', 'max' and 'count'");
    }
    cfg.grid = gc;
  }
  if (j.contains("phase_transition")) {
    const auto& p = j["phase_transition"];
    PhaseConfig pc;
    pc.ratios = p["ratios"].get<std::vector<double>>();
    pc.trials = p.value("trials", 20);
    if (p.contains("methods")) {
      for (const auto& m : p["methods"]) {
        MethodConfig mc;
        mc.name = m["name"].get<std::string>();
        mc.scheme = m.value("scheme", "full");
        mc.prior = m.value("prior", "structured");
        GammaScheme::parse(mc.scheme);
        pc.methods.push_back(mc);
      }
    } else {
      pc.methods = {{"ep-cp", "cp", "structured"},
                    {"ep-full", "full", "structured"},
                    {"ep-lowrank", "lowrank:0.99", "structured"},
                    {"iep", "full", "diagonal"}};
    }
    if (p.contains("baselines")) pc.baselines = p["baselines"].get<std::vector<std::string>>();
    pc.ridge_lambda = p.value("ridge_lambda", 1e-3);
    cfg.phase = pc;
  }
  return cfg;
}

inline RunConfig load_config(const fs::path& path) {
  return parse_config(io::read_json(path), path.has_parent_path() ? path.parent_path() : fs::path("."));
}

inline CoordinateGrid spatial_coordinates(const PriorConfig& pc, Index D) {
  if (pc.coordinates) {
    CoordinateGrid grid;
    grid.points = io::read_csv_matrix(*pc.coordinates);
    if (grid.size() != D) {
      throw InputError("coordinate file has " + std::to_string(grid.size()) + " rows, expected " + std::to_string(D));
    }
    return grid;
  }
  return CoordinateGrid::regular_1d(D, pc.spacing);
}

/// Prior over the (possibly grouped) Gamma system. variant: "structured",
/// "spatial" (temporal identity) or "diagonal" (independent entries).
inline GammaPriorSpec build_prior(const PriorConfig& pc, Index D, Index T, const GroupMap* groups = nullptr,
                                  const std::string& variant = "structured") {
  if (variant != "structured" && variant != "spatial" && variant != "diagonal") {
    throw InputError("unknown prior variant '" + variant + "'");
  }
  CoordinateGrid space = spatial_coordinates(pc, D);
  CoordinateGrid time = CoordinateGrid::regular_1d(T);
  if (groups) {
    space = groups->spatial_centroids(space);
    time = groups->temporal_centroids(time);
  }
  const Index gs = space.size(), gt = time.size();
  GammaPriorSpec spec;
  spec.mean_level = pc.nu0;
  spec.rows = gs;
  spec.cols = gt;

  const bool temporal_identity = variant != "structured" || pc.temporal_kernel == "identity";
  const bool spatial_diag = variant == "diagonal" || pc.spatial_kernel == "diagonal";
  if (spatial_diag && temporal_identity) {
    spec.covariance = DiagonalCovariance{Eigen::VectorXd::Constant(gs * gt, pc.magnitude)};
    return spec;
  }
  DenseCovariance temporal;
  if (temporal_identity) {
    temporal = DenseCovariance(Eigen::MatrixXd::Identity(gt, gt));
  } else if (pc.temporal_kernel == "se") {
    temporal = squared_exponential(time, pc.temporal_lengthscale, 1.0);
  } else if (pc.temporal_kernel == "ar1") {
    if (!groups || groups->temporal_group_size == 1) {
      temporal = ar1_temporal_kernel(pc.alpha, gt);
    } else {
      if (!(pc.alpha >= 0.0 && pc.alpha < 1.0)) throw InputError("ar1 alpha must lie in [0, 1)");
      Eigen::MatrixXd k(gt, gt);
      for (Index a = 0; a < gt; ++a)
        for (Index b = 0; b < gt; ++b) k(a, b) = std::pow(pc.alpha, std::abs(time.points(a, 0) - time.points(b, 0)));
      temporal = DenseCovariance(std::move(k));
    }
  } else {
    throw InputError("unknown temporal kernel '" + pc.temporal_kernel + "'");
  }
  DenseCovariance spatial = spatial_diag ? DenseCovariance(pc.magnitude * Eigen::MatrixXd::Identity(gs, gs))
                                         : squared_exponential(space, pc.lengthscale, pc.magnitude);
  spec.covariance = KroneckerCovariance{std::move(temporal), std::move(spatial)};
  return spec;
}

/// Problem plus ground truth, when known.
struct Instance {
  Problem problem;
  std::optional<Eigen::MatrixXd> truth;
  std::optional<Eigen::MatrixXi> truth_support;
  std::optional<PriorSample> sample;
  double achieved_snr_db = std::numeric_limits<double>::quiet_NaN();
};

/// Ground-truth coefficients: a prior draw (optionally with exactly K actives)
/// or the deterministic cosine-cluster signal.
inline PriorSample draw_signal(const SyntheticConfig& sc, const PriorConfig& pc, std::uint64_t seed) {
  if (sc.signal == "cosine_clusters") {
    PriorSample s;
    s.gamma = Eigen::MatrixXd::Zero(sc.D, sc.T);
    s.support = Eigen::MatrixXi::Zero(sc.D, sc.T);
    s.coefficients = Eigen::MatrixXd::Zero(sc.D, sc.T);
    const double hw = static_cast<double>(std::max<Index>(sc.cluster_half_width, 1));
    for (Index t = 0; t < sc.T; ++t) {
      for (double c : sc.cluster_centers) {
        for (Index i = 0; i < sc.D; ++i) {
          const double d = static_cast<double>(i) - c;
          if (std::abs(d) > static_cast<double>(sc.cluster_half_width) + 1e-9) continue;
          // cos over [-pi/3, pi/3] keeps every active magnitude >= amplitude / 2
          s.coefficients(i, t) = sc.amplitude * std::cos(M_PI / 3.0 * d / hw);
          s.support(i, t) = 1;
        }
      }
    }
    return s;
  }
  const GammaPriorSpec prior = build_prior(pc, sc.D, sc.T);
  if (sc.K) return sample_prior_conditioned(prior, pc.slab(), sc.D, sc.T, *sc.K, seed);
  return sample_prior(prior, pc.slab(), sc.D, sc.T, seed);
}

/// Gaussian i.i.d. forward model and observations at the configured SNR. For
/// the Gaussian likelihood the noise is rescaled so that the realized SNR is
/// exactly the target; the nominal per-entry noise variance is reported.
inline Instance make_observations(const SyntheticConfig& sc, const PriorSample& signal, Index N, std::uint64_t seed) {
  if (N < 1) throw InputError("number of measurements must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Instance inst;
  Eigen::MatrixXd A(N, sc.D);
  for (Index j = 0; j < sc.D; ++j)
    for (Index n = 0; n < N; ++n) A(n, j) = normal(rng);
  if (sc.normalize_columns) {
    const Eigen::RowVectorXd norms = A.colwise().norm();  // evaluated before A is overwritten
    A.array().rowwise() /= norms.array();
  }
  const Eigen::MatrixXd clean = A * signal.coefficients;
  Eigen::MatrixXd E(N, sc.T);
  for (Index t = 0; t < sc.T; ++t)
    for (Index n = 0; n < N; ++n) E(n, t) = normal(rng);

  inst.problem.A = A;
  inst.problem.likelihood = sc.likelihood;
  if (sc.likelihood == Likelihood::gaussian) {
    const double signal_energy = clean.squaredNorm();
    const double target = signal_energy / std::pow(10.0, sc.snr_db / 10.0);
    if (signal_energy > 0.0) {
      E *= std::sqrt(target / E.squaredNorm());
      inst.problem.noise_variance = target / static_cast<double>(N * sc.T);
      inst.achieved_snr_db = 10.0 * std::log10(signal_energy / E.squaredNorm());
    } else {
      inst.problem.noise_variance = 1.0;
    }
    inst.problem.Y = clean + E;
  } else {
    inst.problem.Y = (clean + sc.label_noise * E).unaryExpr([](double v) { return v > 0.0 ? 1.0 : -1.0; });
  }
  inst.truth = signal.coefficients;
  inst.truth_support = signal.support;
  inst.sample = signal;
  return inst;
}

struct SolveSetup {
  GammaPriorSpec prior;
  std::optional<GroupMap> groups;
  EPConfig ep;
};

inline SolveSetup prepare_solve(const PriorConfig& pc, const EPConfig& ep, Index D, Index T,
                                const std::string& variant = "structured") {
  SolveSetup s{GammaPriorSpec{}, std::nullopt, ep};
  if (ep.scheme.grouped) {
    s.groups = build_group_map(D, T, ep.scheme.spatial_group, ep.scheme.temporal_group);
    s.prior = build_prior(pc, D, T, &*s.groups, variant);
  } else {
    s.prior = build_prior(pc, D, T, nullptr, variant);
  }
  return s;
}

inline EPResult solve(const Problem& problem, const PriorConfig& pc, const EPConfig& ep,
                      const std::string& variant = "structured") {
  const SolveSetup s = prepare_solve(pc, ep, problem.D(), problem.T(), variant);
  return run_ep(problem, s.prior, pc.slab(), s.groups, s.ep);
}

inline json ep_config_json(const EPConfig& ep) {
  return {{"damping", ep.damping},     {"max_iters", ep.max_iters},
          {"tol", ep.tol},             {"scheme", ep.scheme.to_string()},
          {"v_inf", ep.v_inf},         {"sigma_inf", ep.sigma_inf},
          {"init_site_var", ep.init_site_var}, {"cp_inner_repeats", ep.cp_inner_repeats},
          {"cp_damping_decay", ep.cp_damping_decay}};
}

inline json metadata(const RunConfig& cfg, const std::string& command) {
  return {{"schema_version", kSchemaVersion}, {"command", command}, {"seed", cfg.seed}, {"config", cfg.raw}};
}

/// Loads the configured problem or synthesizes one from the master seed.
inline Instance load_or_generate(const RunConfig& cfg) {
  if (cfg.problem) {
    Instance inst;
    inst.problem.A = io::read_csv_matrix(cfg.problem->A);
    inst.problem.Y = io::read_csv_matrix(cfg.problem->Y);
    inst.problem.likelihood = cfg.problem->likelihood;
    inst.problem.noise_variance = cfg.problem->noise_variance;
    if (cfg.problem->truth) {
      inst.truth = io::read_csv_matrix(*cfg.problem->truth);
      inst.truth_support = inst.truth->unaryExpr([](double v) { return v != 0.0 ? 1 : 0; });
    }
    inst.problem.validate();
    return inst;
  }
  if (!cfg.synthetic) throw InputError("config needs either 'problem' or 'synthetic'");
  const SyntheticConfig& sc = *cfg.synthetic;
  if (!sc.N) throw InputError("config synthetic.N is required to build a problem");
  const PriorSample signal = draw_signal(sc, cfg.prior, derive_seed(cfg.seed, {1}));
  return make_observations(sc, signal, *sc.N, derive_seed(cfg.seed, {2}));
}

// ---------------------------------------------------------------- sample

inline json run_sample(const RunConfig& cfg, const fs::path& out) {
  if (!cfg.synthetic) throw InputError("sample: config needs a 'synthetic' section");
  const SyntheticConfig& sc = *cfg.synthetic;
  fs::create_directories(out);
  const PriorSample s = draw_signal(sc, cfg.prior, derive_seed(cfg.seed, {1}));
  io::write_csv_matrix(out / "gamma.csv", s.gamma);
  io::write_csv_matrix(out / "support.csv", s.support);
  io::write_csv_matrix(out / "coefficients.csv", s.coefficients);
  json meta = metadata(cfg, "sample");
  meta["D"] = sc.D;
  meta["T"] = sc.T;
  meta["active"] = s.support.sum();
  meta["cardinality_exact"] = s.cardinality_exact;
  meta["mean_shift"] = s.mean_shift;
  if (sc.N) {
    const Instance inst = make_observations(sc, s, *sc.N, derive_seed(cfg.seed, {2}));
    io::write_csv_matrix(out / "A.csv", inst.problem.A);
    io::write_csv_matrix(out / "Y.csv", inst.problem.Y);
    meta["N"] = *sc.N;
    meta["noise_variance"] = inst.problem.noise_variance;
    meta["achieved_snr_db"] = std::isfinite(inst.achieved_snr_db) ? json(inst.achieved_snr_db) : json(nullptr);
    // Ready-to-run configuration for the solve command.
    json solve_cfg = {{"schema_version", kSchemaVersion},
                      {"seed", cfg.seed},
                      {"problem",
                       {{"A", "A.csv"},
                        {"Y", "Y.csv"},
                        {"likelihood", to_string(sc.likelihood)},
                        {"noise_variance", inst.problem.noise_variance},
                        {"truth", "coefficients.csv"}}}};
    if (cfg.raw.contains("prior")) solve_cfg["prior"] = cfg.raw["prior"];
    if (cfg.raw.contains("ep")) solve_cfg["ep"] = cfg.raw["ep"];
    io::write_json(out / "solve_config.json", solve_cfg);
  }
  io::write_json(out / "metadata.json", meta);
  return meta;
}

// ---------------------------------------------------------------- solve

inline double probit_accuracy(const Problem& p, const Eigen::MatrixXd& x_mean) {
  const Eigen::MatrixXd proj = p.A * x_mean;
  Index correct = 0;
  for (Index k = 0; k < proj.size(); ++k) correct += ((proj.data()[k] > 0.0 ? 1.0 : -1.0) == p.Y.data()[k]);
  return static_cast<double>(correct) / static_cast<double>(proj.size());
}

inline json run_solve(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  const Instance inst = load_or_generate(cfg);
  const auto start = std::chrono::steady_clock::now();
  const EPResult r = solve(inst.problem, cfg.prior, cfg.ep);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  io::write_csv_matrix(out / "x_mean.csv", r.x_mean);
  io::write_csv_matrix(out / "x_var.csv", r.x_var);
  io::write_csv_matrix(out / "support_prob.csv", r.support_prob);
  io::write_csv_matrix(out / "gamma_mean.csv", r.gamma_mean);
  io::write_csv_matrix(out / "gamma_var.csv", r.gamma_var);
  io::write_csv_matrix(out / "evidence_trace.csv",
                       Eigen::Map<const Eigen::VectorXd>(r.evidence_trace.data(), static_cast<Index>(r.evidence_trace.size())));
  io::write_table(out / "timings.csv", {{"command", "seconds"}, {{"solve", io::format_double(seconds)}}});

  json meta = metadata(cfg, "solve");
  meta["ep"] = ep_config_json(cfg.ep);
  meta["log_evidence"] = r.log_evidence;
  meta["iterations"] = r.iterations;
  meta["converged"] = r.converged;
  meta["final_damping"] = r.final_damping;
  meta["likelihood"] = to_string(inst.problem.likelihood);
  meta["N"] = inst.problem.N();
  meta["D"] = inst.problem.D();
  meta["T"] = inst.problem.T();
  if (inst.problem.likelihood == Likelihood::probit) meta["accuracy"] = probit_accuracy(inst.problem, r.x_mean);
  if (inst.truth && inst.truth->squaredNorm() > 0.0) {
    const Metrics m = f_measure(r.support_prob, *inst.truth_support);
    meta["nmse"] = nmse(r.x_mean, *inst.truth);
    meta["f_measure"] = m.f_measure;
    meta["precision"] = m.precision;
    meta["recall"] = m.recall;
  }
  io::write_json(out / "result.json", meta);
  return meta;
}

// ---------------------------------------------------------------- workers

/// Runs job(k) for k in [0, count) on up to `workers` threads.
inline void parallel_for(std::size_t count, unsigned workers, const std::function<void(std::size_t)>& job) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(count, 1))));
  if (workers == 1) {
    for (std::size_t k = 0; k < count; ++k) job(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t k = next++; k < count; k = next++) job(k);
    });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------- gridsearch

struct GridRow {
  double value = 0.0;
  double log_evidence = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  bool converged = false;
  double nmse = std::numeric_limits<double>::quiet_NaN();
  Metrics metrics{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(),
                  std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  std::string error;
  double seconds = 0.0;
  Eigen::VectorXd support_prob, gamma_mean;
};

struct GridResult {
  std::vector<GridRow> rows;
  std::optional<std::size_t> best;  // index of the evidence argmax
};

inline PriorConfig with_parameter(PriorConfig pc, const std::string& name, double v) {
  if (name == "lengthscale") pc.lengthscale = v;
  else if (name == "nu0") pc.nu0 = v;
  else if (name == "magnitude") pc.magnitude = v;
  else if (name == "temporal_lengthscale") pc.temporal_lengthscale = v;
  else throw InputError("unknown grid parameter '" + name + "'");
  return pc;
}

inline GridResult run_gridsearch(const RunConfig& cfg, const std::optional<fs::path>& out, unsigned workers = 1) {
  if (!cfg.grid) throw InputError("gridsearch: config needs a 'gridsearch' section");
  const GridConfig& gc = *cfg.grid;
  if (gc.values.empty()) throw InputError("gridsearch: grid is empty");
  const Instance inst = load_or_generate(cfg);
  GridResult res;
  res.rows.resize(gc.values.size());
  parallel_for(gc.values.size(), workers, [&](std::size_t k) {
    GridRow& row = res.rows[k];
    row.value = gc.values[k];
    const auto start = std::chrono::steady_clock::now();
    try {
      const EPResult r = solve(inst.problem, with_parameter(cfg.prior, gc.parameter, row.value), cfg.ep);
      row.log_evidence = r.log_evidence;
      row.iterations = r.iterations;
      row.converged = r.converged;
      row.support_prob = Eigen::Map<const Eigen::VectorXd>(r.support_prob.data(), r.support_prob.size());
      row.gamma_mean = r.gamma_mean;
      if (inst.truth && inst.truth->squaredNorm() > 0.0) {
        row.nmse = nmse(r.x_mean, *inst.truth);
        row.metrics = f_measure(r.support_prob, *inst.truth_support);
        row.metrics.nmse = row.nmse;
      }
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  });
  for (std::size_t k = 0; k < res.rows.size(); ++k) {
    const GridRow& r = res.rows[k];
    if (!r.error.empty() || !std::isfinite(r.log_evidence)) continue;
    if (!res.best) {
      res.best = k;
      continue;
    }
    const GridRow& b = res.rows[*res.best];
    if (r.log_evidence > b.log_evidence || (r.log_evidence == b.log_evidence && r.value < b.value)) res.best = k;
  }

  if (out) {
    fs::create_directories(*out);
    io::Table table{{"value", "log_evidence", "iterations", "converged", "nmse", "f_measure", "precision", "recall", "error"}, {}};
    io::Table timing{{"value", "seconds"}, {}};
    Index width = 0;
    for (const auto& r : res.rows) width = std::max<Index>(width, r.support_prob.size());
    Index gwidth = 0;
    for (const auto& r : res.rows) gwidth = std::max<Index>(gwidth, r.gamma_mean.size());
    Eigen::MatrixXd support = Eigen::MatrixXd::Constant(static_cast<Index>(res.rows.size()), width,
                                                        std::numeric_limits<double>::quiet_NaN());
    Eigen::MatrixXd gamma = Eigen::MatrixXd::Constant(static_cast<Index>(res.rows.size()), gwidth,
                                                      std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 0; k < res.rows.size(); ++k) {
      const GridRow& r = res.rows[k];
      std::string err = r.error;
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      table.rows.push_back({io::format_double(r.value), io::format_double(r.log_evidence), std::to_string(r.iterations),
                            r.converged ? "1" : "0", io::format_double(r.nmse), io::format_double(r.metrics.f_measure),
                            io::format_double(r.metrics.precision), io::format_double(r.metrics.recall), err});
      timing.rows.push_back({io::format_double(r.value), io::format_double(r.seconds)});
      if (r.support_prob.size() == width) support.row(static_cast<Index>(k)) = r.support_prob.transpose();
      if (r.gamma_mean.size() == gwidth) gamma.row(static_cast<Index>(k)) = r.gamma_mean.transpose();
    }
    io::write_table(*out / "gridsearch.csv", table);
    io::write_table(*out / "timings.csv", timing);
    io::write_csv_matrix(*out / "support_sweep.csv", support);
    io::write_csv_matrix(*out / "gamma_sweep.csv", gamma);
    json meta = metadata(cfg, "gridsearch");
    meta["ep"] = ep_config_json(cfg.ep);
    meta["parameter"] = gc.parameter;
    meta["points"] = res.rows.size();
    if (res.best) {
      meta["best_value"] = res.rows[*res.best].value;
      meta["best_log_evidence"] = res.rows[*res.best].log_evidence;
    } else {
      meta["best_value"] = nullptr;
    }
    io::write_json(*out / "result.json", meta);
  }
  return res;
}

// ---------------------------------------------------------------- phase transition

struct PhaseRow {
  std::size_t ratio_index = 0;
  double ratio = 0.0;
  Index N = 0;
  int trial = 0;
  std::string method;
  Metrics metrics{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(),
                  std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  int iterations = 0;
  bool converged = false;
  double log_evidence = std::numeric_limits<double>::quiet_NaN();
  double snr_db = std::numeric_limits<double>::quiet_NaN();
  std::string error;
  double seconds = 0.0;
};

struct PhaseSummaryRow {
  double ratio = 0.0;
  std::string method;
  double mean_nmse = 0.0, mean_nmse_db = 0.0, mean_f = 0.0, mean_precision = 0.0, mean_recall = 0.0,
         mean_iterations = 0.0;
  int trials = 0, failures = 0;
};

struct PhaseResult {
  std::vector<PhaseRow> rows;
  std::vector<PhaseSummaryRow> summary;

  const PhaseSummaryRow* find(double ratio, const std::string& method) const {
    for (const auto& s : summary)
      if (s.method == method && std::abs(s.ratio - ratio) < 1e-12) return &s;
    return nullptr;
  }
};

inline std::vector<PhaseSummaryRow> summarize(const std::vector<PhaseRow>& rows) {
  std::map<std::pair<std::size_t, std::string>, std::vector<const PhaseRow*>> groups;
  for (const auto& r : rows) groups[{r.ratio_index, r.method}].push_back(&r);
  std::vector<PhaseSummaryRow> out;
  for (const auto& [key, members] : groups) {
    PhaseSummaryRow s;
    s.ratio = members.front()->ratio;
    s.method = key.second;
    for (const PhaseRow* r : members) {
      if (!r->error.empty() || !std::isfinite(r->metrics.nmse)) {
        ++s.failures;
        continue;
      }
      ++s.trials;
      s.mean_nmse += r->metrics.nmse;
      s.mean_f += r->metrics.f_measure;
      s.mean_precision += r->metrics.precision;
      s.mean_recall += r->metrics.recall;
      s.mean_iterations += r->iterations;
    }
    if (s.trials > 0) {
      const double n = s.trials;
      s.mean_nmse /= n;
      s.mean_f /= n;
      s.mean_precision /= n;
      s.mean_recall /= n;
      s.mean_iterations /= n;
      s.mean_nmse_db = 10.0 * std::log10(s.mean_nmse);
    } else {
      s.mean_nmse = s.mean_nmse_db = s.mean_f = s.mean_precision = s.mean_recall = s.mean_iterations =
          std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back(s);
  }
  return out;
}

/// All trials for one (ratio, trial) cell: every EP method plus the baselines.
inline std::vector<PhaseRow> phase_cell(const RunConfig& cfg, std::size_t ratio_index, int trial) {
  const SyntheticConfig& sc = *cfg.synthetic;
  const PhaseConfig& pc = *cfg.phase;
  const double ratio = pc.ratios[ratio_index];
  const Index N = std::max<Index>(1, static_cast<Index>(std::llround(ratio * static_cast<double>(sc.D))));
  std::vector<PhaseRow> rows;
  auto base_row = [&](const std::string& method) {
    PhaseRow r;
    r.ratio_index = ratio_index;
    r.ratio = ratio;
    r.N = N;
    r.trial = trial;
    r.method = method;
    return r;
  };

  Instance inst;
  try {
    // Same signal realizations at every ratio; fresh measurements per cell.
    const PriorSample signal = draw_signal(sc, cfg.prior, derive_seed(cfg.seed, {1, static_cast<std::uint64_t>(trial)}));
    inst = make_observations(sc, signal, N,
                             derive_seed(cfg.seed, {2, static_cast<std::uint64_t>(trial), static_cast<std::uint64_t>(ratio_index)}));
  } catch (const std::exception& e) {
    for (const auto& m : pc.methods) {
      PhaseRow r = base_row(m.name);
      r.error = e.what();
      rows.push_back(r);
    }
    return rows;
  }

  const Eigen::MatrixXd& truth = *inst.truth;
  const Eigen::MatrixXi& support = *inst.truth_support;
  auto score = [&](PhaseRow& r, const Eigen::MatrixXd& estimate, const Eigen::MatrixXd& probs) {
    r.metrics = f_measure(probs, support);
    r.metrics.nmse = truth.squaredNorm() > 0.0 ? nmse(estimate, truth) : std::numeric_limits<double>::quiet_NaN();
    r.snr_db = inst.achieved_snr_db;
  };

  for (const auto& m : pc.methods) {
    PhaseRow r = base_row(m.name);
    const auto start = std::chrono::steady_clock::now();
    try {
      EPConfig ep = cfg.ep;
      ep.scheme = GammaScheme::parse(m.scheme);
      const EPResult res = solve(inst.problem, cfg.prior, ep, m.prior);
      score(r, res.x_mean, res.support_prob);
      r.iterations = res.iterations;
      r.converged = res.converged;
      r.log_evidence = res.log_evidence;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rows.push_back(r);
  }
  for (const auto& b : pc.baselines) {
    PhaseRow r = base_row(b);
    const auto start = std::chrono::steady_clock::now();
    try {
      Eigen::MatrixXd est = Eigen::MatrixXd::Zero(sc.D, sc.T);
      for (Index t = 0; t < sc.T; ++t) {
        const Eigen::VectorXd y = inst.problem.Y.col(t);
        if (b == "omp") {
          const Index k = std::min<Index>({static_cast<Index>(support.col(t).sum()), N, sc.D});
          est.col(t) = omp(inst.problem.A, y, k);
        } else {
          std::vector<Index> s;
          for (Index i = 0; i < sc.D; ++i)
            if (support(i, t)) s.push_back(i);
          est.col(t) = oracle_ridge(inst.problem.A, y, s, pc.ridge_lambda);
        }
      }
      score(r, est, est.unaryExpr([](double v) { return v != 0.0 ? 1.0 : 0.0; }));
      r.converged = true;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rows.push_back(r);
  }
  return rows;
}

inline PhaseResult run_phase_transition(const RunConfig& cfg, const std::optional<fs::path>& out, unsigned workers = 1) {
  if (!cfg.phase) throw InputError("phase-transition: config needs a 'phase_transition' section");
  if (!cfg.synthetic) throw InputError("phase-transition: config needs a 'synthetic' section");
  const PhaseConfig& pc = *cfg.phase;
  RunConfig local = cfg;
  if (!local.synthetic->K && local.synthetic->signal == "prior") {
    local.synthetic->K = local.synthetic->D * local.synthetic->T / 4;
  }
  const std::size_t cells = pc.ratios.size() * static_cast<std::size_t>(pc.trials);
  std::vector<std::vector<PhaseRow>> per_cell(cells);
  parallel_for(cells, workers, [&](std::size_t k) {
    per_cell[k] = phase_cell(local, k / static_cast<std::size_t>(pc.trials), static_cast<int>(k % static_cast<std::size_t>(pc.trials)));
  });
  PhaseResult res;
  for (auto& c : per_cell)
    for (auto& r : c) res.rows.push_back(std::move(r));
  std::sort(res.rows.begin(), res.rows.end(), [](const PhaseRow& a, const PhaseRow& b) {
    return std::tie(a.ratio_index, a.trial, a.method) < std::tie(b.ratio_index, b.trial, b.method);
  });
  res.summary = summarize(res.rows);

  if (out) {
    fs::create_directories(*out);
    io::Table table{{"ratio", "N", "trial", "method", "nmse", "f_measure", "precision", "recall", "iterations",
                     "converged", "log_evidence", "snr_db", "error"},
                    {}};
    io::Table timing{{"ratio", "trial", "method", "seconds"}, {}};
    for (const auto& r : res.rows) {
      std::string err = r.error;
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      table.rows.push_back({io::format_double(r.ratio), std::to_string(r.N), std::to_string(r.trial), r.method,
                            io::format_double(r.metrics.nmse), io::format_double(r.metrics.f_measure),
                            io::format_double(r.metrics.precision), io::format_double(r.metrics.recall),
                            std::to_string(r.iterations), r.converged ? "1" : "0", io::format_double(r.log_evidence),
                            io::format_double(r.snr_db), err});
      timing.rows.push_back({io::format_double(r.ratio), std::to_string(r.trial), r.method, io::format_double(r.seconds)});
    }
    io::Table summary{{"ratio", "method", "trials", "failures", "mean_nmse", "mean_nmse_db", "mean_f_measure",
                       "mean_precision", "mean_recall", "mean_iterations"},
                      {}};
    for (const auto& s : res.summary) {
      summary.rows.push_back({io::format_double(s.ratio), s.method, std::to_string(s.trials), std::to_string(s.failures),
                              io::format_double(s.mean_nmse), io::format_double(s.mean_nmse_db),
                              io::format_double(s.mean_f), io::format_double(s.mean_precision),
                              io::format_double(s.mean_recall), io::format_double(s.mean_iterations)});
    }
    io::write_table(*out / "results.csv", table);
    io::write_table(*out / "summary.csv", summary);
    io::write_table(*out / "timings.csv", timing);
    json meta = metadata(cfg, "phase-transition");
    meta["ep"] = ep_config_json(cfg.ep);
    meta["K"] = local.synthetic->K ? json(*local.synthetic->K) : json(nullptr);
    meta["rows"] = res.rows.size();
    io::write_json(*out / "result.json", meta);
  }
  return res;
}

}  // namespace stss::harness
