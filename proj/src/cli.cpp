#include "motionssm/cli.hpp"

#include "motionssm/errors.hpp"
#include "motionssm/io.hpp"
#include "motionssm/metrics.hpp"
#include "motionssm/parallel.hpp"
#include "motionssm/param_learn.hpp"
#include "motionssm/synth.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <glob.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

namespace motionssm {

namespace {

struct SimulateArgs {
  std::string params, out;
  long steps = 100;
  std::uint64_t seed = 0;
};

struct FitArgs {
  std::string data, init, out;
  double lr = 5e-4;
  int iters = 100;
  std::uint64_t seed = 0;
};

struct OnlineArgs {
  std::string data, params, out;
  int horizon = 75;
  int forecast = 50;
  double lr = 5e-4;
  int inner_steps = 1;
  std::uint64_t seed = 0;
};

struct DeformArgs {
  std::string in, image, field, out;
  double sigma = 2.0;
  int squarings = 4;
  bool nearest = false;
};

struct MetricsArgs {
  std::string a, b;
  double spacing_x = 1.0, spacing_y = 1.0;
  int window = 9;
};

struct ExperimentArgs {
  int seeds = 20;
  std::uint64_t first_seed = 0;
  std::string out;
};

// Imputation and online presets used by `experiment`.
constexpr int kImputationStrides[] = {1, 5, 10};
constexpr Eigen::Index kShiftStep = 150;
constexpr double kShiftSpeedup = 1.6;

std::vector<std::string> expand_glob(const std::string& pattern) {
  glob_t g{};
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  std::vector<std::string> out;
  if (rc == 0)
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  globfree(&g);
  return out;  // glob sorts its matches
}

// Rows with any non-finite entry are treated as missing.
ObsSeq<double> read_sequence(const std::string& path) {
  const Eigen::MatrixXd m = to_matrix(read_mseq(path));
  ObsSeq<double> obs = ObsSeq<double>::fully_observed(m);
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    obs.observed[std::size_t(t)] = m.row(t).allFinite();
    if (!obs.observed[std::size_t(t)]) obs.values.row(t).setZero();
  }
  return obs;
}

std::string num(double v) { return format_double(v); }

void write_json(const std::string& path, const nlohmann::ordered_json& j) {
  std::ofstream os(path);
  os << j.dump(2) << '\n';
  if (!os) throw ParseError("cannot write " + path);
}

int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  const LgssmParams<double> p = read_params(a.params);
  p.validate();
  const Simulation<double> sim = simulate(p, a.steps, a.seed);
  write_mseq(a.out + ".z.mseq", to_tensor(sim.latents));
  write_mseq(a.out + ".x.mseq", to_tensor(sim.observations));
  out << "wrote " << a.out << ".z.mseq " << a.out << ".x.mseq\n";
  return kExitOk;
}

int cmd_fit(const FitArgs& a, std::ostream& out) {
  const auto files = expand_glob(a.data);
  if (files.empty()) throw PreconditionError("fit: no data files match '" + a.data + "'");
  std::vector<ObsSeq<double>> dataset;
  for (const auto& f : files) dataset.push_back(read_sequence(f));
  const LgssmParams<double> init = read_params(a.init);
  init.validate();
  LearnerConfig cfg;
  cfg.learning_rate = a.lr;
  cfg.max_iters = a.iters;
  cfg.seed = a.seed;
  const FitResult fit = fit_offline(from_params(init), dataset, cfg);
  // the start point is written back verbatim rather than through its encoding
  write_params(a.out, fit.best_iteration == 0 ? init : to_params(fit.params));
  CsvWriter csv(a.out + ".loss.csv", {"iteration", "loglik", "loss", "best_loss"});
  for (std::size_t k = 0; k < fit.trace.size(); ++k)
    csv.row({std::to_string(k), num(fit.trace[k]), num(-fit.trace[k]), num(-fit.best_trace[k])});
  out << "fit " << files.size() << " sequence(s), best mean loglik " << num(fit.objective) << " at iteration "
      << fit.best_iteration << '\n';
  return kExitOk;
}

int cmd_online(const OnlineArgs& a, std::ostream& out) {
  const ObsSeq<double> data = read_sequence(a.data);
  if (data.observed_count() != data.length()) throw ParseError("online: " + a.data + " has missing rows");
  const LgssmParams<double> init = read_params(a.params);
  init.validate();
  if (a.horizon < 1 || a.forecast < 1) throw PreconditionError("online: --horizon and --forecast must be >= 1");
  const Eigen::Index T = data.length(), H = a.forecast, N = a.horizon;
  if (T <= N + H) {
    throw PreconditionError("online: sequence has " + std::to_string(T) + " steps, needs at least horizon + forecast + 1 = " +
                            std::to_string(N + H + 1));
  }
  LearnerConfig cfg;
  cfg.learning_rate = a.lr;
  cfg.horizon = a.horizon;
  cfg.inner_steps_per_sample = a.inner_steps;
  cfg.seed = a.seed;
  OnlineState state(from_params(init));
  CsvWriter steps(a.out + ".loglik.csv", {"step", "window", "window_loglik"});
  for (Eigen::Index t = 0; t < T - H; ++t) {
    state = online_step(std::move(state), data.values.row(t).transpose(), cfg);
    steps.row({std::to_string(t), std::to_string(state.window.size()), num(state.window_loglik.back())});
  }
  const LgssmParams<double> adapted = to_params(state.params);
  write_params(a.out + ".params", adapted);
  const ObsSeq<double> past = data.slice(T - H - N, N), future = data.slice(T - H, H);
  CsvWriter report(a.out + ".forecast.csv", {"model", "loglik", "rmse"});
  const ForecastScore fa = evaluate_forecast(adapted, past, future), ff = evaluate_forecast(init, past, future);
  report.row({"adapted", num(fa.loglik), num(fa.rmse)});
  report.row({"frozen", num(ff.loglik), num(ff.rmse)});
  out << "forecast loglik adapted " << num(fa.loglik) << " frozen " << num(ff.loglik) << '\n';
  return kExitOk;
}

int cmd_deform_exp(const DeformArgs& a, std::ostream& out) {
  const Tensor in = read_mseq(a.in);
  VelocityField v(to_field(in));
  v.check();
  const DeformField phi = exp_svf(gaussian_smooth(v, a.sigma), a.squarings);
  write_mseq(a.out, to_tensor(phi, in.dtype));
  out << "max displacement " << num(phi.max_norm()) << '\n';
  return kExitOk;
}

int cmd_deform_warp(const DeformArgs& a, std::ostream& out) {
  const Tensor img = read_mseq(a.image);
  const DeformField phi(to_field(read_mseq(a.field)));
  if (img.dtype == Dtype::U8) {
    write_mseq(a.out, to_tensor(warp(to_labels(img), phi)));
  } else {
    write_mseq(a.out, to_tensor(warp(to_image(img), phi, a.nearest ? Interp::Nearest : Interp::Bilinear), img.dtype));
  }
  out << "wrote " << a.out << '\n';
  return kExitOk;
}

int cmd_deform_jacdet(const DeformArgs& a, std::ostream& out) {
  const DeformField phi(to_field(read_mseq(a.field)));
  const Image det = jacobian_det(phi);
  if (!a.out.empty()) write_mseq(a.out, to_tensor(det));
  out << "min_jacobian_det " << num(det.minCoeff()) << '\n';
  return kExitOk;
}

// Label maps: per-label Dice and HD95 over labels present in either map.
// Float images: RMSE and LCC.
int cmd_metrics(const MetricsArgs& a, std::ostream& out) {
  const Tensor ta = read_mseq(a.a), tb = read_mseq(a.b);
  if ((ta.dtype == Dtype::U8) != (tb.dtype == Dtype::U8))
    throw ParseError("metrics: both inputs must be label maps (uint8) or both images");
  if (ta.dtype == Dtype::U8) {
    const LabelImage la = to_labels(ta), lb = to_labels(tb);
    if (la.rows() != lb.rows() || la.cols() != lb.cols()) throw DimensionError("metrics: label maps differ in shape");
    out << "label,dice,hd95\n";
    for (int l = 1; l < 256; ++l) {
      const auto v = std::uint8_t(l);
      const Mask ma = mask_of(la, v, a.spacing_x, a.spacing_y), mb = mask_of(lb, v, a.spacing_x, a.spacing_y);
      if (ma.count() == 0 && mb.count() == 0) continue;
      const double h = ma.count() && mb.count() ? hd95(ma, mb) : std::numeric_limits<double>::quiet_NaN();
      out << l << ',' << num(dice(ma, mb)) << ',' << num(h) << '\n';
    }
  } else {
    const Image ia = to_image(ta), ib = to_image(tb);
    out << "metric,value\n";
    out << "rmse," << num(rmse(ia.matrix(), ib.matrix())) << '\n';
    out << "lcc," << num(lcc(ia, ib, a.window)) << '\n';
  }
  return kExitOk;
}

// Runs fn for every seed; the first failing seed (lowest) is reported.
template <typename Row>
std::vector<Row> over_seeds(const ExperimentArgs& a, const std::function<Row(std::uint64_t)>& fn) {
  if (a.seeds < 1) throw PreconditionError("experiment: --seeds must be >= 1");
  std::vector<Row> rows(std::size_t(a.seeds));
  std::vector<std::string> errors(std::size_t(a.seeds));
  parallel_for(std::size_t(a.seeds), [&](std::size_t i) {
    try {
      rows[i] = fn(a.first_seed + i);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < errors.size(); ++i)
    if (!errors[i].empty()) throw NumericalError("experiment: seed " + std::to_string(a.first_seed + i) + " failed: " + errors[i]);
  return rows;
}

void write_tables(const std::string& dir, const std::string& name, const std::vector<std::string>& columns,
                  const std::vector<std::uint64_t>& seeds, const std::vector<std::vector<double>>& rows) {
  std::vector<std::string> header{"seed"};
  header.insert(header.end(), columns.begin(), columns.end());
  CsvWriter raw(dir + "/" + name + "_raw.csv", header);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::vector<std::string> cells{std::to_string(seeds[i])};
    for (double v : rows[i]) cells.push_back(num(v));
    raw.row(cells);
  }
  CsvWriter agg(dir + "/" + name + "_aggregate.csv", {"metric", "median", "q25", "q75", "n"});
  for (std::size_t c = 0; c < columns.size(); ++c) {
    std::vector<double> col;
    for (const auto& r : rows) col.push_back(r[c]);
    agg.row({columns[c], num(percentile(col, 50)), num(percentile(col, 25)), num(percentile(col, 75)),
             std::to_string(col.size())});
  }
}

std::vector<std::uint64_t> seed_list(const ExperimentArgs& a) {
  std::vector<std::uint64_t> s;
  for (int i = 0; i < a.seeds; ++i) s.push_back(a.first_seed + std::uint64_t(i));
  return s;
}

int cmd_experiment_imputation(const ExperimentArgs& a, std::ostream& out) {
  std::filesystem::create_directories(a.out);
  const std::vector<int> strides(std::begin(kImputationStrides), std::end(kImputationStrides));
  std::vector<std::string> columns;
  for (const char* m : {"median_dice", "median_hd95", "latent_rmse", "dice_degradation"})
    for (int s : strides) columns.push_back(std::string(m) + "_s" + std::to_string(s));
  const auto rows = over_seeds<std::vector<double>>(a, [&](std::uint64_t seed) {
    const auto reports = run_imputation_experiment(default_scenario(seed), strides);
    std::vector<double> r;
    for (const auto& x : reports) r.push_back(x.median_dice);
    for (const auto& x : reports) r.push_back(x.median_hd95);
    for (const auto& x : reports) r.push_back(x.latent_rmse);
    for (const auto& x : reports) r.push_back(x.dice_degradation);
    return r;
  });
  write_tables(a.out, "imputation", columns, seed_list(a), rows);
  const SynthScenario s = default_scenario(a.first_seed);
  nlohmann::ordered_json cfg = {{"preset", "imputation"}, {"seeds", a.seeds}, {"first_seed", a.first_seed},
                                {"T", s.T}, {"d_z", s.lgssm.state_dim()}, {"d_x", s.lgssm.obs_dim()},
                                {"height", s.phantom.rows()}, {"width", s.phantom.cols()}, {"sigma_g", s.sigma_g},
                                {"squarings", s.n_squarings}, {"obs_noise", s.obs_noise}, {"strides", strides}};
  write_json(a.out + "/imputation_config.json", cfg);
  out << "wrote " << a.out << "/imputation_raw.csv " << a.out << "/imputation_aggregate.csv\n";
  return kExitOk;
}

int cmd_experiment_online(const ExperimentArgs& a, std::ostream& out) {
  std::filesystem::create_directories(a.out);
  const OnlineConfig cfg;
  const Eigen::Index T = kShiftStep + cfg.adapt_steps + cfg.forecast;
  const std::vector<std::string> columns{"adapted_loglik", "frozen_loglik", "loglik_gain", "adapted_rmse",
                                         "frozen_rmse",    "adapted_dice",  "frozen_dice", "null_adapted_loglik",
                                         "null_frozen_loglik", "null_loglik_gain"};
  const auto rows = over_seeds<std::vector<double>>(a, [&](std::uint64_t seed) {
    const SynthScenario base = default_scenario(seed, T);
    const OnlineReport r = run_online_experiment(with_regime_shift(base, kShiftStep, kShiftSpeedup), cfg);
    OnlineConfig null_cfg = cfg;
    null_cfg.split = kShiftStep;
    const OnlineReport n = run_online_experiment(base, null_cfg);
    return std::vector<double>{r.adapted.loglik, r.frozen.loglik, r.adapted.loglik - r.frozen.loglik,
                               r.adapted.rmse,   r.frozen.rmse,   r.adapted.dice,
                               r.frozen.dice,    n.adapted.loglik, n.frozen.loglik,
                               n.adapted.loglik - n.frozen.loglik};
  });
  write_tables(a.out, "online", columns, seed_list(a), rows);
  nlohmann::ordered_json j = {{"preset", "online"}, {"seeds", a.seeds}, {"first_seed", a.first_seed},
                              {"T", T}, {"shift_step", kShiftStep}, {"speedup", kShiftSpeedup},
                              {"adapt_steps", cfg.adapt_steps}, {"horizon", cfg.horizon}, {"forecast", cfg.forecast},
                              {"dice_ahead", cfg.dice_ahead}, {"learning_rate", cfg.online.learning_rate},
                              {"pretrain_iters", cfg.pretrain.max_iters},
                              {"inner_steps_per_sample", cfg.online.inner_steps_per_sample}};
  write_json(a.out + "/online_config.json", j);
  out << "wrote " << a.out << "/online_raw.csv " << a.out << "/online_aggregate.csv\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Probabilistic motion modelling: LG-SSM filtering, learning, deformations, experiments", "motionssm"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Sample latents and observations from a parameter file");
  simulate->add_option("--params", sim.params, "lgssm-params file")->required();
  simulate->add_option("--steps", sim.steps, "Number of steps T")->capture_default_str();
  simulate->add_option("--seed", sim.seed)->capture_default_str();
  simulate->add_option("--out", sim.out, "Output prefix (PREFIX.z.mseq, PREFIX.x.mseq)")->required();

  FitArgs fit;
  auto* fitc = app.add_subcommand("fit", "Maximum-likelihood fit with Adam");
  fitc->add_option("--data", fit.data, "MSEQ file or glob pattern (T x d_x each)")->required();
  fitc->add_option("--init", fit.init, "Initial lgssm-params file")->required();
  fitc->add_option("--lr", fit.lr)->capture_default_str();
  fitc->add_option("--iters", fit.iters)->capture_default_str();
  fitc->add_option("--seed", fit.seed)->capture_default_str();
  fitc->add_option("--out", fit.out, "Fitted parameter file; the loss curve goes to OUT.loss.csv")->required();

  OnlineArgs onl;
  auto* online = app.add_subcommand("online", "Moving-horizon online learning and forecast comparison");
  online->add_option("--data", onl.data, "MSEQ sequence (T x d_x)")->required();
  online->add_option("--params", onl.params, "Starting (frozen) parameters")->required();
  online->add_option("--horizon", onl.horizon, "Window length N")->capture_default_str();
  online->add_option("--forecast", onl.forecast, "Forecast length H")->capture_default_str();
  online->add_option("--lr", onl.lr)->capture_default_str();
  online->add_option("--inner-steps", onl.inner_steps, "Optimizer steps per sample")->capture_default_str();
  online->add_option("--seed", onl.seed)->capture_default_str();
  online->add_option("--out", onl.out, "Output prefix")->required();

  DeformArgs def;
  auto* deform = app.add_subcommand("deform", "Deformation tools");
  deform->require_subcommand(1);
  auto* dexp = deform->add_subcommand("exp", "Smooth a velocity field and exponentiate it");
  dexp->add_option("--in", def.in, "Velocity field (2, H, W)")->required();
  dexp->add_option("--out", def.out)->required();
  dexp->add_option("--sigma", def.sigma, "Gaussian smoothing sigma")->capture_default_str();
  dexp->add_option("--squarings", def.squarings)->capture_default_str();
  auto* dwarp = deform->add_subcommand("warp", "Warp an image or label map");
  dwarp->add_option("--image", def.image, "Image (H, W), float or uint8 labels")->required();
  dwarp->add_option("--field", def.field, "Displacement field (2, H, W)")->required();
  dwarp->add_option("--out", def.out)->required();
  dwarp->add_flag("--nearest", def.nearest, "Nearest-neighbour sampling for float images");
  auto* djac = deform->add_subcommand("jacdet", "Jacobian determinant of a displacement field");
  djac->add_option("--field", def.field)->required();
  djac->add_option("--out", def.out, "Optional determinant image");

  MetricsArgs met;
  auto* metrics = app.add_subcommand("metrics", "Compare two label maps (Dice, HD95) or images (RMSE, LCC); CSV to stdout");
  metrics->add_option("--a", met.a, "First MSEQ image or label map")->required();
  metrics->add_option("--b", met.b, "Second MSEQ image or label map")->required();
  metrics->add_option("--spacing-x", met.spacing_x, "Column spacing (mm)")->capture_default_str();
  metrics->add_option("--spacing-y", met.spacing_y, "Row spacing (mm)")->capture_default_str();
  metrics->add_option("--window", met.window, "LCC window")->capture_default_str();

  ExperimentArgs exp;
  auto* experiment = app.add_subcommand("experiment", "Synthetic experiments across seeds");
  experiment->require_subcommand(1);
  auto* eimp = experiment->add_subcommand("imputation", "Sparse observation (strides 1, 5, 10)");
  auto* eonl = experiment->add_subcommand("online", "Regime shift: adapted vs frozen forecasts");
  for (auto* sub : {eimp, eonl}) {
    sub->add_option("--seeds", exp.seeds)->capture_default_str();
    sub->add_option("--first-seed", exp.first_seed)->capture_default_str();
    sub->add_option("--out", exp.out, "Output directory")->required();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(sim, out);
    if (fitc->parsed()) return cmd_fit(fit, out);
    if (online->parsed()) return cmd_online(onl, out);
    if (dexp->parsed()) return cmd_deform_exp(def, out);
    if (dwarp->parsed()) return cmd_deform_warp(def, out);
    if (djac->parsed()) return cmd_deform_jacdet(def, out);
    if (metrics->parsed()) return cmd_metrics(met, out);
    if (eimp->parsed()) return cmd_experiment_imputation(exp, out);
    if (eonl->parsed()) return cmd_experiment_online(exp, out);
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const PreconditionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitPrecondition;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitInput;
}

}  // namespace motionssm
