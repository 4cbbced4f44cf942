#include "elastoreg/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "elastoreg/evaluate.hpp"
#include "elastoreg/femoracle.hpp"

namespace elastoreg::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using solver::TrainConfig;

namespace {

// ---------------------------------------------------------------- logging

enum class LogLevel { Quiet = 0, Info = 1, Debug = 2 };

LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("ELASTOREG_LOG");
    if (!env) return LogLevel::Info;
    std::string v(env);
    if (v == "quiet" || v == "0") return LogLevel::Quiet;
    if (v == "debug" || v == "2") return LogLevel::Debug;
    return LogLevel::Info;
  }();
  return level;
}

std::mutex g_log_mutex;

void log_at(LogLevel lvl, const std::string& msg) {
  if (log_level() < lvl) return;
  std::lock_guard<std::mutex> lock(g_log_mutex);
  std::cerr << msg << "\n";
}

void log_info(const std::string& msg) { log_at(LogLevel::Info, msg); }
void log_debug(const std::string& msg) { log_at(LogLevel::Debug, msg); }

// ----------------------------------------------------------- small helpers

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void atomic_rename_into_place(const fs::path& tmp, const fs::path& path) {
  fs::rename(tmp, path);
}

template <class Fn>
std::vector<std::exception_ptr> run_parallel(int n_items, int jobs, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n_items);
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next.fetch_add(1); i < n_items; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  int threads = std::min(std::max(jobs, 1), n_items);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return errors;
}

// 0 = clean, 2 = non-numerical failures, 3 = numerical failure anywhere.
int classify_errors(const std::vector<std::exception_ptr>& errors,
                    const std::vector<std::string>& ids) {
  int code = kExitOk;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const solver::NumericalFailure& e) {
      log_at(LogLevel::Quiet, "error [" + ids[i] + "]: " + e.what());
      code = kExitNumerical;
    } catch (const std::exception& e) {
      log_at(LogLevel::Quiet, "error [" + ids[i] + "]: " + e.what());
      if (code != kExitNumerical) code = kExitPartial;
    }
  }
  return code;
}

// ------------------------------------------------------ config (de)serial

std::string model_name(elasticity::ModelKind m) {
  return m == elasticity::ModelKind::Linear ? "linear" : "neo_hookean";
}

elasticity::ModelKind model_from_name(const std::string& s) {
  if (s == "linear") return elasticity::ModelKind::Linear;
  if (s == "neo_hookean") return elasticity::ModelKind::NeoHookean;
  throw std::invalid_argument("cli: unknown model '" + s + "'");
}

json train_to_json(const TrainConfig& t) {
  json j;
  j["w"] = t.w;
  j["learning_rate"] = t.learning_rate;
  j["iterations"] = t.iterations;
  j["optimizer"] = t.optimizer == solver::OptimizerKind::Adam ? "adam" : "sgd";
  j["model"] = model_name(t.model);
  j["backbone"] =
      t.net.backbone == regnet::BackboneMode::Cfg1 ? "cfg1" : "cfg2";
  j["activation"] =
      t.net.activation == regnet::Activation::Tanh ? "tanh" : "relu";
  j["encoder_widths"] = t.net.encoder_widths;
  j["head_widths"] = t.net.head_widths;
  j["seed"] = t.seed;
  j["chamfer_surface_only"] = t.chamfer.surface_only;
  j["chamfer_squared"] = t.chamfer.squared;
  j["h_step"] = t.h_step;
  j["beta_init"] = t.beta_init;
  return j;
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  t.w = j.value("w", t.w);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.iterations = j.value("iterations", t.iterations);
  std::string opt = j.value("optimizer", std::string("adam"));
  t.optimizer =
      opt == "sgd" ? solver::OptimizerKind::Sgd : solver::OptimizerKind::Adam;
  t.model = model_from_name(j.value("model", std::string("neo_hookean")));
  std::string bb = j.value("backbone", std::string("cfg2"));
  t.net.backbone =
      bb == "cfg1" ? regnet::BackboneMode::Cfg1 : regnet::BackboneMode::Cfg2;
  std::string act = j.value("activation", std::string("tanh"));
  t.net.activation =
      act == "relu" ? regnet::Activation::Relu : regnet::Activation::Tanh;
  t.net.encoder_widths =
      j.value("encoder_widths", t.net.encoder_widths);
  t.net.head_widths = j.value("head_widths", t.net.head_widths);
  t.seed = j.value("seed", t.seed);
  t.chamfer.surface_only = j.value("chamfer_surface_only", true);
  t.chamfer.squared = j.value("chamfer_squared", true);
  t.h_step = j.value("h_step", t.h_step);
  t.beta_init = j.value("beta_init", t.beta_init);
  return t;
}

}  // namespace

void GenConfig::validate() const {
  if (cohort < 1) throw std::invalid_argument("cli: cohort must be >= 1");
  if (!(ratio_min > 0.0 && ratio_max >= ratio_min)) {
    throw std::invalid_argument("cli: bad ratio range");
  }
  if (!(deform_min_mm > 0.0 && deform_max_mm >= deform_min_mm)) {
    throw std::invalid_argument("cli: bad deformation range");
  }
  if (n_surface > n_total || n_surface < 1) {
    throw std::invalid_argument("cli: bad downsample counts");
  }
}

void ExperimentConfig::validate() const {
  gen.validate();
  train.validate();
  if (jobs < 1) throw std::invalid_argument("cli: jobs must be >= 1");
  if (repeats < 1) throw std::invalid_argument("cli: repeats must be >= 1");
  if (checkpoint_every < 1) {
    throw std::invalid_argument("cli: checkpoint_every must be >= 1");
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cli: cannot open config " + path.string());
  json j = json::parse(in);
  ExperimentConfig c;
  if (j.contains("gen")) {
    const json& g = j["gen"];
    c.gen.cohort = g.value("cohort", c.gen.cohort);
    c.gen.seed = g.value("seed", c.gen.seed);
    c.gen.ratio_min = g.value("ratio_min", c.gen.ratio_min);
    c.gen.ratio_max = g.value("ratio_max", c.gen.ratio_max);
    c.gen.deform_min_mm = g.value("deform_min_mm", c.gen.deform_min_mm);
    c.gen.deform_max_mm = g.value("deform_max_mm", c.gen.deform_max_mm);
    c.gen.n_total = g.value("n_total", c.gen.n_total);
    c.gen.n_surface = g.value("n_surface", c.gen.n_surface);
    c.gen.lattice_step_mm = g.value("lattice_step_mm", c.gen.lattice_step_mm);
  }
  if (j.contains("train")) c.train = train_from_json(j["train"]);
  c.out_dir = j.value("out_dir", c.out_dir.string());
  c.jobs = j.value("jobs", c.jobs);
  c.repeats = j.value("repeats", c.repeats);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.plateau_window_frac = j.value("plateau_window_frac", c.plateau_window_frac);
  c.plateau_tol = j.value("plateau_tol", c.plateau_tol);
  c.sweep_w = j.value("sweep_w", c.sweep_w);
  c.validate();
  return c;
}

void save_config(const ExperimentConfig& c, const fs::path& path) {
  json j;
  j["gen"] = {{"cohort", c.gen.cohort},
              {"seed", c.gen.seed},
              {"ratio_min", c.gen.ratio_min},
              {"ratio_max", c.gen.ratio_max},
              {"deform_min_mm", c.gen.deform_min_mm},
              {"deform_max_mm", c.gen.deform_max_mm},
              {"n_total", c.gen.n_total},
              {"n_surface", c.gen.n_surface},
              {"lattice_step_mm", c.gen.lattice_step_mm}};
  j["train"] = train_to_json(c.train);
  j["out_dir"] = c.out_dir.string();
  j["jobs"] = c.jobs;
  j["repeats"] = c.repeats;
  j["checkpoint_every"] = c.checkpoint_every;
  j["plateau_window_frac"] = c.plateau_window_frac;
  j["plateau_tol"] = c.plateau_tol;
  j["sweep_w"] = c.sweep_w;
  atomic_write_text(path, j.dump(2));
}

const std::vector<std::string>& forward_arms() {
  static const std::vector<std::string> arms = {
      "WithoutPINNs", "LinearCfg1", "LinearCfg2", "NonlinearCfg1",
      "NonlinearCfg2"};
  return arms;
}

TrainConfig arm_config(const ExperimentConfig& c, const std::string& arm) {
  TrainConfig t = c.train;
  t.inverse = false;
  t.physics = true;
  if (arm == "WithoutPINNs") {
    t.physics = false;
    t.net.backbone = regnet::BackboneMode::Cfg2;
  } else if (arm == "LinearCfg1") {
    t.model = elasticity::ModelKind::Linear;
    t.net.backbone = regnet::BackboneMode::Cfg1;
  } else if (arm == "LinearCfg2") {
    t.model = elasticity::ModelKind::Linear;
    t.net.backbone = regnet::BackboneMode::Cfg2;
  } else if (arm == "NonlinearCfg1") {
    t.model = elasticity::ModelKind::NeoHookean;
    t.net.backbone = regnet::BackboneMode::Cfg1;
  } else if (arm == "NonlinearCfg2") {
    t.model = elasticity::ModelKind::NeoHookean;
    t.net.backbone = regnet::BackboneMode::Cfg2;
  } else if (arm == "linear" || arm == "nonlinear") {
    t.inverse = true;
    t.model = arm == "linear" ? elasticity::ModelKind::Linear
                              : elasticity::ModelKind::NeoHookean;
    t.net.backbone = regnet::BackboneMode::Cfg2;
  } else {
    throw std::invalid_argument("cli: unknown arm '" + arm + "'");
  }
  return t;
}

std::vector<std::string> list_case_ids(const ExperimentConfig& c) {
  fs::path dir = c.out_dir / "cases";
  std::vector<std::string> ids;
  if (!fs::exists(dir)) return ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string name = entry.path().filename().string();
    if (name == "manifest.json") continue;
    if (name.size() > 5 && name.ends_with(".json") &&
        !name.ends_with(".meta.json")) {
      ids.push_back(name.substr(0, name.size() - 5));
    }
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

void atomic_write_text(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cli: cannot write " + tmp.string());
    os << content;
  }
  atomic_rename_into_place(tmp, path);
}

// ------------------------------------------------------------------- gen

namespace {

std::uint64_t case_seed(std::uint64_t base, int i) {
  return base * 1000003ULL + static_cast<std::uint64_t>(i);
}

}  // namespace

int cmd_gen(const ExperimentConfig& c) {
  c.validate();
  fs::path dir = c.out_dir / "cases";
  fs::create_directories(dir);

  std::vector<std::string> ids(c.gen.cohort);
  std::vector<json> manifest_rows(c.gen.cohort);
  for (int i = 0; i < c.gen.cohort; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "case_%03d", i);
    ids[i] = name;
  }

  auto errors = run_parallel(c.gen.cohort, c.jobs, [&](int i) {
    std::mt19937_64 rng(case_seed(c.gen.seed, i));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    double ratio =
        c.gen.ratio_min + (c.gen.ratio_max - c.gen.ratio_min) * u01(rng);
    double d_target = c.gen.deform_min_mm +
                      (c.gen.deform_max_mm - c.gen.deform_min_mm) * u01(rng);
    double axis_scale = 0.90 + 0.20 * u01(rng);

    femoracle::CaseSpec spec;
    spec.semi_axes *= axis_scale;
    spec.ratio_gt = ratio;
    spec.indent_mm = d_target;
    spec.lattice_step_mm = c.gen.lattice_step_mm;
    spec.n_total = c.gen.n_total;
    spec.n_surface = c.gen.n_surface;
    spec.seed = case_seed(c.gen.seed, i) ^ 0x5bf03635ULL;

    femoracle::GeneratedCase g = femoracle::generate_case(spec);
    // The solve is linear in the prescribed indentation, so one corrective
    // pass puts the peak sampled displacement exactly on target.
    if (std::abs(g.max_gt_displacement_mm - d_target) > 1e-9 * d_target &&
        g.max_gt_displacement_mm > 0.0) {
      spec.indent_mm *= d_target / g.max_gt_displacement_mm;
      g = femoracle::generate_case(spec);
    }
    femoracle::write_generated_case(g, dir / ids[i]);
    manifest_rows[i] = {{"id", ids[i]},
                        {"ratio_gt", g.spec.ratio_gt},
                        {"max_gt_displacement_mm", g.max_gt_displacement_mm},
                        {"indent_mm", g.spec.indent_mm},
                        {"seed", g.spec.seed},
                        {"mesh_nodes", g.mesh_nodes},
                        {"mesh_tets", g.mesh_tets},
                        {"solver_residual", g.solver_residual}};
    log_info("gen " + ids[i] + ": ratio " + fmt(g.spec.ratio_gt) +
             ", peak displacement " + fmt(g.max_gt_displacement_mm) + " mm");
  });

  int code = classify_errors(errors, ids);
  if (code == kExitOk) {
    json manifest;
    manifest["cohort"] = c.gen.cohort;
    manifest["seed"] = c.gen.seed;
    manifest["cases"] = manifest_rows;
    atomic_write_text(dir / "manifest.json", manifest.dump(2));
  }
  return code;
}

// ------------------------------------------------------- resumable training

namespace {

void parse_telemetry(const fs::path& path, int upto,
                     std::vector<solver::LossBreakdown>& rows,
                     solver::BetaTrajectory& traj) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cli: cannot open " + path.string());
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() < 6) {
      throw std::runtime_error("cli: malformed telemetry row in " +
                               path.string());
    }
    solver::LossBreakdown b;
    b.iteration = std::stoi(fields[0]);
    if (b.iteration >= upto) break;
    b.L_R = std::stod(fields[1]);
    b.L_S = std::stod(fields[2]);
    b.L_C = std::stod(fields[3]);
    b.L_E = std::stod(fields[4]);
    b.total = std::stod(fields[5]);
    rows.push_back(b);
    if (fields.size() >= 7 && !fields[6].empty()) {
      traj.samples.push_back({b.iteration, std::stod(fields[6]), b.total});
    }
  }
}

void save_checkpoint_atomic(const regnet::NetworkParams& p,
                            const fs::path& path) {
  fs::path tmp = path;
  tmp += ".tmp";
  regnet::save_checkpoint(p, tmp);
  atomic_rename_into_place(tmp, path);
}

void save_opt_atomic(const solver::OptimizerState& s, const fs::path& path) {
  fs::path tmp = path;
  tmp += ".tmp";
  solver::save_optimizer_state(s, tmp);
  atomic_rename_into_place(tmp, path);
}

void write_telemetry_atomic(const std::vector<solver::LossBreakdown>& rows,
                            const solver::BetaTrajectory& traj,
                            const fs::path& path) {
  fs::path tmp = path;
  tmp += ".tmp";
  solver::write_telemetry_csv(rows, traj, tmp);
  atomic_rename_into_place(tmp, path);
}

// Trains one case, checkpointing every `every` iterations and resuming
// from compatible on-disk state. Re-running a finished case is a no-op.
solver::TrainResult train_case_resumable(const geometry::RegistrationCase& cas,
                                         const TrainConfig& cfg,
                                         const fs::path& dir,
                                         const std::string& id, int every) {
  fs::path ckpt = dir / (id + ".ckpt");
  fs::path optp = dir / (id + ".opt");
  fs::path prog = dir / (id + ".progress.json");
  fs::path telem = dir / (id + ".telemetry.csv");

  solver::TrainState state;
  std::vector<solver::LossBreakdown> rows;
  solver::BetaTrajectory traj;
  int start = 0;

  if (fs::exists(prog) && fs::exists(ckpt) && fs::exists(optp) &&
      fs::exists(telem)) {
    std::ifstream is(prog);
    json p = json::parse(is);
    bool compatible = p.value("iterations", -1) == cfg.iterations &&
                      p.value("seed", std::uint64_t(0)) == cfg.seed &&
                      p.value("w", 0.0) == cfg.w;
    if (compatible) {
      start = p.value("iteration", 0);
      state.params = regnet::load_checkpoint(ckpt);
      state.opt = solver::load_optimizer_state(optp);
      state.iteration = start;
      parse_telemetry(telem, start, rows, traj);
      log_debug("resume " + id + " at iteration " + std::to_string(start));
    }
  }
  if (start == 0) {
    state = solver::make_initial_state(cfg);
    rows.clear();
    traj.samples.clear();
  }

  while (start < cfg.iterations) {
    int end = std::min(start + every, cfg.iterations);
    TrainConfig chunk = cfg;
    chunk.iterations = end;
    solver::TrainResult r = solver::train_from(cas, chunk, std::move(state),
                                               std::move(rows),
                                               std::move(traj));
    state = std::move(r.state);
    rows = std::move(r.telemetry);
    traj = std::move(r.beta_trajectory);
    start = end;

    save_checkpoint_atomic(state.params, ckpt);
    save_opt_atomic(state.opt, optp);
    write_telemetry_atomic(rows, traj, telem);
    json p = {{"iteration", start},
              {"iterations", cfg.iterations},
              {"seed", cfg.seed},
              {"w", cfg.w}};
    atomic_write_text(prog, p.dump());
    log_debug(id + ": iteration " + std::to_string(start) + "/" +
              std::to_string(cfg.iterations) + ", total " +
              fmt(rows.back().total));
  }
  return {std::move(state), std::move(rows), std::move(traj)};
}

}  // namespace

// ----------------------------------------------------------------- train

int cmd_train(const ExperimentConfig& c, const std::string& arm) {
  c.validate();
  TrainConfig base = arm_config(c, arm);
  if (base.inverse) {
    throw std::invalid_argument("cli: arm '" + arm +
                                "' is an inverse arm; use the invert command");
  }
  std::vector<std::string> ids = list_case_ids(c);
  if (ids.empty()) {
    throw std::runtime_error("cli: no cases under " +
                             (c.out_dir / "cases").string() +
                             " (run gen first)");
  }
  fs::path dir = c.out_dir / "arms" / arm;
  fs::create_directories(dir);

  auto errors = run_parallel(static_cast<int>(ids.size()), c.jobs, [&](int i) {
    geometry::RegistrationCase cas =
        geometry::load_case(c.out_dir / "cases" / (ids[i] + ".json"));
    TrainConfig cfg = base;
    cfg.seed = case_seed(base.seed, i);
    solver::TrainResult r =
        train_case_resumable(cas, cfg, dir, ids[i], c.checkpoint_every);
    log_info("train " + arm + " " + ids[i] + ": final total " +
             fmt(r.telemetry.back().total));
  });
  return classify_errors(errors, ids);
}

// ---------------------------------------------------------------- invert

int cmd_invert(const ExperimentConfig& c, const std::string& arm) {
  c.validate();
  TrainConfig base = arm_config(c, arm);
  if (!base.inverse) {
    throw std::invalid_argument("cli: arm '" + arm +
                                "' is a forward arm; use the train command");
  }
  std::vector<std::string> ids = list_case_ids(c);
  if (ids.empty()) {
    throw std::runtime_error("cli: no cases under " +
                             (c.out_dir / "cases").string() +
                             " (run gen first)");
  }
  fs::path dir = c.out_dir / "invert" / arm;
  fs::path traces = c.out_dir / "beta_traces";
  fs::create_directories(dir);
  fs::create_directories(traces);

  auto errors = run_parallel(static_cast<int>(ids.size()), c.jobs, [&](int i) {
    geometry::RegistrationCase cas =
        geometry::load_case(c.out_dir / "cases" / (ids[i] + ".json"));
    if (!cas.material) {
      throw std::runtime_error("cli: case " + ids[i] +
                               " carries no material spec");
    }
    double ratio_gt = cas.material->ratio();

    std::vector<json> repeat_rows;
    std::vector<double> estimates;
    std::vector<solver::BetaTrajectory> trajs;
    for (int r = 0; r < c.repeats; ++r) {
      TrainConfig cfg = base;
      cfg.seed = case_seed(base.seed, i) + static_cast<std::uint64_t>(r);
      std::string rid = ids[i] + (c.repeats > 1 ? "_rep" + std::to_string(r)
                                                : std::string());
      solver::TrainResult res =
          train_case_resumable(cas, cfg, dir, rid, c.checkpoint_every);
      fs::path trace = traces / (ids[i] + "_" + arm +
                                 (c.repeats > 1 ? "_rep" + std::to_string(r)
                                                : std::string()) +
                                 ".csv");
      write_telemetry_atomic(res.telemetry, res.beta_trajectory, trace);
      std::optional<solver::PlateauResult> plateau;
      if (res.beta_trajectory.samples.size() >= 50) {
        plateau = solver::detect_plateau(res.beta_trajectory,
                                         c.plateau_window_frac, c.plateau_tol);
      }
      json rr = {{"seed", cfg.seed},
                 {"final_beta", res.state.params.beta()},
                 {"identified", plateau.has_value()}};
      if (plateau) {
        rr["beta_estimate"] = plateau->beta_estimate;
        rr["window"] = {plateau->window_begin, plateau->window_end};
        estimates.push_back(plateau->beta_estimate);
      }
      repeat_rows.push_back(rr);
      trajs.push_back(std::move(res.beta_trajectory));
    }

    if (c.repeats > 1) {
      // Min/max band across repeats for trace plotting.
      std::size_t n = trajs[0].samples.size();
      std::ostringstream os;
      os << "iteration,beta_min,beta_max\n";
      for (std::size_t k = 0; k < n; ++k) {
        double lo = trajs[0].samples[k].beta, hi = lo;
        for (const auto& t : trajs) {
          lo = std::min(lo, t.samples[k].beta);
          hi = std::max(hi, t.samples[k].beta);
        }
        os << trajs[0].samples[k].iteration << "," << fmt(lo) << ","
           << fmt(hi) << "\n";
      }
      atomic_write_text(traces / (ids[i] + "_" + arm + "_band.csv"), os.str());
    }

    json out;
    out["case_id"] = ids[i];
    out["arm"] = arm;
    out["ratio_gt"] = ratio_gt;
    out["repeats"] = repeat_rows;
    if (!estimates.empty()) {
      double mean = 0.0;
      for (double e : estimates) mean += e;
      mean /= static_cast<double>(estimates.size());
      out["identified"] = true;
      out["beta_estimate"] = mean;
      out["ape_percent"] = evaluate::ape(mean, ratio_gt);
      log_info("invert " + arm + " " + ids[i] + ": beta " + fmt(mean) +
               " (gt " + fmt(ratio_gt) + ", ape " +
               fmt(out["ape_percent"].get<double>()) + "%)");
    } else {
      out["identified"] = false;
      log_info("invert " + arm + " " + ids[i] + ": plateau not identified");
    }
    atomic_write_text(dir / (ids[i] + ".json"), out.dump(2));
  });
  return classify_errors(errors, ids);
}

// ------------------------------------------------------------------ eval

namespace {

json quartiles_json(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  auto quantile = [&](double q) {
    double pos = q * (static_cast<double>(v.size()) - 1.0);
    std::size_t lo = static_cast<std::size_t>(pos);
    std::size_t hi = std::min(lo + 1, v.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
  };
  return {v.front(), quantile(0.25), quantile(0.5), quantile(0.75), v.back()};
}

}  // namespace

int cmd_eval(const ExperimentConfig& c) {
  c.validate();
  std::vector<std::string> ids = list_case_ids(c);
  if (ids.empty()) {
    throw std::runtime_error("cli: no cases to evaluate");
  }
  std::vector<geometry::RegistrationCase> cases;
  cases.reserve(ids.size());
  for (const auto& id : ids) {
    cases.push_back(geometry::load_case(c.out_dir / "cases" / (id + ".json")));
  }

  std::vector<evaluate::CaseRow> rows;
  bool partial = false;

  auto eval_arm_dir = [&](const std::string& arm, const fs::path& dir,
                          bool inverse) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      fs::path ckpt = dir / (ids[i] + ".ckpt");
      if (!fs::exists(ckpt)) {
        log_info("eval: missing checkpoint for " + arm + "/" + ids[i]);
        partial = true;
        continue;
      }
      const geometry::RegistrationCase& cas = cases[i];
      if (!cas.gt_displacement) {
        throw std::runtime_error("cli: case " + ids[i] +
                                 " has no ground-truth displacement");
      }
      regnet::NetworkParams params = regnet::load_checkpoint(ckpt);
      geometry::DisplacementField pred = regnet::predict_displacements(
          cas.source, params, solver::joint_centroid(cas));
      evaluate::CaseRow row;
      row.case_id = ids[i];
      row.arm = arm;
      row.rmse_all_mm = evaluate::rmse(pred, *cas.gt_displacement, cas.source,
                                       evaluate::Subset::All);
      row.rmse_surface_mm = evaluate::rmse(pred, *cas.gt_displacement,
                                           cas.source,
                                           evaluate::Subset::Surface);
      if (inverse) {
        fs::path res = dir / (ids[i] + ".json");
        if (fs::exists(res)) {
          std::ifstream is(res);
          json r = json::parse(is);
          if (r.value("identified", false)) {
            row.beta_pred = r["beta_estimate"].get<double>();
            row.ape_percent = r["ape_percent"].get<double>();
          } else {
            partial = true;
          }
        }
      }
      rows.push_back(std::move(row));
    }
  };

  for (const std::string& arm : forward_arms()) {
    fs::path dir = c.out_dir / "arms" / arm;
    if (fs::exists(dir)) eval_arm_dir(arm, dir, false);
  }
  for (const std::string& arm : {std::string("linear"),
                                 std::string("nonlinear")}) {
    fs::path dir = c.out_dir / "invert" / arm;
    if (fs::exists(dir)) eval_arm_dir("Inverse_" + arm, dir, true);
  }

  evaluate::CohortReport report =
      evaluate::build_report(rows, forward_arms());
  if (!report.missing_arms.empty()) partial = true;

  fs::path out = c.out_dir;
  evaluate::write_report_csv(report, out / "cohort_report.csv.tmp");
  fs::rename(out / "cohort_report.csv.tmp", out / "cohort_report.csv");
  evaluate::write_aggregates_json(report, out / "aggregates.json.tmp");
  fs::rename(out / "aggregates.json.tmp", out / "aggregates.json");

  // Box-plot quartiles of surface rmse per arm.
  json box;
  std::map<std::string, std::vector<double>> surf;
  for (const auto& row : report.rows) {
    surf[row.arm].push_back(row.rmse_surface_mm);
  }
  std::ostringstream os;
  os << "arm,min,q1,median,q3,max\n";
  for (const auto& [arm, v] : surf) {
    json q = quartiles_json(v);
    os << arm;
    for (const auto& x : q) os << "," << fmt(x.get<double>());
    os << "\n";
  }
  atomic_write_text(out / "boxplot.csv", os.str());

  for (const auto& [arm, agg] : report.per_arm) {
    log_info("eval " + arm + ": surface rmse " + fmt(agg.rmse_surface.mean) +
             " +/- " + fmt(agg.rmse_surface.std) + " mm over " +
             std::to_string(agg.cases) + " cases");
  }
  for (const auto& [pair, p] : report.p_values) {
    log_debug("eval p[" + pair.first + " vs " + pair.second + "] = " + fmt(p));
  }
  return partial ? kExitPartial : kExitOk;
}

// ----------------------------------------------------------------- sweep

int cmd_sweep(const ExperimentConfig& c, const std::string& arm) {
  c.validate();
  std::vector<std::string> ids = list_case_ids(c);
  if (ids.empty()) {
    throw std::runtime_error("cli: no cases to sweep over");
  }
  std::ostringstream summary;
  summary << "w,arm,mean_rmse_surface_mm,std_rmse_surface_mm\n";
  int worst = kExitOk;
  for (double w : c.sweep_w) {
    ExperimentConfig sub = c;
    sub.train.w = w;
    char tag[64];
    std::snprintf(tag, sizeof(tag), "w_%g", w);
    sub.out_dir = c.out_dir / "sweep" / tag;
    fs::create_directories(sub.out_dir);
    // Share the generated cohort across sweep points.
    fs::path link = sub.out_dir / "cases";
    if (!fs::exists(link)) {
      fs::create_directory_symlink(fs::absolute(c.out_dir / "cases"), link);
    }
    int code = cmd_train(sub, arm);
    worst = std::max(worst, code);
    if (code == kExitNumerical) continue;

    std::vector<double> surf;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      fs::path ckpt = sub.out_dir / "arms" / arm / (ids[i] + ".ckpt");
      if (!fs::exists(ckpt)) continue;
      geometry::RegistrationCase cas =
          geometry::load_case(c.out_dir / "cases" / (ids[i] + ".json"));
      regnet::NetworkParams params = regnet::load_checkpoint(ckpt);
      geometry::DisplacementField pred = regnet::predict_displacements(
          cas.source, params, solver::joint_centroid(cas));
      surf.push_back(evaluate::rmse(pred, *cas.gt_displacement, cas.source,
                                    evaluate::Subset::Surface));
    }
    if (!surf.empty()) {
      evaluate::MeanStd ms = evaluate::mean_std(surf);
      summary << fmt(w) << "," << arm << "," << fmt(ms.mean) << ","
              << fmt(ms.std) << "\n";
      log_info("sweep w=" + fmt(w) + ": surface rmse " + fmt(ms.mean) +
               " mm");
    }
  }
  atomic_write_text(c.out_dir / "sweep_summary.csv", summary.str());
  return worst;
}

}  // namespace elastoreg::cli

#include <CLI11.hpp>

namespace elastoreg::cli {

int run(int argc, const char* const* argv) {
  CLI::App app{"Biomechanics-constrained point-set registration and "
               "stiffness identification"};
  app.require_subcommand(1);

  std::string config_path;
  std::string arm;
  std::string out_dir;
  std::vector<std::string> chamfer_mode;
  int jobs = -1, cohort = -1, repeats = -1;
  std::int64_t seed = -1;
  double w = -1.0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON experiment config");
    sub->add_option("--jobs", jobs, "parallel case workers");
    sub->add_option("--seed", seed, "base seed override");
    sub->add_option("--out", out_dir, "output directory override");
    sub->add_option("--w", w, "Chamfer weight override");
    sub->add_option("--chamfer", chamfer_mode,
                    "Chamfer mode: {surface|all} {squared|plain}")
        ->expected(2);
  };

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic cohort");
  add_common(gen);
  gen->add_option("--cohort", cohort, "number of cases");

  CLI::App* train = app.add_subcommand("train", "train one forward arm");
  add_common(train);
  train->add_option("--arm", arm, "forward arm name")->required();

  CLI::App* invert = app.add_subcommand("invert", "estimate stiffness ratios");
  add_common(invert);
  invert->add_option("--arm", arm, "inverse arm: linear|nonlinear")
      ->required();
  invert->add_option("--repeats", repeats, "seeds per case");

  CLI::App* eval = app.add_subcommand("eval", "build cohort reports");
  add_common(eval);

  CLI::App* sweep = app.add_subcommand("sweep", "Chamfer-weight sweep");
  add_common(sweep);
  sweep->add_option("--arm", arm, "arm to sweep (default NonlinearCfg2)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    ExperimentConfig c;
    if (!config_path.empty()) c = load_config(config_path);
    if (jobs >= 1) c.jobs = jobs;
    if (cohort >= 1) c.gen.cohort = cohort;
    if (repeats >= 1) c.repeats = repeats;
    if (seed >= 0) {
      c.gen.seed = static_cast<std::uint64_t>(seed);
      c.train.seed = static_cast<std::uint64_t>(seed);
    }
    if (!out_dir.empty()) c.out_dir = out_dir;
    if (w > 0.0) c.train.w = w;
    if (!chamfer_mode.empty()) {
      for (const std::string& m : chamfer_mode) {
        if (m == "surface") c.train.chamfer.surface_only = true;
        else if (m == "all") c.train.chamfer.surface_only = false;
        else if (m == "squared") c.train.chamfer.squared = true;
        else if (m == "plain") c.train.chamfer.squared = false;
        else throw std::invalid_argument("cli: bad --chamfer token '" + m + "'");
      }
    }

    if (gen->parsed()) return cmd_gen(c);
    if (train->parsed()) return cmd_train(c, arm);
    if (invert->parsed()) return cmd_invert(c, arm);
    if (eval->parsed()) return cmd_eval(c);
    if (sweep->parsed()) {
      return cmd_sweep(c, arm.empty() ? "NonlinearCfg2" : arm);
    }
    return 1;
  } catch (const solver::NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace elastoreg::cli
