#include "elastoreg/solver.hpp"

#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>

namespace elastoreg::solver {

using diffcore::Tape;
using diffcore::Var;
using elasticity::DispGradT;
using elasticity::SymTensor3T;
using geometry::PointCloud;
using geometry::RegistrationCase;
using geometry::Zone;
using regnet::NetworkParams;
using regnet::TapeBinding;

void TrainConfig::validate() const {
  if (w <= 0.0) throw std::invalid_argument("solver: w must be positive");
  if (learning_rate <= 0.0) throw std::invalid_argument("solver: bad learning rate");
  if (iterations < 1) throw std::invalid_argument("solver: iterations < 1");
  if (h_step <= 0.0) throw std::invalid_argument("solver: h_step must be > 0");
}

Eigen::Vector3d joint_centroid(const RegistrationCase& cas) {
  Eigen::Vector3d acc = cas.source.positions.colwise().sum().transpose() +
                        cas.target.positions.colwise().sum().transpose();
  return acc / static_cast<double>(cas.source.size() + cas.target.size());
}

namespace {

std::vector<int> chamfer_rows(const PointCloud& c, bool surface_only) {
  if (!surface_only) {
    std::vector<int> all(c.size());
    for (int i = 0; i < c.size(); ++i) all[i] = i;
    return all;
  }
  return c.surface_indices();
}

Eigen::MatrixX3d select_rows(const Eigen::MatrixX3d& m,
                             const std::vector<int>& idx) {
  Eigen::MatrixX3d out(idx.size(), 3);
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(i) = m.row(idx[i]);
  return out;
}

Correspondences match_clouds(const Eigen::MatrixX3d& warped,
                             const RegistrationCase& cas,
                             const geometry::ChamferOptions& opts) {
  Correspondences c;
  c.src_subset = chamfer_rows(cas.source, opts.surface_only);
  c.tgt_subset = chamfer_rows(cas.target, opts.surface_only);
  if (c.src_subset.empty() || c.tgt_subset.empty()) {
    throw std::invalid_argument("solver: empty Chamfer subset");
  }
  Eigen::MatrixX3d ws = select_rows(warped, c.src_subset);
  Eigen::MatrixX3d tg = select_rows(cas.target.positions, c.tgt_subset);
  geometry::KdTree tree_t(tg), tree_s(ws);
  c.src_to_tgt.resize(c.src_subset.size());
  for (std::size_t i = 0; i < c.src_subset.size(); ++i) {
    c.src_to_tgt[i] = tree_t.nearest(ws.row(i).transpose()).index;
  }
  c.tgt_to_src.resize(c.tgt_subset.size());
  for (std::size_t i = 0; i < c.tgt_subset.size(); ++i) {
    c.tgt_to_src[i] = tree_s.nearest(tg.row(i).transpose()).index;
  }
  return c;
}

// Mean over rows of the (possibly squared) Euclidean length of a N x 3
// difference node.
Var mean_row_norm(Var diff, bool squared) {
  Var dx = diffcore::col(diff, 0);
  Var dy = diffcore::col(diff, 1);
  Var dz = diffcore::col(diff, 2);
  Var sq = dx * dx + dy * dy + dz * dz;
  Var per_row = squared ? sq : diffcore::sqrt(sq + 1e-18);
  return (1.0 / static_cast<double>(diff.rows())) * diffcore::sum(per_row);
}

Var chamfer_node(Tape& tape, Var warped, const RegistrationCase& cas,
                 const geometry::ChamferOptions& opts,
                 const Correspondences& corr) {
  Eigen::MatrixX3d tgt = select_rows(cas.target.positions, corr.tgt_subset);

  std::vector<int> matched_tgt(corr.src_subset.size());
  for (std::size_t i = 0; i < corr.src_subset.size(); ++i) {
    matched_tgt[i] = corr.src_to_tgt[i];
  }
  Eigen::MatrixX3d tgt_for_src(corr.src_subset.size(), 3);
  for (std::size_t i = 0; i < corr.src_subset.size(); ++i) {
    tgt_for_src.row(i) = tgt.row(matched_tgt[i]);
  }
  Var ws = diffcore::gather_rows(warped, corr.src_subset);
  Var term1 = mean_row_norm(ws - diffcore::constant(tape, tgt_for_src),
                            opts.squared);

  // Matched warped-source row for every target point (global row indices).
  std::vector<int> src_for_tgt(corr.tgt_subset.size());
  for (std::size_t i = 0; i < corr.tgt_subset.size(); ++i) {
    src_for_tgt[i] = corr.src_subset[corr.tgt_to_src[i]];
  }
  Var ws2 = diffcore::gather_rows(warped, src_for_tgt);
  Var term2 = mean_row_norm(ws2 - diffcore::constant(tape, tgt), opts.squared);
  return term1 + term2;
}

struct LameColumns {
  Var lambda, mu;  // N x 1
};

// Per-point Lame parameters from zone labels. Forward runs read E_PZ from
// the case material; inverse runs derive it as softplus(beta_raw) * E_TZ.
LameColumns lame_columns(Tape& tape, const TapeBinding& binding,
                         const RegistrationCase& cas,
                         const TrainConfig& config) {
  if (!cas.material) {
    throw std::invalid_argument("solver: case carries no material spec");
  }
  double nu = cas.material->poisson;
  if (nu <= -1.0 || nu >= 0.5) {
    throw std::invalid_argument("solver: bad Poisson ratio");
  }
  double c_lambda = nu / ((1.0 - 2.0 * nu) * (1.0 + nu));
  double c_mu = 1.0 / (2.0 * (1.0 + nu));

  int n = cas.source.size();
  Eigen::MatrixXd pz = Eigen::MatrixXd::Zero(n, 1);
  Eigen::MatrixXd tz = Eigen::MatrixXd::Zero(n, 1);
  for (int i = 0; i < n; ++i) {
    // Points outside both zones take the TZ modulus.
    if (cas.source.zones[i] == Zone::PZ) {
      pz(i, 0) = 1.0;
    } else {
      tz(i, 0) = 1.0;
    }
  }
  Var e;
  if (config.inverse) {
    if (!binding.beta_leaf) {
      throw std::invalid_argument("solver: inverse run needs beta in params");
    }
    bool has_pz = pz.sum() > 0.0, has_tz = tz.sum() > 0.0;
    if (!has_pz || !has_tz) {
      // Degenerate single-zone partitions are allowed only when everything
      // is TZ (the loss then reduces to the forward one).
      if (has_pz) {
        throw std::invalid_argument("solver: inverse case lacks TZ points");
      }
    }
    Var beta = ln(diffcore::exp(*binding.beta_leaf) + 1.0);  // softplus
    Var mix = diffcore::constant(tape, tz) +
              beta * diffcore::constant(tape, pz);
    e = cas.material->E_TZ_kPa * mix;
  } else {
    Eigen::MatrixXd evals =
        cas.material->E_TZ_kPa * tz + cas.material->E_PZ_kPa * pz;
    e = diffcore::constant(tape, evals);
  }
  return {c_lambda * e, c_mu * e};
}

const char* kTermNames[] = {"L_R", "L_S", "L_C", "L_E", "total"};

void check_finite(const LossNodes& nodes) {
  const Var* terms[] = {&nodes.L_R, &nodes.L_S, &nodes.L_C, &nodes.L_E,
                        &nodes.total};
  for (int i = 0; i < 5; ++i) {
    double v = terms[i]->scalar();
    if (!std::isfinite(v)) {
      throw NumericalFailure(std::string("solver: non-finite loss term ") +
                             kTermNames[i]);
    }
  }
}

}  // namespace

Correspondences correspondences_for(const RegistrationCase& cas,
                                    const NetworkParams& params,
                                    const TrainConfig& config) {
  geometry::DisplacementField d =
      regnet::predict_displacements(cas.source, params, joint_centroid(cas));
  Eigen::MatrixX3d warped = cas.source.positions + d.vectors;
  return match_clouds(warped, cas, config.chamfer);
}

LossNodes build_loss_graph(Tape& tape, const TapeBinding& binding,
                           const RegistrationCase& cas,
                           const TrainConfig& config,
                           const Correspondences* fixed) {
  cas.validate();
  Eigen::Vector3d center = joint_centroid(cas);
  Eigen::MatrixX3d coords =
      cas.source.positions.rowwise() - center.transpose();
  regnet::NetEval net = regnet::evaluate_on_tape(
      tape, binding, config.net, coords, config.h_step, config.physics);

  Var warped = diffcore::constant(tape, cas.source.positions) + net.displacements;
  Correspondences local;
  if (!fixed) {
    local = match_clouds(warped.value(), cas, config.chamfer);
    fixed = &local;
  }
  Var l_r = chamfer_node(tape, warped, cas, config.chamfer, *fixed);

  Var l_s, l_c, l_e;
  if (config.physics) {
    LameColumns lame = lame_columns(tape, binding, cas, config);
    const DispGradT<Var>& g = *net.disp_grad;
    SymTensor3T<Var> sigma{
        diffcore::col(net.stresses, 0), diffcore::col(net.stresses, 1),
        diffcore::col(net.stresses, 2), diffcore::col(net.stresses, 3),
        diffcore::col(net.stresses, 4), diffcore::col(net.stresses, 5)};

    l_s = diffcore::sum(elasticity::static_equilibrium_residual(
        *net.dsig_dx, *net.dsig_dy, *net.dsig_dz));

    if (config.model == ModelKind::NeoHookean) {
      Var j = elasticity::deformation_jacobian(g);
      Var jc = diffcore::clamp_min(j, config.j_clamp);
      // Inverted-state penalty lives in L_C, next to the 1/J terms it guards.
      Var penalty = config.j_penalty *
                    diffcore::sum(diffcore::square(diffcore::relu(
                        config.j_clamp - j)));
      SymTensor3T<Var> b = elasticity::left_cauchy_green(g);
      SymTensor3T<Var> model =
          elasticity::neo_hookean_stress_from(b, jc, lame.lambda, lame.mu);
      l_c = diffcore::sum(elasticity::stress_pair_residual(sigma, model)) +
            penalty;
      Var tr_b = b.xx + b.yy + b.zz;
      l_e = diffcore::sum(elasticity::neo_hookean_energy_from(
          tr_b, jc, lame.lambda, lame.mu));
    } else {
      l_c = diffcore::sum(elasticity::linear_constitutive_residual(
          sigma, g, lame.lambda, lame.mu));
      l_e = diffcore::sum(
          elasticity::linear_energy(g, lame.lambda, lame.mu));
    }
  } else {
    l_s = diffcore::constant(tape, 0.0);
    l_c = diffcore::constant(tape, 0.0);
    l_e = diffcore::constant(tape, 0.0);
  }

  LossNodes nodes;
  nodes.L_R = l_r;
  nodes.L_S = l_s;
  nodes.L_C = l_c;
  nodes.L_E = l_e;
  nodes.total = config.w * l_r + l_s + l_c + l_e;
  return nodes;
}

namespace {

LossBreakdown breakdown_of(const LossNodes& nodes, int iteration) {
  LossBreakdown b;
  b.iteration = iteration;
  b.L_R = nodes.L_R.scalar();
  b.L_S = nodes.L_S.scalar();
  b.L_C = nodes.L_C.scalar();
  b.L_E = nodes.L_E.scalar();
  b.total = nodes.total.scalar();
  return b;
}

LossBreakdown eval_once(const RegistrationCase& cas, const NetworkParams& params,
                        const TrainConfig& config) {
  config.validate();
  Tape tape;
  TapeBinding binding = regnet::bind(tape, params);
  LossNodes nodes = build_loss_graph(tape, binding, cas, config);
  check_finite(nodes);
  return breakdown_of(nodes, 0);
}

}  // namespace

LossBreakdown forward_loss(const RegistrationCase& cas,
                           const NetworkParams& params,
                           const TrainConfig& config) {
  TrainConfig c = config;
  c.inverse = false;
  return eval_once(cas, params, c);
}

LossBreakdown inverse_loss(const RegistrationCase& cas,
                           const NetworkParams& params,
                           const TrainConfig& config) {
  TrainConfig c = config;
  c.inverse = true;
  return eval_once(cas, params, c);
}

double loss_value_fixed_matches(const RegistrationCase& cas,
                                const NetworkParams& params,
                                const TrainConfig& config,
                                const Correspondences& corr) {
  Tape tape;
  TapeBinding binding = regnet::bind(tape, params);
  LossNodes nodes = build_loss_graph(tape, binding, cas, config, &corr);
  return nodes.total.scalar();
}

TrainState make_initial_state(const TrainConfig& config) {
  TrainState s;
  s.params = NetworkParams::init(config.net, config.seed, config.inverse);
  if (config.inverse) s.params.set_beta(config.beta_init);
  s.opt.m.reserve(s.params.tensors.size());
  s.opt.v.reserve(s.params.tensors.size());
  for (const auto& t : s.params.tensors) {
    s.opt.m.push_back(Eigen::MatrixXd::Zero(t.rows(), t.cols()));
    s.opt.v.push_back(Eigen::MatrixXd::Zero(t.rows(), t.cols()));
  }
  return s;
}

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void adam_update(Eigen::MatrixXd& p, const Eigen::MatrixXd& g,
                 Eigen::MatrixXd& m, Eigen::MatrixXd& v, double lr, int step) {
  m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * g;
  v.array() = kAdamBeta2 * v.array() + (1.0 - kAdamBeta2) * g.array().square();
  double bc1 = 1.0 - std::pow(kAdamBeta1, step);
  double bc2 = 1.0 - std::pow(kAdamBeta2, step);
  p.array() -= lr * (m.array() / bc1) /
               ((v.array() / bc2).sqrt() + kAdamEps);
}

void adam_update_scalar(double& p, double g, double& m, double& v, double lr,
                        int step) {
  m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * g;
  v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * g * g;
  double bc1 = 1.0 - std::pow(kAdamBeta1, step);
  double bc2 = 1.0 - std::pow(kAdamBeta2, step);
  p -= lr * (m / bc1) / (std::sqrt(v / bc2) + kAdamEps);
}

Eigen::MatrixXd grad_or_zero(const Tape& tape, int idx,
                             const Eigen::MatrixXd& like) {
  const Eigen::MatrixXd& a = tape.adjoint(idx);
  if (a.size() == 0) return Eigen::MatrixXd::Zero(like.rows(), like.cols());
  return a;
}

}  // namespace

TrainResult train_from(const RegistrationCase& cas, const TrainConfig& config,
                       TrainState state, std::vector<LossBreakdown> telemetry,
                       BetaTrajectory trajectory) {
  config.validate();
  cas.validate();
  Tape tape;
  TapeBinding binding = regnet::bind(tape, state.params);
  int marker = tape.checkpoint();

  for (int it = state.iteration; it < config.iterations; ++it) {
    LossNodes nodes = build_loss_graph(tape, binding, cas, config);
    check_finite(nodes);
    LossBreakdown b = breakdown_of(nodes, it);
    if (b.total > config.divergence_threshold) {
      throw NumericalFailure("solver: training diverged at iteration " +
                             std::to_string(it) +
                             " (total=" + std::to_string(b.total) + ")");
    }
    telemetry.push_back(b);
    if (config.inverse) {
      trajectory.samples.push_back({it, state.params.beta(), b.total});
    }

    tape.backward(nodes.total.idx);
    ++state.opt.step;
    for (std::size_t i = 0; i < state.params.tensors.size(); ++i) {
      Eigen::MatrixXd g = grad_or_zero(tape, binding.leaves[i].idx,
                                       state.params.tensors[i]);
      if (config.optimizer == OptimizerKind::Adam) {
        adam_update(state.params.tensors[i], g, state.opt.m[i], state.opt.v[i],
                    config.learning_rate, state.opt.step);
      } else {
        state.params.tensors[i] -= config.learning_rate * g;
      }
    }
    if (config.inverse && binding.beta_leaf) {
      const Eigen::MatrixXd& a = tape.adjoint(binding.beta_leaf->idx);
      double g = a.size() ? a(0, 0) : 0.0;
      if (config.optimizer == OptimizerKind::Adam) {
        adam_update_scalar(*state.params.beta_raw, g, state.opt.beta_m,
                           state.opt.beta_v, config.learning_rate,
                           state.opt.step);
      } else {
        *state.params.beta_raw -= config.learning_rate * g;
      }
    }
    tape.truncate(marker);
    regnet::refresh(tape, binding, state.params);
  }

  state.iteration = config.iterations;
  return {std::move(state), std::move(telemetry), std::move(trajectory)};
}

TrainResult train(const RegistrationCase& cas, const TrainConfig& config) {
  return train_from(cas, config, make_initial_state(config), {}, {});
}

void save_optimizer_state(const OptimizerState& s,
                          const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("solver: cannot write " + path.string());
  auto write = [&](const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  };
  std::uint64_t count = s.m.size();
  write(&count, sizeof(count));
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    std::uint64_t rows = s.m[i].rows(), cols = s.m[i].cols();
    write(&rows, sizeof(rows));
    write(&cols, sizeof(cols));
    write(s.m[i].data(), sizeof(double) * s.m[i].size());
    write(s.v[i].data(), sizeof(double) * s.v[i].size());
  }
  write(&s.beta_m, sizeof(double));
  write(&s.beta_v, sizeof(double));
  std::int64_t step = s.step;
  write(&step, sizeof(step));
}

OptimizerState load_optimizer_state(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("solver: cannot open " + path.string());
  auto read = [&](void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw std::runtime_error("solver: truncated optimizer state");
  };
  OptimizerState s;
  std::uint64_t count;
  read(&count, sizeof(count));
  s.m.resize(count);
  s.v.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t rows, cols;
    read(&rows, sizeof(rows));
    read(&cols, sizeof(cols));
    s.m[i].resize(rows, cols);
    s.v[i].resize(rows, cols);
    read(s.m[i].data(), sizeof(double) * s.m[i].size());
    read(s.v[i].data(), sizeof(double) * s.v[i].size());
  }
  read(&s.beta_m, sizeof(double));
  read(&s.beta_v, sizeof(double));
  std::int64_t step;
  read(&step, sizeof(step));
  s.step = static_cast<int>(step);
  return s;
}

std::optional<PlateauResult> detect_plateau(const BetaTrajectory& traj,
                                            double window_frac, double tol) {
  const auto& s = traj.samples;
  int n = static_cast<int>(s.size());
  if (n < 50) {
    throw std::invalid_argument("solver: plateau detection needs >= 50 samples");
  }
  int min_len = static_cast<int>(std::ceil(window_frac * n));
  if (min_len < 1) min_len = 1;

  // Sliding maximum window with range <= tol; monotonic deques give O(n).
  std::deque<int> maxq, minq;
  int best_len = 0, best_begin = -1, best_end = -1;
  int lo = 0;
  for (int hi = 0; hi < n; ++hi) {
    double b = s[hi].beta;
    while (!maxq.empty() && s[maxq.back()].beta <= b) maxq.pop_back();
    maxq.push_back(hi);
    while (!minq.empty() && s[minq.back()].beta >= b) minq.pop_back();
    minq.push_back(hi);
    while (s[maxq.front()].beta - s[minq.front()].beta > tol) {
      if (maxq.front() == lo) maxq.pop_front();
      if (minq.front() == lo) minq.pop_front();
      ++lo;
    }
    int len = hi - lo + 1;
    if (len >= best_len) {  // ties resolve to the latest window
      best_len = len;
      best_begin = lo;
      best_end = hi + 1;
    }
  }
  if (best_len < min_len) return std::nullopt;
  double mean = 0.0;
  for (int i = best_begin; i < best_end; ++i) mean += s[i].beta;
  mean /= static_cast<double>(best_len);
  return PlateauResult{mean, best_begin, best_end};
}

void write_telemetry_csv(const std::vector<LossBreakdown>& telemetry,
                         const BetaTrajectory& traj,
                         const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("solver: cannot write " + path.string());
  os << "iteration,L_R,L_S,L_C,L_E,total,beta\n";
  char buf[512];
  for (std::size_t i = 0; i < telemetry.size(); ++i) {
    const LossBreakdown& b = telemetry[i];
    int len = std::snprintf(buf, sizeof(buf),
                            "%d,%.17g,%.17g,%.17g,%.17g,%.17g,", b.iteration,
                            b.L_R, b.L_S, b.L_C, b.L_E, b.total);
    os.write(buf, len);
    if (i < traj.samples.size()) {
      len = std::snprintf(buf, sizeof(buf), "%.17g", traj.samples[i].beta);
      os.write(buf, len);
    }
    os << "\n";
  }
}

}  // namespace elastoreg::solver
