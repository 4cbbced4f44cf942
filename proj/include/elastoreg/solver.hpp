// Total-loss assembly for the forward (registration) and inverse
// (stiffness-ratio) problems, per-case gradient-descent training with
// telemetry, and plateau extraction on the beta trajectory.

#ifndef ELASTOREG_SOLVER_HPP
#define ELASTOREG_SOLVER_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "elastoreg/elasticity.hpp"
#include "elastoreg/geometry.hpp"
#include "elastoreg/regnet.hpp"

namespace elastoreg::solver {

using elasticity::ModelKind;

enum class OptimizerKind : std::uint8_t { Adam, Sgd };

struct TrainConfig {
  double w = 10.0;  // Chamfer weight, > 0
  double learning_rate = 1e-3;
  int iterations = 3000;
  OptimizerKind optimizer = OptimizerKind::Adam;
  geometry::ChamferOptions chamfer{};
  ModelKind model = ModelKind::NeoHookean;
  regnet::NetConfig net{};
  std::uint64_t seed = 0;
  bool physics = true;    // false reproduces the Without-PINNs ablation
  bool inverse = false;   // learnable stiffness ratio beta
  double beta_init = 1.0;
  double h_step = 1e-3;   // mm, spatial central-difference step
  double j_clamp = 1e-6;  // floor for J inside ln and 1/J
  double j_penalty = 1e6;
  double divergence_threshold = 1e12;

  void validate() const;
};

struct LossBreakdown {
  int iteration = 0;
  double L_R = 0, L_S = 0, L_C = 0, L_E = 0, total = 0;
};

struct BetaSample {
  int iteration;
  double beta;
  double total;
};

struct BetaTrajectory {
  std::vector<BetaSample> samples;
};

// Raised when a loss term goes non-finite or the total diverges; carries
// the name of the offending term.
struct NumericalFailure : std::runtime_error {
  explicit NumericalFailure(const std::string& what) : std::runtime_error(what) {}
};

// Nearest-neighbour matches held fixed while gradients flow through the
// distance terms (standard Chamfer subgradient). Row indices refer to the
// full clouds.
struct Correspondences {
  std::vector<int> src_subset;       // source rows entering the Chamfer sum
  std::vector<int> tgt_subset;
  std::vector<int> src_to_tgt;       // per src_subset entry: index into tgt_subset
  std::vector<int> tgt_to_src;       // per tgt_subset entry: index into src_subset
};

struct LossNodes {
  diffcore::Var L_R, L_S, L_C, L_E, total;
};

// Matches computed from the current warped source (parameters as given).
Correspondences correspondences_for(const geometry::RegistrationCase& cas,
                                    const regnet::NetworkParams& params,
                                    const TrainConfig& config);

// Records the full loss graph on the tape. When `fixed` is null the
// matches are recomputed from the current displacement values.
LossNodes build_loss_graph(diffcore::Tape& tape,
                           const regnet::TapeBinding& binding,
                           const geometry::RegistrationCase& cas,
                           const TrainConfig& config,
                           const Correspondences* fixed = nullptr);

LossBreakdown forward_loss(const geometry::RegistrationCase& cas,
                           const regnet::NetworkParams& params,
                           const TrainConfig& config);

// Same loss with per-point Lame parameters derived from beta * E_TZ in
// the peripheral zone; params must carry beta.
LossBreakdown inverse_loss(const geometry::RegistrationCase& cas,
                           const regnet::NetworkParams& params,
                           const TrainConfig& config);

// Scalar loss at the given parameters under fixed matches; the function
// the tape differentiates, used by finite-difference oracles.
double loss_value_fixed_matches(const geometry::RegistrationCase& cas,
                                const regnet::NetworkParams& params,
                                const TrainConfig& config,
                                const Correspondences& corr);

struct OptimizerState {
  std::vector<Eigen::MatrixXd> m, v;  // parallel to NetworkParams::tensors
  double beta_m = 0, beta_v = 0;
  int step = 0;
};

struct TrainState {
  regnet::NetworkParams params;
  OptimizerState opt;
  int iteration = 0;
};

struct TrainResult {
  TrainState state;  // parameters plus optimizer moments, resumable
  std::vector<LossBreakdown> telemetry;
  BetaTrajectory beta_trajectory;  // empty for forward runs

  const regnet::NetworkParams& params() const { return state.params; }
};

TrainResult train(const geometry::RegistrationCase& cas,
                  const TrainConfig& config);

// Continues from a saved state for `iterations_remaining` more steps;
// byte-identical to an uninterrupted run with the same config.
TrainResult train_from(const geometry::RegistrationCase& cas,
                       const TrainConfig& config, TrainState state,
                       std::vector<LossBreakdown> telemetry,
                       BetaTrajectory trajectory);

TrainState make_initial_state(const TrainConfig& config);

void save_optimizer_state(const OptimizerState& s,
                          const std::filesystem::path& path);
OptimizerState load_optimizer_state(const std::filesystem::path& path);

struct PlateauResult {
  double beta_estimate;
  int window_begin;  // sample indices, [begin, end)
  int window_end;
};

// Longest contiguous window (ties -> latest) of length >= window_frac *
// size whose beta range stays within tol; empty optional when no window
// qualifies.
std::optional<PlateauResult> detect_plateau(const BetaTrajectory& traj,
                                            double window_frac, double tol);

// CSV telemetry: iteration,L_R,L_S,L_C,L_E,total,beta (beta blank for
// forward runs). Values printed with 17 significant digits.
void write_telemetry_csv(const std::vector<LossBreakdown>& telemetry,
                         const BetaTrajectory& traj,
                         const std::filesystem::path& path);

// Centre used for network inputs: mean of all source and target points.
Eigen::Vector3d joint_centroid(const geometry::RegistrationCase& cas);

}  // namespace elastoreg::solver

#endif
