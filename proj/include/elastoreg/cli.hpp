// Command-line front end: case generation, per-arm training, stiffness
// inversion, cohort evaluation and the Chamfer-weight sweep, driven by a
// JSON config file with flag overrides.

#ifndef ELASTOREG_CLI_HPP
#define ELASTOREG_CLI_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "elastoreg/solver.hpp"

namespace elastoreg::cli {

// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitPartial = 2;    // degraded output, e.g. missing arm
inline constexpr int kExitNumerical = 3;  // divergence or non-finite loss

struct GenConfig {
  int cohort = 8;
  std::uint64_t seed = 0;
  double ratio_min = 0.10;
  double ratio_max = 0.20;
  // Target peak ground-truth displacement band, mm.
  double deform_min_mm = 5.7;
  double deform_max_mm = 8.5;
  int n_total = 1024;
  int n_surface = 512;
  double lattice_step_mm = 2.0;

  void validate() const;
};

struct ExperimentConfig {
  GenConfig gen;
  solver::TrainConfig train;  // base settings; the arm name adjusts
                              // model / backbone / physics / inverse
  std::filesystem::path out_dir = "runs";
  int jobs = 1;
  int repeats = 3;  // inverse-run seeds per case; traces get min/max bands
  int checkpoint_every = 500;  // iterations between resumable checkpoints
  double plateau_window_frac = 0.10;
  double plateau_tol = 0.05;
  std::vector<double> sweep_w = {1.0, 10.0, 100.0};

  void validate() const;
};

ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& c, const std::filesystem::path& path);

// The five forward arms of the ablation grid.
const std::vector<std::string>& forward_arms();

// Maps an arm name onto the base TrainConfig. Forward arms:
// WithoutPINNs, LinearCfg1, LinearCfg2, NonlinearCfg1, NonlinearCfg2.
// Inverse arms: linear, nonlinear (both Cfg2, beta learnable).
solver::TrainConfig arm_config(const ExperimentConfig& c,
                               const std::string& arm);

// Sorted case-file stems (e.g. "case_003") under <out_dir>/cases.
std::vector<std::string> list_case_ids(const ExperimentConfig& c);

// Write-to-temp-then-rename so concurrent readers never see partial files.
void atomic_write_text(const std::filesystem::path& path,
                       const std::string& content);

int cmd_gen(const ExperimentConfig& c);
int cmd_train(const ExperimentConfig& c, const std::string& arm);
int cmd_invert(const ExperimentConfig& c, const std::string& arm);
int cmd_eval(const ExperimentConfig& c);
int cmd_sweep(const ExperimentConfig& c, const std::string& arm);

// Full argv entry point used by the binary; returns the process exit code.
int run(int argc, const char* const* argv);

}  // namespace elastoreg::cli

#endif
