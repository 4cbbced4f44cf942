// Point-cloud network: per-point shared MLP encoder with max-pooled
// global feature, a displacement head and a stress head. Cfg1 gives each
// head its own encoder, Cfg2 shares one. Spatial derivatives of head
// outputs come from central differences over the coordinate inputs with
// the pooled feature held fixed, recorded on the tape so parameter
// gradients flow through them.

#ifndef ELASTOREG_REGNET_HPP
#define ELASTOREG_REGNET_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "elastoreg/diffcore.hpp"
#include "elastoreg/elasticity.hpp"
#include "elastoreg/geometry.hpp"

namespace elastoreg::regnet {

enum class BackboneMode : std::uint8_t { Cfg1 = 1, Cfg2 = 2 };
enum class Activation : std::uint8_t { Tanh = 0, Relu = 1 };

struct NetConfig {
  BackboneMode backbone = BackboneMode::Cfg2;
  std::vector<int> encoder_widths = {64, 128, 256};
  std::vector<int> head_widths = {128, 64};
  Activation activation = Activation::Tanh;

  int global_dim() const { return encoder_widths.back(); }
  // Per-point feature fed to the heads: first encoder layer output.
  int point_feature_dim() const { return encoder_widths.front(); }
  int head_input_dim() const { return global_dim() + 3 + point_feature_dim(); }

  bool operator==(const NetConfig&) const = default;
};

// All learnable state. Tensors are ordered [theta_g | theta_h]: the
// displacement head's backbone (the shared one under Cfg2) and head
// layers first, then the stress side. Weights are (in x out), biases
// (1 x out); each head's final layer starts at zero so training begins
// from the undeformed, stress-free state.
struct NetworkParams {
  NetConfig config;
  std::vector<Eigen::MatrixXd> tensors;
  std::optional<double> beta_raw;  // unconstrained; beta = softplus(beta_raw)

  static NetworkParams init(const NetConfig& config, std::uint64_t seed,
                            bool with_beta = false);

  int parameter_count() const;  // scalar count including beta when present
  int theta_g_tensor_count() const;

  double beta() const;
  void set_beta(double beta_value);

  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);
};

int parameter_count(const NetConfig& config, bool with_beta = false);

double softplus(double x);
double softplus_inverse(double y);

// Leaf nodes for one parameter set, reusable across iterations.
struct TapeBinding {
  std::vector<diffcore::Var> leaves;  // parallel to NetworkParams::tensors
  std::optional<diffcore::Var> beta_leaf;
};

TapeBinding bind(diffcore::Tape& tape, const NetworkParams& params);
// Copies current parameter values into the bound leaves (after an
// optimizer step, once the tape has been truncated back to its marker).
void refresh(diffcore::Tape& tape, TapeBinding& binding,
             const NetworkParams& params);

using VarTensor = elasticity::SymTensor3T<diffcore::Var>;
using VarGrad = elasticity::DispGradT<diffcore::Var>;

struct NetEval {
  diffcore::Var displacements;  // N x 3, mm
  diffcore::Var stresses;       // N x 6: xx yy zz xy xz yz, kPa
  // Only populated when jacobians were requested; components are N x 1.
  std::optional<VarGrad> disp_grad;
  std::optional<VarTensor> dsig_dx, dsig_dy, dsig_dz;
};

// coords must already be centred (network input frame).
NetEval evaluate_on_tape(diffcore::Tape& tape, const TapeBinding& binding,
                         const NetConfig& config,
                         const Eigen::MatrixX3d& coords, double h_step,
                         bool want_jacobians);

// Plain-value wrappers (build a scratch tape internally). `center` is the
// translation subtracted from coordinates before encoding; training uses
// the joint centroid of the source/target pair.
struct EncodeResult {
  Eigen::VectorXd global_feature;
  Eigen::MatrixXd per_point_features;  // N x point_feature_dim
};

EncodeResult encode(const geometry::PointCloud& cloud,
                    const NetworkParams& params, const Eigen::Vector3d& center);

geometry::DisplacementField predict_displacements(
    const geometry::PointCloud& cloud, const NetworkParams& params,
    const Eigen::Vector3d& center);

Eigen::MatrixXd predict_stresses(const geometry::PointCloud& cloud,
                                 const NetworkParams& params,
                                 const Eigen::Vector3d& center);

struct SpatialJacobians {
  Eigen::MatrixXd disp_grad;  // N x 9: xx xy xz yx yy yz zx zy zz
  Eigen::MatrixXd dsig_dx, dsig_dy, dsig_dz;  // N x 6 each
};

SpatialJacobians spatial_jacobians(const geometry::PointCloud& cloud,
                                   const NetworkParams& params,
                                   const Eigen::Vector3d& center,
                                   double h_step);

// Binary checkpoint: header (magic, version, NetConfig, parameter count,
// beta flag) followed by the flat little-endian double array.
void save_checkpoint(const NetworkParams& params,
                     const std::filesystem::path& path);
NetworkParams load_checkpoint(const std::filesystem::path& path);

}  // namespace elastoreg::regnet

#endif
