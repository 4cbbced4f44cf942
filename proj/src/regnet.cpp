#include "elastoreg/regnet.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>

namespace elastoreg::regnet {

using diffcore::Tape;
using diffcore::Var;

double softplus(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

double softplus_inverse(double y) {
  if (y <= 0.0) {
    throw std::invalid_argument("regnet: softplus inverse needs y > 0");
  }
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

namespace {

// Tensors per MLP: one (in x out) weight and one (1 x out) bias per layer.
int mlp_tensor_count(int layers) { return 2 * layers; }

int encoder_layers(const NetConfig& c) {
  return static_cast<int>(c.encoder_widths.size());
}
int head_layers(const NetConfig& c) {
  return static_cast<int>(c.head_widths.size()) + 1;
}

std::vector<std::pair<int, int>> encoder_shapes(const NetConfig& c) {
  std::vector<std::pair<int, int>> shapes;
  int in = 3;
  for (int w : c.encoder_widths) {
    shapes.emplace_back(in, w);
    shapes.emplace_back(1, w);
    in = w;
  }
  return shapes;
}

std::vector<std::pair<int, int>> head_shapes(const NetConfig& c, int out_dim) {
  std::vector<std::pair<int, int>> shapes;
  int in = c.head_input_dim();
  for (int w : c.head_widths) {
    shapes.emplace_back(in, w);
    shapes.emplace_back(1, w);
    in = w;
  }
  shapes.emplace_back(in, out_dim);
  shapes.emplace_back(1, out_dim);
  return shapes;
}

std::vector<std::pair<int, int>> all_shapes(const NetConfig& c) {
  std::vector<std::pair<int, int>> shapes;
  auto append = [&](const std::vector<std::pair<int, int>>& s) {
    shapes.insert(shapes.end(), s.begin(), s.end());
  };
  append(encoder_shapes(c));       // displacement-side (or shared) encoder
  append(head_shapes(c, 3));       // displacement head
  if (c.backbone == BackboneMode::Cfg1) append(encoder_shapes(c));
  append(head_shapes(c, 6));       // stress head
  return shapes;
}

}  // namespace

int parameter_count(const NetConfig& config, bool with_beta) {
  int n = 0;
  for (auto [r, c] : all_shapes(config)) n += r * c;
  return n + (with_beta ? 1 : 0);
}

NetworkParams NetworkParams::init(const NetConfig& config, std::uint64_t seed,
                                  bool with_beta) {
  NetworkParams p;
  p.config = config;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  auto shapes = all_shapes(config);
  int enc_tensors = mlp_tensor_count(encoder_layers(config));
  int head_tensors = mlp_tensor_count(head_layers(config));
  // Indices of final head layers (weight and bias), zero-initialized.
  std::vector<std::size_t> zeroed;
  std::size_t disp_head_end = enc_tensors + head_tensors;
  zeroed.push_back(disp_head_end - 2);
  zeroed.push_back(disp_head_end - 1);
  zeroed.push_back(shapes.size() - 2);
  zeroed.push_back(shapes.size() - 1);

  for (std::size_t i = 0; i < shapes.size(); ++i) {
    auto [rows, cols] = shapes[i];
    Eigen::MatrixXd t(rows, cols);
    bool zero = rows == 1 ||  // biases start at zero
                std::find(zeroed.begin(), zeroed.end(), i) != zeroed.end();
    if (zero) {
      t.setZero();
    } else {
      double scale = 1.0 / std::sqrt(static_cast<double>(rows));
      for (long r = 0; r < t.rows(); ++r) {
        for (long c = 0; c < t.cols(); ++c) t(r, c) = scale * gauss(rng);
      }
    }
    p.tensors.push_back(std::move(t));
  }
  if (with_beta) p.beta_raw = softplus_inverse(1.0);
  return p;
}

int NetworkParams::parameter_count() const {
  int n = 0;
  for (const auto& t : tensors) n += static_cast<int>(t.size());
  return n + (beta_raw ? 1 : 0);
}

int NetworkParams::theta_g_tensor_count() const {
  return mlp_tensor_count(encoder_layers(config)) +
         mlp_tensor_count(head_layers(config));
}

double NetworkParams::beta() const {
  if (!beta_raw) throw std::logic_error("regnet: params carry no beta");
  return softplus(*beta_raw);
}

void NetworkParams::set_beta(double beta_value) {
  beta_raw = softplus_inverse(beta_value);
}

std::vector<double> NetworkParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& t : tensors) flat.insert(flat.end(), t.data(), t.data() + t.size());
  if (beta_raw) flat.push_back(*beta_raw);
  return flat;
}

void NetworkParams::unflatten(const std::vector<double>& flat) {
  if (static_cast<int>(flat.size()) != parameter_count()) {
    throw std::invalid_argument("regnet: flat vector size mismatch");
  }
  std::size_t at = 0;
  for (auto& t : tensors) {
    std::copy(flat.begin() + at, flat.begin() + at + t.size(), t.data());
    at += t.size();
  }
  if (beta_raw) *beta_raw = flat[at];
}

TapeBinding bind(Tape& tape, const NetworkParams& params) {
  TapeBinding b;
  b.leaves.reserve(params.tensors.size());
  for (const auto& t : params.tensors) b.leaves.push_back(diffcore::leaf(tape, t));
  if (params.beta_raw) {
    b.beta_leaf = diffcore::leaf(tape, Eigen::MatrixXd::Constant(1, 1, *params.beta_raw));
  }
  return b;
}

void refresh(Tape& tape, TapeBinding& binding, const NetworkParams& params) {
  for (std::size_t i = 0; i < binding.leaves.size(); ++i) {
    tape.mutable_value(binding.leaves[i].idx) = params.tensors[i];
  }
  if (binding.beta_leaf) {
    tape.mutable_value(binding.beta_leaf->idx)(0, 0) = *params.beta_raw;
  }
}

namespace {

Var activate(Var x, Activation a) {
  return a == Activation::Tanh ? diffcore::tanh(x) : diffcore::relu(x);
}

struct EncoderEval {
  Var global_row;   // 1 x G
  Var global_rep;   // N x G
  Var point_feat;   // N x point_feature_dim
};

EncoderEval run_encoder(std::span<const Var> tensors, Var coords,
                        const NetConfig& cfg) {
  Var h = coords;
  Var first;
  int layers = encoder_layers(cfg);
  for (int l = 0; l < layers; ++l) {
    h = activate(diffcore::add_rowvec(diffcore::matmul(h, tensors[2 * l]),
                                      tensors[2 * l + 1]),
                 cfg.activation);
    if (l == 0) first = h;
  }
  EncoderEval e;
  e.global_row = diffcore::colwise_max(h);
  e.global_rep = diffcore::repeat_rows(e.global_row, static_cast<int>(coords.rows()));
  e.point_feat = first;
  return e;
}

// Completes a head forward pass from the first-layer pre-activation.
Var head_tail(Var z1, std::span<const Var> tensors, const NetConfig& cfg) {
  Var h = activate(z1, cfg.activation);
  int layers = head_layers(cfg);
  for (int l = 1; l < layers; ++l) {
    Var z = diffcore::add_rowvec(diffcore::matmul(h, tensors[2 * l]),
                                 tensors[2 * l + 1]);
    h = (l + 1 < layers) ? activate(z, cfg.activation) : z;
  }
  return h;
}

struct HeadEval {
  Var out;                                   // N x out_dim
  std::array<Var, 3> d_daxis;                // N x out_dim, central differences
};

// The perturbed passes reuse the base first-layer pre-activation: moving
// coordinate j by +-h only shifts it by +-h times the matching weight row,
// so no encoder or first-layer matmul is repeated.
HeadEval run_head(const EncoderEval& enc, Var coords,
                  std::span<const Var> tensors, const NetConfig& cfg,
                  double h_step, bool want_jacobians) {
  std::array<Var, 3> parts = {enc.global_rep, coords, enc.point_feat};
  Var input = diffcore::concat_cols(parts);
  Var z1 = diffcore::add_rowvec(diffcore::matmul(input, tensors[0]), tensors[1]);
  HeadEval h;
  h.out = head_tail(z1, tensors, cfg);
  if (!want_jacobians) return h;
  int coord_offset = cfg.global_dim();
  for (int axis = 0; axis < 3; ++axis) {
    Var w_row = diffcore::row(tensors[0], coord_offset + axis);
    Var plus = head_tail(diffcore::add_rowvec(z1, h_step * w_row), tensors, cfg);
    Var minus = head_tail(diffcore::add_rowvec(z1, -h_step * w_row), tensors, cfg);
    h.d_daxis[axis] = (1.0 / (2.0 * h_step)) * (plus - minus);
  }
  return h;
}

VarTensor sym_from_matrix(Var m) {
  return {diffcore::col(m, 0), diffcore::col(m, 1), diffcore::col(m, 2),
          diffcore::col(m, 3), diffcore::col(m, 4), diffcore::col(m, 5)};
}

}  // namespace

NetEval evaluate_on_tape(Tape& tape, const TapeBinding& binding,
                         const NetConfig& config,
                         const Eigen::MatrixX3d& coords, double h_step,
                         bool want_jacobians) {
  if (coords.rows() < 1) {
    throw std::invalid_argument("regnet: empty point cloud");
  }
  Var x = diffcore::constant(tape, coords);
  std::span<const Var> leaves(binding.leaves);

  int enc_n = mlp_tensor_count(encoder_layers(config));
  int head_n = mlp_tensor_count(head_layers(config));

  EncoderEval enc_g = run_encoder(leaves.subspan(0, enc_n), x, config);
  std::span<const Var> disp_head = leaves.subspan(enc_n, head_n);
  EncoderEval enc_h = enc_g;
  std::span<const Var> stress_head;
  if (config.backbone == BackboneMode::Cfg1) {
    enc_h = run_encoder(leaves.subspan(enc_n + head_n, enc_n), x, config);
    stress_head = leaves.subspan(2 * enc_n + head_n, head_n);
  } else {
    stress_head = leaves.subspan(enc_n + head_n, head_n);
  }

  HeadEval d = run_head(enc_g, x, disp_head, config, h_step, want_jacobians);
  HeadEval s = run_head(enc_h, x, stress_head, config, h_step, want_jacobians);

  NetEval out;
  out.displacements = d.out;
  out.stresses = s.out;
  if (want_jacobians) {
    VarGrad g;
    g.xx = diffcore::col(d.d_daxis[0], 0);
    g.yx = diffcore::col(d.d_daxis[0], 1);
    g.zx = diffcore::col(d.d_daxis[0], 2);
    g.xy = diffcore::col(d.d_daxis[1], 0);
    g.yy = diffcore::col(d.d_daxis[1], 1);
    g.zy = diffcore::col(d.d_daxis[1], 2);
    g.xz = diffcore::col(d.d_daxis[2], 0);
    g.yz = diffcore::col(d.d_daxis[2], 1);
    g.zz = diffcore::col(d.d_daxis[2], 2);
    out.disp_grad = g;
    out.dsig_dx = sym_from_matrix(s.d_daxis[0]);
    out.dsig_dy = sym_from_matrix(s.d_daxis[1]);
    out.dsig_dz = sym_from_matrix(s.d_daxis[2]);
  }
  return out;
}

namespace {

Eigen::MatrixX3d centered(const geometry::PointCloud& cloud,
                          const Eigen::Vector3d& center) {
  return cloud.positions.rowwise() - center.transpose();
}

}  // namespace

EncodeResult encode(const geometry::PointCloud& cloud,
                    const NetworkParams& params, const Eigen::Vector3d& center) {
  Tape tape;
  TapeBinding binding = bind(tape, params);
  Var x = diffcore::constant(tape, centered(cloud, center));
  int enc_n = mlp_tensor_count(encoder_layers(params.config));
  EncoderEval e = run_encoder(std::span<const Var>(binding.leaves).subspan(0, enc_n),
                              x, params.config);
  return {e.global_row.value().row(0).transpose(), e.point_feat.value()};
}

geometry::DisplacementField predict_displacements(
    const geometry::PointCloud& cloud, const NetworkParams& params,
    const Eigen::Vector3d& center) {
  Tape tape;
  TapeBinding binding = bind(tape, params);
  NetEval e = evaluate_on_tape(tape, binding, params.config,
                               centered(cloud, center), 1e-3, false);
  return {e.displacements.value()};
}

Eigen::MatrixXd predict_stresses(const geometry::PointCloud& cloud,
                                 const NetworkParams& params,
                                 const Eigen::Vector3d& center) {
  Tape tape;
  TapeBinding binding = bind(tape, params);
  NetEval e = evaluate_on_tape(tape, binding, params.config,
                               centered(cloud, center), 1e-3, false);
  return e.stresses.value();
}

SpatialJacobians spatial_jacobians(const geometry::PointCloud& cloud,
                                   const NetworkParams& params,
                                   const Eigen::Vector3d& center,
                                   double h_step) {
  if (h_step <= 0.0) throw std::invalid_argument("regnet: h_step must be > 0");
  Tape tape;
  TapeBinding binding = bind(tape, params);
  NetEval e = evaluate_on_tape(tape, binding, params.config,
                               centered(cloud, center), h_step, true);
  int n = cloud.size();
  SpatialJacobians j;
  j.disp_grad.resize(n, 9);
  const VarGrad& g = *e.disp_grad;
  const diffcore::Var* comps[9] = {&g.xx, &g.xy, &g.xz, &g.yx, &g.yy,
                                   &g.yz, &g.zx, &g.zy, &g.zz};
  for (int c = 0; c < 9; ++c) j.disp_grad.col(c) = comps[c]->value();
  auto pack = [](const VarTensor& t) {
    Eigen::MatrixXd m(t.xx.value().rows(), 6);
    m.col(0) = t.xx.value();
    m.col(1) = t.yy.value();
    m.col(2) = t.zz.value();
    m.col(3) = t.xy.value();
    m.col(4) = t.xz.value();
    m.col(5) = t.yz.value();
    return m;
  };
  j.dsig_dx = pack(*e.dsig_dx);
  j.dsig_dy = pack(*e.dsig_dy);
  j.dsig_dz = pack(*e.dsig_dz);
  return j;
}

namespace {

constexpr char kMagic[8] = {'E', 'L', 'R', 'G', 'N', 'E', 'T', '1'};

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("regnet: truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const NetworkParams& params,
                     const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("regnet: cannot write " + path.string());
  os.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(os, 1);  // format version
  write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(params.config.backbone));
  write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(params.config.activation));
  write_pod<std::uint32_t>(os, params.config.encoder_widths.size());
  for (int w : params.config.encoder_widths) write_pod<std::int32_t>(os, w);
  write_pod<std::uint32_t>(os, params.config.head_widths.size());
  for (int w : params.config.head_widths) write_pod<std::int32_t>(os, w);
  write_pod<std::uint64_t>(os, params.parameter_count());
  write_pod<std::uint8_t>(os, params.beta_raw ? 1 : 0);
  std::vector<double> flat = params.flatten();
  os.write(reinterpret_cast<const char*>(flat.data()),
           static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (!os) throw std::runtime_error("regnet: checkpoint write failed");
}

NetworkParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("regnet: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("regnet: not a checkpoint file");
  }
  auto version = read_pod<std::uint32_t>(is);
  if (version != 1) throw std::runtime_error("regnet: unknown checkpoint version");
  NetConfig cfg;
  cfg.backbone = static_cast<BackboneMode>(read_pod<std::uint8_t>(is));
  cfg.activation = static_cast<Activation>(read_pod<std::uint8_t>(is));
  cfg.encoder_widths.resize(read_pod<std::uint32_t>(is));
  for (int& w : cfg.encoder_widths) w = read_pod<std::int32_t>(is);
  cfg.head_widths.resize(read_pod<std::uint32_t>(is));
  for (int& w : cfg.head_widths) w = read_pod<std::int32_t>(is);
  auto count = read_pod<std::uint64_t>(is);
  bool with_beta = read_pod<std::uint8_t>(is) != 0;

  NetworkParams p = NetworkParams::init(cfg, 0, with_beta);
  if (count != static_cast<std::uint64_t>(p.parameter_count())) {
    throw std::runtime_error("regnet: checkpoint parameter count mismatch");
  }
  std::vector<double> flat(count);
  is.read(reinterpret_cast<char*>(flat.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!is) throw std::runtime_error("regnet: truncated checkpoint payload");
  p.unflatten(flat);
  return p;
}

}  // namespace elastoreg::regnet
