#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "elastoreg/regnet.hpp"

using namespace elastoreg::regnet;
using elastoreg::geometry::PointCloud;
using elastoreg::geometry::Zone;

namespace {

NetConfig small_config(BackboneMode mode) {
  NetConfig c;
  c.backbone = mode;
  c.encoder_widths = {8, 16, 24};
  c.head_widths = {16, 8};
  return c;
}

PointCloud random_cloud(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  PointCloud c;
  c.positions.resize(n, 3);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < 3; ++k) c.positions(i, k) = u(rng);
  c.surface.assign(n, 1);
  c.zones.assign(n, Zone::TZ);
  return c;
}

// Params whose every weight is nonzero (random init leaves the final head
// layers at zero; perturb them so outputs actually move).
NetworkParams dense_params(const NetConfig& cfg, std::uint64_t seed) {
  NetworkParams p = NetworkParams::init(cfg, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> g(0.0, 0.3);
  for (auto& t : p.tensors) {
    for (long i = 0; i < t.size(); ++i) {
      if (t.data()[i] == 0.0) t.data()[i] = g(rng);
    }
  }
  return p;
}

}  // namespace

TEST_CASE("zero-initialized heads produce the undeformed, stress-free state") {
  std::mt19937_64 rng(31);
  PointCloud cloud = random_cloud(20, rng);
  for (BackboneMode mode : {BackboneMode::Cfg1, BackboneMode::Cfg2}) {
    NetworkParams p = NetworkParams::init(small_config(mode), 5);
    auto d = predict_displacements(cloud, p, Eigen::Vector3d::Zero());
    CHECK(d.vectors.norm() == 0.0);
    auto s = predict_stresses(cloud, p, Eigen::Vector3d::Zero());
    CHECK(s.norm() == 0.0);
  }
}

TEST_CASE("Cfg2 shares the encoder and has fewer parameters than Cfg1") {
  NetConfig c1 = small_config(BackboneMode::Cfg1);
  NetConfig c2 = small_config(BackboneMode::Cfg2);
  int n1 = parameter_count(c1);
  int n2 = parameter_count(c2);
  CHECK(n2 < n1);
  // The difference is exactly one encoder stack.
  int enc = 0;
  int in = 3;
  for (int w : c1.encoder_widths) {
    enc += in * w + w;
    in = w;
  }
  CHECK(n1 - n2 == enc);

  NetworkParams p1 = NetworkParams::init(c1, 0);
  NetworkParams p2 = NetworkParams::init(c2, 0);
  CHECK(p1.parameter_count() == n1);
  CHECK(p2.parameter_count() == n2);
}

TEST_CASE("init is deterministic per seed") {
  NetConfig cfg = small_config(BackboneMode::Cfg2);
  NetworkParams a = NetworkParams::init(cfg, 7);
  NetworkParams b = NetworkParams::init(cfg, 7);
  NetworkParams c = NetworkParams::init(cfg, 8);
  CHECK(a.flatten() == b.flatten());
  CHECK(a.flatten() != c.flatten());
}

TEST_CASE("global feature is permutation invariant, outputs equivariant") {
  std::mt19937_64 rng(32);
  PointCloud cloud = random_cloud(30, rng);
  NetworkParams p = dense_params(small_config(BackboneMode::Cfg2), 3);

  std::vector<int> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  PointCloud shuffled = cloud;
  for (int i = 0; i < 30; ++i) {
    shuffled.positions.row(i) = cloud.positions.row(perm[i]);
  }

  Eigen::Vector3d center(0.3, -0.1, 0.8);
  EncodeResult e1 = encode(cloud, p, center);
  EncodeResult e2 = encode(shuffled, p, center);
  CHECK((e1.global_feature - e2.global_feature).norm() < 1e-12);

  auto d1 = predict_displacements(cloud, p, center);
  auto d2 = predict_displacements(shuffled, p, center);
  auto s1 = predict_stresses(cloud, p, center);
  auto s2 = predict_stresses(shuffled, p, center);
  for (int i = 0; i < 30; ++i) {
    CHECK((d2.vectors.row(i) - d1.vectors.row(perm[i])).norm() < 1e-12);
    CHECK((s2.row(i) - s1.row(perm[i])).norm() < 1e-12);
  }
}

TEST_CASE("hand-built relu network with a linear head has exact jacobians") {
  // Encoder weights stay zero so all features vanish; the head reduces to
  // disp_x = relu(2 x + 5) = 2 x + 5 on the sampled range, making central
  // differences exact.
  NetConfig cfg = small_config(BackboneMode::Cfg2);
  cfg.activation = Activation::Relu;
  NetworkParams p = NetworkParams::init(cfg, 0);
  for (auto& t : p.tensors) t.setZero();

  int enc_tensors = 2 * static_cast<int>(cfg.encoder_widths.size());
  int coord_row = cfg.global_dim();  // x-coordinate row of the head input
  Eigen::MatrixXd& w1 = p.tensors[enc_tensors];
  Eigen::MatrixXd& b1 = p.tensors[enc_tensors + 1];
  Eigen::MatrixXd& w2 = p.tensors[enc_tensors + 2];
  Eigen::MatrixXd& w3 = p.tensors[enc_tensors + 4];
  w1(coord_row, 0) = 2.0;
  b1(0, 0) = 5.0;
  w2(0, 0) = 1.0;
  w3(0, 0) = 1.0;

  std::mt19937_64 rng(33);
  PointCloud cloud = random_cloud(25, rng);
  cloud.positions *= 0.2;  // keep 2x + 5 > 0 under the +-h probes

  SpatialJacobians j =
      spatial_jacobians(cloud, p, Eigen::Vector3d::Zero(), 1e-3);
  for (int i = 0; i < cloud.size(); ++i) {
    CHECK(j.disp_grad(i, 0) == doctest::Approx(2.0).epsilon(1e-9));  // G_xx
    for (int c = 1; c < 9; ++c) {
      CHECK(std::abs(j.disp_grad(i, c)) < 1e-9);
    }
  }
  auto d = predict_displacements(cloud, p, Eigen::Vector3d::Zero());
  for (int i = 0; i < cloud.size(); ++i) {
    CHECK(d.vectors(i, 0) ==
          doctest::Approx(2.0 * cloud.positions(i, 0) + 5.0).epsilon(1e-12));
    CHECK(d.vectors(i, 1) == 0.0);
    CHECK(d.vectors(i, 2) == 0.0);
  }
}

TEST_CASE("spatial jacobians converge at O(h^2)") {
  std::mt19937_64 rng(34);
  PointCloud cloud = random_cloud(12, rng);
  NetworkParams p = dense_params(small_config(BackboneMode::Cfg2), 9);
  Eigen::Vector3d center = Eigen::Vector3d::Zero();

  SpatialJacobians ref = spatial_jacobians(cloud, p, center, 1e-5);
  SpatialJacobians h1 = spatial_jacobians(cloud, p, center, 0.2);
  SpatialJacobians h2 = spatial_jacobians(cloud, p, center, 0.1);
  double e1 = (h1.disp_grad - ref.disp_grad).norm();
  double e2 = (h2.disp_grad - ref.disp_grad).norm();
  CHECK(e1 > 0.0);
  double ratio = e1 / e2;
  CHECK(ratio > 3.0);  // ~4 for a clean quadratic error law
  CHECK(ratio < 5.5);

  double s1 = (h1.dsig_dx - ref.dsig_dx).norm();
  double s2 = (h2.dsig_dx - ref.dsig_dx).norm();
  CHECK(s1 / s2 > 3.0);
  CHECK(s1 / s2 < 5.5);
}

TEST_CASE("centering shifts are absorbed exactly") {
  std::mt19937_64 rng(35);
  PointCloud cloud = random_cloud(15, rng);
  NetworkParams p = dense_params(small_config(BackboneMode::Cfg1), 4);
  Eigen::Vector3d center(1.0, 2.0, 3.0);
  PointCloud shifted = cloud;
  shifted.positions.rowwise() += center.transpose();
  auto d1 = predict_displacements(cloud, p, Eigen::Vector3d::Zero());
  auto d2 = predict_displacements(shifted, p, center);
  CHECK((d1.vectors - d2.vectors).norm() < 1e-12);
}

TEST_CASE("softplus and its inverse") {
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)));
  for (double y : {0.05, 0.15, 1.0, 7.0, 40.0}) {
    CHECK(softplus(softplus_inverse(y)) == doctest::Approx(y).epsilon(1e-12));
  }
  CHECK_THROWS_AS(softplus_inverse(0.0), std::invalid_argument);
}

TEST_CASE("beta accessors") {
  NetworkParams p = NetworkParams::init(small_config(BackboneMode::Cfg2), 0, true);
  CHECK(p.beta() == doctest::Approx(1.0).epsilon(1e-12));
  p.set_beta(0.15);
  CHECK(p.beta() == doctest::Approx(0.15).epsilon(1e-12));
  NetworkParams q = NetworkParams::init(small_config(BackboneMode::Cfg2), 0);
  CHECK_THROWS_AS(q.beta(), std::logic_error);
}

TEST_CASE("checkpoint round trip is exact") {
  auto dir = std::filesystem::temp_directory_path();
  for (BackboneMode mode : {BackboneMode::Cfg1, BackboneMode::Cfg2}) {
    for (bool with_beta : {false, true}) {
      NetworkParams p = dense_params(small_config(mode), 11);
      if (with_beta) p.set_beta(0.37);
      auto path = dir / "elastoreg_ckpt_test.bin";
      save_checkpoint(p, path);
      NetworkParams q = load_checkpoint(path);
      CHECK(q.config == p.config);
      CHECK(q.flatten() == p.flatten());
      CHECK(q.beta_raw.has_value() == with_beta);
      std::filesystem::remove(path);
    }
  }
}

TEST_CASE("checkpoint loader rejects foreign files") {
  auto path = std::filesystem::temp_directory_path() / "elastoreg_not_ckpt";
  {
    std::ofstream os(path, std::ios::binary);
    os << "definitely not a checkpoint";
  }
  CHECK_THROWS(load_checkpoint(path));
  std::filesystem::remove(path);
}

TEST_CASE("flatten and unflatten are inverse") {
  NetworkParams p = dense_params(small_config(BackboneMode::Cfg1), 13);
  std::vector<double> flat = p.flatten();
  NetworkParams q = NetworkParams::init(p.config, 99);
  q.unflatten(flat);
  CHECK(q.flatten() == flat);
  flat.pop_back();
  CHECK_THROWS_AS(q.unflatten(flat), std::invalid_argument);
}
