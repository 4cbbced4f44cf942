#include "elastoreg/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace elastoreg::geometry {

using nlohmann::json;

std::string zone_name(Zone z) {
  switch (z) {
    case Zone::PZ: return "PZ";
    case Zone::TZ: return "TZ";
    case Zone::Outside: return "OUTSIDE";
  }
  throw std::logic_error("geometry: bad zone");
}

Zone zone_from_name(const std::string& s) {
  if (s == "PZ") return Zone::PZ;
  if (s == "TZ") return Zone::TZ;
  if (s == "OUTSIDE") return Zone::Outside;
  throw std::invalid_argument("geometry: unknown zone label '" + s + "'");
}

std::vector<int> PointCloud::surface_indices() const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (surface[i]) out.push_back(i);
  }
  return out;
}

std::vector<int> PointCloud::zone_indices(Zone z) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (zones[i] == z) out.push_back(i);
  }
  return out;
}

void PointCloud::validate() const {
  if (size() < 4) throw std::invalid_argument("geometry: cloud needs N >= 4");
  if (!positions.allFinite()) {
    throw std::invalid_argument("geometry: non-finite coordinates");
  }
  if (surface.size() != static_cast<std::size_t>(size()) ||
      zones.size() != static_cast<std::size_t>(size())) {
    throw std::invalid_argument("geometry: mask/label length mismatch");
  }
}

KdTree::KdTree(const Eigen::MatrixX3d& points) : points_(points) {
  if (points_.rows() == 0) {
    throw std::invalid_argument("geometry: kd-tree over empty cloud");
  }
  std::vector<int> idx(points_.rows());
  std::iota(idx.begin(), idx.end(), 0);
  nodes_.reserve(idx.size());
  root_ = build(idx, 0, static_cast<int>(idx.size()), 0);
}

int KdTree::build(std::vector<int>& idx, int lo, int hi, int depth) {
  if (lo >= hi) return -1;
  int axis = depth % 3;
  int mid = (lo + hi) / 2;
  std::nth_element(idx.begin() + lo, idx.begin() + mid, idx.begin() + hi,
                   [&](int a, int b) {
                     double pa = points_(a, axis), pb = points_(b, axis);
                     if (pa != pb) return pa < pb;
                     return a < b;
                   });
  KNode n;
  n.point = idx[mid];
  n.axis = static_cast<std::uint8_t>(axis);
  int self = static_cast<int>(nodes_.size());
  nodes_.push_back(n);
  nodes_[self].left = build(idx, lo, mid, depth + 1);
  nodes_[self].right = build(idx, mid + 1, hi, depth + 1);
  return self;
}

void KdTree::search(int node, const Eigen::Vector3d& q, NearestResult& best) const {
  if (node < 0) return;
  const KNode& n = nodes_[node];
  double d = (points_.row(n.point).transpose() - q).norm();
  if (d < best.distance || (d == best.distance && n.point < best.index)) {
    best = {n.point, d};
  }
  double delta = q[n.axis] - points_(n.point, n.axis);
  int near = delta < 0 ? n.left : n.right;
  int far = delta < 0 ? n.right : n.left;
  search(near, q, best);
  if (std::abs(delta) <= best.distance) search(far, q, best);
}

NearestResult KdTree::nearest(const Eigen::Vector3d& query) const {
  NearestResult best{-1, std::numeric_limits<double>::infinity()};
  search(root_, query, best);
  return best;
}

NearestResult nearest_neighbor(const Eigen::Vector3d& query,
                               const PointCloud& target) {
  if (target.size() == 0) {
    throw std::invalid_argument("geometry: nearest_neighbor on empty cloud");
  }
  NearestResult best{-1, std::numeric_limits<double>::infinity()};
  for (int i = 0; i < target.size(); ++i) {
    double d = (target.positions.row(i).transpose() - query).norm();
    if (d < best.distance) best = {i, d};
  }
  return best;
}

namespace {

Eigen::MatrixX3d select_rows(const Eigen::MatrixX3d& m,
                             const std::vector<int>& idx) {
  Eigen::MatrixX3d out(idx.size(), 3);
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(i) = m.row(idx[i]);
  return out;
}

Eigen::MatrixX3d chamfer_subset(const PointCloud& c, const ChamferOptions& o) {
  if (!o.surface_only) return c.positions;
  return select_rows(c.positions, c.surface_indices());
}

double one_sided_mean(const Eigen::MatrixX3d& from, const KdTree& tree,
                      bool squared) {
  double acc = 0.0;
  for (long i = 0; i < from.rows(); ++i) {
    double d = tree.nearest(from.row(i).transpose()).distance;
    acc += squared ? d * d : d;
  }
  return acc / static_cast<double>(from.rows());
}

}  // namespace

double chamfer(const PointCloud& a, const PointCloud& b,
               const ChamferOptions& opts) {
  Eigen::MatrixX3d pa = chamfer_subset(a, opts);
  Eigen::MatrixX3d pb = chamfer_subset(b, opts);
  if (pa.rows() == 0 || pb.rows() == 0) {
    throw std::invalid_argument("geometry: chamfer over empty cloud");
  }
  KdTree ta(pa), tb(pb);
  return one_sided_mean(pa, tb, opts.squared) + one_sided_mean(pb, ta, opts.squared);
}

double chamfer_bruteforce(const PointCloud& a, const PointCloud& b,
                          const ChamferOptions& opts) {
  Eigen::MatrixX3d pa = chamfer_subset(a, opts);
  Eigen::MatrixX3d pb = chamfer_subset(b, opts);
  if (pa.rows() == 0 || pb.rows() == 0) {
    throw std::invalid_argument("geometry: chamfer over empty cloud");
  }
  auto side = [&](const Eigen::MatrixX3d& from, const Eigen::MatrixX3d& to) {
    double acc = 0.0;
    for (long i = 0; i < from.rows(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (long j = 0; j < to.rows(); ++j) {
        best = std::min(best, (from.row(i) - to.row(j)).norm());
      }
      acc += opts.squared ? best * best : best;
    }
    return acc / static_cast<double>(from.rows());
  };
  return side(pa, pb) + side(pb, pa);
}

std::vector<int> downsample_indices(const PointCloud& cloud, int n_total,
                                    int n_surface, std::uint64_t seed) {
  cloud.validate();
  if (n_surface > n_total || n_total > cloud.size() || n_surface < 0) {
    throw std::invalid_argument("geometry: downsample counts out of range");
  }
  std::vector<int> surf = cloud.surface_indices();
  std::vector<int> interior;
  for (int i = 0; i < cloud.size(); ++i) {
    if (!cloud.surface[i]) interior.push_back(i);
  }
  int n_interior = n_total - n_surface;
  if (static_cast<int>(surf.size()) < n_surface ||
      static_cast<int>(interior.size()) < n_interior) {
    throw std::invalid_argument("geometry: insufficient points in a stratum");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(surf.begin(), surf.end(), rng);
  std::shuffle(interior.begin(), interior.end(), rng);

  std::vector<int> chosen(surf.begin(), surf.begin() + n_surface);
  chosen.insert(chosen.end(), interior.begin(), interior.begin() + n_interior);
  return chosen;
}

PointCloud downsample(const PointCloud& cloud, int n_total, int n_surface,
                      std::uint64_t seed) {
  std::vector<int> chosen = downsample_indices(cloud, n_total, n_surface, seed);
  PointCloud out;
  out.positions = select_rows(cloud.positions, chosen);
  out.surface.reserve(chosen.size());
  out.zones.reserve(chosen.size());
  for (int i : chosen) {
    out.surface.push_back(cloud.surface[i]);
    out.zones.push_back(cloud.zones[i]);
  }
  return out;
}

PointCloud apply_displacement(const PointCloud& cloud,
                              const DisplacementField& field) {
  if (field.size() != cloud.size()) {
    throw std::invalid_argument("geometry: displacement length mismatch");
  }
  PointCloud out = cloud;
  out.positions += field.vectors;
  return out;
}

void RegistrationCase::validate() const {
  source.validate();
  target.validate();
  if (gt_displacement && gt_displacement->size() != source.size()) {
    throw std::invalid_argument("geometry: gt displacement length mismatch");
  }
  if (material) {
    if (material->E_TZ_kPa <= 0.0 || material->E_PZ_kPa <= 0.0) {
      throw std::invalid_argument("geometry: moduli must be positive");
    }
  }
}

namespace {

json cloud_to_json(const PointCloud& c) {
  json points = json::array();
  json surface = json::array();
  json zones = json::array();
  for (int i = 0; i < c.size(); ++i) {
    points.push_back({c.positions(i, 0), c.positions(i, 1), c.positions(i, 2)});
    surface.push_back(static_cast<bool>(c.surface[i]));
    zones.push_back(zone_name(c.zones[i]));
  }
  return {{"points", points}, {"surface", surface}, {"zones", zones}};
}

PointCloud cloud_from_json(const json& j) {
  PointCloud c;
  const auto& points = j.at("points");
  c.positions.resize(points.size(), 3);
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (int k = 0; k < 3; ++k) c.positions(i, k) = points[i][k].get<double>();
  }
  for (const auto& s : j.at("surface")) {
    c.surface.push_back(s.get<bool>() ? 1 : 0);
  }
  for (const auto& z : j.at("zones")) {
    c.zones.push_back(zone_from_name(z.get<std::string>()));
  }
  c.validate();
  return c;
}

}  // namespace

RegistrationCase load_case(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("geometry: cannot open " + path.string());
  json j = json::parse(in);
  RegistrationCase c;
  c.source = cloud_from_json(j.at("source"));
  c.target = cloud_from_json(j.at("target"));
  if (j.contains("gt_displacement") && !j["gt_displacement"].is_null()) {
    const auto& gt = j["gt_displacement"];
    DisplacementField f;
    f.vectors.resize(gt.size(), 3);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      for (int k = 0; k < 3; ++k) f.vectors(i, k) = gt[i][k].get<double>();
    }
    c.gt_displacement = std::move(f);
  }
  if (j.contains("material") && !j["material"].is_null()) {
    const auto& m = j["material"];
    c.material = MaterialSpec{m.at("E_TZ_kPa").get<double>(),
                              m.at("E_PZ_kPa").get<double>(),
                              m.at("poisson").get<double>()};
  }
  c.validate();
  return c;
}

void save_case(const RegistrationCase& c, const std::filesystem::path& path) {
  c.validate();
  json j;
  j["source"] = cloud_to_json(c.source);
  j["target"] = cloud_to_json(c.target);
  if (c.gt_displacement) {
    json gt = json::array();
    for (int i = 0; i < c.gt_displacement->size(); ++i) {
      gt.push_back({c.gt_displacement->vectors(i, 0),
                    c.gt_displacement->vectors(i, 1),
                    c.gt_displacement->vectors(i, 2)});
    }
    j["gt_displacement"] = gt;
  } else {
    j["gt_displacement"] = nullptr;
  }
  if (c.material) {
    j["material"] = {{"E_TZ_kPa", c.material->E_TZ_kPa},
                     {"E_PZ_kPa", c.material->E_PZ_kPa},
                     {"poisson", c.material->poisson}};
  } else {
    j["material"] = nullptr;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("geometry: cannot write " + path.string());
  out << j.dump();
}

}  // namespace elastoreg::geometry
