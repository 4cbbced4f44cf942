// Point-cloud containers, nearest-neighbour search, stratified
// downsampling, the Chamfer distance, and the JSON case-file format.

#ifndef ELASTOREG_GEOMETRY_HPP
#define ELASTOREG_GEOMETRY_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace elastoreg::geometry {

enum class Zone : std::uint8_t { PZ, TZ, Outside };

std::string zone_name(Zone z);
Zone zone_from_name(const std::string& s);

struct PointCloud {
  Eigen::MatrixX3d positions;     // mm
  std::vector<std::uint8_t> surface;
  std::vector<Zone> zones;

  int size() const { return static_cast<int>(positions.rows()); }
  std::vector<int> surface_indices() const;
  std::vector<int> zone_indices(Zone z) const;
  // N >= 4, finite coordinates, aligned mask/label lengths.
  void validate() const;
};

struct DisplacementField {
  Eigen::MatrixX3d vectors;  // mm, index-aligned with its cloud

  int size() const { return static_cast<int>(vectors.rows()); }
};

struct NearestResult {
  int index;
  double distance;
};

// Static balanced kd-tree over a fixed point matrix. Queries are
// read-only; ties on distance resolve to the lowest point index.
class KdTree {
 public:
  explicit KdTree(const Eigen::MatrixX3d& points);

  NearestResult nearest(const Eigen::Vector3d& query) const;
  int size() const { return static_cast<int>(points_.rows()); }

 private:
  struct KNode {
    int point = -1;  // index into points_
    int left = -1;
    int right = -1;
    std::uint8_t axis = 0;
  };

  int build(std::vector<int>& idx, int lo, int hi, int depth);
  void search(int node, const Eigen::Vector3d& q, NearestResult& best) const;

  Eigen::MatrixX3d points_;
  std::vector<KNode> nodes_;
  int root_ = -1;
};

NearestResult nearest_neighbor(const Eigen::Vector3d& query,
                               const PointCloud& target);

struct ChamferOptions {
  bool squared = true;       // squared Euclidean per-point distances
  bool surface_only = true;  // restrict both clouds to surface points
};

double chamfer(const PointCloud& a, const PointCloud& b,
               const ChamferOptions& opts = {});

// Exhaustive O(N^2) reference used by tests and available for small clouds.
double chamfer_bruteforce(const PointCloud& a, const PointCloud& b,
                          const ChamferOptions& opts = {});

// Stratified random subset: exactly n_surface surface points and
// n_total - n_surface interior points, deterministic per seed.
PointCloud downsample(const PointCloud& cloud, int n_total, int n_surface,
                      std::uint64_t seed);

// Row indices (into the input cloud) that downsample would keep, in
// output order; lets callers carry aligned per-point data along.
std::vector<int> downsample_indices(const PointCloud& cloud, int n_total,
                                    int n_surface, std::uint64_t seed);

PointCloud apply_displacement(const PointCloud& cloud,
                              const DisplacementField& field);

struct MaterialSpec {
  double E_TZ_kPa;
  double E_PZ_kPa;
  double poisson;

  double ratio() const { return E_PZ_kPa / E_TZ_kPa; }
};

// One patient-equivalent unit of work: paired clouds plus optional
// ground truth and material description.
struct RegistrationCase {
  PointCloud source;
  PointCloud target;
  std::optional<DisplacementField> gt_displacement;  // aligned with source
  std::optional<MaterialSpec> material;

  void validate() const;
};

RegistrationCase load_case(const std::filesystem::path& path);
void save_case(const RegistrationCase& c, const std::filesystem::path& path);

}  // namespace elastoreg::geometry

#endif
