// Synthetic ground-truth generator: two-zone ellipsoidal tetrahedral
// meshes, a linear elastostatic solve under prescribed boundary
// displacements, and emission of registration cases with known
// displacement fields and stiffness ratios.

#ifndef ELASTOREG_FEMORACLE_HPP
#define ELASTOREG_FEMORACLE_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cstdint>
#include <filesystem>
#include <map>

#include "elastoreg/geometry.hpp"

namespace elastoreg::femoracle {

using geometry::Zone;

struct TetMesh {
  Eigen::MatrixX3d nodes;  // mm
  Eigen::MatrixX4i tets;   // positive signed volume
  std::vector<Zone> tet_zone;
  std::vector<std::uint8_t> boundary;  // per node: on the mesh surface

  int node_count() const { return static_cast<int>(nodes.rows()); }
  int tet_count() const { return static_cast<int>(tets.rows()); }
  double tet_volume(int t) const;
  double zone_volume(Zone z) const;
  double total_volume() const;
  std::vector<int> boundary_nodes() const;
};

struct CaseSpec {
  Eigen::Vector3d semi_axes{20.0, 18.0, 16.0};  // mm
  double core_scale = 0.55;      // TZ core as a fraction of the outer axes
  double E_TZ_kPa = 25.0;
  double ratio_gt = 0.15;        // E_PZ / E_TZ
  double poisson = 0.3;
  double indent_mm = 7.0;        // peak prescribed displacement
  double indent_sigma_mm = 8.0;  // Gaussian footprint of the probe
  double lattice_step_mm = 2.0;
  int n_total = 1024;
  int n_surface = 512;
  std::uint64_t seed = 0;

  void validate() const;
};

TetMesh build_mesh(const CaseSpec& spec);

struct ZoneMaterial {
  double E_PZ_kPa;
  double E_TZ_kPa;
  double poisson;
};

// Node index -> prescribed displacement; ordered for determinism.
using DirichletMap = std::map<int, Eigen::Vector3d>;

// Gaussian-profile inward indentation at a seeded surface point, with the
// surface third nearest the antipode held fixed.
DirichletMap indentation_boundary(const TetMesh& mesh, const CaseSpec& spec);

Eigen::SparseMatrix<double> assemble_stiffness(const TetMesh& mesh,
                                               const ZoneMaterial& mat);

// Solves K u = f with the Dirichlet rows eliminated; relative residual of
// the constrained system is written to *residual when given.
geometry::DisplacementField solve_elastostatics(const TetMesh& mesh,
                                                const ZoneMaterial& mat,
                                                const DirichletMap& dirichlet,
                                                double* residual = nullptr);

// 1/2 u^T K u.
double strain_energy(const TetMesh& mesh, const ZoneMaterial& mat,
                     const geometry::DisplacementField& u);

// Sum over tets of the small-strain energy density times volume; agrees
// with strain_energy to roundoff (cross-check against `elasticity`).
double strain_energy_by_density(const TetMesh& mesh, const ZoneMaterial& mat,
                                const geometry::DisplacementField& u);

// Per-tet displacement gradient of a nodal field (row-major 3x3).
Eigen::Matrix3d tet_disp_gradient(const TetMesh& mesh,
                                  const geometry::DisplacementField& u, int t);

struct GeneratedCase {
  geometry::RegistrationCase reg_case;
  CaseSpec spec;
  int mesh_nodes = 0;
  int mesh_tets = 0;
  double solver_residual = 0.0;
  double max_gt_displacement_mm = 0.0;
};

GeneratedCase generate_case(const CaseSpec& spec);

// Writes <stem>.json (case) and <stem>.meta.json (sidecar metadata).
void write_generated_case(const GeneratedCase& g,
                          const std::filesystem::path& stem);

}  // namespace elastoreg::femoracle

#endif
