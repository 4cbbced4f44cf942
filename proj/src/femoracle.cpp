#include "elastoreg/femoracle.hpp"

#include <Eigen/SparseCholesky>
#include <array>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

#include "elastoreg/elasticity.hpp"

namespace elastoreg::femoracle {

using geometry::DisplacementField;
using geometry::PointCloud;
using nlohmann::json;

double TetMesh::tet_volume(int t) const {
  Eigen::Vector3d a = nodes.row(tets(t, 1)) - nodes.row(tets(t, 0));
  Eigen::Vector3d b = nodes.row(tets(t, 2)) - nodes.row(tets(t, 0));
  Eigen::Vector3d c = nodes.row(tets(t, 3)) - nodes.row(tets(t, 0));
  return a.cross(b).dot(c) / 6.0;
}

double TetMesh::zone_volume(Zone z) const {
  double acc = 0.0;
  for (int t = 0; t < tet_count(); ++t) {
    if (tet_zone[t] == z) acc += tet_volume(t);
  }
  return acc;
}

double TetMesh::total_volume() const {
  double acc = 0.0;
  for (int t = 0; t < tet_count(); ++t) acc += tet_volume(t);
  return acc;
}

std::vector<int> TetMesh::boundary_nodes() const {
  std::vector<int> out;
  for (int i = 0; i < node_count(); ++i) {
    if (boundary[i]) out.push_back(i);
  }
  return out;
}

void CaseSpec::validate() const {
  if (semi_axes.minCoeff() <= 0.0) {
    throw std::invalid_argument("femoracle: semi-axes must be positive");
  }
  if (core_scale <= 0.0 || core_scale >= 1.0) {
    throw std::invalid_argument("femoracle: core scale must lie in (0, 1)");
  }
  if (E_TZ_kPa <= 0.0 || ratio_gt <= 0.0) {
    throw std::invalid_argument("femoracle: moduli must be positive");
  }
  if (poisson <= -1.0 || poisson >= 0.5) {
    throw std::invalid_argument("femoracle: Poisson ratio out of range");
  }
  if (indent_mm <= 0.0 || indent_sigma_mm <= 0.0 || lattice_step_mm <= 0.0) {
    throw std::invalid_argument("femoracle: lengths must be positive");
  }
  if (n_surface > n_total || n_surface < 0) {
    throw std::invalid_argument("femoracle: bad downsample counts");
  }
}

namespace {

bool inside_ellipsoid(const Eigen::Vector3d& p, const Eigen::Vector3d& axes) {
  Eigen::Vector3d q = p.array() / axes.array();
  return q.squaredNorm() <= 1.0;
}

// Kuhn subdivision: six tets per lattice cube sharing the main diagonal,
// conforming across neighbouring cubes.
constexpr int kKuhnTets[6][4] = {
    {0, 1, 3, 7}, {0, 1, 5, 7}, {0, 2, 3, 7},
    {0, 2, 6, 7}, {0, 4, 5, 7}, {0, 4, 6, 7},
};

}  // namespace

TetMesh build_mesh(const CaseSpec& spec) {
  spec.validate();
  const double h = spec.lattice_step_mm;
  const Eigen::Vector3d& ax = spec.semi_axes;
  int nx = static_cast<int>(std::ceil(ax[0] / h)) + 1;
  int ny = static_cast<int>(std::ceil(ax[1] / h)) + 1;
  int nz = static_cast<int>(std::ceil(ax[2] / h)) + 1;

  auto grid_pos = [&](int i, int j, int k) {
    return Eigen::Vector3d(i * h, j * h, k * h);
  };
  auto grid_key = [&](int i, int j, int k) {
    return (static_cast<std::int64_t>(i + nx) * (2 * ny + 1) + (j + ny)) *
               (2 * nz + 1) +
           (k + nz);
  };

  std::unordered_map<std::int64_t, int> node_of;
  std::vector<Eigen::Vector3d> nodes;
  std::vector<std::array<int, 4>> tets;
  std::vector<Zone> zones;

  auto node_index = [&](int i, int j, int k) {
    std::int64_t key = grid_key(i, j, k);
    auto it = node_of.find(key);
    if (it != node_of.end()) return it->second;
    int idx = static_cast<int>(nodes.size());
    node_of.emplace(key, idx);
    nodes.push_back(grid_pos(i, j, k));
    return idx;
  };

  Eigen::Vector3d core_axes = spec.core_scale * ax;
  for (int i = -nx; i < nx; ++i) {
    for (int j = -ny; j < ny; ++j) {
      for (int k = -nz; k < nz; ++k) {
        // Cube corners, bit c = (dx | dy<<1 | dz<<2).
        Eigen::Vector3d corner[8];
        for (int c = 0; c < 8; ++c) {
          corner[c] = grid_pos(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
        }
        for (const auto& tet : kKuhnTets) {
          Eigen::Vector3d centroid = 0.25 * (corner[tet[0]] + corner[tet[1]] +
                                             corner[tet[2]] + corner[tet[3]]);
          if (!inside_ellipsoid(centroid, ax)) continue;
          std::array<int, 4> ids;
          for (int v = 0; v < 4; ++v) {
            int c = tet[v];
            ids[v] = node_index(i + (c & 1), j + ((c >> 1) & 1),
                                k + ((c >> 2) & 1));
          }
          Eigen::Vector3d a = nodes[ids[1]] - nodes[ids[0]];
          Eigen::Vector3d b = nodes[ids[2]] - nodes[ids[0]];
          Eigen::Vector3d d = nodes[ids[3]] - nodes[ids[0]];
          if (a.cross(b).dot(d) < 0.0) std::swap(ids[2], ids[3]);
          tets.push_back(ids);
          zones.push_back(inside_ellipsoid(centroid, core_axes) ? Zone::TZ
                                                                : Zone::PZ);
        }
      }
    }
  }
  if (tets.empty()) throw std::invalid_argument("femoracle: empty mesh");

  TetMesh mesh;
  mesh.nodes.resize(nodes.size(), 3);
  for (std::size_t i = 0; i < nodes.size(); ++i) mesh.nodes.row(i) = nodes[i];
  mesh.tets.resize(tets.size(), 4);
  for (std::size_t t = 0; t < tets.size(); ++t) {
    for (int v = 0; v < 4; ++v) mesh.tets(t, v) = tets[t][v];
  }
  mesh.tet_zone = std::move(zones);

  // Boundary: faces that belong to exactly one tet.
  std::map<std::array<int, 3>, int> face_count;
  constexpr int kFaces[4][3] = {{0, 1, 2}, {0, 1, 3}, {0, 2, 3}, {1, 2, 3}};
  for (int t = 0; t < mesh.tet_count(); ++t) {
    for (const auto& f : kFaces) {
      std::array<int, 3> face{mesh.tets(t, f[0]), mesh.tets(t, f[1]),
                              mesh.tets(t, f[2])};
      std::sort(face.begin(), face.end());
      ++face_count[face];
    }
  }
  mesh.boundary.assign(mesh.node_count(), 0);
  for (const auto& [face, count] : face_count) {
    if (count == 1) {
      for (int v : face) mesh.boundary[v] = 1;
    }
  }
  return mesh;
}

DirichletMap indentation_boundary(const TetMesh& mesh, const CaseSpec& spec) {
  std::vector<int> bnodes = mesh.boundary_nodes();
  if (bnodes.empty()) throw std::invalid_argument("femoracle: no boundary");
  std::mt19937_64 rng(spec.seed);
  int contact = bnodes[std::uniform_int_distribution<std::size_t>(
      0, bnodes.size() - 1)(rng)];
  Eigen::Vector3d contact_pos = mesh.nodes.row(contact);
  Eigen::Vector3d centroid = mesh.nodes.colwise().mean();
  Eigen::Vector3d inward = (centroid - contact_pos).normalized();
  Eigen::Vector3d antipode = 2.0 * centroid - contact_pos;

  // Fix the third of the surface nearest the antipodal point.
  std::vector<std::pair<double, int>> by_dist;
  by_dist.reserve(bnodes.size());
  for (int n : bnodes) {
    by_dist.emplace_back((mesh.nodes.row(n).transpose() - antipode).norm(), n);
  }
  std::sort(by_dist.begin(), by_dist.end());
  std::size_t n_fixed = bnodes.size() / 3;

  DirichletMap bc;
  for (std::size_t i = 0; i < n_fixed; ++i) {
    bc[by_dist[i].second] = Eigen::Vector3d::Zero();
  }
  const double two_sigma_sq = 2.0 * spec.indent_sigma_mm * spec.indent_sigma_mm;
  for (int n : bnodes) {
    double d2 = (mesh.nodes.row(n).transpose() - contact_pos).squaredNorm();
    double weight = std::exp(-d2 / two_sigma_sq);
    if (weight < 0.01) continue;
    // Indentation overrides a fixed assignment only at zero weight overlap;
    // keep fixed nodes fixed to preserve the constrained rigid modes.
    if (bc.find(n) != bc.end()) continue;
    bc[n] = spec.indent_mm * weight * inward;
  }
  if (bc.empty()) throw std::invalid_argument("femoracle: empty Dirichlet set");
  return bc;
}

namespace {

elasticity::LameParams zone_lame(const ZoneMaterial& mat, Zone z) {
  double e = (z == Zone::TZ) ? mat.E_TZ_kPa : mat.E_PZ_kPa;
  return elasticity::lame_from_E_nu(e, mat.poisson);
}

// Constant-strain tet: shape-function gradients and element volume.
void tet_geometry(const TetMesh& mesh, int t, Eigen::Matrix<double, 4, 3>& grads,
                  double& volume) {
  Eigen::Matrix3d edges;
  for (int v = 0; v < 3; ++v) {
    edges.col(v) =
        (mesh.nodes.row(mesh.tets(t, v + 1)) - mesh.nodes.row(mesh.tets(t, 0)))
            .transpose();
  }
  double det = edges.determinant();
  volume = det / 6.0;
  if (volume <= 0.0) throw std::logic_error("femoracle: non-positive tet volume");
  Eigen::Matrix3d inv = edges.inverse();
  grads.block<3, 3>(1, 0) = inv;  // rows 1..3: grad N_1..N_3
  grads.row(0) = -(inv.row(0) + inv.row(1) + inv.row(2));
}

Eigen::Matrix<double, 6, 12> strain_matrix(const Eigen::Matrix<double, 4, 3>& g) {
  Eigen::Matrix<double, 6, 12> b = Eigen::Matrix<double, 6, 12>::Zero();
  for (int v = 0; v < 4; ++v) {
    double gx = g(v, 0), gy = g(v, 1), gz = g(v, 2);
    int c = 3 * v;
    b(0, c) = gx;
    b(1, c + 1) = gy;
    b(2, c + 2) = gz;
    b(3, c) = gy;  // gamma_xy
    b(3, c + 1) = gx;
    b(4, c + 1) = gz;  // gamma_yz
    b(4, c + 2) = gy;
    b(5, c) = gz;  // gamma_zx
    b(5, c + 2) = gx;
  }
  return b;
}

Eigen::Matrix<double, 6, 6> material_matrix(const elasticity::LameParams& lame) {
  Eigen::Matrix<double, 6, 6> d = Eigen::Matrix<double, 6, 6>::Zero();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) d(i, j) = lame.lambda;
    d(i, i) += 2.0 * lame.mu;
    d(i + 3, i + 3) = lame.mu;
  }
  return d;
}

}  // namespace

Eigen::SparseMatrix<double> assemble_stiffness(const TetMesh& mesh,
                                               const ZoneMaterial& mat) {
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(static_cast<std::size_t>(mesh.tet_count()) * 144);
  for (int t = 0; t < mesh.tet_count(); ++t) {
    Eigen::Matrix<double, 4, 3> grads;
    double volume;
    tet_geometry(mesh, t, grads, volume);
    Eigen::Matrix<double, 6, 12> b = strain_matrix(grads);
    Eigen::Matrix<double, 12, 12> ke =
        volume * b.transpose() * material_matrix(zone_lame(mat, mesh.tet_zone[t])) * b;
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) {
        for (int a = 0; a < 3; ++a) {
          for (int c = 0; c < 3; ++c) {
            triplets.emplace_back(3 * mesh.tets(t, i) + a,
                                  3 * mesh.tets(t, j) + c,
                                  ke(3 * i + a, 3 * j + c));
          }
        }
      }
    }
  }
  Eigen::SparseMatrix<double> k(3 * mesh.node_count(), 3 * mesh.node_count());
  k.setFromTriplets(triplets.begin(), triplets.end());
  return k;
}

DisplacementField solve_elastostatics(const TetMesh& mesh,
                                      const ZoneMaterial& mat,
                                      const DirichletMap& dirichlet,
                                      double* residual) {
  if (dirichlet.empty()) {
    throw std::invalid_argument("femoracle: empty Dirichlet set");
  }
  const int n = mesh.node_count();
  Eigen::SparseMatrix<double> k = assemble_stiffness(mesh, mat);

  std::vector<int> dof_map(3 * n, -1);  // full dof -> reduced dof
  Eigen::VectorXd u = Eigen::VectorXd::Zero(3 * n);
  std::vector<std::uint8_t> fixed(3 * n, 0);
  for (const auto& [node, disp] : dirichlet) {
    for (int a = 0; a < 3; ++a) {
      fixed[3 * node + a] = 1;
      u[3 * node + a] = disp[a];
    }
  }
  int free_count = 0;
  for (int d = 0; d < 3 * n; ++d) {
    if (!fixed[d]) dof_map[d] = free_count++;
  }
  if (free_count == 0) {
    DisplacementField out;
    out.vectors = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3,
                                                 Eigen::RowMajor>>(u.data(), n, 3);
    if (residual) *residual = 0.0;
    return out;
  }

  std::vector<Eigen::Triplet<double>> kff;
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(free_count);
  for (int col = 0; col < k.outerSize(); ++col) {
    for (Eigen::SparseMatrix<double>::InnerIterator it(k, col); it; ++it) {
      int r = static_cast<int>(it.row()), c = static_cast<int>(it.col());
      if (!fixed[r] && !fixed[c]) {
        kff.emplace_back(dof_map[r], dof_map[c], it.value());
      } else if (!fixed[r] && fixed[c]) {
        rhs[dof_map[r]] -= it.value() * u[c];
      }
    }
  }
  Eigen::SparseMatrix<double> a(free_count, free_count);
  a.setFromTriplets(kff.begin(), kff.end());

  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(a);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("femoracle: singular system (insufficient constraints)");
  }
  Eigen::VectorXd uf = solver.solve(rhs);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("femoracle: solve failed");
  }
  double rel = (a * uf - rhs).norm() / std::max(rhs.norm(), 1e-30);
  if (residual) *residual = rel;

  for (int d = 0; d < 3 * n; ++d) {
    if (!fixed[d]) u[d] = uf[dof_map[d]];
  }
  DisplacementField out;
  out.vectors.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    out.vectors.row(i) = u.segment<3>(3 * i).transpose();
  }
  return out;
}

double strain_energy(const TetMesh& mesh, const ZoneMaterial& mat,
                     const DisplacementField& u) {
  Eigen::SparseMatrix<double> k = assemble_stiffness(mesh, mat);
  Eigen::VectorXd flat(3 * mesh.node_count());
  for (int i = 0; i < mesh.node_count(); ++i) {
    flat.segment<3>(3 * i) = u.vectors.row(i).transpose();
  }
  return 0.5 * flat.dot(k * flat);
}

Eigen::Matrix3d tet_disp_gradient(const TetMesh& mesh,
                                  const DisplacementField& u, int t) {
  Eigen::Matrix<double, 4, 3> grads;
  double volume;
  tet_geometry(mesh, t, grads, volume);
  Eigen::Matrix3d g = Eigen::Matrix3d::Zero();
  for (int v = 0; v < 4; ++v) {
    g += u.vectors.row(mesh.tets(t, v)).transpose() * grads.row(v);
  }
  return g;
}

double strain_energy_by_density(const TetMesh& mesh, const ZoneMaterial& mat,
                                const DisplacementField& u) {
  double acc = 0.0;
  for (int t = 0; t < mesh.tet_count(); ++t) {
    Eigen::Matrix3d g = tet_disp_gradient(mesh, u, t);
    elasticity::DispGradient dg{g(0, 0), g(0, 1), g(0, 2), g(1, 0), g(1, 1),
                                g(1, 2), g(2, 0), g(2, 1), g(2, 2)};
    elasticity::LameParams lame = zone_lame(mat, mesh.tet_zone[t]);
    acc += elasticity::linear_energy(dg, lame.lambda, lame.mu) *
           mesh.tet_volume(t);
  }
  return acc;
}

GeneratedCase generate_case(const CaseSpec& spec) {
  spec.validate();
  TetMesh mesh = build_mesh(spec);
  ZoneMaterial mat{spec.ratio_gt * spec.E_TZ_kPa, spec.E_TZ_kPa, spec.poisson};
  DirichletMap bc = indentation_boundary(mesh, spec);
  double residual = 0.0;
  DisplacementField u = solve_elastostatics(mesh, mat, bc, &residual);

  // Node cloud with zone labels from the core-ellipsoid membership test.
  PointCloud all;
  all.positions = mesh.nodes;
  all.surface = mesh.boundary;
  all.zones.reserve(mesh.node_count());
  Eigen::Vector3d core_axes = spec.core_scale * spec.semi_axes;
  for (int i = 0; i < mesh.node_count(); ++i) {
    all.zones.push_back(
        inside_ellipsoid(mesh.nodes.row(i).transpose(), core_axes) ? Zone::TZ
                                                                   : Zone::PZ);
  }

  std::vector<int> src_rows = geometry::downsample_indices(
      all, spec.n_total, spec.n_surface, spec.seed * 2 + 1);
  GeneratedCase g;
  g.spec = spec;
  g.mesh_nodes = mesh.node_count();
  g.mesh_tets = mesh.tet_count();
  g.solver_residual = residual;

  PointCloud& source = g.reg_case.source;
  source.positions.resize(src_rows.size(), 3);
  DisplacementField gt;
  gt.vectors.resize(src_rows.size(), 3);
  for (std::size_t i = 0; i < src_rows.size(); ++i) {
    source.positions.row(i) = all.positions.row(src_rows[i]);
    gt.vectors.row(i) = u.vectors.row(src_rows[i]);
    source.surface.push_back(all.surface[src_rows[i]]);
    source.zones.push_back(all.zones[src_rows[i]]);
  }
  g.max_gt_displacement_mm = gt.vectors.rowwise().norm().maxCoeff();
  g.reg_case.gt_displacement = std::move(gt);

  // Target: deformed nodes, downsampled independently of the source so no
  // index correspondence survives.
  PointCloud deformed = all;
  deformed.positions += u.vectors;
  g.reg_case.target = geometry::downsample(deformed, spec.n_total,
                                           spec.n_surface, spec.seed * 2 + 2);
  g.reg_case.material = geometry::MaterialSpec{
      spec.E_TZ_kPa, spec.ratio_gt * spec.E_TZ_kPa, spec.poisson};
  g.reg_case.validate();
  return g;
}

void write_generated_case(const GeneratedCase& g,
                          const std::filesystem::path& stem) {
  geometry::save_case(g.reg_case, stem.string() + ".json");
  json meta;
  meta["spec"] = {
      {"semi_axes_mm", {g.spec.semi_axes[0], g.spec.semi_axes[1], g.spec.semi_axes[2]}},
      {"core_scale", g.spec.core_scale},
      {"E_TZ_kPa", g.spec.E_TZ_kPa},
      {"ratio_gt", g.spec.ratio_gt},
      {"poisson", g.spec.poisson},
      {"indent_mm", g.spec.indent_mm},
      {"indent_sigma_mm", g.spec.indent_sigma_mm},
      {"lattice_step_mm", g.spec.lattice_step_mm},
      {"n_total", g.spec.n_total},
      {"n_surface", g.spec.n_surface},
      {"seed", g.spec.seed},
  };
  meta["mesh"] = {{"nodes", g.mesh_nodes}, {"tets", g.mesh_tets}};
  meta["solver_residual"] = g.solver_residual;
  meta["max_gt_displacement_mm"] = g.max_gt_displacement_mm;
  // The ground truth comes from a geometrically linear solve; at these
  // deformation magnitudes a second-order error in the field is expected.
  meta["oracle_model"] = "linear_elastostatics";
  std::ofstream os(stem.string() + ".meta.json");
  if (!os) {
    throw std::runtime_error("femoracle: cannot write metadata for " +
                             stem.string());
  }
  os << meta.dump(2);
}

}  // namespace elastoreg::femoracle
