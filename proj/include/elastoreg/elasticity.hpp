// Governing equations for soft-tissue deformation: strain-displacement,
// constitutive, static-equilibrium and energy relations, in both linear
// (small-strain) and compressible Neo-Hookean form.
//
// Everything is templated on the field type so the same formulas run on
// plain doubles and on diffcore::Var columns (one coefficient per
// collocation point). Stress in kPa, strain dimensionless.

#ifndef ELASTOREG_ELASTICITY_HPP
#define ELASTOREG_ELASTICITY_HPP

#include <cmath>
#include <stdexcept>

#include "elastoreg/diffcore.hpp"

namespace elastoreg::elasticity {

inline double ln(double x) {
  if (x <= 0.0) throw std::domain_error("elasticity: ln of non-positive J");
  return std::log(x);
}
// diffcore provides ln/square for Var; argument-dependent lookup selects
// them inside the templates below.

inline double square(double x) { return x * x; }

inline void check_positive_j(double j) {
  if (j <= 0.0) {
    throw std::domain_error("elasticity: non-positive J (inverted state)");
  }
}
inline void check_positive_j(const diffcore::Var& j) {
  if (j.value().minCoeff() <= 0.0) {
    throw std::domain_error("elasticity: non-positive J (inverted state)");
  }
}

// Symmetric 3x3 tensor, six independent components.
template <class T>
struct SymTensor3T {
  T xx, yy, zz, xy, xz, yz;
};

// Displacement gradient G_ij = d(d_i)/d(p_j); F = I + G.
template <class T>
struct DispGradT {
  T xx, xy, xz;
  T yx, yy, yz;
  T zx, zy, zz;
};

using SymTensor3 = SymTensor3T<double>;
using DispGradient = DispGradT<double>;

struct LameParams {
  double lambda;  // kPa
  double mu;      // kPa
};

enum class ModelKind { Linear, NeoHookean };

// lambda = E*nu/((1-2nu)(1+nu)), mu = E/(2(1+nu)).
inline LameParams lame_from_E_nu(double E, double nu) {
  if (E <= 0.0) throw std::invalid_argument("elasticity: E must be positive");
  if (nu <= -1.0 || nu >= 0.5) {
    throw std::invalid_argument("elasticity: nu must lie in (-1, 0.5)");
  }
  return {E * nu / ((1.0 - 2.0 * nu) * (1.0 + nu)), E / (2.0 * (1.0 + nu))};
}

// Green-Lagrange strain eps = 1/2 (G + G^T + G^T G).
template <class T>
SymTensor3T<T> green_lagrange_strain(const DispGradT<T>& g) {
  SymTensor3T<T> e;
  e.xx = 0.5 * (g.xx + g.xx + g.xx * g.xx + g.yx * g.yx + g.zx * g.zx);
  e.yy = 0.5 * (g.yy + g.yy + g.xy * g.xy + g.yy * g.yy + g.zy * g.zy);
  e.zz = 0.5 * (g.zz + g.zz + g.xz * g.xz + g.yz * g.yz + g.zz * g.zz);
  e.xy = 0.5 * (g.xy + g.yx + g.xx * g.xy + g.yx * g.yy + g.zx * g.zy);
  e.xz = 0.5 * (g.xz + g.zx + g.xx * g.xz + g.yx * g.yz + g.zx * g.zz);
  e.yz = 0.5 * (g.yz + g.zy + g.xy * g.xz + g.yy * g.yz + g.zy * g.zz);
  return e;
}

// Small-strain tensor eps = 1/2 (G + G^T).
template <class T>
SymTensor3T<T> linear_strain(const DispGradT<T>& g) {
  SymTensor3T<T> e;
  e.xx = 1.0 * g.xx;
  e.yy = 1.0 * g.yy;
  e.zz = 1.0 * g.zz;
  e.xy = 0.5 * (g.xy + g.yx);
  e.xz = 0.5 * (g.xz + g.zx);
  e.yz = 0.5 * (g.yz + g.zy);
  return e;
}

// det(F) with F = I + G.
template <class T>
T deformation_jacobian(const DispGradT<T>& g) {
  T fxx = g.xx + 1.0, fyy = g.yy + 1.0, fzz = g.zz + 1.0;
  return fxx * (fyy * fzz - g.yz * g.zy) - g.xy * (g.yx * fzz - g.yz * g.zx) +
         g.xz * (g.yx * g.zy - fyy * g.zx);
}

// Left Cauchy-Green tensor B = F F^T (symmetric), F = I + G.
template <class T>
SymTensor3T<T> left_cauchy_green(const DispGradT<T>& g) {
  T fxx = g.xx + 1.0, fyy = g.yy + 1.0, fzz = g.zz + 1.0;
  SymTensor3T<T> b;
  b.xx = fxx * fxx + g.xy * g.xy + g.xz * g.xz;
  b.yy = g.yx * g.yx + fyy * fyy + g.yz * g.yz;
  b.zz = g.zx * g.zx + g.zy * g.zy + fzz * fzz;
  b.xy = fxx * g.yx + g.xy * fyy + g.xz * g.yz;
  b.xz = fxx * g.zx + g.xy * g.zy + g.xz * fzz;
  b.yz = g.yx * g.zx + fyy * g.zy + g.yz * fzz;
  return b;
}

// Neo-Hookean stress sigma = mu J^-1 (F F^T - I) + lambda (J - 1) I, from
// precomputed B = F F^T and J. S is the material-parameter field type
// (double, or a Var when the stiffness ratio is learnable).
template <class T, class S>
SymTensor3T<T> neo_hookean_stress_from(const SymTensor3T<T>& b, const T& j,
                                       const S& lambda, const S& mu) {
  SymTensor3T<T> s;
  s.xx = mu * ((b.xx - 1.0) / j) + lambda * (j - 1.0);
  s.yy = mu * ((b.yy - 1.0) / j) + lambda * (j - 1.0);
  s.zz = mu * ((b.zz - 1.0) / j) + lambda * (j - 1.0);
  s.xy = mu * (b.xy / j);
  s.xz = mu * (b.xz / j);
  s.yz = mu * (b.yz / j);
  return s;
}

template <class T, class S>
SymTensor3T<T> neo_hookean_stress(const DispGradT<T>& g, const S& lambda,
                                  const S& mu) {
  T j = deformation_jacobian(g);
  check_positive_j(j);
  return neo_hookean_stress_from(left_cauchy_green(g), j, lambda, mu);
}

// Hooke's law sigma = lambda tr(eps) I + 2 mu eps.
template <class T, class S>
SymTensor3T<T> linear_stress(const SymTensor3T<T>& e, const S& lambda,
                             const S& mu) {
  T tr = e.xx + e.yy + e.zz;
  SymTensor3T<T> s;
  s.xx = lambda * tr + 2.0 * (mu * e.xx);
  s.yy = lambda * tr + 2.0 * (mu * e.yy);
  s.zz = lambda * tr + 2.0 * (mu * e.zz);
  s.xy = 2.0 * (mu * e.xy);
  s.xz = 2.0 * (mu * e.xz);
  s.yz = 2.0 * (mu * e.yz);
  return s;
}

// Squared deviation of a predicted stress from a model stress: diagonal
// terms plus the <1,2>, <1,3>, <2,3> off-diagonal terms.
template <class T>
T stress_pair_residual(const SymTensor3T<T>& sigma, const SymTensor3T<T>& model) {
  return square(sigma.xx - model.xx) + square(sigma.yy - model.yy) +
         square(sigma.zz - model.zz) + square(sigma.xy - model.xy) +
         square(sigma.xz - model.xz) + square(sigma.yz - model.yz);
}

template <class T, class S>
T neo_hookean_constitutive_residual(const SymTensor3T<T>& sigma,
                                    const DispGradT<T>& g, const S& lambda,
                                    const S& mu) {
  return stress_pair_residual(sigma, neo_hookean_stress(g, lambda, mu));
}

template <class T, class S>
T linear_constitutive_residual(const SymTensor3T<T>& sigma,
                               const DispGradT<T>& g, const S& lambda,
                               const S& mu) {
  return stress_pair_residual(sigma, linear_stress(linear_strain(g), lambda, mu));
}

// f_static: squared divergence of the (symmetric) stress field, assembled
// from the three spatial-derivative tensors d(sigma)/dx, /dy, /dz.
template <class T>
T static_equilibrium_residual(const SymTensor3T<T>& dx, const SymTensor3T<T>& dy,
                              const SymTensor3T<T>& dz) {
  return square(dx.xx + dy.xy + dz.xz) + square(dx.xy + dy.yy + dz.yz) +
         square(dx.xz + dy.yz + dz.zz);
}

// f_energy = mu/2 (tr(F F^T) - 3 - 2 ln J) + lambda/2 (J - 1)^2, from
// precomputed tr(F F^T) and (possibly clamped) J.
template <class T, class S>
T neo_hookean_energy_from(const T& tr_b, const T& j, const S& lambda,
                          const S& mu) {
  return 0.5 * (mu * (tr_b - 3.0 - 2.0 * ln(j))) + 0.5 * (lambda * square(j - 1.0));
}

template <class T, class S>
T neo_hookean_energy(const DispGradT<T>& g, const S& lambda, const S& mu) {
  SymTensor3T<T> b = left_cauchy_green(g);
  T j = deformation_jacobian(g);
  check_positive_j(j);
  return neo_hookean_energy_from<T, S>(b.xx + b.yy + b.zz, j, lambda, mu);
}

// psi = lambda/2 tr(eps)^2 + mu eps:eps with the small-strain tensor.
template <class T, class S>
T linear_energy(const DispGradT<T>& g, const S& lambda, const S& mu) {
  SymTensor3T<T> e = linear_strain(g);
  T tr = e.xx + e.yy + e.zz;
  T contraction = square(e.xx) + square(e.yy) + square(e.zz) +
                  2.0 * square(e.xy) + 2.0 * square(e.xz) + 2.0 * square(e.yz);
  return 0.5 * (lambda * square(tr)) + mu * contraction;
}

}  // namespace elastoreg::elasticity

#endif
