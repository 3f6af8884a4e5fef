#pragma once

#include <cmath>

#include "mpm/types.hpp"

namespace mpm {

struct ElasticParams {
  double E = 0.0;   // Young's modulus (Pa)
  double nu = 0.0;  // Poisson's ratio
  double rho = 0.0; // mass density (kg/m^3)

  void validate() const {
    if (!(E > 0.0)) throw ConfigError("material: E must be positive");
    if (!(nu > -1.0 && nu < 0.5)) throw ConfigError("material: nu must lie in (-1, 0.5)");
    if (rho < 0.0) throw ConfigError("material: density must be non-negative");
  }
  double shear() const { return E / (2.0 * (1.0 + nu)); }
  double lame() const { return E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)); }
  double bulk() const { return E / (3.0 * (1.0 - 2.0 * nu)); }
};

/// Drucker-Prager cone matched to Mohr-Coulomb along the triaxial-compression
/// meridian, with depth-dependent stiffness for sands.
struct DruckerPragerParams {
  double phi_deg = 0.0;       // friction angle
  double psi_deg = 0.0;       // dilation angle
  double cohesion = 0.0;      // Pa
  double E_ref_50 = 0.0;      // reference stiffness (Pa)
  double m_E = 0.5;           // stiffness exponent
  double K_0 = 0.5;           // earth pressure coefficient at rest
  double p_ref = 100.0e3;     // reference pressure (Pa)
  double unit_weight = 0.0;   // N/m^3, drives the overburden stress

  void validate() const {
    if (!(phi_deg >= 0.0 && phi_deg < 90.0)) throw ConfigError("drucker-prager: need 0 <= phi < 90");
    if (!(psi_deg >= 0.0 && psi_deg <= phi_deg)) throw ConfigError("drucker-prager: need 0 <= psi <= phi");
    if (cohesion < 0.0) throw ConfigError("drucker-prager: cohesion must be non-negative");
    if (!(m_E > 0.0 && m_E < 1.0)) throw ConfigError("drucker-prager: need 0 < m_E < 1");
    if (!(K_0 > 0.0 && K_0 < 1.0)) throw ConfigError("drucker-prager: need 0 < K_0 < 1");
    if (!(p_ref > 0.0)) throw ConfigError("drucker-prager: p_ref must be positive");
  }
};

inline double k0_jaky(double phi_deg) { return 1.0 - std::sin(phi_deg * M_PI / 180.0); }

/// E_50 from the overburden at depth d_p, clamped near the free surface by the
/// cohesion-based floor.
inline double depth_stiffness(double d_p, const DruckerPragerParams& dp) {
  if (d_p < 0.0) throw ConfigError("depth_stiffness: depth must be non-negative");
  const double sigma_v = d_p * dp.unit_weight;
  const double floor_E = dp.E_ref_50 * std::pow(dp.cohesion * dp.K_0 / dp.p_ref, dp.m_E);
  const double E = dp.E_ref_50 * std::pow(std::max(sigma_v * dp.K_0, 0.0) / dp.p_ref, dp.m_E);
  return std::max(E, floor_E);
}

/// Per-point constitutive data. `E` may differ between points of the same
/// material when the depth-dependent stiffness law is active.
struct ConstitutiveParams {
  double E = 0.0;
  double nu = 0.0;
  bool plastic = false;
  double eta = 0.0;      // frictional slope of the yield cone
  double eta_bar = 0.0;  // flow (dilation) slope
  double xi = 0.0;       // cohesion multiplier
  double cohesion = 0.0;

  static ConstitutiveParams elastic(double E, double nu) { return {E, nu, false, 0, 0, 0, 0}; }

  static ConstitutiveParams drucker_prager(double E, double nu, const DruckerPragerParams& dp) {
    const double sphi = std::sin(dp.phi_deg * M_PI / 180.0);
    const double cphi = std::cos(dp.phi_deg * M_PI / 180.0);
    const double spsi = std::sin(dp.psi_deg * M_PI / 180.0);
    ConstitutiveParams p;
    p.E = E;
    p.nu = nu;
    p.plastic = true;
    p.eta = 6.0 * sphi / (std::sqrt(3.0) * (3.0 - sphi));
    p.xi = 6.0 * cphi / (std::sqrt(3.0) * (3.0 - sphi));
    p.eta_bar = 6.0 * spsi / (std::sqrt(3.0) * (3.0 - spsi));
    p.cohesion = dp.cohesion;
    return p;
  }

  double shear() const { return E / (2.0 * (1.0 + nu)); }
  double lame() const { return E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)); }
  double bulk() const { return E / (3.0 * (1.0 - 2.0 * nu)); }
};

struct StressUpdate {
  Mat3 tau = Mat3::Zero();    // Kirchhoff stress
  Mat3 sigma = Mat3::Zero();  // Cauchy stress
  Mat3 Fe = Mat3::Identity(); // updated elastic deformation gradient
  Mat9 dtau_dgradu = Mat9::Zero();  // d(tau)/d(grad du), algorithmic
  Mat9 a = Mat9::Zero();      // spatial consistent tangent
  bool plastic = false;
  int branch = 0;  // 0 elastic, 1 cone, 2 apex
};

namespace detail {

struct SpectralB {
  Vec3 lambda;                 // eigenvalues of B = Fe Fe^T
  Eigen::Matrix3d vectors;     // columns are unit eigenvectors
};

inline SpectralB eigen_b(const Mat3& Fe) {
  const Mat3 B = Fe * Fe.transpose();
  Eigen::SelfAdjointEigenSolver<Mat3> es(B);
  if (es.info() != Eigen::Success) throw NumericalError("eigen decomposition failed");
  SpectralB s;
  s.lambda = es.eigenvalues();
  s.vectors = es.eigenvectors();
  if (!(s.lambda.minCoeff() > 0.0))
    throw NumericalError("left Cauchy-Green tensor is not positive definite");
  return s;
}

/// Assemble an isotropic symmetric tensor function Y(B) from principal values
/// y and the 4th-order derivative dY/dB from the principal derivative matrix
/// dy_a/dlambda_b. Returned as a Mat9 acting on symmetric perturbations.
inline void spectral_assemble(const SpectralB& s, const Vec3& y, const Mat3& dy_dlam,
                              Mat3* Y, Mat9* dY_dB) {
  const auto& n = s.vectors;
  if (Y) {
    Y->setZero();
    for (int a = 0; a < 3; ++a) *Y += y[a] * (n.col(a) * n.col(a).transpose());
  }
  if (!dY_dB) return;
  dY_dB->setZero();
  Mat3 M[3];
  for (int a = 0; a < 3; ++a) M[a] = n.col(a) * n.col(a).transpose();
  // Diagonal part: sum_ab dy_ab M_a (x) M_b.
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          for (int k = 0; k < 3; ++k)
            for (int l = 0; l < 3; ++l)
              (*dY_dB)(flat3(i, j), flat3(k, l)) += dy_dlam(a, b) * M[a](i, j) * M[b](k, l);
  // Off-diagonal (eigenvector rotation) part.
  const double scale = s.lambda.cwiseAbs().maxCoeff();
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b) {
      double g;
      if (std::abs(s.lambda[a] - s.lambda[b]) > 1e-9 * scale) {
        g = (y[a] - y[b]) / (s.lambda[a] - s.lambda[b]);
      } else {
        g = 0.5 * ((dy_dlam(a, a) - dy_dlam(a, b)) + (dy_dlam(b, b) - dy_dlam(b, a)));
      }
      const Mat3 Nab = n.col(a) * n.col(b).transpose();
      const Mat3 Nba = n.col(b) * n.col(a).transpose();
      const Mat3 S = Nab + Nba;
      // Contribution g * (S (x) (Nab + Nba)/2), symmetric in the argument.
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          for (int k = 0; k < 3; ++k)
            for (int l = 0; l < 3; ++l)
              (*dY_dB)(flat3(i, j), flat3(k, l)) += g * S(i, j) * 0.5 * S(k, l);
    }
}

inline Mat3 sym_exp(const Mat3& A) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(A);
  Mat3 out = Mat3::Zero();
  for (int a = 0; a < 3; ++a)
    out += std::exp(es.eigenvalues()[a]) * (es.eigenvectors().col(a) * es.eigenvectors().col(a).transpose());
  return out;
}

inline Mat3 sym_log(const Mat3& A) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(A);
  if (!(es.eigenvalues().minCoeff() > 0.0))
    throw NumericalError("matrix logarithm of a non-SPD matrix");
  Mat3 out = Mat3::Zero();
  for (int a = 0; a < 3; ++a)
    out += std::log(es.eigenvalues()[a]) * (es.eigenvectors().col(a) * es.eigenvectors().col(a).transpose());
  return out;
}

}  // namespace detail

/// Stress update with logarithmic-strain elasticity and, when enabled, a
/// Drucker-Prager perfectly plastic return in principal Kirchhoff space.
/// `J` is det(F) of the total deformation used to form the Cauchy stress and
/// the spatial tangent.
inline StressUpdate update_stress(const Mat3& Fe_trial, double J, const ConstitutiveParams& mat) {
  if (!(Fe_trial.determinant() > 0.0))
    throw NumericalError("elastic deformation gradient has non-positive determinant");

  const detail::SpectralB sp = detail::eigen_b(Fe_trial);
  const double G = mat.shear(), lam = mat.lame(), K = mat.bulk();

  // Trial principal log strain and Kirchhoff stress.
  Vec3 eps;
  for (int a = 0; a < 3; ++a) eps[a] = 0.5 * std::log(sp.lambda[a]);
  const double vol = eps.sum();
  Vec3 tau_p;
  for (int a = 0; a < 3; ++a) tau_p[a] = lam * vol + 2.0 * G * eps[a];

  // Principal algorithmic tangent d(tau_a)/d(eps_b^trial).
  Mat3 Dp;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) Dp(a, b) = lam + (a == b ? 2.0 * G : 0.0);

  StressUpdate out;
  if (mat.plastic) {
    const Vec3 s_tr = tau_p - Vec3::Constant(tau_p.sum() / 3.0);
    const double p_tr = tau_p.sum() / 3.0;
    const double norm_s = s_tr.norm();
    const double sqrtJ2 = norm_s / std::sqrt(2.0);
    const double f_tr = sqrtJ2 + mat.eta * p_tr - mat.xi * mat.cohesion;
    if (f_tr > 0.0) {
      const double denom = G + K * mat.eta * mat.eta_bar;
      const double dgamma = f_tr / denom;
      if (sqrtJ2 - G * dgamma >= 0.0) {
        // Return onto the smooth cone.
        out.branch = 1;
        const Vec3 nhat = s_tr / norm_s;
        const double factor = 1.0 - G * dgamma / sqrtJ2;
        const double p_new = p_tr - K * mat.eta_bar * dgamma;
        const Vec3 s_new = factor * s_tr;
        tau_p = s_new + Vec3::Constant(p_new);

        const Mat3 Idev = Mat3::Identity() - Mat3::Constant(1.0 / 3.0);
        const Vec3 one = Vec3::Ones();
        const double sq2 = std::sqrt(2.0);
        Dp = 2.0 * G * factor * Idev;
        Dp += (2.0 * G * G * dgamma / sqrtJ2 - 2.0 * G * G / denom) * (nhat * nhat.transpose());
        Dp -= (sq2 * G * K * mat.eta / denom) * (nhat * one.transpose());
        Dp -= (sq2 * G * K * mat.eta_bar / denom) * (one * nhat.transpose());
        Dp += K * (1.0 - K * mat.eta * mat.eta_bar / denom) * (one * one.transpose());
      } else {
        // Trial state beyond the cone apex: project onto the apex. The
        // consistent tangent vanishes there, which leaves grid nodes carried
        // solely by apex points without stiffness; a small elastic fraction
        // keeps the assembled system invertible without changing the
        // converged stress.
        out.branch = 2;
        const double p_apex = mat.eta > 0.0 ? mat.xi * mat.cohesion / mat.eta : 0.0;
        tau_p = Vec3::Constant(p_apex);
        Dp *= 1e-3;
      }
      out.plastic = true;
    }
  }

  // Principal derivative with respect to the trial B eigenvalues.
  Mat3 dy_dlam;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) dy_dlam(a, b) = Dp(a, b) * 0.5 / sp.lambda[b];

  Mat9 dtau_dB;
  detail::spectral_assemble(sp, tau_p, dy_dlam, &out.tau, &dtau_dB);

  // Chain rule through dB = grad(du) B + B grad(du)^T.
  const Mat3 B = Fe_trial * Fe_trial.transpose();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l) {
          double v = 0.0;
          for (int q = 0; q < 3; ++q) v += dtau_dB(flat3(i, j), flat3(k, q)) * B(q, l);
          out.dtau_dgradu(flat3(i, j), flat3(k, l)) = 2.0 * v;
        }

  out.sigma = out.tau / J;
  out.a = out.dtau_dgradu / J;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int l = 0; l < 3; ++l) out.a(flat3(i, j), flat3(j, l)) -= out.sigma(i, l);

  if (out.plastic && out.branch == 1) {
    // Plastic correction changed the elastic stretch; rebuild Fe from the
    // returned stress (rotation part is immaterial for isotropic response).
    Vec3 eps_new;
    const double p_new = out.tau.trace() / 3.0;
    for (int a = 0; a < 3; ++a) {
      const double tau_a = tau_p[a];
      eps_new[a] = (tau_a - p_new) / (2.0 * G) + p_new / (3.0 * K);
    }
    Mat3 Fe_new = Mat3::Zero();
    for (int a = 0; a < 3; ++a)
      Fe_new += std::exp(eps_new[a]) * (sp.vectors.col(a) * sp.vectors.col(a).transpose());
    out.Fe = Fe_new;
  } else if (out.plastic && out.branch == 2) {
    const double p_new = out.tau.trace() / 3.0;
    out.Fe = std::exp(p_new / (3.0 * K)) * Mat3::Identity();
  } else {
    out.Fe = Fe_trial;
  }
  return out;
}

/// Yield function value for admissibility checks.
inline double dp_yield(const Mat3& tau, const ConstitutiveParams& mat) {
  const double p = tau.trace() / 3.0;
  const Mat3 s = tau - p * Mat3::Identity();
  const double sqrtJ2 = s.norm() / std::sqrt(2.0);
  return sqrtJ2 + mat.eta * p - mat.xi * mat.cohesion;
}

/// Elastic deformation gradient reproducing a target Kirchhoff stress, used
/// for geostatic initialisation.
inline Mat3 fe_from_stress(const Mat3& tau, const ConstitutiveParams& mat) {
  const double G = mat.shear(), K = mat.bulk();
  const double p = tau.trace() / 3.0;
  const Mat3 s = tau - p * Mat3::Identity();
  const Mat3 eps = s / (2.0 * G) + (p / (3.0 * K)) * Mat3::Identity();
  return detail::sym_exp(eps);
}

}  // namespace mpm
