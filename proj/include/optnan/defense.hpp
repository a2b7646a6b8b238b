#pragma once

#include <cmath>
#include <limits>

#include "optnan/svd.hpp"

namespace optnan {

struct DefenseConfig {
  bool enabled = false;
  double bound_b = 100.0;  // condition number bound B, must be > 1

  static DefenseConfig off() { return DefenseConfig{false, 0.0}; }
  static DefenseConfig with_bound(double b) {
    if (!(b > 1.0)) throw InvalidInput("DefenseConfig: bound must be > 1");
    return DefenseConfig{true, b};
  }
};

struct DefenseReport {
  bool clamped = false;
  double delta_norm2 = 0.0;            // ||A' - A||_2
  double bound_delta = 0.0;            // sigma_max / B
  double bound_rel_solution_err = 0.0; // kappa_2(A) / B
};

struct DefenseResult {
  Matrix a_prime;
  DefenseReport report;
  // Factors of the *input* matrix plus the clamped spectrum, kept so the
  // backward pass does not have to refactor.
  SvdFactors factors;
  Vec sigma_clamped;
};

// Condition-number clamp: if kappa_2(A) > B, raise every singular value to
// the floor sigma_max/B and reconstruct. Guarantees kappa_2(A') <= B while
// ||A' - A||_2 <= sigma_max/B. When kappa_2(A) <= B the input is returned
// bit-identical.
inline DefenseResult clamp_condition(const Matrix& a, const DefenseConfig& cfg,
                                     double tau_sing = kTauSing) {
  if (!cfg.enabled || !(cfg.bound_b > 1.0))
    throw InvalidInput("clamp_condition: defense config disabled or invalid");
  if (!a.is_finite()) throw InvalidInput("clamp_condition: non-finite input");

  DefenseResult res;
  res.factors = svd(a);
  const double smax = res.factors.sigma_max();
  if (smax == 0.0) throw ZeroMatrix("clamp_condition: zero matrix");

  const double smin = res.factors.sigma_min();
  const double floor = smax / cfg.bound_b;
  res.report.bound_delta = floor;
  res.report.bound_rel_solution_err =
      (smin <= tau_sing * smax)
          ? std::numeric_limits<double>::infinity()
          : (smax / smin) / cfg.bound_b;

  if (smin >= floor) {  // kappa_2(A) <= B: exact no-op
    res.report.clamped = false;
    res.report.delta_norm2 = 0.0;
    res.a_prime = a;
    res.sigma_clamped = res.factors.sigma;
    return res;
  }

  res.report.clamped = true;
  res.sigma_clamped = res.factors.sigma;
  double max_lift = 0.0;
  for (double& s : res.sigma_clamped) {
    if (s < floor) {
      max_lift = std::max(max_lift, floor - s);
      s = floor;
    }
  }
  // Same U, V on both sides, so ||A' - A||_2 is the largest lift.
  res.report.delta_norm2 = max_lift;

  SvdFactors clamped = res.factors;
  clamped.sigma = res.sigma_clamped;
  res.a_prime = clamped.reconstruct();
  return res;
}

struct SolutionBound {
  double rel_err = 0.0;  // ||A+ b - A'+ b|| / ||A'+ b||
  double bound = 0.0;    // kappa_2(A) / B
  bool holds = false;
};

// Relative error between the canonical solutions x = A+ b and x' = A'+ b,
// against the bound kappa_2(A)/B.
inline SolutionBound prop2_solution_bound(const Matrix& a,
                                          const Matrix& a_prime,
                                          std::span<const double> b,
                                          double bound_b) {
  if (!a.same_shape(a_prime) || a.rows() != b.size())
    throw InvalidInput("prop2_solution_bound: dimension mismatch");
  Vec x = matvec(pseudoinverse(a), b);
  Vec xp = matvec(pseudoinverse(a_prime), b);
  const double denom = norm2(xp);
  if (denom == 0.0)
    throw DegenerateRhs("prop2_solution_bound: canonical solution of A' is 0");

  Vec diff(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) diff[i] = x[i] - xp[i];

  SolutionBound out;
  out.rel_err = norm2(diff) / denom;
  out.bound = condition_number(a).kappa2 / bound_b;
  out.holds = out.rel_err <= out.bound;
  return out;
}

// Baseline from the literature: A + eta*I. Only meaningful for square A,
// and famously fails when A has an eigenvalue equal to -eta.
inline Matrix eta_identity_baseline(const Matrix& a, double eta) {
  if (a.rows() != a.cols())
    throw InvalidInput("eta_identity_baseline: A not square");
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) out(i, i) += eta;
  return out;
}

// Baseline: cap sigma_max at lip (Lipschitz / spectral-norm clamp). Lowers
// the top of the spectrum only; does nothing for sigma_min = 0, so it is
// not a singularity defense.
inline Matrix spectral_clamp_baseline(const Matrix& a, double lip) {
  if (!a.is_finite() || !(lip > 0.0))
    throw InvalidInput("spectral_clamp_baseline: bad input");
  SvdFactors f = svd(a);
  bool touched = false;
  for (double& s : f.sigma) {
    if (s > lip) {
      s = lip;
      touched = true;
    }
  }
  return touched ? f.reconstruct() : a;
}

}  // namespace optnan
