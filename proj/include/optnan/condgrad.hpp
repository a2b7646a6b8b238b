#pragma once

#include <cmath>

#include "optnan/network.hpp"
#include "optnan/svd.hpp"

namespace optnan {

enum class CondGradMethod {
  two_norm_closed_form,
  frobenius_closed_form,
  finite_difference,
};

struct CondGradReport {
  Matrix grad_wrt_a;  // m x n, d kappa / d A_ij
  double kappa = 0.0;
  CondGradMethod method = CondGradMethod::two_norm_closed_form;
};

// Minimum relative gap required between the extreme singular values and
// their neighbors for the two-norm gradient to be well defined.
inline constexpr double kSimpleSvGap = 1e-8;

// Differential of the pseudoinverse in direction da:
//   d(A+) = -A+ dA A+ + (I - A+A) dA^T (A+)^T A+ + A+ (A+)^T dA^T (I - AA+).
inline Matrix pinv_differential(const Matrix& a, const Matrix& da,
                                double tau_sing = kTauSing) {
  if (!a.same_shape(da)) throw InvalidInput("pinv_differential: shape mismatch");
  SvdFactors f = svd(a);
  if (f.sigma_max() == 0.0 || f.sigma_min() <= tau_sing * f.sigma_max())
    throw SingularInput("pinv_differential: numerically singular matrix");

  const Matrix p = pseudoinverse_from(f, pinv_cutoff(a, f.sigma_max()));
  const Matrix pt = p.transpose();
  const Matrix dat = da.transpose();
  const std::size_t m = a.rows(), n = a.cols();

  Matrix left = -1.0 * (p * da * p);
  Matrix proj_n = Matrix::identity(n) - p * a;   // I - A+A
  Matrix proj_m = Matrix::identity(m) - a * p;   // I - AA+
  return left + proj_n * dat * pt * p + p * pt * dat * proj_m;
}

// Closed-form gradient of kappa_2(A) = ||A+||_2 ||A||_2 with respect to the
// entries of A:
//   B^T - (A+ C A+)^T + (A+)^T A+ C (I - A+A) + (I - AA+) C A+ (A+)^T
// with B = ||A+||_2 V e_1 e_1^T U^T and C = ||A||_2 U e_r e_r^T V^T.
// Requires simple extreme singular values.
inline CondGradReport grad_kappa2(const Matrix& a, double tau_sing = kTauSing) {
  SvdFactors f = svd(a);
  const double smax = f.sigma_max();
  const double smin = f.sigma_min();
  if (smax == 0.0 || smin <= tau_sing * smax)
    throw SingularInput("grad_kappa2: numerically singular matrix");

  const std::size_t r = f.sigma.size();
  if (r == 1) {
    // kappa_2 is identically 1 for rank-one-thin shapes.
    return CondGradReport{Matrix(a.rows(), a.cols()), 1.0,
                          CondGradMethod::two_norm_closed_form};
  }
  if (f.sigma[0] - f.sigma[1] < kSimpleSvGap * smax ||
      f.sigma[r - 2] - f.sigma[r - 1] < kSimpleSvGap * smax)
    throw DegenerateSpectrum("grad_kappa2: extreme singular values not simple");

  const Matrix p = pseudoinverse_from(f, pinv_cutoff(a, smax));
  const Matrix pt = p.transpose();
  const std::size_t m = a.rows(), n = a.cols();

  // B = ||A+|| v_1 u_1^T (n x m), C = ||A|| u_r v_r^T (m x n).
  const Vec u1 = f.u.col(0);
  const Vec v1 = f.vt.row(0);
  const Vec ur = f.u.col(r - 1);
  const Vec vr = f.vt.row(r - 1);
  const Matrix bmat = (1.0 / smin) * outer(v1, u1);
  const Matrix cmat = smax * outer(ur, vr);

  Matrix grad = bmat.transpose() - (p * cmat * p).transpose();
  Matrix proj_n = Matrix::identity(n) - p * a;
  Matrix proj_m = Matrix::identity(m) - a * p;
  grad = grad + pt * p * cmat * proj_n + proj_m * cmat * p * pt;

  return CondGradReport{std::move(grad), smax / smin,
                        CondGradMethod::two_norm_closed_form};
}

// Frobenius-norm variant, kappa_F(A) = ||A+||_F ||A||_F. No simple-value
// requirement; only non-singularity.
inline CondGradReport grad_kappaF(const Matrix& a, double tau_sing = kTauSing) {
  SvdFactors f = svd(a);
  const double smax = f.sigma_max();
  if (smax == 0.0 || f.sigma_min() <= tau_sing * smax)
    throw SingularInput("grad_kappaF: numerically singular matrix");

  const Matrix p = pseudoinverse_from(f, pinv_cutoff(a, smax));
  const Matrix pt = p.transpose();
  const double na = a.frobenius_norm();
  const double np = p.frobenius_norm();

  const Matrix x = pt * p * pt;  // (A+)^T A+ (A+)^T, m x n
  Matrix grad = (np / na) * a +
                (na / np) * (x - x * (p * a) - (a * p) * x);
  return CondGradReport{std::move(grad), np * na,
                        CondGradMethod::frobenius_closed_form};
}

// Central-difference gradient of kappa_2 over the matrix entries. Fallback
// for spectra where the closed form refuses (repeated extreme values).
inline CondGradReport fd_grad_kappa2(const Matrix& a, double step = 1e-6) {
  auto kappa_of = [](const Matrix& m) {
    SvdFactors f = svd(m);
    return f.sigma_min() > 0.0
               ? f.sigma_max() / f.sigma_min()
               : std::numeric_limits<double>::infinity();
  };
  CondGradReport rep;
  rep.method = CondGradMethod::finite_difference;
  rep.kappa = kappa_of(a);
  rep.grad_wrt_a = Matrix(a.rows(), a.cols());
  Matrix work = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double orig = work(i, j);
      work(i, j) = orig + step;
      const double up = kappa_of(work);
      work(i, j) = orig - step;
      const double dn = kappa_of(work);
      work(i, j) = orig;
      const double d = (up - dn) / (2.0 * step);
      rep.grad_wrt_a(i, j) = std::isfinite(d) ? d : 0.0;
    }
  }
  return rep;
}

// d log kappa_2(A(u)) / du for the deployed matrix of a network:
// (1/kappa) * dkappa/dA chained through the dense stack (and the defense
// layer when enabled). DegenerateSpectrum / SingularInput propagate so the
// attack driver can fall back to finite differences.
inline Vec grad_log_kappa2_wrt_input(const Network& net,
                                     std::span<const double> u) {
  Tape t = forward(net, u);
  if (t.nonfinite)
    throw NonFiniteForward("grad_log_kappa2_wrt_input: non-finite forward");
  CondGradReport rep = grad_kappa2(t.a);
  Matrix scaled = (1.0 / rep.kappa) * rep.grad_wrt_a;
  return backward_from_a(net, t, scaled).input;
}

}  // namespace optnan
