#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "optnan/matrix.hpp"

namespace optnan {

// Relative singularity threshold: sigma_min/sigma_max at or below this is
// treated as singular. Exposed as a parameter everywhere it matters.
inline constexpr double kTauSing = 1e-10;

// Thin SVD A = U diag(sigma) V^T with r = min(m, n).
// U is m x r with orthonormal columns, V^T is r x n with orthonormal rows,
// sigma is sorted non-increasing. The sign of each U column is normalized
// so its first nonzero entry is positive, which makes the factorization
// deterministic.
struct SvdFactors {
  Matrix u;
  Vec sigma;
  Matrix vt;

  double sigma_max() const { return sigma.empty() ? 0.0 : sigma.front(); }
  double sigma_min() const { return sigma.empty() ? 0.0 : sigma.back(); }

  Matrix reconstruct() const {
    Matrix us = u;
    for (std::size_t i = 0; i < us.rows(); ++i)
      for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= sigma[j];
    return us * vt;
  }
};

struct SingularityVerdict {
  double kappa2 = 0.0;  // condition number in the requested norm
  double sigma_min = 0.0;
  double sigma_max = 0.0;
  bool is_numerically_singular = false;
};

enum class CondNorm { two, frobenius };

namespace detail {

// One-sided Jacobi on the columns of W (requires rows >= cols). At
// convergence W = A V with orthogonal columns; sigma_i = ||w_i||.
inline void jacobi_orthogonalize(Matrix& w, Matrix& v) {
  const std::size_t m = w.rows();
  const std::size_t n = w.cols();
  const double tol = 1e-14;
  const int max_sweeps = 40;

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double app = 0.0, aqq = 0.0, apq = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = w(i, p), wq = w(i, q);
          app += wp * wp;
          aqq += wq * wq;
          apq += wp * wq;
        }
        if (apq == 0.0 || app == 0.0 || aqq == 0.0) continue;
        if (std::fabs(apq) <= tol * std::sqrt(app) * std::sqrt(aqq)) continue;

        const double zeta = (aqq - app) / (2.0 * apq);
        const double t =
            (zeta >= 0.0 ? 1.0 : -1.0) /
            (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = w(i, p), wq = w(i, q);
          w(i, p) = c * wp - s * wq;
          w(i, q) = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
        rotated = true;
      }
    }
    if (!rotated) break;
  }
}

}  // namespace detail

inline SvdFactors svd(const Matrix& a) {
  if (!a.is_finite()) throw InvalidInput("svd: non-finite input");
  if (a.rows() == 0 || a.cols() == 0) throw InvalidInput("svd: empty matrix");

  if (a.rows() < a.cols()) {
    // A^T = U2 S V2^T  =>  A = V2 S U2^T
    SvdFactors f = svd(a.transpose());
    SvdFactors out;
    out.u = f.vt.transpose();
    out.sigma = f.sigma;
    out.vt = f.u.transpose();
    // Re-normalize signs: the convention is tied to U columns.
    for (std::size_t j = 0; j < out.u.cols(); ++j) {
      for (std::size_t i = 0; i < out.u.rows(); ++i) {
        if (out.u(i, j) == 0.0) continue;
        if (out.u(i, j) < 0.0) {
          for (std::size_t k = 0; k < out.u.rows(); ++k) out.u(k, j) = -out.u(k, j);
          for (std::size_t k = 0; k < out.vt.cols(); ++k) out.vt(j, k) = -out.vt(j, k);
        }
        break;
      }
    }
    return out;
  }

  const std::size_t m = a.rows();
  const std::size_t n = a.cols();  // r = n since m >= n
  Matrix w = a;
  Matrix v = Matrix::identity(n);
  detail::jacobi_orthogonalize(w, v);

  Vec sig(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += w(i, j) * w(i, j);
    sig[j] = std::sqrt(s);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return sig[i] > sig[j]; });

  SvdFactors f;
  f.u = Matrix(m, n);
  f.sigma.resize(n);
  f.vt = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    f.sigma[j] = sig[src];
    if (sig[src] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) f.u(i, j) = w(i, src) / sig[src];
    }
    for (std::size_t k = 0; k < n; ++k) f.vt(j, k) = v(k, src);
  }

  // Columns with sigma exactly zero need an orthonormal completion. Walk the
  // standard basis and Gram-Schmidt against everything placed so far.
  std::size_t next_basis = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (f.sigma[j] > 0.0) continue;
    while (next_basis < m) {
      Vec cand(m, 0.0);
      cand[next_basis++] = 1.0;
      for (std::size_t k = 0; k < n; ++k) {
        if (k == j) continue;
        double proj = 0.0;
        for (std::size_t i = 0; i < m; ++i) proj += cand[i] * f.u(i, k);
        for (std::size_t i = 0; i < m; ++i) cand[i] -= proj * f.u(i, k);
      }
      const double nrm = norm2(cand);
      if (nrm > 0.5) {  // basis vector not (nearly) inside the span
        for (std::size_t i = 0; i < m; ++i) f.u(i, j) = cand[i] / nrm;
        break;
      }
    }
  }

  // Sign convention: first nonzero entry of each U column is positive.
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) {
      if (f.u(i, j) == 0.0) continue;
      if (f.u(i, j) < 0.0) {
        for (std::size_t k = 0; k < m; ++k) f.u(k, j) = -f.u(k, j);
        for (std::size_t k = 0; k < n; ++k) f.vt(j, k) = -f.vt(j, k);
      }
      break;
    }
  }
  return f;
}

// Relative pseudoinverse cutoff: singular values at or below
// max(m,n) * eps * sigma_max are treated as zero.
inline double pinv_cutoff(const Matrix& a, double sigma_max) {
  return static_cast<double>(std::max(a.rows(), a.cols())) *
         std::numeric_limits<double>::epsilon() * sigma_max;
}

inline Matrix pseudoinverse_from(const SvdFactors& f, double cutoff) {
  const std::size_t r = f.sigma.size();
  // A+ = V S+ U^T, assembled as sum of rank-one terms.
  Matrix p(f.vt.cols(), f.u.rows());
  for (std::size_t k = 0; k < r; ++k) {
    if (f.sigma[k] <= cutoff || f.sigma[k] == 0.0) continue;
    const double inv = 1.0 / f.sigma[k];
    for (std::size_t i = 0; i < p.rows(); ++i) {
      const double vik = f.vt(k, i) * inv;
      if (vik == 0.0) continue;
      for (std::size_t j = 0; j < p.cols(); ++j) p(i, j) += vik * f.u(j, k);
    }
  }
  return p;
}

inline Matrix pseudoinverse(const Matrix& a) {
  SvdFactors f = svd(a);
  return pseudoinverse_from(f, pinv_cutoff(a, f.sigma_max()));
}

inline SingularityVerdict condition_number(const Matrix& a,
                                           CondNorm norm = CondNorm::two,
                                           double tau_sing = kTauSing) {
  SvdFactors f = svd(a);
  SingularityVerdict v;
  v.sigma_max = f.sigma_max();
  v.sigma_min = f.sigma_min();
  v.is_numerically_singular =
      v.sigma_max == 0.0 || v.sigma_min <= tau_sing * v.sigma_max;
  if (v.is_numerically_singular) {
    v.kappa2 = std::numeric_limits<double>::infinity();
  } else if (norm == CondNorm::two) {
    v.kappa2 = v.sigma_max / v.sigma_min;
  } else {
    double nf = 0.0, pf = 0.0;
    for (double s : f.sigma) {
      nf += s * s;
      pf += 1.0 / (s * s);
    }
    v.kappa2 = std::sqrt(nf) * std::sqrt(pf);
  }
  return v;
}

// ||A||_2 = sigma_max.
inline double spectral_norm(const Matrix& a) { return svd(a).sigma_max(); }

// 2-norm distance from A to the nearest singular matrix, i.e. sigma_min.
inline double distance_to_singularity(const Matrix& a) {
  return svd(a).sigma_min();
}

namespace detail {

inline Matrix svd_solve(const SvdFactors& f, const Matrix& b) {
  // x = V S^-1 U^T b; only called for non-singular square systems.
  Matrix utb(f.sigma.size(), b.cols());
  for (std::size_t k = 0; k < f.sigma.size(); ++k)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < b.rows(); ++i) s += f.u(i, k) * b(i, j);
      utb(k, j) = s / f.sigma[k];
    }
  return f.vt.transpose() * utb;
}

}  // namespace detail

// Solve Ax = b for square A. This is the fail-loud contract: a numerically
// singular system raises SingularSystem instead of returning garbage, and
// the residual of the computed solution is verified before it is returned.
inline Matrix solve_linear(const Matrix& a, const Matrix& b,
                           double tau_sing = kTauSing) {
  if (a.rows() != a.cols()) throw InvalidInput("solve_linear: A not square");
  if (a.rows() != b.rows()) throw InvalidInput("solve_linear: b shape mismatch");
  if (!a.is_finite() || !b.is_finite())
    throw InvalidInput("solve_linear: non-finite input");

  SvdFactors f = svd(a);
  const double smax = f.sigma_max();
  if (smax == 0.0 || f.sigma_min() <= tau_sing * smax)
    throw SingularSystem("solve_linear: numerically singular system");

  Matrix x = detail::svd_solve(f, b);
  const double res = (a * x - b).frobenius_norm();
  if (!x.is_finite() || res > 1e-8 * std::max(1.0, b.frobenius_norm()))
    throw SingularSystem("solve_linear: residual check failed");
  return x;
}

inline Vec solve_linear(const Matrix& a, std::span<const double> b,
                        double tau_sing = kTauSing) {
  Matrix x = solve_linear(a, Matrix::col_vector(b), tau_sing);
  return Vec(x.entries().begin(), x.entries().end());
}

}  // namespace optnan
