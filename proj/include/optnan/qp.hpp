#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <optional>

#include "optnan/svd.hpp"

namespace optnan {

// Equality-constrained QP:  min_z 1/2 z^T Q z + q^T z  s.t.  A z = b,
// with Q symmetric PSD.
struct QpProblem {
  Matrix q_mat;  // n x n
  Vec q_vec;     // n
  Matrix a;      // m x n
  Vec b;         // m

  static QpProblem make(Matrix q_mat, Vec q_vec, Matrix a, Vec b) {
    const std::size_t n = q_mat.rows();
    if (q_mat.cols() != n) throw InvalidInput("QpProblem: Q not square");
    if (q_vec.size() != n || a.cols() != n || b.size() != a.rows())
      throw InvalidInput("QpProblem: dimension mismatch");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (std::fabs(q_mat(i, j) - q_mat(j, i)) > 1e-12)
          throw InvalidInput("QpProblem: Q not symmetric");
    return QpProblem{std::move(q_mat), std::move(q_vec), std::move(a),
                     std::move(b)};
  }

  double objective(std::span<const double> z) const {
    return 0.5 * dot(z, matvec(q_mat, z)) + dot(q_vec, z);
  }
};

enum class QpStatus { solved, singular_kkt };

struct QpSolution {
  Vec z;    // primal, NaN-filled when status == singular_kkt
  Vec nu;   // equality duals
  double kkt_residual = 0.0;
  QpStatus status = QpStatus::solved;

  // KKT factorization kept for the backward solve; not part of the value.
  std::shared_ptr<const SvdFactors> kkt_factors;
};

namespace detail {

inline Matrix kkt_matrix(const QpProblem& p) {
  const std::size_t n = p.q_mat.rows();
  const std::size_t m = p.a.rows();
  Matrix k(n + m, n + m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) k(i, j) = p.q_mat(i, j);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      k(n + i, j) = p.a(i, j);
      k(j, n + i) = p.a(i, j);
    }
  return k;
}

}  // namespace detail

// Forward solve through the KKT system
//   [Q A^T; A 0] [z; nu] = [-q; b].
// Singularity of the KKT matrix is not an exception here: it is the
// observable failure mode the attack hunts, so it is encoded in the status
// and z is filled with NaN.
inline QpSolution solve_eq_qp(const QpProblem& p, double tau_sing = kTauSing) {
  const std::size_t n = p.q_mat.rows();
  const std::size_t m = p.a.rows();
  QpSolution sol;

  if (!p.a.is_finite() || !all_finite(p.b)) {
    sol.status = QpStatus::singular_kkt;
    sol.z.assign(n, std::numeric_limits<double>::quiet_NaN());
    sol.nu.assign(m, std::numeric_limits<double>::quiet_NaN());
    sol.kkt_residual = std::numeric_limits<double>::quiet_NaN();
    return sol;
  }

  const Matrix k = detail::kkt_matrix(p);
  Vec rhs(n + m);
  for (std::size_t i = 0; i < n; ++i) rhs[i] = -p.q_vec[i];
  for (std::size_t i = 0; i < m; ++i) rhs[n + i] = p.b[i];

  SvdFactors f = svd(k);
  const double smax = f.sigma_max();
  bool ok = smax > 0.0 && f.sigma_min() > tau_sing * smax;
  Matrix x;
  if (ok) {
    x = detail::svd_solve(f, Matrix::col_vector(rhs));
    const double res = (k * x - Matrix::col_vector(rhs)).frobenius_norm();
    sol.kkt_residual = res;
    ok = x.is_finite() && res <= 1e-8 * std::max(1.0, norm2(rhs));
  }
  if (!ok) {
    sol.status = QpStatus::singular_kkt;
    sol.z.assign(n, std::numeric_limits<double>::quiet_NaN());
    sol.nu.assign(m, std::numeric_limits<double>::quiet_NaN());
    sol.kkt_residual = std::numeric_limits<double>::quiet_NaN();
    return sol;
  }

  sol.z.assign(x.entries().begin(), x.entries().begin() + n);
  sol.nu.assign(x.entries().begin() + n, x.entries().end());
  sol.status = QpStatus::solved;
  sol.kkt_factors = std::make_shared<SvdFactors>(std::move(f));
  return sol;
}

struct QpGradients {
  Matrix d_q_mat;
  Vec d_q_vec;
  Matrix d_a;
  Vec d_b;
};

// Implicit differentiation through the KKT conditions. Solves
//   [Q A^T; A 0] [dz; dnu] = [-grad_z; 0]
// and assembles dQ = 1/2 (dz z^T + z dz^T), dq = dz,
// dA = dnu z^T + nu dz^T, db = -dnu.
inline QpGradients backward_eq_qp(const QpProblem& p, const QpSolution& sol,
                                  std::span<const double> grad_z) {
  if (sol.status != QpStatus::solved)
    throw NonFiniteForward("backward_eq_qp: forward pass was singular");
  const std::size_t n = p.q_mat.rows();
  const std::size_t m = p.a.rows();
  if (grad_z.size() != n) throw InvalidInput("backward_eq_qp: grad_z size");

  Vec rhs(n + m, 0.0);
  for (std::size_t i = 0; i < n; ++i) rhs[i] = -grad_z[i];

  Matrix d;
  if (sol.kkt_factors) {
    d = detail::svd_solve(*sol.kkt_factors, Matrix::col_vector(rhs));
  } else {
    d = solve_linear(detail::kkt_matrix(p), Matrix::col_vector(rhs));
  }
  Vec dz(d.entries().begin(), d.entries().begin() + n);
  Vec dnu(d.entries().begin() + n, d.entries().end());

  QpGradients g;
  g.d_q_vec = dz;
  g.d_q_mat = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      g.d_q_mat(i, j) = 0.5 * (dz[i] * sol.z[j] + sol.z[i] * dz[j]);
  g.d_a = Matrix(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      g.d_a(i, j) = dnu[i] * sol.z[j] + sol.nu[i] * dz[j];
  g.d_b.resize(m);
  for (std::size_t i = 0; i < m; ++i) g.d_b[i] = -dnu[i];
  return g;
}

// Largest eigenvalue of a symmetric PSD matrix by power iteration.
inline double power_iteration_norm(const Matrix& h, int iters = 200) {
  const std::size_t n = h.rows();
  Vec v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 1e-3 * static_cast<double>(i);
  double lambda = 0.0;
  for (int it = 0; it < iters; ++it) {
    Vec w = matvec(h, v);
    const double nw = norm2(w);
    if (nw == 0.0) return 0.0;
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / nw;
    lambda = nw;
  }
  return lambda;
}

inline constexpr double kBoxQpTol = 1e-6;
inline constexpr int kBoxQpBudget = 100000;

// min_z 1/2 z^T H z + c^T z  s.t.  z_i >= lower_i  (-inf allowed).
// Projected gradient with step 1/L, L from power iteration on H.
// Optimality is measured by the projected-gradient norm
// ||z - clamp(z - grad, lower)||.
inline Vec solve_lower_bounded_qp(const Matrix& h, std::span<const double> c,
                                  std::span<const double> lower,
                                  double tol = kBoxQpTol,
                                  int budget = kBoxQpBudget) {
  const std::size_t n = h.rows();
  if (h.cols() != n || c.size() != n || lower.size() != n)
    throw InvalidInput("solve_lower_bounded_qp: dimension mismatch");
  {
    Matrix l;
    Matrix shifted = h;
    const double shift = 1e-10 * std::max(1.0, h.max_abs()) + 1e-14;
    for (std::size_t i = 0; i < n; ++i) shifted(i, i) += shift;
    if (!cholesky_factor(shifted, l))
      throw InvalidInput("solve_lower_bounded_qp: H not PSD");
  }

  const double lmax = power_iteration_norm(h);
  const double step = lmax > 0.0 ? 1.0 / (1.01 * lmax) : 1.0;

  auto project = [&](Vec& z) {
    for (std::size_t i = 0; i < n; ++i)
      if (std::isfinite(lower[i]) && z[i] < lower[i]) z[i] = lower[i];
  };

  Vec z(n, 0.0);
  project(z);
  double best_res = std::numeric_limits<double>::infinity();
  Vec best = z;
  for (int it = 0; it < budget; ++it) {
    Vec g = matvec(h, z);
    for (std::size_t i = 0; i < n; ++i) g[i] += c[i];

    // projected-gradient residual with unit step
    double res = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double zi = z[i] - g[i];
      if (std::isfinite(lower[i]) && zi < lower[i]) zi = lower[i];
      const double d = z[i] - zi;
      res += d * d;
    }
    res = std::sqrt(res);
    if (res < best_res) {
      best_res = res;
      best = z;
    }
    if (res <= tol) return z;

    for (std::size_t i = 0; i < n; ++i) z[i] -= step * g[i];
    project(z);
  }
  throw NotConverged("solve_lower_bounded_qp: budget exhausted", best, best_res);
}

// Constraint shift that inflates the optimal value while leaving A (and so
// its condition number) untouched: b' = b - k A grad_f(x0). Demonstrates
// that a huge objective does not imply an ill-conditioned matrix.
inline Vec objective_shift(const Matrix& a, std::span<const double> b,
                           std::span<const double> grad_at_opt, double k) {
  if (a.rows() != b.size() || a.cols() != grad_at_opt.size())
    throw InvalidInput("objective_shift: dimension mismatch");
  Vec ag = matvec(a, grad_at_opt);
  Vec out(b.begin(), b.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= k * ag[i];
  return out;
}

}  // namespace optnan
