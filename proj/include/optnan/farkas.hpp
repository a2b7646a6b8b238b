#pragma once

#include <cmath>
#include <limits>

#include "optnan/attack.hpp"
#include "optnan/condgrad.hpp"
#include "optnan/network.hpp"
#include "optnan/qp.hpp"

namespace optnan {

// Inequality-infeasibility machinery. The system Ax <= b is infeasible iff
// some y >= 0 has A^T y = 0 and b^T y < 0. Stacking K = [A^T; b^T] and
// q = [0; -1], such a y solves Ky = q, which motivates the prerequisite
// loss ||K K+ q - q|| and the distance program below.
struct FarkasInstance {
  Matrix a_ineq;  // m x n
  Vec b_ineq;     // m
  Matrix k_mat;   // (n+1) x m
  Vec q_rhs;      // (n+1), [0 ... 0 -1]
  double nu_margin = 1e-3;
  double gamma = 0.9;
  double eta_reg = 1e-6;

  static FarkasInstance make(Matrix a, Vec b, double nu = 1e-3,
                             double gamma = 0.9, double eta = 1e-6) {
    const std::size_t m = a.rows(), n = a.cols();
    if (b.size() != m) throw InvalidInput("FarkasInstance: b length mismatch");
    if (!(nu > 0.0) || !(gamma > 0.0 && gamma < 1.0) || eta < 0.0)
      throw InvalidInput("FarkasInstance: bad hyperparameters");
    FarkasInstance inst;
    inst.k_mat = Matrix(n + 1, m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) inst.k_mat(i, j) = a(j, i);
    for (std::size_t j = 0; j < m; ++j) inst.k_mat(n, j) = b[j];
    inst.q_rhs.assign(n + 1, 0.0);
    inst.q_rhs[n] = -1.0;
    inst.a_ineq = std::move(a);
    inst.b_ineq = std::move(b);
    inst.nu_margin = nu;
    inst.gamma = gamma;
    inst.eta_reg = eta;
    return inst;
  }
};

struct FarkasCertificate {
  Vec y;
  double residual_eq = 0.0;  // ||A^T y||_2
  double value_bty = 0.0;    // b^T y
  double min_y = 0.0;
  bool valid = false;
};

// Certificate check with explicit tolerances: A^T y ~ 0, b^T y strictly
// negative, y (numerically) non-negative.
inline FarkasCertificate verify_infeasible(const Matrix& a_ineq,
                                           std::span<const double> b_ineq,
                                           std::span<const double> y) {
  if (a_ineq.rows() != y.size() || b_ineq.size() != y.size())
    throw InvalidInput("verify_infeasible: dimension mismatch");
  FarkasCertificate cert;
  cert.y.assign(y.begin(), y.end());
  cert.residual_eq = norm2(matTvec(a_ineq, y));
  cert.value_bty = dot(b_ineq, y);
  cert.min_y = *std::min_element(cert.y.begin(), cert.y.end());
  cert.valid = cert.residual_eq <= 1e-6 && cert.value_bty <= -1e-8 &&
               cert.min_y >= -1e-9;
  return cert;
}

// ||K K+ q - q||_2; zero exactly when Ky = q is solvable.
inline double prereq_loss(const FarkasInstance& inst) {
  const Matrix kp = pseudoinverse(inst.k_mat);
  Vec r = matvec(inst.k_mat, matvec(kp, inst.q_rhs));
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= inst.q_rhs[i];
  return norm2(r);
}

struct OptdistResult {
  double value = 0.0;  // ||B z*||^2, eta term excluded
  Vec z_star;          // [y - K+q; v]
  Vec y_star;          // recovered y
  bool converged = true;
};

namespace detail {

// B = [I, K+K - I], so Bz = (y - K+q) + (K+K - I)v.
inline Matrix optdist_bmat(const Matrix& kp, const Matrix& k) {
  const std::size_t m = k.cols();
  const Matrix p = kp * k;  // K+K, m x m
  Matrix b(m, 2 * m);
  for (std::size_t i = 0; i < m; ++i) {
    b(i, i) = 1.0;
    for (std::size_t j = 0; j < m; ++j)
      b(i, m + j) = p(i, j) - (i == j ? 1.0 : 0.0);
  }
  return b;
}

}  // namespace detail

// Distance between the solution set of Ky = q and the (nu-tightened)
// non-negative orthant, as the value of a lower-bounded QP in
// z = [y - K+q; v]:
//   min z^T (B^T B + Q_eta) z   s.t.   z_{1..m} >= nu - K+q,
// with Q_eta = eta*I on the v block only. The reported value excludes the
// eta term. A zero value certifies the sets intersect.
inline OptdistResult optdist(const FarkasInstance& inst,
                             int budget = kBoxQpBudget) {
  const std::size_t m = inst.k_mat.cols();
  const Matrix kp = pseudoinverse(inst.k_mat);
  const Vec kq = matvec(kp, inst.q_rhs);
  const Matrix b = detail::optdist_bmat(kp, inst.k_mat);

  Matrix h = b.transpose() * b;
  for (std::size_t i = 0; i < m; ++i) h(m + i, m + i) += inst.eta_reg;
  h = 2.0 * h;

  Vec lower(2 * m, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < m; ++i) lower[i] = inst.nu_margin - kq[i];

  OptdistResult out;
  try {
    out.z_star = solve_lower_bounded_qp(h, Vec(2 * m, 0.0), lower,
                                        kBoxQpTol, budget);
  } catch (const NotConverged& e) {
    out.z_star = e.best;
    out.converged = false;
  }
  const Vec bz = matvec(b, out.z_star);
  out.value = dot(bz, bz);
  out.y_star.resize(m);
  for (std::size_t i = 0; i < m; ++i) out.y_star[i] = out.z_star[i] + kq[i];
  return out;
}

struct FarkasAttackOutcome {
  AttackResult attack;
  FarkasCertificate certificate;
  Vec final_objective{};  // (L_prereq, L_dist) at the returned input
};

namespace detail {

// Gradient of gamma*L_prereq + (1-gamma)*L_dist with respect to the entries
// of A, with the Optdist minimizer z* held fixed. The value-function
// derivative has two parts: the objective's dependence on B and the active
// lower bounds' dependence on K+q (multiplier term). The latter cannot be
// dropped: for full-column-rank K the projector K+K is the identity, B
// collapses to [I, 0], and the B-only term is identically zero.
inline Matrix farkas_loss_grad_a(const FarkasInstance& inst,
                                 const OptdistResult& od) {
  const Matrix& k = inst.k_mat;
  const std::size_t rows = k.rows();  // n + 1
  const std::size_t m = k.cols();
  const std::size_t n = rows - 1;

  const Matrix kp = pseudoinverse(k);
  const Matrix kpt = kp.transpose();
  const Matrix proj_range = Matrix::identity(rows) - k * kp;   // I - KK+
  const Matrix proj_null = Matrix::identity(m) - kp * k;       // I - K+K
  const Vec kpq = matvec(kp, inst.q_rhs);

  Vec r = matvec(k, kpq);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= inst.q_rhs[i];
  const double rnorm = norm2(r);

  const Matrix bmat = optdist_bmat(kp, k);
  const Vec bz = matvec(bmat, od.z_star);
  const Vec zv(od.z_star.begin() + m, od.z_star.end());  // v block

  // Multipliers of the active bounds z_i >= nu - (K+q)_i. For the box QP
  // the multiplier equals the objective gradient component on the active
  // set: lambda = (H z*)_i, H = 2(B^T B + Q_eta).
  Vec lambda(m, 0.0);
  {
    Vec hz = matvec(bmat.transpose(), bz);  // (B^T B) z*
    for (std::size_t i = 0; i < m; ++i) {
      const double bound = inst.nu_margin - kpq[i];
      if (od.z_star[i] - bound <= 1e-7 * std::max(1.0, std::fabs(bound)))
        lambda[i] = std::max(0.0, 2.0 * hz[i]);
    }
  }

  Matrix grad(m, n);  // gradient w.r.t. A (A is m x n)
  Matrix dk(rows, m);
  for (std::size_t i = 0; i < n; ++i) {     // K row index (A column)
    for (std::size_t j = 0; j < m; ++j) {   // K col index (A row)
      dk(i, j) = 1.0;
      // Golub differential of the pseudoinverse in direction dk.
      const Matrix dkt = dk.transpose();
      const Matrix dkp = -1.0 * (kp * dk * kp) + proj_null * dkt * kpt * kp +
                         kp * kpt * dkt * proj_range;

      // Descent uses the squared prerequisite ||r||^2: same zero set as the
      // plain norm, but the gradient vanishes at the optimum so a constant
      // rate converges instead of orbiting.
      double d_pre = 0.0;
      if (rnorm > 1e-15) {
        // dr = dK (K+ q) + K (dK+ q)
        Vec dr = matvec(dk, kpq);
        const Vec tail = matvec(k, matvec(dkp, inst.q_rhs));
        for (std::size_t t = 0; t < dr.size(); ++t) dr[t] += tail[t];
        d_pre = 2.0 * dot(r, dr);
      }

      // dB = [0, d(K+K)] with d(K+K) = dK+ K + K+ dK, plus the multiplier
      // term from the bounds: d(nu - K+q) = -(dK+ q).
      const Matrix dp = dkp * k + kp * dk;
      double d_dist = 2.0 * dot(bz, matvec(dp, zv));
      const Vec dkpq = matvec(dkp, inst.q_rhs);
      for (std::size_t t = 0; t < m; ++t) d_dist -= lambda[t] * dkpq[t];

      grad(j, i) = inst.gamma * d_pre + (1.0 - inst.gamma) * d_dist;
      dk(i, j) = 0.0;
    }
  }
  return grad;
}

}  // namespace detail

// Gradient descent on gamma*L_prereq + (1-gamma)*L_dist through the network
// head that emits the inequality matrix A(theta); b is fixed. Success
// requires a verified Farkas certificate, nothing less.
inline FarkasAttackOutcome run_farkas_attack(const Network& net,
                                             std::span<const double> u0,
                                             const Vec& b_ineq, double lr,
                                             int epochs, double nu = 1e-3,
                                             double gamma = 0.9,
                                             double eta = 1e-6,
                                             int optdist_budget = 20000) {
  if (lr < 0.0 || epochs < 1)
    throw InvalidInput("run_farkas_attack: bad lr or epochs");
  if (b_ineq.size() != net.out_m)
    throw InvalidInput("run_farkas_attack: b length mismatch");

  FarkasAttackOutcome out;
  out.attack.u_star.assign(u0.begin(), u0.end());
  Vec u = out.attack.u_star;
  Vec adam_m(u.size(), 0.0), adam_v(u.size(), 0.0);

  for (int epoch = 1; epoch <= epochs; ++epoch) {
    const Tape tape = forward_to_matrix(net, u);
    if (tape.nonfinite) break;
    const FarkasInstance inst =
        FarkasInstance::make(tape.a_raw, b_ineq, nu, gamma, eta);

    const OptdistResult od = optdist(inst, optdist_budget);
    out.certificate = verify_infeasible(inst.a_ineq, inst.b_ineq, od.y_star);
    out.final_objective = {prereq_loss(inst), od.value};
    out.attack.epochs_used = epoch;
    {
      const auto v = condition_number(tape.a_raw);
      out.attack.kappa_trajectory.emplace_back(
          epoch, std::isfinite(v.kappa2)
                     ? v.kappa2
                     : std::numeric_limits<double>::infinity());
    }
    if (!out.certificate.valid && od.value < 1e-2) {
      // The nu tightening shrinks the orthant for the attack loss only; a
      // certificate is allowed to sit anywhere in y >= 0. Near-misses get a
      // re-solve against the (almost) untightened orthant.
      FarkasInstance loose = inst;
      loose.nu_margin = 1e-9;
      const OptdistResult od0 = optdist(loose, optdist_budget);
      const FarkasCertificate cert0 =
          verify_infeasible(inst.a_ineq, inst.b_ineq, od0.y_star);
      if (cert0.valid) out.certificate = cert0;
    }
    if (out.certificate.valid) {
      out.attack.success = true;
      out.attack.u_star = u;
      break;
    }

    Matrix grad_a(net.out_m, net.out_n);
    try {
      grad_a = detail::farkas_loss_grad_a(inst, od);
    } catch (const Error&) {
      // Degenerate K; skip the update rather than step on garbage.
    }
    const Vec grad_u = backward_from_a(net, tape, grad_a).input;
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, epoch);
    const double c2 = 1.0 - std::pow(b2, epoch);
    for (std::size_t i = 0; i < u.size(); ++i) {
      adam_m[i] = b1 * adam_m[i] + (1 - b1) * grad_u[i];
      adam_v[i] = b2 * adam_v[i] + (1 - b2) * grad_u[i] * grad_u[i];
      u[i] -= lr * (adam_m[i] / c1) / (std::sqrt(adam_v[i] / c2) + eps);
    }
    if (!all_finite(u)) break;
    out.attack.u_star = u;
  }

  double acc = 0.0;
  for (std::size_t i = 0; i < u0.size(); ++i) {
    const double d = u0[i] - out.attack.u_star[i];
    acc += d * d;
  }
  out.attack.distortion_l2 = std::sqrt(acc / static_cast<double>(u0.size()));
  return out;
}

}  // namespace optnan
