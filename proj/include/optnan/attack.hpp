#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <utility>

#include "optnan/condgrad.hpp"
#include "optnan/network.hpp"

namespace optnan {

enum class AttackMethod {
  all_zero_row_col,
  zero_singular_value,
  condition_grad,
  max_output,
  target_zero_matrix,
};

struct AttackConfig {
  AttackMethod method = AttackMethod::all_zero_row_col;
  double learning_rate = 1e-2;
  int max_epochs = 5000;
  std::optional<double> linf_eps;                       // L-inf ball around u0
  std::optional<std::pair<double, double>> clamp_box;   // per-coordinate box
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0))
      throw InvalidInput("AttackConfig: learning_rate must be > 0");
    if (max_epochs < 1) throw InvalidInput("AttackConfig: max_epochs must be >= 1");
    if (linf_eps && !(*linf_eps > 0.0))
      throw InvalidInput("AttackConfig: linf_eps must be > 0");
    if (clamp_box && !(clamp_box->first <= clamp_box->second))
      throw InvalidInput("AttackConfig: empty clamp box");
  }
};

struct AttackResult {
  bool success = false;
  Vec u_star;
  int epochs_used = 0;
  std::vector<std::pair<int, double>> kappa_trajectory;
  bool final_output_nonfinite = false;
  double distortion_l2 = 0.0;
};

// Rank-deficient target: zero the first row when m <= n, else the first
// column.
inline Matrix make_target_zero_rowcol(const Matrix& a) {
  if (!a.is_finite()) throw InvalidInput("make_target_zero_rowcol: non-finite");
  Matrix t = a;
  if (a.rows() <= a.cols()) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(0, j) = 0.0;
  } else {
    for (std::size_t i = 0; i < a.rows(); ++i) t(i, 0) = 0.0;
  }
  return t;
}

// Closest singular matrix: zero sigma_min in the SVD and reconstruct.
// ||A - A'||_2 = sigma_min by construction, though reconstruction roundoff
// usually leaves A' with a tiny nonzero smallest singular value.
inline Matrix make_target_zero_sv(const Matrix& a, double tau_sing = kTauSing) {
  SvdFactors f = svd(a);
  if (f.sigma_max() == 0.0 || f.sigma_min() <= tau_sing * f.sigma_max())
    throw AlreadySingular("make_target_zero_sv: matrix already singular");
  f.sigma.back() = 0.0;
  return f.reconstruct();
}

// The attack's success predicate: the deployed model failed to evaluate.
inline bool detect_failure(const Tape& t) {
  return t.nonfinite || t.qp.status == QpStatus::singular_kkt ||
         !all_finite(t.qp_out) || !all_finite(t.probs);
}

namespace detail {

inline void project_input(Vec& u, const Vec& u0, const AttackConfig& cfg) {
  if (cfg.linf_eps) {
    for (std::size_t i = 0; i < u.size(); ++i)
      u[i] = std::clamp(u[i], u0[i] - *cfg.linf_eps, u0[i] + *cfg.linf_eps);
  }
  if (cfg.clamp_box) {
    for (double& v : u)
      v = std::clamp(v, cfg.clamp_box->first, cfg.clamp_box->second);
  }
}

inline double deployed_kappa(const Tape& t, double tau_sing) {
  if (!t.a.is_finite()) return std::numeric_limits<double>::infinity();
  return condition_number(t.a, CondNorm::two, tau_sing).kappa2;
}

}  // namespace detail

// Gradient search for an input whose induced matrix breaks the deployed
// model (defense included when enabled).
//
// The per-method losses, all minimized with Adam at a constant rate:
//   all_zero_row_col    ||A - zero_rowcol(A)||_F^2    (first row/col of A)
//   zero_singular_value ||A - zero_sv(A)||_F^2        (= sigma_min(A)^2)
//   target_zero_matrix  ||A||_F^2
//   condition_grad      -log kappa_2(A)
//   max_output          -sum_i |z_i|
// Targets are rebuilt from the current matrix every epoch; plain
// constant-rate descent with a frozen u0 target stalls in a local minimum
// at this scale (the loss in Alg-style notation is a function of the
// current f_w(u), which is what a rebuilt target computes).
inline AttackResult run_attack(const Network& net, std::span<const double> u0,
                               const AttackConfig& cfg,
                               double tau_sing = kTauSing) {
  cfg.validate();
  Tape tape = forward(net, u0);
  if (detect_failure(tape))
    throw InvalidInput("run_attack: model already fails at u0");
  if (cfg.method == AttackMethod::zero_singular_value) {
    // precondition: the start must not already be singular
    make_target_zero_sv(tape.a, tau_sing);
  }

  const std::size_t d = u0.size();
  const std::size_t m = net.out_m, n = net.out_n;

  AttackResult res;
  const Vec origin(u0.begin(), u0.end());
  res.u_star = origin;
  Vec u = origin;
  res.kappa_trajectory.emplace_back(0, detail::deployed_kappa(tape, tau_sing));

  Vec adam_m(d, 0.0), adam_v(d, 0.0);
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Vec grad_u;
    switch (cfg.method) {
      case AttackMethod::all_zero_row_col:
      case AttackMethod::zero_singular_value:
      case AttackMethod::target_zero_matrix: {
        Matrix target(m, n);
        if (cfg.method == AttackMethod::all_zero_row_col)
          target = make_target_zero_rowcol(tape.a);
        else if (cfg.method == AttackMethod::zero_singular_value)
          target = make_target_zero_sv(tape.a, tau_sing);
        Matrix grad_a = 2.0 * (tape.a - target);
        grad_u = backward_from_a(net, tape, grad_a).input;
        break;
      }
      case AttackMethod::condition_grad: {
        Matrix grad_a(m, n);
        try {
          const CondGradReport rep = grad_kappa2(tape.a, tau_sing);
          grad_a = (-1.0 / rep.kappa) * rep.grad_wrt_a;
        } catch (const DegenerateSpectrum&) {
          const CondGradReport rep = fd_grad_kappa2(tape.a);
          if (rep.kappa > 0.0 && std::isfinite(rep.kappa))
            grad_a = (-1.0 / rep.kappa) * rep.grad_wrt_a;
        }
        grad_u = backward_from_a(net, tape, grad_a).input;
        break;
      }
      case AttackMethod::max_output: {
        Vec grad_qp(tape.qp_out.size());
        for (std::size_t i = 0; i < grad_qp.size(); ++i)
          grad_qp[i] = tape.qp_out[i] >= 0.0 ? -1.0 : 1.0;
        grad_u = backward_from_qp(net, tape, grad_qp).input;
        break;
      }
    }

    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, epoch);
    const double c2 = 1.0 - std::pow(b2, epoch);
    for (std::size_t i = 0; i < d; ++i) {
      adam_m[i] = b1 * adam_m[i] + (1 - b1) * grad_u[i];
      adam_v[i] = b2 * adam_v[i] + (1 - b2) * grad_u[i] * grad_u[i];
      u[i] -= cfg.learning_rate * (adam_m[i] / c1) /
              (std::sqrt(adam_v[i] / c2) + eps);
    }

    detail::project_input(u, origin, cfg);
    if (!all_finite(u)) break;  // left the valid input domain; give up

    tape = forward(net, u);
    res.u_star = u;
    res.epochs_used = epoch;
    const double kappa = detail::deployed_kappa(tape, tau_sing);
    res.kappa_trajectory.emplace_back(epoch, kappa);

    if (detect_failure(tape) || std::isinf(kappa)) {
      res.success = true;
      break;
    }
  }

  res.final_output_nonfinite = detect_failure(tape);
  double acc = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = u0[i] - res.u_star[i];
    acc += diff * diff;
  }
  res.distortion_l2 = std::sqrt(acc / static_cast<double>(d));
  return res;
}

}  // namespace optnan
