#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "optnan/defense.hpp"
#include "optnan/qp.hpp"
#include "optnan/rng.hpp"
#include "optnan/svd.hpp"

namespace optnan {

// Broadening floor for the 1/(sigma_i^2 - sigma_j^2) terms of the SVD
// backward, so near-degenerate spectra produce finite (approximate)
// gradients instead of NaN.
inline constexpr double kEpsBroad = 1e-8;

enum class Activation { relu, celu, tanh_fn, linear };

inline double activation_value(Activation k, double x) {
  switch (k) {
    case Activation::relu:
      return x > 0.0 ? x : 0.0;
    case Activation::celu:  // alpha = 1
      return x > 0.0 ? x : std::exp(x) - 1.0;
    case Activation::tanh_fn:
      return std::tanh(x);
    case Activation::linear:
      return x;
  }
  return x;
}

inline double activation_slope(Activation k, double x) {
  switch (k) {
    case Activation::relu:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::celu:
      return x > 0.0 ? 1.0 : std::exp(x);
    case Activation::tanh_fn: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::linear:
      return 1.0;
  }
  return 1.0;
}

inline Vec activation_forward(Activation k, std::span<const double> x) {
  if (!all_finite(x)) throw InvalidInput("activation: non-finite input");
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = activation_value(k, x[i]);
  return y;
}

inline Vec activation_derivative(Activation k, std::span<const double> x) {
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = activation_slope(k, x[i]);
  return y;
}

struct DenseLayer {
  Matrix w;  // out x in
  Vec b;     // out
  Activation act = Activation::linear;
};

struct QpTemplate {
  double q_scale = 0.1;   // Q = q_scale * I
  bool learned_b = true;  // b read from the tail of theta
  Vec fixed_b;            // used when learned_b == false
};

// Fixed-shape pipeline: dense stack -> theta -> reshape to A (m x n)
// [-> condition clamp] -> equality QP -> softmax.
struct Network {
  std::vector<DenseLayer> layers;
  std::size_t out_m = 0;
  std::size_t out_n = 0;
  DefenseConfig defense = DefenseConfig::off();
  QpTemplate qp;

  std::size_t input_dim() const { return layers.front().w.cols(); }
  std::size_t theta_dim() const { return layers.back().w.rows(); }

  void validate() const {
    if (layers.empty()) throw InvalidInput("Network: no layers");
    for (std::size_t l = 0; l + 1 < layers.size(); ++l)
      if (layers[l + 1].w.cols() != layers[l].w.rows())
        throw InvalidInput("Network: layer widths do not chain");
    const std::size_t want =
        out_m * out_n + (qp.learned_b ? out_m : 0);
    if (theta_dim() != want)
      throw InvalidInput("Network: head width does not match reshape shape");
    if (!qp.learned_b && qp.fixed_b.size() != out_m)
      throw InvalidInput("Network: fixed b has wrong length");
  }
};

// Seeded MLP with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init.
inline Network make_mlp(std::size_t input_dim,
                        const std::vector<std::size_t>& hidden,
                        Activation act, std::size_t m, std::size_t n,
                        bool learned_b, double q_scale, std::uint64_t seed) {
  Network net;
  net.out_m = m;
  net.out_n = n;
  net.qp.q_scale = q_scale;
  net.qp.learned_b = learned_b;
  if (!learned_b) net.qp.fixed_b.assign(m, 0.0);

  Rng root(seed);
  std::size_t in = input_dim;
  std::vector<std::size_t> widths = hidden;
  widths.push_back(m * n + (learned_b ? m : 0));
  for (std::size_t l = 0; l < widths.size(); ++l) {
    Rng r = root.split(l);
    DenseLayer layer;
    layer.w = Matrix(widths[l], in);
    layer.b.assign(widths[l], 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& v : layer.w.entries()) v = r.uniform(-scale, scale);
    for (double& v : layer.b) v = r.uniform(-scale, scale);
    layer.act = (l + 1 == widths.size()) ? Activation::linear : act;
    net.layers.push_back(std::move(layer));
    in = widths[l];
  }
  net.validate();
  return net;
}

// Cached forward pass. Re-running forward() on the same input reproduces
// every stage bit-for-bit (all operations are deterministic and pure).
struct Tape {
  Vec input;
  std::vector<Vec> pre;   // pre-activations per layer
  std::vector<Vec> post;  // activations per layer
  Vec theta;
  Matrix a_raw;     // reshape(theta)
  Matrix a;         // matrix consumed by the QP layer (post-defense)
  std::optional<DefenseResult> defense;
  Vec b_qp;
  QpSolution qp;
  Vec qp_out;  // primal solution, NaN-filled on failure
  Vec probs;   // softmax(qp_out)
  bool nonfinite = false;
};

inline Vec softmax(std::span<const double> x) {
  Vec p(x.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    p[i] = std::exp(x[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

inline Tape forward(const Network& net, std::span<const double> u) {
  net.validate();
  if (u.size() != net.input_dim())
    throw InvalidInput("forward: input dimension mismatch");
  if (!all_finite(u)) throw InvalidInput("forward: non-finite input");

  Tape t;
  t.input.assign(u.begin(), u.end());
  Vec cur = t.input;
  for (const DenseLayer& layer : net.layers) {
    Vec z = matvec(layer.w, cur);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += layer.b[i];
    t.pre.push_back(z);
    Vec a(z.size());
    for (std::size_t i = 0; i < z.size(); ++i)
      a[i] = activation_value(layer.act, z[i]);
    t.post.push_back(a);
    cur = std::move(a);
  }
  t.theta = t.post.back();

  const std::size_t m = net.out_m, n = net.out_n;
  auto fail = [&] {
    t.nonfinite = true;
    t.qp_out.assign(n, std::numeric_limits<double>::quiet_NaN());
    t.probs.assign(n, std::numeric_limits<double>::quiet_NaN());
  };

  t.a_raw = Matrix(m, n, Vec(t.theta.begin(), t.theta.begin() + m * n));
  t.b_qp = net.qp.learned_b ? Vec(t.theta.begin() + m * n, t.theta.end())
                            : net.qp.fixed_b;
  if (!all_finite(t.theta)) {
    t.a = t.a_raw;
    fail();
    return t;
  }

  if (net.defense.enabled) {
    try {
      t.defense = clamp_condition(t.a_raw, net.defense);
      t.a = t.defense->a_prime;
    } catch (const ZeroMatrix&) {
      // A zero matrix has no scale to restore; the defense cannot repair it.
      t.a = t.a_raw;
      fail();
      return t;
    }
  } else {
    t.a = t.a_raw;
  }

  QpProblem p{net.qp.q_scale * Matrix::identity(n), Vec(n, 0.0), t.a, t.b_qp};
  t.qp = solve_eq_qp(p);
  t.qp_out = t.qp.z;
  if (t.qp.status != QpStatus::solved || !all_finite(t.qp_out)) {
    fail();
    return t;
  }
  t.probs = softmax(t.qp_out);
  t.nonfinite = !all_finite(t.probs);
  return t;
}

// ---- SVD backward ----
//
// Gradient of L through A' = U diag(h(sigma)) V^T where (U, sigma, V^T) is
// the thin SVD of A and h is a differentiable map of the spectrum
// (sigma_jac(i,j) = dh_i/dsigma_j). Uses the standard omega-rotation
// differential; the 1/(sigma_q^2 - sigma_p^2) factors are broadened to
// sign/max(|.|, eps_broad) so repeated singular values stay finite.
inline Matrix svd_backward(const SvdFactors& f,
                           std::span<const double> sigma_mod,
                           const Matrix& sigma_jac, const Matrix& grad_out,
                           double eps_broad = kEpsBroad) {
  const std::size_t m = f.u.rows();
  const std::size_t n = f.vt.cols();
  const std::size_t r = f.sigma.size();
  if (grad_out.rows() != m || grad_out.cols() != n)
    throw InvalidInput("svd_backward: grad shape mismatch");
  if (sigma_mod.size() != r || sigma_jac.rows() != r || sigma_jac.cols() != r)
    throw InvalidInput("svd_backward: spectrum shape mismatch");

  const Matrix ug = f.u.transpose() * grad_out;  // r x n
  const Matrix mcoef = ug * f.vt.transpose();    // M = U^T G' V, r x r

  // Rotation term: C_pq = [s_q (M_pq h_q - M_qp h_p)
  //                        + s_p (M_qp h_q - M_pq h_p)] / (s_q^2 - s_p^2)
  Matrix c(r, r);
  for (std::size_t p = 0; p < r; ++p) {
    for (std::size_t q = 0; q < r; ++q) {
      if (p == q) continue;
      const double sp = f.sigma[p], sq = f.sigma[q];
      const double num = sq * (mcoef(p, q) * sigma_mod[q] - mcoef(q, p) * sigma_mod[p]) +
                         sp * (mcoef(q, p) * sigma_mod[q] - mcoef(p, q) * sigma_mod[p]);
      double den = sq * sq - sp * sp;
      const double sign = den >= 0.0 ? 1.0 : -1.0;
      den = sign * std::max(std::fabs(den), eps_broad);
      c(p, q) = num / den;
    }
  }

  // Spectrum term folded into the diagonal of C: sbar = J_h^T diag(M).
  for (std::size_t j = 0; j < r; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < r; ++i) s += sigma_jac(i, j) * mcoef(i, i);
    c(j, j) = s;
  }

  Matrix grad = f.u * c * f.vt;

  // Guarded reciprocal spectrum for the subspace (projector) terms.
  const double cutoff =
      static_cast<double>(std::max(m, n)) *
      std::numeric_limits<double>::epsilon() * f.sigma_max();
  Vec hs_inv(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    if (f.sigma[i] > cutoff && f.sigma[i] > 0.0)
      hs_inv[i] = sigma_mod[i] / f.sigma[i];

  if (r < m) {
    // (I - U U^T) G' V diag(h/sigma) V^T
    Matrix gv = grad_out * f.vt.transpose();         // m x r
    Matrix ugv = f.u * (f.u.transpose() * gv);       // projection onto U
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t k = 0; k < r; ++k)
        gv(i, k) = (gv(i, k) - ugv(i, k)) * hs_inv[k];
    grad = grad + gv * f.vt;
  }
  if (r < n) {
    // U diag(h/sigma) U^T G' (I - V V^T)
    Matrix ug2 = ug;  // r x n
    Matrix ugvv = (ug2 * f.vt.transpose()) * f.vt;
    for (std::size_t k = 0; k < r; ++k)
      for (std::size_t j = 0; j < n; ++j)
        ug2(k, j) = (ug2(k, j) - ugvv(k, j)) * hs_inv[k];
    grad = grad + f.u * ug2;
  }
  return grad;
}

// Backward through the condition clamp. Exact pass-through when the clamp
// was inactive; otherwise the clamped values' sensitivity flows to
// sigma_max through the floor sigma_max/B.
inline Matrix defense_backward(const DefenseResult& d, double bound_b,
                               const Matrix& grad_out,
                               double eps_broad = kEpsBroad) {
  if (!d.report.clamped) return grad_out;
  const std::size_t r = d.factors.sigma.size();
  Matrix jac(r, r);
  for (std::size_t i = 0; i < r; ++i) {
    if (d.sigma_clamped[i] > d.factors.sigma[i]) {
      jac(i, 0) = 1.0 / bound_b;  // h_i = sigma_1 / B
    } else {
      jac(i, i) = 1.0;
    }
  }
  return svd_backward(d.factors, d.sigma_clamped, jac, grad_out, eps_broad);
}

struct Grads {
  std::vector<Matrix> w;
  std::vector<Vec> b;
  Vec input;
};

namespace detail {

inline Grads dense_chain_backward(const Network& net, const Tape& t,
                                  Vec grad_theta) {
  Grads g;
  g.w.resize(net.layers.size());
  g.b.resize(net.layers.size());
  Vec d = std::move(grad_theta);
  for (std::size_t l = net.layers.size(); l-- > 0;) {
    const DenseLayer& layer = net.layers[l];
    Vec dz(d.size());
    for (std::size_t i = 0; i < d.size(); ++i)
      dz[i] = d[i] * activation_slope(layer.act, t.pre[l][i]);
    const Vec& below = (l == 0) ? t.input : t.post[l - 1];
    g.w[l] = outer(dz, below);
    g.b[l] = dz;
    d = matTvec(layer.w, dz);
  }
  g.input = std::move(d);
  return g;
}

}  // namespace detail

// Backward from a gradient on the deployed matrix A (and optionally on the
// learned b). Used by attack losses that act on the matrix directly.
inline Grads backward_from_a(const Network& net, const Tape& t,
                             const Matrix& grad_a,
                             std::span<const double> grad_b = {}) {
  if (t.nonfinite)
    throw NonFiniteForward("backward_from_a: forward was non-finite");
  Matrix grad_raw =
      (net.defense.enabled && t.defense)
          ? defense_backward(*t.defense, net.defense.bound_b, grad_a)
          : grad_a;

  const std::size_t m = net.out_m, n = net.out_n;
  Vec grad_theta(net.theta_dim(), 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) grad_theta[i * n + j] = grad_raw(i, j);
  if (!grad_b.empty()) {
    if (!net.qp.learned_b)
      throw InvalidInput("backward_from_a: grad_b given but b is fixed");
    for (std::size_t i = 0; i < m; ++i) grad_theta[m * n + i] = grad_b[i];
  }
  return detail::dense_chain_backward(net, t, std::move(grad_theta));
}

// Backward from a gradient on the QP output (the primal solution z).
inline Grads backward_from_qp(const Network& net, const Tape& t,
                              std::span<const double> grad_qp_out) {
  if (t.nonfinite)
    throw NonFiniteForward("backward_from_qp: forward was non-finite");
  QpProblem p{net.qp.q_scale * Matrix::identity(net.out_n),
              Vec(net.out_n, 0.0), t.a, t.b_qp};
  QpGradients qg = backward_eq_qp(p, t.qp, grad_qp_out);
  return backward_from_a(net, t, qg.d_a,
                         net.qp.learned_b ? std::span<const double>(qg.d_b)
                                          : std::span<const double>{});
}

// Backward from a gradient on the softmax probabilities.
inline Grads backward(const Network& net, const Tape& t,
                      std::span<const double> grad_probs) {
  if (t.nonfinite)
    throw NonFiniteForward("backward: forward was non-finite");
  const Vec& p = t.probs;
  const double inner = dot(grad_probs, p);
  Vec grad_qp(p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    grad_qp[i] = p[i] * (grad_probs[i] - inner);
  return backward_from_qp(net, t, grad_qp);
}

struct CrossEntropy {
  double loss;
  Vec grad_qp_out;  // fused softmax + CE gradient
};

inline CrossEntropy softmax_cross_entropy(const Tape& t, std::size_t label) {
  if (label >= t.probs.size())
    throw InvalidInput("softmax_cross_entropy: label out of range");
  CrossEntropy ce;
  ce.loss = -std::log(std::max(t.probs[label], 1e-300));
  ce.grad_qp_out = t.probs;
  ce.grad_qp_out[label] -= 1.0;
  return ce;
}

// Forward through the dense stack only, stopping at the reshaped matrix.
// This is the inequality-head entry point used by the Farkas attack.
inline Tape forward_to_matrix(const Network& net, std::span<const double> u) {
  if (u.size() != net.input_dim())
    throw InvalidInput("forward_to_matrix: input dimension mismatch");
  if (!all_finite(u)) throw InvalidInput("forward_to_matrix: non-finite input");
  Tape t;
  t.input.assign(u.begin(), u.end());
  Vec cur = t.input;
  for (const DenseLayer& layer : net.layers) {
    Vec z = matvec(layer.w, cur);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += layer.b[i];
    t.pre.push_back(z);
    Vec a(z.size());
    for (std::size_t i = 0; i < z.size(); ++i)
      a[i] = activation_value(layer.act, z[i]);
    t.post.push_back(a);
    cur = std::move(a);
  }
  t.theta = t.post.back();
  t.nonfinite = !all_finite(t.theta);
  const std::size_t m = net.out_m, n = net.out_n;
  t.a_raw = Matrix(m, n, Vec(t.theta.begin(), t.theta.begin() + m * n));
  t.a = t.a_raw;
  return t;
}

}  // namespace optnan
