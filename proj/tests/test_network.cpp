#include <gtest/gtest.h>

#include <cmath>

#include "optnan/network.hpp"
#include "oracles.hpp"

using namespace optnan;

namespace {

Network tiny_net(Activation act, std::uint64_t seed, bool defended = false,
                 double bound = 2.0) {
  Network net = make_mlp(6, {8}, act, 3, 4, /*learned_b=*/true, 0.1, seed);
  if (defended) net.defense = DefenseConfig::with_bound(bound);
  return net;
}

}  // namespace

TEST(Activation, ReluCeluTanh) {
  const Vec r = activation_forward(Activation::relu, Vec{-1, 2});
  EXPECT_DOUBLE_EQ(r[0], 0.0);
  EXPECT_DOUBLE_EQ(r[1], 2.0);

  EXPECT_DOUBLE_EQ(activation_value(Activation::tanh_fn, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(activation_slope(Activation::tanh_fn, 0.0), 1.0);

  EXPECT_NEAR(activation_value(Activation::celu, -0.5), std::exp(-0.5) - 1.0,
              1e-15);
  EXPECT_NEAR(activation_slope(Activation::celu, -0.5), std::exp(-0.5), 1e-15);
}

TEST(Activation, DerivativesMatchFiniteDifferences) {
  Rng rng(4);
  for (Activation act :
       {Activation::relu, Activation::celu, Activation::tanh_fn}) {
    for (int i = 0; i < 50; ++i) {
      double x = rng.uniform(-3.0, 3.0);
      if (act == Activation::relu && std::fabs(x) < 1e-3) x += 0.01;
      const double h = 1e-6;
      const double fd = (activation_value(act, x + h) -
                         activation_value(act, x - h)) /
                        (2 * h);
      EXPECT_NEAR(activation_slope(act, x), fd, 1e-7);
    }
  }
}

TEST(Forward, ZeroWeightsYieldBiases) {
  Network net = tiny_net(Activation::relu, 1);
  for (auto& layer : net.layers)
    for (double& v : layer.w.entries()) v = 0.0;
  const Tape t = forward(net, Vec(6, 0.7));

  // theta = act-chained biases; with a single hidden layer the head sees
  // relu(b0) and outputs W1*relu(b0) + b1 = b1 under zero weights.
  for (std::size_t i = 0; i < t.theta.size(); ++i)
    EXPECT_DOUBLE_EQ(t.theta[i], net.layers.back().b[i]);
}

TEST(Forward, ProbsNormalizedWhenFinite) {
  const Network net = tiny_net(Activation::relu, 2);
  Rng rng(2);
  const Tape t = forward(net, oracles::random_vec(rng, 6));
  ASSERT_FALSE(t.nonfinite);
  double sum = 0.0;
  for (double p : t.probs) sum += p;
  EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST(Forward, SingularMatrixFlagsNonFinite) {
  Network net = tiny_net(Activation::relu, 3);
  // Zero weights and biases in the head rows that produce row 0 of A.
  DenseLayer& head = net.layers.back();
  for (std::size_t j = 0; j < net.out_n; ++j) {
    head.b[j] = 0.0;
    for (std::size_t k = 0; k < head.w.cols(); ++k) head.w(j, k) = 0.0;
  }
  Rng rng(3);
  const Tape t = forward(net, oracles::random_vec(rng, 6));
  EXPECT_TRUE(t.nonfinite);
  EXPECT_EQ(t.qp.status, QpStatus::singular_kkt);
  EXPECT_FALSE(all_finite(t.qp_out));
  EXPECT_THROW(backward_from_qp(net, t, Vec(net.out_n, 0.0)),
               NonFiniteForward);
}

TEST(Forward, DeterministicReplay) {
  const Network net = tiny_net(Activation::celu, 5, true);
  Rng rng(5);
  const Vec u = oracles::random_vec(rng, 6);
  const Tape t1 = forward(net, u);
  const Tape t2 = forward(net, u);
  EXPECT_EQ(t1.theta, t2.theta);
  EXPECT_EQ(t1.a, t2.a);
  EXPECT_EQ(t1.qp_out, t2.qp_out);
  EXPECT_EQ(t1.probs, t2.probs);
}

TEST(Backward, DenseLayerClosedForm) {
  // Single linear layer, loss = ||W u||^2 / 2  =>  dW = (W u) u^T.
  Network net;
  net.out_m = 2;
  net.out_n = 3;
  net.qp.learned_b = false;
  net.qp.fixed_b = Vec{1, 1};
  DenseLayer layer;
  Rng rng(6);
  layer.w = oracles::random_matrix(rng, 6, 4);
  layer.b = Vec(6, 0.0);
  layer.act = Activation::linear;
  net.layers.push_back(layer);

  const Vec u = oracles::random_vec(rng, 4);
  const Tape t = forward_to_matrix(net, u);
  const Grads g = backward_from_a(net, t, t.a_raw);  // grad of ||A||_F^2/2

  const Vec wu = matvec(layer.w, u);
  const Matrix want = outer(wu, u);
  EXPECT_LE(oracles::rel_err(g.w[0], want), 1e-12);
}

TEST(Backward, ReluBlocksNegativePreActivation) {
  Network net = tiny_net(Activation::relu, 7);
  Rng rng(7);
  const Vec u = oracles::random_vec(rng, 6);
  const Tape t = forward(net, u);
  ASSERT_FALSE(t.nonfinite);
  const CrossEntropy ce = softmax_cross_entropy(t, 0);
  const Grads g = backward_from_qp(net, t, ce.grad_qp_out);
  for (std::size_t i = 0; i < t.pre[0].size(); ++i) {
    if (t.pre[0][i] < 0.0) {
      EXPECT_DOUBLE_EQ(g.b[0][i], 0.0);
    }
  }
}

TEST(Backward, FullNetworkMatchesFiniteDifferences) {
  for (bool defended : {false, true}) {
    const Network net = tiny_net(Activation::tanh_fn, 11, defended, 2.0);
    Rng rng(11);
    const Vec u0 = oracles::random_vec(rng, 6);
    const Tape t0 = forward(net, u0);
    ASSERT_FALSE(t0.nonfinite);
    if (defended) {
      ASSERT_TRUE(t0.defense->report.clamped);
    }

    const std::size_t label = 1;
    auto loss = [&](const Vec& u) {
      return softmax_cross_entropy(forward(net, u), label).loss;
    };
    const CrossEntropy ce = softmax_cross_entropy(t0, label);
    const Vec grad_u = backward_from_qp(net, t0, ce.grad_qp_out).input;

    for (int trial = 0; trial < 5; ++trial) {
      Vec dir = oracles::random_vec(rng, 6);
      const double fd = oracles::fd_directional(loss, u0, dir, 1e-5);
      const double an = dot(grad_u, dir);
      EXPECT_LE(oracles::rel_err(an, fd), 1e-4) << "defended=" << defended;
    }
  }
}

TEST(Backward, WeightGradientsMatchFiniteDifferences) {
  const Network base = tiny_net(Activation::celu, 13);
  Rng rng(13);
  const Vec u = oracles::random_vec(rng, 6);
  const std::size_t label = 2;

  const Tape t = forward(base, u);
  ASSERT_FALSE(t.nonfinite);
  const CrossEntropy ce = softmax_cross_entropy(t, label);
  const Grads g = backward_from_qp(base, t, ce.grad_qp_out);

  // Spot-check a handful of weight coordinates in each layer.
  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    for (int k = 0; k < 4; ++k) {
      const std::size_t i = rng.below(base.layers[l].w.rows());
      const std::size_t j = rng.below(base.layers[l].w.cols());
      const double h = 1e-6;
      Network up = base, dn = base;
      up.layers[l].w(i, j) += h;
      dn.layers[l].w(i, j) -= h;
      const double fd = (softmax_cross_entropy(forward(up, u), label).loss -
                         softmax_cross_entropy(forward(dn, u), label).loss) /
                        (2 * h);
      EXPECT_LE(oracles::rel_err(g.w[l](i, j), fd), 1e-4)
          << "layer " << l << " (" << i << "," << j << ")";
    }
  }
}

TEST(SvdBackward, IdentitySpectrumMapIsPassThrough) {
  Rng rng(17);
  for (auto [m, n] : {std::pair<std::size_t, std::size_t>{4, 4}, {3, 5}, {6, 2}}) {
    const Matrix a = oracles::random_matrix(rng, m, n);
    const SvdFactors f = svd(a);
    const Matrix grad_out = oracles::random_matrix(rng, m, n);
    const Matrix jac = Matrix::identity(f.sigma.size());
    const Matrix got = svd_backward(f, f.sigma, jac, grad_out);
    EXPECT_LE(oracles::rel_err(got, grad_out), 1e-10);
  }
}

TEST(SvdBackward, ClampGradientMatchesFiniteDifferences) {
  const Matrix a{{4, 0}, {0, 1}};
  const DefenseConfig cfg = DefenseConfig::with_bound(2.0);
  const DefenseResult d = clamp_condition(a, cfg);
  ASSERT_TRUE(d.report.clamped);

  Rng rng(19);
  const Matrix grad_out = oracles::random_matrix(rng, 2, 2);
  const Matrix got = defense_backward(d, cfg.bound_b, grad_out);

  const Matrix fd = oracles::fd_matrix_grad(
      [&](const Matrix& m) {
        const DefenseResult r = clamp_condition(m, cfg);
        double s = 0.0;
        for (std::size_t i = 0; i < 2; ++i)
          for (std::size_t j = 0; j < 2; ++j)
            s += grad_out(i, j) * r.a_prime(i, j);
        return s;
      },
      a, 1e-6);
  EXPECT_LE(oracles::rel_err(got, fd), 1e-4);
}

TEST(SvdBackward, NearDegenerateSpectrumStaysFinite) {
  Rng rng(23);
  const Vec s{1.0, 1.0 + 1e-12, 0.5};  // top pair numerically repeated
  Vec sorted = s;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  const Matrix a = oracles::matrix_with_spectrum(rng, 4, 3, sorted);
  const SvdFactors f = svd(a);
  const Matrix grad_out = oracles::random_matrix(rng, 4, 3);
  const Matrix jac = Matrix::identity(3);
  Vec mod = f.sigma;
  mod[2] = 0.9;  // arbitrary spectrum modification
  const Matrix got = svd_backward(f, mod, jac, grad_out);
  EXPECT_TRUE(got.is_finite());
}

TEST(SvdBackward, DefenseInactiveIsExactPassThrough) {
  const Matrix a{{3, 0}, {0, 1}};
  const DefenseResult d = clamp_condition(a, DefenseConfig::with_bound(10.0));
  EXPECT_FALSE(d.report.clamped);
  EXPECT_EQ(d.a_prime, a);

  Matrix g{{1, 2}, {3, 4}};
  const Matrix back = defense_backward(d, 10.0, g);
  EXPECT_EQ(back, g);
}

TEST(CrossEntropyLoss, GradientIsProbsMinusOneHot) {
  const Network net = tiny_net(Activation::relu, 29);
  Rng rng(29);
  const Tape t = forward(net, oracles::random_vec(rng, 6));
  ASSERT_FALSE(t.nonfinite);
  const CrossEntropy ce = softmax_cross_entropy(t, 1);
  EXPECT_NEAR(ce.loss, -std::log(t.probs[1]), 1e-12);
  for (std::size_t i = 0; i < t.probs.size(); ++i)
    EXPECT_NEAR(ce.grad_qp_out[i], t.probs[i] - (i == 1 ? 1.0 : 0.0), 1e-15);
}

TEST(BackwardFromProbs, MatchesFiniteDifferences) {
  const Network net = tiny_net(Activation::tanh_fn, 31);
  Rng rng(31);
  const Vec u0 = oracles::random_vec(rng, 6);
  const Vec c = oracles::random_vec(rng, 4);

  const Tape t0 = forward(net, u0);
  ASSERT_FALSE(t0.nonfinite);
  const Vec grad_u = backward(net, t0, c).input;

  auto loss = [&](const Vec& u) {
    const Tape t = forward(net, u);
    return dot(c, t.probs);
  };
  for (int trial = 0; trial < 5; ++trial) {
    const Vec dir = oracles::random_vec(rng, 6);
    const double fd = oracles::fd_directional(loss, u0, dir, 1e-5);
    EXPECT_LE(oracles::rel_err(dot(grad_u, dir), fd), 1e-4);
  }
}
