#include <gtest/gtest.h>

#include <cmath>

#include "optnan/farkas.hpp"
#include "oracles.hpp"

using namespace optnan;

namespace {

// Hand-checkable infeasible system: x1 <= 1 and x1 >= 2.
FarkasInstance known_infeasible() {
  return FarkasInstance::make(Matrix{{1, 0}, {-1, 0}}, Vec{1, -2});
}

// Residual of min ||Ky - q|| via a Gram-Schmidt projector onto range(K);
// independent of the pseudoinverse path.
double lstsq_residual_oracle(const Matrix& k, const Vec& q) {
  std::vector<Vec> basis;
  for (std::size_t j = 0; j < k.cols(); ++j) {
    Vec c = k.col(j);
    for (const Vec& b : basis) {
      const double proj = dot(c, b);
      for (std::size_t i = 0; i < c.size(); ++i) c[i] -= proj * b[i];
    }
    const double n = norm2(c);
    if (n > 1e-10) {
      for (double& v : c) v /= n;
      basis.push_back(std::move(c));
    }
  }
  Vec r(q.begin(), q.end());
  for (const Vec& b : basis) {
    const double proj = dot(r, b);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= proj * b[i];
  }
  return norm2(r);
}

Network farkas_head(std::uint64_t seed) {
  return make_mlp(4, {16}, Activation::tanh_fn, 2, 2, /*learned_b=*/false,
                  0.1, seed);
}

}  // namespace

TEST(FarkasInstance, StackedShape) {
  const FarkasInstance inst = known_infeasible();
  ASSERT_EQ(inst.k_mat.rows(), 3u);  // n + 1
  ASSERT_EQ(inst.k_mat.cols(), 2u);  // m
  EXPECT_DOUBLE_EQ(inst.k_mat(0, 0), 1.0);   // A^T
  EXPECT_DOUBLE_EQ(inst.k_mat(0, 1), -1.0);
  EXPECT_DOUBLE_EQ(inst.k_mat(2, 0), 1.0);   // b^T
  EXPECT_DOUBLE_EQ(inst.k_mat(2, 1), -2.0);
  EXPECT_DOUBLE_EQ(inst.q_rhs[0], 0.0);
  EXPECT_DOUBLE_EQ(inst.q_rhs[2], -1.0);
}

TEST(PrereqLoss, FullRowRankVanishes) {
  Rng rng(1);
  // A is 3x1, so K = [A^T; b^T] is 2x3 and has full row rank generically.
  const FarkasInstance inst = FarkasInstance::make(
      oracles::random_matrix(rng, 3, 1), oracles::random_vec(rng, 3));
  EXPECT_LE(prereq_loss(inst), 1e-9);
}

TEST(PrereqLoss, ZeroSystem) {
  const FarkasInstance inst = FarkasInstance::make(Matrix(2, 2), Vec{0, 0});
  EXPECT_NEAR(prereq_loss(inst), 1.0, 1e-12);
}

TEST(PrereqLoss, MatchesLeastSquaresOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    // Rank-deficient A via a rank-1 outer product plus a small bump.
    Matrix a = outer(oracles::random_vec(rng, 4), oracles::random_vec(rng, 3));
    const FarkasInstance inst =
        FarkasInstance::make(std::move(a), oracles::random_vec(rng, 4));
    const double got = prereq_loss(inst);
    const double want = lstsq_residual_oracle(inst.k_mat, inst.q_rhs);
    EXPECT_NEAR(got, want, 1e-8);
  }
}

TEST(Optdist, KnownCertificateGivesZero) {
  const OptdistResult od = optdist(known_infeasible());
  EXPECT_TRUE(od.converged);
  EXPECT_LE(od.value, 1e-6);
  // The recovered y should itself be a valid certificate.
  const FarkasCertificate cert =
      verify_infeasible(Matrix{{1, 0}, {-1, 0}}, Vec{1, -2}, od.y_star);
  EXPECT_TRUE(cert.valid);
}

TEST(Optdist, FeasibleSystemStaysPositive) {
  const FarkasInstance inst =
      FarkasInstance::make(Matrix::identity(2), Vec{1, 1});
  const OptdistResult od = optdist(inst);
  EXPECT_GT(od.value, 0.1);
}

TEST(Optdist, BtBSingularButRegularizedFactorizes) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 2 + rng.below(4);
    const std::size_t n = 2 + rng.below(4);
    const FarkasInstance inst = FarkasInstance::make(
        oracles::random_matrix(rng, m, n), oracles::random_vec(rng, m));
    const Matrix kp = pseudoinverse(inst.k_mat);
    const Matrix b = detail::optdist_bmat(kp, inst.k_mat);
    const Matrix btb = b.transpose() * b;

    const Vec ev = oracles::symmetric_eigenvalues(btb);
    EXPECT_LE(ev.back(), 1e-8 * ev.front());

    for (double eta : {1e-8, 1e-6, 1e-4}) {
      Matrix reg = btb;
      for (std::size_t i = 0; i < m; ++i) reg(m + i, m + i) += eta;
      Matrix l;
      EXPECT_TRUE(cholesky_factor(reg, l)) << "eta=" << eta;
    }
  }
}

TEST(VerifyInfeasible, HandExamples) {
  const FarkasCertificate good =
      verify_infeasible(Matrix{{1, 0}, {-1, 0}}, Vec{1, -2}, Vec{1, 1});
  EXPECT_TRUE(good.valid);
  EXPECT_NEAR(good.residual_eq, 0.0, 1e-12);
  EXPECT_NEAR(good.value_bty, -1.0, 1e-12);
  EXPECT_NEAR(good.min_y, 1.0, 1e-12);

  // Feasible identity system: A^T y = 0 with y >= 0 forces y = 0.
  const FarkasCertificate bad =
      verify_infeasible(Matrix::identity(2), Vec{1, 1}, Vec{0, 0});
  EXPECT_FALSE(bad.valid);

  const FarkasCertificate neg =
      verify_infeasible(Matrix{{1, 0}, {-1, 0}}, Vec{1, -2}, Vec{1, -1});
  EXPECT_FALSE(neg.valid);  // y must be non-negative
}

TEST(FarkasLossGrad, MatchesFiniteDifferences) {
  // Value-function derivative of gamma*||r||^2 + (1-gamma)*V_eta, where
  // V_eta is the full (eta-inclusive) Optdist optimal value.
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix a = oracles::random_matrix(rng, 2, 2);
    const Vec b{1, -2};

    auto loss_of = [&](const Matrix& am) {
      const FarkasInstance inst = FarkasInstance::make(am, b);
      Vec r = matvec(inst.k_mat,
                     matvec(pseudoinverse(inst.k_mat), inst.q_rhs));
      for (std::size_t i = 0; i < r.size(); ++i) r[i] -= inst.q_rhs[i];
      const OptdistResult od = optdist(inst);
      double veta = od.value;
      for (std::size_t i = 2; i < od.z_star.size(); ++i)
        veta += inst.eta_reg * od.z_star[i] * od.z_star[i];
      return inst.gamma * dot(r, r) + (1.0 - inst.gamma) * veta;
    };

    const FarkasInstance inst = FarkasInstance::make(a, b);
    const OptdistResult od = optdist(inst);
    const Matrix got = detail::farkas_loss_grad_a(inst, od);
    const Matrix fd = oracles::fd_matrix_grad(loss_of, a, 1e-6);
    EXPECT_LE(oracles::rel_err(got, fd), 2e-4) << "trial " << trial;
  }
}

TEST(FarkasAttack, ZeroRateLeavesFeasibleStart) {
  const Network net = farkas_head(1);
  Rng rng(1);
  Vec u0 = oracles::random_vec(rng, 4);
  const FarkasAttackOutcome out =
      run_farkas_attack(net, u0, Vec{1, -2}, 0.0, 10);
  EXPECT_FALSE(out.attack.success);
  EXPECT_DOUBLE_EQ(out.attack.distortion_l2, 0.0);
}

TEST(FarkasAttack, FindsCertificateOnSmallSystem) {
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const Network net = farkas_head(seed);
    Rng rng(100 + seed);
    Vec u0 = oracles::random_vec(rng, 4);
    const FarkasAttackOutcome out =
        run_farkas_attack(net, u0, Vec{1, -2}, 0.1, 2000);
    if (!out.attack.success) continue;
    ++wins;
    // Soundness: success implies a verified certificate...
    ASSERT_TRUE(out.certificate.valid);
    const Tape t = forward_to_matrix(net, out.attack.u_star);
    const FarkasCertificate again =
        verify_infeasible(t.a_raw, Vec{1, -2}, out.certificate.y);
    EXPECT_TRUE(again.valid);

    // ...and the grid cross-check agrees: no feasible point in a wide box.
    const Matrix& a = t.a_raw;
    bool found_feasible = false;
    for (int xi = -100; xi <= 100 && !found_feasible; ++xi) {
      for (int yi = -100; yi <= 100; ++yi) {
        const double x0 = xi * 0.5, x1 = yi * 0.5;
        const double r0 = a(0, 0) * x0 + a(0, 1) * x1;
        const double r1 = a(1, 0) * x0 + a(1, 1) * x1;
        if (r0 <= 1.0 + 1e-9 && r1 <= -2.0 + 1e-9) {
          found_feasible = true;
          break;
        }
      }
    }
    EXPECT_FALSE(found_feasible);
  }
  EXPECT_GE(wins, 3);
}
