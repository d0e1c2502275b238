#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include <linkgp/design.hpp>
#include <linkgp/dynamics.hpp>
#include <linkgp/gp.hpp>
#include <linkgp/gp_io.hpp>
#include <linkgp/kernel.hpp>

#include "oracles.hpp"

using namespace linkgp;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

Eigen::MatrixXd random_points(std::mt19937_64& rng, Eigen::Index n, Eigen::Index p, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Eigen::MatrixXd X(n, p);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index k = 0; k < p; ++k) X(i, k) = u(rng);
    return X;
}

// Emulator at fixed lengthscales with the profile estimates plugged in.
GpEmulator fixed_theta_emulator(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& theta) {
    const SeKernelParams params(theta);
    const ProfileLikelihood pl = profile_loglik(X, y, params);
    return GpEmulator::assemble(X, y, params, pl.beta, pl.tau2);
}

}  // namespace

// ---- kernel ----

TEST(Kernel, ZeroDistanceIsOne) {
    EXPECT_DOUBLE_EQ(kernel_eval(vec({0.3, -2.0}), vec({0.3, -2.0}), SeKernelParams(vec({0.5, 7.0}))), 1.0);
}

TEST(Kernel, DirectSubstitution) {
    EXPECT_NEAR(kernel_eval(vec({0.0}), vec({1.0}), SeKernelParams(vec({1.0}))), std::exp(-1.0), 1e-15);
    EXPECT_NEAR(kernel_eval(vec({0.0, 0.0}), vec({1.0, 2.0}), SeKernelParams(vec({1.0, 4.0}))), 0.135335283236613,
                1e-12);
}

TEST(Kernel, SymmetricAndBounded) {
    std::mt19937_64 rng(3);
    const SeKernelParams params(vec({0.7, 2.0, 0.1}));
    for (int t = 0; t < 50; ++t) {
        const Eigen::MatrixXd P = random_points(rng, 2, 3, -2, 2);
        const double a = kernel_eval(P.row(0).transpose(), P.row(1).transpose(), params);
        const double b = kernel_eval(P.row(1).transpose(), P.row(0).transpose(), params);
        EXPECT_EQ(a, b);
        EXPECT_GT(a, 0.0);
        EXPECT_LE(a, 1.0);
    }
}

TEST(Kernel, DimensionMismatchThrows) {
    EXPECT_THROW(kernel_eval(vec({0.0, 1.0}), vec({0.0}), SeKernelParams(vec({1.0, 1.0}))), InvalidArgument);
    EXPECT_THROW(kernel_eval(vec({0.0, 1.0}), vec({0.0, 1.0}), SeKernelParams(vec({1.0}))), InvalidArgument);
}

TEST(Kernel, NonPositiveLengthscaleRejected) {
    EXPECT_THROW(SeKernelParams(vec({1.0, 0.0})), InvalidArgument);
    EXPECT_THROW(SeKernelParams(vec({-1.0})), InvalidArgument);
}

TEST(KernelMatrix, SinglePoint) {
    Eigen::MatrixXd X(1, 2);
    X << 0.4, 0.1;
    const auto fac = build_kernel_matrix(X, SeKernelParams(vec({1.0, 1.0})));
    ASSERT_EQ(fac.matrix.rows(), 1);
    EXPECT_DOUBLE_EQ(fac.matrix(0, 0), 1.0 + 1e-8);
    EXPECT_DOUBLE_EQ(fac.jitter, 1e-8);
}

TEST(KernelMatrix, DuplicateRowsRescuedByJitter) {
    Eigen::MatrixXd X(2, 1);
    X << 0.5, 0.5;
    const auto fac = build_kernel_matrix(X, SeKernelParams(vec({1.0})));
    EXPECT_GE(fac.jitter, 1e-8);
    EXPECT_DOUBLE_EQ(fac.matrix(0, 1), 1.0);
    EXPECT_DOUBLE_EQ(fac.matrix(0, 0), 1.0 + fac.jitter);
    const Eigen::MatrixXd R = fac.lower * fac.lower.transpose();
    EXPECT_LT((R - fac.matrix).norm(), 1e-12);
}

TEST(KernelMatrix, FactorReconstructs) {
    std::mt19937_64 rng(11);
    const Eigen::MatrixXd X = random_points(rng, 5, 2);
    const auto fac = build_kernel_matrix(X, SeKernelParams(vec({1.0, 1.0})));
    const Eigen::MatrixXd K = oracle::gram(X, vec({1.0, 1.0}), fac.jitter);
    EXPECT_LT((fac.lower * fac.lower.transpose() - K).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(KernelMatrix, SymmetricUnitDiagonalBeforeJitter) {
    std::mt19937_64 rng(12);
    const Eigen::MatrixXd X = random_points(rng, 12, 3);
    const Eigen::MatrixXd K = kernel_matrix(X, SeKernelParams(vec({0.3, 1.0, 2.0})));
    EXPECT_EQ((K - K.transpose()).cwiseAbs().maxCoeff(), 0.0);
    for (Eigen::Index i = 0; i < K.rows(); ++i) EXPECT_EQ(K(i, i), 1.0);
}

TEST(KernelMatrix, LadderExhaustionReportsAttempts) {
    // Forty nearly coincident points at a huge lengthscale: numerically rank one.
    std::mt19937_64 rng(5);
    const Eigen::MatrixXd X = random_points(rng, 40, 1);
    JitterLadder ladder{1e-18, 1e-16, 10.0};
    try {
        build_kernel_matrix(X, SeKernelParams(vec({1e8})), ladder);
        FAIL() << "expected a factorization failure";
    } catch (const FactorizationFailure& e) {
        EXPECT_GE(e.attempted_jitters.size(), 2u);
        EXPECT_DOUBLE_EQ(e.attempted_jitters.front(), 1e-18);
    }
}

// ---- profile likelihood ----

TEST(ProfileLikelihood, ExactLinearTrendHitsFloor) {
    std::mt19937_64 rng(21);
    const Eigen::MatrixXd X = random_points(rng, 10, 2);
    const Eigen::VectorXd beta_star = vec({1.5, -2.0, 0.25});
    const Eigen::VectorXd y = oracle::basis(X) * beta_star;
    const ProfileLikelihood pl = profile_loglik(X, y, SeKernelParams(vec({0.5, 0.5})));
    EXPECT_LT((pl.beta.coefficients() - beta_star).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_TRUE(pl.tau2_clamped);
    EXPECT_EQ(pl.tau2, kTau2Floor);
}

TEST(ProfileLikelihood, HandSizedMatchesDenseOracle) {
    Eigen::MatrixXd X(3, 1);
    X << 0.0, 0.4, 1.0;
    const Eigen::VectorXd y = vec({0.3, -0.2, 0.9});
    const Eigen::VectorXd theta = vec({0.6});
    const ProfileLikelihood pl = profile_loglik(X, y, SeKernelParams(theta));
    const oracle::Gls g = oracle::gls(X, y, theta, pl.jitter);
    EXPECT_LT((pl.beta.coefficients() - g.beta).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_NEAR(pl.tau2, g.tau2, 1e-8);
}

TEST(ProfileLikelihood, EqualsFullLikelihoodAtEstimates) {
    std::mt19937_64 rng(22);
    std::uniform_real_distribution<double> th(0.1, 3.0);
    for (int t = 0; t < 20; ++t) {
        const Eigen::MatrixXd X = random_points(rng, 9, 2);
        Eigen::VectorXd y(9);
        for (Eigen::Index i = 0; i < 9; ++i) y[i] = std::sin(3.0 * X(i, 0)) + X(i, 1) * X(i, 1);
        const Eigen::VectorXd theta = vec({th(rng), th(rng)});
        const ProfileLikelihood pl = profile_loglik(X, y, SeKernelParams(theta));
        const double full = oracle::full_loglik(X, y, theta, pl.jitter, pl.beta.coefficients(), pl.tau2);
        EXPECT_NEAR(pl.value, full, 1e-8) << "trial " << t;
    }
}

TEST(ProfileLikelihood, InsufficientData) {
    Eigen::MatrixXd X(3, 2);
    X << 0, 0, 1, 0, 0, 1;
    EXPECT_THROW(profile_loglik(X, vec({1, 2, 3}), SeKernelParams(vec({1, 1}))), InsufficientData);
}

// ---- fit ----

TEST(Fit, ConstantOutputs) {
    std::mt19937_64 rng(31);
    const Eigen::MatrixXd X = random_points(rng, 8, 2);
    const Eigen::VectorXd y = Eigen::VectorXd::Constant(8, 2.5);
    const GpEmulator gp = fit(X, y);
    EXPECT_NEAR(gp.trend().intercept(), 2.5, 1e-8);
    EXPECT_LT(gp.trend().coefficients().tail(2).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_EQ(gp.tau2(), kTau2Floor);
    for (int t = 0; t < 10; ++t) {
        const Eigen::MatrixXd q = random_points(rng, 1, 2, -1, 2);
        const auto p = predict(gp, q.row(0).transpose());
        EXPECT_NEAR(p.mean, 2.5, 1e-8);
        EXPECT_LT(p.variance, 1e-10);
    }
}

TEST(Fit, LotkaVolterraFlowMapHeldOut) {
    const OdeSystem sys = lotka_volterra();
    const Eigen::MatrixXd X = maximin_lhs({24, sys.domain, 7});
    const FlowMapDataset train = generate_flowmap_data(sys, X, 0.01);
    // held-out points from a different LHS
    const Eigen::MatrixXd Xt = maximin_lhs({50, sys.domain, 8, 0});
    const FlowMapDataset test = generate_flowmap_data(sys, Xt, 0.01);
    for (int m = 0; m < 2; ++m) {
        FitOptions fo;
        fo.seed = 100 + m;
        const GpEmulator gp = fit(X, train.outputs.col(m), fo);
        double acc = 0.0;
        for (Eigen::Index i = 0; i < Xt.rows(); ++i) {
            const double e = predict(gp, Xt.row(i).transpose()).mean - test.outputs(i, m);
            acc += e * e;
        }
        EXPECT_LT(std::sqrt(acc / static_cast<double>(Xt.rows())), 1e-3) << "coordinate " << m;
    }
}

TEST(Fit, MoreRestartsNeverWorse) {
    std::mt19937_64 rng(33);
    for (int t = 0; t < 5; ++t) {
        const Eigen::MatrixXd X = random_points(rng, 12, 2);
        Eigen::VectorXd y(12);
        for (Eigen::Index i = 0; i < 12; ++i) y[i] = std::sin(6.0 * X(i, 0)) * std::cos(4.0 * X(i, 1));
        FitOptions a, b;
        a.seed = b.seed = 40 + t;
        a.restarts = 3;
        b.restarts = 6;
        EXPECT_GE(fit(X, y, b).fit_summary().log_likelihood, fit(X, y, a).fit_summary().log_likelihood);
    }
}

TEST(Fit, DeterministicGivenSeed) {
    std::mt19937_64 rng(34);
    const Eigen::MatrixXd X = random_points(rng, 10, 2);
    Eigen::VectorXd y = X.col(0).array().exp() + X.col(1).array().square();
    FitOptions fo;
    fo.seed = 9;
    const GpEmulator a = fit(X, y, fo), b = fit(X, y, fo);
    EXPECT_EQ(a.kernel().lengthscales(), b.kernel().lengthscales());
    EXPECT_EQ(a.tau2(), b.tau2());
}

TEST(Fit, RespectsBounds) {
    std::mt19937_64 rng(35);
    const Eigen::MatrixXd X = random_points(rng, 10, 2);
    const Eigen::VectorXd y = X.col(0) * 3.0 + X.col(1).array().sin().matrix();
    FitOptions fo;
    fo.bounds = {{0.5, 0.6}, {2.0, 3.0}};
    const GpEmulator gp = fit(X, y, fo);
    EXPECT_GE(gp.kernel()[0], 0.5 * (1 - 1e-12));
    EXPECT_LE(gp.kernel()[0], 0.6 * (1 + 1e-12));
    EXPECT_GE(gp.kernel()[1], 2.0 * (1 - 1e-12));
    EXPECT_LE(gp.kernel()[1], 3.0 * (1 + 1e-12));
}

TEST(Fit, BadInputs) {
    Eigen::MatrixXd X(4, 1);
    X << 0, 1, 2, 3;
    Eigen::VectorXd y = vec({0, 1, 2, 3});
    EXPECT_THROW(fit(X, vec({0, 1, 2})), InvalidArgument);
    y[2] = std::nan("");
    EXPECT_THROW(fit(X, y), InvalidArgument);
}

// ---- predict ----

TEST(Predict, InterpolatesTrainingRows) {
    std::mt19937_64 rng(41);
    for (int t = 0; t < 10; ++t) {
        const Eigen::MatrixXd X = random_points(rng, 10, 2);
        Eigen::VectorXd y(10);
        for (Eigen::Index i = 0; i < 10; ++i) y[i] = std::sin(5 * X(i, 0)) + X(i, 1);
        const GpEmulator gp = fit(X, y);
        for (Eigen::Index i = 0; i < 10; ++i) {
            const auto p = predict(gp, X.row(i).transpose());
            EXPECT_LE(std::abs(p.mean - y[i]), 1e-6 * (1 + std::abs(y[i])));
            EXPECT_LE(p.variance, 1e-6 * gp.tau2());
        }
    }
}

TEST(Predict, RevertsToPriorFarAway) {
    std::mt19937_64 rng(42);
    const Eigen::MatrixXd X = random_points(rng, 6, 2);
    const GpEmulator gp = fixed_theta_emulator(X, X.col(0).array().sin().matrix() + X.col(1), vec({0.1, 0.1}));
    const Eigen::VectorXd far = vec({50.0, -40.0});
    const auto p = predict(gp, far);
    EXPECT_NEAR(p.mean, gp.trend().evaluate(far), 1e-10);
    EXPECT_NEAR(p.variance, gp.tau2(), 1e-12 * gp.tau2());
}

TEST(Predict, MatchesDenseOracle) {
    std::mt19937_64 rng(43);
    const Eigen::MatrixXd X = random_points(rng, 5, 2);
    const Eigen::VectorXd y = vec({0.1, -0.4, 0.8, 0.3, 1.1});
    const GpEmulator gp = fixed_theta_emulator(X, y, vec({0.4, 0.9}));
    for (int t = 0; t < 20; ++t) {
        const Eigen::VectorXd x = random_points(rng, 1, 2, -0.5, 1.5).row(0).transpose();
        const auto p = predict(gp, x);
        const auto o = oracle::predict(gp, x);
        EXPECT_NEAR(p.mean, o.mean, 1e-8);
        EXPECT_NEAR(p.variance, std::max(0.0, o.variance), 1e-8);
    }
}

TEST(Predict, VarianceBounds) {
    std::mt19937_64 rng(44);
    const Eigen::MatrixXd X = random_points(rng, 15, 3);
    Eigen::VectorXd y = X.rowwise().sum();
    y = y.array().cos();
    const GpEmulator gp = fit(X, y);
    for (int t = 0; t < 200; ++t) {
        const auto p = predict(gp, random_points(rng, 1, 3, -1, 2).row(0).transpose());
        EXPECT_GE(p.variance, 0.0);
        EXPECT_LE(p.variance, gp.tau2() * (1 + 1e-8));
    }
}

TEST(Predict, ScalingEquivariance) {
    std::mt19937_64 rng(45);
    const Eigen::MatrixXd X = random_points(rng, 8, 2);
    const Eigen::VectorXd y = X.col(0).array().exp().matrix() - X.col(1);
    const double c = -3.5;
    const Eigen::VectorXd theta = vec({0.5, 1.5});
    const GpEmulator a = fixed_theta_emulator(X, y, theta);
    const GpEmulator b = fixed_theta_emulator(X, c * y, theta);
    EXPECT_LT((b.trend().coefficients() - c * a.trend().coefficients()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((b.weights() - c * a.weights()).cwiseAbs().maxCoeff(), 1e-6 * a.weights().cwiseAbs().maxCoeff());
    EXPECT_NEAR(b.tau2(), c * c * a.tau2(), 1e-9 * b.tau2());
    for (int t = 0; t < 10; ++t) {
        const Eigen::VectorXd x = random_points(rng, 1, 2).row(0).transpose();
        const auto pa = predict(a, x), pb = predict(b, x);
        EXPECT_NEAR(pb.mean, c * pa.mean, 1e-8 * (1 + std::abs(pb.mean)));
        EXPECT_NEAR(pb.variance, c * c * pa.variance, 1e-8 * b.tau2());
    }
}

TEST(Predict, DimensionMismatchThrows) {
    std::mt19937_64 rng(46);
    const Eigen::MatrixXd X = random_points(rng, 5, 2);
    const GpEmulator gp = fixed_theta_emulator(X, X.col(0), vec({1, 1}));
    EXPECT_THROW(predict(gp, vec({0.1})), InvalidArgument);
}

TEST(Predict, BatchMatchesPointwise) {
    std::mt19937_64 rng(47);
    const Eigen::MatrixXd X = random_points(rng, 9, 2);
    const GpEmulator gp = fit(X, X.col(0).array().sin().matrix());
    const Eigen::MatrixXd Q = random_points(rng, 30, 2);
    Eigen::VectorXd m, v;
    predict_batch(gp, Q, m, v);
    for (Eigen::Index i = 0; i < Q.rows(); ++i) {
        const auto p = predict(gp, Q.row(i).transpose());
        EXPECT_NEAR(m[i], p.mean, 1e-12);
        EXPECT_NEAR(v[i], p.variance, 1e-12);
    }
}

// ---- invariants and serialization ----

TEST(Emulator, StoredInvariantsHold) {
    std::mt19937_64 rng(51);
    const Eigen::MatrixXd X = random_points(rng, 20, 2);
    const GpEmulator gp = fit(X, X.col(0).array().square().matrix() + X.col(1));
    EXPECT_LT(factor_reconstruction_error(gp), 1e-8);
    EXPECT_LT(weights_residual(gp), 1e-8);
    EXPECT_GE(gp.tau2(), 0.0);
}

TEST(Emulator, JsonRoundTrip) {
    std::mt19937_64 rng(52);
    const Eigen::MatrixXd X = random_points(rng, 12, 3);
    const GpEmulator gp = fit(X, X.rowwise().sum().array().sin().matrix());
    const GpEmulator back = emulator_from_json(nlohmann::json::parse(emulator_to_json(gp).dump()));
    EXPECT_EQ(back.kernel().lengthscales(), gp.kernel().lengthscales());
    EXPECT_EQ(back.jitter(), gp.jitter());
    for (int t = 0; t < 20; ++t) {
        const Eigen::VectorXd x = random_points(rng, 1, 3).row(0).transpose();
        EXPECT_DOUBLE_EQ(predict(back, x).mean, predict(gp, x).mean);
        EXPECT_DOUBLE_EQ(predict(back, x).variance, predict(gp, x).variance);
    }
}

TEST(Emulator, JsonRejectsInconsistentJitter) {
    Eigen::MatrixXd X(3, 1);
    X << 0.2, 0.2, 0.7;
    const GpEmulator gp = GpEmulator::assemble(X, vec({1, 1, 2}), SeKernelParams(vec({1.0})),
                                               TrendCoefficients(vec({0, 0})), 1.0);
    nlohmann::json j = emulator_to_json(gp);
    j["jitter"] = 0.0;  // duplicate rows cannot be factored without it
    EXPECT_THROW(emulator_from_json(j), std::exception);
    nlohmann::json k = emulator_to_json(gp);
    k.erase("tau2");
    EXPECT_THROW(emulator_from_json(k), InvalidArgument);
}
