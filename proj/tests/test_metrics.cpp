#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include <linkgp/metrics.hpp>

#include "oracles.hpp"

using namespace linkgp;

TEST(Rmse, Examples) {
    const std::vector<double> a{1, 2, 3}, b{1, 2, 3}, c{2, 3, 4}, d{0, 0, 0}, e{3, 4, 0};
    EXPECT_EQ(rmse(a, b), 0.0);
    EXPECT_DOUBLE_EQ(rmse(a, c), 1.0);
    EXPECT_DOUBLE_EQ(rmse(d, e), 5.0 / std::sqrt(3.0));
}

TEST(Rmse, RandomAgainstLoop) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> z;
    for (int t = 0; t < 20; ++t) {
        std::vector<double> a(37), b(37);
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            a[i] = z(rng);
            b[i] = z(rng);
            s += (a[i] - b[i]) * (a[i] - b[i]);
        }
        EXPECT_NEAR(rmse(a, b), std::sqrt(s / 37.0), 1e-12);
        std::vector<double> a2 = a, b2 = b;
        for (std::size_t i = 0; i < a.size(); ++i) {
            a2[i] += 7.5;
            b2[i] += 7.5;
        }
        EXPECT_NEAR(rmse(a2, b2), rmse(a, b), 1e-12);
    }
}

TEST(Rmse, BadInput) {
    const std::vector<double> a{1, 2}, b{1}, empty;
    EXPECT_THROW(rmse(a, b), InvalidArgument);
    EXPECT_THROW(rmse(empty, empty), InvalidArgument);
}

TEST(Crps, StandardNormalAtMean) {
    EXPECT_NEAR(crps_gaussian(0.0, 0.0, 1.0), 0.23370, 5e-5);
    EXPECT_NEAR(crps_gaussian(0.0, 0.0, 1.0), 2.0 / std::sqrt(2.0 * std::numbers::pi) - 1.0 / std::sqrt(std::numbers::pi),
                1e-15);
}

TEST(Crps, MatchesQuadrature) {
    EXPECT_NEAR(crps_gaussian(1.0, 0.0, 1.0), oracle::crps_quadrature(1.0, 0.0, 1.0, -12.0, 13.0), 1e-6);
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> mu(-3, 3), sg(0.05, 3.0), off(-4, 4);
    for (int t = 0; t < 100; ++t) {
        const double m = mu(rng), s = sg(rng), y = m + s * off(rng);
        const double q = oracle::crps_quadrature(y, m, s, std::min(y, m) - 12 * s, std::max(y, m) + 12 * s);
        EXPECT_NEAR(crps_gaussian(y, m, s), q, 1e-6) << y << ' ' << m << ' ' << s;
    }
}

TEST(Crps, ProperScoringInExpectation) {
    // Expected score under Y ~ N(0,1) is smallest for the true distribution.
    std::mt19937_64 rng(8);
    std::normal_distribution<double> z;
    double truth = 0.0, wide = 0.0, shifted = 0.0;
    for (int i = 0; i < 20000; ++i) {
        const double y = z(rng);
        truth += crps_gaussian(y, 0.0, 1.0);
        wide += crps_gaussian(y, 0.0, 2.0);
        shifted += crps_gaussian(y, 0.5, 1.0);
    }
    EXPECT_LT(truth, wide);
    EXPECT_LT(truth, shifted);
}

TEST(Crps, DegenerateAndInvalid) {
    EXPECT_EQ(crps_gaussian(2.0, -1.0, 0.0), 3.0);
    EXPECT_NEAR(crps_gaussian(2.0, -1.0, 1e-9), 3.0, 1e-8);
    EXPECT_THROW(crps_gaussian(0.0, 0.0, -1.0), InvalidArgument);
    EXPECT_THROW(crps_gaussian(0.0, 0.0, std::nan("")), InvalidArgument);
}

namespace {
TrajectoryForecast make_forecast(const Eigen::MatrixXd& means, double var) {
    TrajectoryForecast fc;
    for (Eigen::Index s = 0; s < means.rows(); ++s) {
        GaussianState g = GaussianState::known(means.row(s).transpose(), s);
        g.variance.setConstant(var);
        fc.states.push_back(g);
    }
    return fc;
}

Trajectory make_truth(const Eigen::MatrixXd& states, double dt) {
    Trajectory tr;
    tr.states = states;
    tr.times.resize(states.rows());
    for (Eigen::Index s = 0; s < states.rows(); ++s) tr.times[s] = dt * static_cast<double>(s);
    return tr;
}
}  // namespace

TEST(ScoreForecast, PerfectAndShifted) {
    Eigen::MatrixXd truth(4, 2);
    truth << 1, 2, 1.5, 2.5, 2, 3, 2.5, 3.5;
    const auto perfect = score_forecast(make_forecast(truth, 0.0), make_truth(truth, 0.1));
    EXPECT_EQ(perfect.rmse, Eigen::VectorXd::Zero(2));
    EXPECT_EQ(perfect.crps, Eigen::VectorXd::Zero(2));
    EXPECT_EQ(perfect.horizon, 3);
    EXPECT_EQ(perfect.table.size(), 3u);
    EXPECT_EQ(perfect.table.front().s, 1);

    Eigen::MatrixXd shifted = truth.array() + 1.0;
    const auto rep = score_forecast(make_forecast(shifted, 0.0), make_truth(truth, 0.1));
    EXPECT_DOUBLE_EQ(rep.rmse[0], 1.0);
    EXPECT_DOUBLE_EQ(rep.crps[1], 1.0);
}

TEST(ScoreForecast, HandTable) {
    Eigen::MatrixXd truth(3, 1), means(3, 1);
    truth << 0, 1, 2;
    means << 0, 1.5, 1.0;
    const auto rep = score_forecast(make_forecast(means, 1.0), make_truth(truth, 0.5));
    EXPECT_NEAR(rep.rmse[0], std::sqrt((0.25 + 1.0) / 2.0), 1e-15);
    const double c1 = crps_gaussian(1.0, 1.5, 1.0), c2 = crps_gaussian(2.0, 1.0, 1.0);
    EXPECT_NEAR(rep.crps[0], 0.5 * (c1 + c2), 1e-15);
    EXPECT_EQ(rep.table[1].t, 1.0);
    EXPECT_EQ(rep.table[1].crps[0], c2);
    std::ostringstream os;
    write_score_csv(os, rep);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "s,t,truth_1,mean_1,var_1,crps_1");
    const auto j = score_summary_json(rep);
    EXPECT_EQ(j.at("horizon").get<long>(), 2);
}

TEST(ScoreForecast, AlignmentErrors) {
    Eigen::MatrixXd truth(3, 1), means(4, 1);
    truth << 0, 1, 2;
    means << 0, 1, 2, 3;
    EXPECT_THROW(score_forecast(make_forecast(means, 0.0), make_truth(truth, 1.0)), InvalidArgument);
    Eigen::MatrixXd wide(3, 2);
    wide.setZero();
    EXPECT_THROW(score_forecast(make_forecast(truth, 0.0), make_truth(wide, 1.0)), InvalidArgument);
}
