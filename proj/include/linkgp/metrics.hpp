#pragma once

#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "linkgp/dynamics.hpp"
#include "linkgp/errors.hpp"
#include "linkgp/propagation.hpp"

namespace linkgp {

inline double rmse(std::span<const double> truth, std::span<const double> pred) {
    if (truth.size() != pred.size()) throw InvalidArgument("rmse: length mismatch");
    if (truth.empty()) throw InvalidArgument("rmse: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const double e = truth[i] - pred[i];
        acc += e * e;
    }
    return std::sqrt(acc / static_cast<double>(truth.size()));
}

inline double standard_normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }
inline double standard_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// CRPS of N(mu, sigma^2) against the realization y, positively oriented
/// (lower is better). sigma = 0 gives the point-forecast limit |y - mu|.
inline double crps_gaussian(double y, double mu, double sigma) {
    if (sigma < 0.0 || std::isnan(sigma)) throw InvalidArgument("crps_gaussian: sigma must be non-negative");
    if (sigma == 0.0) return std::abs(y - mu);
    const double z = (y - mu) / sigma;
    return sigma * (z * (2.0 * standard_normal_cdf(z) - 1.0) + 2.0 * standard_normal_pdf(z) -
                    1.0 / std::sqrt(std::numbers::pi));
}

struct StepScore {
    long s = 0;
    double t = 0.0;
    Eigen::VectorXd truth;
    Eigen::VectorXd mean;
    Eigen::VectorXd variance;
    Eigen::VectorXd crps;
};

struct ScoreReport {
    Eigen::VectorXd rmse;
    Eigen::VectorXd crps;
    std::vector<StepScore> table;  // s = 1..T
    long horizon = 0;
};

/// Scores every forecast step s = 1..T against the truth row of the same
/// index. `truth` must come from an integration at the forecast's spacing.
inline ScoreReport score_forecast(const TrajectoryForecast& fc, const Trajectory& truth) {
    const long T = fc.horizon();
    const Eigen::Index d = fc.dim();
    if (T < 1) throw InvalidArgument("score_forecast: forecast has no steps");
    if (truth.states.rows() != T + 1) {
        throw InvalidArgument("score_forecast: truth has " + std::to_string(truth.states.rows()) +
                              " rows, forecast has " + std::to_string(T + 1) + " states");
    }
    if (truth.states.cols() != d) throw InvalidArgument("score_forecast: dimension mismatch");

    ScoreReport rep;
    rep.horizon = T;
    rep.rmse = Eigen::VectorXd::Zero(d);
    rep.crps = Eigen::VectorXd::Zero(d);
    rep.table.reserve(static_cast<std::size_t>(T));
    std::vector<std::vector<double>> tr(d), pr(d);
    for (long s = 1; s <= T; ++s) {
        const auto& st = fc.states[s];
        StepScore row;
        row.s = s;
        row.t = truth.times[s];
        row.truth = truth.states.row(s).transpose();
        row.mean = st.mean;
        row.variance = st.variance;
        row.crps.resize(d);
        for (Eigen::Index m = 0; m < d; ++m) {
            row.crps[m] = crps_gaussian(row.truth[m], st.mean[m], std::sqrt(std::max(0.0, st.variance[m])));
            rep.crps[m] += row.crps[m];
            tr[m].push_back(row.truth[m]);
            pr[m].push_back(st.mean[m]);
        }
        rep.table.push_back(std::move(row));
    }
    for (Eigen::Index m = 0; m < d; ++m) {
        rep.rmse[m] = rmse(tr[m], pr[m]);
        rep.crps[m] /= static_cast<double>(T);
    }
    return rep;
}

/// Per-step table: s,t,truth_*,mean_*,var_*,crps_* at 17 significant digits.
inline void write_score_csv(std::ostream& os, const ScoreReport& rep) {
    const Eigen::Index d = rep.rmse.size();
    os << "s,t";
    for (const char* col : {"truth", "mean", "var", "crps"}) {
        for (Eigen::Index m = 0; m < d; ++m) os << ',' << col << '_' << m + 1;
    }
    os << '\n' << std::setprecision(17);
    for (const auto& row : rep.table) {
        os << row.s << ',' << row.t;
        for (const Eigen::VectorXd* v : {&row.truth, &row.mean, &row.variance, &row.crps}) {
            for (Eigen::Index m = 0; m < d; ++m) os << ',' << (*v)[m];
        }
        os << '\n';
    }
}

inline nlohmann::json score_summary_json(const ScoreReport& rep) {
    nlohmann::json j;
    j["horizon"] = rep.horizon;
    j["rmse"] = std::vector<double>(rep.rmse.data(), rep.rmse.data() + rep.rmse.size());
    j["crps"] = std::vector<double>(rep.crps.data(), rep.crps.data() + rep.crps.size());
    return j;
}

}  // namespace linkgp
