#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "linkgp/errors.hpp"
#include "linkgp/gp.hpp"

namespace linkgp {

namespace detail {
inline nlohmann::json matrix_rows(const Eigen::MatrixXd& A) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < A.cols(); ++j) row.push_back(A(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline nlohmann::json vector_array(const Eigen::VectorXd& v) {
    return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline Eigen::MatrixXd rows_matrix(const nlohmann::json& j, const char* what) {
    if (!j.is_array() || j.empty()) throw InvalidArgument(std::string(what) + ": expected a non-empty array of rows");
    const std::size_t cols = j.at(0).size();
    Eigen::MatrixXd A(j.size(), cols);
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_array() || j[i].size() != cols) throw InvalidArgument(std::string(what) + ": ragged rows");
        for (std::size_t c = 0; c < cols; ++c) A(i, c) = j[i][c].get<double>();
    }
    return A;
}

inline Eigen::VectorXd array_vector(const nlohmann::json& j, const char* what) {
    if (!j.is_array()) throw InvalidArgument(std::string(what) + ": expected an array");
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}
}  // namespace detail

/// Relative Frobenius error of chol * chol^T against K + jitter*I.
inline double factor_reconstruction_error(const GpEmulator& gp) {
    Eigen::MatrixXd A = kernel_matrix(gp.design(), gp.kernel());
    A.diagonal().array() += gp.jitter();
    return (gp.chol() * gp.chol().transpose() - A).norm() / A.norm();
}

/// Normwise backward error of the weights as a solution of
/// (K + jitter*I) r = y - M beta.
inline double weights_residual(const GpEmulator& gp) {
    Eigen::MatrixXd A = kernel_matrix(gp.design(), gp.kernel());
    A.diagonal().array() += gp.jitter();
    const Eigen::VectorXd b = gp.outputs() - trend_basis(gp.design()) * gp.trend().coefficients();
    const double denom = A.norm() * gp.weights().norm() + b.norm();
    if (denom == 0.0) return 0.0;
    return (A * gp.weights() - b).norm() / denom;
}

inline nlohmann::json emulator_to_json(const GpEmulator& gp) {
    nlohmann::json j;
    j["design"] = detail::matrix_rows(gp.design());
    j["outputs"] = detail::vector_array(gp.outputs());
    j["lengthscales"] = detail::vector_array(gp.kernel().lengthscales());
    j["beta"] = detail::vector_array(gp.trend().coefficients());
    j["tau2"] = gp.tau2();
    j["jitter"] = gp.jitter();
    return j;
}

/// Rebuilds the factor and weights at the stored jitter and checks both
/// against the stored-invariant tolerance.
inline GpEmulator emulator_from_json(const nlohmann::json& j, double tolerance = 1e-8) {
    for (const auto& key : {"design", "outputs", "lengthscales", "beta", "tau2", "jitter"}) {
        if (!j.contains(key)) throw InvalidArgument(std::string("emulator JSON: missing key '") + key + "'");
    }
    const double jitter = j.at("jitter").get<double>();
    JitterLadder exact{jitter, jitter, 10.0};
    GpEmulator gp = GpEmulator::assemble(detail::rows_matrix(j.at("design"), "design"),
                                         detail::array_vector(j.at("outputs"), "outputs"),
                                         SeKernelParams(detail::array_vector(j.at("lengthscales"), "lengthscales")),
                                         TrendCoefficients(detail::array_vector(j.at("beta"), "beta")),
                                         j.at("tau2").get<double>(), exact);
    if (factor_reconstruction_error(gp) > tolerance) {
        throw NumericalFailure("emulator JSON: Cholesky reconstruction check failed");
    }
    if (weights_residual(gp) > tolerance) throw NumericalFailure("emulator JSON: weight residual check failed");
    return gp;
}

/// The d per-coordinate emulators of one flow map plus the metadata needed
/// to propagate with them.
struct EmulatorBundle {
    std::string system;
    int state_dim = 0;
    int forcing_dim = 0;
    double dt = 0.0;
    std::vector<GpEmulator> emulators;
};

inline nlohmann::json bundle_to_json(const EmulatorBundle& b) {
    nlohmann::json j;
    j["system"] = b.system;
    j["state_dim"] = b.state_dim;
    j["forcing_dim"] = b.forcing_dim;
    j["dt"] = b.dt;
    j["emulators"] = nlohmann::json::array();
    for (const auto& gp : b.emulators) j["emulators"].push_back(emulator_to_json(gp));
    return j;
}

inline EmulatorBundle bundle_from_json(const nlohmann::json& j) {
    EmulatorBundle b;
    b.system = j.value("system", std::string{});
    b.state_dim = j.at("state_dim").get<int>();
    b.forcing_dim = j.at("forcing_dim").get<int>();
    b.dt = j.at("dt").get<double>();
    for (const auto& e : j.at("emulators")) b.emulators.push_back(emulator_from_json(e));
    if (static_cast<int>(b.emulators.size()) != b.state_dim) {
        throw InvalidArgument("emulator bundle: expected one emulator per state coordinate");
    }
    for (const auto& gp : b.emulators) {
        if (gp.input_dim() != b.state_dim + b.forcing_dim) {
            throw InvalidArgument("emulator bundle: emulator input dim differs from state_dim + forcing_dim");
        }
    }
    return b;
}

inline void save_bundle(const EmulatorBundle& b, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw InvalidArgument("cannot open " + path + " for writing");
    os << bundle_to_json(b).dump(1) << '\n';
}

inline EmulatorBundle load_bundle(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InvalidArgument("cannot open " + path);
    return bundle_from_json(nlohmann::json::parse(is));
}

}  // namespace linkgp
