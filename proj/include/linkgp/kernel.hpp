#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "linkgp/errors.hpp"

namespace linkgp {

/// Lengthscales of the anisotropic squared-exponential kernel
///   K(a, b) = exp(-sum_k (a_k - b_k)^2 / theta_k).
/// theta_k is in squared input units (no factor of 2, no square root).
class SeKernelParams {
public:
    SeKernelParams() = default;
    explicit SeKernelParams(Eigen::VectorXd lengthscales) : theta_(std::move(lengthscales)) {
        for (Eigen::Index k = 0; k < theta_.size(); ++k) {
            if (!(theta_[k] > 0.0) || !std::isfinite(theta_[k])) {
                throw InvalidArgument("lengthscale " + std::to_string(k) + " must be positive and finite");
            }
        }
    }

    const Eigen::VectorXd& lengthscales() const noexcept { return theta_; }
    Eigen::Index dim() const noexcept { return theta_.size(); }
    double operator[](Eigen::Index k) const { return theta_[k]; }

private:
    Eigen::VectorXd theta_;
};

namespace detail {
inline double scaled_sqdist(const Eigen::Ref<const Eigen::VectorXd>& a,
                            const Eigen::Ref<const Eigen::VectorXd>& b,
                            const Eigen::VectorXd& theta) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < theta.size(); ++k) {
        const double diff = a[k] - b[k];
        s += diff * diff / theta[k];
    }
    return s;
}
}  // namespace detail

inline double kernel_eval(const Eigen::Ref<const Eigen::VectorXd>& a,
                          const Eigen::Ref<const Eigen::VectorXd>& b,
                          const SeKernelParams& params) {
    if (a.size() != b.size() || a.size() != params.dim()) {
        throw InvalidArgument("kernel_eval: dimension mismatch (" + std::to_string(a.size()) + ", " +
                              std::to_string(b.size()) + ", theta " + std::to_string(params.dim()) + ")");
    }
    return std::exp(-detail::scaled_sqdist(a, b, params.lengthscales()));
}

/// Starting jitter and the largest value the escalation ladder may reach.
struct JitterLadder {
    double start = 1e-8;
    double max = 1e-4;
    double factor = 10.0;
};

/// K + jitter*I together with its lower Cholesky factor.
struct KernelFactorization {
    Eigen::MatrixXd matrix;  // includes the applied jitter on the diagonal
    Eigen::MatrixXd lower;
    double jitter = 0.0;
    std::vector<double> attempted;

    double log_det() const { return 2.0 * lower.diagonal().array().log().sum(); }
};

/// Correlation matrix of the rows of X (unit diagonal, exactly symmetric).
inline Eigen::MatrixXd kernel_matrix(const Eigen::MatrixXd& X, const SeKernelParams& params) {
    if (X.cols() != params.dim()) {
        throw InvalidArgument("kernel_matrix: design has " + std::to_string(X.cols()) +
                              " columns but kernel has " + std::to_string(params.dim()) + " lengthscales");
    }
    const Eigen::Index n = X.rows();
    Eigen::MatrixXd K(n, n);
    const Eigen::VectorXd& theta = params.lengthscales();
    for (Eigen::Index i = 0; i < n; ++i) {
        K(i, i) = 1.0;
        for (Eigen::Index j = 0; j < i; ++j) {
            const double v = std::exp(-detail::scaled_sqdist(X.row(i).transpose(), X.row(j).transpose(), theta));
            K(i, j) = v;
            K(j, i) = v;
        }
    }
    return K;
}

/// Factor K + jitter*I, escalating the jitter by ladder.factor until the
/// factorization succeeds or ladder.max is exceeded.
inline KernelFactorization build_kernel_matrix(const Eigen::MatrixXd& X, const SeKernelParams& params,
                                               const JitterLadder& ladder = {}) {
    if (X.rows() < 1) throw InvalidArgument("build_kernel_matrix: empty design");
    if (!X.allFinite()) throw InvalidArgument("build_kernel_matrix: non-finite design entries");
    if (ladder.start < 0.0 || ladder.max < ladder.start) throw InvalidArgument("build_kernel_matrix: bad jitter ladder");

    const Eigen::MatrixXd K = kernel_matrix(X, params);
    const Eigen::Index n = X.rows();

    KernelFactorization out;
    double jitter = ladder.start;
    while (true) {
        out.attempted.push_back(jitter);
        Eigen::MatrixXd A = K;
        A.diagonal().array() += jitter;
        Eigen::LLT<Eigen::MatrixXd> llt(A);
        bool ok = llt.info() == Eigen::Success;
        if (ok) {
            Eigen::MatrixXd L = llt.matrixL();
            // Pivots below half the jitter mean rounding ate the regularization.
            const double min_pivot_sq = L.diagonal().array().square().minCoeff();
            ok = std::isfinite(min_pivot_sq) && min_pivot_sq > 0.0 && min_pivot_sq >= 0.5 * jitter;
            if (ok) {
                out.matrix = std::move(A);
                out.lower = std::move(L);
                out.jitter = jitter;
                return out;
            }
        }
        double next = jitter == 0.0 ? 1e-8 : jitter * ladder.factor;
        if (next > ladder.max * (1.0 + 1e-12)) break;
        jitter = next;
    }
    std::string msg = "kernel matrix factorization failed for n=" + std::to_string(n) + "; jitters tried:";
    for (double j : out.attempted) msg += " " + std::to_string(j);
    throw FactorizationFailure(msg, out.attempted);
}

}  // namespace linkgp
