#pragma once
// Reference computations for the test suite. These avoid the library's own
// factorization path: everything goes through dense LU solves, plain loops
// and brute-force quadrature.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include <linkgp/gp.hpp>

namespace oracle {

inline double se_kernel(const Eigen::VectorXd& a, const Eigen::VectorXd& b, const Eigen::VectorXd& theta) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]) / theta[k];
    return std::exp(-s);
}

inline Eigen::MatrixXd gram(const Eigen::MatrixXd& X, const Eigen::VectorXd& theta, double jitter) {
    const Eigen::Index n = X.rows();
    Eigen::MatrixXd K(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) K(i, j) = se_kernel(X.row(i).transpose(), X.row(j).transpose(), theta);
        K(i, i) += jitter;
    }
    return K;
}

inline Eigen::MatrixXd basis(const Eigen::MatrixXd& X) {
    Eigen::MatrixXd M(X.rows(), X.cols() + 1);
    M.col(0).setOnes();
    M.rightCols(X.cols()) = X;
    return M;
}

struct Gls {
    Eigen::VectorXd beta;
    double tau2 = 0.0;
};

/// beta = (M^T K^-1 M)^-1 M^T K^-1 y and tau2 = r^T K^-1 r / n via LU.
inline Gls gls(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& theta, double jitter) {
    const Eigen::MatrixXd K = gram(X, theta, jitter);
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
    const Eigen::MatrixXd M = basis(X);
    const Eigen::MatrixXd KiM = lu.solve(M);
    const Eigen::VectorXd Kiy = lu.solve(y);
    Gls g;
    g.beta = (M.transpose() * KiM).fullPivLu().solve(M.transpose() * Kiy);
    const Eigen::VectorXd r = y - M * g.beta;
    g.tau2 = r.dot(lu.solve(r)) / static_cast<double>(X.rows());
    return g;
}

/// Unprofiled Gaussian log-likelihood of y ~ N(M beta, tau2 K), evaluated in
/// extended precision so the oracle stays trustworthy on ill-conditioned K.
inline double full_loglik(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& theta,
                          double jitter, const Eigen::VectorXd& beta, double tau2) {
    using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
    using VecL = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
    const Eigen::Index n = X.rows();
    MatL C(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            long double s = 0.0L;
            for (Eigen::Index k = 0; k < X.cols(); ++k) {
                const long double diff = static_cast<long double>(X(i, k)) - X(j, k);
                s += diff * diff / theta[k];
            }
            C(i, j) = static_cast<long double>(tau2) * (std::exp(-s) + (i == j ? static_cast<long double>(jitter) : 0.0L));
        }
    }
    const Eigen::FullPivLU<MatL> lu(C);
    VecL r(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        long double mean = beta[0];
        for (Eigen::Index k = 0; k < X.cols(); ++k) mean += static_cast<long double>(beta[k + 1]) * X(i, k);
        r[i] = y[i] - mean;
    }
    long double logdet = 0.0L;
    const MatL U = lu.matrixLU().template triangularView<Eigen::Upper>();
    for (Eigen::Index i = 0; i < n; ++i) logdet += std::log(std::abs(U(i, i)));
    const long double quad = r.dot(lu.solve(r));
    return static_cast<double>(-0.5L * (static_cast<long double>(n) * std::log(2.0L * std::numbers::pi_v<long double>) +
                                        logdet + quad));
}

struct Posterior {
    double mean = 0.0;
    double variance = 0.0;
};

/// mu = alpha(x) + k^T K^-1 (y - M beta), s2 = tau2 (1 - k^T K^-1 k), via LU.
inline Posterior predict(const linkgp::GpEmulator& gp, const Eigen::VectorXd& x) {
    const Eigen::VectorXd& theta = gp.kernel().lengthscales();
    const Eigen::MatrixXd K = gram(gp.design(), theta, gp.jitter());
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
    Eigen::VectorXd k(gp.size());
    for (Eigen::Index i = 0; i < gp.size(); ++i) k[i] = se_kernel(gp.design().row(i).transpose(), x, theta);
    const Eigen::VectorXd& beta = gp.trend().coefficients();
    const Eigen::VectorXd resid = gp.outputs() - basis(gp.design()) * beta;
    Posterior p;
    p.mean = beta[0] + beta.tail(x.size()).dot(x) + k.dot(lu.solve(resid));
    p.variance = gp.tau2() * (1.0 - k.dot(lu.solve(k)));
    return p;
}

/// CRPS by quadrature of (F(x) - 1{x >= y})^2, split at y, composite Simpson.
inline double crps_quadrature(double y, double mu, double sigma, double lo, double hi, int panels = 200000) {
    auto F = [&](double x) { return 0.5 * std::erfc(-(x - mu) / (sigma * std::numbers::sqrt2)); };
    auto simpson = [&](double a, double b, bool above) {
        if (b <= a) return 0.0;
        const int m = panels % 2 ? panels + 1 : panels;
        const double h = (b - a) / m;
        double s = 0.0;
        for (int i = 0; i <= m; ++i) {
            const double x = a + i * h;
            const double g = above ? (1.0 - F(x)) : F(x);
            const double w = (i == 0 || i == m) ? 1.0 : (i % 2 ? 4.0 : 2.0);
            s += w * g * g;
        }
        return s * h / 3.0;
    };
    return simpson(lo, y, false) + simpson(y, hi, true);
}

struct MomentEstimate {
    double mean = 0.0;
    double variance = 0.0;
    double mean_se = 0.0;
    double variance_se = 0.0;
};

/// Law of total expectation and variance by sampling the input and calling
/// the ordinary GP predictor on each draw.
inline MomentEstimate mc_moments(const linkgp::GpEmulator& gp, const Eigen::VectorXd& mu, const Eigen::VectorXd& var,
                                 const Eigen::VectorXd& w, int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    const Eigen::Index d = mu.size();
    std::vector<double> m(n), v(n);
    Eigen::VectorXd x(d + w.size());
    x.tail(w.size()) = w;
    for (int s = 0; s < n; ++s) {
        for (Eigen::Index l = 0; l < d; ++l) x[l] = mu[l] + std::sqrt(var[l]) * z(rng);
        const auto p = linkgp::predict(gp, x);
        m[s] = p.mean;
        v[s] = p.variance;
    }
    double mbar = 0.0, vbar = 0.0;
    for (int s = 0; s < n; ++s) {
        mbar += m[s];
        vbar += v[s];
    }
    mbar /= n;
    vbar /= n;
    // total variance = E[v] + E[(m - mbar)^2]; its SE from the per-draw terms
    std::vector<double> t(n);
    double tbar = 0.0, mvar = 0.0;
    for (int s = 0; s < n; ++s) {
        t[s] = v[s] + (m[s] - mbar) * (m[s] - mbar);
        tbar += t[s];
        mvar += (m[s] - mbar) * (m[s] - mbar);
    }
    tbar /= n;
    double tvar = 0.0;
    for (int s = 0; s < n; ++s) tvar += (t[s] - tbar) * (t[s] - tbar);
    MomentEstimate e;
    e.mean = mbar;
    e.variance = tbar;
    e.mean_se = std::sqrt(mvar / (n - 1.0) / n);
    e.variance_se = std::sqrt(tvar / (n - 1.0) / n);
    return e;
}

/// A small emulator with random design and outputs, fixed lengthscales and
/// tau2, and a constant (zero-slope) trend.
inline linkgp::GpEmulator toy_emulator(std::mt19937_64& rng, Eigen::Index n, Eigen::Index p) {
    std::uniform_real_distribution<double> u(-1.0, 1.0), th(0.2, 2.0), t2(0.1, 2.0);
    Eigen::MatrixXd X(n, p);
    Eigen::VectorXd y(n), theta(p);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index k = 0; k < p; ++k) X(i, k) = u(rng);
        y[i] = u(rng);
    }
    for (Eigen::Index k = 0; k < p; ++k) theta[k] = th(rng);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p + 1);
    beta[0] = u(rng);
    return linkgp::GpEmulator::assemble(X, y, linkgp::SeKernelParams(theta), linkgp::TrendCoefficients(beta), t2(rng));
}

}  // namespace oracle
