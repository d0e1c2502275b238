#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "linkgp/errors.hpp"
#include "linkgp/kernel.hpp"
#include "linkgp/optimize.hpp"

namespace linkgp {

/// Coefficients of the linear trend alpha(x) = beta_0 + sum_k beta_k x_k.
class TrendCoefficients {
public:
    TrendCoefficients() = default;
    explicit TrendCoefficients(Eigen::VectorXd beta) : beta_(std::move(beta)) {
        if (beta_.size() < 1) throw InvalidArgument("trend needs at least an intercept");
        if (!beta_.allFinite()) throw InvalidArgument("trend coefficients must be finite");
    }

    const Eigen::VectorXd& coefficients() const noexcept { return beta_; }
    Eigen::Index input_dim() const noexcept { return beta_.size() - 1; }
    double intercept() const { return beta_[0]; }

    double evaluate(const Eigen::Ref<const Eigen::VectorXd>& x) const {
        if (x.size() != input_dim()) throw InvalidArgument("trend: input dimension mismatch");
        return beta_[0] + beta_.tail(input_dim()).dot(x);
    }

private:
    Eigen::VectorXd beta_;
};

/// Floor applied to the scale estimate so that log(tau^2) stays finite.
inline constexpr double kTau2Floor = 1e-12;

/// Trend basis [1 | X].
inline Eigen::MatrixXd trend_basis(const Eigen::MatrixXd& X) {
    Eigen::MatrixXd M(X.rows(), X.cols() + 1);
    M.col(0).setOnes();
    M.rightCols(X.cols()) = X;
    return M;
}

struct ProfileLikelihood {
    double value = 0.0;
    TrendCoefficients beta;
    double tau2 = 0.0;
    bool tau2_clamped = false;
    double jitter = 0.0;
    double log_det = 0.0;
};

/// Profile log-likelihood with beta and tau^2 replaced by their generalized
/// least squares / maximum likelihood estimates.
inline ProfileLikelihood profile_loglik(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                        const SeKernelParams& params, const JitterLadder& ladder = {}) {
    const Eigen::Index n = X.rows();
    const Eigen::Index p = X.cols();
    if (y.size() != n) throw InvalidArgument("profile_loglik: outputs and design row count differ");
    if (n <= p + 1) {
        throw InsufficientData("profile_loglik: need more than " + std::to_string(p + 1) +
                               " design points, got " + std::to_string(n));
    }
    if (!y.allFinite()) throw InvalidArgument("profile_loglik: non-finite outputs");

    // The ladder runs in double so the chosen jitter matches what assemble()
    // will apply; the likelihood itself is then evaluated in extended
    // precision. Rounding the entries of an ill-conditioned K to double moves
    // log|K| by about cond(K) * eps, which is visible at the 1e-8 level and
    // also adds noise to the finite-difference gradients.
    const KernelFactorization fac = build_kernel_matrix(X, params, ladder);
    using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
    using VecL = Eigen::Matrix<long double, Eigen::Dynamic, 1>;
    const Eigen::VectorXd& theta = params.lengthscales();
    MatL K(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        K(i, i) = 1.0L + static_cast<long double>(fac.jitter);
        for (Eigen::Index j = 0; j < i; ++j) {
            long double d2 = 0.0L;
            for (Eigen::Index k = 0; k < p; ++k) {
                const long double diff = static_cast<long double>(X(i, k)) - static_cast<long double>(X(j, k));
                d2 += diff * diff / static_cast<long double>(theta[k]);
            }
            K(i, j) = K(j, i) = std::exp(-d2);
        }
    }
    const Eigen::LLT<MatL> llt(K);
    if (llt.info() != Eigen::Success) {
        throw NumericalFailure("profile_loglik: extended-precision factorization failed at jitter " +
                               std::to_string(fac.jitter));
    }
    const auto L = llt.matrixL();
    const MatL Mw = L.solve(trend_basis(X).cast<long double>());
    const VecL yw = L.solve(y.cast<long double>());

    // Whitened least squares is the GLS estimate (M^T K^-1 M)^-1 M^T K^-1 y.
    const VecL beta = Mw.colPivHouseholderQr().solve(yw);
    const VecL resid_w = yw - Mw * beta;

    ProfileLikelihood out;
    out.beta = TrendCoefficients(beta.cast<double>());
    const long double tau2 = resid_w.squaredNorm() / static_cast<long double>(n);
    out.tau2 = static_cast<double>(tau2);
    long double log_tau2 = std::log(tau2);
    if (!(out.tau2 >= kTau2Floor)) {
        out.tau2 = kTau2Floor;
        out.tau2_clamped = true;
        log_tau2 = std::log(static_cast<long double>(kTau2Floor));
    }
    out.jitter = fac.jitter;
    long double log_det = 0.0L;
    for (Eigen::Index i = 0; i < n; ++i) log_det += 2.0L * std::log(llt.matrixLLT()(i, i));
    out.log_det = static_cast<double>(log_det);
    const long double dn = static_cast<long double>(n);
    out.value = static_cast<double>(
        -0.5L * (dn * std::log(2.0L * std::numbers::pi_v<long double>) + dn * log_tau2 + log_det + dn));
    return out;
}

struct PosteriorPoint {
    double mean = 0.0;
    double variance = 0.0;
};

struct RestartDiagnostic {
    Eigen::VectorXd start_log_theta;
    Eigen::VectorXd final_log_theta;
    double log_likelihood = -std::numeric_limits<double>::infinity();
    int iterations = 0;
    bool ok = false;
    std::string message;
};

struct FitSummary {
    double log_likelihood = 0.0;
    bool tau2_clamped = false;
    int best_restart = -1;
    std::vector<RestartDiagnostic> restarts;
};

/// A trained flow-map surrogate for one output coordinate. Immutable once
/// built; every derived quantity (factor, weights, inverse) is computed at
/// assembly so concurrent readers never mutate it.
class GpEmulator {
public:
    static GpEmulator assemble(Eigen::MatrixXd design, Eigen::VectorXd outputs, SeKernelParams kernel,
                               TrendCoefficients trend, double tau2, const JitterLadder& ladder = {}) {
        if (design.rows() < 1) throw InvalidArgument("emulator: empty design");
        if (outputs.size() != design.rows()) throw InvalidArgument("emulator: outputs and design row count differ");
        if (kernel.dim() != design.cols()) throw InvalidArgument("emulator: lengthscale count differs from input dim");
        if (trend.input_dim() != design.cols()) throw InvalidArgument("emulator: trend length must be input dim + 1");
        if (!(tau2 >= 0.0) || !std::isfinite(tau2)) throw InvalidArgument("emulator: tau2 must be non-negative");
        if (!outputs.allFinite()) throw InvalidArgument("emulator: non-finite outputs");

        GpEmulator gp;
        KernelFactorization fac = build_kernel_matrix(design, kernel, ladder);
        gp.jitter_ = fac.jitter;
        gp.chol_ = std::move(fac.lower);
        const Eigen::MatrixXd& lower = gp.chol_;
        const auto L = lower.triangularView<Eigen::Lower>();
        const Eigen::VectorXd resid = outputs - trend_basis(design) * trend.coefficients();
        gp.weights_ = L.transpose().solve(L.solve(resid));
        const Eigen::Index n = design.rows();
        gp.kinv_ = L.transpose().solve(L.solve(Eigen::MatrixXd::Identity(n, n)));
        gp.kinv_ = 0.5 * (gp.kinv_ + gp.kinv_.transpose()).eval();
        gp.design_ = std::move(design);
        gp.outputs_ = std::move(outputs);
        gp.kernel_ = std::move(kernel);
        gp.trend_ = std::move(trend);
        gp.tau2_ = tau2;
        return gp;
    }

    const Eigen::MatrixXd& design() const noexcept { return design_; }
    const Eigen::VectorXd& outputs() const noexcept { return outputs_; }
    const SeKernelParams& kernel() const noexcept { return kernel_; }
    const TrendCoefficients& trend() const noexcept { return trend_; }
    double tau2() const noexcept { return tau2_; }
    double jitter() const noexcept { return jitter_; }
    /// Lower Cholesky factor of K + jitter*I.
    const Eigen::MatrixXd& chol() const noexcept { return chol_; }
    /// r = (K + jitter*I)^-1 (y - M beta).
    const Eigen::VectorXd& weights() const noexcept { return weights_; }
    /// (K + jitter*I)^-1, symmetrized.
    const Eigen::MatrixXd& kinv() const noexcept { return kinv_; }
    Eigen::Index size() const noexcept { return design_.rows(); }
    Eigen::Index input_dim() const noexcept { return design_.cols(); }

    const FitSummary& fit_summary() const noexcept { return summary_; }
    void set_fit_summary(FitSummary s) { summary_ = std::move(s); }

private:
    GpEmulator() = default;

    Eigen::MatrixXd design_;
    Eigen::VectorXd outputs_;
    SeKernelParams kernel_;
    TrendCoefficients trend_;
    double tau2_ = 0.0;
    double jitter_ = 0.0;
    Eigen::MatrixXd chol_;
    Eigen::VectorXd weights_;
    Eigen::MatrixXd kinv_;
    FitSummary summary_;
};

/// The applied jitter acts as a nugget on exactly coincident inputs, so a
/// training row is reproduced exactly; everywhere else it only enters
/// through the factor.
inline PosteriorPoint predict(const GpEmulator& gp, const Eigen::Ref<const Eigen::VectorXd>& x) {
    if (x.size() != gp.input_dim()) {
        throw InvalidArgument("predict: input has dimension " + std::to_string(x.size()) + ", emulator expects " +
                              std::to_string(gp.input_dim()));
    }
    const Eigen::Index n = gp.size();
    const Eigen::VectorXd& theta = gp.kernel().lengthscales();
    Eigen::VectorXd k(n);
    double prior = 1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double d2 = detail::scaled_sqdist(gp.design().row(i).transpose(), x, theta);
        k[i] = std::exp(-d2);
        if (d2 == 0.0 && gp.jitter() > 0.0 && gp.design().row(i) == x.transpose()) {
            k[i] += gp.jitter();
            prior = 1.0 + gp.jitter();
        }
    }
    PosteriorPoint out;
    out.mean = gp.trend().evaluate(x) + k.dot(gp.weights());
    const Eigen::VectorXd v = gp.chol().triangularView<Eigen::Lower>().solve(k);
    out.variance = std::max(0.0, gp.tau2() * (prior - v.squaredNorm()));
    return out;
}

/// Posterior at every row of `inputs` (one point per row). Means and
/// variances are written into the caller's vectors.
inline void predict_batch(const GpEmulator& gp, const Eigen::MatrixXd& inputs, Eigen::VectorXd& means,
                          Eigen::VectorXd& variances) {
    if (inputs.cols() != gp.input_dim()) throw InvalidArgument("predict_batch: input dimension mismatch");
    const Eigen::Index n = gp.size();
    const Eigen::Index m = inputs.rows();
    const Eigen::VectorXd& theta = gp.kernel().lengthscales();
    const Eigen::MatrixXd& X = gp.design();
    Eigen::MatrixXd k(n, m);
    Eigen::VectorXd prior = Eigen::VectorXd::Ones(m);
    for (Eigen::Index j = 0; j < m; ++j) {
        for (Eigen::Index i = 0; i < n; ++i) {
            double s = 0.0;
            for (Eigen::Index l = 0; l < theta.size(); ++l) {
                const double diff = X(i, l) - inputs(j, l);
                s += diff * diff / theta[l];
            }
            k(i, j) = std::exp(-s);
            if (s == 0.0 && gp.jitter() > 0.0 && X.row(i) == inputs.row(j)) {
                k(i, j) += gp.jitter();
                prior[j] = 1.0 + gp.jitter();
            }
        }
    }
    const Eigen::VectorXd& beta = gp.trend().coefficients();
    means = (inputs * beta.tail(gp.input_dim())).array() + beta[0];
    means.noalias() += k.transpose() * gp.weights();
    gp.chol().triangularView<Eigen::Lower>().solveInPlace(k);
    variances = (gp.tau2() * (prior.array().transpose() - k.colwise().squaredNorm().array())).cwiseMax(0.0).transpose();
}

struct FitOptions {
    /// Per-dimension [lower, upper] lengthscale bounds; empty means derive
    /// [1e-3 * range^2, 1e3 * range^2] from the design.
    std::vector<std::pair<double, double>> bounds;
    int restarts = 5;
    std::uint64_t seed = 0;
    double fd_step = 1e-6;
    int max_iterations = 200;
    JitterLadder ladder{};
};

inline std::vector<std::pair<double, double>> default_lengthscale_bounds(const Eigen::MatrixXd& X) {
    std::vector<std::pair<double, double>> b;
    for (Eigen::Index k = 0; k < X.cols(); ++k) {
        double range = X.col(k).maxCoeff() - X.col(k).minCoeff();
        if (!(range > 0.0)) range = 1.0;
        b.emplace_back(1e-3 * range * range, 1e3 * range * range);
    }
    return b;
}

namespace detail {
inline double radical_inverse(std::uint64_t index, unsigned base) {
    double inv = 1.0 / base, f = inv, r = 0.0;
    while (index > 0) {
        r += f * static_cast<double>(index % base);
        index /= base;
        f *= inv;
    }
    return r;
}

inline unsigned nth_prime(std::size_t k) {
    static const unsigned primes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71};
    if (k >= std::size(primes)) throw InvalidArgument("restart sequence supports at most 20 dimensions");
    return primes[k];
}
}  // namespace detail

/// Restart start points in [0,1]^p: a Halton sequence under a seeded random
/// rotation. The first k points do not depend on how many are requested.
inline Eigen::MatrixXd restart_points(int count, Eigen::Index dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Eigen::VectorXd shift(dim);
    for (Eigen::Index k = 0; k < dim; ++k) shift[k] = unif(rng);
    Eigen::MatrixXd pts(count, dim);
    for (int i = 0; i < count; ++i) {
        for (Eigen::Index k = 0; k < dim; ++k) {
            const double u = detail::radical_inverse(static_cast<std::uint64_t>(i) + 1, detail::nth_prime(k)) + shift[k];
            pts(i, k) = u - std::floor(u);
        }
    }
    return pts;
}

/// Maximum profile-likelihood fit of the lengthscales (log-space, bounded),
/// with beta and tau^2 plugged in at the optimum.
inline GpEmulator fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const FitOptions& opts = {}) {
    const Eigen::Index p = X.cols();
    if (y.size() != X.rows()) throw InvalidArgument("fit: outputs and design row count differ");
    if (!y.allFinite() || !X.allFinite()) throw InvalidArgument("fit: non-finite training data");
    if (opts.restarts < 1) throw InvalidArgument("fit: restarts must be >= 1");
    if (X.rows() <= p + 1) {
        throw InsufficientData("fit: need more than " + std::to_string(p + 1) + " design points, got " +
                               std::to_string(X.rows()));
    }
    const auto bounds = opts.bounds.empty() ? default_lengthscale_bounds(X) : opts.bounds;
    if (static_cast<Eigen::Index>(bounds.size()) != p) throw InvalidArgument("fit: bounds size differs from input dim");

    Eigen::VectorXd lo(p), hi(p);
    for (Eigen::Index k = 0; k < p; ++k) {
        if (!(bounds[k].first > 0.0 && bounds[k].first <= bounds[k].second)) {
            throw InvalidArgument("fit: lengthscale bounds must satisfy 0 < lower <= upper");
        }
        lo[k] = std::log(bounds[k].first);
        hi[k] = std::log(bounds[k].second);
    }

    auto objective = [&](const Eigen::VectorXd& log_theta) {
        try {
            return -profile_loglik(X, y, SeKernelParams(log_theta.array().exp().matrix()), opts.ladder).value;
        } catch (const NumericalFailure&) {
            return std::numeric_limits<double>::infinity();
        }
    };

    BoxMinimizerOptions mopts;
    mopts.fd_step = opts.fd_step;
    mopts.max_iterations = opts.max_iterations;
    const BoxMinimizer minimizer(lo, hi, mopts);
    const Eigen::MatrixXd starts = restart_points(opts.restarts, p, opts.seed);

    FitSummary summary;
    double best_f = std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_x;
    for (int r = 0; r < opts.restarts; ++r) {
        RestartDiagnostic diag;
        diag.start_log_theta = lo + starts.row(r).transpose().cwiseProduct(hi - lo);
        const BoxMinimizerResult res = minimizer.minimize(objective, diag.start_log_theta);
        diag.final_log_theta = res.x;
        diag.iterations = res.iterations;
        diag.message = res.message;
        diag.ok = std::isfinite(res.f);
        if (diag.ok) {
            diag.log_likelihood = -res.f;
            if (res.f < best_f) {
                best_f = res.f;
                best_x = res.x;
                summary.best_restart = r;
            }
        }
        summary.restarts.push_back(std::move(diag));
    }
    if (summary.best_restart < 0) {
        std::vector<std::string> lines;
        for (std::size_t r = 0; r < summary.restarts.size(); ++r) {
            std::ostringstream os;
            os << "restart " << r << ": " << summary.restarts[r].message;
            lines.push_back(os.str());
        }
        throw FitFailure("fit: every restart failed numerically", std::move(lines));
    }

    const SeKernelParams kernel(best_x.array().exp().matrix());
    const ProfileLikelihood pl = profile_loglik(X, y, kernel, opts.ladder);
    summary.log_likelihood = pl.value;
    summary.tau2_clamped = pl.tau2_clamped;
    GpEmulator gp = GpEmulator::assemble(X, y, kernel, pl.beta, pl.tau2, opts.ladder);
    gp.set_fit_summary(std::move(summary));
    return gp;
}

}  // namespace linkgp
