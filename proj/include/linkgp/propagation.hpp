#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "linkgp/errors.hpp"
#include "linkgp/gp.hpp"

namespace linkgp {

/// Diagonal Gaussian belief over the state at time index s.
struct GaussianState {
    Eigen::VectorXd mean;
    Eigen::VectorXd variance;
    long time_index = 0;

    static GaussianState known(Eigen::VectorXd x, long s = 0) {
        GaussianState g;
        g.variance = Eigen::VectorXd::Zero(x.size());
        g.mean = std::move(x);
        g.time_index = s;
        return g;
    }
};

/// Known forcing values; row s holds w(t_s).
struct ForcingTrajectory {
    Eigen::MatrixXd values;
};

enum class Method { exact, mc };

inline const char* to_string(Method m) { return m == Method::exact ? "exact" : "mc"; }

inline Method parse_method(const std::string& s) {
    if (s == "exact") return Method::exact;
    if (s == "mc") return Method::mc;
    throw InvalidArgument("unknown propagation method '" + s + "'");
}

struct TrajectoryForecast {
    std::vector<GaussianState> states;
    double wall_time = 0.0;
    Method method = Method::exact;
    int n_mc = 0;

    long horizon() const { return static_cast<long>(states.size()) - 1; }
    Eigen::Index dim() const { return states.empty() ? 0 : states.front().mean.size(); }
};

/// Expected product of two one-dimensional kernel factors under an uncertain
/// input x ~ N(mu, var):  E[exp(-(x-a)^2/theta) * exp(-(x-b)^2/theta)].
inline double zeta(double a, double b, double mu, double var, double theta) {
    if (!(theta > 0.0)) throw InvalidArgument("zeta: lengthscale must be positive");
    if (!(var >= 0.0)) throw InvalidArgument("zeta: variance must be non-negative");
    const double mid = 0.5 * (a + b) - mu;
    const double gap = a - b;
    return std::sqrt(theta / (theta + 4.0 * var)) *
           std::exp(-mid * mid / (0.5 * theta + 2.0 * var) - gap * gap / (2.0 * theta));
}

namespace detail {

inline void check_emulator_dims(std::span<const GpEmulator> emulators, Eigen::Index forcing_dim) {
    if (emulators.empty()) throw InvalidArgument("propagation needs at least one emulator");
    const Eigen::Index d = static_cast<Eigen::Index>(emulators.size());
    for (const auto& gp : emulators) {
        if (gp.input_dim() != d + forcing_dim) {
            throw InvalidArgument("emulator input dimension " + std::to_string(gp.input_dim()) +
                                  " does not equal state dim " + std::to_string(d) + " + forcing dim " +
                                  std::to_string(forcing_dim));
        }
    }
}

inline void check_state(const GaussianState& state, Eigen::Index d) {
    if (state.mean.size() != d || state.variance.size() != d) {
        throw InvalidArgument("state dimension " + std::to_string(state.mean.size()) + " does not match " +
                              std::to_string(d) + " emulators");
    }
    if ((state.variance.array() < 0.0).any()) throw InvalidArgument("state variances must be non-negative");
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace detail

/// Independent seed for sub-stream `index` of `base`.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    return detail::splitmix64(detail::splitmix64(base) ^ (index * 0xD1B54A32D192ED03ULL + 1));
}

/// Closed-form one-step moment propagation for a set of emulators. All
/// state-independent pair terms are cached at construction, so one step
/// costs O(n^2 (d + d_w)) per emulator. Holds per-instance scratch: use one
/// stepper per thread.
class ExactStepper {
public:
    explicit ExactStepper(std::span<const GpEmulator> emulators, Eigen::Index forcing_dim = 0)
        : d_(static_cast<Eigen::Index>(emulators.size())), dw_(forcing_dim) {
        if (forcing_dim < 0) throw InvalidArgument("forcing dimension must be non-negative");
        detail::check_emulator_dims(emulators, forcing_dim);
        caches_.reserve(emulators.size());
        for (const auto& gp : emulators) caches_.push_back(build_cache(gp));
    }

    Eigen::Index state_dim() const noexcept { return d_; }
    Eigen::Index forcing_dim() const noexcept { return dw_; }
    double tau2(Eigen::Index m) const { return caches_[m].tau2; }

    GaussianState step(const GaussianState& state, const Eigen::Ref<const Eigen::VectorXd>& w_now) const {
        GaussianState out;
        out.mean.resize(d_);
        out.variance.resize(d_);
        step_into(state, w_now, out);
        return out;
    }

    GaussianState step(const GaussianState& state) const { return step(state, Eigen::VectorXd(0)); }

    /// Allocation-free form for the forecast loop; `out` must be sized d.
    void step_into(const GaussianState& state, const Eigen::Ref<const Eigen::VectorXd>& w_now,
                   GaussianState& out) const {
        detail::check_state(state, d_);
        if (w_now.size() != dw_) {
            throw InvalidArgument("forcing vector has dimension " + std::to_string(w_now.size()) + ", expected " +
                                  std::to_string(dw_));
        }
        if (!w_now.allFinite()) throw InvalidArgument("forcing values must be finite");
        for (Eigen::Index m = 0; m < d_; ++m) {
            moments(caches_[m], state, w_now, out.mean[m], out.variance[m]);
        }
        out.time_index = state.time_index + 1;
    }

private:
    struct Cache {
        Eigen::Index n = 0;
        std::vector<double> x_state;   // n x d, row-major
        std::vector<double> x_force;   // n x d_w, row-major
        std::vector<double> theta;     // state block
        std::vector<double> theta_w;   // forcing block
        Eigen::VectorXd weights;
        std::vector<double> mid;       // pairs x d, row-major: (x_il + x_kl) / 2
        std::vector<double> gap2;      // pairs x d, row-major: (x_il - x_kl)^2
        std::vector<double> pair_coef; // (r_i r_k - tau2 Kinv_ik), doubled off-diagonal
        std::vector<int> pair_i, pair_k;
        Eigen::MatrixXd chol;
        Eigen::VectorXd beta;
        double tau2 = 0.0;
        // scratch: expected kernel vector, and its triangular solve
        mutable Eigen::VectorXd kmean;
        mutable Eigen::VectorXd solved;
    };

    Cache build_cache(const GpEmulator& gp) const {
        Cache c;
        c.n = gp.size();
        const Eigen::MatrixXd& X = gp.design();
        const Eigen::VectorXd& th = gp.kernel().lengthscales();
        c.theta.assign(th.data(), th.data() + d_);
        c.theta_w.assign(th.data() + d_, th.data() + d_ + dw_);
        c.x_state.resize(c.n * d_);
        c.x_force.resize(c.n * dw_);
        for (Eigen::Index i = 0; i < c.n; ++i) {
            for (Eigen::Index l = 0; l < d_; ++l) c.x_state[i * d_ + l] = X(i, l);
            for (Eigen::Index j = 0; j < dw_; ++j) c.x_force[i * dw_ + j] = X(i, d_ + j);
        }
        c.weights = gp.weights();
        c.chol = gp.chol();
        c.beta = gp.trend().coefficients();
        c.tau2 = gp.tau2();
        const Eigen::MatrixXd& kinv = gp.kinv();
        const std::size_t pairs = static_cast<std::size_t>(c.n * (c.n + 1) / 2);
        c.mid.reserve(pairs * d_);
        c.gap2.reserve(pairs * d_);
        c.pair_coef.reserve(pairs);
        c.pair_i.reserve(pairs);
        c.pair_k.reserve(pairs);
        for (Eigen::Index i = 0; i < c.n; ++i) {
            for (Eigen::Index k = i; k < c.n; ++k) {
                for (Eigen::Index l = 0; l < d_; ++l) {
                    const double a = X(i, l), b = X(k, l);
                    c.mid.push_back(0.5 * (a + b));
                    c.gap2.push_back((a - b) * (a - b));
                }
                const double coef = c.weights[i] * c.weights[k] - c.tau2 * kinv(i, k);
                c.pair_coef.push_back(i == k ? coef : 2.0 * coef);
                c.pair_i.push_back(static_cast<int>(i));
                c.pair_k.push_back(static_cast<int>(k));
            }
        }
        c.kmean.resize(c.n);
        c.solved.resize(c.n);
        return c;
    }

    // The second moment E[k_i k_k] is written as m_i m_k (1 + expm1(L_ik)),
    // where m is the expected kernel vector and L_ik is exactly proportional
    // to the input variances. The variance then becomes
    //   tau2 (1 - m' K^-1 m) + sum_ik (r_i r_k - tau2 Kinv_ik) m_i m_k expm1(L_ik),
    // which is algebraically the usual form but avoids subtracting two large
    // nearly equal quantities when K is ill-conditioned or the weights are big.
    void moments(const Cache& c, const GaussianState& state, const Eigen::Ref<const Eigen::VectorXd>& w,
                 double& mean_out, double& var_out) const {
        const double* mu = state.mean.data();
        const double* var = state.variance.data();

        double trend = c.beta[0];
        for (Eigen::Index l = 0; l < d_; ++l) trend += c.beta[1 + l] * mu[l];
        for (Eigen::Index j = 0; j < dw_; ++j) trend += c.beta[1 + d_ + j] * w[j];

        constexpr Eigen::Index kStack = 16;
        double stack[3 * kStack];
        std::vector<double> heap;
        double* buf = stack;
        if (d_ > kStack) {
            heap.resize(3 * d_);
            buf = heap.data();
        }
        double* ss = buf;              // theta + 2 var
        double* gap_w = buf + d_;      // var / (theta (theta + 2 var))
        double* mid_w = buf + 2 * d_;  // 4 var / ((theta + 2 var)(theta + 4 var))
        double pref_mean = 1.0, log_const = 0.0;
        bool any_var = false;
        for (Eigen::Index l = 0; l < d_; ++l) {
            const double th = c.theta[l], v = var[l];
            const double s = th + 2.0 * v, q = th + 4.0 * v;
            ss[l] = s;
            gap_w[l] = v / (th * s);
            mid_w[l] = 4.0 * v / (s * q);
            pref_mean *= std::sqrt(th / s);
            log_const += 0.5 * std::log1p(4.0 * v * v / (th * q));
            any_var = any_var || v > 0.0;
        }

        double* m = c.kmean.data();
        for (Eigen::Index i = 0; i < c.n; ++i) {
            // same operation order as predict, so zero variance reproduces it
            double e = 0.0;
            const double* xi = c.x_state.data() + i * d_;
            for (Eigen::Index l = 0; l < d_; ++l) {
                const double diff = xi[l] - mu[l];
                e += diff * diff / ss[l];
            }
            for (Eigen::Index j = 0; j < dw_; ++j) {
                const double diff = c.x_force[i * dw_ + j] - w[j];
                e += diff * diff / c.theta_w[j];
            }
            m[i] = pref_mean * std::exp(-e);
        }
        const double kernel_sum = c.kmean.dot(c.weights);

        c.solved = c.kmean;
        c.chol.triangularView<Eigen::Lower>().solveInPlace(c.solved);
        double v = c.tau2 * (1.0 - c.solved.squaredNorm());

        if (any_var) {
            const std::size_t pairs = c.pair_coef.size();
            const double* mid = c.mid.data();
            const double* gap2 = c.gap2.data();
            double pair_sum = 0.0;
            for (std::size_t q = 0; q < pairs; ++q) {
                double L = log_const;
                const double* mq = mid + q * d_;
                const double* gq = gap2 + q * d_;
                for (Eigen::Index l = 0; l < d_; ++l) {
                    const double diff = mq[l] - mu[l];
                    L += mid_w[l] * diff * diff - gap_w[l] * gq[l];
                }
                pair_sum += c.pair_coef[q] * m[c.pair_i[q]] * m[c.pair_k[q]] * std::expm1(L);
            }
            v += pair_sum;
        }

        mean_out = trend + kernel_sum;
        var_out = v > 0.0 ? v : 0.0;
    }

    Eigen::Index d_;
    Eigen::Index dw_;
    std::vector<Cache> caches_;
};

inline GaussianState step_exact_forced(std::span<const GpEmulator> emulators, const GaussianState& state,
                                       const Eigen::Ref<const Eigen::VectorXd>& w_now) {
    return ExactStepper(emulators, w_now.size()).step(state, w_now);
}

inline GaussianState step_exact(std::span<const GpEmulator> emulators, const GaussianState& state) {
    return step_exact_forced(emulators, state, Eigen::VectorXd(0));
}

struct McStepResult {
    GaussianState state;
    Eigen::VectorXd mean_standard_error;
    Eigen::VectorXd variance_standard_error;
};

/// Monte Carlo moments via the laws of total expectation and variance.
/// Input coordinate l is sampled from its own stream derive_seed(seed, l);
/// all emulators see the same samples.
inline McStepResult step_mc_detailed(std::span<const GpEmulator> emulators, const GaussianState& state, int n_mc,
                                     std::uint64_t seed,
                                     const Eigen::Ref<const Eigen::VectorXd>& w_now = Eigen::VectorXd(0)) {
    if (n_mc < 2) throw InvalidArgument("step_mc: n_mc must be >= 2");
    const Eigen::Index dw = w_now.size();
    detail::check_emulator_dims(emulators, dw);
    const Eigen::Index d = static_cast<Eigen::Index>(emulators.size());
    detail::check_state(state, d);

    Eigen::MatrixXd samples(n_mc, d + dw);
    for (Eigen::Index l = 0; l < d; ++l) {
        std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(l)));
        std::normal_distribution<double> normal(0.0, 1.0);
        const double sd = std::sqrt(state.variance[l]);
        for (int s = 0; s < n_mc; ++s) samples(s, l) = state.mean[l] + sd * normal(rng);
    }
    for (Eigen::Index j = 0; j < dw; ++j) samples.col(d + j).setConstant(w_now[j]);

    McStepResult res;
    res.state.mean.resize(d);
    res.state.variance.resize(d);
    res.state.time_index = state.time_index + 1;
    res.mean_standard_error.resize(d);
    res.variance_standard_error.resize(d);
    Eigen::VectorXd means, vars;
    const double N = static_cast<double>(n_mc);
    for (Eigen::Index m = 0; m < d; ++m) {
        predict_batch(emulators[m], samples, means, vars);
        const double m_bar = means.mean();
        const Eigen::ArrayXd dev = means.array() - m_bar;
        const double var_of_means = dev.square().sum() / (N - 1.0);
        res.state.mean[m] = m_bar;
        res.state.variance[m] = vars.mean() + var_of_means;
        res.mean_standard_error[m] = std::sqrt(var_of_means / N);
        const Eigen::ArrayXd contrib = vars.array() + dev.square();
        const double c_bar = contrib.mean();
        res.variance_standard_error[m] = std::sqrt((contrib - c_bar).square().sum() / (N - 1.0) / N);
    }
    return res;
}

inline GaussianState step_mc(std::span<const GpEmulator> emulators, const GaussianState& state, int n_mc,
                             std::uint64_t seed, const Eigen::Ref<const Eigen::VectorXd>& w_now = Eigen::VectorXd(0)) {
    return step_mc_detailed(emulators, state, n_mc, seed, w_now).state;
}

struct ForecastOptions {
    Method method = Method::exact;
    int n_mc = 1000;
    std::uint64_t seed = 0;
    std::optional<ForcingTrajectory> forcing;
    /// A step whose variance exceeds divergence_factor * tau^2 aborts the run.
    double divergence_factor = 1e6;
};

/// One-step-ahead recursion from a known initial state, feeding each
/// step's moments forward. wall_time covers the propagation loop only.
inline TrajectoryForecast forecast(std::span<const GpEmulator> emulators, const Eigen::VectorXd& x0, long horizon,
                                   const ForecastOptions& opts = {}) {
    if (horizon < 1) throw InvalidArgument("forecast: horizon must be >= 1");
    const Eigen::Index dw = opts.forcing ? opts.forcing->values.cols() : 0;
    if (opts.forcing && dw < 1) throw InvalidArgument("forecast: forcing trajectory has no columns");
    detail::check_emulator_dims(emulators, dw);
    const Eigen::Index d = static_cast<Eigen::Index>(emulators.size());
    if (x0.size() != d) throw InvalidArgument("forecast: initial state dimension mismatch");
    if (!x0.allFinite()) throw InvalidArgument("forecast: initial state must be finite");
    if (opts.forcing) {
        if (opts.forcing->values.rows() < horizon) {
            throw InvalidArgument("forecast: forcing trajectory has " + std::to_string(opts.forcing->values.rows()) +
                                  " rows, need at least " + std::to_string(horizon));
        }
        if (!opts.forcing->values.allFinite()) throw InvalidArgument("forecast: forcing values must be finite");
    }
    if (opts.method == Method::mc && opts.n_mc < 2) throw InvalidArgument("forecast: n_mc must be >= 2");

    TrajectoryForecast out;
    out.method = opts.method;
    out.n_mc = opts.method == Method::mc ? opts.n_mc : 0;
    out.states.resize(static_cast<std::size_t>(horizon) + 1);
    for (auto& s : out.states) {
        s.mean.resize(d);
        s.variance.resize(d);
    }
    out.states[0] = GaussianState::known(x0, 0);

    Eigen::VectorXd tau2(d);
    for (Eigen::Index m = 0; m < d; ++m) tau2[m] = emulators[m].tau2();
    Eigen::VectorXd w(dw);

    const auto t_start = std::chrono::steady_clock::now();
    std::optional<ExactStepper> stepper;
    if (opts.method == Method::exact) stepper.emplace(emulators, dw);
    for (long s = 0; s < horizon; ++s) {
        const GaussianState& cur = out.states[s];
        GaussianState& next = out.states[s + 1];
        if (opts.forcing) w = opts.forcing->values.row(s).transpose();
        if (stepper) {
            stepper->step_into(cur, w, next);
        } else {
            next = step_mc(emulators, cur, opts.n_mc, derive_seed(opts.seed, static_cast<std::uint64_t>(s)), w);
        }
        for (Eigen::Index m = 0; m < d; ++m) {
            const double mu = next.mean[m], v = next.variance[m];
            if (!std::isfinite(mu) || !std::isfinite(v) || v > opts.divergence_factor * tau2[m]) {
                throw DivergenceError("forecast diverged at step " + std::to_string(s + 1) + " (coordinate " +
                                          std::to_string(m + 1) + ", variance " + std::to_string(v) + ")",
                                      s + 1);
            }
        }
    }
    out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return out;
}

/// CSV with header s,t,mean_1..mean_d,var_1..var_d and t = s*dt.
inline void write_forecast_csv(std::ostream& os, const TrajectoryForecast& fc, double dt) {
    const Eigen::Index d = fc.dim();
    os << "s,t";
    for (Eigen::Index m = 0; m < d; ++m) os << ",mean_" << m + 1;
    for (Eigen::Index m = 0; m < d; ++m) os << ",var_" << m + 1;
    os << '\n' << std::setprecision(17);
    for (std::size_t s = 0; s < fc.states.size(); ++s) {
        const auto& st = fc.states[s];
        os << s << ',' << static_cast<double>(s) * dt;
        for (Eigen::Index m = 0; m < d; ++m) os << ',' << st.mean[m];
        for (Eigen::Index m = 0; m < d; ++m) os << ',' << st.variance[m];
        os << '\n';
    }
}

}  // namespace linkgp
