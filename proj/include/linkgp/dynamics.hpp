#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "linkgp/errors.hpp"

namespace linkgp {

struct Interval {
    double lo = 0.0;
    double hi = 1.0;
};

/// dx/dt = rhs(t, x, w). `domain` is the box designs are drawn from; it does
/// not constrain integration.
struct OdeSystem {
    using Rhs = std::function<void(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& w, Eigen::VectorXd& dxdt)>;

    std::string name;
    int state_dim = 0;
    int forcing_dim = 0;
    std::map<std::string, double> params;
    Rhs rhs;
    std::vector<Interval> domain;
    std::vector<Interval> forcing_domain;

    Eigen::VectorXd eval(double t, const Eigen::VectorXd& x, const Eigen::VectorXd& w = Eigen::VectorXd(0)) const {
        if (x.size() != state_dim || w.size() != forcing_dim) throw InvalidArgument(name + ": rhs dimension mismatch");
        Eigen::VectorXd dx(state_dim);
        rhs(t, x, w, dx);
        return dx;
    }

    /// Design box: state block followed by forcing block.
    std::vector<Interval> design_box() const {
        std::vector<Interval> b = domain;
        b.insert(b.end(), forcing_domain.begin(), forcing_domain.end());
        return b;
    }
};

struct LotkaVolterraParams {
    double growth = 1.5;        // r_G
    double capacity = 10.0;     // K
    double predation = 1.5;     // r_I
    double assimilation = 1.0;  // k_AE
    double mortality = 2.0;     // r_M

    std::map<std::string, double> as_map() const {
        return {{"r_G", growth}, {"K", capacity}, {"r_I", predation}, {"k_AE", assimilation}, {"r_M", mortality}};
    }
};

namespace detail {
inline void check_lv(const LotkaVolterraParams& p) {
    for (double v : {p.growth, p.capacity, p.predation, p.assimilation, p.mortality}) {
        if (!(v > 0.0) || !std::isfinite(v)) throw InvalidArgument("lotka_volterra: parameters must be positive");
    }
}
}  // namespace detail

/// Predator-prey system with logistic prey growth; state (P, C).
inline OdeSystem lotka_volterra(const LotkaVolterraParams& p = {}) {
    detail::check_lv(p);
    OdeSystem sys;
    sys.name = "lotka_volterra";
    sys.state_dim = 2;
    sys.params = p.as_map();
    sys.rhs = [p](double, const Eigen::VectorXd& x, const Eigen::VectorXd&, Eigen::VectorXd& dx) {
        const double P = x[0], C = x[1];
        dx[0] = p.growth * P * (1.0 - P / p.capacity) - p.predation * P * C;
        dx[1] = p.assimilation * p.predation * P * C - p.mortality * C;
    };
    sys.domain = {{0.0, 5.0}, {0.0, 5.0}};
    return sys;
}

/// Prey equation alone, with the predator density supplied as a known
/// forcing input: state (P), forcing (C).
inline OdeSystem lotka_volterra_prey_forced(const LotkaVolterraParams& p = {}) {
    detail::check_lv(p);
    OdeSystem sys;
    sys.name = "lotka_volterra_forced";
    sys.state_dim = 1;
    sys.forcing_dim = 1;
    sys.params = p.as_map();
    sys.rhs = [p](double, const Eigen::VectorXd& x, const Eigen::VectorXd& w, Eigen::VectorXd& dx) {
        const double P = x[0], C = w[0];
        dx[0] = p.growth * P * (1.0 - P / p.capacity) - p.predation * P * C;
    };
    sys.domain = {{0.0, 5.0}};
    sys.forcing_domain = {{0.0, 5.0}};
    return sys;
}

struct LorenzParams {
    double a = -8.0 / 3.0;
    double b = -10.0;
    double c = 28.0;
};

/// dX = aX + YZ,  dY = b(Y - Z),  dZ = -XY + cY - Z.
inline OdeSystem lorenz(const LorenzParams& p = {}) {
    if (!std::isfinite(p.a) || !std::isfinite(p.b) || !std::isfinite(p.c)) {
        throw InvalidArgument("lorenz: parameters must be finite");
    }
    OdeSystem sys;
    sys.name = "lorenz";
    sys.state_dim = 3;
    sys.params = {{"a", p.a}, {"b", p.b}, {"c", p.c}};
    sys.rhs = [p](double, const Eigen::VectorXd& x, const Eigen::VectorXd&, Eigen::VectorXd& dx) {
        const double X = x[0], Y = x[1], Z = x[2];
        dx[0] = p.a * X + Y * Z;
        dx[1] = p.b * (Y - Z);
        dx[2] = -X * Y + p.c * Y - Z;
    };
    sys.domain = {{-10.0, 10.0}, {-10.0, 10.0}, {-10.0, 10.0}};
    return sys;
}

/// One monomial coef * prod_v z_v^powers[v] over z = (x, w).
struct PolynomialTerm {
    double coef = 0.0;
    std::vector<int> powers;
};

/// A user-supplied system whose right-hand side is a polynomial in the
/// state and forcing variables.
inline OdeSystem polynomial_system(std::string name, int state_dim, int forcing_dim,
                                   std::vector<std::vector<PolynomialTerm>> equations, std::vector<Interval> domain,
                                   std::vector<Interval> forcing_domain = {}) {
    if (state_dim < 1 || forcing_dim < 0) throw InvalidArgument("polynomial_system: bad dimensions");
    if (static_cast<int>(equations.size()) != state_dim) {
        throw InvalidArgument("polynomial_system: need one equation per state variable");
    }
    const std::size_t nvars = static_cast<std::size_t>(state_dim + forcing_dim);
    for (const auto& eq : equations) {
        for (const auto& term : eq) {
            if (term.powers.size() != nvars) throw InvalidArgument("polynomial_system: term has wrong power count");
            if (!std::isfinite(term.coef)) throw InvalidArgument("polynomial_system: non-finite coefficient");
            for (int pw : term.powers) {
                if (pw < 0) throw InvalidArgument("polynomial_system: negative power");
            }
        }
    }
    if (static_cast<int>(domain.size()) != state_dim || static_cast<int>(forcing_domain.size()) != forcing_dim) {
        throw InvalidArgument("polynomial_system: domain sizes must match dimensions");
    }
    OdeSystem sys;
    sys.name = std::move(name);
    sys.state_dim = state_dim;
    sys.forcing_dim = forcing_dim;
    sys.domain = std::move(domain);
    sys.forcing_domain = std::move(forcing_domain);
    sys.rhs = [equations = std::move(equations), state_dim](double, const Eigen::VectorXd& x, const Eigen::VectorXd& w,
                                                           Eigen::VectorXd& dx) {
        for (int e = 0; e < state_dim; ++e) {
            double acc = 0.0;
            for (const auto& term : equations[e]) {
                double v = term.coef;
                for (std::size_t k = 0; k < term.powers.size(); ++k) {
                    const double z = k < static_cast<std::size_t>(state_dim) ? x[k] : w[k - state_dim];
                    for (int r = 0; r < term.powers[k]; ++r) v *= z;
                }
                acc += v;
            }
            dx[e] = acc;
        }
    };
    return sys;
}

struct IntegratorConfig {
    double rel_tol = 1e-8;
    double abs_tol = 1e-10;
    double max_step = std::numeric_limits<double>::infinity();
    long max_steps = 10'000'000;

    void validate() const {
        if (!(rel_tol > 0.0 && rel_tol < 1.0) || !(abs_tol > 0.0 && abs_tol < 1.0)) {
            throw InvalidArgument("integrator tolerances must lie in (0, 1)");
        }
        if (!(max_step > 0.0)) throw InvalidArgument("integrator max_step must be positive");
    }
};

/// States sampled at t0 + s * dt_output; row s of `states` is x(times[s]).
struct Trajectory {
    Eigen::VectorXd times;
    Eigen::MatrixXd states;
};

using ForcingFunction = std::function<Eigen::VectorXd(double)>;

namespace detail {

inline long output_count(double t0, double t1, double dt_output) {
    if (!(t1 >= t0)) throw InvalidArgument("integrate: time span must be increasing");
    if (t1 == t0) return 0;
    if (!(dt_output > 0.0)) throw InvalidArgument("integrate: output spacing must be positive");
    const double ratio = (t1 - t0) / dt_output;
    const double steps = std::round(ratio);
    if (std::abs(ratio - steps) > 1e-9 * std::max(1.0, steps)) {
        throw InvalidArgument("integrate: time span is not an integer multiple of the output spacing");
    }
    return static_cast<long>(steps);
}

/// Dormand-Prince 5(4) with FSAL and standard step-size control.
class DormandPrince {
public:
    DormandPrince(const OdeSystem& sys, const IntegratorConfig& cfg, const ForcingFunction* forcing)
        : sys_(sys), cfg_(cfg), forcing_(forcing), n_(sys.state_dim) {
        for (auto* v : {&k1_, &k2_, &k3_, &k4_, &k5_, &k6_, &k7_, &ytmp_, &ynew_, &err_}) v->resize(n_);
    }

    void rhs(double t, const Eigen::VectorXd& x, Eigen::VectorXd& dx) {
        if (sys_.forcing_dim > 0) {
            w_ = (*forcing_)(t);
            if (w_.size() != sys_.forcing_dim) throw InvalidArgument("forcing function returned wrong dimension");
        } else {
            w_.resize(0);
        }
        sys_.rhs(t, x, w_, dx);
    }

    /// Advances (t, y) to exactly t_target.
    void advance(double& t, Eigen::VectorXd& y, double t_target) {
        if (!started_) {
            rhs(t, y, k1_);
            h_ = initial_step(t, y, t_target - t);
            started_ = true;
        }
        constexpr double eps = std::numeric_limits<double>::epsilon();
        while (t < t_target) {
            const double remaining = t_target - t;
            const bool last = h_ >= remaining;
            const double h = last ? remaining : h_;
            if (h < 16.0 * eps * std::max(1.0, std::abs(t))) {
                throw StiffnessError("integrator step size underflow at t=" + std::to_string(t), t);
            }
            if (++steps_ > cfg_.max_steps) {
                throw StiffnessError("integrator exceeded the step budget at t=" + std::to_string(t), t);
            }
            const double e = attempt(t, y, h);
            if (!std::isfinite(e)) {
                h_ = 0.2 * h;
                continue;
            }
            double fac = e == 0.0 ? 10.0 : 0.9 * std::pow(e, -0.2);
            if (e <= 1.0) {
                t = last ? t_target : t + h;
                y = ynew_;
                k1_ = k7_;
                fac = std::min(rejected_ ? 1.0 : 10.0, std::max(0.2, fac));
                rejected_ = false;
                h_ = std::min(cfg_.max_step, last ? std::max(h_, h * fac) : h * fac);
            } else {
                rejected_ = true;
                h_ = h * std::max(0.2, fac);
            }
        }
    }

private:
    double attempt(double t, const Eigen::VectorXd& y, double h) {
        static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
        static constexpr double a21 = 1.0 / 5;
        static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
        static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
        static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                                a54 = -212.0 / 729;
        static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                                a65 = -5103.0 / 18656;
        static constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                                a76 = 11.0 / 84;
        static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                                e6 = 22.0 / 525, e7 = -1.0 / 40;

        ytmp_ = y + h * a21 * k1_;
        rhs(t + c2 * h, ytmp_, k2_);
        ytmp_ = y + h * (a31 * k1_ + a32 * k2_);
        rhs(t + c3 * h, ytmp_, k3_);
        ytmp_ = y + h * (a41 * k1_ + a42 * k2_ + a43 * k3_);
        rhs(t + c4 * h, ytmp_, k4_);
        ytmp_ = y + h * (a51 * k1_ + a52 * k2_ + a53 * k3_ + a54 * k4_);
        rhs(t + c5 * h, ytmp_, k5_);
        ytmp_ = y + h * (a61 * k1_ + a62 * k2_ + a63 * k3_ + a64 * k4_ + a65 * k5_);
        rhs(t + h, ytmp_, k6_);
        ynew_ = y + h * (a71 * k1_ + a73 * k3_ + a74 * k4_ + a75 * k5_ + a76 * k6_);
        rhs(t + h, ynew_, k7_);
        err_ = h * (e1 * k1_ + e3 * k3_ + e4 * k4_ + e5 * k5_ + e6 * k6_ + e7 * k7_);

        double acc = 0.0;
        for (Eigen::Index i = 0; i < n_; ++i) {
            const double sc = cfg_.abs_tol + cfg_.rel_tol * std::max(std::abs(y[i]), std::abs(ynew_[i]));
            acc += (err_[i] / sc) * (err_[i] / sc);
        }
        return std::sqrt(acc / static_cast<double>(n_));
    }

    double initial_step(double t, const Eigen::VectorXd& y, double span) {
        Eigen::VectorXd sc = (cfg_.abs_tol + cfg_.rel_tol * y.array().abs()).matrix();
        const double d0 = std::sqrt((y.array() / sc.array()).square().mean());
        const double d1 = std::sqrt((k1_.array() / sc.array()).square().mean());
        double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
        h0 = std::min(h0, span);
        Eigen::VectorXd y1 = y + h0 * k1_;
        Eigen::VectorXd f1(n_);
        rhs(t + h0, y1, f1);
        const double d2 = std::sqrt(((f1 - k1_).array() / sc.array()).square().mean()) / h0;
        const double dm = std::max(d1, d2);
        const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
        return std::min({100.0 * h0, h1, cfg_.max_step});
    }

    const OdeSystem& sys_;
    const IntegratorConfig& cfg_;
    const ForcingFunction* forcing_;
    Eigen::Index n_;
    Eigen::VectorXd k1_, k2_, k3_, k4_, k5_, k6_, k7_, ytmp_, ynew_, err_, w_;
    double h_ = 0.0;
    bool started_ = false;
    bool rejected_ = false;
    long steps_ = 0;
};

}  // namespace detail

/// Adaptive Dormand-Prince integration with output every dt_output.
inline Trajectory integrate(const OdeSystem& sys, const Eigen::VectorXd& x0, double t0, double t1, double dt_output,
                            const IntegratorConfig& cfg = {}, const ForcingFunction& forcing = nullptr) {
    cfg.validate();
    if (x0.size() != sys.state_dim) throw InvalidArgument("integrate: initial state dimension mismatch");
    if (!x0.allFinite()) throw InvalidArgument("integrate: initial state must be finite");
    if (sys.forcing_dim > 0 && !forcing) throw InvalidArgument("integrate: system needs a forcing function");
    const long steps = detail::output_count(t0, t1, dt_output);

    Trajectory tr;
    tr.times.resize(steps + 1);
    tr.states.resize(steps + 1, sys.state_dim);
    tr.times[0] = t0;
    tr.states.row(0) = x0.transpose();

    detail::DormandPrince dp(sys, cfg, &forcing);
    double t = t0;
    Eigen::VectorXd y = x0;
    for (long s = 1; s <= steps; ++s) {
        const double target = s == steps ? t1 : t0 + static_cast<double>(s) * dt_output;
        dp.advance(t, y, target);
        if (!y.allFinite()) throw StiffnessError("integrate: state became non-finite at t=" + std::to_string(t), t);
        tr.times[s] = target;
        tr.states.row(s) = y.transpose();
    }
    return tr;
}

/// Classical fixed-step RK4, used as an order check for the adaptive solver.
inline Eigen::VectorXd integrate_rk4(const OdeSystem& sys, const Eigen::VectorXd& x0, double t0, double t1, double h,
                                     const ForcingFunction& forcing = nullptr) {
    const long steps = detail::output_count(t0, t1, h);
    if (sys.forcing_dim > 0 && !forcing) throw InvalidArgument("integrate_rk4: system needs a forcing function");
    auto f = [&](double t, const Eigen::VectorXd& x) {
        return sys.eval(t, x, sys.forcing_dim > 0 ? forcing(t) : Eigen::VectorXd(0));
    };
    Eigen::VectorXd x = x0;
    for (long s = 0; s < steps; ++s) {
        const double t = t0 + static_cast<double>(s) * h;
        const Eigen::VectorXd k1 = f(t, x);
        const Eigen::VectorXd k2 = f(t + 0.5 * h, x + 0.5 * h * k1);
        const Eigen::VectorXd k3 = f(t + 0.5 * h, x + 0.5 * h * k2);
        const Eigen::VectorXd k4 = f(t + h, x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return x;
}

/// Training pairs for the one-step flow map: inputs are design rows
/// (state block, then forcing block), outputs the state dt later.
struct FlowMapDataset {
    Eigen::MatrixXd inputs;
    Eigen::MatrixXd outputs;
    double dt = 0.0;
};

/// Forcing is held at the row's design value over the whole step.
inline FlowMapDataset generate_flowmap_data(const OdeSystem& sys, const Eigen::MatrixXd& design, double dt,
                                            const IntegratorConfig& cfg = {}) {
    const int d = sys.state_dim, dw = sys.forcing_dim;
    if (design.cols() != d + dw) {
        throw InvalidArgument("generate_flowmap_data: design must have state_dim + forcing_dim columns");
    }
    if (!(dt >= 0.0)) throw InvalidArgument("generate_flowmap_data: dt must be non-negative");
    FlowMapDataset ds;
    ds.inputs = design;
    ds.outputs.resize(design.rows(), d);
    ds.dt = dt;
    for (Eigen::Index i = 0; i < design.rows(); ++i) {
        const Eigen::VectorXd x0 = design.row(i).head(d).transpose();
        if (dt == 0.0) {
            ds.outputs.row(i) = x0.transpose();
            continue;
        }
        const Eigen::VectorXd w = design.row(i).tail(dw).transpose();
        ForcingFunction hold = nullptr;
        if (dw > 0) hold = [w](double) { return w; };
        try {
            const Trajectory tr = integrate(sys, x0, 0.0, dt, dt, cfg, hold);
            ds.outputs.row(i) = tr.states.row(1);
        } catch (const StiffnessError& e) {
            throw StiffnessError("flow-map row " + std::to_string(i) + ": " + e.what(), e.time);
        }
    }
    return ds;
}

inline void write_trajectory_csv(std::ostream& os, const Trajectory& tr) {
    os << "s,t";
    for (Eigen::Index k = 0; k < tr.states.cols(); ++k) os << ",x_" << k + 1;
    os << '\n' << std::setprecision(17);
    for (Eigen::Index s = 0; s < tr.states.rows(); ++s) {
        os << s << ',' << tr.times[s];
        for (Eigen::Index k = 0; k < tr.states.cols(); ++k) os << ',' << tr.states(s, k);
        os << '\n';
    }
}

inline void write_dataset_csv(std::ostream& os, const FlowMapDataset& ds, int forcing_dim = 0) {
    const Eigen::Index d = ds.outputs.cols();
    for (Eigen::Index k = 0; k < d; ++k) os << (k ? "," : "") << "in_x" << k + 1;
    for (int j = 0; j < forcing_dim; ++j) os << ",in_w" << j + 1;
    for (Eigen::Index k = 0; k < d; ++k) os << ",out_x" << k + 1;
    os << '\n' << std::setprecision(17);
    for (Eigen::Index i = 0; i < ds.inputs.rows(); ++i) {
        for (Eigen::Index c = 0; c < ds.inputs.cols(); ++c) os << (c ? "," : "") << ds.inputs(i, c);
        for (Eigen::Index k = 0; k < d; ++k) os << ',' << ds.outputs(i, k);
        os << '\n';
    }
}

}  // namespace linkgp
