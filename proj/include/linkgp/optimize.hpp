#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "linkgp/errors.hpp"

namespace linkgp {

struct BoxMinimizerOptions {
    int max_iterations = 200;
    int memory = 8;
    double projected_gradient_tol = 1e-6;
    double relative_f_tol = 1e-12;
    double fd_step = 1e-6;
    int max_backtracks = 40;
};

struct BoxMinimizerResult {
    Eigen::VectorXd x;
    double f = std::numeric_limits<double>::infinity();
    int iterations = 0;
    int evaluations = 0;
    bool converged = false;
    std::string message;
};

/// Bounded limited-memory quasi-Newton minimization (projected L-BFGS) with
/// central finite-difference gradients. The objective may return +inf to
/// mark an infeasible point; the line search backs away from it.
class BoxMinimizer {
public:
    using Objective = std::function<double(const Eigen::VectorXd&)>;

    BoxMinimizer(Eigen::VectorXd lower, Eigen::VectorXd upper, BoxMinimizerOptions opts = {})
        : lo_(std::move(lower)), hi_(std::move(upper)), opts_(opts) {
        if (lo_.size() != hi_.size()) throw InvalidArgument("BoxMinimizer: bound size mismatch");
        for (Eigen::Index k = 0; k < lo_.size(); ++k) {
            if (!(lo_[k] <= hi_[k])) throw InvalidArgument("BoxMinimizer: lower bound exceeds upper bound");
        }
    }

    Eigen::VectorXd project(Eigen::VectorXd x) const { return x.cwiseMax(lo_).cwiseMin(hi_); }

    BoxMinimizerResult minimize(const Objective& f, const Eigen::VectorXd& x0) const {
        if (x0.size() != lo_.size()) throw InvalidArgument("BoxMinimizer: start point has wrong dimension");
        BoxMinimizerResult res;
        auto eval = [&](const Eigen::VectorXd& x) {
            ++res.evaluations;
            const double v = f(x);
            return std::isnan(v) ? std::numeric_limits<double>::infinity() : v;
        };

        Eigen::VectorXd x = project(x0);
        double fx = eval(x);
        if (!std::isfinite(fx)) {
            res.x = x;
            res.message = "objective infeasible at start point";
            return res;
        }
        Eigen::VectorXd g = gradient(eval, x, fx);

        std::deque<Eigen::VectorXd> s_hist, y_hist;
        for (res.iterations = 0; res.iterations < opts_.max_iterations; ++res.iterations) {
            const Eigen::VectorXd pg = project(x - g) - x;
            if (pg.lpNorm<Eigen::Infinity>() < opts_.projected_gradient_tol) {
                res.converged = true;
                res.message = "projected gradient below tolerance";
                break;
            }

            // Variables pinned at a bound with the gradient pushing outward stay fixed.
            Eigen::VectorXd free_mask = Eigen::VectorXd::Ones(x.size());
            for (Eigen::Index k = 0; k < x.size(); ++k) {
                if ((x[k] <= lo_[k] && g[k] > 0.0) || (x[k] >= hi_[k] && g[k] < 0.0)) free_mask[k] = 0.0;
            }
            Eigen::VectorXd dir = -two_loop(g.cwiseProduct(free_mask), s_hist, y_hist).cwiseProduct(free_mask);
            if (dir.dot(g) >= 0.0) {
                s_hist.clear();
                y_hist.clear();
                dir = -g.cwiseProduct(free_mask);
            }

            double step = 1.0;
            if (s_hist.empty()) step = std::min(1.0, 1.0 / std::max(dir.lpNorm<Eigen::Infinity>(), 1e-12));
            Eigen::VectorXd x_new;
            double f_new = std::numeric_limits<double>::infinity();
            bool accepted = false;
            for (int bt = 0; bt < opts_.max_backtracks; ++bt) {
                x_new = project(x + step * dir);
                f_new = eval(x_new);
                if (std::isfinite(f_new) && f_new <= fx + 1e-4 * g.dot(x_new - x)) {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if (!accepted) {
                res.converged = true;
                res.message = "line search could not improve";
                break;
            }

            const Eigen::VectorXd g_new = gradient(eval, x_new, f_new);
            const Eigen::VectorXd s = x_new - x;
            const Eigen::VectorXd y = g_new - g;
            if (s.dot(y) > 1e-10 * s.norm() * y.norm()) {
                s_hist.push_back(s);
                y_hist.push_back(y);
                if (static_cast<int>(s_hist.size()) > opts_.memory) {
                    s_hist.pop_front();
                    y_hist.pop_front();
                }
            }
            const double f_old = fx;
            x = x_new;
            fx = f_new;
            g = g_new;
            if (std::abs(f_old - fx) <= opts_.relative_f_tol * std::max(1.0, std::abs(fx))) {
                res.converged = true;
                res.message = "relative objective change below tolerance";
                ++res.iterations;
                break;
            }
        }
        if (!res.converged) res.message = "iteration limit reached";
        res.x = x;
        res.f = fx;
        return res;
    }

private:
    template <class Eval>
    Eigen::VectorXd gradient(Eval& eval, const Eigen::VectorXd& x, double fx) const {
        const double h = opts_.fd_step;
        Eigen::VectorXd g(x.size());
        for (Eigen::Index k = 0; k < x.size(); ++k) {
            Eigen::VectorXd xp = x, xm = x;
            const bool up_ok = x[k] + h <= hi_[k];
            const bool down_ok = x[k] - h >= lo_[k];
            xp[k] += h;
            xm[k] -= h;
            const double fp = up_ok ? eval(xp) : std::numeric_limits<double>::infinity();
            const double fm = down_ok ? eval(xm) : std::numeric_limits<double>::infinity();
            if (std::isfinite(fp) && std::isfinite(fm)) {
                g[k] = (fp - fm) / (2.0 * h);
            } else if (std::isfinite(fp)) {
                g[k] = (fp - fx) / h;
            } else if (std::isfinite(fm)) {
                g[k] = (fx - fm) / h;
            } else {
                g[k] = 0.0;
            }
        }
        return g;
    }

    static Eigen::VectorXd two_loop(const Eigen::VectorXd& g, const std::deque<Eigen::VectorXd>& s_hist,
                                    const std::deque<Eigen::VectorXd>& y_hist) {
        Eigen::VectorXd q = g;
        const std::size_t m = s_hist.size();
        std::vector<double> alpha(m), rho(m);
        for (std::size_t i = m; i-- > 0;) {
            rho[i] = 1.0 / y_hist[i].dot(s_hist[i]);
            alpha[i] = rho[i] * s_hist[i].dot(q);
            q -= alpha[i] * y_hist[i];
        }
        if (m > 0) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
        for (std::size_t i = 0; i < m; ++i) {
            const double beta = rho[i] * y_hist[i].dot(q);
            q += (alpha[i] - beta) * s_hist[i];
        }
        return q;
    }

    Eigen::VectorXd lo_, hi_;
    BoxMinimizerOptions opts_;
};

}  // namespace linkgp
