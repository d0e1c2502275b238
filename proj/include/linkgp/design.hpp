#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "linkgp/dynamics.hpp"
#include "linkgp/errors.hpp"

namespace linkgp {

struct DesignSpec {
    Eigen::Index n = 0;
    std::vector<Interval> box;
    std::uint64_t seed = 0;
    int maximin_iters = 10'000;

    void validate() const {
        if (n < 2) throw InvalidArgument("design: need at least 2 points");
        if (box.empty()) throw InvalidArgument("design: box has no dimensions");
        for (const auto& iv : box) {
            if (!(iv.lo < iv.hi)) throw InvalidArgument("design: every interval needs lo < hi");
        }
        if (maximin_iters < 0) throw InvalidArgument("design: maximin_iters must be non-negative");
    }
};

/// Rule of thumb: twelve design points per input dimension.
inline Eigen::Index default_n(int d, int d_w = 0) {
    if (d < 1 || d_w < 0) throw InvalidArgument("default_n: need d >= 1 and d_w >= 0");
    return 12 * static_cast<Eigen::Index>(d + d_w);
}

/// Smallest pairwise Euclidean distance among the rows.
inline double min_pairwise_distance(const Eigen::MatrixXd& pts) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < pts.rows(); ++j) best = std::min(best, (pts.row(i) - pts.row(j)).squaredNorm());
    }
    return std::sqrt(best);
}

namespace detail {

class MaximinState {
    using LongVector = Eigen::Matrix<long, Eigen::Dynamic, 1>;

public:
    explicit MaximinState(const Eigen::MatrixXi& cells) : cells_(cells), n_(cells.rows()), dist_(n_, n_) {
        for (Eigen::Index i = 0; i < n_; ++i) {
            dist_(i, i) = std::numeric_limits<long>::max();
            for (Eigen::Index j = 0; j < i; ++j) dist_(i, j) = dist_(j, i) = sqdist(i, j);
        }
        summarize(min_, count_);
    }

    long min() const { return min_; }
    long count() const { return count_; }

    /// Swaps column `c` of rows i and j if that raises the minimum distance,
    /// or keeps it while reducing the number of closest pairs.
    bool try_swap(Eigen::Index c, Eigen::Index i, Eigen::Index j) {
        std::swap(cells_(i, c), cells_(j, c));
        const LongVector saved_i = dist_.row(i).transpose();
        const LongVector saved_j = dist_.row(j).transpose();
        refresh_row(i);
        refresh_row(j);
        long new_min = 0, new_count = 0;
        summarize(new_min, new_count);
        if (new_min > min_ || (new_min == min_ && new_count < count_)) {
            min_ = new_min;
            count_ = new_count;
            return true;
        }
        std::swap(cells_(i, c), cells_(j, c));
        dist_.row(i) = saved_i.transpose();
        dist_.col(i) = saved_i;
        dist_.row(j) = saved_j.transpose();
        dist_.col(j) = saved_j;
        return false;
    }

    const Eigen::MatrixXi& cells() const { return cells_; }

private:
    long sqdist(Eigen::Index i, Eigen::Index j) const {
        long s = 0;
        for (Eigen::Index c = 0; c < cells_.cols(); ++c) {
            const long diff = cells_(i, c) - cells_(j, c);
            s += diff * diff;
        }
        return s;
    }

    void refresh_row(Eigen::Index i) {
        for (Eigen::Index j = 0; j < n_; ++j) {
            if (j == i) continue;
            dist_(i, j) = dist_(j, i) = sqdist(i, j);
        }
    }

    void summarize(long& mn, long& cnt) const {
        mn = std::numeric_limits<long>::max();
        cnt = 0;
        for (Eigen::Index i = 0; i < n_; ++i) {
            for (Eigen::Index j = i + 1; j < n_; ++j) {
                const long v = dist_(i, j);
                if (v < mn) {
                    mn = v;
                    cnt = 1;
                } else if (v == mn) {
                    ++cnt;
                }
            }
        }
    }

    Eigen::MatrixXi cells_;
    Eigen::Index n_;
    Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic> dist_;
    long min_ = 0;
    long count_ = 0;
};

}  // namespace detail

/// Latin hypercube with midpoint placement, post-optimized by within-column
/// swaps toward maximin distance. Swaps only permute a column, so the
/// one-point-per-stratum property survives every accepted move. With
/// maximin_iters = 0 this is the plain random LHS for the same seed.
inline Eigen::MatrixXd maximin_lhs(const DesignSpec& spec) {
    spec.validate();
    const Eigen::Index n = spec.n;
    const Eigen::Index p = static_cast<Eigen::Index>(spec.box.size());
    std::mt19937_64 rng(spec.seed);

    Eigen::MatrixXi cells(n, p);
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (Eigen::Index c = 0; c < p; ++c) {
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        for (Eigen::Index i = 0; i < n; ++i) cells(i, c) = perm[static_cast<std::size_t>(i)];
    }

    // Distances are measured on the integer stratum grid (the unit cube
    // scaled by n), so every comparison is exact.
    if (spec.maximin_iters > 0 && n > 2) {
        detail::MaximinState state(cells);
        std::uniform_int_distribution<Eigen::Index> col(0, p - 1), row(0, n - 1);
        for (int it = 0; it < spec.maximin_iters; ++it) {
            const Eigen::Index c = col(rng);
            const Eigen::Index i = row(rng);
            Eigen::Index j = row(rng);
            if (i == j) continue;
            state.try_swap(c, i, j);
        }
        cells = state.cells();
    }

    Eigen::MatrixXd pts(n, p);
    for (Eigen::Index c = 0; c < p; ++c) {
        const double lo = spec.box[c].lo, width = (spec.box[c].hi - spec.box[c].lo) / static_cast<double>(n);
        for (Eigen::Index i = 0; i < n; ++i) pts(i, c) = lo + (static_cast<double>(cells(i, c)) + 0.5) * width;
    }
    return pts;
}

inline void write_design_csv(std::ostream& os, const Eigen::MatrixXd& pts) {
    for (Eigen::Index c = 0; c < pts.cols(); ++c) os << (c ? "," : "") << "x_" << c + 1;
    os << '\n' << std::setprecision(17);
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
        for (Eigen::Index c = 0; c < pts.cols(); ++c) os << (c ? "," : "") << pts(i, c);
        os << '\n';
    }
}

/// Reads a numeric CSV; a first line that does not parse as numbers is
/// taken as a header and skipped.
inline Eigen::MatrixXd read_numeric_csv(std::istream& is) {
    std::vector<std::vector<double>> rows;
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
        if (line.empty() || line == "\r") continue;
        std::vector<double> vals;
        std::stringstream ss(line);
        std::string cell;
        bool numeric = true;
        while (std::getline(ss, cell, ',')) {
            try {
                std::size_t used = 0;
                vals.push_back(std::stod(cell, &used));
                while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
                if (used != cell.size()) numeric = false;
            } catch (const std::exception&) {
                numeric = false;
            }
        }
        if (!numeric) {
            if (first) {
                first = false;
                continue;
            }
            throw InvalidArgument("csv: non-numeric row: " + line);
        }
        first = false;
        if (!rows.empty() && rows.front().size() != vals.size()) throw InvalidArgument("csv: ragged rows");
        rows.push_back(std::move(vals));
    }
    if (rows.empty()) throw InvalidArgument("csv: no data rows");
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t c = 0; c < rows[i].size(); ++c) out(i, c) = rows[i][c];
    }
    return out;
}

}  // namespace linkgp
