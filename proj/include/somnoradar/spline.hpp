#pragma once

// Natural cubic spline through strictly increasing knots. Used by the
// multivariate sifting envelopes.

#include <cstddef>
#include <vector>

#include "somnoradar/common.hpp"

namespace somnoradar {

class CubicSpline {
  public:
    CubicSpline(const std::vector<double>& x, const std::vector<double>& y) : x_(x), y_(y) {
        const std::size_t n = x.size();
        if (n != y.size() || n < 2) throw ParameterError("spline: need >= 2 matched knots");
        for (std::size_t i = 1; i < n; ++i)
            if (!(x[i] > x[i - 1])) throw ParameterError("spline: knots must be strictly increasing");
        m_.assign(n, 0.0);
        if (n == 2) return;  // degenerates to the connecting line
        // Tridiagonal system for second derivatives, natural boundary (m0 = mN-1 = 0).
        std::vector<double> h(n - 1), alpha(n, 0.0), l(n), mu(n), z(n);
        for (std::size_t i = 0; i + 1 < n; ++i) h[i] = x[i + 1] - x[i];
        for (std::size_t i = 1; i + 1 < n; ++i)
            alpha[i] = 3.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
        l[0] = 1.0;
        mu[0] = 0.0;
        z[0] = 0.0;
        for (std::size_t i = 1; i + 1 < n; ++i) {
            l[i] = 2.0 * (x[i + 1] - x[i - 1]) - h[i - 1] * mu[i - 1];
            mu[i] = h[i] / l[i];
            z[i] = (alpha[i] - h[i - 1] * z[i - 1]) / l[i];
        }
        z[n - 1] = 0.0;
        for (std::size_t i = n - 1; i-- > 1;) m_[i] = z[i] - mu[i] * m_[i + 1];
    }

    /// Evaluate at a single point (linear extrapolation beyond the knots).
    double operator()(double q) const {
        const std::size_t n = x_.size();
        std::size_t i = segment(q);
        double h = x_[i + 1] - x_[i];
        if (q <= x_.front()) {
            double slope = (y_[1] - y_[0]) / (x_[1] - x_[0]) - (x_[1] - x_[0]) * m_[1] / 6.0;
            return y_[0] + slope * (q - x_[0]);
        }
        if (q >= x_.back()) {
            double hL = x_[n - 1] - x_[n - 2];
            double slope = (y_[n - 1] - y_[n - 2]) / hL + hL * m_[n - 2] / 6.0;
            return y_[n - 1] + slope * (q - x_[n - 1]);
        }
        double a = (x_[i + 1] - q) / h;
        double b = (q - x_[i]) / h;
        return a * y_[i] + b * y_[i + 1] +
               ((a * a * a - a) * m_[i] + (b * b * b - b) * m_[i + 1]) * h * h / 6.0;
    }

    /// Evaluate at integer sample positions [0, count) in one sweep.
    std::vector<double> sample(std::size_t count) const {
        std::vector<double> out(count);
        for (std::size_t q = 0; q < count; ++q) out[q] = (*this)(static_cast<double>(q));
        return out;
    }

  private:
    std::size_t segment(double q) const {
        // binary search for the interval containing q
        const std::size_t n = x_.size();
        if (q <= x_[0]) return 0;
        if (q >= x_[n - 1]) return n - 2;
        std::size_t lo = 0, hi = n - 1;
        while (hi - lo > 1) {
            std::size_t mid = (lo + hi) / 2;
            if (x_[mid] <= q)
                lo = mid;
            else
                hi = mid;
        }
        return lo;
    }

    std::vector<double> x_, y_;
    std::vector<double> m_;  // second derivatives at knots
};

}  // namespace somnoradar
