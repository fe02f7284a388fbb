#pragma once

// Complex FFT: iterative radix-2 for power-of-two lengths, Bluestein's
// chirp-z algorithm for everything else. Enough for the slow-time spectra
// this library needs; tests compare against a naive DFT.

#include <complex>
#include <vector>

#include "somnoradar/common.hpp"

namespace somnoradar::fft {

using cdouble = std::complex<double>;

namespace detail {

inline bool is_pow2(std::size_t n) { return n && (n & (n - 1)) == 0; }

inline std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

inline void fft_pow2(std::vector<cdouble>& a, bool inverse) {
    const std::size_t n = a.size();
    if (n < 2) return;
    // bit-reversal permutation
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        double ang = 2.0 * M_PI / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        cdouble wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            cdouble w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                cdouble u = a[i + k];
                cdouble v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
    if (inverse) {
        for (auto& x : a) x /= static_cast<double>(n);
    }
}

}  // namespace detail

/// In-place DFT of arbitrary length. `inverse` applies the 1/n-normalized
/// inverse transform.
inline void transform(std::vector<cdouble>& a, bool inverse = false) {
    const std::size_t n = a.size();
    if (n < 2) return;
    if (detail::is_pow2(n)) {
        detail::fft_pow2(a, inverse);
        return;
    }
    // Bluestein: x_k e^{-i pi k^2 / n} convolved with chirp.
    const std::size_t m = detail::next_pow2(2 * n - 1);
    std::vector<cdouble> u(m, cdouble(0.0, 0.0)), v(m, cdouble(0.0, 0.0));
    std::vector<cdouble> chirp(n);
    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t k = 0; k < n; ++k) {
        // k^2 mod 2n keeps the angle argument small for long inputs
        std::uint64_t k2 = (static_cast<std::uint64_t>(k) * k) % (2 * n);
        double ang = sign * M_PI * static_cast<double>(k2) / static_cast<double>(n);
        chirp[k] = cdouble(std::cos(ang), std::sin(ang));
    }
    for (std::size_t k = 0; k < n; ++k) u[k] = a[k] * chirp[k];
    v[0] = std::conj(chirp[0]);
    for (std::size_t k = 1; k < n; ++k) v[k] = v[m - k] = std::conj(chirp[k]);
    detail::fft_pow2(u, false);
    detail::fft_pow2(v, false);
    for (std::size_t k = 0; k < m; ++k) u[k] *= v[k];
    detail::fft_pow2(u, true);
    for (std::size_t k = 0; k < n; ++k) a[k] = u[k] * chirp[k];
    if (inverse) {
        for (auto& x : a) x /= static_cast<double>(n);
    }
}

inline std::vector<cdouble> forward(const std::vector<cdouble>& a) {
    std::vector<cdouble> out = a;
    transform(out, false);
    return out;
}

inline std::vector<cdouble> forward_real(const std::vector<double>& a) {
    std::vector<cdouble> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = cdouble(a[i], 0.0);
    transform(out, false);
    return out;
}

/// Hann window of length n (periodic form).
inline std::vector<double> hann_window(std::size_t n) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i)
        w[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n));
    return w;
}

}  // namespace somnoradar::fft
