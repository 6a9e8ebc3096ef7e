#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <vector>

#include "hypermixer/gemm.hpp"

namespace hmx::fft {

using Complex = std::complex<double>;

inline bool is_power_of_two(std::size_t n) { return n && !(n & (n - 1)); }

inline std::size_t next_power_of_two(std::size_t n)
{
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

/// In-place iterative radix-2 FFT; size must be a power of two.
inline void radix2(std::vector<Complex>& a, bool inverse)
{
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        const Complex wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            Complex w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const Complex u = a[i + k];
                const Complex v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

/// Forward DFT of arbitrary length via Bluestein's chirp-z identity, reduced to
/// zero-padded power-of-two FFTs.
class Bluestein {
public:
    explicit Bluestein(std::size_t n) : n_(n), m_(next_power_of_two(2 * n - 1)), chirp_(n), kernel_(m_)
    {
        for (std::size_t k = 0; k < n; ++k) {
            // k^2 mod 2n keeps the angle argument small
            const auto kk = static_cast<double>((k * k) % (2 * n));
            const double ang = std::numbers::pi * kk / static_cast<double>(n);
            chirp_[k] = Complex(std::cos(ang), -std::sin(ang));
        }
        kernel_[0] = std::conj(chirp_[0]);
        for (std::size_t k = 1; k < n; ++k) kernel_[k] = kernel_[m_ - k] = std::conj(chirp_[k]);
        radix2(kernel_, false);
    }

    std::vector<Complex> operator()(const std::vector<Complex>& x) const
    {
        std::vector<Complex> a(m_);
        for (std::size_t k = 0; k < n_; ++k) a[k] = x[k] * chirp_[k];
        radix2(a, false);
        for (std::size_t i = 0; i < m_; ++i) a[i] *= kernel_[i];
        radix2(a, true);
        std::vector<Complex> out(n_);
        for (std::size_t k = 0; k < n_; ++k) out[k] = a[k] * chirp_[k];
        return out;
    }

private:
    std::size_t n_, m_;
    std::vector<Complex> chirp_, kernel_;
};

/// Lengths up to this use the O(n^2) cosine-matrix product.
inline constexpr std::size_t naive_limit = 64;

/// out[k, f] = sum_j x[j, f] cos(2 pi j k / n) for an n x d row-major block.
/// This is the real part of the DFT along the first axis; the cosine matrix is
/// symmetric, so the same routine also serves as its own adjoint.
template <class T>
void real_dft_rows(const T* x, std::size_t n, std::size_t d, T* out)
{
    if (n == 0) return;
    if (n <= naive_limit) {
        std::vector<T> c(n * n);
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t j = 0; j < n; ++j)
                c[k * n + j] = static_cast<T>(
                    std::cos(2.0 * std::numbers::pi * static_cast<double>((j * k) % n) / static_cast<double>(n)));
        kernel::gemm(false, false, n, d, n, c.data(), x, out, false);
        return;
    }
    const bool pow2 = is_power_of_two(n);
    const Bluestein bluestein(pow2 ? 1 : n);
    std::vector<Complex> col(n);
    for (std::size_t f = 0; f < d; ++f) {
        for (std::size_t j = 0; j < n; ++j) col[j] = Complex(static_cast<double>(x[j * d + f]), 0.0);
        std::vector<Complex> y;
        if (pow2) {
            y = col;
            radix2(y, false);
        } else {
            y = bluestein(col);
        }
        for (std::size_t k = 0; k < n; ++k) out[k * d + f] = static_cast<T>(y[k].real());
    }
}

}  // namespace hmx::fft
