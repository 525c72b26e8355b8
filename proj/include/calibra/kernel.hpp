#pragma once

// One-dimensional sum kernel: squared exponential plus white noise.
//   k(x, x') = s2 * exp(-(x - x')^2 / (2 l^2)) + n2 * [same index]
// Parameters are held as logarithms of s2, l^2 and n2.

#include "calibra/core.hpp"

#include <cmath>
#include <span>

namespace calibra {

struct KernelParams {
    double log_signal_variance = 0.0;             // ln s2
    double log_lengthscale_sq = std::log(100.0);  // ln l^2
    double log_noise_variance = std::log(1e-4);   // ln n2

    static KernelParams from_natural(double signal_variance, double lengthscale, double noise_variance)
    {
        return {std::log(signal_variance), 2.0 * std::log(lengthscale), std::log(noise_variance)};
    }

    double signal_variance() const { return std::exp(log_signal_variance); }
    double lengthscale_sq() const { return std::exp(log_lengthscale_sq); }
    double lengthscale() const { return std::exp(0.5 * log_lengthscale_sq); }
    double noise_variance() const { return std::exp(log_noise_variance); }

    bool finite() const
    {
        return std::isfinite(log_signal_variance) && std::isfinite(log_lengthscale_sq) &&
               std::isfinite(log_noise_variance);
    }
};

/// Jitter added to the diagonal of every self-gram that gets factorized.
inline constexpr double kJitter = 1e-8;

inline double rbf(double x, double x2, const KernelParams& p)
{
    const double r = x - x2;
    return p.signal_variance() * std::exp(-0.5 * r * r / p.lengthscale_sq());
}

namespace detail {
inline void require_finite(std::span<const double> x)
{
    for (double v : x)
        if (!std::isfinite(v)) throw InputError("kernel input is not finite");
}
}  // namespace detail

/// Covariance between x and x2. The noise term lands on the diagonal only
/// when include_noise is set, which callers use for self-grams.
inline Matrix gram(std::span<const double> x, std::span<const double> x2, const KernelParams& p,
                   bool include_noise)
{
    detail::require_finite(x);
    detail::require_finite(x2);
    const double s2 = p.signal_variance();
    const double inv_l2 = 1.0 / p.lengthscale_sq();
    Matrix K(x.size(), x2.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = 0; j < x2.size(); ++j) {
            const double r = x[i] - x2[j];
            K(i, j) = s2 * std::exp(-0.5 * r * r * inv_l2);
        }
    if (include_noise) {
        const double n2 = p.noise_variance();
        for (std::size_t i = 0; i < std::min(x.size(), x2.size()); ++i) K(i, i) += n2;
    }
    return K;
}

inline Matrix gram(std::span<const double> x, const KernelParams& p, bool include_noise)
{
    return gram(x, x, p, include_noise);
}

struct KernelGradients {
    Matrix d_log_signal_variance;
    Matrix d_log_lengthscale_sq;
    Matrix d_log_noise_variance;
};

inline KernelGradients gram_grad(std::span<const double> x, std::span<const double> x2, const KernelParams& p,
                                 bool include_noise)
{
    KernelGradients g;
    g.d_log_signal_variance = gram(x, x2, p, false);
    g.d_log_lengthscale_sq = g.d_log_signal_variance;
    const double inv_l2 = 1.0 / p.lengthscale_sq();
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = 0; j < x2.size(); ++j) {
            const double r = x[i] - x2[j];
            g.d_log_lengthscale_sq(i, j) *= 0.5 * r * r * inv_l2;
        }
    g.d_log_noise_variance = Matrix::Zero(x.size(), x2.size());
    if (include_noise) {
        const double n2 = p.noise_variance();
        for (std::size_t i = 0; i < std::min(x.size(), x2.size()); ++i) g.d_log_noise_variance(i, i) = n2;
    }
    return g;
}

}  // namespace calibra
