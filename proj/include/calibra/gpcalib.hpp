#pragma once

// Latent Gaussian process calibration.
//
// A single latent function g ~ GP(mu, k) is applied to each of the K scores
// of a row and the calibrated output is softargmax(g(z_1), ..., g(z_K)).
// Inference is sparse variational: M inducing inputs w with q(u) = N(m, S),
// S = L L^T. The objective is
//
//   ELBO = sum_n E_q(g_n)[ln softargmax(g_n)_{y_n}] - KL(q(u) || p(u))
//
// where each expectation uses the second order Taylor expansion of the
// log-softargmax around the marginal mean. Gradients are derived by hand
// (reverse mode through the marginal moments) and fed to L-BFGS.

#include "calibra/core.hpp"
#include "calibra/kernel.hpp"
#include "calibra/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace calibra {

struct PriorMean {
    enum class Type { log, identity, affine };
    Type type = Type::identity;
    double slope = 1.0;
    double intercept = 0.0;

    static PriorMean log() { return {Type::log, 1.0, 0.0}; }
    static PriorMean identity() { return {Type::identity, 1.0, 0.0}; }
    static PriorMean affine(double a, double b) { return {Type::affine, a, b}; }

    double value(double x) const
    {
        switch (type) {
        case Type::log: return std::log(std::max(x, kProbFloor));
        case Type::identity: return x;
        case Type::affine: return slope * x + intercept;
        }
        return x;
    }

    double derivative(double x) const
    {
        switch (type) {
        case Type::log: return x > kProbFloor ? 1.0 / x : 0.0;
        case Type::identity: return 1.0;
        case Type::affine: return slope;
        }
        return 1.0;
    }
};

enum class CovStructure { diagonal, block_diagonal };

struct FitDiagnostics {
    double initial_elbo = kNaN;
    double final_elbo = kNaN;
    int iterations = 0;
    bool converged = false;
    bool single_class = false;  // only one label present in the calibration data
    std::vector<double> elbo_trace;  // ELBO after each accepted optimizer step, not persisted
};

struct GpCalibrationModel {
    Vector inducing_inputs;         // w, sorted ascending
    Vector variational_mean;        // m
    Matrix variational_cov_factor;  // L, lower triangular with positive diagonal
    KernelParams kernel;
    PriorMean prior_mean;
    ScoreKind input_kind = ScoreKind::logits;
    CovStructure cov_structure = CovStructure::diagonal;
    FitDiagnostics diagnostics;

    Eigen::Index num_inducing() const { return inducing_inputs.size(); }

    void validate() const
    {
        const auto M = num_inducing();
        if (M < 1) throw InputError("model needs at least one inducing input");
        if (variational_mean.size() != M || variational_cov_factor.rows() != M ||
            variational_cov_factor.cols() != M)
            throw InputError("variational parameter shapes do not match the inducing inputs");
        if (!inducing_inputs.allFinite() || !variational_mean.allFinite() || !variational_cov_factor.allFinite() ||
            !kernel.finite())
            throw InputError("model parameters are not finite");
        for (Eigen::Index i = 0; i < M; ++i) {
            if (!(variational_cov_factor(i, i) > 0.0))
                throw InputError("variational covariance factor needs a positive diagonal");
            for (Eigen::Index j = i + 1; j < M; ++j)
                if (variational_cov_factor(i, j) != 0.0)
                    throw InputError("variational covariance factor must be lower triangular");
        }
        for (Eigen::Index i = 1; i < M; ++i)
            if (inducing_inputs(i) < inducing_inputs(i - 1)) throw InputError("inducing inputs must be sorted");
        if (prior_mean.type == PriorMean::Type::log && input_kind != ScoreKind::simplex)
            throw InputError("the log prior mean requires simplex inputs");
    }
};

enum class LatentNoise { include, exclude };

struct LatentMarginal {
    Vector mean;  // phi
    Matrix cov;   // C
};

struct LatentPosterior {
    Vector grid;
    Vector mean;
    Vector variance;
};

struct ElboGradient {
    Vector d_mean;
    Matrix d_cov_factor;  // with respect to the lower triangle of L
    Vector d_inducing;
    Eigen::Vector3d d_log_kernel;  // ln s2, ln l^2, ln n2
};

struct ElboResult {
    double value = 0.0;
    ElboGradient grad;
};

namespace detail {

/// Prior over the inducing variables: N(mu(w), Kuu + jitter I).
struct InducingPrior {
    Matrix cov;
    Eigen::LLT<Matrix> chol;
    Matrix cov_inv;
    Vector mean;
    double log_det = 0.0;
};

inline InducingPrior inducing_prior(const GpCalibrationModel& model)
{
    const auto M = model.num_inducing();
    const std::span<const double> w(model.inducing_inputs.data(), static_cast<std::size_t>(M));
    InducingPrior p;
    p.cov = gram(w, model.kernel, true);
    p.cov.diagonal().array() += kJitter;
    p.chol.compute(p.cov);
    if (p.chol.info() != Eigen::Success) {
        throw NumericalError("Cholesky of the inducing covariance failed (M=" + std::to_string(M) +
                             ", lengthscale=" + std::to_string(model.kernel.lengthscale()) +
                             ", noise variance=" + std::to_string(model.kernel.noise_variance()) + ")");
    }
    p.cov_inv = p.chol.solve(Matrix::Identity(M, M));
    p.log_det = 2.0 * p.chol.matrixLLT().diagonal().array().log().sum();
    p.mean.resize(M);
    for (Eigen::Index j = 0; j < M; ++j) p.mean(j) = model.prior_mean.value(model.inducing_inputs(j));
    return p;
}

/// Cross covariance between the flattened inputs and the inducing inputs.
inline Matrix cross_gram(std::span<const double> x, const GpCalibrationModel& model)
{
    const std::span<const double> w(model.inducing_inputs.data(), static_cast<std::size_t>(model.num_inducing()));
    return gram(x, w, model.kernel, false);
}

inline double kl_from_prior(const GpCalibrationModel& model, const InducingPrior& prior)
{
    const auto M = model.num_inducing();
    const Matrix& L = model.variational_cov_factor;
    const Vector d = model.variational_mean - prior.mean;
    const Matrix whitened = prior.chol.matrixL().solve(L.triangularView<Eigen::Lower>().toDenseMatrix());
    const double trace_term = whitened.squaredNorm();
    const Vector dw = prior.chol.matrixL().solve(d);
    double log_det_s = 0.0;
    for (Eigen::Index i = 0; i < M; ++i) {
        if (!(L(i, i) > 0.0)) throw NumericalError("variational covariance is not positive definite");
        log_det_s += 2.0 * std::log(L(i, i));
    }
    return 0.5 * (trace_term + dw.squaredNorm() - static_cast<double>(M) + prior.log_det - log_det_s);
}

inline void check_inputs(const GpCalibrationModel& model, const Matrix& Z)
{
    if (!Z.allFinite()) throw InputError("calibration inputs are not finite");
    (void)model;
}

/// ELBO and, when grad is non-null, its gradient.
inline double elbo_impl(const GpCalibrationModel& model, const Matrix& Z, std::span<const int> labels,
                        ElboGradient* grad)
{
    check_inputs(model, Z);
    const auto M = model.num_inducing();
    const auto prior = inducing_prior(model);
    const Matrix& Sinv = prior.cov_inv;
    const Matrix L = model.variational_cov_factor.triangularView<Eigen::Lower>();
    const Matrix S = L * L.transpose();
    const Vector d = model.variational_mean - prior.mean;
    const Matrix D = S - prior.cov;
    const double kl = kl_from_prior(model, prior);

    const Eigen::Index N = Z.rows();
    const Eigen::Index K = Z.cols();
    const Eigen::Index R = N * K;
    const bool diagonal = model.cov_structure == CovStructure::diagonal;
    const double s2 = model.kernel.signal_variance();
    const double n2 = model.kernel.noise_variance();
    const double inv_l2 = 1.0 / model.kernel.lengthscale_sq();

    const std::span<const double> x(Z.data(), static_cast<std::size_t>(R));

    double expected = 0.0;
    Matrix Q = Matrix::Zero(M, M);  // sum_n A_n^T G_n A_n
    Matrix P = Matrix::Zero(M, M);  // A^T A_bar
    Vector grad_m_data = Vector::Zero(M);
    Vector grad_w = Vector::Zero(M);
    Eigen::Vector3d grad_k = Eigen::Vector3d::Zero();

    // Rows are processed in chunks so the N K x M intermediates stay in cache.
    constexpr Eigen::Index kChunkRows = 256;
    Matrix C(K, K);
    for (Eigen::Index n0 = 0; n0 < N; n0 += kChunkRows) {
        const Eigen::Index rows_in_chunk = std::min(kChunkRows, N - n0);
        const Eigen::Index Rc = rows_in_chunk * K;
        const auto xc = x.subspan(static_cast<std::size_t>(n0 * K), static_cast<std::size_t>(Rc));
        const Matrix Kxu = cross_gram(xc, model);
        const Matrix A = prior.chol.solve(Kxu.transpose()).transpose();
        Vector phi = A * d;
        for (Eigen::Index r = 0; r < Rc; ++r) phi(r) += model.prior_mean.value(xc[static_cast<std::size_t>(r)]);
        const Matrix AD = A * D;

        Vector c_diag;
        if (diagonal) c_diag = (s2 + n2) + AD.cwiseProduct(A).rowwise().sum().array();

        // Per-row adjoints.
        Vector g_phi;
        Vector g_cdiag;
        Matrix B;  // block case: G_n A_n stacked
        std::vector<Matrix> g_blocks;
        if (grad) {
            g_phi.resize(Rc);
            if (diagonal)
                g_cdiag.resize(Rc);
            else {
                B.resize(Rc, M);
                g_blocks.resize(static_cast<std::size_t>(rows_in_chunk));
            }
        }

        for (Eigen::Index n = 0; n < rows_in_chunk; ++n) {
            const auto rows = Eigen::seqN(n * K, K);
            const Vector ph = phi(rows);
            const Vector s = softargmax(ph);
            const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(n0 + n)]);
            const double log_s_y = ph(y) - log_sum_exp(ph);
            if (diagonal) {
                const Vector c = c_diag(rows);
                expected += log_s_y + 0.5 * (s.array().square() * c.array() - c.array() * s.array()).sum();
                if (grad) {
                    const Vector v = c.cwiseProduct(s) - 0.5 * c;
                    Vector gp = -s;
                    gp(y) += 1.0;
                    gp += s.cwiseProduct(v) - s * s.dot(v);
                    g_phi(rows) = gp;
                    g_cdiag(rows) = 0.5 * (s.array().square() - s.array());
                }
            } else {
                const auto xs = xc.subspan(static_cast<std::size_t>(n * K), static_cast<std::size_t>(K));
                C = gram(xs, model.kernel, true);
                C.noalias() += AD.middleRows(n * K, K) * A.middleRows(n * K, K).transpose();
                expected += log_s_y + 0.5 * (s.dot(C * s) - C.diagonal().dot(s));
                if (grad) {
                    const Vector v = C * s - 0.5 * C.diagonal();
                    Vector gp = -s;
                    gp(y) += 1.0;
                    gp += s.cwiseProduct(v) - s * s.dot(v);
                    g_phi(rows) = gp;
                    Matrix G = 0.5 * (s * s.transpose());
                    G.diagonal() -= 0.5 * s;
                    B.middleRows(n * K, K).noalias() = G * A.middleRows(n * K, K);
                    g_blocks[static_cast<std::size_t>(n)] = std::move(G);
                }
            }
        }
        if (!grad) continue;

        // Adjoint of A: g_phi d^T + 2 G_C A D.
        Matrix A_bar = g_phi * d.transpose();
        if (diagonal) {
            A_bar.noalias() += (2.0 * g_cdiag).asDiagonal() * AD;
            Q.noalias() += A.transpose() * g_cdiag.asDiagonal() * A;
        } else {
            for (Eigen::Index n = 0; n < rows_in_chunk; ++n)
                A_bar.middleRows(n * K, K).noalias() +=
                    2.0 * g_blocks[static_cast<std::size_t>(n)] * AD.middleRows(n * K, K);
            Q.noalias() += A.transpose() * B;
        }
        P.noalias() += A.transpose() * A_bar;
        grad_m_data.noalias() += A.transpose() * g_phi;

        // Through Kxu.
        const Matrix G_kxu = A_bar * Sinv;
        for (Eigen::Index r = 0; r < Rc; ++r) {
            const double xr = xc[static_cast<std::size_t>(r)];
            for (Eigen::Index j = 0; j < M; ++j) {
                const double gk = G_kxu(r, j) * Kxu(r, j);
                const double diff = xr - model.inducing_inputs(j);
                grad_w(j) += gk * diff * inv_l2;
                grad_k(0) += gk;
                grad_k(1) += gk * 0.5 * diff * diff * inv_l2;
            }
        }
        // Through Kxx.
        if (diagonal) {
            const double sum_g = g_cdiag.sum();
            grad_k(0) += s2 * sum_g;
            grad_k(2) += n2 * sum_g;
        } else {
            for (Eigen::Index n = 0; n < rows_in_chunk; ++n) {
                const Matrix& G = g_blocks[static_cast<std::size_t>(n)];
                for (Eigen::Index k = 0; k < K; ++k) {
                    grad_k(2) += n2 * G(k, k);
                    for (Eigen::Index k2 = 0; k2 < K; ++k2) {
                        const double diff =
                            xc[static_cast<std::size_t>(n * K + k)] - xc[static_cast<std::size_t>(n * K + k2)];
                        const double kv = s2 * std::exp(-0.5 * diff * diff * inv_l2);
                        grad_k(0) += G(k, k2) * kv;
                        grad_k(1) += G(k, k2) * kv * 0.5 * diff * diff * inv_l2;
                    }
                }
            }
        }
    }
    const double value = expected - kl;
    if (!grad) return value;

    Vector grad_m = grad_m_data - Sinv * d;
    const Vector grad_mu_u = -grad_m;

    // Variational factor: data term 2 Q L, KL term tril(Sinv L) - diag(1/L_ii).
    Matrix grad_L = 2.0 * Q * L - Sinv * L;
    for (Eigen::Index i = 0; i < M; ++i) grad_L(i, i) += 1.0 / L(i, i);
    grad_L = grad_L.triangularView<Eigen::Lower>();

    // Total adjoint of the inducing covariance.
    const Vector sd = Sinv * d;
    const Matrix dkl_dsig = 0.5 * (Sinv - Sinv * S * Sinv - sd * sd.transpose());
    const Matrix G_sig = -Q - P * Sinv - dkl_dsig;

    // Through Kuu.
    for (Eigen::Index a = 0; a < M; ++a) {
        grad_k(2) += n2 * G_sig(a, a);
        for (Eigen::Index j = 0; j < M; ++j) {
            const double diff = model.inducing_inputs(a) - model.inducing_inputs(j);
            const double kv = s2 * std::exp(-0.5 * diff * diff * inv_l2);
            grad_k(0) += G_sig(a, j) * kv;
            grad_k(1) += G_sig(a, j) * kv * 0.5 * diff * diff * inv_l2;
            grad_w(a) -= (G_sig(a, j) + G_sig(j, a)) * kv * diff * inv_l2;
        }
    }
    // Through the prior mean at the inducing inputs.
    for (Eigen::Index j = 0; j < M; ++j) grad_w(j) += grad_mu_u(j) * model.prior_mean.derivative(model.inducing_inputs(j));

    grad->d_mean = std::move(grad_m);
    grad->d_cov_factor = std::move(grad_L);
    grad->d_inducing = std::move(grad_w);
    grad->d_log_kernel = grad_k;
    return value;
}

inline void check_data_kind(const GpCalibrationModel& model, const PredictionSet& data)
{
    if (data.kind != model.input_kind) throw InputError("input kind of the data does not match the model");
}

}  // namespace detail

/// K-dimensional marginal of q(g) for one row of scores.
inline LatentMarginal marginal_q(const GpCalibrationModel& model, std::span<const double> z_row,
                                 LatentNoise noise = LatentNoise::include)
{
    const auto prior = detail::inducing_prior(model);
    const Matrix Kxu = detail::cross_gram(z_row, model);
    const Matrix A = prior.chol.solve(Kxu.transpose()).transpose();
    LatentMarginal out;
    out.mean = A * (model.variational_mean - prior.mean);
    for (std::size_t k = 0; k < z_row.size(); ++k)
        out.mean(static_cast<Eigen::Index>(k)) += model.prior_mean.value(z_row[k]);
    const Matrix L = model.variational_cov_factor.triangularView<Eigen::Lower>();
    out.cov = gram(z_row, model.kernel, noise == LatentNoise::include);
    out.cov.noalias() += A * (L * L.transpose() - prior.cov) * A.transpose();
    if (model.cov_structure == CovStructure::diagonal) out.cov = Matrix(out.cov.diagonal().asDiagonal());
    return out;
}

/// Second order Taylor approximation of E[ln softargmax(g)_y], g ~ N(phi, C).
inline double expected_loglik_taylor(const Vector& phi, const Matrix& C, int y)
{
    const Vector s = softargmax(phi);
    const double log_s_y = phi(y) - log_sum_exp(phi);
    return log_s_y + 0.5 * (s.dot(C * s) - C.diagonal().dot(s));
}

inline double kl_to_prior(const GpCalibrationModel& model)
{
    return detail::kl_from_prior(model, detail::inducing_prior(model));
}

inline double elbo(const GpCalibrationModel& model, const PredictionSet& data)
{
    detail::check_data_kind(model, data);
    return detail::elbo_impl(model, data.scores, data.labels, nullptr);
}

inline ElboResult elbo_with_gradient(const GpCalibrationModel& model, const PredictionSet& data)
{
    detail::check_data_kind(model, data);
    ElboResult res;
    res.value = detail::elbo_impl(model, data.scores, data.labels, &res.grad);
    return res;
}

struct GpFitConfig {
    Eigen::Index num_inducing = 10;
    std::optional<PriorMean> prior_mean;  // defaults to log for simplex, identity for logits
    CovStructure cov_structure = CovStructure::diagonal;
    int max_iters = 1000;
    double tol = 1e-6;
    std::uint64_t seed = 0;
    KernelParams kernel = KernelParams::from_natural(1.0, 10.0, 0.01 * 0.01);
};

inline PriorMean default_prior_mean(ScoreKind kind)
{
    return kind == ScoreKind::simplex ? PriorMean::log() : PriorMean::identity();
}

namespace detail {

inline double softplus(double r) { return r > 30.0 ? r : std::log1p(std::exp(r)); }
inline double softplus_inverse(double v) { return v > 30.0 ? v : v + std::log(-std::expm1(-v)); }
inline double logistic(double r) { return 1.0 / (1.0 + std::exp(-r)); }

// Flat layout: [m - mu(w) (M) | lower triangle of L row-major, raw diagonal (M(M+1)/2) | w (M) | ln s2, ln l^2, ln n2]
inline Eigen::Index packed_size(Eigen::Index M) { return 2 * M + M * (M + 1) / 2 + 3; }

inline Vector pack(const GpCalibrationModel& model)
{
    const auto M = model.num_inducing();
    Vector theta(packed_size(M));
    Eigen::Index o = 0;
    for (Eigen::Index i = 0; i < M; ++i)
        theta(o++) = model.variational_mean(i) - model.prior_mean.value(model.inducing_inputs(i));
    for (Eigen::Index i = 0; i < M; ++i)
        for (Eigen::Index j = 0; j <= i; ++j)
            theta(o++) = i == j ? softplus_inverse(model.variational_cov_factor(i, i)) : model.variational_cov_factor(i, j);
    for (Eigen::Index i = 0; i < M; ++i) theta(o++) = model.inducing_inputs(i);
    theta(o++) = model.kernel.log_signal_variance;
    theta(o++) = model.kernel.log_lengthscale_sq;
    theta(o++) = model.kernel.log_noise_variance;
    return theta;
}

inline void unpack(const Vector& theta, GpCalibrationModel& model)
{
    const auto M = model.num_inducing();
    Eigen::Index o = M;
    model.variational_cov_factor.setZero();
    for (Eigen::Index i = 0; i < M; ++i)
        for (Eigen::Index j = 0; j <= i; ++j)
            model.variational_cov_factor(i, j) = i == j ? softplus(theta(o++)) : theta(o++);
    for (Eigen::Index i = 0; i < M; ++i) model.inducing_inputs(i) = theta(o++);
    for (Eigen::Index i = 0; i < M; ++i)
        model.variational_mean(i) = theta(i) + model.prior_mean.value(model.inducing_inputs(i));
    model.kernel.log_signal_variance = theta(o++);
    model.kernel.log_lengthscale_sq = theta(o++);
    model.kernel.log_noise_variance = theta(o++);
}

inline Vector pack_gradient(const GpCalibrationModel& model, const ElboGradient& g)
{
    const auto M = model.num_inducing();
    Vector out(packed_size(M));
    Eigen::Index o = 0;
    for (Eigen::Index i = 0; i < M; ++i) out(o++) = g.d_mean(i);
    for (Eigen::Index i = 0; i < M; ++i)
        for (Eigen::Index j = 0; j <= i; ++j) {
            if (i == j)
                out(o++) = g.d_cov_factor(i, i) * logistic(softplus_inverse(model.variational_cov_factor(i, i)));
            else
                out(o++) = g.d_cov_factor(i, j);
        }
    for (Eigen::Index i = 0; i < M; ++i)
        out(o++) = g.d_inducing(i) + g.d_mean(i) * model.prior_mean.derivative(model.inducing_inputs(i));
    for (int k = 0; k < 3; ++k) out(o++) = g.d_log_kernel(k);
    return out;
}

/// Reorders inducing inputs ascending, permuting m and S to match.
inline void sort_inducing(GpCalibrationModel& model)
{
    const auto M = model.num_inducing();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(M));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
        return model.inducing_inputs(a) < model.inducing_inputs(b);
    });
    if (std::is_sorted(order.begin(), order.end())) return;
    const Matrix L = model.variational_cov_factor;
    const Matrix S = L * L.transpose();
    Matrix S_new(M, M);
    Vector w(M), m(M);
    for (Eigen::Index i = 0; i < M; ++i) {
        w(i) = model.inducing_inputs(order[i]);
        m(i) = model.variational_mean(order[i]);
        for (Eigen::Index j = 0; j < M; ++j) S_new(i, j) = S(order[i], order[j]);
    }
    Eigen::LLT<Matrix> llt(S_new);
    if (llt.info() != Eigen::Success) throw NumericalError("variational covariance lost positive definiteness");
    model.inducing_inputs = w;
    model.variational_mean = m;
    model.variational_cov_factor = llt.matrixL();
}

}  // namespace detail

/// Model with q(u) equal to the prior and inducing inputs at equally spaced
/// quantiles of the pooled scores.
inline GpCalibrationModel initialize(const PredictionSet& data, const GpFitConfig& config = {})
{
    data.validate();
    const auto M = config.num_inducing;
    if (M < 1) throw InputError("number of inducing points must be positive");
    if (static_cast<Eigen::Index>(data.size()) < M) throw InputError("need at least as many samples as inducing points");
    GpCalibrationModel model;
    model.input_kind = data.kind;
    model.prior_mean = config.prior_mean.value_or(default_prior_mean(data.kind));
    model.cov_structure = config.cov_structure;
    model.kernel = config.kernel;

    std::vector<double> pooled(data.scores.data(), data.scores.data() + data.scores.size());
    std::sort(pooled.begin(), pooled.end());
    model.inducing_inputs.resize(M);
    const double span_width = std::max(1.0, pooled.back() - pooled.front());
    const CounterRng rng(config.seed);
    for (Eigen::Index i = 0; i < M; ++i) {
        const double q = M == 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(M - 1);
        const auto idx = static_cast<std::size_t>(std::llround(q * static_cast<double>(pooled.size() - 1)));
        double v = pooled[idx];
        if (i > 0 && v <= model.inducing_inputs(i - 1))
            v = model.inducing_inputs(i - 1) + 1e-6 * span_width * (1.0 + rng.uniform(0, static_cast<std::uint64_t>(i)));
        model.inducing_inputs(i) = v;
    }

    const auto prior = detail::inducing_prior(model);
    model.variational_mean = prior.mean;
    model.variational_cov_factor = prior.chol.matrixL();

    std::vector<bool> seen(data.num_classes(), false);
    for (int y : data.labels) seen[static_cast<std::size_t>(y)] = true;
    model.diagnostics.single_class = std::count(seen.begin(), seen.end(), true) < 2;
    model.validate();
    return model;
}

/// Maximizes the ELBO over m, L, w and the kernel parameters.
inline GpCalibrationModel fit(const PredictionSet& data, const GpFitConfig& config = {})
{
    GpCalibrationModel model = initialize(data, config);
    model.diagnostics.initial_elbo = elbo(model, data);
    model.diagnostics.final_elbo = model.diagnostics.initial_elbo;
    if (config.max_iters <= 0) return model;

    GpCalibrationModel work = model;
    auto objective = [&](const Vector& theta, Vector& g) -> double {
        detail::unpack(theta, work);
        try {
            ElboGradient eg;
            const double v = detail::elbo_impl(work, data.scores, data.labels, &eg);
            g = -detail::pack_gradient(work, eg);
            return -v;
        } catch (const NumericalError&) {
            g.setZero();
            return std::numeric_limits<double>::infinity();
        }
    };
    LbfgsOptions opts;
    opts.max_iters = config.max_iters;
    opts.tol = config.tol;
    const auto res = minimize_lbfgs(objective, detail::pack(model), opts);
    detail::unpack(res.x, model);
    detail::sort_inducing(model);
    model.diagnostics.final_elbo = elbo(model, data);
    model.diagnostics.iterations = res.iterations;
    model.diagnostics.converged = res.converged;
    model.diagnostics.elbo_trace.reserve(res.trace.size());
    for (double f : res.trace) model.diagnostics.elbo_trace.push_back(-f);
    model.validate();
    return model;
}

namespace detail {

/// Latent means (R) and the regression matrix A (R x M) for flattened inputs.
struct LatentMoments {
    Vector mean;
    Matrix A;
    Matrix AD;  // A (S - Kuu)
};

inline LatentMoments latent_moments(const GpCalibrationModel& model, std::span<const double> x)
{
    const auto prior = inducing_prior(model);
    const Matrix Kxu = cross_gram(x, model);
    LatentMoments lm;
    lm.A = prior.chol.solve(Kxu.transpose()).transpose();
    lm.mean = lm.A * (model.variational_mean - prior.mean);
    for (std::size_t r = 0; r < x.size(); ++r) lm.mean(static_cast<Eigen::Index>(r)) += model.prior_mean.value(x[r]);
    const Matrix L = model.variational_cov_factor.triangularView<Eigen::Lower>();
    lm.AD = lm.A * (L * L.transpose() - prior.cov);
    return lm;
}

inline void check_rows(const GpCalibrationModel& model, const Matrix& rows)
{
    model.validate();
    if (rows.cols() < 2 && rows.rows() > 0) throw InputError("score rows need at least two classes");
    if (!rows.allFinite()) throw InputError("score rows are not finite");
}

}  // namespace detail

/// Calibrated probabilities using the latent posterior mean only.
inline Matrix predict_mean(const GpCalibrationModel& model, const Matrix& rows)
{
    detail::check_rows(model, rows);
    const Eigen::Index K = rows.cols();
    const auto lm = detail::latent_moments(model, {rows.data(), static_cast<std::size_t>(rows.size())});
    Matrix out(rows.rows(), K);
    for (Eigen::Index n = 0; n < rows.rows(); ++n) out.row(n) = softargmax(lm.mean(Eigen::seqN(n * K, K))).transpose();
    return out;
}

/// Calibrated probabilities by Monte-Carlo integration over the latent
/// predictive distribution (noise-free). Sample q of row n, component k uses
/// counter (n, q * K + k) of a seed-keyed generator.
inline Matrix predict_mc(const GpCalibrationModel& model, const Matrix& rows, int num_samples, std::uint64_t seed)
{
    detail::check_rows(model, rows);
    if (num_samples < 1) throw InputError("number of Monte-Carlo samples must be positive");
    const Eigen::Index K = rows.cols();
    const std::span<const double> x(rows.data(), static_cast<std::size_t>(rows.size()));
    const auto lm = detail::latent_moments(model, x);
    const double s2 = model.kernel.signal_variance();
    const bool diagonal = model.cov_structure == CovStructure::diagonal;
    const CounterRng rng(seed);
    Matrix out(rows.rows(), K);
    Vector eps(K), g(K);
    for (Eigen::Index n = 0; n < rows.rows(); ++n) {
        const auto r = Eigen::seqN(n * K, K);
        const Vector mu = lm.mean(r);
        Matrix root;
        if (diagonal) {
            const Vector c = (s2 + lm.AD(r, Eigen::all).cwiseProduct(lm.A(r, Eigen::all)).rowwise().sum().array()).max(0.0);
            root = c.cwiseSqrt().asDiagonal();
        } else {
            Matrix C = gram(x.subspan(static_cast<std::size_t>(n * K), static_cast<std::size_t>(K)), model.kernel, false);
            C.noalias() += lm.AD(r, Eigen::all) * lm.A(r, Eigen::all).transpose();
            C.diagonal().array() += kJitter;
            Eigen::SelfAdjointEigenSolver<Matrix> es(C);
            root = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
        }
        Vector acc = Vector::Zero(K);
        for (int q = 0; q < num_samples; ++q) {
            for (Eigen::Index k = 0; k < K; ++k)
                eps(k) = rng.normal(static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(q) * static_cast<std::uint64_t>(K) + static_cast<std::uint64_t>(k));
            g = mu + root * eps;
            acc += softargmax(g);
        }
        out.row(n) = (acc / acc.sum()).transpose();
    }
    return out;
}

/// Pointwise posterior mean and (noise-free) variance of the latent function.
inline LatentPosterior latent_curve(const GpCalibrationModel& model, const Vector& grid)
{
    model.validate();
    LatentPosterior out;
    out.grid = grid;
    if (grid.size() == 0) {
        out.mean.resize(0);
        out.variance.resize(0);
        return out;
    }
    const auto lm = detail::latent_moments(model, {grid.data(), static_cast<std::size_t>(grid.size())});
    out.mean = lm.mean;
    const double s2 = model.kernel.signal_variance();
    out.variance = (s2 + lm.AD.cwiseProduct(lm.A).rowwise().sum().array())
                       .max(std::numeric_limits<double>::min())
                       .matrix();
    return out;
}

}  // namespace calibra
