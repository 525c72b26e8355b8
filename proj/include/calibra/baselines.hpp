#pragma once

// Baseline calibration methods: Platt scaling, isotonic regression, beta
// calibration, Bayesian binning into quantiles, temperature scaling and a
// one-vs-all wrapper for the binary methods.

#include "calibra/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace calibra {

struct PlattParams {
    double a = 1.0, b = 0.0;
};

struct IsotonicMap {
    std::vector<double> breakpoints;
    std::vector<double> values;
};

struct BetaParams {
    double a = 1.0, b = 1.0, c = 0.0;
    bool degenerate = false;
};

struct BbqBinning {
    std::vector<double> edges;  // B + 1 ascending edges, outer ones at 0 and 1
    std::vector<double> posterior_means;
    double log_marginal_likelihood = 0.0;
};

struct BbqModel {
    std::vector<BbqBinning> models;
    std::vector<double> weights;
};

struct BbqConfig {
    std::vector<int> model_grid;  // empty: default range from the sample count
};

struct TemperatureParam {
    double temperature = 1.0;
};

namespace detail {

inline constexpr double kBetaClip = 1e-6;

inline double sigmoid(double t) { return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t)); }

/// Negative log-likelihood of sigmoid(X beta) against 0/1 targets.
inline double logistic_nll(const Matrix& X, std::span<const int> t, const Vector& beta)
{
    const Vector eta = X * beta;
    double total = 0.0;
    for (Eigen::Index n = 0; n < X.rows(); ++n) {
        const double e = eta(n);
        // log(1 + exp(e)) - t e, stably
        const double softplus = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
        total += softplus - (t[static_cast<std::size_t>(n)] ? e : 0.0);
    }
    return total;
}

/// Logistic regression by Newton's method with step halving.
inline Vector fit_logistic(const Matrix& X, std::span<const int> t, Vector beta, int max_iters = 200)
{
    double f = logistic_nll(X, t, beta);
    for (int it = 0; it < max_iters; ++it) {
        const Vector eta = X * beta;
        Vector grad = Vector::Zero(X.cols());
        Matrix H = Matrix::Zero(X.cols(), X.cols());
        for (Eigen::Index n = 0; n < X.rows(); ++n) {
            const double p = sigmoid(eta(n));
            grad += (p - (t[static_cast<std::size_t>(n)] ? 1.0 : 0.0)) * X.row(n).transpose();
            H += p * (1.0 - p) * X.row(n).transpose() * X.row(n);
        }
        H.diagonal().array() += 1e-12 * (1.0 + H.diagonal().cwiseAbs().maxCoeff());
        const Vector step = H.ldlt().solve(grad);
        if (!step.allFinite()) break;
        double scale = 1.0;
        bool improved = false;
        for (int bt = 0; bt < 50; ++bt) {
            const Vector cand = beta - scale * step;
            const double fc = logistic_nll(X, t, cand);
            if (fc <= f) {
                improved = fc < f || scale == 1.0;
                beta = cand;
                f = fc;
                break;
            }
            scale *= 0.5;
        }
        if (!improved || (scale * step).cwiseAbs().maxCoeff() < 1e-12 * (1.0 + beta.cwiseAbs().maxCoeff())) break;
    }
    return beta;
}

inline void check_binary(std::span<const double> scores, std::span<const int> targets)
{
    if (scores.size() != targets.size()) throw InputError("scores and targets differ in length");
    if (scores.empty()) throw InputError("calibration data is empty");
    for (double s : scores)
        if (!std::isfinite(s)) throw InputError("scores must be finite");
    for (int t : targets)
        if (t != 0 && t != 1) throw InputError("binary targets must be 0 or 1");
}

inline bool single_class(std::span<const int> targets)
{
    return std::all_of(targets.begin(), targets.end(), [&](int t) { return t == targets.front(); });
}

}  // namespace detail

// ---------------------------------------------------------------- Platt

inline PlattParams fit_platt(std::span<const double> scores, std::span<const int> targets)
{
    detail::check_binary(scores, targets);
    if (detail::single_class(targets)) throw FitError("Platt scaling needs both classes");
    Matrix X(static_cast<Eigen::Index>(scores.size()), 2);
    for (std::size_t n = 0; n < scores.size(); ++n) X.row(static_cast<Eigen::Index>(n)) << scores[n], 1.0;
    const Vector beta = detail::fit_logistic(X, targets, Vector::Zero(2));
    return {beta(0), beta(1)};
}

inline double apply_platt(const PlattParams& p, double score) { return detail::sigmoid(p.a * score + p.b); }

// ---------------------------------------------------------------- isotonic

/// Pool-adjacent-violators on scores sorted ascending; tied scores share a
/// value.
inline IsotonicMap fit_isotonic(std::span<const double> scores, std::span<const double> targets)
{
    if (scores.size() != targets.size()) throw InputError("scores and targets differ in length");
    if (scores.empty()) throw InputError("calibration data is empty");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });

    struct Block {
        double sum, weight;
        std::size_t first, last;  // indices into the distinct-score list
    };
    std::vector<double> xs;
    std::vector<Block> groups;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const double x = scores[order[i]];
        if (!std::isfinite(x) || !std::isfinite(targets[order[i]])) throw InputError("isotonic inputs must be finite");
        if (xs.empty() || x != xs.back()) {
            xs.push_back(x);
            groups.push_back({targets[order[i]], 1.0, xs.size() - 1, xs.size() - 1});
        } else {
            groups.back().sum += targets[order[i]];
            groups.back().weight += 1.0;
        }
    }
    std::vector<Block> blocks;
    for (const auto& g : groups) {
        blocks.push_back(g);
        while (blocks.size() > 1) {
            Block& prev = blocks[blocks.size() - 2];
            const Block& cur = blocks.back();
            if (prev.sum / prev.weight < cur.sum / cur.weight) break;
            prev.sum += cur.sum;
            prev.weight += cur.weight;
            prev.last = cur.last;
            blocks.pop_back();
        }
    }
    IsotonicMap map;
    map.breakpoints = xs;
    map.values.resize(xs.size());
    for (const auto& b : blocks)
        for (std::size_t j = b.first; j <= b.last; ++j) map.values[j] = b.sum / b.weight;
    return map;
}

inline IsotonicMap fit_isotonic(std::span<const double> scores, std::span<const int> targets)
{
    std::vector<double> t(targets.begin(), targets.end());
    return fit_isotonic(scores, std::span<const double>(t));
}

/// Linear interpolation between breakpoints, constant outside their range.
inline double apply_isotonic(const IsotonicMap& map, double score)
{
    const auto& xs = map.breakpoints;
    if (xs.empty()) throw InputError("isotonic map is empty");
    if (score <= xs.front()) return map.values.front();
    if (score >= xs.back()) return map.values.back();
    const auto hi = static_cast<std::size_t>(std::upper_bound(xs.begin(), xs.end(), score) - xs.begin());
    const std::size_t lo = hi - 1;
    const double t = (score - xs[lo]) / (xs[hi] - xs[lo]);
    return map.values[lo] + t * (map.values[hi] - map.values[lo]);
}

// ---------------------------------------------------------------- beta

inline BetaParams fit_beta(std::span<const double> scores, std::span<const int> targets)
{
    detail::check_binary(scores, targets);
    if (detail::single_class(targets)) throw FitError("beta calibration needs both classes");
    const auto N = static_cast<Eigen::Index>(scores.size());
    Matrix X(N, 3);
    for (Eigen::Index n = 0; n < N; ++n) {
        const double z = std::clamp(scores[static_cast<std::size_t>(n)], detail::kBetaClip, 1.0 - detail::kBetaClip);
        X.row(n) << std::log(z), -std::log1p(-z), 1.0;
    }
    BetaParams out;
    if (std::all_of(scores.begin(), scores.end(), [&](double s) { return s == scores.front(); })) {
        const double rate = static_cast<double>(std::count(targets.begin(), targets.end(), 1)) / static_cast<double>(N);
        return {0.0, 0.0, std::log(rate / (1.0 - rate)), true};
    }
    Vector beta = detail::fit_logistic(X, targets, Vector::Zero(3));
    if (beta(0) < 0.0 || beta(1) < 0.0) {
        // Drop the offending feature and refit; if the other slope also goes
        // negative, fall back to the intercept alone.
        const int keep = beta(0) < beta(1) ? 1 : 0;
        Matrix X2(N, 2);
        X2.col(0) = X.col(keep);
        X2.col(1) = X.col(2);
        Vector b2 = detail::fit_logistic(X2, targets, Vector::Zero(2));
        beta.setZero();
        if (b2(0) >= 0.0) {
            beta(keep) = b2(0);
            beta(2) = b2(1);
        } else {
            const double rate = static_cast<double>(std::count(targets.begin(), targets.end(), 1)) / static_cast<double>(N);
            beta(2) = std::log(rate / (1.0 - rate));
        }
    }
    out.a = beta(0);
    out.b = beta(1);
    out.c = beta(2);
    out.degenerate = out.a == 0.0 && out.b == 0.0;
    return out;
}

inline double apply_beta(const BetaParams& p, double score)
{
    const double z = std::clamp(score, detail::kBetaClip, 1.0 - detail::kBetaClip);
    return detail::sigmoid(p.c + p.a * std::log(z) - p.b * std::log1p(-z));
}

// ---------------------------------------------------------------- BBQ

/// log of the Beta-Binomial sequence likelihood B(a + k, b + n - k) / B(a, b).
inline double bin_log_marginal_likelihood(double k, double n, double alpha, double beta)
{
    auto lbeta = [](double x, double y) { return std::lgamma(x) + std::lgamma(y) - std::lgamma(x + y); };
    return lbeta(alpha + k, beta + n - k) - lbeta(alpha, beta);
}

inline std::vector<int> bbq_default_grid(std::size_t N)
{
    const double c = std::cbrt(static_cast<double>(N));
    const int lo = std::max(1, static_cast<int>(std::ceil(c / 2.0)));
    const int hi = std::min(static_cast<int>(N), std::max(lo, static_cast<int>(std::ceil(2.0 * c))));
    std::vector<int> grid;
    for (int b = lo; b <= hi; ++b) grid.push_back(b);
    return grid;
}

namespace detail {

inline std::size_t bbq_bin(const std::vector<double>& edges, double score)
{
    // Interior edges only; a score equal to an edge falls in the lower bin.
    const auto first = edges.begin() + 1;
    const auto last = edges.end() - 1;
    return static_cast<std::size_t>(std::lower_bound(first, last, score) - first);
}

}  // namespace detail

inline BbqModel fit_bbq(std::span<const double> scores, std::span<const int> targets, const BbqConfig& config = {})
{
    detail::check_binary(scores, targets);
    for (double s : scores)
        if (s < 0.0 || s > 1.0) throw InputError("BBQ scores must lie in [0, 1]");
    const std::vector<int> grid = config.model_grid.empty() ? bbq_default_grid(scores.size()) : config.model_grid;
    if (grid.empty()) throw InputError("BBQ model grid is empty");
    const std::size_t N = scores.size();
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
    std::vector<double> sorted(N);
    for (std::size_t i = 0; i < N; ++i) sorted[i] = scores[order[i]];

    BbqModel model;
    for (int B : grid) {
        if (B < 1 || static_cast<std::size_t>(B) > N) throw InputError("BBQ bin count must be in [1, N]");
        BbqBinning bin;
        bin.edges.push_back(0.0);
        for (int j = 1; j < B; ++j) {
            const std::size_t cut = static_cast<std::size_t>(j) * N / static_cast<std::size_t>(B);
            bin.edges.push_back(0.5 * (sorted[cut - 1] + sorted[cut]));
        }
        bin.edges.push_back(1.0);
        std::vector<double> k(static_cast<std::size_t>(B), 0.0), n(static_cast<std::size_t>(B), 0.0);
        std::size_t b = 0;
        for (std::size_t i = 0; i < N; ++i) {
            while (b + 1 < static_cast<std::size_t>(B) && sorted[i] > bin.edges[b + 1]) ++b;
            n[b] += 1.0;
            k[b] += targets[order[i]];
        }
        for (std::size_t b = 0; b < static_cast<std::size_t>(B); ++b) {
            const double mid = std::clamp(0.5 * (bin.edges[b] + bin.edges[b + 1]), 1e-3, 1.0 - 1e-3);
            const double alpha = 2.0 * mid, beta = 2.0 * (1.0 - mid);
            bin.log_marginal_likelihood += bin_log_marginal_likelihood(k[b], n[b], alpha, beta);
            bin.posterior_means.push_back((alpha + k[b]) / (alpha + beta + n[b]));
        }
        model.models.push_back(std::move(bin));
    }
    std::vector<double> logs;
    for (const auto& m : model.models) logs.push_back(m.log_marginal_likelihood);
    const double top = *std::max_element(logs.begin(), logs.end());
    double total = 0.0;
    for (double l : logs) total += std::exp(l - top);
    for (double l : logs) model.weights.push_back(std::exp(l - top) / total);
    return model;
}

inline double apply_bbq(const BbqModel& model, double score)
{
    double out = 0.0;
    for (std::size_t i = 0; i < model.models.size(); ++i) {
        const auto& m = model.models[i];
        out += model.weights[i] * m.posterior_means[detail::bbq_bin(m.edges, score)];
    }
    return out;
}

// ---------------------------------------------------------------- temperature

/// Mean NLL of softargmax(z / T); also returns the first two derivatives in
/// 1/T when requested.
inline double temperature_nll(const Matrix& logits, std::span<const int> labels, double T, double* d1 = nullptr,
                              double* d2 = nullptr)
{
    const double inv = 1.0 / T;
    double total = 0.0, g = 0.0, h = 0.0;
    for (Eigen::Index n = 0; n < logits.rows(); ++n) {
        const auto z = logits.row(n);
        const Vector scaled = (z * inv).transpose();
        const double lse = log_sum_exp(scaled);
        total += lse - scaled(labels[static_cast<std::size_t>(n)]);
        if (d1) {
            const Vector s = (scaled.array() - lse).exp();
            const double mean = z.dot(s);
            g += mean - z(labels[static_cast<std::size_t>(n)]);
            h += (z.transpose().array().square() * s.array()).sum() - mean * mean;
        }
    }
    const double N = static_cast<double>(std::max<Eigen::Index>(1, logits.rows()));
    if (d1) *d1 = g / N;
    if (d2) *d2 = h / N;
    return total / N;
}

inline TemperatureParam fit_temperature(const Matrix& logits, std::span<const int> labels)
{
    if (logits.rows() != static_cast<Eigen::Index>(labels.size())) throw InputError("logits and labels differ in length");
    if (logits.rows() == 0) throw InputError("calibration data is empty");
    if (!logits.allFinite()) throw InputError("logits must be finite");
    for (int y : labels)
        if (y < 0 || y >= logits.cols()) throw InputError("label out of range");

    auto f = [&](double logT) { return temperature_nll(logits, labels, std::exp(logT)); };
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    double lo = -5.0, hi = 5.0;
    double x1 = hi - phi * (hi - lo), x2 = lo + phi * (hi - lo);
    double f1 = f(x1), f2 = f(x2);
    for (int it = 0; it < 100 && hi - lo > 1e-10; ++it) {
        if (f1 <= f2) {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        }
    }
    double best_T = std::exp(0.5 * (lo + hi));
    double best_f = temperature_nll(logits, labels, best_T);

    // Newton in 1/T, where the objective is convex.
    double inv = 1.0 / best_T;
    for (int it = 0; it < 50; ++it) {
        double g = 0.0, h = 0.0;
        temperature_nll(logits, labels, 1.0 / inv, &g, &h);
        if (!(h > 0.0)) break;
        const double next = inv - g / h;
        if (!(next >= std::exp(-5.0)) || !(next <= std::exp(5.0))) break;
        const double fn = temperature_nll(logits, labels, 1.0 / next);
        if (!(fn <= best_f)) break;
        const double delta = std::abs(next - inv);
        inv = next;
        best_T = 1.0 / inv;
        best_f = fn;
        if (delta < 1e-14 * std::max(1.0, inv)) break;
    }
    if (temperature_nll(logits, labels, 1.0) < best_f) best_T = 1.0;
    return {best_T};
}

inline Matrix apply_temperature(const TemperatureParam& p, const Matrix& logits)
{
    if (!(p.temperature > 0.0)) throw InputError("temperature must be positive");
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index n = 0; n < logits.rows(); ++n) out.row(n) = softargmax(logits.row(n) / p.temperature).transpose();
    return out;
}

// ---------------------------------------------------------------- binary wrapper

enum class BinaryMethod { platt, isotonic, beta, bbq };

inline std::string_view to_string(BinaryMethod m)
{
    switch (m) {
    case BinaryMethod::platt: return "platt";
    case BinaryMethod::isotonic: return "isotonic";
    case BinaryMethod::beta: return "beta";
    case BinaryMethod::bbq: return "bbq";
    }
    return "platt";
}

inline std::optional<BinaryMethod> binary_method_from_string(std::string_view s)
{
    if (s == "platt") return BinaryMethod::platt;
    if (s == "isotonic") return BinaryMethod::isotonic;
    if (s == "beta") return BinaryMethod::beta;
    if (s == "bbq") return BinaryMethod::bbq;
    return std::nullopt;
}

/// Identity map, used for classes that cannot be fitted.
struct IdentityMap {};

using BinaryCalibrator = std::variant<IdentityMap, PlattParams, IsotonicMap, BetaParams, BbqModel>;

inline BinaryCalibrator fit_binary(BinaryMethod method, std::span<const double> scores, std::span<const int> targets)
{
    switch (method) {
    case BinaryMethod::platt: return fit_platt(scores, targets);
    case BinaryMethod::isotonic: return fit_isotonic(scores, targets);
    case BinaryMethod::beta: return fit_beta(scores, targets);
    case BinaryMethod::bbq: return fit_bbq(scores, targets);
    }
    return IdentityMap{};
}

inline double apply_binary(const BinaryCalibrator& cal, double score)
{
    struct Visitor {
        double s;
        double operator()(const IdentityMap&) const { return s; }
        double operator()(const PlattParams& p) const { return apply_platt(p, s); }
        double operator()(const IsotonicMap& m) const { return apply_isotonic(m, s); }
        double operator()(const BetaParams& p) const { return apply_beta(p, s); }
        double operator()(const BbqModel& m) const { return apply_bbq(m, s); }
    };
    return std::visit(Visitor{score}, cal);
}

// ---------------------------------------------------------------- one-vs-all

struct OneVsAllModel {
    BinaryMethod method = BinaryMethod::platt;
    std::vector<BinaryCalibrator> calibrators;
    std::vector<bool> degenerate;
};

struct OneVsAllOutput {
    Matrix probs;
    Vector raw_row_sums;
};

inline OneVsAllModel fit_one_vs_all(BinaryMethod method, const PredictionSet& preds)
{
    preds.validate();
    if (preds.kind != ScoreKind::simplex) throw InputError("one-vs-all expects simplex scores; convert logits first");
    const auto K = preds.scores.cols();
    if (K < 2) throw InputError("one-vs-all needs at least two classes");
    OneVsAllModel model;
    model.method = method;
    std::vector<double> column(preds.size());
    std::vector<int> targets(preds.size());
    for (Eigen::Index k = 0; k < K; ++k) {
        for (std::size_t n = 0; n < preds.size(); ++n) {
            column[n] = preds.scores(static_cast<Eigen::Index>(n), k);
            targets[n] = preds.labels[n] == k ? 1 : 0;
        }
        if (detail::single_class(targets)) {
            model.calibrators.emplace_back(IdentityMap{});
            model.degenerate.push_back(true);
            continue;
        }
        model.calibrators.push_back(fit_binary(method, column, targets));
        const auto* beta = std::get_if<BetaParams>(&model.calibrators.back());
        model.degenerate.push_back(beta && beta->degenerate);
    }
    return model;
}

inline OneVsAllOutput apply_one_vs_all_detailed(const OneVsAllModel& model, const Matrix& scores)
{
    const auto K = static_cast<Eigen::Index>(model.calibrators.size());
    if (scores.cols() != K) throw InputError("score columns do not match the one-vs-all model");
    OneVsAllOutput out;
    out.probs.resize(scores.rows(), K);
    out.raw_row_sums.resize(scores.rows());
    for (Eigen::Index n = 0; n < scores.rows(); ++n) {
        for (Eigen::Index k = 0; k < K; ++k)
            out.probs(n, k) = std::clamp(apply_binary(model.calibrators[static_cast<std::size_t>(k)], scores(n, k)), 0.0, 1.0);
        const double sum = out.probs.row(n).sum();
        out.raw_row_sums(n) = sum;
        if (sum > 0.0)
            out.probs.row(n) /= sum;
        else
            out.probs.row(n).setConstant(1.0 / static_cast<double>(K));
    }
    return out;
}

inline Matrix apply_one_vs_all(const OneVsAllModel& model, const Matrix& scores)
{
    return apply_one_vs_all_detailed(model, scores).probs;
}

}  // namespace calibra
