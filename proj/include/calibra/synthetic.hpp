#pragma once

// Synthetic miscalibrated classifier outputs with a known calibration map.
// True posteriors are drawn from a symmetric Dirichlet, labels from the
// posteriors, and the emitted scores are the posteriors pushed through the
// inverse of the configured calibration map.

#include "calibra/core.hpp"
#include "calibra/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <variant>
#include <vector>

namespace calibra {

/// Calibration map softargmax(z / T) on logits.
struct TemperatureDistortion {
    double temperature = 1.0;
};

/// Binary beta calibration map applied to the positive-class probability.
struct BetaDistortion {
    double a = 1.0, b = 1.0, c = 0.0;
};

/// Calibration map softargmax(g(z)) on logits, g tabulated and strictly
/// increasing, linear between knots and extrapolated with the end slopes.
struct LatentDistortion {
    std::vector<double> x;
    std::vector<double> g;
};

using Distortion = std::variant<TemperatureDistortion, BetaDistortion, LatentDistortion>;

struct SynthConfig {
    std::size_t num_samples = 1000;
    std::size_t num_classes = 4;
    double concentration = 1.0;
    Distortion distortion = TemperatureDistortion{1.0};
    ScoreKind output_kind = ScoreKind::simplex;
    std::uint64_t seed = 0;
};

struct SynthTruth {
    Matrix true_posteriors;
    Distortion distortion;
};

struct SyntheticData {
    PredictionSet preds;
    SynthTruth truth;
};

inline double beta_map(const BetaDistortion& d, double z)
{
    const double zc = std::clamp(z, kProbFloor, 1.0 - kProbFloor);
    return 1.0 / (1.0 + std::exp(-d.c - d.a * std::log(zc) + d.b * std::log1p(-zc)));
}

inline double tabulated_value(const LatentDistortion& d, double x)
{
    const auto& xs = d.x;
    const auto& gs = d.g;
    const std::size_t n = xs.size();
    std::size_t i = 0;
    if (x <= xs.front())
        i = 0;
    else if (x >= xs.back())
        i = n - 2;
    else
        i = static_cast<std::size_t>(std::upper_bound(xs.begin(), xs.end(), x) - xs.begin()) - 1;
    const double t = (x - xs[i]) / (xs[i + 1] - xs[i]);
    return gs[i] + t * (gs[i + 1] - gs[i]);
}

namespace detail {

/// Solves f(x) = target for increasing f by bisection. Unbounded maps grow
/// the bracket first; bounded ones return the nearest end.
template <typename F>
double invert_increasing(F&& f, double target, double lo, double hi, bool bounded)
{
    if (!bounded) {
        while (f(lo) > target) lo -= 2.0 * (hi - lo + 1.0);
        while (f(hi) < target) hi += 2.0 * (hi - lo + 1.0);
    }
    for (int it = 0; it < 400 && hi - lo > 1e-12 * std::max(1.0, std::abs(lo) + std::abs(hi)); ++it) {
        const double mid = 0.5 * (lo + hi);
        (f(mid) < target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

inline void check_distortion(const Distortion& distortion, const SynthConfig* cfg)
{
    if (const auto* t = std::get_if<TemperatureDistortion>(&distortion)) {
        if (!(t->temperature > 0.0) || !std::isfinite(t->temperature))
            throw InputError("temperature distortion needs T > 0");
    } else if (const auto* b = std::get_if<BetaDistortion>(&distortion)) {
        if (cfg && cfg->num_classes != 2) throw InputError("beta distortion is only defined for two classes");
        if (b->a < 0.0 || b->b < 0.0 || (b->a == 0.0 && b->b == 0.0))
            throw InputError("beta distortion needs a, b >= 0, not both zero, to be invertible");
    } else {
        const auto& l = std::get<LatentDistortion>(distortion);
        if (l.x.size() < 2 || l.x.size() != l.g.size()) throw InputError("tabulated latent map needs >= 2 knots");
        for (std::size_t i = 1; i < l.x.size(); ++i)
            if (!(l.x[i] > l.x[i - 1]) || !(l.g[i] > l.g[i - 1]))
                throw InputError("tabulated latent map is not strictly increasing, cannot invert");
        if (cfg && cfg->output_kind != ScoreKind::logits)
            throw InputError("tabulated latent distortion requires logits output");
    }
}

}  // namespace detail

inline SyntheticData generate(const SynthConfig& cfg)
{
    if (cfg.num_samples < 1 || cfg.num_classes < 2) throw InputError("synthetic data needs N >= 1 and K >= 2");
    if (!(cfg.concentration > 0.0)) throw InputError("Dirichlet concentration must be positive");
    detail::check_distortion(cfg.distortion, &cfg);

    const auto N = static_cast<Eigen::Index>(cfg.num_samples);
    const auto K = static_cast<Eigen::Index>(cfg.num_classes);
    std::mt19937_64 rng(cfg.seed);
    std::gamma_distribution<double> gamma(cfg.concentration, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    SyntheticData out;
    out.truth.distortion = cfg.distortion;
    out.truth.true_posteriors.resize(N, K);
    out.preds.kind = cfg.output_kind;
    out.preds.scores.resize(N, K);
    out.preds.labels.resize(cfg.num_samples);

    Vector p(K), z(K);
    for (Eigen::Index n = 0; n < N; ++n) {
        double total = 0.0;
        for (Eigen::Index k = 0; k < K; ++k) total += (p(k) = gamma(rng));
        if (total <= 0.0) {
            p.setConstant(1.0 / static_cast<double>(K));
        } else {
            p /= total;
        }
        out.truth.true_posteriors.row(n) = p.transpose();
        const double u = unif(rng);
        double acc = 0.0;
        int y = static_cast<int>(K) - 1;
        for (Eigen::Index k = 0; k < K; ++k) {
            acc += p(k);
            if (u < acc) {
                y = static_cast<int>(k);
                break;
            }
        }
        out.preds.labels[static_cast<std::size_t>(n)] = y;

        if (const auto* t = std::get_if<TemperatureDistortion>(&cfg.distortion)) {
            for (Eigen::Index k = 0; k < K; ++k) z(k) = t->temperature * std::log(std::max(p(k), 1e-300));
            if (cfg.output_kind == ScoreKind::logits)
                out.preds.scores.row(n) = z.transpose();
            else if (t->temperature == 1.0)
                out.preds.scores.row(n) = p.transpose();
            else
                out.preds.scores.row(n) = softargmax(z).transpose();
        } else if (const auto* b = std::get_if<BetaDistortion>(&cfg.distortion)) {
            const double s1 = detail::invert_increasing([&](double s) { return beta_map(*b, s); }, p(1), 0.0, 1.0, true);
            const double s = std::clamp(s1, 0.0, 1.0);
            if (cfg.output_kind == ScoreKind::simplex) {
                out.preds.scores(n, 0) = 1.0 - s;
                out.preds.scores(n, 1) = s;
            } else {
                out.preds.scores(n, 0) = std::log(std::max(1.0 - s, 1e-300));
                out.preds.scores(n, 1) = std::log(std::max(s, 1e-300));
            }
        } else {
            const auto& l = std::get<LatentDistortion>(cfg.distortion);
            for (Eigen::Index k = 0; k < K; ++k) {
                const double target = std::log(std::max(p(k), 1e-300));
                z(k) = detail::invert_increasing([&](double x) { return tabulated_value(l, x); }, target, l.x.front(),
                                                 l.x.back(), false);
            }
            out.preds.scores.row(n) = z.transpose();
        }
    }
    return out;
}

/// Applies the true calibration map of a distortion to emitted scores.
inline Matrix apply_true_map(const Distortion& distortion, const PredictionSet& preds)
{
    detail::check_distortion(distortion, nullptr);
    const auto N = preds.scores.rows();
    const auto K = preds.scores.cols();
    Matrix out(N, K);
    for (Eigen::Index n = 0; n < N; ++n) {
        const auto row = preds.scores.row(n);
        if (const auto* t = std::get_if<TemperatureDistortion>(&distortion)) {
            Vector z(K);
            for (Eigen::Index k = 0; k < K; ++k)
                z(k) = preds.kind == ScoreKind::logits ? row(k) : std::log(std::max(row(k), 1e-300));
            out.row(n) = softargmax(z / t->temperature).transpose();
        } else if (const auto* b = std::get_if<BetaDistortion>(&distortion)) {
            if (K != 2) throw InputError("beta map needs two classes");
            const double s1 = preds.kind == ScoreKind::simplex ? row(1) : softargmax(row)(1);
            const double v = beta_map(*b, s1);
            out(n, 0) = 1.0 - v;
            out(n, 1) = v;
        } else {
            if (preds.kind != ScoreKind::logits) throw InputError("tabulated latent map expects logits");
            const auto& l = std::get<LatentDistortion>(distortion);
            Vector g(K);
            for (Eigen::Index k = 0; k < K; ++k) g(k) = tabulated_value(l, row(k));
            out.row(n) = softargmax(g).transpose();
        }
    }
    return out;
}

/// ECE with each bin's empirical accuracy replaced by the mean true
/// probability of the predicted class (noise-free reference).
inline double oracle_ece(const SynthTruth& truth, const PredictionSet& preds, const BinningConfig& binning = {},
                         double p = 1.0)
{
    if (truth.true_posteriors.rows() != preds.scores.rows())
        throw InputError("truth and predictions have different sample counts");
    if (!(p >= 1.0) || !std::isfinite(p)) throw InputError("ECE order p must be finite and >= 1");
    check_binning(binning);
    const auto B = static_cast<std::size_t>(binning.num_bins);
    std::vector<double> conf_sum(B, 0.0), true_sum(B, 0.0);
    std::vector<std::size_t> count(B, 0);
    const auto data = confidences(preds);
    for (Eigen::Index n = 0; n < preds.scores.rows(); ++n) {
        const auto pred = static_cast<Eigen::Index>(argmax(preds.scores.row(n)));
        const std::size_t b = bin_index(data.confidence[static_cast<std::size_t>(n)], binning.num_bins);
        conf_sum[b] += data.confidence[static_cast<std::size_t>(n)];
        true_sum[b] += truth.true_posteriors(n, pred);
        ++count[b];
    }
    double total = 0.0;
    std::size_t nonempty = 0;
    const double N = static_cast<double>(preds.scores.rows());
    for (std::size_t b = 0; b < B; ++b) {
        if (count[b] == 0) continue;
        ++nonempty;
        const double gap = std::pow(std::abs(conf_sum[b] / count[b] - true_sum[b] / count[b]), p);
        total += binning.weighting == BinWeighting::frequency ? gap * static_cast<double>(count[b]) / N : gap;
    }
    if (nonempty == 0) return 0.0;
    const double root = std::pow(total, 1.0 / p);
    return binning.weighting == BinWeighting::frequency ? root : root / static_cast<double>(nonempty);
}

}  // namespace calibra
