#pragma once

// Calibration metrics: binned ECE estimators, maximum calibration error,
// over-/underconfidence and the negative log-likelihood.

#include "calibra/core.hpp"

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace calibra {

enum class BinWeighting { uniform, frequency };

struct BinningConfig {
    int num_bins = 100;
    BinWeighting weighting = BinWeighting::frequency;
};

struct ReliabilityBin {
    double mean_confidence = kNaN;
    double accuracy = kNaN;
    std::size_t count = 0;
};

struct ReliabilityData {
    std::vector<ReliabilityBin> bins;
    std::size_t total = 0;
};

struct OverUnderconfidence {
    double overconfidence = kNaN;
    double underconfidence = kNaN;
    bool overconfidence_defined = false;   // false when there are no misclassified samples
    bool underconfidence_defined = false;  // false when there are no correct samples
};

struct Theorem1Check {
    double lhs = 0.0;
    double ece1 = 0.0;
    bool holds = false;
};

struct CalibrationReport {
    double ece_1 = 0.0;
    double ece_p = 0.0;
    double p = 1.0;
    double ece_max = 0.0;
    double nll = 0.0;
    double accuracy = 0.0;
    double overconfidence = kNaN;
    double underconfidence = kNaN;
    double mean_confidence = 0.0;
    BinningConfig binning;
};

/// Bin index for a confidence under edges b/B, bins right-closed and the
/// first bin also closed on the left.
inline std::size_t bin_index(double confidence, int num_bins)
{
    const double B = num_bins;
    auto b = static_cast<long>(std::ceil(confidence * B)) - 1;
    b = std::clamp(b, 0L, static_cast<long>(num_bins) - 1);
    // Correct for rounding in confidence * B against the exact edge b / B.
    while (b > 0 && confidence <= static_cast<double>(b) / B) --b;
    while (b < num_bins - 1 && confidence > static_cast<double>(b + 1) / B) ++b;
    return static_cast<std::size_t>(b);
}

inline void check_binning(const BinningConfig& binning)
{
    if (binning.num_bins < 1) throw InputError("number of bins must be positive");
}

inline ReliabilityData reliability(const ConfidenceData& data, const BinningConfig& binning)
{
    check_binning(binning);
    const auto B = static_cast<std::size_t>(binning.num_bins);
    std::vector<double> conf_sum(B, 0.0);
    std::vector<double> correct_sum(B, 0.0);
    ReliabilityData out;
    out.bins.resize(B);
    for (std::size_t n = 0; n < data.confidence.size(); ++n) {
        const std::size_t b = bin_index(data.confidence[n], binning.num_bins);
        conf_sum[b] += data.confidence[n];
        correct_sum[b] += data.correct[n] ? 1.0 : 0.0;
        ++out.bins[b].count;
    }
    for (std::size_t b = 0; b < B; ++b) {
        auto& bin = out.bins[b];
        if (bin.count == 0) continue;
        bin.mean_confidence = conf_sum[b] / static_cast<double>(bin.count);
        bin.accuracy = correct_sum[b] / static_cast<double>(bin.count);
    }
    out.total = data.confidence.size();
    return out;
}

inline ReliabilityData reliability(const PredictionSet& preds, const BinningConfig& binning)
{
    return reliability(confidences(preds), binning);
}

/// ECE_p from already binned statistics. Empty bins are skipped; under
/// uniform weighting the 1/B prefactor counts nonempty bins only.
inline double ece_from_reliability(const ReliabilityData& rel, double p, BinWeighting weighting)
{
    if (!(p >= 1.0) || !std::isfinite(p)) throw InputError("ECE order p must be finite and >= 1");
    double acc = 0.0;
    std::size_t nonempty = 0;
    const double N = static_cast<double>(rel.total);
    for (const auto& bin : rel.bins) {
        if (bin.count == 0) continue;
        ++nonempty;
        const double gap = std::pow(std::abs(bin.mean_confidence - bin.accuracy), p);
        acc += weighting == BinWeighting::frequency ? (static_cast<double>(bin.count) / N) * gap : gap;
    }
    if (nonempty == 0) return 0.0;
    const double root = std::pow(acc, 1.0 / p);
    return weighting == BinWeighting::frequency ? root : root / static_cast<double>(nonempty);
}

inline double max_gap_from_reliability(const ReliabilityData& rel)
{
    double worst = 0.0;
    for (const auto& bin : rel.bins)
        if (bin.count > 0) worst = std::max(worst, std::abs(bin.mean_confidence - bin.accuracy));
    return worst;
}

inline double ece_p(const PredictionSet& preds, double p, const BinningConfig& binning = {})
{
    return ece_from_reliability(reliability(preds, binning), p, binning.weighting);
}

inline double ece_max(const PredictionSet& preds, const BinningConfig& binning = {})
{
    return max_gap_from_reliability(reliability(preds, binning));
}

inline OverUnderconfidence over_underconfidence(const ConfidenceData& data)
{
    double wrong_sum = 0.0, right_sum = 0.0;
    std::size_t wrong = 0, right = 0;
    for (std::size_t n = 0; n < data.confidence.size(); ++n) {
        if (data.correct[n]) {
            right_sum += 1.0 - data.confidence[n];
            ++right;
        } else {
            wrong_sum += data.confidence[n];
            ++wrong;
        }
    }
    OverUnderconfidence out;
    if (wrong > 0) {
        out.overconfidence = wrong_sum / static_cast<double>(wrong);
        out.overconfidence_defined = true;
    }
    if (right > 0) {
        out.underconfidence = right_sum / static_cast<double>(right);
        out.underconfidence_defined = true;
    }
    return out;
}

inline OverUnderconfidence over_underconfidence(const PredictionSet& preds)
{
    return over_underconfidence(confidences(preds));
}

inline double accuracy(const ConfidenceData& data)
{
    std::size_t right = 0;
    for (bool c : data.correct) right += c ? 1 : 0;
    return static_cast<double>(right) / static_cast<double>(data.correct.size());
}

inline double mean_confidence(const ConfidenceData& data)
{
    double s = 0.0;
    for (double c : data.confidence) s += c;
    return s / static_cast<double>(data.confidence.size());
}

/// |o P(wrong) - u P(right)| against the frequency-weighted ECE_1.
inline Theorem1Check theorem1_check(const PredictionSet& preds, int num_bins = 100)
{
    const auto data = confidences(preds);
    const auto ou = over_underconfidence(data);
    if (!ou.overconfidence_defined || !ou.underconfidence_defined)
        throw InputError("over-/underconfidence undefined: all predictions are correct or all are wrong");
    const double acc = accuracy(data);
    Theorem1Check out;
    out.lhs = std::abs(ou.overconfidence * (1.0 - acc) - ou.underconfidence * acc);
    out.ece1 = ece_from_reliability(reliability(data, {num_bins, BinWeighting::frequency}), 1.0,
                                    BinWeighting::frequency);
    out.holds = out.lhs <= out.ece1 + 1e-12;
    return out;
}

/// Mean negative log-probability of the true class; logits are normalized first.
inline double nll(const PredictionSet& preds)
{
    double total = 0.0;
    const std::size_t N = preds.size();
    for (std::size_t n = 0; n < N; ++n) {
        const auto idx = static_cast<Eigen::Index>(n);
        const auto y = static_cast<Eigen::Index>(preds.labels[n]);
        if (preds.kind == ScoreKind::simplex) {
            total -= std::log(std::max(preds.scores(idx, y), kProbFloor));
        } else {
            const auto row = preds.scores.row(idx);
            total -= std::max(row(y) - log_sum_exp(row), std::log(kProbFloor));
        }
    }
    return total / static_cast<double>(N);
}

inline CalibrationReport evaluate(const PredictionSet& preds, const BinningConfig& binning = {}, double p = 1.0)
{
    const auto data = confidences(preds);
    const auto rel = reliability(data, binning);
    const auto ou = over_underconfidence(data);
    CalibrationReport r;
    r.binning = binning;
    r.p = p;
    r.ece_1 = ece_from_reliability(rel, 1.0, binning.weighting);
    r.ece_p = ece_from_reliability(rel, p, binning.weighting);
    r.ece_max = max_gap_from_reliability(rel);
    r.nll = nll(preds);
    r.accuracy = accuracy(data);
    r.overconfidence = ou.overconfidence;
    r.underconfidence = ou.underconfidence;
    r.mean_confidence = mean_confidence(data);
    return r;
}

}  // namespace calibra
