#pragma once

// Shared types for the calibration library: prediction sets, the softargmax
// link, error types and a counter-based random number generator.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace calibra {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Floor applied to probabilities before taking a logarithm.
inline constexpr double kProbFloor = 1e-12;

/// Tolerance for simplex rows summing to one.
inline constexpr double kSimplexTol = 1e-9;

inline const double kNaN = std::numeric_limits<double>::quiet_NaN();

// Errors. InputError maps to CLI exit code 2, NumericalError / FitError to 3.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class ScoreKind { logits, simplex };

inline std::string_view to_string(ScoreKind kind) { return kind == ScoreKind::logits ? "logits" : "simplex"; }

inline ScoreKind score_kind_from_string(std::string_view s)
{
    if (s == "logits") return ScoreKind::logits;
    if (s == "simplex") return ScoreKind::simplex;
    throw InputError("unknown score kind '" + std::string(s) + "'");
}

/// Index of the largest entry; ties go to the lowest index.
template <typename Row>
std::size_t argmax(const Row& row)
{
    std::size_t best = 0;
    for (Eigen::Index k = 1; k < row.size(); ++k)
        if (row(k) > row(best)) best = static_cast<std::size_t>(k);
    return best;
}

/// Numerically stable softargmax of one row.
template <typename Row>
Vector softargmax(const Row& z)
{
    Vector e = z;
    e = (e.array() - e.maxCoeff()).exp();
    return e / e.sum();
}

template <typename Row>
double log_sum_exp(const Row& z)
{
    const double top = z.maxCoeff();
    return top + std::log((z.array() - top).exp().sum());
}

/// N x K classifier outputs plus the true labels.
struct PredictionSet {
    Matrix scores;
    std::vector<int> labels;
    ScoreKind kind = ScoreKind::simplex;

    std::size_t size() const { return labels.size(); }
    std::size_t num_classes() const { return static_cast<std::size_t>(scores.cols()); }

    /// Throws InputError when shapes, labels or simplex rows are invalid.
    void validate() const
    {
        if (scores.rows() < 1) throw InputError("prediction set is empty");
        if (scores.cols() < 2) throw InputError("prediction set needs at least two classes");
        if (static_cast<std::size_t>(scores.rows()) != labels.size())
            throw InputError("number of labels does not match number of score rows");
        const int K = static_cast<int>(scores.cols());
        for (std::size_t n = 0; n < labels.size(); ++n) {
            if (labels[n] < 0 || labels[n] >= K)
                throw InputError("label out of range in row " + std::to_string(n));
            const auto row = scores.row(static_cast<Eigen::Index>(n));
            if (!row.allFinite()) throw InputError("non-finite score in row " + std::to_string(n));
            if (kind == ScoreKind::simplex) {
                if ((row.array() < 0.0).any())
                    throw InputError("negative probability in row " + std::to_string(n));
                if (std::abs(row.sum() - 1.0) > kSimplexTol)
                    throw InputError("probabilities do not sum to one in row " + std::to_string(n));
            }
        }
    }
};

/// Rows mapped onto the probability simplex (softargmax for logits).
inline Matrix to_simplex(const Matrix& scores, ScoreKind kind)
{
    if (kind == ScoreKind::simplex) return scores;
    Matrix out(scores.rows(), scores.cols());
    for (Eigen::Index n = 0; n < scores.rows(); ++n) out.row(n) = softargmax(scores.row(n)).transpose();
    return out;
}

inline PredictionSet to_simplex(const PredictionSet& preds)
{
    return {to_simplex(preds.scores, preds.kind), preds.labels, ScoreKind::simplex};
}

/// Per-sample confidence (max simplex probability) and correctness.
struct ConfidenceData {
    std::vector<double> confidence;
    std::vector<bool> correct;
};

inline ConfidenceData confidences(const PredictionSet& preds)
{
    ConfidenceData out;
    const std::size_t N = preds.size();
    out.confidence.resize(N);
    out.correct.resize(N);
    for (std::size_t n = 0; n < N; ++n) {
        const auto idx = static_cast<Eigen::Index>(n);
        const std::size_t pred = argmax(preds.scores.row(idx));
        if (preds.kind == ScoreKind::simplex) {
            out.confidence[n] = preds.scores(idx, static_cast<Eigen::Index>(pred));
        } else {
            const Vector p = softargmax(preds.scores.row(idx));
            out.confidence[n] = p(static_cast<Eigen::Index>(pred));
        }
        out.correct[n] = static_cast<int>(pred) == preds.labels[n];
    }
    return out;
}

/// Counter-based generator: every draw is a pure function of (seed, stream,
/// counter), so results do not depend on evaluation order.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

    static std::uint64_t mix(std::uint64_t x)
    {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::uint64_t bits(std::uint64_t stream, std::uint64_t counter) const
    {
        return mix(mix(mix(seed_) ^ stream) ^ counter);
    }

    /// Uniform in the open interval (0, 1).
    double uniform(std::uint64_t stream, std::uint64_t counter) const
    {
        return (static_cast<double>(bits(stream, counter) >> 11) + 0.5) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller on two adjacent counters.
    double normal(std::uint64_t stream, std::uint64_t counter) const
    {
        const double u1 = uniform(stream, 2 * counter);
        const double u2 = uniform(stream, 2 * counter + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

private:
    std::uint64_t seed_;
};

}  // namespace calibra
