#pragma once

// One entry point per calibration method: fit on a prediction set, apply to
// new scores. Used by the command-line tool and the comparison driver.

#include "calibra/baselines.hpp"
#include "calibra/core.hpp"
#include "calibra/gpcalib.hpp"
#include "calibra/metrics.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace calibra {

enum class Method { gpcalib, platt, isotonic, beta, bbq, temperature };

inline std::string_view to_string(Method m)
{
    switch (m) {
    case Method::gpcalib: return "gpcalib";
    case Method::platt: return "platt";
    case Method::isotonic: return "isotonic";
    case Method::beta: return "beta";
    case Method::bbq: return "bbq";
    case Method::temperature: return "temperature";
    }
    return "gpcalib";
}

inline Method method_from_string(std::string_view s)
{
    for (Method m : {Method::gpcalib, Method::platt, Method::isotonic, Method::beta, Method::bbq, Method::temperature})
        if (to_string(m) == s) return m;
    throw InputError("unknown method '" + std::string(s) + "'");
}

inline bool is_binary_method(Method m) { return m != Method::gpcalib && m != Method::temperature; }

inline BinaryMethod to_binary_method(Method m)
{
    switch (m) {
    case Method::platt: return BinaryMethod::platt;
    case Method::isotonic: return BinaryMethod::isotonic;
    case Method::beta: return BinaryMethod::beta;
    case Method::bbq: return BinaryMethod::bbq;
    default: throw InputError("method '" + std::string(to_string(m)) + "' is not a binary method");
    }
}

/// Binary calibrator for K = 2, fitted on the class-1 probability.
struct BinaryModel {
    BinaryMethod method = BinaryMethod::platt;
    BinaryCalibrator calibrator;
};

using ModelBody = std::variant<GpCalibrationModel, TemperatureParam, BinaryModel, OneVsAllModel>;

struct StoredModel {
    Method method = Method::gpcalib;
    ScoreKind input_kind = ScoreKind::simplex;
    std::size_t num_classes = 0;
    ModelBody body;
};

struct FitOptions {
    bool one_vs_all = false;
    GpFitConfig gp;
};

struct PredictOptions {
    bool mean_approx = false;
    int num_samples = 100;
    std::uint64_t seed = 0;
};

namespace detail {

/// Logits used by temperature scaling; probabilities are mapped through ln.
inline Matrix as_logits(const Matrix& scores, ScoreKind kind)
{
    if (kind == ScoreKind::logits) return scores;
    return scores.array().max(kProbFloor).log().matrix();
}

inline std::vector<double> column(const Matrix& m, Eigen::Index k)
{
    std::vector<double> out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index n = 0; n < m.rows(); ++n) out[static_cast<std::size_t>(n)] = m(n, k);
    return out;
}

}  // namespace detail

inline StoredModel fit_model(Method method, const PredictionSet& data, const FitOptions& options = {})
{
    data.validate();
    StoredModel model;
    model.method = method;
    model.input_kind = data.kind;
    model.num_classes = data.num_classes();
    switch (method) {
    case Method::gpcalib: model.body = fit(data, options.gp); break;
    case Method::temperature:
        model.body = fit_temperature(detail::as_logits(data.scores, data.kind), data.labels);
        break;
    default: {
        const auto simplex = to_simplex(data);
        if (options.one_vs_all) {
            model.body = fit_one_vs_all(to_binary_method(method), simplex);
        } else if (data.num_classes() == 2) {
            std::vector<int> targets(data.labels.begin(), data.labels.end());
            const auto scores = detail::column(simplex.scores, 1);
            model.body = BinaryModel{to_binary_method(method), fit_binary(to_binary_method(method), scores, targets)};
        } else {
            throw FitError("method '" + std::string(to_string(method)) + "' is binary; use --one-vs-all for " +
                           std::to_string(data.num_classes()) + " classes");
        }
    }
    }
    return model;
}

/// Calibrated probabilities, one simplex row per input row.
inline Matrix apply_model(const StoredModel& model, const Matrix& scores, ScoreKind kind,
                          const PredictOptions& options = {})
{
    if (kind != model.input_kind)
        throw FitError("model was fitted on " + std::string(to_string(model.input_kind)) + " scores but the data are " +
                       std::string(to_string(kind)));
    if (static_cast<std::size_t>(scores.cols()) != model.num_classes)
        throw FitError("model expects " + std::to_string(model.num_classes) + " classes, data have " +
                       std::to_string(scores.cols()));
    if (const auto* gp = std::get_if<GpCalibrationModel>(&model.body))
        return options.mean_approx ? predict_mean(*gp, scores) : predict_mc(*gp, scores, options.num_samples, options.seed);
    if (const auto* t = std::get_if<TemperatureParam>(&model.body))
        return apply_temperature(*t, detail::as_logits(scores, kind));
    const Matrix simplex = to_simplex(scores, kind);
    if (const auto* ova = std::get_if<OneVsAllModel>(&model.body)) return apply_one_vs_all(*ova, simplex);
    const auto& bin = std::get<BinaryModel>(model.body);
    Matrix out(scores.rows(), 2);
    for (Eigen::Index n = 0; n < scores.rows(); ++n) {
        const double p1 = std::clamp(apply_binary(bin.calibrator, simplex(n, 1)), 0.0, 1.0);
        out(n, 0) = 1.0 - p1;
        out(n, 1) = p1;
    }
    return out;
}

inline PredictionSet apply_model(const StoredModel& model, const PredictionSet& data, const PredictOptions& options = {})
{
    return {apply_model(model, data.scores, data.kind, options), data.labels, ScoreKind::simplex};
}

}  // namespace calibra
