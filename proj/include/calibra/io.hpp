#pragma once

// File formats: score CSVs, model and report JSON documents, truth sidecars.
// Every real is written in its shortest round-trip decimal form.

#include "calibra/calibrator.hpp"
#include "calibra/core.hpp"
#include "calibra/metrics.hpp"
#include "calibra/synthetic.hpp"

#include "json.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace calibra {

using Json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

inline std::string format_double(double v)
{
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

/// Writes to a temporary sibling and renames it over the target.
inline void atomic_write(const std::string& path, std::string_view content)
{
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw InputError("cannot open '" + tmp + "' for writing");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) throw InputError("failed writing '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw InputError("cannot move output into place at '" + path + "'");
    }
}

inline std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------- scores CSV

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

inline std::string row_error(const std::string& source, std::size_t line, const std::string& what)
{
    return source + ":" + std::to_string(line) + ": " + what;
}

}  // namespace detail

/// Header `{kind}_0,...,{kind}_{K-1},label`, then one row per sample.
inline PredictionSet read_scores_csv(std::istream& in, const std::string& source = "<input>")
{
    std::string line;
    std::size_t line_no = 0;
    auto next_line = [&]() -> bool {
        if (!std::getline(in, line)) return false;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return true;
    };
    if (!next_line()) throw InputError(source + ": empty file, expected a header row");
    const auto header = detail::split_fields(line);
    if (header.size() < 3 || header.back() != "label")
        throw InputError(detail::row_error(source, line_no, "header must list the score columns followed by 'label'"));
    const auto K = header.size() - 1;
    const auto underscore = header[0].rfind('_');
    if (underscore == std::string_view::npos)
        throw InputError(detail::row_error(source, line_no, "header columns must be named logits_k or simplex_k"));
    const std::string_view kind_name = header[0].substr(0, underscore);
    if (kind_name != "logits" && kind_name != "simplex")
        throw InputError(detail::row_error(source, line_no, "unknown score kind '" + std::string(kind_name) + "'"));
    for (std::size_t k = 0; k < K; ++k)
        if (header[k] != std::string(kind_name) + "_" + std::to_string(k))
            throw InputError(detail::row_error(source, line_no,
                                               "expected column '" + std::string(kind_name) + "_" + std::to_string(k) +
                                                   "', found '" + std::string(header[k]) + "'"));

    PredictionSet preds;
    preds.kind = score_kind_from_string(kind_name);
    std::vector<double> values;
    bool blank_seen = false;
    while (next_line()) {
        if (line.empty()) {
            blank_seen = true;
            continue;
        }
        if (blank_seen) throw InputError(detail::row_error(source, line_no, "data after a blank line"));
        const auto fields = detail::split_fields(line);
        if (fields.size() != K + 1)
            throw InputError(detail::row_error(source, line_no,
                                               "expected " + std::to_string(K + 1) + " fields, found " +
                                                   std::to_string(fields.size())));
        double row_sum = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            double v = 0.0;
            const auto f = fields[k];
            const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
            if (f.empty() || res.ec != std::errc() || res.ptr != f.data() + f.size())
                throw InputError(detail::row_error(source, line_no, "malformed number '" + std::string(f) + "'"));
            if (!std::isfinite(v)) throw InputError(detail::row_error(source, line_no, "non-finite score"));
            if (preds.kind == ScoreKind::simplex && v < 0.0)
                throw InputError(detail::row_error(source, line_no, "negative probability"));
            row_sum += v;
            values.push_back(v);
        }
        if (preds.kind == ScoreKind::simplex && std::abs(row_sum - 1.0) > kSimplexTol)
            throw InputError(detail::row_error(source, line_no, "probabilities do not sum to one"));
        int label = -1;
        const auto lf = fields[K];
        const auto res = std::from_chars(lf.data(), lf.data() + lf.size(), label);
        if (lf.empty() || res.ec != std::errc() || res.ptr != lf.data() + lf.size())
            throw InputError(detail::row_error(source, line_no, "malformed label '" + std::string(lf) + "'"));
        if (label < 0 || static_cast<std::size_t>(label) >= K)
            throw InputError(detail::row_error(source, line_no, "label " + std::to_string(label) + " out of range"));
        preds.labels.push_back(label);
    }
    if (preds.labels.empty()) throw InputError(source + ": no data rows");
    preds.scores = Eigen::Map<Matrix>(values.data(), static_cast<Eigen::Index>(preds.labels.size()),
                                      static_cast<Eigen::Index>(K));
    return preds;
}

inline PredictionSet read_scores_csv(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path + "'");
    return read_scores_csv(in, path);
}

inline std::string scores_csv(const PredictionSet& preds)
{
    const auto K = preds.scores.cols();
    const std::string_view kind = to_string(preds.kind);
    std::string out;
    for (Eigen::Index k = 0; k < K; ++k) {
        out += kind;
        out += "_" + std::to_string(k) + ",";
    }
    out += "label\n";
    for (Eigen::Index n = 0; n < preds.scores.rows(); ++n) {
        for (Eigen::Index k = 0; k < K; ++k) {
            out += format_double(preds.scores(n, k));
            out += ',';
        }
        out += std::to_string(preds.labels[static_cast<std::size_t>(n)]);
        out += '\n';
    }
    return out;
}

inline void write_scores_csv(const std::string& path, const PredictionSet& preds) { atomic_write(path, scores_csv(preds)); }

// ---------------------------------------------------------------- JSON helpers

namespace detail {

inline Json to_json_array(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Vector vector_from_json(const Json& j, const char* what)
{
    if (!j.is_array()) throw InputError(std::string("model field '") + what + "' must be an array");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw InputError(std::string("model field '") + what + "' must contain numbers");
        v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    }
    return v;
}

inline std::vector<double> doubles_from_json(const Json& j, const char* what)
{
    const Vector v = vector_from_json(j, what);
    return {v.data(), v.data() + v.size()};
}

inline const Json& field(const Json& j, const char* name)
{
    if (!j.is_object() || !j.contains(name)) throw InputError(std::string("model is missing field '") + name + "'");
    return j.at(name);
}

inline double number(const Json& j, const char* name)
{
    const auto& f = field(j, name);
    if (!f.is_number()) throw InputError(std::string("model field '") + name + "' must be a number");
    return f.get<double>();
}

inline Json nullable(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline double from_nullable(const Json& j) { return j.is_null() ? kNaN : j.get<double>(); }

// Binary calibrators carry their own method tag.
inline Json binary_to_json(const BinaryCalibrator& cal)
{
    struct Visitor {
        Json operator()(const IdentityMap&) const { return {{"method", "identity"}}; }
        Json operator()(const PlattParams& p) const { return {{"method", "platt"}, {"a", p.a}, {"b", p.b}}; }
        Json operator()(const IsotonicMap& m) const
        {
            return {{"method", "isotonic"}, {"breakpoints", m.breakpoints}, {"values", m.values}};
        }
        Json operator()(const BetaParams& p) const
        {
            return {{"method", "beta"}, {"a", p.a}, {"b", p.b}, {"c", p.c}, {"degenerate", p.degenerate}};
        }
        Json operator()(const BbqModel& m) const
        {
            Json models = Json::array();
            for (const auto& b : m.models)
                models.push_back({{"edges", b.edges},
                                  {"posterior_means", b.posterior_means},
                                  {"log_marginal_likelihood", b.log_marginal_likelihood}});
            return {{"method", "bbq"}, {"models", models}, {"weights", m.weights}};
        }
    };
    return std::visit(Visitor{}, cal);
}

inline BinaryCalibrator binary_from_json(const Json& j)
{
    const auto& tag = field(j, "method");
    if (!tag.is_string()) throw InputError("calibrator method tag must be a string");
    const auto name = tag.get<std::string>();
    if (name == "identity") return IdentityMap{};
    if (name == "platt") return PlattParams{number(j, "a"), number(j, "b")};
    if (name == "isotonic") {
        IsotonicMap m{doubles_from_json(field(j, "breakpoints"), "breakpoints"),
                      doubles_from_json(field(j, "values"), "values")};
        if (m.breakpoints.empty() || m.breakpoints.size() != m.values.size())
            throw InputError("isotonic map needs matching, nonempty breakpoints and values");
        return m;
    }
    if (name == "beta") {
        BetaParams p{number(j, "a"), number(j, "b"), number(j, "c"), false};
        const auto& d = field(j, "degenerate");
        if (!d.is_boolean()) throw InputError("model field 'degenerate' must be a boolean");
        p.degenerate = d.get<bool>();
        return p;
    }
    if (name == "bbq") {
        BbqModel m;
        const auto& models = field(j, "models");
        if (!models.is_array() || models.empty()) throw InputError("BBQ model list must be a nonempty array");
        for (const auto& b : models) {
            BbqBinning bin{doubles_from_json(field(b, "edges"), "edges"),
                           doubles_from_json(field(b, "posterior_means"), "posterior_means"),
                           number(b, "log_marginal_likelihood")};
            if (bin.edges.size() != bin.posterior_means.size() + 1)
                throw InputError("BBQ binning needs one more edge than bins");
            m.models.push_back(std::move(bin));
        }
        m.weights = doubles_from_json(field(j, "weights"), "weights");
        if (m.weights.size() != m.models.size()) throw InputError("BBQ weights do not match its models");
        return m;
    }
    throw InputError("unknown calibrator method '" + name + "'");
}

inline Json prior_to_json(const PriorMean& p)
{
    switch (p.type) {
    case PriorMean::Type::log: return {{"type", "log"}};
    case PriorMean::Type::identity: return {{"type", "identity"}};
    case PriorMean::Type::affine: return {{"type", "affine"}, {"slope", p.slope}, {"intercept", p.intercept}};
    }
    return {};
}

inline PriorMean prior_from_json(const Json& j)
{
    const auto& t = field(j, "type");
    if (!t.is_string()) throw InputError("prior mean type must be a string");
    const auto name = t.get<std::string>();
    if (name == "log") return PriorMean::log();
    if (name == "identity") return PriorMean::identity();
    if (name == "affine") return PriorMean::affine(number(j, "slope"), number(j, "intercept"));
    throw InputError("unknown prior mean '" + name + "'");
}

inline void gp_to_json(const GpCalibrationModel& gp, Json& j)
{
    const auto M = gp.num_inducing();
    j["prior_mean"] = prior_to_json(gp.prior_mean);
    j["M"] = M;
    j["w"] = to_json_array(gp.inducing_inputs);
    j["m"] = to_json_array(gp.variational_mean);
    std::vector<double> tri;
    for (Eigen::Index i = 0; i < M; ++i)
        for (Eigen::Index k = 0; k <= i; ++k) tri.push_back(gp.variational_cov_factor(i, k));
    j["L_S"] = tri;
    // Lengthscale stored as ln l; halving and doubling are exact.
    j["kernel"] = {{"log_sv", gp.kernel.log_signal_variance},
                   {"log_ls", 0.5 * gp.kernel.log_lengthscale_sq},
                   {"log_nv", gp.kernel.log_noise_variance}};
    j["cov_structure"] = gp.cov_structure == CovStructure::diagonal ? "diagonal" : "block_diagonal";
    j["diagnostics"] = {{"initial_elbo", nullable(gp.diagnostics.initial_elbo)},
                        {"final_elbo", nullable(gp.diagnostics.final_elbo)},
                        {"iterations", gp.diagnostics.iterations},
                        {"converged", gp.diagnostics.converged},
                        {"single_class", gp.diagnostics.single_class}};
}

inline GpCalibrationModel gp_from_json(const Json& j, ScoreKind kind)
{
    GpCalibrationModel gp;
    gp.input_kind = kind;
    gp.prior_mean = prior_from_json(field(j, "prior_mean"));
    const auto& Mj = field(j, "M");
    if (!Mj.is_number_integer() || Mj.get<long long>() < 1) throw InputError("model field 'M' must be a positive integer");
    const auto M = static_cast<Eigen::Index>(Mj.get<long long>());
    gp.inducing_inputs = vector_from_json(field(j, "w"), "w");
    gp.variational_mean = vector_from_json(field(j, "m"), "m");
    const Vector tri = vector_from_json(field(j, "L_S"), "L_S");
    if (gp.inducing_inputs.size() != M || gp.variational_mean.size() != M || tri.size() != M * (M + 1) / 2)
        throw InputError("gpcalib model arrays do not match M");
    gp.variational_cov_factor = Matrix::Zero(M, M);
    Eigen::Index o = 0;
    for (Eigen::Index i = 0; i < M; ++i)
        for (Eigen::Index k = 0; k <= i; ++k) gp.variational_cov_factor(i, k) = tri(o++);
    const auto& kern = field(j, "kernel");
    gp.kernel.log_signal_variance = number(kern, "log_sv");
    gp.kernel.log_lengthscale_sq = 2.0 * number(kern, "log_ls");
    gp.kernel.log_noise_variance = number(kern, "log_nv");
    const auto& cs = field(j, "cov_structure");
    if (cs == "diagonal")
        gp.cov_structure = CovStructure::diagonal;
    else if (cs == "block_diagonal")
        gp.cov_structure = CovStructure::block_diagonal;
    else
        throw InputError("unknown covariance structure");
    if (j.contains("diagnostics")) {
        const auto& d = j.at("diagnostics");
        if (d.contains("initial_elbo")) gp.diagnostics.initial_elbo = from_nullable(d.at("initial_elbo"));
        if (d.contains("final_elbo")) gp.diagnostics.final_elbo = from_nullable(d.at("final_elbo"));
        if (d.contains("iterations")) gp.diagnostics.iterations = d.at("iterations").get<int>();
        if (d.contains("converged")) gp.diagnostics.converged = d.at("converged").get<bool>();
        if (d.contains("single_class")) gp.diagnostics.single_class = d.at("single_class").get<bool>();
    }
    gp.validate();
    return gp;
}

}  // namespace detail

// ---------------------------------------------------------------- model JSON

inline Json model_to_json(const StoredModel& model)
{
    Json j;
    j["version"] = kFormatVersion;
    j["method"] = to_string(model.method);
    j["input_kind"] = to_string(model.input_kind);
    j["num_classes"] = model.num_classes;
    if (const auto* gp = std::get_if<GpCalibrationModel>(&model.body)) {
        detail::gp_to_json(*gp, j);
    } else if (const auto* t = std::get_if<TemperatureParam>(&model.body)) {
        j["temperature"] = t->temperature;
    } else if (const auto* b = std::get_if<BinaryModel>(&model.body)) {
        j["one_vs_all"] = false;
        j["calibrator"] = detail::binary_to_json(b->calibrator);
    } else {
        const auto& ova = std::get<OneVsAllModel>(model.body);
        j["one_vs_all"] = true;
        Json cals = Json::array();
        for (std::size_t k = 0; k < ova.calibrators.size(); ++k) {
            Json c = detail::binary_to_json(ova.calibrators[k]);
            c["class_degenerate"] = static_cast<bool>(ova.degenerate[k]);
            cals.push_back(std::move(c));
        }
        j["calibrators"] = cals;
    }
    return j;
}

inline StoredModel model_from_json(const Json& j)
{
    if (!j.is_object()) throw InputError("model file must contain a JSON object");
    const auto& v = detail::field(j, "version");
    if (!v.is_number_integer() || v.get<long long>() != kFormatVersion)
        throw InputError("unsupported model version " + v.dump());
    StoredModel model;
    const auto& method = detail::field(j, "method");
    const auto& kind = detail::field(j, "input_kind");
    if (!method.is_string() || !kind.is_string()) throw InputError("model method and input_kind must be strings");
    model.method = method_from_string(method.get<std::string>());
    model.input_kind = score_kind_from_string(kind.get<std::string>());
    const auto& K = detail::field(j, "num_classes");
    if (!K.is_number_integer() || K.get<long long>() < 2) throw InputError("model field 'num_classes' must be >= 2");
    model.num_classes = static_cast<std::size_t>(K.get<long long>());
    switch (model.method) {
    case Method::gpcalib: model.body = detail::gp_from_json(j, model.input_kind); break;
    case Method::temperature: {
        const double T = detail::number(j, "temperature");
        if (!(T > 0.0) || !std::isfinite(T)) throw InputError("temperature must be positive");
        model.body = TemperatureParam{T};
        break;
    }
    default: {
        const auto& ova = detail::field(j, "one_vs_all");
        if (!ova.is_boolean()) throw InputError("model field 'one_vs_all' must be a boolean");
        const auto bm = to_binary_method(model.method);
        if (!ova.get<bool>()) {
            if (model.num_classes != 2) throw InputError("a single binary calibrator needs two classes");
            model.body = BinaryModel{bm, detail::binary_from_json(detail::field(j, "calibrator"))};
        } else {
            OneVsAllModel m;
            m.method = bm;
            const auto& cals = detail::field(j, "calibrators");
            if (!cals.is_array() || cals.size() != model.num_classes)
                throw InputError("one-vs-all model needs one calibrator per class");
            for (const auto& c : cals) {
                m.calibrators.push_back(detail::binary_from_json(c));
                m.degenerate.push_back(c.contains("class_degenerate") && c.at("class_degenerate").get<bool>());
            }
            model.body = std::move(m);
        }
    }
    }
    return model;
}

inline void save_model(const std::string& path, const StoredModel& model)
{
    atomic_write(path, model_to_json(model).dump(2) + "\n");
}

inline StoredModel load_model(const std::string& path)
{
    const std::string text = read_file(path);
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::exception& e) {
        throw InputError("'" + path + "' is not valid JSON: " + e.what());
    }
    try {
        return model_from_json(j);
    } catch (const Json::exception& e) {
        throw InputError("'" + path + "' does not match the model schema: " + e.what());
    }
}

// ---------------------------------------------------------------- report JSON

struct EvaluationReport {
    CalibrationReport report;
    ReliabilityData reliability;
    std::optional<Theorem1Check> theorem1;  // absent when o or u is undefined
    std::size_t num_samples = 0;
    std::size_t num_classes = 0;
};

inline EvaluationReport make_report(const PredictionSet& preds, const BinningConfig& binning = {}, double p = 1.0)
{
    preds.validate();
    EvaluationReport r;
    r.report = evaluate(preds, binning, p);
    r.reliability = reliability(preds, binning);
    r.num_samples = preds.size();
    r.num_classes = preds.num_classes();
    const auto ou = over_underconfidence(preds);
    if (ou.overconfidence_defined && ou.underconfidence_defined) r.theorem1 = theorem1_check(preds, binning.num_bins);
    return r;
}

inline Json report_to_json(const EvaluationReport& r)
{
    using detail::nullable;
    const auto& c = r.report;
    Json bins = Json::array();
    const auto B = r.reliability.bins.size();
    for (std::size_t b = 0; b < B; ++b) {
        const auto& bin = r.reliability.bins[b];
        bins.push_back({{"lower", static_cast<double>(b) / static_cast<double>(B)},
                        {"upper", static_cast<double>(b + 1) / static_cast<double>(B)},
                        {"mean_confidence", nullable(bin.mean_confidence)},
                        {"accuracy", nullable(bin.accuracy)},
                        {"count", bin.count}});
    }
    Json j = {{"version", kFormatVersion},
              {"num_samples", r.num_samples},
              {"num_classes", r.num_classes},
              {"binning",
               {{"num_bins", c.binning.num_bins},
                {"weighting", c.binning.weighting == BinWeighting::frequency ? "frequency" : "uniform"}}},
              {"p", c.p},
              {"ece_1", nullable(c.ece_1)},
              {"ece_p", nullable(c.ece_p)},
              {"ece_max", nullable(c.ece_max)},
              {"nll", nullable(c.nll)},
              {"accuracy", nullable(c.accuracy)},
              {"mean_confidence", nullable(c.mean_confidence)},
              {"overconfidence", nullable(c.overconfidence)},
              {"underconfidence", nullable(c.underconfidence)},
              {"reliability", {{"total", r.reliability.total}, {"bins", bins}}}};
    if (r.theorem1)
        j["theorem1"] = {{"lhs", r.theorem1->lhs}, {"ece1", r.theorem1->ece1}, {"holds", r.theorem1->holds}};
    else
        j["theorem1"] = nullptr;
    return j;
}

inline EvaluationReport report_from_json(const Json& j)
{
    using detail::field;
    using detail::from_nullable;
    const auto& v = field(j, "version");
    if (!v.is_number_integer() || v.get<long long>() != kFormatVersion) throw InputError("unsupported report version");
    EvaluationReport r;
    r.num_samples = field(j, "num_samples").get<std::size_t>();
    r.num_classes = field(j, "num_classes").get<std::size_t>();
    const auto& binning = field(j, "binning");
    r.report.binning.num_bins = field(binning, "num_bins").get<int>();
    r.report.binning.weighting =
        field(binning, "weighting").get<std::string>() == "uniform" ? BinWeighting::uniform : BinWeighting::frequency;
    r.report.p = field(j, "p").get<double>();
    r.report.ece_1 = from_nullable(field(j, "ece_1"));
    r.report.ece_p = from_nullable(field(j, "ece_p"));
    r.report.ece_max = from_nullable(field(j, "ece_max"));
    r.report.nll = from_nullable(field(j, "nll"));
    r.report.accuracy = from_nullable(field(j, "accuracy"));
    r.report.mean_confidence = from_nullable(field(j, "mean_confidence"));
    r.report.overconfidence = from_nullable(field(j, "overconfidence"));
    r.report.underconfidence = from_nullable(field(j, "underconfidence"));
    const auto& rel = field(j, "reliability");
    r.reliability.total = field(rel, "total").get<std::size_t>();
    for (const auto& b : field(rel, "bins"))
        r.reliability.bins.push_back({from_nullable(field(b, "mean_confidence")), from_nullable(field(b, "accuracy")),
                                      field(b, "count").get<std::size_t>()});
    const auto& t = field(j, "theorem1");
    if (!t.is_null())
        r.theorem1 = Theorem1Check{field(t, "lhs").get<double>(), field(t, "ece1").get<double>(),
                                   field(t, "holds").get<bool>()};
    return r;
}

/// Plot-ready reliability table: bin, lower, upper, mean_conf, acc, count.
inline std::string reliability_csv(const ReliabilityData& rel)
{
    std::string out = "bin,lower,upper,mean_conf,acc,count\n";
    const auto B = rel.bins.size();
    for (std::size_t b = 0; b < B; ++b) {
        const auto& bin = rel.bins[b];
        out += std::to_string(b) + "," + format_double(static_cast<double>(b) / static_cast<double>(B)) + "," +
               format_double(static_cast<double>(b + 1) / static_cast<double>(B)) + ",";
        out += bin.count ? format_double(bin.mean_confidence) : std::string();
        out += ",";
        out += bin.count ? format_double(bin.accuracy) : std::string();
        out += "," + std::to_string(bin.count) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------- truth sidecar

inline Json distortion_to_json(const Distortion& d)
{
    if (const auto* t = std::get_if<TemperatureDistortion>(&d)) return {{"type", "temperature"}, {"temperature", t->temperature}};
    if (const auto* b = std::get_if<BetaDistortion>(&d)) return {{"type", "beta"}, {"a", b->a}, {"b", b->b}, {"c", b->c}};
    const auto& l = std::get<LatentDistortion>(d);
    return {{"type", "latent"}, {"x", l.x}, {"g", l.g}};
}

inline Json truth_to_json(const SynthConfig& cfg, const SynthTruth& truth)
{
    Json rows = Json::array();
    for (Eigen::Index n = 0; n < truth.true_posteriors.rows(); ++n) {
        const auto r = truth.true_posteriors.row(n);
        rows.push_back(std::vector<double>(r.data(), r.data() + r.size()));
    }
    return {{"version", kFormatVersion},
            {"num_samples", cfg.num_samples},
            {"num_classes", cfg.num_classes},
            {"concentration", cfg.concentration},
            {"output_kind", to_string(cfg.output_kind)},
            {"seed", cfg.seed},
            {"distortion", distortion_to_json(truth.distortion)},
            {"true_posteriors", rows}};
}

}  // namespace calibra
