// calibra: fit, apply and evaluate calibration maps on classifier outputs.
//
// Exit codes: 0 success, 2 input or parse error, 3 numerical or fit failure.

#include "calibra/calibrator.hpp"
#include "calibra/io.hpp"
#include "calibra/metrics.hpp"
#include "calibra/synthetic.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace calibra;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitFit = 3;

std::uint64_t default_seed()
{
    const char* env = std::getenv("CALIBRA_SEED");
    if (!env || !*env) return 0;
    std::uint64_t seed = 0;
    const std::string_view s(env);
    const auto res = std::from_chars(s.data(), s.data() + s.size(), seed);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw InputError("CALIBRA_SEED must be a nonnegative integer, got '" + std::string(s) + "'");
    return seed;
}

PriorMean parse_prior(const std::string& s, ScoreKind kind)
{
    if (s.empty()) return default_prior_mean(kind);
    if (s == "log") return PriorMean::log();
    if (s == "identity") return PriorMean::identity();
    if (s.rfind("affine:", 0) == 0) {
        const auto body = s.substr(7);
        const auto comma = body.find(',');
        if (comma != std::string::npos) {
            try {
                return PriorMean::affine(std::stod(body.substr(0, comma)), std::stod(body.substr(comma + 1)));
            } catch (const std::exception&) {
            }
        }
    }
    throw InputError("prior must be log, identity or affine:SLOPE,INTERCEPT");
}

std::vector<double> parse_numbers(const std::string& s)
{
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        double v = 0.0;
        const auto res = std::from_chars(item.data(), item.data() + item.size(), v);
        if (item.empty() || res.ec != std::errc() || res.ptr != item.data() + item.size())
            throw InputError("malformed number '" + item + "'");
        out.push_back(v);
    }
    return out;
}

Distortion parse_distortion(const std::string& text, const std::string& table_path)
{
    if (!table_path.empty()) {
        std::ifstream in(table_path);
        if (!in) throw InputError("cannot open '" + table_path + "'");
        LatentDistortion d;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || (line_no == 1 && line == "x,g")) continue;
            const auto v = parse_numbers(line);
            if (v.size() != 2) throw InputError(table_path + ":" + std::to_string(line_no) + ": expected x,g");
            d.x.push_back(v[0]);
            d.g.push_back(v[1]);
        }
        return d;
    }
    const auto eq = text.find('=');
    const std::string name = text.substr(0, eq);
    const auto values = eq == std::string::npos ? std::vector<double>{} : parse_numbers(text.substr(eq + 1));
    if (name == "temperature" && values.size() == 1) return TemperatureDistortion{values[0]};
    if (name == "beta" && values.size() == 3) return BetaDistortion{values[0], values[1], values[2]};
    throw InputError("distortion must be temperature=T or beta=A,B,C (or pass --latent-table)");
}

Json fit_summary(const StoredModel& model, const PredictionSet& data)
{
    Json j = {{"method", to_string(model.method)},
              {"input_kind", to_string(model.input_kind)},
              {"num_samples", data.size()},
              {"num_classes", data.num_classes()}};
    if (const auto* gp = std::get_if<GpCalibrationModel>(&model.body)) {
        j["initial_elbo"] = gp->diagnostics.initial_elbo;
        j["final_elbo"] = gp->diagnostics.final_elbo;
        j["iterations"] = gp->diagnostics.iterations;
        j["converged"] = gp->diagnostics.converged;
        j["single_class"] = gp->diagnostics.single_class;
        j["inducing_inputs"] = std::vector<double>(gp->inducing_inputs.data(),
                                                   gp->inducing_inputs.data() + gp->inducing_inputs.size());
    } else {
        j["nll"] = nll(apply_model(model, data));
        if (const auto* t = std::get_if<TemperatureParam>(&model.body)) j["temperature"] = t->temperature;
        if (const auto* ova = std::get_if<OneVsAllModel>(&model.body)) {
            std::vector<int> degenerate;
            for (std::size_t k = 0; k < ova->degenerate.size(); ++k)
                if (ova->degenerate[k]) degenerate.push_back(static_cast<int>(k));
            j["degenerate_classes"] = degenerate;
        }
    }
    return j;
}

void warn_about(const StoredModel& model)
{
    if (const auto* gp = std::get_if<GpCalibrationModel>(&model.body)) {
        if (gp->diagnostics.single_class) std::cerr << "warning: calibration data contain a single class\n";
        if (!gp->diagnostics.converged) std::cerr << "warning: optimizer stopped before converging\n";
    }
    if (const auto* ova = std::get_if<OneVsAllModel>(&model.body))
        for (std::size_t k = 0; k < ova->degenerate.size(); ++k)
            if (ova->degenerate[k]) std::cerr << "warning: class " << k << " could not be fitted, identity used\n";
}

// ---------------------------------------------------------------- compare

struct MethodScores {
    double ece_1 = kNaN, mce = kNaN, nll = kNaN, accuracy = kNaN, o = kNaN, u = kNaN, fit_seconds = 0.0;
};

MethodScores score_of(const PredictionSet& calibrated, double seconds, int bins)
{
    const auto r = evaluate(calibrated, {bins, BinWeighting::frequency});
    return {r.ece_1, r.ece_max, r.nll, r.accuracy, r.overconfidence, r.underconfidence, seconds};
}

std::string csv_number(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }

std::string sanitize(std::string s)
{
    for (char& c : s)
        if (c == ',' || c == '\n' || c == '\r') c = ';';
    return s;
}

std::pair<PredictionSet, PredictionSet> resample_split(const PredictionSet& calib, const PredictionSet& test,
                                                       std::uint64_t seed, int fold)
{
    const auto total = calib.size() + test.size();
    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(CounterRng(seed).bits(0xf01d, static_cast<std::uint64_t>(fold)));
    std::shuffle(order.begin(), order.end(), rng);
    auto take = [&](std::size_t from, std::size_t count) {
        PredictionSet out;
        out.kind = calib.kind;
        out.scores.resize(static_cast<Eigen::Index>(count), calib.scores.cols());
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t src = order[from + i];
            const auto& set = src < calib.size() ? calib : test;
            const std::size_t row = src < calib.size() ? src : src - calib.size();
            out.scores.row(static_cast<Eigen::Index>(i)) = set.scores.row(static_cast<Eigen::Index>(row));
            out.labels.push_back(set.labels[row]);
        }
        return out;
    };
    return {take(0, calib.size()), take(calib.size(), test.size())};
}

int run_compare(const std::string& calib_path, const std::string& test_path, const std::string& out_path,
                const std::vector<std::string>& methods, int folds, std::uint64_t seed, int bins, bool timing)
{
    const auto calib = read_scores_csv(calib_path);
    const auto test = read_scores_csv(test_path);
    if (calib.kind != test.kind || calib.num_classes() != test.num_classes())
        throw InputError("calibration and test files differ in score kind or class count");
    std::vector<Method> parsed;
    for (const auto& m : methods) parsed.push_back(method_from_string(m));

    const int runs = folds > 0 ? folds : 1;
    std::vector<std::string> names = {"uncalibrated"};
    for (const auto& m : methods) names.push_back(m);
    std::vector<std::vector<MethodScores>> results(names.size());
    std::vector<std::string> status(names.size(), "ok");

    for (int r = 0; r < runs; ++r) {
        const auto split = folds > 0 ? resample_split(calib, test, seed, r) : std::make_pair(calib, test);
        const auto& [cal, tst] = split;
        results[0].push_back(score_of(to_simplex(tst), timing ? 0.0 : kNaN, bins));
        for (std::size_t i = 0; i < parsed.size(); ++i) {
            if (status[i + 1] != "ok") continue;
            try {
                FitOptions options;
                options.one_vs_all = is_binary_method(parsed[i]) && cal.num_classes() > 2;
                options.gp.seed = seed;
                const auto start = std::chrono::steady_clock::now();
                const auto model = fit_model(parsed[i], cal, options);
                const double seconds =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                results[i + 1].push_back(score_of(apply_model(model, tst, {false, 100, seed}), timing ? seconds : kNaN, bins));
            } catch (const std::exception& e) {
                status[i + 1] = sanitize(e.what());
                std::cerr << "warning: method " << names[i + 1] << " failed: " << e.what() << "\n";
            }
        }
    }

    const char* columns[] = {"ece_1", "mce", "nll", "accuracy", "o", "u", "fit_seconds"};
    auto field = [](const MethodScores& s, int c) {
        const double v[] = {s.ece_1, s.mce, s.nll, s.accuracy, s.o, s.u, s.fit_seconds};
        return v[c];
    };
    std::string out = "method";
    for (const char* c : columns) out += folds > 0 ? std::string(",") + c + "_mean," + c + "_std" : std::string(",") + c;
    out += ",status\n";
    for (std::size_t i = 0; i < names.size(); ++i) {
        out += names[i];
        const auto& rows = results[i];
        for (int c = 0; c < 7; ++c) {
            if (status[i] != "ok") {
                out += folds > 0 ? ",," : ",";
                continue;
            }
            if (folds == 0) {
                out += "," + csv_number(field(rows[0], c));
                continue;
            }
            double mean = 0.0, sq = 0.0;
            for (const auto& s : rows) mean += field(s, c);
            mean /= static_cast<double>(rows.size());
            for (const auto& s : rows) sq += (field(s, c) - mean) * (field(s, c) - mean);
            const double sd = rows.size() > 1 ? std::sqrt(sq / static_cast<double>(rows.size() - 1)) : 0.0;
            out += "," + csv_number(mean) + "," + csv_number(sd);
        }
        out += "," + status[i] + "\n";
    }
    atomic_write(out_path, out);
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"calibra: uncertainty calibration for classifier outputs"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    bool seed_given = false;
    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option_function<std::uint64_t>(
            "--seed", [&](std::uint64_t s) { seed = s, seed_given = true; },
            "Random seed (default: $CALIBRA_SEED or 0)");
    };

    // fit
    std::string method, scores_path, model_path, prior, cov = "diagonal";
    bool one_vs_all = false;
    int num_inducing = 10, max_iters = 1000;
    double tol = 1e-6;
    auto* fit_cmd = app.add_subcommand("fit", "Fit a calibration method and write the model as JSON");
    fit_cmd->add_option("method", method, "gpcalib, platt, isotonic, beta, bbq or temperature")->required();
    fit_cmd->add_option("scores", scores_path, "Calibration scores CSV")->required();
    fit_cmd->add_option("model", model_path, "Output model JSON")->required();
    fit_cmd->add_flag("--one-vs-all", one_vs_all, "Fit a binary method once per class");
    fit_cmd->add_option("--M", num_inducing, "Number of inducing points (gpcalib)");
    fit_cmd->add_option("--prior", prior, "Prior mean: log, identity or affine:SLOPE,INTERCEPT (gpcalib)");
    fit_cmd->add_option("--cov", cov, "Covariance structure: diagonal or block (gpcalib)");
    fit_cmd->add_option("--max-iters", max_iters, "Optimizer iteration limit (gpcalib)");
    fit_cmd->add_option("--tol", tol, "Relative ELBO change tolerance (gpcalib)");
    add_seed(fit_cmd);

    // apply
    std::string out_path;
    int samples = 100;
    bool mean_approx = false;
    auto* apply_cmd = app.add_subcommand("apply", "Calibrate scores with a fitted model");
    apply_cmd->add_option("model", model_path, "Model JSON")->required();
    apply_cmd->add_option("scores", scores_path, "Scores CSV")->required();
    apply_cmd->add_option("out", out_path, "Output CSV of calibrated probabilities")->required();
    apply_cmd->add_option("--samples", samples, "Monte-Carlo samples per row (gpcalib)");
    apply_cmd->add_flag("--mean-approx", mean_approx, "Use the latent posterior mean only (gpcalib)");
    add_seed(apply_cmd);

    // evaluate
    int bins = 100;
    double p = 1.0;
    std::string weighting = "frequency";
    auto* eval_cmd = app.add_subcommand("evaluate", "Compute calibration metrics and a reliability report");
    eval_cmd->add_option("scores", scores_path, "Scores CSV")->required();
    eval_cmd->add_option("-o,--out", out_path, "Write the report JSON here as well as to standard output");
    eval_cmd->add_option("--bins", bins, "Number of confidence bins");
    eval_cmd->add_option("--p", p, "Order of the ECE norm");
    eval_cmd->add_option("--weighting", weighting, "Bin weighting: frequency or uniform");

    // reliability
    int rel_bins = 15;
    auto* rel_cmd = app.add_subcommand("reliability", "Write a plot-ready reliability table");
    rel_cmd->add_option("scores", scores_path, "Scores CSV")->required();
    rel_cmd->add_option("out", out_path, "Output CSV")->required();
    rel_cmd->add_option("--bins", rel_bins, "Number of confidence bins");

    // synth
    std::size_t n = 1000, k = 4;
    double concentration = 1.0;
    std::string distortion = "temperature=1", latent_table, kind = "simplex", truth_path;
    auto* synth_cmd = app.add_subcommand("synth", "Generate miscalibrated synthetic scores");
    synth_cmd->add_option("out", out_path, "Output scores CSV")->required();
    synth_cmd->add_option("-n,--samples", n, "Number of samples");
    synth_cmd->add_option("-k,--classes", k, "Number of classes");
    synth_cmd->add_option("--concentration", concentration, "Dirichlet concentration of the true posteriors");
    synth_cmd->add_option("--distortion", distortion, "temperature=T or beta=A,B,C");
    synth_cmd->add_option("--latent-table", latent_table, "CSV of x,g knots for a tabulated latent distortion");
    synth_cmd->add_option("--kind", kind, "Output kind: logits or simplex");
    synth_cmd->add_option("--truth", truth_path, "Truth sidecar JSON (default: OUT.truth.json)");
    add_seed(synth_cmd);

    // compare
    std::string test_path, methods_list;
    int folds = 0;
    bool no_timing = false;
    auto* cmp_cmd = app.add_subcommand("compare", "Fit several methods and tabulate their test metrics");
    cmp_cmd->add_option("calib", scores_path, "Calibration scores CSV")->required();
    cmp_cmd->add_option("test", test_path, "Test scores CSV")->required();
    cmp_cmd->add_option("out", out_path, "Output CSV table")->required();
    cmp_cmd->add_option("--methods", methods_list, "Comma-separated methods");
    cmp_cmd->add_option("--folds", folds, "Monte-Carlo cross-validation runs over the pooled data");
    cmp_cmd->add_option("--bins", bins, "Number of confidence bins");
    cmp_cmd->add_flag("--no-timing", no_timing, "Leave fit_seconds empty so reruns are byte-identical");
    add_seed(cmp_cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitInput;
    }

    try {
        if (!seed_given) seed = default_seed();
        if (*fit_cmd) {
            const auto data = read_scores_csv(scores_path);
            FitOptions options;
            options.one_vs_all = one_vs_all;
            const Method m = method_from_string(method);
            if (one_vs_all && !is_binary_method(m)) throw InputError("--one-vs-all applies only to binary methods");
            options.gp.num_inducing = num_inducing;
            options.gp.prior_mean = parse_prior(prior, data.kind);
            if (cov == "diagonal")
                options.gp.cov_structure = CovStructure::diagonal;
            else if (cov == "block" || cov == "block_diagonal")
                options.gp.cov_structure = CovStructure::block_diagonal;
            else
                throw InputError("--cov must be diagonal or block");
            options.gp.max_iters = max_iters;
            options.gp.tol = tol;
            options.gp.seed = seed;
            const auto model = fit_model(m, data, options);
            warn_about(model);
            save_model(model_path, model);
            std::cout << fit_summary(model, data).dump() << "\n";
        } else if (*apply_cmd) {
            const auto model = load_model(model_path);
            const auto data = read_scores_csv(scores_path);
            if (samples < 1) throw InputError("--samples must be positive");
            write_scores_csv(out_path, apply_model(model, data, {mean_approx, samples, seed}));
        } else if (*eval_cmd) {
            if (bins < 1) throw InputError("--bins must be positive");
            if (weighting != "frequency" && weighting != "uniform")
                throw InputError("--weighting must be frequency or uniform");
            const auto data = read_scores_csv(scores_path);
            const auto report = make_report(
                data, {bins, weighting == "uniform" ? BinWeighting::uniform : BinWeighting::frequency}, p);
            const std::string text = report_to_json(report).dump(2) + "\n";
            if (!out_path.empty()) atomic_write(out_path, text);
            std::cout << text;
        } else if (*rel_cmd) {
            if (rel_bins < 1) throw InputError("--bins must be positive");
            const auto data = read_scores_csv(scores_path);
            atomic_write(out_path, reliability_csv(reliability(data, {rel_bins, BinWeighting::frequency})));
        } else if (*synth_cmd) {
            SynthConfig cfg;
            cfg.num_samples = n;
            cfg.num_classes = k;
            cfg.concentration = concentration;
            cfg.distortion = parse_distortion(distortion, latent_table);
            cfg.output_kind = score_kind_from_string(kind);
            cfg.seed = seed;
            const auto synth = generate(cfg);
            write_scores_csv(out_path, synth.preds);
            atomic_write(truth_path.empty() ? out_path + ".truth.json" : truth_path,
                         truth_to_json(cfg, synth.truth).dump() + "\n");
        } else if (*cmp_cmd) {
            std::vector<std::string> methods;
            std::stringstream ss(methods_list);
            std::string item;
            while (std::getline(ss, item, ','))
                if (!item.empty()) methods.push_back(item);
            if (folds < 0) throw InputError("--folds must be nonnegative");
            if (bins < 1) throw InputError("--bins must be positive");
            return run_compare(scores_path, test_path, out_path, methods, folds, seed, bins, !no_timing);
        }
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFit;
    }
    return 0;
}
