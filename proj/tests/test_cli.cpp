#include "calibra/io.hpp"
#include "calibra/metrics.hpp"
#include "calibra/synthetic.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

using namespace calibra;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

class Cli : public ::testing::Test {
protected:
    void SetUp() override
    {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / (std::string("calibra_cli_") + info->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    RunResult run(const std::string& args) const
    {
        const std::string out = path("stdout.txt"), err = path("stderr.txt");
        const std::string cmd = std::string("env -u CALIBRA_SEED ") + CALIBRA_CLI_PATH + " " + args + " >" + out +
                                " 2>" + err;
        const int status = std::system(cmd.c_str());
        RunResult r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = read_file(out);
        r.err = read_file(err);
        return r;
    }

    std::string synth(const std::string& name, const SynthConfig& cfg) const
    {
        write_scores_csv(path(name), generate(cfg).preds);
        return path(name);
    }

    fs::path dir_;
};

}  // namespace

TEST_F(Cli, FitTemperatureRecoversTemperature)
{
    const auto train = synth("train.csv", {20000, 4, 1.0, TemperatureDistortion{2.0}, ScoreKind::logits, 1});
    const auto r = run("fit temperature " + train + " " + path("model.json"));
    ASSERT_EQ(r.code, 0) << r.err;
    const Json diag = Json::parse(r.out);
    EXPECT_NEAR(diag["temperature"].get<double>(), 2.0, 0.1);
    EXPECT_TRUE(diag.contains("nll"));
    const auto model = load_model(path("model.json"));
    EXPECT_NEAR(std::get<TemperatureParam>(model.body).temperature, 2.0, 0.1);
}

TEST_F(Cli, BinaryMethodOnManyClassesNeedsOneVsAll)
{
    const auto data = synth("multi.csv", {500, 10, 1.0, TemperatureDistortion{2.0}, ScoreKind::simplex, 2});
    const auto r = run("fit platt " + data + " " + path("model.json"));
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("one-vs-all"), std::string::npos);
    EXPECT_FALSE(fs::exists(path("model.json")));
    EXPECT_EQ(run("fit platt --one-vs-all " + data + " " + path("model.json")).code, 0);
}

TEST_F(Cli, FitGpcalibWithDefaults)
{
    const auto data = synth("calib.csv", {500, 4, 1.0, TemperatureDistortion{3.0}, ScoreKind::simplex, 3});
    const auto r = run("fit gpcalib --M 10 --prior log " + data + " " + path("model.json"));
    ASSERT_EQ(r.code, 0) << r.err;
    const Json diag = Json::parse(r.out);
    EXPECT_GT(diag["final_elbo"].get<double>(), diag["initial_elbo"].get<double>());
    EXPECT_GT(diag["iterations"].get<int>(), 0);
    const Json model = Json::parse(read_file(path("model.json")));
    EXPECT_EQ(model["M"], 10);
    EXPECT_EQ(model["prior_mean"]["type"], "log");
}

TEST_F(Cli, UnitTemperatureApplyIsSoftargmax)
{
    const auto data = synth("in.csv", {300, 5, 1.0, TemperatureDistortion{1.5}, ScoreKind::logits, 4});
    atomic_write(path("t1.json"),
                 R"({"version":1,"method":"temperature","input_kind":"logits","num_classes":5,"temperature":1})");
    ASSERT_EQ(run("apply " + path("t1.json") + " " + data + " " + path("out.csv")).code, 0);
    const auto in = read_scores_csv(data);
    const auto out = read_scores_csv(path("out.csv"));
    EXPECT_EQ(out.kind, ScoreKind::simplex);
    EXPECT_LT((out.scores - to_simplex(in.scores, ScoreKind::logits)).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_EQ(out.labels, in.labels);
}

TEST_F(Cli, KindMismatchOnApplyExitsThree)
{
    const auto logits = synth("logits.csv", {300, 4, 1.0, TemperatureDistortion{2.0}, ScoreKind::logits, 5});
    const auto simplex = synth("simplex.csv", {300, 4, 1.0, TemperatureDistortion{2.0}, ScoreKind::simplex, 5});
    ASSERT_EQ(run("fit temperature " + logits + " " + path("m.json")).code, 0);
    EXPECT_EQ(run("apply " + path("m.json") + " " + simplex + " " + path("out.csv")).code, 3);
}

TEST_F(Cli, RerunsAreByteIdentical)
{
    const std::string a = path("a.csv"), b = path("b.csv");
    ASSERT_EQ(run("synth " + a + " -n 400 -k 3 --distortion temperature=2 --seed 7").code, 0);
    ASSERT_EQ(run("synth " + b + " -n 400 -k 3 --distortion temperature=2 --seed 7").code, 0);
    EXPECT_EQ(read_file(a), read_file(b));
    EXPECT_EQ(read_file(a + ".truth.json"), read_file(b + ".truth.json"));
    ASSERT_EQ(run("fit gpcalib " + a + " " + path("m1.json") + " --seed 3").code, 0);
    ASSERT_EQ(run("fit gpcalib " + a + " " + path("m2.json") + " --seed 3").code, 0);
    EXPECT_EQ(read_file(path("m1.json")), read_file(path("m2.json")));
    ASSERT_EQ(run("apply " + path("m1.json") + " " + a + " " + path("o1.csv") + " --seed 11").code, 0);
    ASSERT_EQ(run("apply " + path("m1.json") + " " + a + " " + path("o2.csv") + " --seed 11").code, 0);
    EXPECT_EQ(read_file(path("o1.csv")), read_file(path("o2.csv")));
    ASSERT_EQ(run("apply " + path("m1.json") + " " + a + " " + path("o3.csv") + " --seed 12").code, 0);
    EXPECT_NE(read_file(path("o1.csv")), read_file(path("o3.csv")));
}

TEST_F(Cli, SeedFromEnvironment)
{
    const std::string a = path("a.csv"), b = path("b.csv");
    const std::string cli = CALIBRA_CLI_PATH;
    ASSERT_EQ(std::system(("CALIBRA_SEED=5 " + cli + " synth " + a + " -n 50").c_str()), 0);
    ASSERT_EQ(run("synth " + b + " -n 50 --seed 5").code, 0);
    EXPECT_EQ(read_file(a), read_file(b));
    EXPECT_NE(std::system(("CALIBRA_SEED=x " + cli + " synth " + a + " -n 50 2>/dev/null").c_str()), 0);
}

TEST_F(Cli, MeanApproximationMatchesMonteCarlo)
{
    const auto calib = synth("calib.csv", {1000, 4, 1.0, TemperatureDistortion{3.0}, ScoreKind::simplex, 6});
    const auto test = synth("test.csv", {3000, 4, 1.0, TemperatureDistortion{3.0}, ScoreKind::simplex, 7});
    ASSERT_EQ(run("fit gpcalib " + calib + " " + path("m.json")).code, 0);
    ASSERT_EQ(run("apply " + path("m.json") + " " + test + " " + path("mc.csv")).code, 0);
    ASSERT_EQ(run("apply --mean-approx " + path("m.json") + " " + test + " " + path("mean.csv")).code, 0);
    const double mc = ece_p(read_scores_csv(path("mc.csv")), 1.0);
    const double mean = ece_p(read_scores_csv(path("mean.csv")), 1.0);
    EXPECT_LT(std::abs(mc - mean), 0.01);
}

TEST_F(Cli, EvaluateOnCalibratedData)
{
    const auto data = synth("cal.csv", {100000, 4, 1.0, TemperatureDistortion{1.0}, ScoreKind::simplex, 8});
    const auto r = run("evaluate " + data + " -o " + path("report.json"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out, read_file(path("report.json")));
    const Json j = Json::parse(r.out);
    EXPECT_LT(j["ece_1"].get<double>(), 0.01);
    EXPECT_EQ(j["binning"]["num_bins"], 100);
    EXPECT_EQ(j["reliability"]["bins"].size(), 100u);
    EXPECT_TRUE(j["theorem1"]["holds"].get<bool>());
}

TEST_F(Cli, EvaluateTheoremHoldsAcrossCorpora)
{
    for (int seed = 0; seed < 4; ++seed) {
        const auto data = synth("d.csv", {2000, 2 + 3 * static_cast<std::size_t>(seed), 0.5 + seed,
                                           TemperatureDistortion{0.5 + seed}, ScoreKind::logits,
                                           static_cast<std::uint64_t>(20 + seed)});
        for (const char* flags : {"", " --bins 15 --weighting uniform", " --p 2"}) {
            const auto r = run("evaluate " + data + flags);
            ASSERT_EQ(r.code, 0) << r.err;
            EXPECT_TRUE(Json::parse(r.out)["theorem1"]["holds"].get<bool>()) << seed << flags;
        }
    }
}

TEST_F(Cli, EvaluateSingleBin)
{
    const auto data = synth("d.csv", {1000, 3, 1.0, TemperatureDistortion{2.0}, ScoreKind::simplex, 9});
    const auto r = run("evaluate --bins 1 " + data);
    ASSERT_EQ(r.code, 0);
    const Json j = Json::parse(r.out);
    EXPECT_NEAR(j["ece_1"].get<double>(),
                std::abs(j["mean_confidence"].get<double>() - j["accuracy"].get<double>()), 1e-12);
}

TEST_F(Cli, ReliabilityDefaultsToFifteenBins)
{
    const auto data = synth("d.csv", {1000, 3, 1.0, TemperatureDistortion{2.0}, ScoreKind::simplex, 10});
    ASSERT_EQ(run("reliability " + data + " " + path("rel.csv")).code, 0);
    std::istringstream in(read_file(path("rel.csv")));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "bin,lower,upper,mean_conf,acc,count");
    int rows = 0;
    long total = 0;
    while (std::getline(in, line)) {
        ++rows;
        total += std::stol(line.substr(line.rfind(',') + 1));
    }
    EXPECT_EQ(rows, 15);
    EXPECT_EQ(total, 1000);
    ASSERT_EQ(run("reliability --bins 4 " + data + " " + path("rel4.csv")).code, 0);
    const auto rel4 = read_file(path("rel4.csv"));
    EXPECT_EQ(std::count(rel4.begin(), rel4.end(), '\n'), 5);
}

TEST_F(Cli, SynthWritesTruthSidecar)
{
    ASSERT_EQ(run("synth " + path("s.csv") + " -n 100 -k 2 --distortion beta=2,0.5,0.1 --truth " + path("t.json")).code, 0);
    const auto data = read_scores_csv(path("s.csv"));
    EXPECT_EQ(data.size(), 100u);
    EXPECT_EQ(data.num_classes(), 2u);
    const Json truth = Json::parse(read_file(path("t.json")));
    EXPECT_EQ(truth["distortion"]["type"], "beta");
    EXPECT_EQ(truth["true_posteriors"].size(), 100u);

    atomic_write(path("table.csv"), "x,g\n-10,-5\n0,0\n10,8\n");
    ASSERT_EQ(run("synth " + path("l.csv") + " -n 50 -k 3 --kind logits --latent-table " + path("table.csv")).code, 0);
    EXPECT_EQ(Json::parse(read_file(path("l.csv.truth.json")))["distortion"]["type"], "latent");
}

TEST_F(Cli, CompareReducesEce)
{
    const auto calib = synth("calib.csv", {1000, 4, 1.0, TemperatureDistortion{3.0}, ScoreKind::logits, 11});
    const auto test = synth("test.csv", {3000, 4, 1.0, TemperatureDistortion{3.0}, ScoreKind::logits, 12});
    const auto r = run("compare " + calib + " " + test + " " + path("cmp.csv") + " --methods temperature,gpcalib");
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream in(read_file(path("cmp.csv")));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "method,ece_1,mce,nll,accuracy,o,u,fit_seconds,status");
    std::map<std::string, double> ece;
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        ece[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
        EXPECT_EQ(line.substr(line.rfind(',') + 1), "ok");
    }
    ASSERT_EQ(ece.size(), 3u);
    EXPECT_LT(ece["temperature"], ece["uncalibrated"]);
    EXPECT_LT(ece["gpcalib"], ece["uncalibrated"]);
}

TEST_F(Cli, CompareFoldsAndEmptyMethodList)
{
    const auto calib = synth("calib.csv", {300, 3, 1.0, TemperatureDistortion{2.0}, ScoreKind::simplex, 13});
    const auto test = synth("test.csv", {600, 3, 1.0, TemperatureDistortion{2.0}, ScoreKind::simplex, 14});
    ASSERT_EQ(run("compare " + calib + " " + test + " " + path("empty.csv")).code, 0);
    const auto empty = read_file(path("empty.csv"));
    EXPECT_EQ(std::count(empty.begin(), empty.end(), '\n'), 2);
    EXPECT_EQ(empty.rfind("uncalibrated,", empty.find('\n') + 1), empty.find('\n') + 1);

    const std::string args = "compare " + calib + " " + test + " " + path("f.csv") +
                             " --methods temperature,isotonic,bbq --folds 10 --seed 4 --no-timing";
    ASSERT_EQ(run(args).code, 0);
    const auto folds = read_file(path("f.csv"));
    EXPECT_EQ(folds.substr(0, folds.find('\n')),
              "method,ece_1_mean,ece_1_std,mce_mean,mce_std,nll_mean,nll_std,accuracy_mean,accuracy_std,o_mean,o_std,"
              "u_mean,u_std,fit_seconds_mean,fit_seconds_std,status");
    EXPECT_EQ(std::count(folds.begin(), folds.end(), '\n'), 5);
    ASSERT_EQ(run(args).code, 0);
    EXPECT_EQ(read_file(path("f.csv")), folds);
}

TEST_F(Cli, CompareRecordsFailingMethod)
{
    // One class only in the calibration split: platt cannot fit, temperature still can.
    atomic_write(path("calib.csv"), "simplex_0,simplex_1,label\n0.9,0.1,0\n0.7,0.3,0\n0.6,0.4,0\n");
    const auto test = synth("test.csv", {200, 2, 1.0, TemperatureDistortion{2.0}, ScoreKind::simplex, 15});
    const auto r = run("compare " + path("calib.csv") + " " + test + " " + path("cmp.csv") + " --methods platt,temperature");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto table = read_file(path("cmp.csv"));
    const auto platt = table.substr(table.find("\nplatt,") + 1);
    EXPECT_NE(platt.substr(platt.rfind(',', platt.find('\n')) + 1, 2), "ok");
    EXPECT_NE(table.find("\ntemperature,"), std::string::npos);
    EXPECT_NE(table.find(",ok\n", table.find("\ntemperature,")), std::string::npos);
}

TEST_F(Cli, InputErrorsExitTwo)
{
    atomic_write(path("bad.csv"), "simplex_0,simplex_1,label\n0.5,0.5,0\n0.5,oops,1\n");
    auto r = run("evaluate " + path("bad.csv"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find(":3:"), std::string::npos);
    EXPECT_EQ(run("evaluate " + path("missing.csv")).code, 2);
    EXPECT_EQ(run("fit magic " + path("bad.csv") + " " + path("m.json")).code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
    EXPECT_EQ(run("evaluate").code, 2);
    EXPECT_EQ(run("evaluate --bins x " + path("bad.csv")).code, 2);
    atomic_write(path("m.json"), R"({"version":9,"method":"temperature"})");
    atomic_write(path("ok.csv"), "simplex_0,simplex_1,label\n0.5,0.5,0\n");
    EXPECT_EQ(run("apply " + path("m.json") + " " + path("ok.csv") + " " + path("o.csv")).code, 2);
    EXPECT_EQ(run("--help").code, 0);
}
