#include "calibra/gpcalib.hpp"
#include "calibra/metrics.hpp"
#include "calibra/synthetic.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

using namespace calibra;
using namespace calibra::testing;

namespace {

PredictionSet make_data(std::mt19937_64& rng, std::size_t N, std::size_t K, ScoreKind kind)
{
    return calibra::testing::random_prediction_set(rng, N, K, kind);
}

}  // namespace

TEST(MarginalQ, PriorIsRecovered)
{
    std::mt19937_64 rng(1);
    auto model = random_model(rng, 5, ScoreKind::logits, PriorMean::identity(), CovStructure::block_diagonal);
    set_prior_variational(model);
    const std::vector<double> z = {-0.3, 0.8, 1.9};
    const auto q = marginal_q(model, z);
    for (std::size_t k = 0; k < z.size(); ++k) EXPECT_NEAR(q.mean(k), z[k], 1e-9);
    EXPECT_LT((q.cov - gram(z, model.kernel, true)).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(MarginalQ, EqualComponentsGiveEqualMeans)
{
    std::mt19937_64 rng(2);
    const auto model = random_model(rng, 6, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
    const std::vector<double> z = {0.4, 0.4, 0.4, 0.4};
    const auto q = marginal_q(model, z);
    for (int k = 1; k < 4; ++k) EXPECT_EQ(q.mean(k), q.mean(0));
}

TEST(MarginalQ, MatchesDenseConditioning)
{
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int trial = 0; trial < 100; ++trial) {
        const Eigen::Index M = 1 + static_cast<Eigen::Index>(rng() % 5);
        const std::size_t K = 2 + rng() % 4;
        auto model = random_model(rng, M, ScoreKind::logits, PriorMean::affine(0.7, -0.2), CovStructure::block_diagonal);
        std::vector<double> z(K);
        for (auto& v : z) v = u(rng);
        const auto sparse = marginal_q(model, z);
        const auto dense = dense_marginal(model, z);
        EXPECT_LT((sparse.mean - dense.mean).cwiseAbs().maxCoeff(), 1e-8);
        EXPECT_LT((sparse.cov - dense.cov).cwiseAbs().maxCoeff(), 1e-8);

        model.cov_structure = CovStructure::diagonal;
        const auto diag = marginal_q(model, z);
        EXPECT_LT((diag.cov.diagonal() - dense.cov.diagonal()).cwiseAbs().maxCoeff(), 1e-8);
        EXPECT_EQ((diag.cov - Matrix(diag.cov.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 0.0);
    }
}

TEST(Taylor, ZeroCovarianceIsLogSoftargmax)
{
    Vector phi(3);
    phi << 0.2, -1.0, 2.5;
    const Vector s = softargmax(phi);
    EXPECT_NEAR(expected_loglik_taylor(phi, Matrix::Zero(3, 3), 1), std::log(s(1)), 1e-14);
}

TEST(Taylor, HandEvaluatedClosedForm)
{
    // phi = 0, K = 4, C = 0.01 I: ln(1/4) + 0.5 (0.01 * 4/16 - 0.01) = ln(1/4) - 0.00375.
    const Vector phi = Vector::Zero(4);
    const Matrix C = 0.01 * Matrix::Identity(4, 4);
    for (int y = 0; y < 4; ++y) EXPECT_NEAR(expected_loglik_taylor(phi, C, y), std::log(0.25) - 0.00375, 1e-15);
}

TEST(Taylor, AgreesWithMonteCarlo)
{
    std::mt19937_64 rng(4);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
        Vector phi(4);
        for (int k = 0; k < 4; ++k) phi(k) = 2.0 * u(rng);
        Matrix R(4, 4);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) R(i, j) = u(rng);
        Matrix C = R * R.transpose();
        C *= 0.01 / C.cwiseAbs().maxCoeff();
        const int y = static_cast<int>(rng() % 4);
        const Matrix root = Eigen::LLT<Matrix>(C + 1e-14 * Matrix::Identity(4, 4)).matrixL();
        double acc = 0.0;
        const int samples = 200000;
        Vector eps(4);
        for (int s = 0; s < samples; ++s) {
            for (int k = 0; k < 4; ++k) eps(k) = normal(rng);
            const Vector g = phi + root * eps;
            acc += g(y) - log_sum_exp(g);
        }
        EXPECT_LT(std::abs(expected_loglik_taylor(phi, C, y) - acc / samples), 1e-3);
    }
}

TEST(Kl, ZeroAtPriorAndMeanShift)
{
    std::mt19937_64 rng(5);
    auto model = random_model(rng, 6, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
    set_prior_variational(model);
    EXPECT_NEAR(kl_to_prior(model), 0.0, 1e-10);

    Vector delta(6);
    delta << 0.3, -0.1, 0.2, 0.0, 0.5, -0.4;
    model.variational_mean += delta;
    const std::span<const double> w(model.inducing_inputs.data(), 6);
    Matrix Kuu = gram(w, model.kernel, true);
    Kuu.diagonal().array() += kJitter;
    const double expected = 0.5 * delta.dot(Kuu.ldlt().solve(delta));
    EXPECT_NEAR(kl_to_prior(model), expected, 1e-8 * std::max(1.0, expected));
}

TEST(Kl, MatchesMonteCarlo)
{
    std::mt19937_64 rng(6);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int trial = 0; trial < 5; ++trial) {
        const auto model = random_model(rng, 3, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
        const double kl = kl_to_prior(model);
        EXPECT_GE(kl, 0.0);
        const std::span<const double> w(model.inducing_inputs.data(), 3);
        Matrix Kuu = gram(w, model.kernel, true);
        Kuu.diagonal().array() += kJitter;
        const Eigen::LLT<Matrix> prior(Kuu);
        const Matrix& L = model.variational_cov_factor;
        const Vector mu_u = model.inducing_inputs;
        const double logdet_q = 2.0 * L.diagonal().array().log().sum();
        const double logdet_p = 2.0 * Matrix(prior.matrixL()).diagonal().array().log().sum();
        double acc = 0.0;
        const int samples = 1000000;
        Vector eps(3);
        for (int s = 0; s < samples; ++s) {
            for (int k = 0; k < 3; ++k) eps(k) = normal(rng);
            const Vector u = model.variational_mean + L * eps;
            const Vector dp = prior.matrixL().solve(u - mu_u);
            acc += -0.5 * eps.squaredNorm() - 0.5 * logdet_q + 0.5 * dp.squaredNorm() + 0.5 * logdet_p;
        }
        EXPECT_LT(rel_err(kl, acc / samples, 1e-12), 1e-2) << "kl=" << kl;
    }
}

TEST(Elbo, EmptyDataIsNegativeKl)
{
    std::mt19937_64 rng(7);
    const auto model = random_model(rng, 4, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
    PredictionSet empty;
    empty.kind = ScoreKind::logits;
    empty.scores.resize(0, 3);
    EXPECT_NEAR(elbo(model, empty), -kl_to_prior(model), 1e-12);
    EXPECT_LE(elbo(model, empty), 0.0);
}

TEST(Elbo, SmallVarianceLimit)
{
    std::mt19937_64 rng(8);
    auto model = random_model(rng, 4, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
    model.kernel = KernelParams::from_natural(1e-10, 1.0, 1e-10);
    set_prior_variational(model);
    PredictionSet one;
    one.kind = ScoreKind::logits;
    one.scores.resize(1, 3);
    one.scores << 0.2, 1.1, -0.4;
    one.labels = {1};
    const Vector z = one.scores.row(0).transpose();
    EXPECT_NEAR(elbo(model, one), z(1) - log_sum_exp(z), 1e-6);
}

TEST(Elbo, KindMismatchIsAnError)
{
    std::mt19937_64 rng(9);
    const auto model = random_model(rng, 3, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
    auto data = make_data(rng, 10, 3, ScoreKind::simplex);
    EXPECT_THROW(elbo(model, data), InputError);
}

TEST(Elbo, LowerBoundsMonteCarloEvidence)
{
    // 5 samples, K = 2, M = 2; log evidence by sampling the dense GP prior.
    std::mt19937_64 rng(10);
    auto model = random_model(rng, 2, ScoreKind::logits, PriorMean::identity(), CovStructure::block_diagonal, 1.0);
    model.kernel = KernelParams::from_natural(1.0, 1.0, 0.05);
    set_prior_variational(model);
    auto data = make_data(rng, 5, 2, ScoreKind::logits);
    const double bound = elbo(model, data);

    std::vector<double> x(data.scores.data(), data.scores.data() + 10);
    const Matrix cov = gram(x, model.kernel, true);
    const Matrix root = Eigen::LLT<Matrix>(cov).matrixL();
    std::normal_distribution<double> normal(0.0, 1.0);
    const long samples = 10000000;
    double acc = 0.0, acc_sq = 0.0;
    Vector eps(10);
    for (long s = 0; s < samples; ++s) {
        for (int i = 0; i < 10; ++i) eps(i) = normal(rng);
        const Vector g = Eigen::Map<const Vector>(x.data(), 10) + root * eps;
        double lik = 1.0;
        for (int n = 0; n < 5; ++n) {
            const double a = g(2 * n), b = g(2 * n + 1);
            const double gy = data.labels[n] == 0 ? a : b;
            const double other = data.labels[n] == 0 ? b : a;
            lik *= 1.0 / (1.0 + std::exp(other - gy));
        }
        acc += lik;
        acc_sq += lik * lik;
    }
    const double mean = acc / samples;
    const double se = std::sqrt((acc_sq / samples - mean * mean) / samples) / mean;
    EXPECT_LE(bound, std::log(mean) + 3.0 * se);
}

TEST(ElboGrad, ZeroMeanGradientAtPriorWithoutData)
{
    std::mt19937_64 rng(11);
    auto model = random_model(rng, 5, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
    set_prior_variational(model);
    PredictionSet empty;
    empty.kind = ScoreKind::logits;
    empty.scores.resize(0, 4);
    const auto res = elbo_with_gradient(model, empty);
    EXPECT_LT(res.grad.d_mean.cwiseAbs().maxCoeff(), 1e-9);
}

TEST(ElboGrad, MatchesFiniteDifferencesDiagonal)
{
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 5; ++trial) {
        const auto model = random_model(rng, 5, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
        const auto data = make_data(rng, 50, 4, ScoreKind::logits);
        EXPECT_LT(worst_gradient_error(model, data), 1e-4);
    }
}

TEST(ElboGrad, MatchesFiniteDifferencesBlock)
{
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 5; ++trial) {
        const auto model = random_model(rng, 5, ScoreKind::logits, PriorMean::affine(0.5, 0.1), CovStructure::block_diagonal);
        const auto data = make_data(rng, 50, 4, ScoreKind::logits);
        EXPECT_LT(worst_gradient_error(model, data), 1e-4);
    }
}

TEST(ElboGrad, MatchesFiniteDifferencesLogPrior)
{
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 3; ++trial) {
        const auto model = random_model(rng, 4, ScoreKind::simplex, PriorMean::log(), CovStructure::diagonal);
        const auto data = make_data(rng, 40, 3, ScoreKind::simplex);
        EXPECT_LT(worst_gradient_error(model, data), 1e-4);
    }
}

TEST(ElboGrad, FarInducingInputHasVanishingGradient)
{
    std::mt19937_64 rng(15);
    auto model = random_model(rng, 5, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
    model.kernel = KernelParams::from_natural(1.0, 0.5, 0.05);
    // Move the last inducing input far away and give it its prior marginal.
    model.inducing_inputs(4) = 100.0;
    model.variational_mean(4) = 100.0;
    model.variational_cov_factor.row(4).setZero();
    model.variational_cov_factor(4, 4) = std::sqrt(1.0 + 0.05 + kJitter);
    const auto data = make_data(rng, 50, 4, ScoreKind::logits);
    const auto res = elbo_with_gradient(model, data);
    EXPECT_LT(std::abs(res.grad.d_inducing(4)), 1e-6);
}

TEST(Fit, ZeroIterationsReturnsInitialization)
{
    const auto synth = generate({200, 3, 1.0, TemperatureDistortion{2.0}, ScoreKind::logits, 1});
    GpFitConfig cfg;
    cfg.max_iters = 0;
    const auto init = initialize(synth.preds, cfg);
    const auto model = fit(synth.preds, cfg);
    EXPECT_FALSE(model.diagnostics.converged);
    EXPECT_EQ(model.diagnostics.iterations, 0);
    EXPECT_EQ(model.inducing_inputs, init.inducing_inputs);
    EXPECT_EQ(model.variational_mean, init.variational_mean);
    EXPECT_EQ(model.variational_cov_factor, init.variational_cov_factor);
    EXPECT_NEAR(kl_to_prior(model), 0.0, 1e-8);
}

TEST(Fit, ElboIncreasesMonotonically)
{
    const auto synth = generate({300, 4, 1.0, TemperatureDistortion{3.0}, ScoreKind::simplex, 2});
    const auto model = fit(synth.preds);
    EXPECT_GE(model.diagnostics.final_elbo, model.diagnostics.initial_elbo);
    const auto& trace = model.diagnostics.elbo_trace;
    ASSERT_FALSE(trace.empty());
    for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_GE(trace[i], trace[i - 1]);
    EXPECT_EQ(model.num_inducing(), 10);
    for (Eigen::Index i = 1; i < model.num_inducing(); ++i)
        EXPECT_LE(model.inducing_inputs(i - 1), model.inducing_inputs(i));
    EXPECT_NEAR(model.diagnostics.final_elbo, elbo(model, synth.preds), 1e-6 * std::abs(model.diagnostics.final_elbo));
}

TEST(Fit, CalibratedDataStaysNearPrior)
{
    // Logits that are already calibrated: the identity prior is the truth.
    const auto synth = generate({1000, 3, 1.0, TemperatureDistortion{1.0}, ScoreKind::logits, 3});
    const auto model = fit(synth.preds);
    const double lo = synth.preds.scores.minCoeff(), hi = synth.preds.scores.maxCoeff();
    // Compare up to the free constant shift of the latent function.
    Vector grid = Vector::LinSpaced(50, std::max(lo, -6.0), hi);
    const auto post = latent_curve(model, grid);
    const double shift = (post.mean - grid).mean();
    for (Eigen::Index i = 0; i < grid.size(); ++i)
        EXPECT_LT(std::abs(post.mean(i) - shift - grid(i)), 2.0 * std::sqrt(post.variance(i)) + 0.15) << grid(i);
}

TEST(Fit, SingleClassDataIsFlagged)
{
    auto synth = generate({50, 3, 1.0, TemperatureDistortion{1.0}, ScoreKind::logits, 4});
    std::fill(synth.preds.labels.begin(), synth.preds.labels.end(), 1);
    GpFitConfig cfg;
    cfg.max_iters = 5;
    EXPECT_TRUE(fit(synth.preds, cfg).diagnostics.single_class);
}

TEST(Fit, RequiresEnoughSamples)
{
    const auto synth = generate({3, 3, 1.0, TemperatureDistortion{1.0}, ScoreKind::logits, 4});
    EXPECT_THROW(fit(synth.preds), InputError);
}

TEST(Predict, IdentityPriorAtPriorIsSoftargmax)
{
    std::mt19937_64 rng(16);
    auto model = random_model(rng, 5, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
    set_prior_variational(model);
    const auto data = make_data(rng, 20, 4, ScoreKind::logits);
    const Matrix out = predict_mean(model, data.scores);
    EXPECT_LT((out - to_simplex(data.scores, ScoreKind::logits)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Predict, PermutationEquivariance)
{
    std::mt19937_64 rng(17);
    for (auto cov : {CovStructure::diagonal, CovStructure::block_diagonal}) {
        const auto model = random_model(rng, 5, ScoreKind::logits, PriorMean::identity(), cov);
        Matrix rows(2, 4);
        rows << 0.3, -1.2, 2.0, 0.7, 2.0, 0.7, 0.3, -1.2;
        const Matrix mean = predict_mean(model, rows);
        EXPECT_NEAR(mean(1, 0), mean(0, 2), 1e-12);
        EXPECT_NEAR(mean(1, 1), mean(0, 3), 1e-12);
        EXPECT_NEAR(mean(1, 2), mean(0, 0), 1e-12);
        EXPECT_NEAR(mean(1, 3), mean(0, 1), 1e-12);
        // MC uses different random draws per row; compare with a tolerance.
        const Matrix mc = predict_mc(model, rows, 20000, 5);
        EXPECT_NEAR(mc(1, 0), mc(0, 2), 0.02);
        EXPECT_NEAR(mc(1, 3), mc(0, 1), 0.02);
    }
}

TEST(Predict, RowsOnSimplexAndDeterministic)
{
    std::mt19937_64 rng(18);
    const auto model = random_model(rng, 5, ScoreKind::logits, PriorMean::identity(), CovStructure::block_diagonal);
    const auto data = make_data(rng, 50, 3, ScoreKind::logits);
    const Matrix a = predict_mc(model, data.scores, 100, 42);
    const Matrix b = predict_mc(model, data.scores, 100, 42);
    EXPECT_EQ(a, b);
    for (Eigen::Index n = 0; n < a.rows(); ++n) EXPECT_NEAR(a.row(n).sum(), 1.0, 1e-9);
    // Order independence: predicting a single row reproduces its value.
    const Matrix first = predict_mc(model, data.scores.topRows(1), 100, 42);
    EXPECT_LT((first.row(0) - a.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Predict, DegenerateCovarianceMatchesMean)
{
    std::mt19937_64 rng(19);
    auto model = random_model(rng, 4, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
    model.kernel = KernelParams::from_natural(1e-14, 1.0, 1e-6);
    set_prior_variational(model);
    const auto data = make_data(rng, 30, 4, ScoreKind::logits);
    EXPECT_LT((predict_mc(model, data.scores, 100, 1) - predict_mean(model, data.scores)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Predict, MonteCarloConverges)
{
    std::mt19937_64 rng(20);
    const auto model = random_model(rng, 5, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
    const auto data = make_data(rng, 20, 4, ScoreKind::logits);
    const Matrix coarse = predict_mc(model, data.scores, 100, 1);
    const Matrix fine = predict_mc(model, data.scores, 100000, 2);
    // Each entry averages values in [0, 1], so the standard error is at most 0.5 / sqrt(Q).
    EXPECT_LT((coarse - fine).cwiseAbs().maxCoeff(), 3.0 * 0.5 / std::sqrt(100.0));
}

TEST(Predict, MeanAndMonteCarloAgreeOnArgmax)
{
    const auto calib = generate({1000, 4, 1.0, TemperatureDistortion{3.0}, ScoreKind::simplex, 21});
    const auto test = generate({4000, 4, 1.0, TemperatureDistortion{3.0}, ScoreKind::simplex, 22});
    const auto model = fit(calib.preds);
    const Matrix mean = predict_mean(model, test.preds.scores);
    const Matrix mc = predict_mc(model, test.preds.scores, 100, 3);
    int agree = 0;
    for (Eigen::Index n = 0; n < mean.rows(); ++n) agree += argmax(mean.row(n)) == argmax(mc.row(n)) ? 1 : 0;
    EXPECT_GE(agree, 3940);
}

TEST(Predict, LinkIsShiftInvariant)
{
    Vector g(4);
    g << 0.1, -2.0, 1.3, 0.4;
    const Vector shifted = (g.array() + 7.25).matrix();
    EXPECT_LT((softargmax(g) - softargmax(shifted)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Predict, MonotoneLatentPreservesArgmax)
{
    const auto calib = generate({500, 4, 1.0, TemperatureDistortion{2.0}, ScoreKind::logits, 23});
    const auto test = generate({500, 4, 1.0, TemperatureDistortion{2.0}, ScoreKind::logits, 24});
    const auto model = fit(calib.preds);
    const double lo = test.preds.scores.minCoeff(), hi = test.preds.scores.maxCoeff();
    const auto curve = latent_curve(model, Vector::LinSpaced(1024, lo, hi));
    bool increasing = true;
    for (Eigen::Index i = 1; i < curve.mean.size(); ++i) increasing = increasing && curve.mean(i) > curve.mean(i - 1);
    ASSERT_TRUE(increasing) << "fitted latent function is not monotone on this data";
    const Matrix out = predict_mean(model, test.preds.scores);
    for (Eigen::Index n = 0; n < out.rows(); ++n) EXPECT_EQ(argmax(out.row(n)), argmax(test.preds.scores.row(n)));
}

TEST(LatentCurve, PriorMeanAtPrior)
{
    std::mt19937_64 rng(25);
    auto model = random_model(rng, 5, ScoreKind::simplex, PriorMean::log(), CovStructure::diagonal);
    set_prior_variational(model);
    const Vector grid = Vector::LinSpaced(30, 0.01, 1.0);
    const auto post = latent_curve(model, grid);
    for (Eigen::Index i = 0; i < grid.size(); ++i) {
        EXPECT_NEAR(post.mean(i), std::log(grid(i)), 1e-8);
        EXPECT_GT(post.variance(i), 0.0);
    }
}

TEST(LatentCurve, ShrinksNearInducingInputs)
{
    std::mt19937_64 rng(26);
    auto model = random_model(rng, 5, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
    model.variational_cov_factor *= 0.1;
    const double l = model.kernel.lengthscale();
    Vector grid(2);
    grid << model.inducing_inputs(2), model.inducing_inputs(4) + 10.0 * l;
    const auto post = latent_curve(model, grid);
    EXPECT_LE(post.variance(0), post.variance(1));
}

TEST(LatentCurve, EmptyGrid)
{
    std::mt19937_64 rng(27);
    const auto model = random_model(rng, 3, ScoreKind::logits, PriorMean::identity(), CovStructure::diagonal);
    const auto post = latent_curve(model, Vector(0));
    EXPECT_EQ(post.mean.size(), 0);
    EXPECT_EQ(post.variance.size(), 0);
}
