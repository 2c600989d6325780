#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "tlstm/train.hpp"

using namespace tlstm;

namespace {

Sample sample_of_length(std::size_t L, double label, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0, 1);
    Sample s;
    for (std::size_t t = 0; t < L; ++t) {
        FeatureVector v;
        for (auto& x : v) x = n(rng);
        s.inputs.push_back(v);
        s.intervals.push_back(1 + static_cast<int>(t));
    }
    s.label_se = label;
    return s;
}

std::vector<Sample> mixed_lengths(const std::vector<std::size_t>& counts, std::mt19937_64& rng) {
    std::vector<Sample> out;
    for (std::size_t L = 1; L <= counts.size(); ++L)
        for (std::size_t k = 0; k < counts[L - 1]; ++k) out.push_back(sample_of_length(L, -0.1 * static_cast<double>(k), rng));
    return out;
}

} // namespace

TEST(Mse, HandValue) {
    const std::vector<double> y = {1, 2}, yhat = {0, 0};
    EXPECT_DOUBLE_EQ(mse(y, yhat), 2.5);
}

TEST(Mse, ZeroOnlyForEqualVectorsAndQuadraticInScale) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0, 1);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> y(7), yhat(7), cy(7), cyhat(7);
        const double c = n(rng) * 3.0;
        for (std::size_t i = 0; i < 7; ++i) {
            y[i] = n(rng);
            yhat[i] = n(rng);
            cy[i] = c * y[i];
            cyhat[i] = c * yhat[i];
        }
        EXPECT_GT(mse(y, yhat), 0.0);
        EXPECT_EQ(mse(y, y), 0.0);
        EXPECT_NEAR(mse(cy, cyhat), c * c * mse(y, yhat), 1e-10 * (1 + c * c * mse(y, yhat)));
    }
    EXPECT_THROW(mse(std::vector<double>{1.0}, std::vector<double>{}), ShapeError);
}

TEST(Batches, LayeredByLength) {
    std::mt19937_64 rng(2);
    const auto samples = mixed_lengths({5, 3}, rng);
    const auto batches = make_batches(samples, 4, 7, 0);
    std::multiset<std::size_t> sizes;
    for (const auto& b : batches) {
        sizes.insert(b.size());
        for (auto i : b) EXPECT_EQ(samples[i].length(), samples[b.front()].length());
    }
    EXPECT_EQ(sizes, (std::multiset<std::size_t>{1, 3, 4}));
}

TEST(Batches, HandExampleFourFourTwo) {
    std::mt19937_64 rng(3);
    const auto samples = mixed_lengths({10}, rng);
    std::multiset<std::size_t> sizes;
    for (const auto& b : make_batches(samples, 4, 1, 0)) sizes.insert(b.size());
    EXPECT_EQ(sizes, (std::multiset<std::size_t>{2, 4, 4}));
}

TEST(Batches, PartitionEveryEpochAndSeedDeterminism) {
    std::mt19937_64 rng(4);
    const auto samples = mixed_lengths({17, 9, 6, 2}, rng);
    for (std::size_t epoch = 0; epoch < 5; ++epoch) {
        const auto a = make_batches(samples, 5, 99, epoch);
        EXPECT_EQ(a, make_batches(samples, 5, 99, epoch));
        std::vector<std::size_t> seen;
        for (const auto& b : a) seen.insert(seen.end(), b.begin(), b.end());
        std::sort(seen.begin(), seen.end());
        std::vector<std::size_t> expect(samples.size());
        for (std::size_t i = 0; i < expect.size(); ++i) expect[i] = i;
        EXPECT_EQ(seen, expect);
    }
    EXPECT_NE(make_batches(samples, 5, 99, 0), make_batches(samples, 5, 99, 1));
    EXPECT_NE(make_batches(samples, 5, 99, 0), make_batches(samples, 5, 100, 0));
}

TEST(Batches, RejectLongSequences) {
    std::mt19937_64 rng(5);
    std::vector<Sample> samples = {sample_of_length(5, 0.0, rng)};
    EXPECT_THROW(make_batches(samples, 4, 1, 0), DomainError);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    std::vector<double> p = {1.0, -2.0, 3.0};
    const std::vector<double> g(3, 0.0);
    AdamMoments m;
    for (std::size_t t = 1; t <= 5; ++t) adam_step(p, g, m, t, {});
    EXPECT_EQ(p, (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(Adam, StepOpposesGradientAndIsBoundedByRate) {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n(0, 5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> p(4), g(4);
        for (auto& v : p) v = n(rng);
        for (auto& v : g) v = n(rng);
        const auto before = p;
        AdamMoments m;
        adam_step(p, g, m, 1, AdamHyper{});
        for (std::size_t i = 0; i < 4; ++i) {
            const double d = p[i] - before[i];
            EXPECT_LE(std::abs(d), 1e-3 * (1 + 1e-12));
            if (g[i] != 0.0) {
                EXPECT_LT(d * g[i], 0.0);
            }
        }
    }
}

TEST(Adam, ConstantGradientMovesAtLearningRate) {
    std::vector<double> p = {0.0};
    const std::vector<double> g = {0.3};
    AdamMoments m;
    for (std::size_t t = 1; t <= 10; ++t) adam_step(p, g, m, t, AdamHyper{0.01, 0.9, 0.999, 1e-8});
    EXPECT_NEAR(p[0], -0.1, 1e-6);
}

TEST(Clip, ScalesOnlyAboveThreshold) {
    std::vector<double> g = {3.0, 4.0};
    EXPECT_DOUBLE_EQ(clip_global_norm(g, 10.0), 5.0);
    EXPECT_EQ(g, (std::vector<double>{3.0, 4.0}));
    clip_global_norm(g, 1.0);
    EXPECT_NEAR(g[0], 0.6, 1e-15);
    EXPECT_NEAR(g[1], 0.8, 1e-15);
}

TEST(LossGradient, SmallStepDecreasesLoss) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const auto p = random_params(5, rng);
        const auto batch = random_batch(2, 8, rng);
        const auto lg = batch_loss_and_gradient(p, batch, DecayKind::log_decay);
        auto flat = p.flatten();
        for (std::size_t i = 0; i < flat.size(); ++i) flat[i] -= 1e-4 * lg.gradient[i];
        auto q = p;
        q.assign(flat);
        EXPECT_LT(batch_loss_and_gradient(q, batch, DecayKind::log_decay).loss, lg.loss);
    }
}

TEST(LossGradient, ChunkedMatchesSingleTape) {
    std::mt19937_64 rng(8);
    const auto p = random_params(6, rng);
    const auto batch = random_batch(3, 11, rng);
    const auto one = batch_loss_and_gradient(p, batch, DecayKind::log_decay, 1);
    const auto four = batch_loss_and_gradient(p, batch, DecayKind::log_decay, 4);
    EXPECT_NEAR(four.loss, one.loss, 1e-14);
    for (std::size_t i = 0; i < one.gradient.size(); ++i) EXPECT_NEAR(four.gradient[i], one.gradient[i], 1e-13);
    const auto again = batch_loss_and_gradient(p, batch, DecayKind::log_decay, 4);
    EXPECT_EQ(again.gradient, four.gradient);
}

namespace {

std::pair<std::vector<Sample>, Standardizer> tiny_task(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto samples = mixed_lengths({8, 6, 4, 2}, rng);
    for (auto& s : samples) s.label_se = 0.5 * s.inputs.back()[kSeFeature] - 0.2;
    return {samples, fit_on_training(samples)};
}

} // namespace

TEST(Train, SameSeedSameResult) {
    const auto [samples, st] = tiny_task(9);
    TrainConfig c;
    c.epochs = 5;
    c.hidden_size = 4;
    c.batch_size = 3;
    const auto a = train(samples, st, c);
    const auto b = train(samples, st, c);
    EXPECT_EQ(a.params.flatten(), b.params.flatten());
    EXPECT_EQ(a.trace.mse, b.trace.mse);
    c.seed = 43;
    EXPECT_NE(train(samples, st, c).params.flatten(), a.params.flatten());
}

TEST(Train, LossFallsOnLearnableTarget) {
    const auto [samples, st] = tiny_task(10);
    TrainConfig c;
    c.epochs = 150;
    c.hidden_size = 8;
    c.batch_size = 8;
    c.lr = 1e-2;
    const auto r = train(samples, st, c);
    ASSERT_EQ(r.trace.epochs(), 150u);
    EXPECT_LT(r.trace.mse.back(), 0.5 * r.trace.mse.front());
}

TEST(Train, CheckpointCadence) {
    const auto [samples, st] = tiny_task(11);
    TrainConfig c;
    c.epochs = 7;
    c.hidden_size = 2;
    c.checkpoint_every = 3;
    std::vector<std::size_t> seen;
    train(samples, st, c, [&](std::size_t e, const TlstmParams&) { seen.push_back(e); });
    EXPECT_EQ(seen, (std::vector<std::size_t>{3, 6, 7}));
}

TEST(Train, DivergenceRaisesNumericError) {
    const auto [samples, st] = tiny_task(12);
    TrainConfig c;
    c.epochs = 200;
    c.hidden_size = 4;
    c.optimizer = OptimizerKind::sgd;
    c.lr = 1e300;
    EXPECT_THROW(train(samples, st, c), NumericError);
}

TEST(Train, RejectsBadInput) {
    const auto [samples, st] = tiny_task(13);
    TrainConfig c;
    c.epochs = 0;
    EXPECT_THROW(train(samples, st, c), ConfigError);
    c.epochs = 1;
    EXPECT_THROW(train({}, st, c), DomainError);
    std::mt19937_64 rng(1);
    std::vector<Sample> longer = {sample_of_length(5, 0.0, rng)};
    EXPECT_THROW(train(longer, st, c), DomainError);
}

TEST(TrainConfig, ParseAndRoundTrip) {
    std::istringstream in("# comment\nepochs = 12\nlr=0.01\noptimizer = sgd\ndecay = inverse\nclip_norm = 5\n");
    const auto c = apply_train_config(TrainConfig{}, parse_key_values(in));
    EXPECT_EQ(c.epochs, 12u);
    EXPECT_EQ(c.lr, 0.01);
    EXPECT_EQ(c.optimizer, OptimizerKind::sgd);
    EXPECT_EQ(c.decay, DecayKind::inverse_decay);
    ASSERT_TRUE(c.clip_norm);
    EXPECT_EQ(*c.clip_norm, 5.0);
    const auto back = apply_train_config(TrainConfig{}, to_key_values(c));
    EXPECT_EQ(to_key_values(back), to_key_values(c));
}

TEST(TrainConfig, Errors) {
    EXPECT_THROW(apply_train_config(TrainConfig{}, {{"epoch", "3"}}), ConfigError);
    EXPECT_THROW(apply_train_config(TrainConfig{}, {{"lr", "fast"}}), ConfigError);
    EXPECT_THROW(apply_train_config(TrainConfig{}, {{"optimizer", "rmsprop"}}), ConfigError);
    std::istringstream bad("epochs 3\n");
    EXPECT_THROW(parse_key_values(bad), ConfigError);
}

TEST(LossTrace, Csv) {
    LossTrace t;
    t.mse = {0.5, 0.25};
    t.seconds = {0.1, 0.2};
    std::ostringstream out;
    t.write_csv(out);
    const std::string text = out.str();
    EXPECT_EQ(text.substr(0, 18), "epoch,mse,seconds\n");
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}
