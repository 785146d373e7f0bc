#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

#include "psynet/config.hpp"
#include "psynet/trainer.hpp"
#include "support.hpp"

using namespace psynet;
using namespace testing_support;

namespace {

Hyperparams tiny_hp() {
    Hyperparams hp;
    hp.channels = 3;
    hp.spatial_filters = 4;
    hp.bands = 2;
    hp.classes = 4;
    hp.samples = 40;
    hp.fir_length = 9;
    hp.fs_hz = 100.0;
    hp.first_band_hz = 15.0;
    hp.band_spacing_hz = 10.0;
    hp.band_width_hz = 4.0;
    hp.batch_size = 4;
    hp.epochs = 3;
    return hp;
}

TrialSet random_set(const Hyperparams& hp, std::size_t n, std::uint64_t seed) {
    TrialSet ts;
    ts.trials = random_tensor({n, hp.channels, hp.samples}, seed);
    auto rng = make_rng(seed, {7});
    for (std::size_t i = 0; i < n; ++i) ts.labels.push_back(i % hp.classes);
    shuffle(std::span<std::size_t>(ts.labels), rng);
    ts.fs_hz = hp.fs_hz;
    for (std::size_t c = 0; c < hp.classes; ++c) ts.class_names.push_back("c" + std::to_string(c));
    return ts;
}

Gradients constant_gradients(PsnetParams& p, const Hyperparams& hp, double value) {
    Gradients g = zero_gradients(p, hp);
    for (auto& b : gradient_blocks(g, hp)) b.value->fill(value);
    return g;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
    const Hyperparams hp = tiny_hp();
    PsnetParams p = init_params(hp, 1);
    const PsnetParams before = p;
    AdamState st(p, hp);
    Gradients g = constant_gradients(p, hp, 0.0);
    adam_step(p, hp, g, st);
    EXPECT_EQ(p.spatial, before.spatial);
    EXPECT_EQ(p.transcoder, before.transcoder);
    EXPECT_EQ(p.classifier, before.classifier);
    EXPECT_EQ(p.bn_gamma, before.bn_gamma);
    EXPECT_EQ(st.step, 1U);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    const Hyperparams hp = tiny_hp();
    PsnetParams p = init_params(hp, 2);
    const PsnetParams before = p;
    AdamState st(p, hp);
    EXPECT_EQ(st.lr, 1e-3);
    Gradients g = constant_gradients(p, hp, 1.0);
    adam_step(p, hp, g, st);
    const double want = 1e-3 / (1.0 + 1e-8);
    for (std::size_t i = 0; i < p.spatial.size(); ++i) EXPECT_NEAR(before.spatial[i] - p.spatial[i], want, 1e-15);
    for (std::size_t i = 0; i < p.classifier.size(); ++i)
        EXPECT_NEAR(before.classifier[i] - p.classifier[i], want, 1e-15);
}

TEST(AdamProperty, FirstStepMagnitudeBoundedByLearningRate) {
    const Hyperparams hp = tiny_hp();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        PsnetParams p = init_params(hp, seed);
        const PsnetParams before = p;
        AdamState st(p, hp);
        Gradients g = zero_gradients(p, hp);
        std::uint64_t k = 0;
        for (auto& b : gradient_blocks(g, hp)) *b.value = random_tensor(b.value->shape(), seed * 10 + ++k, -100, 100);
        adam_step(p, hp, g, st);
        PsnetParams b4 = before;
        auto now = trainable_blocks(p, hp);
        auto old = trainable_blocks(b4, hp);
        for (std::size_t b = 0; b < now.size(); ++b)
            EXPECT_LE(max_abs_diff(*now[b].value, *old[b].value), st.lr * (1.0 + 1e-9)) << now[b].name;
    }
}

TEST(Adam, ShapeMismatchIsDimensionError) {
    const Hyperparams hp = tiny_hp();
    PsnetParams p = init_params(hp, 3);
    AdamState st(p, hp);
    Gradients g = zero_gradients(p, hp);
    g.classifier = Tensor({2, 2});
    EXPECT_THROW(adam_step(p, hp, g, st), DimensionError);
}

TEST(Adam, FirBankUntouchedAfterHundredSteps) {
    Hyperparams hp = tiny_hp();
    hp.use_phase_shifter = true;
    hp.shifter_length = 3;
    PsnetParams p = init_params(hp, 4);
    const Tensor fir0 = p.fir;
    const auto ts = random_set(hp, 8, 5);
    std::vector<Tensor> xs;
    for (std::size_t i = 0; i < ts.n_trials(); ++i) xs.push_back(ts.trial(i));
    AdamState st(p, hp);
    for (int s = 0; s < 100; ++s) {
        auto pass = forward(p, hp, xs, Mode::train);
        auto g = backward(p, hp, pass, ts.labels);
        adam_step(p, hp, g, st);
    }
    EXPECT_EQ(std::memcmp(p.fir.data().data(), fir0.data().data(), fir0.size() * sizeof(double)), 0);
    for (auto& b : trainable_blocks(p, hp)) EXPECT_TRUE(b.value->all_finite()) << b.name;
}

TEST(BatchRanges, TrailingSingletonMerged) {
    EXPECT_EQ(batch_ranges(10, 4), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 4}, {4, 8}, {8, 10}}));
    EXPECT_EQ(batch_ranges(9, 4), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 4}, {4, 9}}));
    EXPECT_EQ(batch_ranges(33, 32), (std::vector<std::pair<std::size_t, std::size_t>>{{0, 33}}));
}

TEST(Train, LossCurveFiniteAndDeterministic) {
    const Hyperparams hp = tiny_hp();
    const auto ts = random_set(hp, 9, 6);
    PsnetParams a = init_params(hp, 7), b = init_params(hp, 7);
    const auto ra = train(a, hp, ts, {5, 4, 11});
    const auto rb = train(b, hp, ts, {5, 4, 11});
    ASSERT_EQ(ra.loss_curve.size(), 5U);
    for (double l : ra.loss_curve) EXPECT_TRUE(std::isfinite(l));
    EXPECT_EQ(ra.loss_curve, rb.loss_curve);
    EXPECT_EQ(a.spatial, b.spatial);
    EXPECT_EQ(ra.steps, 10U);
}

TEST(Train, NonFiniteLossIsDivergenceError) {
    const Hyperparams hp = tiny_hp();
    const auto ts = random_set(hp, 8, 8);
    PsnetParams p = init_params(hp, 9);
    p.classifier[0] = std::numeric_limits<double>::infinity();
    try {
        train(p, hp, ts, {3, 4, 1});
        FAIL();
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.epoch(), 0U);
        EXPECT_EQ(e.batch(), 0U);
        EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos);
    }
}

TEST(Train, RejectsBadLabelsAndShapes) {
    const Hyperparams hp = tiny_hp();
    auto ts = random_set(hp, 8, 10);
    PsnetParams p = init_params(hp, 1);
    ts.labels[0] = 9;
    EXPECT_THROW(train(p, hp, ts, {1, 4, 1}), IndexError);
    Hyperparams other = hp;
    other.channels = 5;
    PsnetParams q = init_params(other, 1);
    EXPECT_THROW(train(q, other, random_set(hp, 8, 10), {1, 4, 1}), DimensionError);
}

TEST(Folds, BcicSizedSplit) {
    std::vector<std::size_t> labels(288);
    for (std::size_t i = 0; i < 288; ++i) labels[i] = i % 4;
    auto rng = make_rng(1, {stream::folds, 0});
    const auto folds = make_folds(labels, 4, true, rng);
    std::set<std::size_t> all;
    for (const auto& f : folds) {
        EXPECT_EQ(f.size(), 72U);
        all.insert(f.begin(), f.end());
    }
    EXPECT_EQ(all.size(), 288U);
}

TEST(FoldsProperty, PartitionAndStratification) {
    auto gen = make_rng(2, {1});
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 10 + static_cast<std::size_t>(uniform(gen, 0, 200));
        const std::size_t k = 2 + static_cast<std::size_t>(uniform(gen, 0, 6));
        const std::size_t classes = 2 + static_cast<std::size_t>(uniform(gen, 0, 4));
        if (n < k) continue;
        std::vector<std::size_t> labels(n);
        for (auto& l : labels) l = static_cast<std::size_t>(uniform(gen, 0, static_cast<double>(classes)));
        for (std::size_t c = 0; c < classes; ++c) labels[c] = c;
        auto rng = make_rng(static_cast<std::uint64_t>(trial), {stream::folds});
        const auto folds = make_folds(labels, k, true, rng);

        std::vector<int> seen(n, 0);
        for (const auto& f : folds)
            for (auto i : f) ++seen[i];
        for (int s : seen) EXPECT_EQ(s, 1);

        std::vector<double> total(classes, 0.0);
        for (auto l : labels) total[l] += 1.0;
        for (const auto& f : folds) {
            std::vector<double> cnt(classes, 0.0);
            for (auto i : f) cnt[labels[i]] += 1.0;
            for (std::size_t c = 0; c < classes; ++c)
                EXPECT_LE(std::abs(cnt[c] - total[c] / static_cast<double>(k)), 1.0) << "n " << n << " k " << k;
        }
        std::size_t mn = n, mx = 0;
        for (const auto& f : folds) {
            mn = std::min(mn, f.size());
            mx = std::max(mx, f.size());
        }
        EXPECT_LE(mx - mn, 1U);
    }
}

TEST(Evaluate, AccuracyEdgeCases) {
    const std::vector<std::size_t> a{0, 1, 2, 3};
    EXPECT_EQ(accuracy(a, a), 1.0);
    EXPECT_EQ(accuracy(std::vector<std::size_t>{1, 1, 1, 1}, a), 0.25);
    EXPECT_THROW(accuracy(std::vector<std::size_t>{}, std::vector<std::size_t>{}), DimensionError);
}

TEST(Evaluate, RandomLabelsNearChance) {
    const Hyperparams hp = tiny_hp();
    const auto ts = random_set(hp, 400, 12);
    const PsnetParams p = init_params(hp, 13);
    EXPECT_NEAR(evaluate(p, hp, ts), 0.25, 0.07);
}

TEST(Evaluate, InvariantToTrialOrder) {
    const Hyperparams hp = tiny_hp();
    const auto ts = random_set(hp, 40, 14);
    const PsnetParams p = init_params(hp, 15);
    std::vector<std::size_t> perm(40);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    auto rng = make_rng(16, {1});
    shuffle(std::span<std::size_t>(perm), rng);
    EXPECT_EQ(evaluate(p, hp, ts), evaluate(p, hp, ts.subset(perm)));
}

TEST(CrossValidate, ThreadCountDoesNotChangeResults) {
    Hyperparams hp = tiny_hp();
    hp.epochs = 2;
    const auto ts = random_set(hp, 16, 17);
    CvProtocol cv;
    cv.folds = 2;
    cv.repeats = 2;
    cv.seed = 3;
    const auto ref = cross_validate(hp, ts, cv, {0, true});
    const auto par = cross_validate(hp, ts, cv, {3, false});
    ASSERT_EQ(ref.report.folds.size(), 4U);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(ref.report.folds[j].loss_curve, par.report.folds[j].loss_curve);
        EXPECT_EQ(ref.report.folds[j].test_accuracy, par.report.folds[j].test_accuracy);
    }
    EXPECT_TRUE(ref.report.folds_partition);
    EXPECT_TRUE(ref.report.no_leakage);
    EXPECT_EQ(ref.best_params.spatial, par.best_params.spatial);
    for (double a : ref.report.repeat_accuracy) {
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0);
    }
    EXPECT_EQ(ref.report.recorded_accuracy, ref.report.max_over_repeats);
}

TEST(CrossValidate, ReportJsonAndCsv) {
    Hyperparams hp = tiny_hp();
    hp.epochs = 2;
    const auto ts = random_set(hp, 12, 18);
    CvProtocol cv;
    cv.folds = 3;
    cv.repeats = 1;
    cv.record_rule = RecordRule::mean;
    const auto out = cross_validate(hp, ts, cv, {0, true});
    const json j = to_json(out.report);
    EXPECT_EQ(j["record_rule"], "mean");
    EXPECT_EQ(j["folds"].size(), 3U);
    EXPECT_EQ(j["recorded_accuracy"], j["mean_accuracy"]);
    const auto csv = loss_curves_csv(out.report);
    EXPECT_EQ(csv.rfind("repeat,fold,epoch,mean_loss\n", 0), 0U);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 2);
}

TEST(CrossValidate, UnstratifiedDegenerateFoldWarns) {
    Hyperparams hp = tiny_hp();
    hp.epochs = 1;
    auto ts = random_set(hp, 8, 19);
    ts.labels = {0, 0, 0, 0, 0, 0, 0, 1};
    CvProtocol cv;
    cv.folds = 2;
    cv.repeats = 1;
    cv.stratified = false;
    const auto out = cross_validate(hp, ts, cv, {0, true});
    EXPECT_FALSE(out.report.warnings.empty());
}

TEST(CrossValidate, FewerTrialsThanFolds) {
    const Hyperparams hp = tiny_hp();
    CvProtocol cv;
    cv.folds = 4;
    EXPECT_THROW(cross_validate(hp, random_set(hp, 3, 20), cv), ConfigError);
}

// Desk-scale synthetic set: training fits, predictions agree with low-loss trials.
TEST(TrainSynthetic, SeparableClassesAreLearned) {
    const RunConfig rc = synthetic_quick_profile();
    const Hyperparams& hp = rc.hyperparams;
    SynthConfig sc;
    sc.n_trials_per_class = 25;
    const auto sd = generate_synthetic(sc);
    PsnetParams p = init_params(hp, 1);
    const auto r = train(p, hp, sd.data, {hp.epochs, hp.batch_size, 2});
    for (double l : r.loss_curve) EXPECT_TRUE(std::isfinite(l));
    EXPECT_GE(evaluate(p, hp, sd.data), 0.95);

    std::size_t low = 0, low_ok = 0;
    for (std::size_t i = 0; i < sd.data.n_trials(); ++i) {
        const auto c = forward(p, hp, sd.data.trial(i));
        if (loss(c, sd.data.labels[i]) < 0.2) {
            ++low;
            low_ok += predict_from_logits(c.y) == sd.data.labels[i];
        }
    }
    ASSERT_GT(low, 0U);
    EXPECT_GE(static_cast<double>(low_ok) / static_cast<double>(low), 0.99);
}

TEST(CrossValidateSynthetic, TwoFoldRecordsHighAccuracy) {
    RunConfig rc = synthetic_quick_profile();
    rc.hyperparams.epochs = 100;
    SynthConfig sc;
    sc.n_trials_per_class = 25;
    const auto sd = generate_synthetic(sc);
    const auto out = cross_validate(rc.hyperparams, sd.data, rc.cv, {0, true});
    EXPECT_GE(out.report.recorded_accuracy, 0.95);
}
