#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <iterator>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "psynet/dataio.hpp"
#include "psynet/errors.hpp"
#include "psynet/psnet.hpp"
#include "psynet/rng.hpp"
#include "psynet/tensor.hpp"

namespace psynet {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::size_t step = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    AdamState() = default;

    AdamState(PsnetParams& params, const Hyperparams& hp) : lr(hp.learning_rate) {
        for (auto& b : trainable_blocks(params, hp)) {
            m.emplace_back(b.value->shape());
            v.emplace_back(b.value->shape());
        }
    }
};

/**
 * One bias-corrected Adam update of every trainable block. The FIR bank is
 * not a trainable block and is never touched.
 */
inline void adam_step(PsnetParams& params, const Hyperparams& hp, Gradients& grads, AdamState& state) {
    auto blocks = trainable_blocks(params, hp);
    auto gblocks = gradient_blocks(grads, hp);
    if (state.m.empty()) state = AdamState(params, hp);
    if (blocks.size() != gblocks.size() || blocks.size() != state.m.size())
        throw DimensionError("adam_step: block count mismatch");

    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        Tensor& w = *blocks[i].value;
        const Tensor& g = *gblocks[i].value;
        if (g.shape() != w.shape() || state.m[i].shape() != w.shape()) {
            throw DimensionError("adam_step: gradient for \"" + std::string(blocks[i].name) + "\" has shape " +
                                 Tensor::shape_string(g.shape()) + ", parameter is " +
                                 Tensor::shape_string(w.shape()));
        }
        auto wd = w.data();
        auto gd = g.data();
        auto md = state.m[i].data();
        auto vd = state.v[i].data();
        for (std::size_t j = 0; j < wd.size(); ++j) {
            md[j] = state.beta1 * md[j] + (1.0 - state.beta1) * gd[j];
            vd[j] = state.beta2 * vd[j] + (1.0 - state.beta2) * gd[j] * gd[j];
            const double mhat = md[j] / bc1;
            const double vhat = vd[j] / bc2;
            wd[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
    ++params.version;
}

// ---------------------------------------------------------------------------
// Epoch loop
// ---------------------------------------------------------------------------

struct TrainOptions {
    std::size_t epochs = 800;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
};

struct TrainResult {
    std::vector<double> loss_curve;  // per-epoch mean of batch losses
    std::size_t steps = 0;
};

// Batch boundaries for n items. A trailing batch of one is folded into the
// previous batch so training-mode batch norm always sees >= 2 trials.
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch_size) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t s = 0; s < n; s += batch_size) out.emplace_back(s, std::min(n, s + batch_size));
    if (out.size() >= 2 && out.back().second - out.back().first == 1) {
        out[out.size() - 2].second = out.back().second;
        out.pop_back();
    }
    return out;
}

inline TrainResult train(PsnetParams& params, const Hyperparams& hp, const TrialSet& train_set,
                         const TrainOptions& opt) {
    hp.validate();
    if (train_set.n_trials() < 2) throw ConfigError("train: need at least 2 training trials for batch normalization");
    if (train_set.n_channels() != hp.channels || train_set.n_samples() != hp.samples) {
        throw DimensionError("train: data is " + std::to_string(train_set.n_channels()) + "x" +
                             std::to_string(train_set.n_samples()) + ", model expects " +
                             std::to_string(hp.channels) + "x" + std::to_string(hp.samples));
    }
    for (auto l : train_set.labels)
        if (l >= hp.classes) throw IndexError("train: label " + std::to_string(l) + " >= F3");
    if (opt.batch_size < 2) throw ConfigError("train: batch size must be >= 2");

    const std::size_t n = train_set.n_trials();
    std::vector<Tensor> trials;
    trials.reserve(n);
    for (std::size_t i = 0; i < n; ++i) trials.push_back(train_set.trial(i));

    AdamState adam(params, hp);
    TrainResult result;
    std::vector<std::size_t> order(n);
    const auto ranges = batch_ranges(n, opt.batch_size);

    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng = make_rng(opt.seed, {stream::shuffle, epoch});
        shuffle(std::span<std::size_t>(order), rng);

        double total = 0.0;
        for (std::size_t bi = 0; bi < ranges.size(); ++bi) {
            const auto [lo, hi] = ranges[bi];
            std::vector<Tensor> batch;
            std::vector<std::size_t> labels;
            for (std::size_t j = lo; j < hi; ++j) {
                batch.push_back(trials[order[j]]);
                labels.push_back(train_set.labels[order[j]]);
            }
            auto pass = forward(params, hp, batch, Mode::train);
            const double l = batch_loss(pass, labels);
            if (!std::isfinite(l)) throw DivergenceError(epoch, bi);
            auto grads = backward(params, hp, pass, labels);
            adam_step(params, hp, grads, adam);
            total += l;
            ++result.steps;
        }
        result.loss_curve.push_back(total / static_cast<double>(ranges.size()));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline std::vector<std::size_t> predict_all(const PsnetParams& params, const Hyperparams& hp, const TrialSet& ts) {
    std::vector<std::size_t> out(ts.n_trials());
    for (std::size_t i = 0; i < ts.n_trials(); ++i) out[i] = predict(params, hp, ts.trial(i));
    return out;
}

inline double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
    if (predicted.size() != labels.size() || labels.empty()) throw DimensionError("accuracy: size mismatch or empty");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

inline double evaluate(const PsnetParams& params, const Hyperparams& hp, const TrialSet& test_set) {
    if (test_set.n_trials() == 0) throw DimensionError("evaluate: empty test set");
    const auto pred = predict_all(params, hp, test_set);
    return accuracy(pred, test_set.labels);
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

enum class RecordRule { max_over_repeats, mean };

NLOHMANN_JSON_SERIALIZE_ENUM(RecordRule, {{RecordRule::max_over_repeats, "max_over_repeats"},
                                          {RecordRule::mean, "mean"}})

struct CvProtocol {
    std::size_t folds = 4;
    std::size_t repeats = 10;
    std::uint64_t seed = 0;
    bool stratified = true;
    RecordRule record_rule = RecordRule::max_over_repeats;

    void validate() const {
        if (folds < 2) throw ConfigError("CvProtocol: k >= 2 required");
        if (repeats < 1) throw ConfigError("CvProtocol: repeats >= 1 required");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CvProtocol, folds, repeats, seed, stratified, record_rule)

/**
 * Test-fold index lists for one repeat. Stratified: each class is shuffled
 * and dealt round-robin, continuing where the previous class stopped, so
 * fold sizes differ by at most one and every fold holds each class to
 * within one trial of its global share.
 */
inline std::vector<std::vector<std::size_t>> make_folds(std::span<const std::size_t> labels, std::size_t k,
                                                        bool stratified, Rng& rng) {
    const std::size_t n = labels.size();
    if (k < 2) throw ConfigError("make_folds: k >= 2 required");
    if (n < k) throw ConfigError("make_folds: " + std::to_string(n) + " trials cannot fill " + std::to_string(k) + " folds");
    std::vector<std::vector<std::size_t>> folds(k);
    if (stratified) {
        const std::size_t n_classes = *std::max_element(labels.begin(), labels.end()) + 1;
        std::size_t next = 0;
        for (std::size_t c = 0; c < n_classes; ++c) {
            std::vector<std::size_t> idx;
            for (std::size_t i = 0; i < n; ++i)
                if (labels[i] == c) idx.push_back(i);
            shuffle(std::span<std::size_t>(idx), rng);
            for (auto i : idx) folds[next++ % k].push_back(i);
        }
    } else {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        shuffle(std::span<std::size_t>(idx), rng);
        for (std::size_t j = 0; j < n; ++j) folds[j * k / n].push_back(idx[j]);
    }
    for (auto& f : folds) std::sort(f.begin(), f.end());
    return folds;
}

struct FoldResult {
    std::size_t repeat = 0;
    std::size_t fold = 0;
    double test_accuracy = 0.0;
    double train_accuracy = 0.0;
    std::vector<std::size_t> test_indices;
    std::vector<std::size_t> train_indices;
    std::vector<double> loss_curve;
    double wall_time_s = 0.0;
};

struct RunReport {
    std::vector<FoldResult> folds;
    std::vector<double> repeat_accuracy;  // mean over folds, per repeat
    double max_over_repeats = 0.0;
    double mean_over_repeats = 0.0;
    RecordRule record_rule = RecordRule::max_over_repeats;
    double recorded_accuracy = 0.0;
    bool folds_partition = false;  // each repeat's test folds partition the set
    bool no_leakage = false;       // no test index appears in that fold's training indices
    std::vector<std::string> warnings;
    double wall_time_s = 0.0;
    json config = json::object();
    // Parameters of the fold with the highest test accuracy (lowest index on ties).
    std::size_t best_job = 0;
};

inline json to_json(const FoldResult& f) {
    return {{"repeat", f.repeat},
            {"fold", f.fold},
            {"test_accuracy", f.test_accuracy},
            {"train_accuracy", f.train_accuracy},
            {"n_train", f.train_indices.size()},
            {"n_test", f.test_indices.size()},
            {"test_indices", f.test_indices},
            {"final_loss", f.loss_curve.empty() ? json(nullptr) : json(f.loss_curve.back())},
            {"wall_time_s", f.wall_time_s}};
}

inline json to_json(const RunReport& r) {
    json folds = json::array();
    for (const auto& f : r.folds) folds.push_back(to_json(f));
    return {{"folds", folds},
            {"repeat_accuracy", r.repeat_accuracy},
            {"max_accuracy", r.max_over_repeats},
            {"mean_accuracy", r.mean_over_repeats},
            {"record_rule", r.record_rule},
            {"recorded_accuracy", r.recorded_accuracy},
            {"folds_partition", r.folds_partition},
            {"no_leakage", r.no_leakage},
            {"best_fold", {{"repeat", r.folds.empty() ? 0 : r.folds[r.best_job].repeat},
                           {"fold", r.folds.empty() ? 0 : r.folds[r.best_job].fold}}},
            {"warnings", r.warnings},
            {"wall_time_s", r.wall_time_s},
            {"config", r.config}};
}

// Rows of (repeat, fold, epoch, mean_loss).
inline std::string loss_curves_csv(const RunReport& r) {
    std::string out = "repeat,fold,epoch,mean_loss\n";
    char buf[96];
    for (const auto& f : r.folds) {
        for (std::size_t e = 0; e < f.loss_curve.size(); ++e) {
            std::snprintf(buf, sizeof buf, "%zu,%zu,%zu,%.17g\n", f.repeat, f.fold, e, f.loss_curve[e]);
            out += buf;
        }
    }
    return out;
}

struct CvOptions {
    // 0: read PSYNET_THREADS (default: hardware concurrency).
    std::size_t threads = 0;
    // Single-threaded execution; results are identical either way because each
    // job owns its parameters and seeds.
    bool reference_mode = false;
};

inline std::size_t resolve_threads(const CvOptions& opt) {
    if (opt.reference_mode) return 1;
    if (opt.threads > 0) return opt.threads;
    if (const char* env = std::getenv("PSYNET_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    return std::max(1U, std::thread::hardware_concurrency());
}

struct CvOutcome {
    RunReport report;
    PsnetParams best_params;
};

inline std::uint64_t fold_seed(std::uint64_t seed, std::size_t repeat, std::size_t fold) {
    return derive_seed(seed, {stream::init, repeat, fold});
}

inline CvOutcome cross_validate(const Hyperparams& hp, const TrialSet& data, const CvProtocol& cv,
                                const CvOptions& opt = {}) {
    hp.validate();
    cv.validate();
    data.validate();
    if (data.n_trials() < cv.folds) throw ConfigError("cross_validate: fewer trials than folds");
    const auto t0 = std::chrono::steady_clock::now();

    RunReport report;
    report.record_rule = cv.record_rule;

    struct Job {
        std::size_t repeat, fold;
        std::vector<std::size_t> train_idx, test_idx;
    };
    std::vector<Job> jobs;
    report.folds_partition = true;
    for (std::size_t r = 0; r < cv.repeats; ++r) {
        Rng rng = make_rng(cv.seed, {stream::folds, r});
        auto folds = make_folds(data.labels, cv.folds, cv.stratified, rng);
        std::vector<std::size_t> seen(data.n_trials(), 0);
        for (std::size_t f = 0; f < cv.folds; ++f) {
            for (auto i : folds[f]) ++seen[i];
            Job job{r, f, {}, folds[f]};
            for (std::size_t g = 0; g < cv.folds; ++g)
                if (g != f) job.train_idx.insert(job.train_idx.end(), folds[g].begin(), folds[g].end());
            std::sort(job.train_idx.begin(), job.train_idx.end());
            if (!cv.stratified) {
                std::vector<bool> present(data.n_classes(), false);
                for (auto i : job.test_idx) present[data.labels[i]] = true;
                if (std::find(present.begin(), present.end(), false) != present.end())
                    report.warnings.push_back("repeat " + std::to_string(r) + " fold " + std::to_string(f) +
                                              ": test fold lacks at least one class");
            }
            jobs.push_back(std::move(job));
        }
        report.folds_partition =
            report.folds_partition && std::all_of(seen.begin(), seen.end(), [](std::size_t c) { return c == 1; });
    }

    std::vector<FoldResult> results(jobs.size());
    std::vector<PsnetParams> params(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr err;

    auto worker = [&] {
        for (;;) {
            const std::size_t j = next.fetch_add(1);
            if (j >= jobs.size()) return;
            try {
                const auto start = std::chrono::steady_clock::now();
                const Job& job = jobs[j];
                const TrialSet train_set = data.subset(job.train_idx);
                const TrialSet test_set = data.subset(job.test_idx);
                const std::uint64_t s = fold_seed(cv.seed, job.repeat, job.fold);
                PsnetParams p = init_params(hp, s);
                auto tr = train(p, hp, train_set, {hp.epochs, hp.batch_size, derive_seed(s, {stream::shuffle})});
                FoldResult fr;
                fr.repeat = job.repeat;
                fr.fold = job.fold;
                fr.test_indices = job.test_idx;
                fr.train_indices = job.train_idx;
                fr.loss_curve = std::move(tr.loss_curve);
                fr.test_accuracy = evaluate(p, hp, test_set);
                fr.train_accuracy = evaluate(p, hp, train_set);
                fr.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
                results[j] = std::move(fr);
                params[j] = std::move(p);
            } catch (...) {
                std::lock_guard lock(err_mu);
                if (!err) err = std::current_exception();
                next = jobs.size();
                return;
            }
        }
    };

    const std::size_t n_threads = std::min(resolve_threads(opt), jobs.size());
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    }
    if (err) std::rethrow_exception(err);

    report.no_leakage = true;
    for (const auto& fr : results) {
        std::vector<std::size_t> both;
        std::set_intersection(fr.train_indices.begin(), fr.train_indices.end(), fr.test_indices.begin(),
                              fr.test_indices.end(), std::back_inserter(both));
        report.no_leakage = report.no_leakage && both.empty();
    }

    report.repeat_accuracy.assign(cv.repeats, 0.0);
    for (const auto& fr : results) report.repeat_accuracy[fr.repeat] += fr.test_accuracy / static_cast<double>(cv.folds);
    report.max_over_repeats = *std::max_element(report.repeat_accuracy.begin(), report.repeat_accuracy.end());
    report.mean_over_repeats = std::accumulate(report.repeat_accuracy.begin(), report.repeat_accuracy.end(), 0.0) /
                               static_cast<double>(cv.repeats);
    report.recorded_accuracy =
        cv.record_rule == RecordRule::max_over_repeats ? report.max_over_repeats : report.mean_over_repeats;

    for (std::size_t j = 1; j < results.size(); ++j)
        if (results[j].test_accuracy > results[report.best_job].test_accuracy) report.best_job = j;

    report.folds = std::move(results);
    report.config = {{"hyperparams", hp}, {"cv", cv}, {"n_trials", data.n_trials()}};
    report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const std::size_t best = report.best_job;
    return {std::move(report), std::move(params[best])};
}

}  // namespace psynet
