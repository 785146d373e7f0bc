// psynet: synthesize, convert, train, analyze and export PSNet runs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "psynet/psynet.hpp"

namespace fs = std::filesystem;
using namespace psynet;

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> dataset;
    std::optional<std::string> out;
    std::optional<std::string> checkpoint;
    bool phaser = false;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> folds;
    std::optional<std::size_t> repeats;
    std::optional<std::size_t> batch;
    bool reference_mode = false;
    bool quick = false;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "JSON run configuration");
    cmd->add_option("--seed", f.seed, "Run seed");
    cmd->add_option("--out", f.out, "Output directory");
    cmd->add_flag("--reference-mode", f.reference_mode, "Single-threaded, bit-reproducible execution");
    cmd->add_flag("--quick", f.quick, "Start from the desk-scale synthetic profile");
}

RunConfig resolve(const Flags& f) {
    RunConfig rc = f.quick ? synthetic_quick_profile() : RunConfig{};
    if (!f.config.empty()) rc = load_run_config(f.config);
    if (f.seed) rc.seed = *f.seed;
    if (f.dataset) rc.dataset = *f.dataset;
    if (f.out) rc.out = *f.out;
    if (f.checkpoint) rc.checkpoint = *f.checkpoint;
    if (f.phaser) rc.hyperparams.use_phase_shifter = true;
    if (f.epochs) rc.hyperparams.epochs = *f.epochs;
    if (f.folds) rc.cv.folds = *f.folds;
    if (f.repeats) rc.cv.repeats = *f.repeats;
    if (f.batch) rc.hyperparams.batch_size = *f.batch;
    if (f.reference_mode) rc.reference_mode = true;
    rc.cv.seed = rc.seed;
    rc.synth.seed = rc.seed;
    return rc;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
    if (!out) throw Error("write failed for " + p.string());
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw Error("missing output " + p.string());
    return json::parse(in);
}

fs::path prepare_out(const RunConfig& rc) {
    fs::path out(rc.out);
    fs::create_directories(out);
    write_json(out / "config.json", rc);
    return out;
}

void fit_hyperparams(Hyperparams& hp, const TrialSet& ts) {
    hp.channels = ts.n_channels();
    hp.samples = ts.n_samples();
    hp.fs_hz = ts.fs_hz;
    hp.classes = ts.n_classes();
}

// Shifter-enabled and shifter-free models from one seed agree at init.
double phaser_init_gap(const Hyperparams& hp, std::uint64_t seed, const TrialSet& ts) {
    Hyperparams off = hp;
    off.use_phase_shifter = false;
    Hyperparams on = hp;
    on.use_phase_shifter = true;
    auto p_off = init_params(off, seed);
    auto p_on = init_params(on, seed);
    double gap = 0.0;
    for (std::size_t i = 0; i < std::min<std::size_t>(ts.n_trials(), 4); ++i) {
        const Tensor x = ts.trial(i);
        gap = std::max(gap, max_abs_diff(forward(p_off, off, x).y, forward(p_on, on, x).y));
    }
    return gap;
}

int cmd_synth(const RunConfig& rc) {
    const fs::path out = prepare_out(rc);
    const auto sd = generate_synthetic(rc.synth);
    const fs::path data_path = out / "dataset.eegb";
    save_trialset(sd.data, data_path);
    write_json(out / "ground_truth.json", to_json(sd.truth));

    const auto back = load_trialset(data_path);
    if (encode_trialset(back) != encode_trialset(sd.data)) throw Error("dataset round-trip failed");

    std::printf("wrote %s (%zu trials, %zu channels, %zu samples @ %.6g Hz)\n", data_path.c_str(),
                sd.data.n_trials(), sd.data.n_channels(), sd.data.n_samples(), sd.data.fs_hz);
    std::printf("locked-pair PLV per class (band-filtered sources):\n");
    for (std::size_t c = 0; c < sd.data.n_classes(); ++c) {
        const auto [a, b] = sd.truth.locked_pairs[c];
        std::vector<double> vals;
        for (std::size_t i = 0; i < sd.data.n_trials(); ++i) {
            if (sd.data.labels[i] != c) continue;
            vals.push_back(source_pair_plv(sd.truth.sources.row(i, a), sd.truth.sources.row(i, b),
                                           sd.truth.center_hz[c], sd.data.fs_hz, rc.plv));
        }
        const auto s = summarize(vals);
        std::printf("  class %zu sources (%zu,%zu) %.1f Hz: mean %.3f  q1 %.3f  median %.3f\n", c, a, b,
                    sd.truth.center_hz[c], s.mean, s.q1, s.median);
    }
    return 0;
}

int cmd_train(RunConfig rc) {
    if (rc.dataset.empty()) throw ConfigError("train: --dataset is required");
    const TrialSet data = load_trialset(rc.dataset);
    if (rc.fit_to_dataset) fit_hyperparams(rc.hyperparams, data);
    rc.hyperparams.validate();
    const fs::path out = prepare_out(rc);

    CvOptions opt;
    opt.reference_mode = rc.reference_mode;
    auto result = cross_validate(rc.hyperparams, data, rc.cv, opt);
    auto& report = result.report;

    json rj = to_json(report);
    rj["dataset"] = rc.dataset;
    rj["seed"] = rc.seed;
    rj["reference_mode"] = rc.reference_mode;
    rj["checkpoint_source"] = "best fold by test accuracy";
    if (rc.hyperparams.use_phase_shifter) {
        const double gap = phaser_init_gap(rc.hyperparams, fold_seed(rc.seed, 0, 0), data);
        rj["phaser_init_check"] = {{"max_abs_diff", gap}, {"passed", gap <= 1e-12}};
    }
    rj["data_metadata"] = data.metadata;
    write_json(out / "report.json", rj);
    write_text(out / "losses.csv", loss_curves_csv(report));

    const auto& best = report.folds[report.best_job];
    Checkpoint ck{rc.hyperparams, result.best_params, rc.seed, rc.hyperparams.epochs,
                  {{"repeat", best.repeat}, {"fold", best.fold}, {"test_accuracy", best.test_accuracy}}};
    save_checkpoint(ck, out / "checkpoint.psnb");
    (void)load_checkpoint(out / "checkpoint.psnb");
    (void)read_json(out / "report.json");

    std::printf("folds: %zu x %zu  recorded (%s) %.4f  max %.4f  mean %.4f  [%.1f s]\n", rc.cv.repeats,
                rc.cv.folds, rc.cv.record_rule == RecordRule::mean ? "mean" : "max_over_repeats",
                report.recorded_accuracy, report.max_over_repeats, report.mean_over_repeats, report.wall_time_s);
    if (rj.contains("phaser_init_check"))
        std::printf("phaser init equivalence: max |dY| = %.3g\n", rj["phaser_init_check"]["max_abs_diff"].get<double>());
    return 0;
}

Checkpoint load_run_checkpoint(const RunConfig& rc) {
    const fs::path ck = rc.checkpoint.empty() ? fs::path(rc.out) / "checkpoint.psnb" : fs::path(rc.checkpoint);
    return load_checkpoint(ck);
}

std::vector<std::string> channel_names_for(const RunConfig& rc, const TrialSet* data, std::size_t c) {
    if (!rc.channel_names.empty()) return rc.channel_names;
    if (data && data->metadata.contains("channel_names"))
        return data->metadata["channel_names"].get<std::vector<std::string>>();
    return default_channel_names(c);
}

void write_filters(const fs::path& out, const Checkpoint& ck, const std::vector<std::string>& names) {
    const auto recs = export_spatial_filters(ck.params, names);
    write_json(out / "filters.json", filters_to_json(recs));
    write_text(out / "filters.csv", filters_to_csv(recs));
    const Tensor back = spatial_from_json(read_json(out / "filters.json"));
    if (max_abs_diff(back, ck.params.spatial) > 1e-12) throw Error("filter export round-trip failed");
}

int cmd_analyze(const RunConfig& rc) {
    if (rc.dataset.empty()) throw ConfigError("analyze: --dataset is required");
    const TrialSet data = load_trialset(rc.dataset);
    const Checkpoint ck = load_run_checkpoint(rc);
    const auto& hp = ck.hp;
    if (data.n_channels() != hp.channels || data.n_samples() != hp.samples || data.fs_hz != hp.fs_hz ||
        data.n_classes() != hp.classes) {
        throw ContractError("analyze: checkpoint expects " + std::to_string(hp.channels) + "x" +
                            std::to_string(hp.samples) + " @ " + std::to_string(hp.fs_hz) + " Hz with " +
                            std::to_string(hp.classes) + " classes; dataset differs");
    }
    const fs::path out = prepare_out(rc);

    const auto report = plv_report(ck.params, hp, data, rc.plv);
    write_json(out / "plv_report.json", to_json(report));
    write_text(out / "plv_report.csv", to_csv(report));
    write_filters(out, ck, channel_names_for(rc, &data, hp.channels));
    const auto sweep = bound_sweep(rc.bound_g, rc.bound_sx, rc.bound_sy, rc.bound_grid);
    write_text(out / "bound_sweep.csv", to_csv(sweep));
    (void)read_json(out / "plv_report.json");

    const std::size_t best = report.best_psp();
    const auto& e = report.entries[best];
    std::printf("best PSP %zu (band %.1f Hz, PSCs %zu,%zu): class gap %.3f\n", best, e.band_hz, e.psc_a, e.psc_b,
                report.class_gap(best));
    for (std::size_t c = 0; c < e.per_class.size(); ++c)
        std::printf("  class %zu: mean %.3f  q1 %.3f  median %.3f  q3 %.3f  (n=%zu)\n", c, e.per_class[c].mean,
                    e.per_class[c].q1, e.per_class[c].median, e.per_class[c].q3, e.per_class[c].n_trials);
    std::printf("bound sweep argmin alpha = %.6f (pi/4 = %.6f, step %.6f)\n", sweep.argmin_alpha(),
                std::numbers::pi / 4, sweep.grid_step);
    return 0;
}

int cmd_export(const RunConfig& rc) {
    const Checkpoint ck = load_run_checkpoint(rc);
    const fs::path out = prepare_out(rc);
    std::optional<TrialSet> data;
    if (!rc.dataset.empty()) data = load_trialset(rc.dataset);
    write_filters(out, ck, channel_names_for(rc, data ? &*data : nullptr, ck.hp.channels));
    std::printf("wrote %s and %s\n", (out / "filters.json").c_str(), (out / "filters.csv").c_str());
    return 0;
}

struct ConvertFlags {
    std::string input;
    std::string output;
    double fs_hz = 0.0;
    std::size_t channels = 0;
    std::vector<std::string> class_names;
    std::vector<std::string> channel_names;
    bool preprocess = false;
};

// CSV rows: label, then C*T values channel-major. Lines starting with '#' are skipped.
TrialSet read_trial_csv(const ConvertFlags& cf) {
    std::ifstream in(cf.input);
    if (!in) throw Error("cannot open " + cf.input);
    if (cf.channels < 2) throw ConfigError("convert: --channels >= 2 required");
    std::vector<std::size_t> labels;
    std::vector<double> values;
    std::size_t per_trial = 0;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        if (row.size() < 2) throw FormatError("convert: line " + std::to_string(line_no) + " has no samples", 0);
        if (per_trial == 0) per_trial = row.size() - 1;
        if (row.size() - 1 != per_trial || per_trial % cf.channels != 0)
            throw FormatError("convert: line " + std::to_string(line_no) + " has a bad value count", 0);
        labels.push_back(static_cast<std::size_t>(row[0]));
        values.insert(values.end(), row.begin() + 1, row.end());
    }
    if (labels.empty()) throw FormatError("convert: no trials in " + cf.input, 0);
    TrialSet ts;
    ts.trials = Tensor({labels.size(), cf.channels, per_trial / cf.channels}, std::move(values));
    ts.labels = std::move(labels);
    ts.fs_hz = cf.fs_hz;
    ts.class_names = cf.class_names;
    if (ts.class_names.empty()) {
        const std::size_t k = *std::max_element(ts.labels.begin(), ts.labels.end()) + 1;
        for (std::size_t c = 0; c < k; ++c) ts.class_names.push_back("class" + std::to_string(c));
    }
    if (!cf.channel_names.empty()) ts.metadata["channel_names"] = cf.channel_names;
    ts.metadata["source"] = cf.input;
    ts.validate();
    return ts;
}

int cmd_convert(const RunConfig& rc, const ConvertFlags& cf) {
    TrialSet ts = read_trial_csv(cf);
    if (cf.preprocess) ts = preprocess(ts, rc.preprocess);
    fs::path out(cf.output);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_trialset(ts, out);
    (void)load_trialset(out);
    std::printf("wrote %s (%zu trials, %zu channels, %zu samples)\n", out.c_str(), ts.n_trials(), ts.n_channels(),
                ts.n_samples());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"psynet: phase-synchrony decoding and analysis"};
    app.require_subcommand(1);
    Flags f;
    ConvertFlags cf;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic phase-locked dataset");
    add_common(synth, f);

    auto* train = app.add_subcommand("train", "Cross-validated training");
    add_common(train, f);
    train->add_option("--dataset", f.dataset, "EEGB1 dataset");
    train->add_flag("--phaser", f.phaser, "Enable the phase shifter");
    train->add_option("--epochs", f.epochs, "Epochs per fold");
    train->add_option("--folds", f.folds, "Cross-validation folds");
    train->add_option("--repeats", f.repeats, "Cross-validation repeats");
    train->add_option("--batch", f.batch, "Mini-batch size");

    auto* analyze = app.add_subcommand("analyze", "PLV report, filter export and bound sweep");
    add_common(analyze, f);
    analyze->add_option("--dataset", f.dataset, "EEGB1 dataset");
    analyze->add_option("--checkpoint", f.checkpoint, "PSNB1 checkpoint (default <out>/checkpoint.psnb)");

    auto* exp = app.add_subcommand("export", "Export learned spatial filters");
    add_common(exp, f);
    exp->add_option("--checkpoint", f.checkpoint, "PSNB1 checkpoint (default <out>/checkpoint.psnb)");
    exp->add_option("--dataset", f.dataset, "EEGB1 dataset (for channel names)");

    auto* convert = app.add_subcommand("convert", "Convert CSV trials to EEGB1");
    convert->add_option("--config", f.config, "JSON run configuration (preprocess settings)");
    convert->add_option("--input", cf.input, "CSV: label, then C*T values per row")->required();
    convert->add_option("--output", cf.output, "EEGB1 output path")->required();
    convert->add_option("--fs", cf.fs_hz, "Sampling rate in Hz")->required();
    convert->add_option("--channels", cf.channels, "Channel count C")->required();
    convert->add_option("--class-names", cf.class_names, "Class names in label order");
    convert->add_option("--channel-names", cf.channel_names, "Channel names");
    convert->add_flag("--preprocess", cf.preprocess, "Band-pass, scale and crop");

    CLI11_PARSE(app, argc, argv);

    try {
        const RunConfig rc = resolve(f);
        if (*synth) return cmd_synth(rc);
        if (*train) return cmd_train(rc);
        if (*analyze) return cmd_analyze(rc);
        if (*exp) return cmd_export(rc);
        if (*convert) return cmd_convert(rc, cf);
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}
