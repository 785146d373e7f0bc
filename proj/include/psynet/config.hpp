#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "psynet/dataio.hpp"
#include "psynet/errors.hpp"
#include "psynet/psnet.hpp"
#include "psynet/synchrony.hpp"
#include "psynet/trainer.hpp"

namespace psynet {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CropWindow, start_s, end_s)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PreprocessOptions, band_lo_hz, band_hi_hz, scale, crop, filter,
                                                filter_length, design)

/**
 * Everything a command needs, resolved from defaults, then the --config
 * file, then flags. Written verbatim next to every command's outputs.
 */
struct RunConfig {
    std::uint64_t seed = 1;
    std::string dataset;
    std::string out = "out";
    std::string checkpoint;  // analyze/export input; defaults to <out>/checkpoint.psnb
    bool reference_mode = false;
    // Take C, T, fs and F3 from the dataset instead of the hyperparameters below.
    bool fit_to_dataset = true;
    Hyperparams hyperparams{};
    CvProtocol cv{};
    SynthConfig synth{};
    PlvOptions plv{};
    PreprocessOptions preprocess{};
    bool apply_preprocess = false;  // convert only
    std::size_t bound_grid = 1000;
    double bound_g = 1.5;
    double bound_sx = 0.7;
    double bound_sy = 0.4;
    std::vector<std::string> channel_names{};
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, seed, dataset, out, checkpoint, reference_mode,
                                                fit_to_dataset, hyperparams, cv, synth, plv, preprocess,
                                                apply_preprocess, bound_grid, bound_g, bound_sx, bound_sy,
                                                channel_names)

/**
 * Settings for the desk-scale synthetic profile: the default SynthConfig
 * (8 channels, 6 sources, 4 classes, 1 s at 160 Hz) with a model sized to
 * match and 2-fold cross-validation.
 */
inline RunConfig synthetic_quick_profile() {
    RunConfig rc;
    auto& hp = rc.hyperparams;
    hp.channels = 8;
    hp.spatial_filters = 4;
    hp.bands = 15;
    hp.classes = 4;
    hp.fir_length = 33;
    hp.shifter_length = 9;
    hp.samples = 160;
    hp.fs_hz = 160.0;
    hp.epochs = 200;
    hp.batch_size = 16;
    hp.learning_rate = 1e-2;
    rc.cv.folds = 2;
    rc.cv.repeats = 1;
    return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    try {
        return json::parse(in).get<RunConfig>();
    } catch (const json::exception& e) {
        throw ConfigError("bad config file " + path.string() + ": " + e.what());
    }
}

}  // namespace psynet
