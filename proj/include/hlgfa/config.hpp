#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hlgfa/augment.hpp"
#include "hlgfa/backbone.hpp"
#include "hlgfa/guidance.hpp"
#include "hlgfa/objective.hpp"
#include "hlgfa/scoring.hpp"

namespace hlgfa {

struct OptimizerConfig {
    double learning_rate_start = 1e-3;
    double learning_rate_end = 1e-4;
    std::string schedule = "cosine_annealing";
    int epochs = 100;
    std::size_t batch_size = 32;
    /// Run seed: shuffling, augmentation and guidance initialization.
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    /// Per-sample forward/backward threads within a batch. Gradients are
    /// reduced in sample order, so the result does not depend on this.
    std::size_t workers = 1;
};

struct DatasetConfig {
    std::filesystem::path root;
    std::filesystem::path manifest;  // used instead of root when set
    std::vector<std::string> categories;
    bool unified = false;
};

struct RunConfig {
    BackboneSpec backbone;
    /// 1-based backbone stages fed to the alignment module.
    std::vector<int> stages{1, 2, 3};
    double lr_factor = 0.5;
    std::size_t image_size = 640;
    GuidanceConfig guidance;
    std::string loss_preset = "FULL";
    LossWeights loss;
    std::string js_normalization = "softmax";
    ScoreConfig score;
    double fpr_limit = 0.3;
    NoiseSpec augment;
    OptimizerConfig optimizer;
    DatasetConfig dataset;
    std::filesystem::path output_dir = "runs/default";
    HeatmapOptions heatmap;
    bool write_raw_maps = false;
    bool strict_determinism = false;
    std::string device = "cpu";

    /// Throws std::invalid_argument naming the offending key.
    void validate() const;

    /// Channel counts of the selected stages.
    std::vector<std::size_t> selected_channels() const;

    /// Sets the run seed and the seeds derived from it (augmentation and
    /// guidance initialization use the run seed directly).
    void apply_seed(std::uint64_t seed);
};

/// Reads an INI file, or JSON when the extension is .json. Both use the
/// section/key names of configs/default.ini; absent keys keep their
/// defaults. The result is validated.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& text, bool json);

/// Canonical JSON (every key, fixed order); parse_config(to_json(c), true)
/// reproduces c.
std::string to_json(const RunConfig& config);
std::string to_ini(const RunConfig& config);

/// FNV-1a of the canonical JSON with output_dir, device and worker count
/// blanked, i.e. of everything that affects results.
std::uint64_t config_hash(const RunConfig& config);

}  // namespace hlgfa
