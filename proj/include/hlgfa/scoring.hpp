#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "hlgfa/backbone.hpp"
#include "hlgfa/guidance.hpp"
#include "hlgfa/tensor.hpp"

namespace hlgfa {

enum class ImageReduction { max, top_k_mean };
enum class ReliabilitySource { deepest, mean_over_stages };

struct ScoreConfig {
    double tau = 0.5;
    double delta = 0.1;
    std::size_t neighborhood = 3;
    double smoothing_sigma = 4.0;
    bool reliability_enabled = true;
    ReliabilitySource reliability_source = ReliabilitySource::deepest;
    ImageReduction image_reduction = ImageReduction::max;
    std::size_t top_k = 1;
    /// Divide each stage's norm map by sqrt(C_s) before summing.
    bool normalize_by_channels = false;

    void validate() const;
};

/// Score fields are (1, H, W) tensors.
struct AnomalyMap {
    Tensor scores;                  // input resolution
    std::vector<Tensor> stage_maps;  // per-stage norms at stage resolution
    double image_score = 0.0;
};

struct ReliabilityMap {
    std::vector<Tensor> sim;  // per stage used, stage resolution, in [-1, 1]
    Tensor sim_upsampled;     // combined sim at map resolution
    Tensor modulation;        // sigmoid((sim - tau) / delta), in (0, 1)
};

/// Per stage: L2 norm over channels of (aligned - hr), bilinearly upsampled
/// to (height, width) and summed over stages.
AnomalyMap anomaly_map(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned, std::size_t height,
                       std::size_t width, bool normalize_by_channels = false);
AnomalyMap anomaly_map(const FeaturePyramid& hr, const std::vector<Tensor>& aligned,
                       bool normalize_by_channels = false);

/// Mean dot product between the unit-normalized guidance vector at each
/// location and those of its k x k neighbours (center excluded), with
/// reflect-padded borders. Returns (1, H, W).
Tensor structural_consistency_field(const Tensor& guidance, std::size_t neighborhood);

/// Reliability of an anomaly map of size (height, width) from the fused
/// guidance of each stage (deepest stage, or the mean over stages).
ReliabilityMap structural_consistency(const std::vector<GuidanceBundle>& guidance, const ScoreConfig& config,
                                      std::size_t height, std::size_t width);

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }
/// sigmoid((sim - tau) / delta).
double reliability_gate(double sim, double tau, double delta);

/// A'(x) = gate(sim(x)) * A(x). Stage maps are kept as they were.
AnomalyMap reliability_modulate(const AnomalyMap& map, const ReliabilityMap& reliability, const ScoreConfig& config);

/// Normalized discrete Gaussian with radius round(4 sigma). sigma > 0.
std::vector<double> gaussian_kernel(double sigma);
/// Separable Gaussian blur with reflect borders; sigma == 0 returns a copy.
Tensor gaussian_smooth(const Tensor& map, double sigma);
AnomalyMap postprocess_map(const AnomalyMap& map, const ScoreConfig& config);

/// MAX, or the mean of the top_k largest values.
double image_score(const Tensor& scores, const ScoreConfig& config);

struct ScoredImage {
    AnomalyMap map;  // post-processed, image_score filled in
    AnomalyMap raw;  // before modulation and smoothing
    ReliabilityMap reliability;
};

/// Full inference scoring: norm map -> reliability modulation (if enabled)
/// -> smoothing -> image score.
ScoredImage score_alignment(const FeaturePyramid& hr, const AlignmentResult& alignment, const ScoreConfig& config);

enum class HeatmapMode { per_image, global };

struct HeatmapOptions {
    HeatmapMode mode = HeatmapMode::per_image;
    double lo = 0.0;  // GLOBAL range
    double hi = 1.0;
};

/// Min-max normalizes to [0, 65535] (rounded). A flat PER_IMAGE map, or any
/// map under an empty GLOBAL range, maps to 0.
std::vector<std::uint16_t> heatmap_levels(const Tensor& scores, const HeatmapOptions& options);
void write_heatmap_png(const std::filesystem::path& path, const Tensor& scores, const HeatmapOptions& options);
/// Raw float64 score field in the HLGW archive format, under "anomaly_map".
void write_raw_map(const std::filesystem::path& path, const Tensor& scores);
Tensor read_raw_map(const std::filesystem::path& path);

}  // namespace hlgfa
