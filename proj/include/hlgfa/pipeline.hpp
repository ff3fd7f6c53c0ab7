#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "hlgfa/config.hpp"
#include "hlgfa/data.hpp"
#include "hlgfa/guidance.hpp"
#include "hlgfa/metrics.hpp"
#include "hlgfa/objective.hpp"
#include "hlgfa/scoring.hpp"

namespace hlgfa {

/// lr(e) = end + (start - end) (1 + cos(pi e / E)) / 2.
double cosine_learning_rate(double start, double end, int epoch, int epochs);

/// Adam with bias correction; moments shaped like the parameters.
class Adam {
public:
    Adam() = default;
    Adam(const GuidanceParameters& like, double beta1, double beta2, double epsilon);

    void step(GuidanceParameters& params, const GuidanceParameters& grads, double learning_rate);

    std::uint64_t steps() const { return t_; }
    const GuidanceParameters& first_moment() const { return m_; }
    const GuidanceParameters& second_moment() const { return v_; }
    void restore(GuidanceParameters m, GuidanceParameters v, std::uint64_t steps);

private:
    GuidanceParameters m_, v_;
    double beta1_ = 0.9, beta2_ = 0.999, epsilon_ = 1e-8;
    std::uint64_t t_ = 0;
};

struct Checkpoint {
    GuidanceParameters params;
    /// Result-affecting configuration (output_dir, device, workers and the
    /// determinism flag blanked), as hashed by config_hash.
    RunConfig config;
    int epoch = 0;  // epochs completed
    std::string loss_history_digest;
    std::string model_name;
    Adam optimizer;
};

/// HLGW archive: guidance tensors and Adam moments in F64, metadata with
/// the config snapshot (JSON), epoch, config hash, loss digest and Adam
/// step count.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Loads the frozen backbone described by the config.
Backbone make_backbone(const RunConfig& config);

/// Extracts and keeps the configured stages.
FeaturePyramid extract_selected(const Backbone& backbone, const ImageTensor& image, const RunConfig& config);

struct StepLog {
    std::size_t step = 0;
    int epoch = 0;
    LossReport loss;
    double learning_rate = 0.0;
};

struct TrainOptions {
    std::ostream* log = nullptr;
    /// Continue from this checkpoint; its config hash must match.
    std::optional<std::filesystem::path> resume_from;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<StepLog> steps;
    std::vector<double> epoch_mean_total;
    std::uint64_t backbone_hash_before = 0;
    std::uint64_t backbone_hash_after = 0;
    std::filesystem::path checkpoint_path;  // latest.hlgw
};

/// Name of the model trained for a category ("unified" in unified mode).
std::string model_name(const RunConfig& config, const std::string& category);
std::filesystem::path checkpoint_dir(const RunConfig& config, const std::string& model);
std::filesystem::path loss_log_path(const RunConfig& config, const std::string& model);

/// Trains on normal samples of `samples`: per epoch a seeded shuffle, then
/// per batch paired_augment -> frozen extraction -> align -> total loss,
/// gradients averaged over the batch and one Adam step with the epoch's
/// cosine-annealed rate. Writes checkpoints/<model>/epoch_NNN.hlgw and
/// latest.hlgw each epoch and appends logs/<model>/loss.csv. A non-finite
/// loss writes logs/<model>/nonfinite_dump.json and throws.
TrainResult train(const RunConfig& config, const std::vector<TrainSample>& samples, const std::string& model,
                  const TrainOptions& options = {});

/// Dataset index from dataset.manifest or dataset.root.
DatasetIndex open_dataset(const RunConfig& config);

/// Trains every model the config asks for (one per category, or a single
/// unified model).
std::vector<TrainResult> train_all(const RunConfig& config, const TrainOptions& options = {});

struct ImagePrediction {
    ScoredImage scored;
    FeaturePyramid hr;
};

/// Dual views (no augmentation) -> pyramids -> align -> scoring.
ImagePrediction score_image(const Backbone& backbone, const GuidanceParameters& params, const RunConfig& config,
                            const ImageTensor& image);

struct CategoryEvaluation {
    CategoryMetrics metrics;
    std::vector<double> image_scores;
    std::vector<int> labels;
    std::vector<Tensor> maps;  // post-processed maps at image_size
};

/// Scores every test item of the category with the given parameters.
/// Throws std::runtime_error when every image score is identical (a
/// degenerate model) or an anomalous item has no mask.
CategoryEvaluation evaluate_category(const Backbone& backbone, const GuidanceParameters& params,
                                     const RunConfig& config, const CategoryIndex& category);

/// Loads checkpoints/<model>/latest.hlgw for each category, evaluates,
/// writes reports/metrics.{csv,json} and returns the report.
EvalReport evaluate(const RunConfig& config, std::ostream* log = nullptr);

struct PredictResult {
    double image_score = 0.0;
    std::filesystem::path heatmap_path;
    std::optional<std::filesystem::path> raw_map_path;
};

/// Writes <out_dir>/<stem>_heatmap.png (16-bit) and, when configured,
/// <stem>_map.hlgw with the raw scores. Creates out_dir.
PredictResult predict(const Checkpoint& checkpoint, const RunConfig& config, const std::filesystem::path& image_path,
                      const std::filesystem::path& out_dir);

/// Writes the seeded reference backbone to an HLGW archive.
void export_reference_backbone(std::uint64_t seed, const std::filesystem::path& path,
                               const BackboneSpec& spec = BackboneSpec::reference(0));

/// Writes <stem>_before.png and <stem>_after_<i>_{high,low}.png for `count`
/// augmentation draws with the noise always applied.
std::vector<std::filesystem::path> augment_preview(const RunConfig& config, const std::filesystem::path& image_path,
                                                   const std::filesystem::path& out_dir, std::size_t count);

/// Guidance parameters with every tensor shifted by U(-scale, scale), so
/// that all parameter groups receive nonzero gradients.
GuidanceParameters perturbed_parameters(const GuidanceParameters& params, std::uint64_t seed, double scale);

/// Deterministic smooth RGB test image in [0, 1].
ImageTensor synthetic_probe_image(std::size_t height, std::size_t width, std::uint64_t seed);

/// Gradient check of the full align -> loss composition on a 64 x 64 probe
/// image through the configured backbone with the given preset.
GradcheckReport run_alignment_gradcheck(const RunConfig& config, LossPreset preset, const GradcheckOptions& options,
                                        std::size_t image_side = 64);

}  // namespace hlgfa
