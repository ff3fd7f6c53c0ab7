#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hlgfa/archive.hpp"
#include "hlgfa/autodiff.hpp"
#include "hlgfa/backbone.hpp"
#include "hlgfa/tensor.hpp"

namespace hlgfa {

/// Trainable tensors of one stage's guided alignment operator. Templated on
/// the slot type so the same layout serves stored values (Tensor) and tape
/// handles (ad::Var).
template <typename T>
struct StageTensors {
    // Structure prior: one depthwise conv per kernel size, summed, then 1x1.
    std::vector<T> structure_dw_weight;  // (C_src, 1, k, k)
    std::vector<T> structure_dw_bias;    // (C_src)
    T structure_proj_weight;             // (C_g, C_src, 1, 1)
    T structure_proj_bias;               // (C_g)
    // Detail prior: 3x3 depthwise spatial alignment, then 1x1 projection.
    T detail_dw_weight;                  // (C_s, 1, 3, 3)
    T detail_dw_bias;
    T detail_proj_weight;                // (C_g, C_s, 1, 1)
    T detail_proj_bias;
    // FiLM generator: 1x1 conv g -> [gamma ; beta].
    T film_weight;                       // (2 C_l, C_g, 1, 1)
    T film_bias;                         // (2 C_l)
    // Gated residual predictor on [g ; modulated].
    T gate_weight;                       // (1, C_g + C_l, 3, 3)
    T gate_bias;                         // (1)
    T residual_weight;                   // (C_l, C_g + C_l, 3, 3)
    T residual_bias;                     // (C_l)

    /// Visits every slot as (name, group, slot) in a fixed order. Groups are
    /// "structure_extractor", "detail_extractor", "film_generator" and
    /// "gate_predictor".
    template <typename Self, typename F>
    static void visit_impl(Self& self, F&& fn) {
        for (std::size_t i = 0; i < self.structure_dw_weight.size(); ++i) {
            const std::string k = std::to_string(i);
            fn("structure.dw" + k + ".weight", "structure_extractor", self.structure_dw_weight[i]);
            fn("structure.dw" + k + ".bias", "structure_extractor", self.structure_dw_bias[i]);
        }
        fn("structure.proj.weight", "structure_extractor", self.structure_proj_weight);
        fn("structure.proj.bias", "structure_extractor", self.structure_proj_bias);
        fn("detail.dw.weight", "detail_extractor", self.detail_dw_weight);
        fn("detail.dw.bias", "detail_extractor", self.detail_dw_bias);
        fn("detail.proj.weight", "detail_extractor", self.detail_proj_weight);
        fn("detail.proj.bias", "detail_extractor", self.detail_proj_bias);
        fn("film.weight", "film_generator", self.film_weight);
        fn("film.bias", "film_generator", self.film_bias);
        fn("gate.weight", "gate_predictor", self.gate_weight);
        fn("gate.bias", "gate_predictor", self.gate_bias);
        fn("residual.weight", "gate_predictor", self.residual_weight);
        fn("residual.bias", "gate_predictor", self.residual_bias);
    }
    template <typename F>
    void visit(F&& fn) { visit_impl(*this, fn); }
    template <typename F>
    void visit(F&& fn) const { visit_impl(*this, fn); }
};

using StageParams = StageTensors<Tensor>;
using StageVars = StageTensors<ad::Var>;

struct GuidanceConfig {
    std::vector<std::size_t> structure_kernels{3, 5, 7};
    double gate_bias_init = -2.0;
    double stabilize_eps = 1e-5;
    std::uint64_t init_seed = 0;
    /// One parameter set for every stage; needs equal stage channel counts.
    bool share_across_stages = false;
};

/// Structure prior for stage s comes from HR stage s + 1 (the deepest stage
/// uses itself); the detail prior comes from HR stage s. Guidance width C_g
/// equals the stage's channel count.
inline std::size_t structure_source(std::size_t stage, std::size_t stage_count) {
    return stage + 1 < stage_count ? stage + 1 : stage_count - 1;
}

/// All trainable state of the alignment module, one StageParams per stage.
class GuidanceParameters {
public:
    GuidanceParameters() = default;

    /// Fresh parameters for a pyramid with the given per-stage channel
    /// counts: depthwise/projection/gate weights He-uniform from the seed,
    /// FiLM at identity (weight 0, gamma bias 1, beta bias 0), gate bias
    /// `gate_bias_init`, residual branch zero so alignment starts as the
    /// identity correction.
    static GuidanceParameters initialize(const std::vector<std::size_t>& stage_channels,
                                         const GuidanceConfig& config);

    /// Stored parameter sets: one per stage, or a single one when shared.
    std::vector<StageParams>& stages() { return stages_; }
    const std::vector<StageParams>& stages() const { return stages_; }
    /// Parameters applied at pyramid stage s.
    const StageParams& stage(std::size_t s) const { return stages_[shared_ ? 0 : s]; }
    std::size_t stage_count() const { return stage_count_; }
    bool shared() const { return shared_; }
    const std::vector<std::size_t>& structure_kernels() const { return kernels_; }

    /// Visits every tensor as ("guidance/stage<s>/<name>", group, tensor),
    /// or "guidance/shared/<name>" when shared.
    void visit(const std::function<void(const std::string&, const std::string&, Tensor&)>& fn);
    void visit(const std::function<void(const std::string&, const std::string&, const Tensor&)>& fn) const;

    std::size_t parameter_count() const;
    bool all_finite() const;

    /// Stores every tensor under its "guidance/..." name. `dtype` defaults
    /// to F64 so checkpoints reload bit-exactly.
    void write_to(WeightsArchive& archive, DType dtype = DType::f64) const;
    static GuidanceParameters read_from(const WeightsArchive& archive,
                                        const std::vector<std::size_t>& stage_channels,
                                        const std::vector<std::size_t>& structure_kernels,
                                        bool share_across_stages = false);

private:
    std::vector<StageParams> stages_;
    std::vector<std::size_t> kernels_;
    std::size_t stage_count_ = 0;
    bool shared_ = false;
};

struct StructurePrior {
    Tensor data;  // (C_g, H_s, W_s)
};
struct DetailPrior {
    Tensor data;
};

struct GuidanceBundle {
    StructurePrior structure;
    DetailPrior detail;
    Tensor fused;       // structure + detail
    Tensor film_gamma;  // (C_l, H_s, W_s)
    Tensor film_beta;
};

// Tensor-level building blocks. align() composes exactly these.

FeatureMap upsample_to_match(const FeatureMap& lr_stage, const FeatureMap& hr_stage);
StructurePrior compute_structure_prior(const Tensor& hr_deep, const StageParams& params,
                                       std::size_t height, std::size_t width);
DetailPrior compute_detail_prior(const Tensor& hr_shallow, const StageParams& params,
                                 std::size_t height, std::size_t width);
GuidanceBundle fuse_guidance(const StructurePrior& structure, const DetailPrior& detail,
                             const StageParams& params);
/// Per-channel standardization applied to upsampled LR features before FiLM.
Tensor stabilize(const Tensor& lr_upsampled, double eps = 1e-5);
/// gamma * features + beta, elementwise.
Tensor film_modulate(const Tensor& features, const GuidanceBundle& bundle);
/// lr + sigmoid(gate_conv([g ; modulated])) * residual_conv([g ; modulated]).
Tensor gated_residual_refine(const Tensor& lr, const Tensor& modulated, const GuidanceBundle& bundle,
                             const StageParams& params);

struct AlignmentResult {
    std::vector<Tensor> aligned;  // shaped like the HR pyramid stages
    std::vector<GuidanceBundle> guidance;
};

/// Full guided alignment of an LR pyramid against its HR counterpart.
AlignmentResult align(const FeaturePyramid& lr, const FeaturePyramid& hr,
                      const GuidanceParameters& params, double stabilize_eps = 1e-5);

// Tape-level forms used for training.

StageVars bind_stage(ad::Tape& tape, const StageParams& params, bool trainable);
/// One StageVars per pyramid stage; shared parameters are bound once and
/// repeated, so their gradients sum over stages.
std::vector<StageVars> bind_parameters(ad::Tape& tape, const GuidanceParameters& params, bool trainable);
/// Reads the gradients of bound parameters back into parameter layout.
GuidanceParameters collect_gradients(const ad::Tape& tape, const std::vector<StageVars>& vars,
                                     const GuidanceParameters& like);

struct StageGraph {
    ad::Var structure, detail, fused, gamma, beta, modulated, aligned;
};

StageGraph align_stage(ad::Tape& tape, ad::Var lr_upsampled, ad::Var hr_stage, ad::Var hr_deep,
                       const StageVars& vars, double stabilize_eps);

/// Records the whole alignment on `tape`; returns one StageGraph per stage.
std::vector<StageGraph> align_on_tape(ad::Tape& tape, const FeaturePyramid& lr, const FeaturePyramid& hr,
                                      const std::vector<StageVars>& vars, double stabilize_eps);

}  // namespace hlgfa
