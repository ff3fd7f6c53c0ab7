#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hlgfa/autodiff.hpp"
#include "hlgfa/backbone.hpp"
#include "hlgfa/guidance.hpp"
#include "hlgfa/tensor.hpp"

namespace hlgfa {

struct LossWeights {
    double lambda_l1 = 0.5;
    double lambda_js = 0.5;
    double lambda_gram = 0.5;
    double lambda_cls = 0.0;  // no classification head; must stay 0
    double focal_gamma = 2.0;

    /// Throws std::invalid_argument on negative or non-finite values and on
    /// a nonzero lambda_cls.
    void validate() const;
};

enum class LossPreset { cosine, cosine_js, cosine_gram, cosine_l1, full };

/// COSINE (0, 0, 0), COSINE_JS (0, 0.1, 0), COSINE_GRAM (0, 0, 0.5),
/// COSINE_L1 (0.5, 0, 0), FULL (0.5, 0.5, 0.5) as (l1, js, gram).
LossWeights preset_weights(LossPreset preset);
std::string preset_name(LossPreset preset);
/// Accepts the upper-case names above, case-insensitively.
std::optional<LossPreset> parse_preset(const std::string& name);
inline constexpr LossPreset kAllPresets[] = {LossPreset::cosine, LossPreset::cosine_js, LossPreset::cosine_gram,
                                             LossPreset::cosine_l1, LossPreset::full};

struct LossReport {
    double align = 0.0;
    double l1 = 0.0;
    double js = 0.0;
    double gram = 0.0;
    double total = 0.0;
};

/// Stages of a pyramid as bare tensors.
std::vector<Tensor> stage_tensors(const FeaturePyramid& pyramid);

// Every loss averages a per-stage mean over the stages. Stage lists must
// have matching shapes.

/// 1 - cos(f_h, f_l) per location over the channel vector; the denominator
/// is max(|f_h| |f_l|, 1e-8), so an all-zero vector has similarity 0.
double cosine_align_loss(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned);
/// mean(w * |e|), e = aligned - hr, w = (|e| / (max|e| + 1e-12))^gamma per
/// stage, with 0^0 = 1. The weights carry no gradient.
double focal_l1_loss(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned, double focal_gamma);
/// JS divergence (natural log) between channel softmaxes per location.
double js_divergence_loss(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned);
/// |G_h - G_l|_F^2 / C^2 with G = F F^T / (H W).
double gram_loss(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned);
LossReport total_loss(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned,
                      const LossWeights& weights);

/// Focal weights for each stage as used by focal_l1_loss.
std::vector<Tensor> focal_weights(const std::vector<Tensor>& hr, const std::vector<Tensor>& aligned,
                                  double focal_gamma);

// Tape forms. Per-stage scalars are recorded as single nodes with analytic
// backward passes.

ad::Var cosine_stage(ad::Var hr, ad::Var aligned);
ad::Var focal_l1_stage(ad::Var hr, ad::Var aligned, const Tensor& weights);
ad::Var js_stage(ad::Var hr, ad::Var aligned);
ad::Var gram_stage(ad::Var hr, ad::Var aligned);

struct LossVars {
    ad::Var align, l1, js, gram, total;
};

/// Records the composite loss. `frozen_focal` replaces the focal weights
/// computed from the current residual (used to hold them fixed while
/// finite-differencing).
LossVars total_loss_on_tape(ad::Tape& tape, const std::vector<ad::Var>& hr, const std::vector<ad::Var>& aligned,
                            const LossWeights& weights, const std::vector<Tensor>* frozen_focal = nullptr);

struct AlignmentLoss {
    LossReport report;
    GuidanceParameters gradients;
    std::vector<Tensor> focal_weights;
};

/// align -> total_loss for one (LR, HR) pair, with gradients for every
/// guidance parameter.
AlignmentLoss alignment_loss(const FeaturePyramid& lr, const FeaturePyramid& hr, const GuidanceParameters& params,
                             const LossWeights& weights, double stabilize_eps = 1e-5,
                             const std::vector<Tensor>* frozen_focal = nullptr);

/// Loss value only, same conventions as alignment_loss.
LossReport alignment_loss_value(const FeaturePyramid& lr, const FeaturePyramid& hr, const GuidanceParameters& params,
                                const LossWeights& weights, double stabilize_eps = 1e-5,
                                const std::vector<Tensor>* frozen_focal = nullptr);

struct GradcheckOptions {
    double step = 1e-4;
    double tolerance = 1e-3;
    /// Relative error is |a - n| / max(|a|, |n|, denominator_floor).
    double denominator_floor = 1e-6;
    /// Coordinates checked per tensor, always including the one with the
    /// largest analytic gradient.
    std::size_t samples_per_tensor = 4;
    std::uint64_t seed = 0;
};

/// A tensor being checked: `value` is perturbed in place (and restored),
/// `analytic` holds the gradient under test.
struct GradcheckBlock {
    std::string name;
    std::string group;
    Tensor* value = nullptr;
    Tensor analytic;
};

struct GradcheckEntry {
    std::string name;
    std::string group;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double relative_error = 0.0;
};

struct GradcheckReport {
    double max_relative_error = 0.0;
    std::vector<GradcheckEntry> entries;
    std::vector<std::string> failing;  // names of tensors with an entry over tolerance
    bool passed = false;
};

/// Central differences of `loss_fn` (which reads the current block values)
/// against the analytic gradients. Throws std::runtime_error on a
/// non-finite analytic gradient.
GradcheckReport finite_difference_gradcheck(const std::function<double()>& loss_fn,
                                            std::vector<GradcheckBlock> blocks, const GradcheckOptions& options);

/// Gradcheck of the full align -> loss composition over every guidance
/// tensor. Focal weights are frozen at the unperturbed point. `params` is
/// restored on return.
GradcheckReport gradcheck_alignment(const FeaturePyramid& lr, const FeaturePyramid& hr, GuidanceParameters& params,
                                    const LossWeights& weights, const GradcheckOptions& options,
                                    double stabilize_eps = 1e-5);

}  // namespace hlgfa
