#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "hlgfa/archive.hpp"
#include "hlgfa/image.hpp"
#include "hlgfa/tensor.hpp"

namespace hlgfa {

/// One stage of a feature pyramid: (C_s, H_s, W_s) with
/// H_s = ceil(input_height / stride).
struct FeatureMap {
    Tensor data;
    int stage_index = 1;
    std::size_t stride = 1;
};

struct FeaturePyramid {
    std::vector<FeatureMap> stages;
    std::string backbone_id;
    std::size_t input_height = 0;
    std::size_t input_width = 0;

    std::size_t size() const { return stages.size(); }
    const Tensor& operator[](std::size_t i) const { return stages[i].data; }

    /// Checks stage numbering, stride ordering, the shape law and finiteness.
    void validate() const;
};

/// Keeps the listed 1-based stages and renumbers them from 1.
FeaturePyramid select_stages(const FeaturePyramid& pyramid, const std::vector<int>& stages);

struct SeededWeights {
    std::uint64_t seed = 0;
};
struct ArchiveWeights {
    std::filesystem::path path;
};
using WeightsSource = std::variant<SeededWeights, ArchiveWeights>;

inline constexpr const char* kReferenceBackboneId = "reference_resnet";

struct BackboneSpec {
    std::string backbone_id = kReferenceBackboneId;
    std::vector<std::size_t> stage_channels{16, 32, 64};
    std::vector<std::size_t> stage_strides{4, 8, 16};
    WeightsSource weights_source = SeededWeights{0};

    static BackboneSpec reference(std::uint64_t seed) {
        BackboneSpec spec;
        spec.weights_source = SeededWeights{seed};
        return spec;
    }

    bool is_reference() const { return backbone_id == kReferenceBackboneId; }
    std::size_t largest_stride() const { return stage_strides.back(); }
    void validate() const;
};

/// HIGH view is the input unchanged; LOW view is the antialiased bilinear
/// downsample to round(side * lr_factor). lr_factor == 1 yields a LOW view
/// identical to the input (used for identity checks).
std::pair<ImageTensor, ImageTensor> make_dual_views(const ImageTensor& image, double lr_factor);

struct LoadReport {
    std::size_t tensor_count = 0;
    std::size_t parameter_count = 0;
};

/// Frozen multi-stage extractor. Immutable after construction, so
/// concurrent extract() calls are safe.
///
/// Two layouts are understood:
///  - "reference_resnet": stem conv (stride 2) followed, per stage, by a
///    stride-2 downsampling conv and one residual block of two 3x3 convs,
///    all reflect-padded.
///    Stage strides must be 4, 8, 16, ... Weights come from a seed or an
///    archive with the names listed by reference_layout().
///  - any other id: a torchvision-style ResNet (basic or bottleneck blocks,
///    eval-mode batch norm folded at load) read from an archive exported
///    with tools/export_torchvision_backbone.py. Stage strides 4/8/16/32
///    map to layer1..layer4.
///
/// Inputs are normalized with the ImageNet mean (0.485, 0.456, 0.406) and
/// std (0.229, 0.224, 0.225), reflect-padded on the bottom/right to a
/// multiple of the largest stride, and stage outputs are cropped back to
/// ceil(side / stride).
class Backbone {
public:
    /// Builds from spec.weights_source.
    static Backbone create(const BackboneSpec& spec);
    static Backbone from_archive(const BackboneSpec& spec, const WeightsArchive& archive);

    FeaturePyramid extract(const ImageTensor& image) const;

    const BackboneSpec& spec() const { return spec_; }
    const LoadReport& load_report() const { return report_; }

    /// Weights in archive form (float32), e.g. for export-backbone.
    WeightsArchive export_archive() const;
    /// FNV-1a over the serialized weights.
    std::uint64_t weights_hash() const;

    class Network;

private:
    Backbone(BackboneSpec spec, std::shared_ptr<const Network> network, LoadReport report);

    BackboneSpec spec_;
    std::shared_ptr<const Network> network_;
    LoadReport report_;
};

FeaturePyramid extract_features(const ImageTensor& image, const Backbone& backbone);

/// Reads an archive from disk and binds it to `spec`. Errors name the
/// offending tensor (missing, unknown, shape mismatch) or report truncation.
Backbone load_weights_archive(const std::filesystem::path& path, const BackboneSpec& spec);

/// Tensor names and shapes of the reference layout, in seeding order.
std::vector<std::pair<std::string, Shape>> reference_layout(const BackboneSpec& spec);

/// Reference weights for a seed: each weight tensor in reference_layout()
/// order, row-major, drawn as U(-b, b) with b = sqrt(6 / fan_in) from one
/// Xorshift64Star(seed) stream and rounded to float32; biases are zero.
WeightsArchive reference_weights(const BackboneSpec& spec, std::uint64_t seed);

}  // namespace hlgfa
