#include "hlgfa/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>

#include "hlgfa/conv.hpp"
#include "hlgfa/rng.hpp"

namespace hlgfa {
namespace {

constexpr double kMean[3] = {0.485, 0.456, 0.406};
constexpr double kStd[3] = {0.229, 0.224, 0.225};

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

void relu_inplace(Tensor& t) {
    for (double& v : t.values()) v = v > 0.0 ? v : 0.0;
}

Tensor crop(const Tensor& t, std::size_t height, std::size_t width) {
    if (t.height() == height && t.width() == width) return t;
    Tensor out = Tensor::chw(t.channels(), height, width);
    for (std::size_t c = 0; c < t.channels(); ++c)
        for (std::size_t y = 0; y < height; ++y)
            for (std::size_t x = 0; x < width; ++x) out.at(c, y, x) = t.at(c, y, x);
    return out;
}

struct ConvLayer {
    Tensor weight;
    Tensor bias;
    std::size_t stride = 1;
    conv::Padding padding = conv::Padding::zero;

    Tensor operator()(const Tensor& x) const { return conv::padded(x, weight, bias, stride, padding); }
};

Tensor max_pool_3x3_s2(const Tensor& x) {
    const std::size_t out_h = (x.height() - 1) / 2 + 1;
    const std::size_t out_w = (x.width() - 1) / 2 + 1;
    Tensor out = Tensor::chw(x.channels(), out_h, out_w);
    for (std::size_t c = 0; c < x.channels(); ++c) {
        for (std::size_t y = 0; y < out_h; ++y) {
            for (std::size_t xo = 0; xo < out_w; ++xo) {
                double best = -std::numeric_limits<double>::infinity();
                for (int dy = -1; dy <= 1; ++dy) {
                    const auto sy = static_cast<std::ptrdiff_t>(2 * y) + dy;
                    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(x.height())) continue;
                    for (int dx = -1; dx <= 1; ++dx) {
                        const auto sx = static_cast<std::ptrdiff_t>(2 * xo) + dx;
                        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(x.width())) continue;
                        best = std::max(best, x.at(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)));
                    }
                }
                out.at(c, y, xo) = best;
            }
        }
    }
    return out;
}

}  // namespace

class Backbone::Network {
public:
    virtual ~Network() = default;
    /// Stage features for a normalized, padded input.
    virtual std::vector<Tensor> forward(const Tensor& input) const = 0;
    virtual WeightsArchive weights() const = 0;
};

namespace {

class ReferenceNetwork final : public Backbone::Network {
public:
    ReferenceNetwork(const BackboneSpec& spec, const WeightsArchive& archive) {
        const auto bind = [&](const std::string& prefix, std::size_t stride) {
            return ConvLayer{archive.get(prefix + ".weight"), archive.get(prefix + ".bias"), stride, conv::Padding::reflect};
        };
        stem_ = bind("stem", 2);
        for (std::size_t s = 1; s <= spec.stage_channels.size(); ++s) {
            const std::string name = "stage" + std::to_string(s);
            stages_.push_back(Stage{bind(name + ".down", 2), bind(name + ".block.conv1", 1),
                                    bind(name + ".block.conv2", 1)});
        }
        weights_ = archive;
    }

    std::vector<Tensor> forward(const Tensor& input) const override {
        Tensor x = stem_(input);
        relu_inplace(x);
        std::vector<Tensor> outputs;
        for (const Stage& stage : stages_) {
            x = stage.down(x);
            relu_inplace(x);
            Tensor inner = stage.conv1(x);
            relu_inplace(inner);
            Tensor residual = stage.conv2(inner);
            x += residual;
            relu_inplace(x);
            outputs.push_back(x);
        }
        return outputs;
    }

    WeightsArchive weights() const override { return weights_; }

private:
    struct Stage {
        ConvLayer down, conv1, conv2;
    };
    ConvLayer stem_;
    std::vector<Stage> stages_;
    WeightsArchive weights_;
};

/// torchvision ResNet layout; batch norm folded into the preceding conv.
class TorchvisionResNet final : public Backbone::Network {
public:
    TorchvisionResNet(const BackboneSpec& spec, const WeightsArchive& archive) : weights_(archive) {
        std::set<std::string> used;
        const auto take = [&](const std::string& name) -> const Tensor& {
            used.insert(name);
            return archive.get(name);
        };
        const auto folded = [&](const std::string& conv, const std::string& bn, std::size_t stride) {
            Tensor w = take(conv + ".weight");
            const Tensor& gamma = take(bn + ".weight");
            const Tensor& beta = take(bn + ".bias");
            const Tensor& mean = take(bn + ".running_mean");
            const Tensor& var = take(bn + ".running_var");
            const std::size_t cout = w.dim(0);
            if (gamma.size() != cout || beta.size() != cout || mean.size() != cout || var.size() != cout) {
                throw std::runtime_error("backbone: batch-norm shape mismatch at '" + bn + "'");
            }
            const std::size_t per = w.size() / cout;
            Tensor b(Shape{cout});
            for (std::size_t c = 0; c < cout; ++c) {
                const double scale = gamma[c] / std::sqrt(var[c] + 1e-5);
                for (std::size_t i = 0; i < per; ++i) w[c * per + i] *= scale;
                b[c] = beta[c] - mean[c] * scale;
            }
            return ConvLayer{std::move(w), std::move(b), stride};
        };

        stem_ = folded("conv1", "bn1", 2);
        std::size_t deepest_layer = 0;
        for (std::size_t stride : spec.stage_strides) {
            std::size_t layer = 0;
            while (layer < 4 && (std::size_t{4} << layer) != stride) ++layer;
            ++layer;
            if (layer > 4) {
                throw std::invalid_argument("backbone: torchvision layout supports strides 4/8/16/32, got " +
                                            std::to_string(stride));
            }
            stage_layers_.push_back(layer);
            deepest_layer = std::max(deepest_layer, layer);
        }
        for (std::size_t layer = 1; layer <= deepest_layer; ++layer) {
            std::vector<Block> blocks;
            for (std::size_t i = 0;; ++i) {
                const std::string prefix = "layer" + std::to_string(layer) + "." + std::to_string(i);
                if (!archive.contains(prefix + ".conv1.weight")) break;
                const std::size_t stride = (i == 0 && layer > 1) ? 2 : 1;
                Block block;
                block.bottleneck = archive.contains(prefix + ".conv3.weight");
                if (block.bottleneck) {
                    block.convs.push_back(folded(prefix + ".conv1", prefix + ".bn1", 1));
                    block.convs.push_back(folded(prefix + ".conv2", prefix + ".bn2", stride));
                    block.convs.push_back(folded(prefix + ".conv3", prefix + ".bn3", 1));
                } else {
                    block.convs.push_back(folded(prefix + ".conv1", prefix + ".bn1", stride));
                    block.convs.push_back(folded(prefix + ".conv2", prefix + ".bn2", 1));
                }
                if (archive.contains(prefix + ".downsample.0.weight")) {
                    block.downsample = folded(prefix + ".downsample.0", prefix + ".downsample.1", stride);
                }
                blocks.push_back(std::move(block));
            }
            if (blocks.empty()) {
                throw std::runtime_error("backbone: archive has no blocks for layer" + std::to_string(layer));
            }
            layers_.push_back(std::move(blocks));
        }
        for (std::size_t s = 0; s < stage_layers_.size(); ++s) {
            const std::size_t channels = layers_[stage_layers_[s] - 1].back().convs.back().weight.dim(0);
            if (channels != spec.stage_channels[s]) {
                throw std::runtime_error("backbone: channel mismatch at stage " + std::to_string(s + 1) +
                                         ": archive has " + std::to_string(channels) + ", spec expects " +
                                         std::to_string(spec.stage_channels[s]));
            }
        }
        for (const auto& name : archive.names()) {
            if (!used.contains(name)) throw std::runtime_error("backbone: unknown tensor '" + name + "'");
        }
    }

    std::vector<Tensor> forward(const Tensor& input) const override {
        Tensor x = stem_(input);
        relu_inplace(x);
        x = max_pool_3x3_s2(x);
        std::vector<Tensor> layer_outputs;
        for (const auto& blocks : layers_) {
            for (const Block& block : blocks) {
                Tensor out = x;
                for (std::size_t i = 0; i < block.convs.size(); ++i) {
                    out = block.convs[i](out);
                    if (i + 1 < block.convs.size()) relu_inplace(out);
                }
                if (block.downsample) {
                    out += (*block.downsample)(x);
                } else {
                    out += x;
                }
                relu_inplace(out);
                x = std::move(out);
            }
            layer_outputs.push_back(x);
        }
        std::vector<Tensor> outputs;
        for (std::size_t layer : stage_layers_) outputs.push_back(layer_outputs[layer - 1]);
        return outputs;
    }

    WeightsArchive weights() const override { return weights_; }

private:
    struct Block {
        bool bottleneck = false;
        std::vector<ConvLayer> convs;
        std::optional<ConvLayer> downsample;
    };
    ConvLayer stem_;
    std::vector<std::vector<Block>> layers_;
    std::vector<std::size_t> stage_layers_;
    WeightsArchive weights_;
};

void check_reference_archive(const BackboneSpec& spec, const WeightsArchive& archive) {
    const auto layout = reference_layout(spec);
    std::set<std::string> expected;
    for (const auto& [name, shape] : layout) {
        expected.insert(name);
        if (!archive.contains(name)) throw std::runtime_error("backbone: archive is missing tensor '" + name + "'");
        if (archive.get(name).shape() != shape) {
            throw std::runtime_error("backbone: shape mismatch for '" + name + "': archive " +
                                     shape_string(archive.get(name).shape()) + ", expected " +
                                     shape_string(shape));
        }
    }
    for (const auto& name : archive.names()) {
        if (!expected.contains(name)) throw std::runtime_error("backbone: unknown tensor '" + name + "'");
    }
}

}  // namespace

void FeaturePyramid::validate() const {
    if (stages.empty()) throw std::invalid_argument("pyramid: no stages");
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const FeatureMap& stage = stages[i];
        if (stage.stage_index != static_cast<int>(i + 1)) {
            throw std::invalid_argument("pyramid: stage indices must run 1..n");
        }
        if (i > 0 && stage.stride <= stages[i - 1].stride) {
            throw std::invalid_argument("pyramid: strides must increase strictly");
        }
        if (stage.data.rank() != 3 || stage.data.height() != ceil_div(input_height, stage.stride) ||
            stage.data.width() != ceil_div(input_width, stage.stride)) {
            throw std::invalid_argument("pyramid: stage " + std::to_string(i + 1) + " shape " +
                                        shape_string(stage.data.shape()) + " breaks the stride law");
        }
        if (!stage.data.all_finite()) throw std::invalid_argument("pyramid: non-finite features");
    }
}

FeaturePyramid select_stages(const FeaturePyramid& pyramid, const std::vector<int>& stages) {
    FeaturePyramid out;
    out.backbone_id = pyramid.backbone_id;
    out.input_height = pyramid.input_height;
    out.input_width = pyramid.input_width;
    int next = 1;
    for (int s : stages) {
        if (s < 1 || s > static_cast<int>(pyramid.size())) {
            throw std::invalid_argument("select_stages: stage " + std::to_string(s) + " out of range");
        }
        FeatureMap map = pyramid.stages[static_cast<std::size_t>(s - 1)];
        map.stage_index = next++;
        out.stages.push_back(std::move(map));
    }
    return out;
}

void BackboneSpec::validate() const {
    if (stage_channels.size() != stage_strides.size() || stage_channels.size() < 2) {
        throw std::invalid_argument("backbone spec: need >= 2 stages with matching channels/strides");
    }
    for (std::size_t i = 0; i < stage_strides.size(); ++i) {
        if (stage_channels[i] == 0 || stage_strides[i] == 0) {
            throw std::invalid_argument("backbone spec: zero channels or stride");
        }
        if (i > 0 && stage_strides[i] <= stage_strides[i - 1]) {
            throw std::invalid_argument("backbone spec: strides must increase strictly");
        }
    }
    if (is_reference()) {
        for (std::size_t i = 0; i < stage_strides.size(); ++i) {
            if (stage_strides[i] != (std::size_t{4} << i)) {
                throw std::invalid_argument("backbone spec: reference layout needs strides 4, 8, 16, ...");
            }
        }
    }
}

std::pair<ImageTensor, ImageTensor> make_dual_views(const ImageTensor& image, double lr_factor) {
    if (!(lr_factor > 0.0 && lr_factor <= 1.0)) {
        throw std::invalid_argument("make_dual_views: lr_factor must lie in (0, 1], got " +
                                    std::to_string(lr_factor));
    }
    if (image.resolution != Resolution::high) {
        throw std::invalid_argument("make_dual_views: input must be a HIGH view");
    }
    const auto low_h = static_cast<std::size_t>(std::lround(static_cast<double>(image.height()) * lr_factor));
    const auto low_w = static_cast<std::size_t>(std::lround(static_cast<double>(image.width()) * lr_factor));
    if (low_h < kMinImageSide || low_w < kMinImageSide) {
        throw std::invalid_argument("make_dual_views: LOW view " + std::to_string(low_h) + "x" +
                                    std::to_string(low_w) + " is smaller than 32 pixels");
    }
    ImageTensor low{resize_antialiased(image.data, low_h, low_w), image.source_path, Resolution::low};
    return {image, std::move(low)};
}

std::vector<std::pair<std::string, Shape>> reference_layout(const BackboneSpec& spec) {
    std::vector<std::pair<std::string, Shape>> layout;
    const auto conv = [&](const std::string& prefix, std::size_t cout, std::size_t cin) {
        layout.emplace_back(prefix + ".weight", Shape{cout, cin, 3, 3});
        layout.emplace_back(prefix + ".bias", Shape{cout});
    };
    conv("stem", spec.stage_channels.front(), 3);
    std::size_t previous = spec.stage_channels.front();
    for (std::size_t s = 0; s < spec.stage_channels.size(); ++s) {
        const std::size_t c = spec.stage_channels[s];
        const std::string name = "stage" + std::to_string(s + 1);
        conv(name + ".down", c, previous);
        conv(name + ".block.conv1", c, c);
        conv(name + ".block.conv2", c, c);
        previous = c;
    }
    return layout;
}

WeightsArchive reference_weights(const BackboneSpec& spec, std::uint64_t seed) {
    Xorshift64Star rng(seed);
    WeightsArchive archive;
    for (const auto& [name, shape] : reference_layout(spec)) {
        Tensor t(shape);
        if (shape.size() == 4) {
            const double bound = std::sqrt(6.0 / static_cast<double>(shape[1] * shape[2] * shape[3]));
            for (double& v : t.values()) v = static_cast<double>(static_cast<float>(rng.uniform(-bound, bound)));
        }
        archive.put(name, std::move(t));
    }
    return archive;
}

Backbone::Backbone(BackboneSpec spec, std::shared_ptr<const Network> network, LoadReport report)
    : spec_(std::move(spec)), network_(std::move(network)), report_(report) {}

Backbone Backbone::create(const BackboneSpec& spec) {
    spec.validate();
    if (const auto* seeded = std::get_if<SeededWeights>(&spec.weights_source)) {
        if (!spec.is_reference()) {
            throw std::invalid_argument("backbone: seeded weights exist only for the reference layout");
        }
        return from_archive(spec, reference_weights(spec, seeded->seed));
    }
    return from_archive(spec, WeightsArchive::load(std::get<ArchiveWeights>(spec.weights_source).path));
}

Backbone Backbone::from_archive(const BackboneSpec& spec, const WeightsArchive& archive) {
    spec.validate();
    std::shared_ptr<const Network> network;
    if (spec.is_reference()) {
        check_reference_archive(spec, archive);
        network = std::make_shared<ReferenceNetwork>(spec, archive);
    } else {
        network = std::make_shared<TorchvisionResNet>(spec, archive);
    }
    return Backbone(spec, std::move(network), LoadReport{archive.size(), archive.total_elements()});
}

FeaturePyramid Backbone::extract(const ImageTensor& image) const {
    validate_image(image);
    const std::size_t h = image.height();
    const std::size_t w = image.width();
    const std::size_t step = spec_.largest_stride();
    Tensor x = reflect_pad_to(image.data, ceil_div(h, step) * step, ceil_div(w, step) * step);
    for (std::size_t c = 0; c < 3; ++c) {
        for (double& v : x.channel(c)) v = (v - kMean[c]) / kStd[c];
    }
    std::vector<Tensor> outputs = network_->forward(x);

    FeaturePyramid pyramid;
    pyramid.backbone_id = spec_.backbone_id;
    pyramid.input_height = h;
    pyramid.input_width = w;
    for (std::size_t s = 0; s < outputs.size(); ++s) {
        const std::size_t stride = spec_.stage_strides[s];
        pyramid.stages.push_back(
            FeatureMap{crop(outputs[s], ceil_div(h, stride), ceil_div(w, stride)), static_cast<int>(s + 1), stride});
    }
    pyramid.validate();
    return pyramid;
}

WeightsArchive Backbone::export_archive() const { return network_->weights(); }

std::uint64_t Backbone::weights_hash() const {
    const auto bytes = network_->weights().serialize();
    return fnv1a64(bytes);
}

FeaturePyramid extract_features(const ImageTensor& image, const Backbone& backbone) {
    return backbone.extract(image);
}

Backbone load_weights_archive(const std::filesystem::path& path, const BackboneSpec& spec) {
    return Backbone::from_archive(spec, WeightsArchive::load(path));
}

}  // namespace hlgfa
