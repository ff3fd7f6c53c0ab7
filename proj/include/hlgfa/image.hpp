#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hlgfa/tensor.hpp"

namespace hlgfa {

enum class Resolution { high, low };

inline constexpr std::size_t kMinImageSide = 32;

/// RGB image, 3 x H x W with values in [0, 1].
struct ImageTensor {
    Tensor data;
    std::optional<std::string> source_path;
    Resolution resolution = Resolution::high;

    std::size_t height() const { return data.height(); }
    std::size_t width() const { return data.width(); }
};

/// Throws std::invalid_argument if the image breaks the ImageTensor
/// invariants (3 channels, both sides >= 32, finite values in [0, 1]).
void validate_image(const ImageTensor& image);

/// Per-output-sample list of (input index, weight) taps along one axis.
struct AxisTaps {
    std::vector<std::size_t> offsets;  // size out + 1, CSR-style
    std::vector<std::size_t> index;
    std::vector<double> weight;

    std::size_t out_size() const { return offsets.size() - 1; }
};

/// Triangle-filter taps mapping `in` samples onto `out` samples with
/// half-pixel centers (align_corners = false). With `antialias` the filter
/// support widens by in/out when shrinking; taps falling outside the input
/// are dropped and the rest renormalized. Without antialias (or when
/// enlarging) this is plain bilinear interpolation with edge clamping.
AxisTaps triangle_taps(std::size_t in, std::size_t out, bool antialias);

/// Separable resampling of every channel of a (C, H, W) tensor.
Tensor resample(const Tensor& chw, const AxisTaps& rows, const AxisTaps& cols);
/// Transpose of `resample`: scatters a gradient on the output grid back
/// onto the input grid.
Tensor resample_transpose(const Tensor& grad_out, const AxisTaps& rows, const AxisTaps& cols);

/// Bilinear, align_corners = false. Same size returns an exact copy.
Tensor resize_bilinear(const Tensor& chw, std::size_t height, std::size_t width);
/// Antialiased bilinear (triangle filter stretched by the shrink factor).
Tensor resize_antialiased(const Tensor& chw, std::size_t height, std::size_t width);
/// Nearest neighbour: source index floor(dst * in / out).
Tensor resize_nearest(const Tensor& chw, std::size_t height, std::size_t width);

/// Mirror index without repeating the edge sample (… 2 1 0 1 2 …),
/// valid for any offset and any n >= 1.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n);

/// Reflect-pads the bottom and right of every channel to the given size.
Tensor reflect_pad_to(const Tensor& chw, std::size_t height, std::size_t width);

/// Quantizes to 8 bits per channel (round half up) after clamping to [0, 1].
std::vector<unsigned char> to_rgb8(const Tensor& chw);

}  // namespace hlgfa
