#pragma once

#include <cstdint>
#include <vector>

#include "hlgfa/backbone.hpp"
#include "hlgfa/metrics.hpp"
#include "hlgfa/rng.hpp"
#include "hlgfa/tensor.hpp"

// Independent reference implementations used to check the library. They
// favour obviousness over speed and share no code with src/.
namespace hlgfa::testing {

Tensor random_tensor(const Shape& shape, Xorshift64Star& rng, double lo = -1.0, double hi = 1.0);

/// Random pyramid with the given (C, H, W) per stage and strides 4, 8, 16...
FeaturePyramid random_pyramid(const std::vector<Shape>& shapes, Xorshift64Star& rng, double lo = -1.0,
                              double hi = 1.0);

std::size_t mirror(long i, std::size_t n);

/// Stride-1 reflect-padded convolution by nested loops. groups is 1 or C.
Tensor naive_conv_reflect(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t groups);

/// Bilinear (align_corners = false, clamped edges) by the per-pixel formula.
Tensor naive_bilinear(const Tensor& input, std::size_t height, std::size_t width);

/// Triangle filter of support `scale` per output sample, renormalized over
/// in-range taps.
Tensor naive_antialiased(const Tensor& input, std::size_t height, std::size_t width);

/// Direct 2-D convolution with the truncated Gaussian, reflect borders.
Tensor naive_gaussian(const Tensor& map, double sigma);

/// Mean neighbour dot product of unit vectors over a k x k window.
Tensor naive_consistency(const Tensor& guidance, std::size_t k);

double pairwise_auroc(const std::vector<double>& scores, const std::vector<int>& labels);
/// Precision at each distinct threshold, weighted by the recall it adds.
double sweep_average_precision(const std::vector<double>& scores, const std::vector<int>& labels);
/// Best F1 over every distinct threshold, lowest threshold on ties.
std::pair<double, double> sweep_f1(const std::vector<double>& scores, const std::vector<int>& labels);

/// PRO by evaluating every distinct score as a threshold, components found
/// by a breadth-first labelling of its own.
double dense_pro(const PixelScoredSet& set, double fpr_limit);

}  // namespace hlgfa::testing
