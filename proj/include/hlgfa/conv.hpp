#pragma once

#include <cstddef>

#include "hlgfa/tensor.hpp"

namespace hlgfa::conv {

/// Stride-1 "same" convolution with reflect padding (k / 2 on each side,
/// odd k). `weight` is (C_out, C_in / groups, k, k); `bias` is (C_out).
/// Supported groupings: groups == 1 (dense) and groups == C_in == C_out
/// (depthwise).
Tensor reflect_same(const Tensor& input, const Tensor& weight, const Tensor& bias,
                    std::size_t groups);

/// Gradients of `reflect_same`. Any output pointer may be null.
void reflect_same_backward(const Tensor& input, const Tensor& weight, std::size_t groups,
                           const Tensor& grad_output, Tensor* grad_input, Tensor* grad_weight,
                           Tensor* grad_bias);

enum class Padding { zero, reflect };

/// Dense convolution with padding k / 2 and the given stride; output side
/// is floor((n + 2 * (k / 2) - k) / stride) + 1.
Tensor padded(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              Padding padding);
inline Tensor zero_padded(const Tensor& input, const Tensor& weight, const Tensor& bias,
                          std::size_t stride) {
    return padded(input, weight, bias, stride, Padding::zero);
}

}  // namespace hlgfa::conv
