#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "hlgfa/tensor.hpp"

namespace hlgfa::ad {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
};

/// Wengert list for reverse-mode differentiation. Nodes are appended in
/// evaluation order, so a reverse sweep visits consumers before producers.
/// Nodes that do not depend on a parameter carry no backward closure.
class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var parameter(Tensor value);

    /// Appends a node computed from `inputs`. `backward` is kept only when
    /// some input requires a gradient.
    Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    /// Accumulates into the gradient of `v` (no-op for constants).
    void accumulate(Var v, const Tensor& grad);

    /// Seeds d(output)/d(output) = 1 for a scalar output and sweeps back.
    void backward(Var scalar_output);

    /// Gradient of `v` after backward(); zeros if nothing reached it.
    Tensor grad(Var v) const;

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool has_grad = false;
        Backward backward;
    };
    std::vector<Node> nodes_;
};

// Elementwise and structural ops. Shapes must match unless stated.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// (C, H, W) times (1, H, W), broadcast over channels.
Var mul_broadcast_channels(Var a, Var gate);
Var sigmoid(Var a);
Var scale(Var a, double factor);
Var concat_channels(Var a, Var b);
Var slice_channels(Var a, std::size_t begin, std::size_t end);
/// Sum of scalar (size-1) vars with coefficients.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

/// Reflect-padded stride-1 convolution; see conv::reflect_same.
Var conv2d(Var input, Var weight, Var bias, std::size_t groups);
/// Bilinear resize, align_corners = false.
Var resize_bilinear(Var input, std::size_t height, std::size_t width);
/// Per-channel standardization: (x - mean) / (std + eps), population std
/// over the spatial plane.
Var standardize_channels(Var input, double eps);

}  // namespace hlgfa::ad
