#include "hlgfa/autodiff.hpp"

#include <cmath>
#include <stdexcept>

#include "hlgfa/conv.hpp"
#include "hlgfa/image.hpp"

namespace hlgfa::ad {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, false, false, {}});
    return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, true, false, {}});
    return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (const Var& v : inputs) {
        if (v.tape != this) throw std::logic_error("ad: mixing vars from different tapes");
        needs = needs || nodes_[v.id].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(backward) : Backward{}});
    return Var{this, nodes_.size() - 1};
}

void Tape::accumulate(Var v, const Tensor& grad) {
    Node& node = nodes_[v.id];
    if (!node.requires_grad) return;
    if (!node.has_grad) {
        node.grad = grad;
        node.has_grad = true;
    } else {
        node.grad += grad;
    }
}

void Tape::backward(Var scalar_output) {
    Node& out = nodes_[scalar_output.id];
    if (out.value.size() != 1) throw std::invalid_argument("ad: backward needs a scalar output");
    if (!out.requires_grad) return;
    accumulate(scalar_output, Tensor(out.value.shape(), 1.0));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.has_grad || !node.backward) continue;
        // The closure may append to other nodes' grads but never to this one.
        const Tensor grad = node.grad;
        node.backward(*this, grad);
    }
}

Tensor Tape::grad(Var v) const {
    const Node& node = nodes_[v.id];
    return node.has_grad ? node.grad : Tensor::zeros_like(node.value);
}

Var add(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "ad::add");
    Tensor out = a.value();
    out += b.value();
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var sub(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "ad::sub");
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        Tensor neg = g;
        neg *= -1.0;
        t.accumulate(b, neg);
    });
}

Var mul(Var a, Var b) {
    require_same_shape(a.value(), b.value(), "ad::mul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out = Tensor::zeros_like(av);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        if (t.requires_grad(a)) {
            Tensor ga = Tensor::zeros_like(g);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv[i];
            t.accumulate(a, ga);
        }
        if (t.requires_grad(b)) {
            Tensor gb = Tensor::zeros_like(g);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av[i];
            t.accumulate(b, gb);
        }
    });
}

Var mul_broadcast_channels(Var a, Var gate) {
    const Tensor& av = a.value();
    const Tensor& gv = gate.value();
    if (gv.rank() != 3 || gv.channels() != 1 || gv.height() != av.height() || gv.width() != av.width()) {
        throw std::invalid_argument("ad::mul_broadcast_channels: gate must be (1, H, W)");
    }
    const std::size_t plane = av.plane();
    Tensor out = Tensor::zeros_like(av);
    for (std::size_t c = 0; c < av.channels(); ++c) {
        for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = av[c * plane + i] * gv[i];
    }
    return a.tape->record(std::move(out), {a, gate}, [a, gate, plane](Tape& t, const Tensor& g) {
        const Tensor& av = a.value();
        const Tensor& gv = gate.value();
        if (t.requires_grad(a)) {
            Tensor ga = Tensor::zeros_like(g);
            for (std::size_t c = 0; c < av.channels(); ++c) {
                for (std::size_t i = 0; i < plane; ++i) ga[c * plane + i] = g[c * plane + i] * gv[i];
            }
            t.accumulate(a, ga);
        }
        if (t.requires_grad(gate)) {
            Tensor gg = Tensor::zeros_like(gv);
            for (std::size_t c = 0; c < av.channels(); ++c) {
                for (std::size_t i = 0; i < plane; ++i) gg[i] += g[c * plane + i] * av[c * plane + i];
            }
            t.accumulate(gate, gg);
        }
    });
}

Var sigmoid(Var a) {
    Tensor out = a.value();
    for (double& v : out.values()) v = 1.0 / (1.0 + std::exp(-v));
    Tensor activations = out;
    return a.tape->record(std::move(out), {a},
                          [a, activations = std::move(activations)](Tape& t, const Tensor& g) {
                              Tensor ga = Tensor::zeros_like(g);
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  const double s = activations[i];
                                  ga[i] = g[i] * s * (1.0 - s);
                              }
                              t.accumulate(a, ga);
                          });
}

Var scale(Var a, double factor) {
    Tensor out = a.value();
    out *= factor;
    return a.tape->record(std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
        Tensor ga = g;
        ga *= factor;
        t.accumulate(a, ga);
    });
}

Var concat_channels(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.height() != bv.height() || av.width() != bv.width()) {
        throw std::invalid_argument("ad::concat_channels: spatial mismatch");
    }
    Tensor out = Tensor::chw(av.channels() + bv.channels(), av.height(), av.width());
    std::copy(av.values().begin(), av.values().end(), out.data());
    std::copy(bv.values().begin(), bv.values().end(), out.data() + av.size());
    const std::size_t split = av.size();
    return a.tape->record(std::move(out), {a, b}, [a, b, split](Tape& t, const Tensor& g) {
        if (t.requires_grad(a)) {
            Tensor ga = Tensor::zeros_like(a.value());
            std::copy(g.data(), g.data() + split, ga.data());
            t.accumulate(a, ga);
        }
        if (t.requires_grad(b)) {
            Tensor gb = Tensor::zeros_like(b.value());
            std::copy(g.data() + split, g.data() + g.size(), gb.data());
            t.accumulate(b, gb);
        }
    });
}

Var slice_channels(Var a, std::size_t begin, std::size_t end) {
    const Tensor& av = a.value();
    if (begin >= end || end > av.channels()) throw std::invalid_argument("ad::slice_channels: bad range");
    const std::size_t plane = av.plane();
    Tensor out = Tensor::chw(end - begin, av.height(), av.width());
    std::copy(av.data() + begin * plane, av.data() + end * plane, out.data());
    return a.tape->record(std::move(out), {a}, [a, begin, plane](Tape& t, const Tensor& g) {
        Tensor ga = Tensor::zeros_like(a.value());
        std::copy(g.data(), g.data() + g.size(), ga.data() + begin * plane);
        t.accumulate(a, ga);
    });
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
    if (terms.empty() || terms.size() != weights.size()) {
        throw std::invalid_argument("ad::weighted_sum: need matching nonempty terms and weights");
    }
    Tape* tape = terms.front().tape;
    for (const Var& term : terms) {
        if (term.value().size() != 1) throw std::invalid_argument("ad::weighted_sum: terms must be scalars");
    }
    // Chain pairwise so every input is registered with the tape.
    Var acc = tape->record(Tensor(Shape{1}, weights[0] * terms[0].value()[0]), {terms[0]},
                           [v = terms[0], w = weights[0]](Tape& t, const Tensor& g) {
                               t.accumulate(v, Tensor(Shape{1}, w * g[0]));
                           });
    for (std::size_t i = 1; i < terms.size(); ++i) {
        const double value = acc.value()[0] + weights[i] * terms[i].value()[0];
        acc = tape->record(Tensor(Shape{1}, value), {acc, terms[i]},
                           [prev = acc, v = terms[i], w = weights[i]](Tape& t, const Tensor& g) {
                               t.accumulate(prev, g);
                               t.accumulate(v, Tensor(Shape{1}, w * g[0]));
                           });
    }
    return acc;
}

Var conv2d(Var input, Var weight, Var bias, std::size_t groups) {
    Tensor out = conv::reflect_same(input.value(), weight.value(), bias.value(), groups);
    return input.tape->record(std::move(out), {input, weight, bias},
                              [input, weight, bias, groups](Tape& t, const Tensor& g) {
                                  Tensor gi, gw, gb;
                                  conv::reflect_same_backward(
                                      input.value(), weight.value(), groups, g,
                                      t.requires_grad(input) ? &gi : nullptr,
                                      t.requires_grad(weight) ? &gw : nullptr,
                                      t.requires_grad(bias) ? &gb : nullptr);
                                  if (t.requires_grad(input)) t.accumulate(input, gi);
                                  if (t.requires_grad(weight)) t.accumulate(weight, gw);
                                  if (t.requires_grad(bias)) t.accumulate(bias, gb);
                              });
}

Var resize_bilinear(Var input, std::size_t height, std::size_t width) {
    const Tensor& iv = input.value();
    if (iv.height() == height && iv.width() == width) {
        return input.tape->record(iv, {input}, [input](Tape& t, const Tensor& g) { t.accumulate(input, g); });
    }
    AxisTaps rows = triangle_taps(iv.height(), height, false);
    AxisTaps cols = triangle_taps(iv.width(), width, false);
    Tensor out = resample(iv, rows, cols);
    return input.tape->record(std::move(out), {input},
                              [input, rows = std::move(rows), cols = std::move(cols)](Tape& t, const Tensor& g) {
                                  Tensor gi = resample_transpose(g, rows, cols);
                                  // Trailing input rows/cols that no tap touches get zero gradient.
                                  if (!gi.same_shape(input.value())) {
                                      Tensor full = Tensor::zeros_like(input.value());
                                      for (std::size_t c = 0; c < gi.channels(); ++c)
                                          for (std::size_t y = 0; y < gi.height(); ++y)
                                              for (std::size_t x = 0; x < gi.width(); ++x)
                                                  full.at(c, y, x) = gi.at(c, y, x);
                                      gi = std::move(full);
                                  }
                                  t.accumulate(input, gi);
                              });
}

Var standardize_channels(Var input, double eps) {
    const Tensor& iv = input.value();
    const std::size_t plane = iv.plane();
    const double n = static_cast<double>(plane);
    Tensor out = Tensor::zeros_like(iv);
    std::vector<double> stds(iv.channels());
    for (std::size_t c = 0; c < iv.channels(); ++c) {
        auto ch = iv.channel(c);
        double mean = 0.0;
        for (double v : ch) mean += v;
        mean /= n;
        double var = 0.0;
        for (double v : ch) var += (v - mean) * (v - mean);
        var /= n;
        stds[c] = std::sqrt(var);
        const double denom = stds[c] + eps;
        auto dst = out.channel(c);
        for (std::size_t i = 0; i < plane; ++i) dst[i] = (ch[i] - mean) / denom;
    }
    Tensor normalized = out;
    return input.tape->record(
        std::move(out), {input},
        [input, normalized = std::move(normalized), stds = std::move(stds), eps, n](Tape& t, const Tensor& g) {
            // y = (x - m) / (s + e). With z = (x - m), dy/dx applied to g:
            // g/(s+e) - mean(g)/(s+e) - z * sum(g*z) / (n * s * (s+e)^2)
            const Tensor& iv = input.value();
            Tensor gi = Tensor::zeros_like(iv);
            const std::size_t plane = iv.plane();
            for (std::size_t c = 0; c < iv.channels(); ++c) {
                const double s = stds[c];
                const double denom = s + eps;
                double g_mean = 0.0;
                double g_dot_z = 0.0;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double z = normalized[c * plane + i] * denom;
                    g_mean += g[c * plane + i];
                    g_dot_z += g[c * plane + i] * z;
                }
                g_mean /= n;
                const double coupling = s > 0.0 ? g_dot_z / (n * s * denom * denom) : 0.0;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double z = normalized[c * plane + i] * denom;
                    gi[c * plane + i] = (g[c * plane + i] - g_mean) / denom - z * coupling;
                }
            }
            t.accumulate(input, gi);
        });
}

}  // namespace hlgfa::ad
