#include "hlgfa/conv.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "hlgfa/image.hpp"

namespace hlgfa::conv {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

// Upper bound on im2col scratch, in doubles (~32 MB).
constexpr std::size_t kColumnBudget = std::size_t{4} << 20;

struct Geometry {
    std::size_t in_channels, out_channels, height, width, kernel, pad;
};

Geometry check_reflect(const Tensor& input, const Tensor& weight, const Tensor& bias,
                       std::size_t groups) {
    if (input.rank() != 3) throw std::invalid_argument("conv: input must be (C, H, W)");
    if (weight.rank() != 4 || weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0) {
        throw std::invalid_argument("conv: weight must be (C_out, C_in/groups, k, k) with odd k, got " +
                                    shape_string(weight.shape()));
    }
    Geometry g{input.channels(), weight.dim(0), input.height(), input.width(), weight.dim(2),
               weight.dim(2) / 2};
    if (groups == 1) {
        if (weight.dim(1) != g.in_channels) {
            throw std::invalid_argument("conv: channel mismatch, input " + shape_string(input.shape()) +
                                        " weight " + shape_string(weight.shape()));
        }
    } else if (groups != g.in_channels || g.out_channels != g.in_channels || weight.dim(1) != 1) {
        throw std::invalid_argument("conv: only dense or depthwise grouping is supported");
    }
    if (bias.size() != g.out_channels) throw std::invalid_argument("conv: bias size mismatch");
    return g;
}

Tensor reflect_padded(const Tensor& input, std::size_t pad) {
    const std::size_t h = input.height() + 2 * pad;
    const std::size_t w = input.width() + 2 * pad;
    Tensor out = Tensor::chw(input.channels(), h, w);
    std::vector<std::size_t> cols(w);
    for (std::size_t x = 0; x < w; ++x) {
        cols[x] = reflect_index(static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(pad),
                                input.width());
    }
    for (std::size_t c = 0; c < input.channels(); ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            const std::size_t sy = reflect_index(
                static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(pad), input.height());
            for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = input.at(c, sy, cols[x]);
        }
    }
    return out;
}

// Adds a gradient on the padded grid back onto the unpadded input.
void fold_reflect(const Tensor& grad_padded, std::size_t pad, Tensor& grad_input) {
    for (std::size_t c = 0; c < grad_padded.channels(); ++c) {
        for (std::size_t y = 0; y < grad_padded.height(); ++y) {
            const std::size_t sy = reflect_index(
                static_cast<std::ptrdiff_t>(y) - static_cast<std::ptrdiff_t>(pad), grad_input.height());
            for (std::size_t x = 0; x < grad_padded.width(); ++x) {
                const std::size_t sx = reflect_index(
                    static_cast<std::ptrdiff_t>(x) - static_cast<std::ptrdiff_t>(pad), grad_input.width());
                grad_input.at(c, sy, sx) += grad_padded.at(c, y, x);
            }
        }
    }
}

std::size_t rows_per_chunk(std::size_t column_rows, std::size_t width, std::size_t height) {
    const std::size_t per_row = std::max<std::size_t>(1, column_rows * width);
    return std::clamp<std::size_t>(kColumnBudget / per_row, 1, height);
}

// im2col over output rows [y0, y1) of a stride-1 conv on a padded input.
void fill_columns(const Tensor& padded, const Geometry& g, std::size_t y0, std::size_t y1,
                  std::vector<double>& columns) {
    const std::size_t span = (y1 - y0) * g.width;
    columns.resize(g.in_channels * g.kernel * g.kernel * span);
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.in_channels; ++c) {
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
                double* dst = columns.data() + row * span;
                for (std::size_t y = y0; y < y1; ++y) {
                    const double* src = padded.data() + (c * padded.height() + y + ky) * padded.width() + kx;
                    std::copy(src, src + g.width, dst + (y - y0) * g.width);
                }
            }
        }
    }
}

}  // namespace

Tensor reflect_same(const Tensor& input, const Tensor& weight, const Tensor& bias,
                    std::size_t groups) {
    const Geometry g = check_reflect(input, weight, bias, groups);
    const Tensor padded = reflect_padded(input, g.pad);
    Tensor out = Tensor::chw(g.out_channels, g.height, g.width);
    const std::size_t k = g.kernel;

    if (groups != 1) {
        for (std::size_t c = 0; c < g.in_channels; ++c) {
            const double* w = weight.data() + c * k * k;
            for (std::size_t y = 0; y < g.height; ++y) {
                double* dst = out.data() + (c * g.height + y) * g.width;
                std::fill(dst, dst + g.width, bias[c]);
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const double* src = padded.data() + (c * padded.height() + y + ky) * padded.width();
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const double wv = w[ky * k + kx];
                        for (std::size_t x = 0; x < g.width; ++x) dst[x] += wv * src[x + kx];
                    }
                }
            }
        }
        return out;
    }

    const std::size_t column_rows = g.in_channels * k * k;
    const ConstMapMatrix w(weight.data(), static_cast<Eigen::Index>(g.out_channels),
                           static_cast<Eigen::Index>(column_rows));
    const std::size_t chunk = rows_per_chunk(column_rows, g.width, g.height);
    std::vector<double> columns;
    RowMatrix product;
    for (std::size_t y0 = 0; y0 < g.height; y0 += chunk) {
        const std::size_t y1 = std::min(g.height, y0 + chunk);
        const std::size_t span = (y1 - y0) * g.width;
        fill_columns(padded, g, y0, y1, columns);
        const ConstMapMatrix col(columns.data(), static_cast<Eigen::Index>(column_rows),
                                 static_cast<Eigen::Index>(span));
        product.noalias() = w * col;
        for (std::size_t c = 0; c < g.out_channels; ++c) {
            double* dst = out.data() + c * g.height * g.width + y0 * g.width;
            for (std::size_t i = 0; i < span; ++i) dst[i] = product(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i)) + bias[c];
        }
    }
    return out;
}

void reflect_same_backward(const Tensor& input, const Tensor& weight, std::size_t groups,
                           const Tensor& grad_output, Tensor* grad_input, Tensor* grad_weight,
                           Tensor* grad_bias) {
    const Tensor bias_shape(Shape{weight.dim(0)});
    const Geometry g = check_reflect(input, weight, bias_shape, groups);
    const std::size_t k = g.kernel;
    const std::size_t plane = g.height * g.width;

    if (grad_bias) {
        *grad_bias = Tensor(Shape{g.out_channels});
        for (std::size_t c = 0; c < g.out_channels; ++c) {
            double acc = 0.0;
            for (double v : grad_output.channel(c)) acc += v;
            (*grad_bias)[c] = acc;
        }
    }
    if (!grad_input && !grad_weight) return;

    const Tensor padded = reflect_padded(input, g.pad);
    Tensor grad_padded = Tensor::zeros_like(padded);
    if (grad_weight) *grad_weight = Tensor::zeros_like(weight);

    if (groups != 1) {
        for (std::size_t c = 0; c < g.in_channels; ++c) {
            const double* w = weight.data() + c * k * k;
            for (std::size_t y = 0; y < g.height; ++y) {
                const double* go = grad_output.data() + (c * g.height + y) * g.width;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const std::size_t prow = (c * padded.height() + y + ky) * padded.width();
                    const double* src = padded.data() + prow;
                    double* gsrc = grad_padded.data() + prow;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        if (grad_weight) {
                            double acc = 0.0;
                            for (std::size_t x = 0; x < g.width; ++x) acc += go[x] * src[x + kx];
                            (*grad_weight)[c * k * k + ky * k + kx] += acc;
                        }
                        if (grad_input) {
                            const double wv = w[ky * k + kx];
                            for (std::size_t x = 0; x < g.width; ++x) gsrc[x + kx] += wv * go[x];
                        }
                    }
                }
            }
        }
    } else {
        const std::size_t column_rows = g.in_channels * k * k;
        const ConstMapMatrix w(weight.data(), static_cast<Eigen::Index>(g.out_channels),
                               static_cast<Eigen::Index>(column_rows));
        const std::size_t chunk = rows_per_chunk(column_rows, g.width, g.height);
        std::vector<double> columns;
        RowMatrix grad_out_block;
        RowMatrix grad_columns;
        for (std::size_t y0 = 0; y0 < g.height; y0 += chunk) {
            const std::size_t y1 = std::min(g.height, y0 + chunk);
            const std::size_t span = (y1 - y0) * g.width;
            grad_out_block.resize(static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(span));
            for (std::size_t c = 0; c < g.out_channels; ++c) {
                const double* src = grad_output.data() + c * plane + y0 * g.width;
                for (std::size_t i = 0; i < span; ++i) grad_out_block(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i)) = src[i];
            }
            if (grad_weight) {
                fill_columns(padded, g, y0, y1, columns);
                const ConstMapMatrix col(columns.data(), static_cast<Eigen::Index>(column_rows),
                                         static_cast<Eigen::Index>(span));
                MapMatrix gw(grad_weight->data(), static_cast<Eigen::Index>(g.out_channels),
                             static_cast<Eigen::Index>(column_rows));
                gw.noalias() += grad_out_block * col.transpose();
            }
            if (grad_input) {
                grad_columns.noalias() = w.transpose() * grad_out_block;
                std::size_t row = 0;
                for (std::size_t c = 0; c < g.in_channels; ++c) {
                    for (std::size_t ky = 0; ky < k; ++ky) {
                        for (std::size_t kx = 0; kx < k; ++kx, ++row) {
                            for (std::size_t y = y0; y < y1; ++y) {
                                double* dst = grad_padded.data() +
                                              (c * padded.height() + y + ky) * padded.width() + kx;
                                for (std::size_t x = 0; x < g.width; ++x) {
                                    dst[x] += grad_columns(static_cast<Eigen::Index>(row),
                                                           static_cast<Eigen::Index>((y - y0) * g.width + x));
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    if (grad_input) {
        *grad_input = Tensor::zeros_like(input);
        fold_reflect(grad_padded, g.pad, *grad_input);
    }
}

Tensor padded(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              Padding padding) {
    if (input.rank() != 3 || weight.rank() != 4 || weight.dim(1) != input.channels() ||
        weight.dim(2) != weight.dim(3) || bias.size() != weight.dim(0) || stride == 0) {
        throw std::invalid_argument("conv: incompatible shapes input " + shape_string(input.shape()) +
                                    " weight " + shape_string(weight.shape()));
    }
    const std::size_t cin = input.channels();
    const std::size_t cout = weight.dim(0);
    const std::size_t k = weight.dim(2);
    const auto pad = static_cast<std::ptrdiff_t>(k / 2);
    const std::size_t out_h = (input.height() + 2 * (k / 2) - k) / stride + 1;
    const std::size_t out_w = (input.width() + 2 * (k / 2) - k) / stride + 1;
    const std::size_t column_rows = cin * k * k;
    Tensor out = Tensor::chw(cout, out_h, out_w);

    const ConstMapMatrix w(weight.data(), static_cast<Eigen::Index>(cout),
                           static_cast<Eigen::Index>(column_rows));
    const std::size_t chunk = rows_per_chunk(column_rows, out_w, out_h);
    std::vector<double> columns;
    RowMatrix product;
    for (std::size_t y0 = 0; y0 < out_h; y0 += chunk) {
        const std::size_t y1 = std::min(out_h, y0 + chunk);
        const std::size_t span = (y1 - y0) * out_w;
        columns.assign(column_rows * span, 0.0);
        std::size_t row = 0;
        for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx, ++row) {
                    double* dst = columns.data() + row * span;
                    for (std::size_t y = y0; y < y1; ++y) {
                        auto sy = static_cast<std::ptrdiff_t>(y * stride + ky) - pad;
                        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(input.height())) {
                            if (padding == Padding::zero) continue;
                            sy = static_cast<std::ptrdiff_t>(reflect_index(sy, input.height()));
                        }
                        for (std::size_t x = 0; x < out_w; ++x) {
                            auto sx = static_cast<std::ptrdiff_t>(x * stride + kx) - pad;
                            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(input.width())) {
                                if (padding == Padding::zero) continue;
                                sx = static_cast<std::ptrdiff_t>(reflect_index(sx, input.width()));
                            }
                            dst[(y - y0) * out_w + x] =
                                input.at(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
                        }
                    }
                }
            }
        }
        const ConstMapMatrix col(columns.data(), static_cast<Eigen::Index>(column_rows),
                                 static_cast<Eigen::Index>(span));
        product.noalias() = w * col;
        for (std::size_t c = 0; c < cout; ++c) {
            double* dst = out.data() + c * out_h * out_w + y0 * out_w;
            for (std::size_t i = 0; i < span; ++i) dst[i] = product(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i)) + bias[c];
        }
    }
    return out;
}

}  // namespace hlgfa::conv
