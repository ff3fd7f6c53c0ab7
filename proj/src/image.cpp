#include "hlgfa/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hlgfa {

void validate_image(const ImageTensor& image) {
    const Tensor& t = image.data;
    if (t.rank() != 3 || t.channels() != 3) {
        throw std::invalid_argument("image must be 3 x H x W, got " + shape_string(t.shape()));
    }
    if (t.height() < kMinImageSide || t.width() < kMinImageSide) {
        throw std::invalid_argument("image " + shape_string(t.shape()) +
                                    " is smaller than 32 pixels on a side");
    }
    for (double v : t.values()) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
            throw std::invalid_argument("image values must be finite and within [0, 1]");
        }
    }
}

AxisTaps triangle_taps(std::size_t in, std::size_t out, bool antialias) {
    if (in == 0 || out == 0) throw std::invalid_argument("resample: zero-sized axis");
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    const double support = antialias ? std::max(1.0, scale) : 1.0;

    AxisTaps taps;
    taps.offsets.reserve(out + 1);
    taps.offsets.push_back(0);
    for (std::size_t i = 0; i < out; ++i) {
        const double center = (static_cast<double>(i) + 0.5) * scale - 0.5;
        const auto first = static_cast<std::ptrdiff_t>(std::ceil(center - support));
        const auto last = static_cast<std::ptrdiff_t>(std::floor(center + support));
        const std::size_t begin = taps.index.size();
        double total = 0.0;
        for (std::ptrdiff_t j = first; j <= last; ++j) {
            if (j < 0 || j >= static_cast<std::ptrdiff_t>(in)) continue;
            const double w = 1.0 - std::abs(static_cast<double>(j) - center) / support;
            if (w <= 0.0) continue;
            taps.index.push_back(static_cast<std::size_t>(j));
            taps.weight.push_back(w);
            total += w;
        }
        if (taps.index.size() == begin) {
            // Only reachable for degenerate sizes; fall back to the nearest sample.
            const auto j = static_cast<std::size_t>(
                std::clamp<std::ptrdiff_t>(std::lround(center), 0, static_cast<std::ptrdiff_t>(in) - 1));
            taps.index.push_back(j);
            taps.weight.push_back(1.0);
            total = 1.0;
        }
        for (std::size_t k = begin; k < taps.weight.size(); ++k) taps.weight[k] /= total;
        taps.offsets.push_back(taps.index.size());
    }
    return taps;
}

Tensor resample(const Tensor& chw, const AxisTaps& rows, const AxisTaps& cols) {
    const std::size_t channels = chw.channels();
    const std::size_t in_h = chw.height();
    const std::size_t in_w = chw.width();
    const std::size_t out_h = rows.out_size();
    const std::size_t out_w = cols.out_size();

    Tensor horizontal = Tensor::chw(channels, in_h, out_w);
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < in_h; ++y) {
            const double* src = chw.data() + (c * in_h + y) * in_w;
            double* dst = horizontal.data() + (c * in_h + y) * out_w;
            for (std::size_t x = 0; x < out_w; ++x) {
                double acc = 0.0;
                for (std::size_t k = cols.offsets[x]; k < cols.offsets[x + 1]; ++k) {
                    acc += cols.weight[k] * src[cols.index[k]];
                }
                dst[x] = acc;
            }
        }
    }

    Tensor result = Tensor::chw(channels, out_h, out_w);
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < out_h; ++y) {
            double* dst = result.data() + (c * out_h + y) * out_w;
            for (std::size_t k = rows.offsets[y]; k < rows.offsets[y + 1]; ++k) {
                const double w = rows.weight[k];
                const double* src = horizontal.data() + (c * in_h + rows.index[k]) * out_w;
                for (std::size_t x = 0; x < out_w; ++x) dst[x] += w * src[x];
            }
        }
    }
    return result;
}

Tensor resample_transpose(const Tensor& grad_out, const AxisTaps& rows, const AxisTaps& cols) {
    const std::size_t channels = grad_out.channels();
    const std::size_t out_h = rows.out_size();
    const std::size_t out_w = cols.out_size();
    std::size_t in_h = 0;
    std::size_t in_w = 0;
    for (std::size_t j : rows.index) in_h = std::max(in_h, j + 1);
    for (std::size_t j : cols.index) in_w = std::max(in_w, j + 1);

    Tensor vertical = Tensor::chw(channels, in_h, out_w);
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < out_h; ++y) {
            const double* src = grad_out.data() + (c * out_h + y) * out_w;
            for (std::size_t k = rows.offsets[y]; k < rows.offsets[y + 1]; ++k) {
                const double w = rows.weight[k];
                double* dst = vertical.data() + (c * in_h + rows.index[k]) * out_w;
                for (std::size_t x = 0; x < out_w; ++x) dst[x] += w * src[x];
            }
        }
    }

    Tensor result = Tensor::chw(channels, in_h, in_w);
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < in_h; ++y) {
            const double* src = vertical.data() + (c * in_h + y) * out_w;
            double* dst = result.data() + (c * in_h + y) * in_w;
            for (std::size_t x = 0; x < out_w; ++x) {
                for (std::size_t k = cols.offsets[x]; k < cols.offsets[x + 1]; ++k) {
                    dst[cols.index[k]] += cols.weight[k] * src[x];
                }
            }
        }
    }
    return result;
}

Tensor resize_bilinear(const Tensor& chw, std::size_t height, std::size_t width) {
    if (chw.height() == height && chw.width() == width) return chw;
    return resample(chw, triangle_taps(chw.height(), height, false),
                    triangle_taps(chw.width(), width, false));
}

Tensor resize_antialiased(const Tensor& chw, std::size_t height, std::size_t width) {
    if (chw.height() == height && chw.width() == width) return chw;
    return resample(chw, triangle_taps(chw.height(), height, true),
                    triangle_taps(chw.width(), width, true));
}

Tensor resize_nearest(const Tensor& chw, std::size_t height, std::size_t width) {
    if (height == 0 || width == 0) throw std::invalid_argument("resize_nearest: zero-sized target");
    Tensor out = Tensor::chw(chw.channels(), height, width);
    for (std::size_t c = 0; c < chw.channels(); ++c) {
        for (std::size_t y = 0; y < height; ++y) {
            const std::size_t sy = y * chw.height() / height;
            for (std::size_t x = 0; x < width; ++x) {
                out.at(c, y, x) = chw.at(c, sy, x * chw.width() / width);
            }
        }
    }
    return out;
}

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    if (n == 1) return 0;
    const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
    std::ptrdiff_t m = i % period;
    if (m < 0) m += period;
    if (m >= static_cast<std::ptrdiff_t>(n)) m = period - m;
    return static_cast<std::size_t>(m);
}

Tensor reflect_pad_to(const Tensor& chw, std::size_t height, std::size_t width) {
    if (height < chw.height() || width < chw.width()) {
        throw std::invalid_argument("reflect_pad_to: target smaller than input");
    }
    if (height == chw.height() && width == chw.width()) return chw;
    Tensor out = Tensor::chw(chw.channels(), height, width);
    for (std::size_t c = 0; c < chw.channels(); ++c) {
        for (std::size_t y = 0; y < height; ++y) {
            const std::size_t sy = reflect_index(static_cast<std::ptrdiff_t>(y), chw.height());
            for (std::size_t x = 0; x < width; ++x) {
                out.at(c, y, x) =
                    chw.at(c, sy, reflect_index(static_cast<std::ptrdiff_t>(x), chw.width()));
            }
        }
    }
    return out;
}

std::vector<unsigned char> to_rgb8(const Tensor& chw) {
    const std::size_t h = chw.height();
    const std::size_t w = chw.width();
    std::vector<unsigned char> out(h * w * 3);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(chw.at(std::min(c, chw.channels() - 1), y, x), 0.0, 1.0);
                out[(y * w + x) * 3 + c] = static_cast<unsigned char>(std::floor(v * 255.0 + 0.5));
            }
        }
    }
    return out;
}

}  // namespace hlgfa
