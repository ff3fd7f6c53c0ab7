#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace hlgfa {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array of doubles. Feature maps use rank 3 (C, H, W);
/// convolution weights use rank 4 (C_out, C_in / groups, K, K).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor chw(std::size_t channels, std::size_t height, std::size_t width,
                      double fill = 0.0) {
        return Tensor({channels, height, width}, fill);
    }
    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    // Rank-3 accessors.
    std::size_t channels() const { return shape_.at(0); }
    std::size_t height() const { return shape_.at(1); }
    std::size_t width() const { return shape_.at(2); }
    std::size_t plane() const { return shape_.at(1) * shape_.at(2); }

    double* data() { return values_.data(); }
    const double* data() const { return values_.data(); }
    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    double& at(std::size_t c, std::size_t y, std::size_t x) {
        return values_[(c * shape_[1] + y) * shape_[2] + x];
    }
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return values_[(c * shape_[1] + y) * shape_[2] + x];
    }

    std::span<double> channel(std::size_t c) {
        return std::span<double>(values_).subspan(c * plane(), plane());
    }
    std::span<const double> channel(std::size_t c) const {
        return std::span<const double>(values_).subspan(c * plane(), plane());
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    void fill(double value);

    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(double scale);

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.values_ == b.values_;
    }

private:
    Shape shape_;
    std::vector<double> values_;
};

double max_abs_difference(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& t);

/// Throws std::invalid_argument naming `what` if the shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace hlgfa
