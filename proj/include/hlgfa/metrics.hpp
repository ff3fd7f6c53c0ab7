#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hlgfa/tensor.hpp"

namespace hlgfa {

struct ScoredSet {
    std::vector<double> scores;
    std::vector<int> labels;  // 0 or 1

    std::size_t positives() const;
    /// Throws std::invalid_argument on length mismatch, labels outside
    /// {0, 1}, non-finite scores, or (when asked) a missing class.
    void validate(bool need_positive, bool need_negative) const;
};

/// Score maps paired with binary masks of the same shape.
struct PixelScoredSet {
    std::vector<Tensor> maps;
    std::vector<Tensor> masks;
};

/// Mann-Whitney statistic via average ranks: P(pos > neg) + P(tie) / 2.
double auroc(const ScoredSet& set);

/// Sum over the descending sweep of (R_k - R_{k-1}) P_k, where each group of
/// equal scores enters at once.
double average_precision(const ScoredSet& set);

struct F1Result {
    double f1 = 0.0;
    double threshold = 0.0;
};

/// Best F1 of the rule score >= t over the distinct score values; among
/// equal F1 the lower threshold wins.
F1Result f1_optimal(const ScoredSet& set);

/// Labels of the 8-connected components of mask > 0.5 (0 = background,
/// 1..n = components, numbered in row-major order of first pixel).
std::vector<std::size_t> connected_components(const Tensor& mask, std::size_t& count);

/// Per-region overlap: over a descending threshold sweep, mean coverage of
/// every ground-truth component (pooled over the set) against the
/// false-positive rate on mask-free pixels. The curve starts at (0, 0),
/// is integrated by trapezoids up to fpr_limit (interpolating the last
/// segment) and divided by fpr_limit.
double pro_score(const PixelScoredSet& set, double fpr_limit = 0.3);

/// Every pixel of every map, with its mask value as label.
ScoredSet pool_pixels(const PixelScoredSet& set);

struct CategoryMetrics {
    std::string category;
    double auc_i = 0.0;
    double ap_i = 0.0;
    double f1_i = 0.0;
    double auc_p = 0.0;
    double ap_p = 0.0;
    double pro_p = 0.0;
    double f1_p = 0.0;
};

CategoryMetrics compute_category_metrics(const std::string& category, const ScoredSet& images,
                                         const PixelScoredSet& pixels, double fpr_limit = 0.3);

struct EvalReport {
    std::vector<CategoryMetrics> rows;

    /// Arithmetic mean of each column, category "AVERAGE".
    CategoryMetrics average() const;
    /// Columns: category, AUC-I, AP-I, F1-I, AUC-P, AP-P, PRO-P, F1-P; one row
    /// per category then AVERAGE.
    std::string to_csv() const;
    std::string to_json() const;
    void write(const std::filesystem::path& reports_dir) const;
};

}  // namespace hlgfa
