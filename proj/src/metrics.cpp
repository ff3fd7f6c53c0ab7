#include "hlgfa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace hlgfa {
namespace {

// Indices sorted by descending score; ties keep input order.
std::vector<std::size_t> descending_order(const std::vector<double>& scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

// Calls fn(tp, fp) after each group of equal scores in the descending sweep.
template <typename Fn>
void sweep_groups(const ScoredSet& set, Fn&& fn) {
    const auto order = descending_order(set.scores);
    double tp = 0.0, fp = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double s = set.scores[order[i]];
        while (i < order.size() && set.scores[order[i]] == s) {
            (set.labels[order[i]] == 1 ? tp : fp) += 1.0;
            ++i;
        }
        fn(s, tp, fp);
    }
}

std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

}  // namespace

std::size_t ScoredSet::positives() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

void ScoredSet::validate(bool need_positive, bool need_negative) const {
    if (scores.size() != labels.size()) throw std::invalid_argument("metrics: scores and labels differ in length");
    if (scores.empty()) throw std::invalid_argument("metrics: empty set");
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("metrics: labels must be 0 or 1");
        if (!std::isfinite(scores[i])) throw std::invalid_argument("metrics: non-finite score");
    }
    const std::size_t pos = positives();
    if (need_positive && pos == 0) throw std::invalid_argument("metrics: single-class input (no positives)");
    if (need_negative && pos == scores.size()) {
        throw std::invalid_argument("metrics: single-class input (no negatives)");
    }
}

double auroc(const ScoredSet& set) {
    set.validate(true, true);
    const std::size_t n = set.scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return set.scores[a] < set.scores[b]; });
    double rank_sum = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && set.scores[order[j]] == set.scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k) {
            if (set.labels[order[k]] == 1) rank_sum += avg_rank;
        }
        i = j;
    }
    const auto pos = static_cast<double>(set.positives());
    const double neg = static_cast<double>(n) - pos;
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double average_precision(const ScoredSet& set) {
    set.validate(true, false);
    const auto total_pos = static_cast<double>(set.positives());
    double ap = 0.0, prev_recall = 0.0;
    sweep_groups(set, [&](double, double tp, double fp) {
        const double recall = tp / total_pos;
        const double precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    });
    return ap;
}

F1Result f1_optimal(const ScoredSet& set) {
    set.validate(true, false);
    const auto total_pos = static_cast<double>(set.positives());
    F1Result best{-1.0, 0.0};
    sweep_groups(set, [&](double threshold, double tp, double fp) {
        const double f1 = 2.0 * tp / (tp + fp + total_pos);
        if (f1 >= best.f1) best = F1Result{f1, threshold};
    });
    return best;
}

std::vector<std::size_t> connected_components(const Tensor& mask, std::size_t& count) {
    const std::size_t h = mask.height();
    const std::size_t w = mask.width();
    std::vector<std::size_t> labels(h * w, 0);
    std::vector<std::size_t> stack;
    count = 0;
    for (std::size_t start = 0; start < h * w; ++start) {
        if (mask[start] <= 0.5 || labels[start] != 0) continue;
        labels[start] = ++count;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            const auto y = static_cast<std::ptrdiff_t>(p / w);
            const auto x = static_cast<std::ptrdiff_t>(p % w);
            for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
                for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
                    const std::ptrdiff_t ny = y + dy, nx = x + dx;
                    if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(h) ||
                        nx >= static_cast<std::ptrdiff_t>(w)) {
                        continue;
                    }
                    const auto q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
                    if (mask[q] > 0.5 && labels[q] == 0) {
                        labels[q] = count;
                        stack.push_back(q);
                    }
                }
            }
        }
    }
    return labels;
}

double pro_score(const PixelScoredSet& set, double fpr_limit) {
    if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw std::invalid_argument("pro_score: fpr_limit must be in (0, 1]");
    if (set.maps.size() != set.masks.size()) throw std::invalid_argument("pro_score: maps and masks differ in count");
    // Per pixel: score, and either the region it belongs to or -1 for background.
    std::vector<double> scores;
    std::vector<std::ptrdiff_t> region;
    std::vector<double> region_size;
    for (std::size_t i = 0; i < set.maps.size(); ++i) {
        require_same_shape(set.maps[i], set.masks[i], "pro_score");
        std::size_t count = 0;
        const auto labels = connected_components(set.masks[i], count);
        const std::size_t offset = region_size.size();
        region_size.resize(offset + count, 0.0);
        for (std::size_t p = 0; p < labels.size(); ++p) {
            scores.push_back(set.maps[i][p]);
            if (labels[p] == 0) {
                region.push_back(-1);
            } else {
                const std::size_t r = offset + labels[p] - 1;
                region.push_back(static_cast<std::ptrdiff_t>(r));
                region_size[r] += 1.0;
            }
        }
    }
    if (region_size.empty()) throw std::invalid_argument("pro_score: no anomalous pixels in the set");
    const auto negatives = static_cast<double>(std::count(region.begin(), region.end(), -1));
    if (negatives == 0.0) throw std::invalid_argument("pro_score: no normal pixels in the set");
    const auto regions = static_cast<double>(region_size.size());

    const auto order = descending_order(scores);
    double overlap_sum = 0.0, fp = 0.0;
    double prev_fpr = 0.0, prev_pro = 0.0, area = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s) {
            const std::ptrdiff_t r = region[order[i]];
            if (r < 0) {
                fp += 1.0;
            } else {
                overlap_sum += 1.0 / region_size[static_cast<std::size_t>(r)];
            }
            ++i;
        }
        const double fpr = fp / negatives;
        const double pro = overlap_sum / regions;
        if (fpr >= fpr_limit) {
            const double t = fpr > prev_fpr ? (fpr_limit - prev_fpr) / (fpr - prev_fpr) : 0.0;
            const double pro_at_limit = prev_pro + t * (pro - prev_pro);
            area += 0.5 * (prev_pro + pro_at_limit) * (fpr_limit - prev_fpr);
            return area / fpr_limit;
        }
        area += 0.5 * (prev_pro + pro) * (fpr - prev_fpr);
        prev_fpr = fpr;
        prev_pro = pro;
    }
    return area / fpr_limit;  // unreachable: the final point has fpr == 1
}

ScoredSet pool_pixels(const PixelScoredSet& set) {
    if (set.maps.size() != set.masks.size()) throw std::invalid_argument("pool_pixels: maps and masks differ in count");
    ScoredSet out;
    for (std::size_t i = 0; i < set.maps.size(); ++i) {
        require_same_shape(set.maps[i], set.masks[i], "pool_pixels");
        for (std::size_t p = 0; p < set.maps[i].size(); ++p) {
            out.scores.push_back(set.maps[i][p]);
            out.labels.push_back(set.masks[i][p] > 0.5 ? 1 : 0);
        }
    }
    return out;
}

CategoryMetrics compute_category_metrics(const std::string& category, const ScoredSet& images,
                                         const PixelScoredSet& pixels, double fpr_limit) {
    CategoryMetrics m;
    m.category = category;
    m.auc_i = auroc(images);
    m.ap_i = average_precision(images);
    m.f1_i = f1_optimal(images).f1;
    const ScoredSet pooled = pool_pixels(pixels);
    m.auc_p = auroc(pooled);
    m.ap_p = average_precision(pooled);
    m.f1_p = f1_optimal(pooled).f1;
    m.pro_p = pro_score(pixels, fpr_limit);
    return m;
}

CategoryMetrics EvalReport::average() const {
    CategoryMetrics avg;
    avg.category = "AVERAGE";
    if (rows.empty()) return avg;
    for (const CategoryMetrics& r : rows) {
        avg.auc_i += r.auc_i;
        avg.ap_i += r.ap_i;
        avg.f1_i += r.f1_i;
        avg.auc_p += r.auc_p;
        avg.ap_p += r.ap_p;
        avg.pro_p += r.pro_p;
        avg.f1_p += r.f1_p;
    }
    const auto n = static_cast<double>(rows.size());
    avg.auc_i /= n;
    avg.ap_i /= n;
    avg.f1_i /= n;
    avg.auc_p /= n;
    avg.ap_p /= n;
    avg.pro_p /= n;
    avg.f1_p /= n;
    return avg;
}

std::string EvalReport::to_csv() const {
    std::ostringstream out;
    out << "category,AUC-I,AP-I,F1-I,AUC-P,AP-P,PRO-P,F1-P\n";
    const auto row = [&](const CategoryMetrics& m) {
        out << m.category;
        for (double v : {m.auc_i, m.ap_i, m.f1_i, m.auc_p, m.ap_p, m.pro_p, m.f1_p}) out << ',' << format_number(v);
        out << '\n';
    };
    for (const CategoryMetrics& m : rows) row(m);
    row(average());
    return out.str();
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json doc;
    const auto row = [](const CategoryMetrics& m) {
        nlohmann::ordered_json j;
        j["category"] = m.category;
        j["AUC-I"] = m.auc_i;
        j["AP-I"] = m.ap_i;
        j["F1-I"] = m.f1_i;
        j["AUC-P"] = m.auc_p;
        j["AP-P"] = m.ap_p;
        j["PRO-P"] = m.pro_p;
        j["F1-P"] = m.f1_p;
        return j;
    };
    doc["categories"] = nlohmann::ordered_json::array();
    for (const CategoryMetrics& m : rows) doc["categories"].push_back(row(m));
    doc["average"] = row(average());
    return doc.dump(2);
}

void EvalReport::write(const std::filesystem::path& reports_dir) const {
    std::filesystem::create_directories(reports_dir);
    std::ofstream(reports_dir / "metrics.csv") << to_csv();
    std::ofstream(reports_dir / "metrics.json") << to_json() << '\n';
}

}  // namespace hlgfa
