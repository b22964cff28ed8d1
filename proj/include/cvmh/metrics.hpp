#pragma once

// Confusion matrix (rows: ground truth, columns: prediction) and the
// segmentation scores derived from it.

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "errors.hpp"

namespace cvmh {

class ConfusionMatrix {
   public:
    explicit ConfusionMatrix(std::size_t num_classes = 0) : K_(num_classes), counts_(num_classes * num_classes, 0) {}

    static ConfusionMatrix from_counts(std::size_t K, std::vector<std::uint64_t> counts) {
        if (counts.size() != K * K) throw ConfigError("confusion matrix needs K*K counts");
        ConfusionMatrix cm(K);
        cm.counts_ = std::move(counts);
        return cm;
    }

    void add(std::size_t truth, std::size_t pred, std::uint64_t n = 1) {
        if (truth >= K_ || pred >= K_) throw ConfigError("confusion matrix index out of range");
        counts_[truth * K_ + pred] += n;
    }

    /// Accumulates aligned label / prediction maps; pixels labelled ignore are skipped.
    void add(std::span<const std::int32_t> truth, std::span<const std::int32_t> pred, int ignore = -1) {
        if (truth.size() != pred.size()) throw ConfigError("truth / prediction size mismatch");
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (truth[i] == ignore) continue;
            add(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(pred[i]));
        }
    }

    void merge(const ConfusionMatrix& o) {
        if (o.K_ != K_) throw ConfigError("merging confusion matrices of different size");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    }

    std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * K_ + pred]; }
    std::size_t classes() const { return K_; }
    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts_) t += c;
        return t;
    }
    const std::vector<std::uint64_t>& counts() const { return counts_; }

   private:
    std::size_t K_;
    std::vector<std::uint64_t> counts_;
};

struct SegmentationMetrics {
    double oa = 0;
    double oa_literal = 0;  // trace / (K * total), the per-class-summed denominator
    double miou = 0;
    double mf1 = 0;           // mean of per-class F1
    double mf1_macro_pr = 0;  // F1 of macro precision and macro recall
    double macro_precision = 0, macro_recall = 0;
    std::vector<double> iou, f1, precision, recall;
    std::vector<std::uint64_t> support;  // ground-truth pixels per class
    std::vector<bool> evaluated;
    std::uint64_t total = 0;
};

/// Classes with no ground-truth support, or equal to ignore_index, are left
/// out of the means.
inline SegmentationMetrics compute_metrics(const ConfusionMatrix& cm, int ignore_index = -1) {
    const std::size_t K = cm.classes();
    SegmentationMetrics m;
    m.total = cm.total();
    if (K == 0 || m.total == 0) throw ConfigError("metrics of an empty confusion matrix");
    std::uint64_t trace = 0;
    for (std::size_t k = 0; k < K; ++k) trace += cm.at(k, k);
    m.oa = static_cast<double>(trace) / static_cast<double>(m.total);
    m.oa_literal = m.oa / static_cast<double>(K);
    m.iou.assign(K, 0);
    m.f1.assign(K, 0);
    m.precision.assign(K, 0);
    m.recall.assign(K, 0);
    m.support.assign(K, 0);
    m.evaluated.assign(K, false);
    std::size_t n_eval = 0;
    for (std::size_t k = 0; k < K; ++k) {
        std::uint64_t row = 0, col = 0;
        for (std::size_t j = 0; j < K; ++j) {
            row += cm.at(k, j);
            col += cm.at(j, k);
        }
        const double tp = static_cast<double>(cm.at(k, k));
        const double fn = static_cast<double>(row) - tp;
        const double fp = static_cast<double>(col) - tp;
        m.support[k] = row;
        m.iou[k] = tp + fp + fn > 0 ? tp / (tp + fp + fn) : 0.0;
        m.f1[k] = 2 * tp + fp + fn > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
        m.precision[k] = tp + fp > 0 ? tp / (tp + fp) : 0.0;
        m.recall[k] = tp + fn > 0 ? tp / (tp + fn) : 0.0;
        m.evaluated[k] = row > 0 && static_cast<int>(k) != ignore_index;
        if (!m.evaluated[k]) continue;
        ++n_eval;
        m.miou += m.iou[k];
        m.mf1 += m.f1[k];
        m.macro_precision += m.precision[k];
        m.macro_recall += m.recall[k];
    }
    if (n_eval > 0) {
        const double n = static_cast<double>(n_eval);
        m.miou /= n;
        m.mf1 /= n;
        m.macro_precision /= n;
        m.macro_recall /= n;
        const double pr = m.macro_precision + m.macro_recall;
        m.mf1_macro_pr = pr > 0 ? 2 * m.macro_precision * m.macro_recall / pr : 0.0;
    }
    return m;
}

inline nlohmann::json metrics_json(const SegmentationMetrics& m, const std::vector<std::string>& class_names = {}) {
    nlohmann::json per_class = nlohmann::json::array();
    for (std::size_t k = 0; k < m.iou.size(); ++k) {
        per_class.push_back({{"class", k},
                             {"name", k < class_names.size() ? class_names[k] : "class" + std::to_string(k)},
                             {"iou", m.iou[k]},
                             {"f1", m.f1[k]},
                             {"precision", m.precision[k]},
                             {"recall", m.recall[k]},
                             {"pixels", m.support[k]},
                             {"evaluated", static_cast<bool>(m.evaluated[k])}});
    }
    return {{"oa", m.oa},
            {"miou", m.miou},
            {"mf1", m.mf1},
            {"oa_literal", m.oa_literal},
            {"mf1_macro_pr", m.mf1_macro_pr},
            {"macro_precision", m.macro_precision},
            {"macro_recall", m.macro_recall},
            {"total_pixels", m.total},
            {"per_class", per_class}};
}

}  // namespace cvmh
