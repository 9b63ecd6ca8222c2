#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "psd/numkit.hpp"

namespace psd {

enum class RetrievalDirection { image_to_text, text_to_image };

std::string_view to_string(RetrievalDirection d) noexcept;

struct RetrievalReport {
    RetrievalDirection direction = RetrievalDirection::image_to_text;
    std::map<Index, double> recall_at;  // K -> percent
    double mean_rank = 0.0;
    std::vector<Index> ranks;           // 1-based rank of each query's partner
};

struct RetrievalPair {
    RetrievalReport image_to_text;
    RetrievalReport text_to_image;
};

/// Ranks each query's true partner (same row index) by descending dot product; ties go to
/// the lower index. Throws invalid-input for K = 0 or K > N.
RetrievalPair retrieval_eval(const Matrix& image, const Matrix& text, const IndexList& k_list);

/// Top-1 accuracy (percent) of argmax_k <v, prototype_k>, ties to the lower class.
double zero_shot_top1(const Matrix& image, const Matrix& prototypes,
                      const std::vector<std::uint32_t>& labels);

struct Histogram {
    double lo = -1.0;
    double hi = 1.0;
    std::vector<std::uint64_t> counts;

    double bin_width() const noexcept { return (hi - lo) / static_cast<double>(counts.size()); }
    double bin_center(Index b) const noexcept { return lo + (static_cast<double>(b) + 0.5) * bin_width(); }
};

/// Equal-width bins over [lo, hi]; a value on the upper edge (or beyond) lands in the last bin.
Histogram make_histogram(const std::vector<double>& values, Index bins, double lo = -1.0,
                         double hi = 1.0);

struct SimilarityStats {
    std::vector<double> positive_scores;  // diagonal of V T^T
    std::vector<double> negative_scores;  // off-diagonal, row-major
    Histogram positive_hist;
    Histogram negative_hist;

    double mean_positive() const noexcept;
    double mean_negative() const noexcept;
};

SimilarityStats similarity_stats(const Matrix& image, const Matrix& text, Index bins);

/// Two-column CSV (bin_center,count) of a histogram.
std::string histogram_csv(const Histogram& h);

// Linear probe: multinomial logistic regression trained with L-BFGS.

struct ProbeOptions {
    Index max_iters = 1000;
    Index history = 10;
    double l2 = 1e-4;
    double grad_tolerance = 1e-6;
};

struct ProbeResult {
    double test_accuracy = 0.0;   // percent
    double train_accuracy = 0.0;  // percent
    Index iterations = 0;
    Index fallback_steps = 0;     // iterations where the line search failed
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<double> loss_history;  // loss after each accepted iteration
};

/// Parameters are a (d + 1) x K matrix flattened row-major; the last row is the bias.
/// Loss = mean cross-entropy + l2 / 2 * ||weights||^2 (bias unregularized).
struct ProbeObjective {
    const Matrix& features;
    const std::vector<std::uint32_t>& labels;
    Index num_classes;
    double l2;

    Index parameter_count() const noexcept { return (features.cols() + 1) * num_classes; }
    double loss_and_grad(const std::vector<double>& params, std::vector<double>& grad) const;
    std::vector<std::uint32_t> predict(const Matrix& x, const std::vector<double>& params) const;
};

ProbeResult linear_probe(const Matrix& train_features, const std::vector<std::uint32_t>& train_labels,
                         const Matrix& test_features, const std::vector<std::uint32_t>& test_labels,
                         Index num_classes, const ProbeOptions& options = {});

} // namespace psd
