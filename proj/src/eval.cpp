#include "psd/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

namespace psd {

std::string_view to_string(RetrievalDirection d) noexcept {
    return d == RetrievalDirection::image_to_text ? "image_to_text" : "text_to_image";
}

namespace {

// Rank of column `target` within `scores`, 1-based, lower index wins ties.
Index rank_of(std::span<const double> scores, Index target) {
    const double s = scores[target];
    Index rank = 1;
    for (Index j = 0; j < scores.size(); ++j) {
        if (scores[j] > s || (scores[j] == s && j < target)) {
            ++rank;
        }
    }
    return rank;
}

RetrievalReport summarize(RetrievalDirection dir, std::vector<Index> ranks, const IndexList& k_list) {
    RetrievalReport report;
    report.direction = dir;
    const double n = static_cast<double>(ranks.size());
    double rank_sum = 0.0;
    for (Index r : ranks) {
        rank_sum += static_cast<double>(r);
    }
    report.mean_rank = rank_sum / n;
    for (Index k : k_list) {
        const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](Index r) { return r <= k; });
        report.recall_at[k] = 100.0 * static_cast<double>(hits) / n;
    }
    report.ranks = std::move(ranks);
    return report;
}

} // namespace

RetrievalPair retrieval_eval(const Matrix& image, const Matrix& text, const IndexList& k_list) {
    require_same_shape(image, text, "retrieval_eval");
    const Index n = image.rows();
    require(n > 0, ErrorCode::empty_batch, "retrieval_eval: no pairs");
    for (Index k : k_list) {
        require(k >= 1 && k <= n, ErrorCode::invalid_input,
                "retrieval_eval: K = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    }
    const Matrix sims = matmul_transposed(image, text);
    const Matrix sims_t = transpose(sims);
    std::vector<Index> i2t(n), t2i(n);
    for (Index q = 0; q < n; ++q) {
        i2t[q] = rank_of(sims.row(q), q);
        t2i[q] = rank_of(sims_t.row(q), q);
    }
    return {summarize(RetrievalDirection::image_to_text, std::move(i2t), k_list),
            summarize(RetrievalDirection::text_to_image, std::move(t2i), k_list)};
}

double zero_shot_top1(const Matrix& image, const Matrix& prototypes,
                      const std::vector<std::uint32_t>& labels) {
    require(image.cols() == prototypes.cols(), ErrorCode::invalid_input,
            "zero_shot_top1: embedding widths differ");
    require(labels.size() == image.rows(), ErrorCode::invalid_input,
            "zero_shot_top1: one label per image required");
    require(image.rows() > 0 && prototypes.rows() > 0, ErrorCode::invalid_input,
            "zero_shot_top1: empty input");
    const Index k = prototypes.rows();
    Index correct = 0;
    for (Index i = 0; i < image.rows(); ++i) {
        require(labels[i] < k, ErrorCode::invalid_input,
                "zero_shot_top1: label " + std::to_string(labels[i]) + " out of range");
        Index best = 0;
        double best_score = dot(image.row(i), prototypes.row(0));
        for (Index c = 1; c < k; ++c) {
            const double s = dot(image.row(i), prototypes.row(c));
            if (s > best_score) {
                best = c;
                best_score = s;
            }
        }
        correct += best == labels[i] ? 1 : 0;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(image.rows());
}

Histogram make_histogram(const std::vector<double>& values, Index bins, double lo, double hi) {
    require(bins >= 1, ErrorCode::invalid_input, "histogram: bins must be >= 1");
    require(hi > lo, ErrorCode::invalid_input, "histogram: empty range");
    Histogram h{lo, hi, std::vector<std::uint64_t>(bins, 0)};
    const double width = h.bin_width();
    for (double v : values) {
        const double pos = std::floor((v - lo) / width);
        Index b = 0;
        if (pos >= static_cast<double>(bins)) {
            b = bins - 1;
        } else if (pos > 0.0) {
            b = static_cast<Index>(pos);
        }
        ++h.counts[b];
    }
    return h;
}

double SimilarityStats::mean_positive() const noexcept {
    if (positive_scores.empty()) return 0.0;
    return std::accumulate(positive_scores.begin(), positive_scores.end(), 0.0) /
           static_cast<double>(positive_scores.size());
}

double SimilarityStats::mean_negative() const noexcept {
    if (negative_scores.empty()) return 0.0;
    return std::accumulate(negative_scores.begin(), negative_scores.end(), 0.0) /
           static_cast<double>(negative_scores.size());
}

SimilarityStats similarity_stats(const Matrix& image, const Matrix& text, Index bins) {
    require(bins >= 1, ErrorCode::invalid_input, "similarity_stats: bins must be >= 1");
    require_same_shape(image, text, "similarity_stats");
    const Matrix sims = matmul_transposed(image, text);
    SimilarityStats stats;
    const Index n = sims.rows();
    stats.positive_scores.reserve(n);
    stats.negative_scores.reserve(n * (n > 0 ? n - 1 : 0));
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < n; ++j) {
            (i == j ? stats.positive_scores : stats.negative_scores).push_back(sims(i, j));
        }
    }
    stats.positive_hist = make_histogram(stats.positive_scores, bins);
    stats.negative_hist = make_histogram(stats.negative_scores, bins);
    return stats;
}

std::string histogram_csv(const Histogram& h) {
    std::string out = "bin_center,count\n";
    char buf[64];
    for (Index b = 0; b < h.counts.size(); ++b) {
        const auto res = std::to_chars(buf, buf + sizeof(buf), h.bin_center(b));
        out.append(buf, res.ptr);
        out += ',' + std::to_string(h.counts[b]) + '\n';
    }
    return out;
}

} // namespace psd
