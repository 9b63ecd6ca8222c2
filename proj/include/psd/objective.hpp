#pragma once

#include <cmath>
#include <optional>
#include <string_view>

#include "psd/numkit.hpp"

namespace psd {

/// Paired image/text embeddings, one pair per row. Rows must be unit-norm.
struct EmbeddingBatch {
    Matrix image;
    Matrix text;

    /// Validates shapes, finiteness and unit rows (tolerance 1e-9).
    static EmbeddingBatch make(Matrix image, Matrix text);
    Index size() const noexcept { return image.rows(); }
};

inline constexpr double kMaxLogitScale = 100.0;
inline constexpr double kInitialTemperature = 0.07;

/// Learnable log inverse-temperature; the logit scale is exp(log_scale) = 1 / tau.
struct TemperatureParam {
    double log_scale = std::log(1.0 / kInitialTemperature);

    double scale() const noexcept { return std::exp(log_scale); }
    static TemperatureParam from_temperature(double tau) { return {std::log(1.0 / tau)}; }
    static TemperatureParam from_scale(double scale) { return {std::log(scale)}; }
};

/// Caps the logit scale at 100; values below are returned untouched.
TemperatureParam clamp_scale(TemperatureParam temp) noexcept;

/// Split of batch rows into the hard-target (aligned) and soft-target (unaligned) subsets.
struct PartitionPlan {
    IndexList aligned;
    IndexList unaligned;
    double alpha = 1.0;

    Index batch_size() const noexcept { return aligned.size() + unaligned.size(); }

    /// First floor(alpha * N) entries of `order` become aligned, the rest unaligned.
    static PartitionPlan from_order(const IndexList& order, double alpha);
    /// Every row aligned, alpha = 1.
    static PartitionPlan all_aligned(Index n);
    /// Checks N^a = floor(alpha N) and that the two lists cover 0..N-1 disjointly.
    void validate() const;
};

Index aligned_count(Index n, double alpha);

/// Teacher alignment distributions for the unaligned rows (N^u x N each).
struct SoftTargets {
    Matrix image_to_text;  // A^v: row u supervises image unaligned[u] over all texts
    Matrix text_to_image;  // A^t: row u supervises text unaligned[u] over all images
    double teacher_scale = 1.0;
};

/// Loss value plus gradients w.r.t. both embedding matrices and the log-scale.
struct LossGrad {
    double loss = 0.0;
    Matrix d_image;
    Matrix d_text;
    double d_log_scale = 0.0;
};

enum class TargetMode { swapped, bootstrap, none };

std::string_view to_string(TargetMode mode) noexcept;
TargetMode parse_target_mode(std::string_view text);

/// Symmetric InfoNCE: H(I, rho(V T^T)) + H(I, rho(T V^T)), both with mean reduction.
LossGrad info_nce(const EmbeddingBatch& batch, TemperatureParam temp);

/// Same loss without the unit-row precondition, for finite-difference probing.
LossGrad info_nce_unchecked(const Matrix& image, const Matrix& text, double log_scale);

/// Swapped-prediction targets. A^v(u, j) is the teacher's probability that text j matches
/// image unaligned[u] relative to all other images (a column softmax of the teacher
/// similarity), renormalized per row; A^t is the same with the modalities exchanged.
SoftTargets soft_targets_swapped(const Matrix& teacher_image, const Matrix& teacher_text,
                                 double teacher_scale, const PartitionPlan& plan);

/// Forward-bootstrap targets: each unaligned row takes its own same-direction posterior.
SoftTargets soft_targets_bootstrap(const Matrix& teacher_image, const Matrix& teacher_text,
                                   double teacher_scale, const PartitionPlan& plan);

/// Dispatch on mode; `none` yields empty targets.
SoftTargets make_soft_targets(TargetMode mode, const Matrix& teacher_image,
                              const Matrix& teacher_text, double teacher_scale,
                              const PartitionPlan& plan);

/// One-hot ground-truth rows for the unaligned subset (column = own row index).
SoftTargets hard_targets(const PartitionPlan& plan);

/// alpha * [hard terms over aligned rows] + (1 - alpha) * [soft terms over unaligned rows].
/// Every term contrasts against all N opposite-modality rows; targets are constants.
/// `alpha_weight` overrides the coefficient while keeping the plan's subsets.
LossGrad psd_loss(const EmbeddingBatch& batch, TemperatureParam temp, const PartitionPlan& plan,
                  const SoftTargets& targets, std::optional<double> alpha_weight = std::nullopt);

LossGrad psd_loss_unchecked(const Matrix& image, const Matrix& text, double log_scale,
                            const PartitionPlan& plan, const SoftTargets& targets,
                            double alpha_weight);

} // namespace psd
