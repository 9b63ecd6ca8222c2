#include "psd/objective.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace psd {

EmbeddingBatch EmbeddingBatch::make(Matrix image, Matrix text) {
    require_same_shape(image, text, "EmbeddingBatch");
    require_finite(image, "EmbeddingBatch image");
    require_finite(text, "EmbeddingBatch text");
    for (const Matrix* m : {&image, &text}) {
        for (Index i = 0; i < m->rows(); ++i) {
            const double norm = std::sqrt(dot(m->row(i), m->row(i)));
            require(std::abs(norm - 1.0) <= 1e-9, ErrorCode::invalid_input,
                    "EmbeddingBatch: row " + std::to_string(i) + " is not unit-norm");
        }
    }
    return EmbeddingBatch{std::move(image), std::move(text)};
}

TemperatureParam clamp_scale(TemperatureParam temp) noexcept {
    // log(100) rounds up far enough that exp() of it lands just above 100
    static const double max_log = [] {
        double l = std::log(kMaxLogitScale);
        while (std::exp(l) > kMaxLogitScale) l = std::nextafter(l, 0.0);
        return l;
    }();
    if (temp.log_scale > max_log) {
        temp.log_scale = max_log;
    }
    return temp;
}

Index aligned_count(Index n, double alpha) {
    require(alpha >= 0.0 && alpha <= 1.0, ErrorCode::invalid_input, "alpha must lie in [0, 1]");
    const auto a = static_cast<Index>(std::floor(alpha * static_cast<double>(n)));
    return std::min(a, n);
}

PartitionPlan PartitionPlan::from_order(const IndexList& order, double alpha) {
    const Index na = aligned_count(order.size(), alpha);
    PartitionPlan plan;
    plan.alpha = alpha;
    plan.aligned.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(na));
    plan.unaligned.assign(order.begin() + static_cast<std::ptrdiff_t>(na), order.end());
    return plan;
}

PartitionPlan PartitionPlan::all_aligned(Index n) {
    PartitionPlan plan;
    plan.alpha = 1.0;
    plan.aligned.resize(n);
    for (Index i = 0; i < n; ++i) {
        plan.aligned[i] = i;
    }
    return plan;
}

void PartitionPlan::validate() const {
    const Index n = batch_size();
    require(aligned.size() == aligned_count(n, alpha), ErrorCode::invalid_input,
            "PartitionPlan: aligned count differs from floor(alpha N)");
    std::vector<char> seen(n, 0);
    for (const IndexList* part : {&aligned, &unaligned}) {
        for (Index i : *part) {
            require(i < n && !seen[i], ErrorCode::invalid_input,
                    "PartitionPlan: subsets must partition 0..N-1");
            seen[i] = 1;
        }
    }
}

std::string_view to_string(TargetMode mode) noexcept {
    switch (mode) {
    case TargetMode::swapped: return "swapped";
    case TargetMode::bootstrap: return "bootstrap";
    case TargetMode::none: return "none";
    }
    return "none";
}

TargetMode parse_target_mode(std::string_view text) {
    if (text == "swapped") return TargetMode::swapped;
    if (text == "bootstrap") return TargetMode::bootstrap;
    if (text == "none") return TargetMode::none;
    fail(ErrorCode::invalid_input, "unknown target mode '" + std::string(text) + "'");
}

namespace {

struct GradAccumulator {
    Matrix d_query;
    Matrix d_key;
    double d_log_scale = 0.0;
};

// One row-wise cross-entropy term with mean reduction:
//   weight / |rows| * sum_r -sum_j A(r, j) log softmax_j(scale * <q_rows[r], k_j>)
// Without `targets` the target of row r is one-hot at column rows[r].
double directional_term(const Matrix& query, const Matrix& key, const IndexList& rows,
                        const Matrix* targets, double scale, double weight,
                        GradAccumulator& acc) {
    if (rows.empty()) {
        return 0.0;
    }
    const Index n_keys = key.rows();
    const double inv_rows = 1.0 / static_cast<double>(rows.size());
    std::vector<double> logits(n_keys);
    std::vector<double> coeff(n_keys);
    std::vector<double> probs(n_keys);
    double total = 0.0;

    for (Index r = 0; r < rows.size(); ++r) {
        const Index qi = rows[r];
        const auto q = query.row(qi);
        for (Index j = 0; j < n_keys; ++j) {
            logits[j] = scale * dot(q, key.row(j));
        }
        const double peak = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (Index j = 0; j < n_keys; ++j) {
            probs[j] = std::exp(logits[j] - peak);
            z += probs[j];
        }
        const double log_z = peak + std::log(z);

        double target_mass = 0.0;
        double row_loss = 0.0;
        for (Index j = 0; j < n_keys; ++j) {
            probs[j] /= z;
            const double t = targets ? (*targets)(r, j) : (j == qi ? 1.0 : 0.0);
            target_mass += t;
            if (t != 0.0) {
                row_loss -= t * (logits[j] - log_z);
            }
        }
        total += row_loss;

        // d(row_loss)/d(logit_j) = p_j * sum(t) - t_j
        const double w = weight * inv_rows;
        auto dq = acc.d_query.row(qi);
        for (Index j = 0; j < n_keys; ++j) {
            const double t = targets ? (*targets)(r, j) : (j == qi ? 1.0 : 0.0);
            coeff[j] = w * (probs[j] * target_mass - t);
            acc.d_log_scale += coeff[j] * logits[j];
        }
        for (Index j = 0; j < n_keys; ++j) {
            const double c = coeff[j] * scale;
            if (c == 0.0) {
                continue;
            }
            const auto k = key.row(j);
            auto dk = acc.d_key.row(j);
            for (Index d = 0; d < k.size(); ++d) {
                dq[d] += c * k[d];
                dk[d] += c * q[d];
            }
        }
    }
    return weight * total * inv_rows;
}

void require_targets_shape(const PartitionPlan& plan, const SoftTargets& targets, Index n) {
    const Index nu = plan.unaligned.size();
    const auto ok = [&](const Matrix& m) {
        return m.rows() == nu && (nu == 0 || m.cols() == n);
    };
    require(ok(targets.image_to_text) && ok(targets.text_to_image), ErrorCode::invalid_input,
            "psd_loss: targets must have N^u = " + std::to_string(nu) + " rows and N = " +
                std::to_string(n) + " columns");
}

} // namespace

LossGrad info_nce_unchecked(const Matrix& image, const Matrix& text, double log_scale) {
    require_same_shape(image, text, "info_nce");
    require(image.rows() > 0, ErrorCode::empty_batch, "info_nce: empty batch");
    return psd_loss_unchecked(image, text, log_scale, PartitionPlan::all_aligned(image.rows()),
                              SoftTargets{}, 1.0);
}

LossGrad info_nce(const EmbeddingBatch& batch, TemperatureParam temp) {
    return info_nce_unchecked(batch.image, batch.text, temp.log_scale);
}

LossGrad psd_loss_unchecked(const Matrix& image, const Matrix& text, double log_scale,
                            const PartitionPlan& plan, const SoftTargets& targets,
                            double alpha_weight) {
    require_same_shape(image, text, "psd_loss");
    const Index n = image.rows();
    require(n > 0, ErrorCode::empty_batch, "psd_loss: empty batch");
    require(plan.batch_size() == n, ErrorCode::invalid_input,
            "psd_loss: plan covers " + std::to_string(plan.batch_size()) + " rows, batch has " +
                std::to_string(n));
    require_targets_shape(plan, targets, n);

    const double scale = std::exp(log_scale);
    GradAccumulator image_side{Matrix(n, image.cols()), Matrix(n, text.cols()), 0.0};
    GradAccumulator text_side{Matrix(n, text.cols()), Matrix(n, image.cols()), 0.0};

    const double hard_w = alpha_weight;
    const double soft_w = 1.0 - alpha_weight;
    double loss = 0.0;
    loss += directional_term(image, text, plan.aligned, nullptr, scale, hard_w, image_side);
    loss += directional_term(text, image, plan.aligned, nullptr, scale, hard_w, text_side);
    loss += directional_term(image, text, plan.unaligned, &targets.image_to_text, scale, soft_w,
                             image_side);
    loss += directional_term(text, image, plan.unaligned, &targets.text_to_image, scale, soft_w,
                             text_side);

    LossGrad out;
    out.loss = loss;
    out.d_image = std::move(image_side.d_query);
    axpy(out.d_image, 1.0, text_side.d_key);
    out.d_text = std::move(text_side.d_query);
    axpy(out.d_text, 1.0, image_side.d_key);
    out.d_log_scale = image_side.d_log_scale + text_side.d_log_scale;
    return out;
}

LossGrad psd_loss(const EmbeddingBatch& batch, TemperatureParam temp, const PartitionPlan& plan,
                  const SoftTargets& targets, std::optional<double> alpha_weight) {
    plan.validate();
    const double w = alpha_weight.value_or(plan.alpha);
    require(w >= 0.0 && w <= 1.0, ErrorCode::invalid_input, "psd_loss: alpha outside [0, 1]");
    return psd_loss_unchecked(batch.image, batch.text, temp.log_scale, plan, targets, w);
}

namespace {

void renormalize_rows(Matrix& m) {
    for (Index i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        double total = 0.0;
        for (double x : r) {
            total += x;
        }
        for (double& x : r) {
            x /= total;
        }
    }
}

struct TeacherPosteriors {
    Matrix image_to_text;  // row i: softmax over texts of sim(v_i, .)
    Matrix text_to_image;  // row j: softmax over images of sim(t_j, .)
};

TeacherPosteriors teacher_posteriors(const Matrix& teacher_image, const Matrix& teacher_text,
                                     double teacher_scale) {
    require_same_shape(teacher_image, teacher_text, "soft targets");
    require(std::isfinite(teacher_scale) && teacher_scale > 0.0, ErrorCode::invalid_input,
            "soft targets: teacher scale must be positive");
    const Matrix sims = matmul_transposed(teacher_image, teacher_text);
    return {softmax_rows(sims, teacher_scale), softmax_rows(transpose(sims), teacher_scale)};
}

void require_plan_matches(const PartitionPlan& plan, Index n) {
    require(plan.batch_size() == n, ErrorCode::invalid_input,
            "soft targets: plan size differs from teacher batch");
}

} // namespace

SoftTargets soft_targets_swapped(const Matrix& teacher_image, const Matrix& teacher_text,
                                 double teacher_scale, const PartitionPlan& plan) {
    const Index n = teacher_image.rows();
    require_plan_matches(plan, n);
    const auto post = teacher_posteriors(teacher_image, teacher_text, teacher_scale);
    const Index nu = plan.unaligned.size();
    SoftTargets out{Matrix(nu, n), Matrix(nu, n), teacher_scale};
    for (Index u = 0; u < nu; ++u) {
        const Index i = plan.unaligned[u];
        for (Index j = 0; j < n; ++j) {
            out.image_to_text(u, j) = post.text_to_image(j, i);
            out.text_to_image(u, j) = post.image_to_text(j, i);
        }
    }
    renormalize_rows(out.image_to_text);
    renormalize_rows(out.text_to_image);
    return out;
}

SoftTargets soft_targets_bootstrap(const Matrix& teacher_image, const Matrix& teacher_text,
                                   double teacher_scale, const PartitionPlan& plan) {
    const Index n = teacher_image.rows();
    require_plan_matches(plan, n);
    const auto post = teacher_posteriors(teacher_image, teacher_text, teacher_scale);
    return SoftTargets{select_rows(post.image_to_text, plan.unaligned),
                       select_rows(post.text_to_image, plan.unaligned), teacher_scale};
}

SoftTargets make_soft_targets(TargetMode mode, const Matrix& teacher_image,
                              const Matrix& teacher_text, double teacher_scale,
                              const PartitionPlan& plan) {
    switch (mode) {
    case TargetMode::swapped:
        return soft_targets_swapped(teacher_image, teacher_text, teacher_scale, plan);
    case TargetMode::bootstrap:
        return soft_targets_bootstrap(teacher_image, teacher_text, teacher_scale, plan);
    case TargetMode::none:
        break;
    }
    require(plan.unaligned.empty(), ErrorCode::invalid_input,
            "target mode none requires an all-aligned plan");
    return SoftTargets{};
}

SoftTargets hard_targets(const PartitionPlan& plan) {
    const Index n = plan.batch_size();
    const Index nu = plan.unaligned.size();
    SoftTargets out{Matrix(nu, n), Matrix(nu, n), 1.0};
    for (Index u = 0; u < nu; ++u) {
        out.image_to_text(u, plan.unaligned[u]) = 1.0;
        out.text_to_image(u, plan.unaligned[u]) = 1.0;
    }
    return out;
}

} // namespace psd
