#include "psd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace psd {

std::string_view to_string(ScheduleKind kind) noexcept {
    return kind == ScheduleKind::linear ? "linear" : "cosine";
}

ScheduleKind parse_schedule_kind(std::string_view text) {
    if (text == "cosine") return ScheduleKind::cosine;
    if (text == "linear") return ScheduleKind::linear;
    fail(ErrorCode::invalid_input, "unknown schedule kind '" + std::string(text) + "'");
}

double alpha_at(const AlphaSchedule& schedule, Index t) {
    require(schedule.total_steps >= 1, ErrorCode::invalid_input,
            "alpha_at: total_steps must be >= 1");
    require(t <= schedule.total_steps, ErrorCode::invalid_input,
            "alpha_at: step " + std::to_string(t) + " beyond total " +
                std::to_string(schedule.total_steps));
    if (t == 0) {
        return schedule.start;
    }
    if (t == schedule.total_steps) {
        return schedule.end;
    }
    const double progress = static_cast<double>(t) / static_cast<double>(schedule.total_steps);
    double value;
    if (schedule.kind == ScheduleKind::cosine) {
        value = schedule.end +
                0.5 * (schedule.start - schedule.end) * (1.0 + std::cos(std::numbers::pi * progress));
    } else {
        value = schedule.start + (schedule.end - schedule.start) * progress;
    }
    return std::clamp(value, std::min(schedule.start, schedule.end),
                      std::max(schedule.start, schedule.end));
}

double LrSchedule::at(Index step) const noexcept {
    if (step < warmup_steps) {
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    const Index span = total_steps > warmup_steps ? total_steps - warmup_steps : 1;
    const double progress =
        std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------

OptState OptState::create(Index parameter_count, const AdamWConfig& config,
                          const LrSchedule& schedule, std::vector<std::uint8_t> decay_mask) {
    require(decay_mask.empty() || decay_mask.size() == parameter_count, ErrorCode::invalid_input,
            "OptState: decay mask length differs from parameter count");
    OptState s;
    s.m.assign(parameter_count, 0.0);
    s.v.assign(parameter_count, 0.0);
    s.config = config;
    s.schedule = schedule;
    s.decay_mask = std::move(decay_mask);
    return s;
}

double adamw_step(std::vector<double>& params, const std::vector<double>& grads, OptState& opt) {
    require(params.size() == grads.size() && params.size() == opt.m.size(),
            ErrorCode::invalid_input, "adamw_step: parameter, gradient and state sizes differ");
    for (Index i = 0; i < grads.size(); ++i) {
        require(std::isfinite(grads[i]), ErrorCode::non_finite,
                "adamw_step: non-finite gradient at coordinate " + std::to_string(i));
    }
    const auto& c = opt.config;
    const double lr = opt.schedule.at(opt.step);
    opt.step += 1;
    const double t = static_cast<double>(opt.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (Index i = 0; i < params.size(); ++i) {
        if (opt.decay_mask.empty() || opt.decay_mask[i]) {
            params[i] *= 1.0 - lr * c.weight_decay;
        }
        opt.m[i] = c.beta1 * opt.m[i] + (1.0 - c.beta1) * grads[i];
        opt.v[i] = c.beta2 * opt.v[i] + (1.0 - c.beta2) * grads[i] * grads[i];
        const double m_hat = opt.m[i] / bc1;
        const double v_hat = opt.v[i] / bc2;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
    return lr;
}

// ---------------------------------------------------------------------------

std::string_view to_string(PartitionMode mode) noexcept {
    return mode == PartitionMode::fixed ? "static" : "dynamic";
}

PartitionMode parse_partition_mode(std::string_view text) {
    if (text == "dynamic") return PartitionMode::dynamic;
    if (text == "static") return PartitionMode::fixed;
    fail(ErrorCode::invalid_input, "unknown partition mode '" + std::string(text) + "'");
}

PartitionPlan make_partition(Index n, double alpha, Rng& epoch_rng) {
    require(n >= 1, ErrorCode::invalid_input, "make_partition: N must be >= 1");
    return PartitionPlan::from_order(permutation(n, epoch_rng), alpha);
}

PartitionSchedule::PartitionSchedule(Index population, PartitionMode mode, std::uint64_t seed)
    : population_(population), mode_(mode), seed_(seed) {}

void PartitionSchedule::begin_epoch(Index epoch) {
    if (drawn_ && mode_ == PartitionMode::fixed) {
        return;
    }
    const Index draw_epoch = mode_ == PartitionMode::fixed ? 0 : epoch;
    Rng rng(derive_seed(seed_, draw_epoch));
    const IndexList order = permutation(population_, rng);
    ranks_.assign(population_, 0);
    for (Index r = 0; r < order.size(); ++r) {
        ranks_[order[r]] = r;
    }
    drawn_ = true;
}

PartitionPlan PartitionSchedule::plan_for(std::span<const Index> batch_items, double alpha) const {
    require(drawn_, ErrorCode::invalid_input, "PartitionSchedule: begin_epoch not called");
    IndexList positions(batch_items.size());
    std::iota(positions.begin(), positions.end(), Index{0});
    std::sort(positions.begin(), positions.end(), [&](Index a, Index b) {
        return ranks_[batch_items[a]] < ranks_[batch_items[b]];
    });
    return PartitionPlan::from_order(positions, alpha);
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    image_encoder.validate();
    text_encoder.validate();
    require(image_encoder.embed_dim == text_encoder.embed_dim, ErrorCode::invalid_input,
            "TrainConfig: encoders must share embed_dim");
    require(batch_size >= 2, ErrorCode::invalid_input, "TrainConfig: batch_size must be >= 2");
    require(epochs >= 1, ErrorCode::invalid_input, "TrainConfig: epochs must be >= 1");
    for (double a : {alpha_start, alpha_end}) {
        require(a >= 0.0 && a <= 1.0, ErrorCode::invalid_input,
                "TrainConfig: alpha endpoints must lie in [0, 1]");
    }
    require(!teacher_scale || *teacher_scale > 0.0, ErrorCode::invalid_input,
            "TrainConfig: teacher_scale must be positive");
    require(warmup_fraction >= 0.0 && warmup_fraction < 1.0, ErrorCode::invalid_input,
            "TrainConfig: warmup_fraction must lie in [0, 1)");
    require(init_temperature > 0.0, ErrorCode::invalid_input,
            "TrainConfig: init_temperature must be positive");
    require(optimizer.lr > 0.0 && optimizer.weight_decay >= 0.0 && optimizer.eps > 0.0,
            ErrorCode::invalid_input, "TrainConfig: invalid optimizer settings");
}

Index steps_per_epoch(const TrainConfig& cfg, Index dataset_size) {
    return dataset_size / cfg.batch_size;
}

std::map<std::string, double> EvalMetrics::named() const {
    std::map<std::string, double> out;
    for (const auto* r : {&retrieval.image_to_text, &retrieval.text_to_image}) {
        const std::string prefix = r->direction == RetrievalDirection::image_to_text ? "i2t" : "t2i";
        for (const auto& [k, v] : r->recall_at) {
            out[prefix + "_R@" + std::to_string(k)] = v;
        }
        out[prefix + "_MnR"] = r->mean_rank;
    }
    out["zero_shot_top1"] = zero_shot_top1;
    out["mean_pos_sim"] = mean_positive;
    out["mean_neg_sim"] = mean_negative;
    return out;
}

EvalMetrics evaluate_model(const DualEncoder& model, const PairedDataset& ds, const IndexList& k_list,
                           Index histogram_bins) {
    require(ds.size() > 0, ErrorCode::invalid_input, "evaluate_model: empty dataset");
    IndexList first_caption(ds.size());
    for (Index i = 0; i < ds.size(); ++i) {
        first_caption[i] = ds.pairing[i].front();
    }
    const Matrix image = encode(model.image, ds.image_features).embedding;
    const Matrix text = encode(model.text, select_rows(ds.text_features, first_caption)).embedding;

    // Class prototype: encoded mean caption feature of each class.
    Matrix class_caption(ds.num_classes, ds.text_features.cols());
    std::vector<Index> counts(ds.num_classes, 0);
    for (Index i = 0; i < ds.size(); ++i) {
        const auto row = ds.text_features.row(first_caption[i]);
        auto acc = class_caption.row(ds.labels[i]);
        for (Index d = 0; d < row.size(); ++d) {
            acc[d] += row[d];
        }
        ++counts[ds.labels[i]];
    }
    for (Index c = 0; c < ds.num_classes; ++c) {
        require(counts[c] > 0, ErrorCode::invalid_input,
                "evaluate_model: class " + std::to_string(c) + " has no examples");
        for (double& x : class_caption.row(c)) {
            x /= static_cast<double>(counts[c]);
        }
    }
    const Matrix prototypes = encode(model.text, class_caption).embedding;

    EvalMetrics m;
    m.retrieval = retrieval_eval(image, text, k_list);
    m.zero_shot_top1 = zero_shot_top1(image, prototypes, ds.labels);
    m.similarity = similarity_stats(image, text, histogram_bins);
    m.mean_positive = m.similarity.mean_positive();
    m.mean_negative = m.similarity.mean_negative();
    return m;
}

namespace {

std::vector<double> pack(const DualEncoder& model) {
    std::vector<double> flat = model.image.flatten();
    const auto text = model.text.flatten();
    flat.insert(flat.end(), text.begin(), text.end());
    flat.push_back(model.temperature.log_scale);
    return flat;
}

void unpack(const std::vector<double>& flat, DualEncoder& model) {
    const Index ni = model.image.parameter_count();
    const Index nt = model.text.parameter_count();
    model.image.assign(std::span<const double>(flat).subspan(0, ni));
    model.text.assign(std::span<const double>(flat).subspan(ni, nt));
    model.temperature.log_scale = flat[ni + nt];
}

std::vector<double> pack_grads(const ParamSet& d_image, const ParamSet& d_text, double d_log_scale) {
    std::vector<double> flat = d_image.flatten();
    const auto text = d_text.flatten();
    flat.insert(flat.end(), text.begin(), text.end());
    flat.push_back(d_log_scale);
    return flat;
}

} // namespace

TrainResult train(const TrainConfig& cfg, const PairedDataset& train_set,
                  const PairedDataset* heldout, const TrainCallbacks& callbacks) {
    cfg.validate();
    train_set.validate();
    require(cfg.image_encoder.input_dim == train_set.image_features.cols() &&
                cfg.text_encoder.input_dim == train_set.text_features.cols(),
            ErrorCode::invalid_input, "train: encoder input dims do not match the dataset");
    const Index n = train_set.size();
    require(n >= cfg.batch_size, ErrorCode::invalid_input,
            "train: dataset has " + std::to_string(n) + " pairs, fewer than one batch of " +
                std::to_string(cfg.batch_size));

    const Index per_epoch = steps_per_epoch(cfg, n);
    const Index total_steps = per_epoch * cfg.epochs;
    const bool distill = cfg.target_mode != TargetMode::none;
    const AlphaSchedule alpha_schedule{cfg.alpha_start, cfg.alpha_end,
                                       std::max<Index>(1, total_steps - 1), cfg.alpha_kind};
    const auto warmup = static_cast<Index>(cfg.warmup_fraction * static_cast<double>(total_steps));
    const LrSchedule lr_schedule{cfg.optimizer.lr, warmup, total_steps};

    TrainResult result;
    Rng init_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(RngStream::init)));
    result.model.image = init_params(cfg.image_encoder, init_rng);
    result.model.text = init_params(cfg.text_encoder, init_rng);
    result.model.temperature = clamp_scale(TemperatureParam::from_temperature(cfg.init_temperature));

    std::vector<std::uint8_t> mask = result.model.image.weight_mask();
    const auto text_mask = result.model.text.weight_mask();
    mask.insert(mask.end(), text_mask.begin(), text_mask.end());
    mask.push_back(0);
    const Index parameter_count = mask.size();
    result.optimizer = OptState::create(parameter_count, cfg.optimizer, lr_schedule, std::move(mask));

    Rng shuffle_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(RngStream::shuffle)));
    Rng caption_rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(RngStream::captions)));
    PartitionSchedule partition(n, cfg.partition_mode,
                                derive_seed(cfg.seed, static_cast<std::uint64_t>(RngStream::partition)));

    auto run_eval = [&](Index step, Index epoch) {
        if (heldout == nullptr) {
            return;
        }
        EvalMetrics metrics = evaluate_model(result.model, *heldout, cfg.eval_k, cfg.histogram_bins);
        EvalRecord record{step, epoch, metrics.named()};
        if (callbacks.on_eval) {
            callbacks.on_eval(record);
        }
        result.history.evals.push_back(std::move(record));
        result.final_eval = std::move(metrics);
    };

    Index step = 0;
    for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
        const IndexList order = permutation(n, shuffle_rng);
        const IndexList captions = select_captions(train_set, caption_rng);
        partition.begin_epoch(epoch);

        for (Index b = 0; b < per_epoch; ++b, ++step) {
            const std::span<const Index> items(order.data() + b * cfg.batch_size, cfg.batch_size);
            IndexList caption_rows(items.size());
            for (Index r = 0; r < items.size(); ++r) {
                caption_rows[r] = captions[items[r]];
            }
            const Encoded image = encode(result.model.image, select_rows(train_set.image_features, items));
            const Encoded text = encode(result.model.text, select_rows(train_set.text_features, caption_rows));

            const double alpha = distill ? alpha_at(alpha_schedule, step) : 1.0;
            const PartitionPlan plan = distill ? partition.plan_for(items, alpha)
                                               : PartitionPlan::all_aligned(items.size());
            // Teacher = current student, detached: targets are plain values from here on.
            const double teacher_scale = cfg.teacher_scale.value_or(result.model.temperature.scale());
            const SoftTargets targets = make_soft_targets(cfg.target_mode, image.embedding,
                                                          text.embedding, teacher_scale, plan);
            const LossGrad lg = psd_loss_unchecked(image.embedding, text.embedding,
                                                   result.model.temperature.log_scale, plan,
                                                   targets, alpha);
            if (!std::isfinite(lg.loss)) {
                fail(ErrorCode::divergence, "train: non-finite loss at step " + std::to_string(step));
            }

            const EncoderGrad gi = encode_backward(result.model.image, image.cache, lg.d_image);
            const EncoderGrad gt = encode_backward(result.model.text, text.cache, lg.d_text);
            std::vector<double> flat = pack(result.model);
            const std::vector<double> grads = pack_grads(gi.d_params, gt.d_params, lg.d_log_scale);
            double lr;
            try {
                lr = adamw_step(flat, grads, result.optimizer);
            } catch (const Error& e) {
                fail(ErrorCode::divergence,
                     "train: step " + std::to_string(step) + " aborted: " + e.what());
            }
            unpack(flat, result.model);
            result.model.temperature = clamp_scale(result.model.temperature);

            StepRecord record{step, epoch, alpha, lg.loss, lr, result.model.temperature.scale()};
            if (callbacks.on_step) {
                callbacks.on_step(record);
            }
            result.history.steps.push_back(record);
        }
        result.epochs_completed = epoch + 1;

        const bool last = epoch + 1 == cfg.epochs;
        if (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0)) {
            run_eval(step, epoch);
        }
    }
    result.shuffle_rng = shuffle_rng.state();
    result.caption_rng = caption_rng.state();
    return result;
}

} // namespace psd
