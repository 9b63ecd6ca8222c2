#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "psd/data.hpp"
#include "psd/eval.hpp"
#include "psd/model.hpp"
#include "psd/numkit.hpp"
#include "psd/objective.hpp"

namespace psd {

// ---------------------------------------------------------------------------
// Schedules

enum class ScheduleKind { cosine, linear };

std::string_view to_string(ScheduleKind kind) noexcept;
ScheduleKind parse_schedule_kind(std::string_view text);

struct AlphaSchedule {
    double start = 0.8;
    double end = 0.2;
    Index total_steps = 1;
    ScheduleKind kind = ScheduleKind::cosine;
};

/// cosine: end + (start - end) (1 + cos(pi t / T)) / 2; linear: start + (end - start) t / T.
double alpha_at(const AlphaSchedule& schedule, Index t);

/// Linear warmup over `warmup_steps`, then cosine decay from base_lr to 0 at total_steps.
struct LrSchedule {
    double base_lr = 1e-3;
    Index warmup_steps = 0;
    Index total_steps = 1;

    double at(Index step) const noexcept;
};

// ---------------------------------------------------------------------------
// AdamW

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct OptState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t step = 0;
    AdamWConfig config;
    LrSchedule schedule;
    /// Entries with 0 skip weight decay; empty means decay everything.
    std::vector<std::uint8_t> decay_mask;

    static OptState create(Index parameter_count, const AdamWConfig& config,
                           const LrSchedule& schedule, std::vector<std::uint8_t> decay_mask = {});
};

/// One bias-corrected AdamW step with decoupled decay (params *= 1 - lr * wd first).
/// Returns the learning rate used. Throws non-finite on a NaN/Inf gradient, leaving the
/// state untouched.
double adamw_step(std::vector<double>& params, const std::vector<double>& grads, OptState& opt);

// ---------------------------------------------------------------------------
// Partitioning

enum class PartitionMode { dynamic, fixed };

std::string_view to_string(PartitionMode mode) noexcept;
PartitionMode parse_partition_mode(std::string_view text);

/// Random aligned/unaligned split of N batch rows: a Fisher-Yates order, first floor(alpha N)
/// aligned.
PartitionPlan make_partition(Index n, double alpha, Rng& epoch_rng);

/// Dataset-wide partition priorities. Every instance holds a random rank; within a batch the
/// floor(alpha N) lowest-ranked rows are aligned. Dynamic mode redraws the ranks each epoch,
/// fixed (static) mode keeps the ranks drawn at the start of training.
class PartitionSchedule {
public:
    PartitionSchedule(Index population, PartitionMode mode, std::uint64_t seed);

    void begin_epoch(Index epoch);
    PartitionPlan plan_for(std::span<const Index> batch_items, double alpha) const;
    const IndexList& ranks() const noexcept { return ranks_; }

private:
    Index population_;
    PartitionMode mode_;
    std::uint64_t seed_;
    bool drawn_ = false;
    IndexList ranks_;
};

// ---------------------------------------------------------------------------
// Training

/// RNG sub-streams derived from the run seed.
enum class RngStream : std::uint64_t { init = 0, shuffle = 1, captions = 2, partition = 3 };

struct TrainConfig {
    EncoderSpec image_encoder;
    EncoderSpec text_encoder;
    Index batch_size = 256;
    Index epochs = 30;
    std::uint64_t seed = 0;
    double alpha_start = 0.8;
    double alpha_end = 0.2;
    ScheduleKind alpha_kind = ScheduleKind::cosine;
    /// Fixed teacher logit scale 1 / tau~; unset means "use the detached student scale".
    std::optional<double> teacher_scale = kMaxLogitScale;
    TargetMode target_mode = TargetMode::swapped;
    PartitionMode partition_mode = PartitionMode::dynamic;
    AdamWConfig optimizer;
    double warmup_fraction = 0.05;
    double init_temperature = kInitialTemperature;
    /// Evaluate on the held-out set every this many epochs; 0 = only after the last epoch.
    Index eval_every = 0;
    IndexList eval_k = {1, 5, 10};
    Index histogram_bins = 20;

    void validate() const;
};

struct DualEncoder {
    ParamSet image;
    ParamSet text;
    TemperatureParam temperature;
};

struct EvalMetrics {
    RetrievalPair retrieval;
    double zero_shot_top1 = 0.0;
    double mean_positive = 0.0;
    double mean_negative = 0.0;
    SimilarityStats similarity;

    /// Flat name -> value view used for metric streams and tables.
    std::map<std::string, double> named() const;
};

/// Encodes the held-out images and their first caption, then reports retrieval (both
/// directions), zero-shot top-1 against per-class mean-caption prototypes, and the
/// positive/negative similarity distribution.
EvalMetrics evaluate_model(const DualEncoder& model, const PairedDataset& ds, const IndexList& k_list,
                           Index histogram_bins = 20);

struct StepRecord {
    Index step = 0;
    Index epoch = 0;
    double alpha = 1.0;
    double loss = 0.0;
    double lr = 0.0;
    double scale = 0.0;
};

struct EvalRecord {
    Index step = 0;
    Index epoch = 0;
    std::map<std::string, double> metrics;
};

struct MetricsHistory {
    std::vector<StepRecord> steps;
    std::vector<EvalRecord> evals;
};

struct TrainResult {
    DualEncoder model;
    OptState optimizer;
    MetricsHistory history;
    Index epochs_completed = 0;
    Rng::State shuffle_rng{};
    Rng::State caption_rng{};
    std::optional<EvalMetrics> final_eval;
};

struct TrainCallbacks {
    std::function<void(const StepRecord&)> on_step;
    std::function<void(const EvalRecord&)> on_eval;
};

/// Whole training run. Throws divergence (with the step index) on a non-finite loss.
TrainResult train(const TrainConfig& cfg, const PairedDataset& train_set,
                  const PairedDataset* heldout = nullptr, const TrainCallbacks& callbacks = {});

Index steps_per_epoch(const TrainConfig& cfg, Index dataset_size);

} // namespace psd
