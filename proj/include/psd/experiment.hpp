#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "psd/data.hpp"
#include "psd/eval.hpp"
#include "psd/trainer.hpp"

namespace psd {

using Json = nlohmann::ordered_json;

/// Everything one CLI invocation needs. Backed by a plain-text `key = value` file; every key
/// has a default and unknown keys are rejected.
struct ExperimentConfig {
    std::uint64_t seed = 0;

    SyntheticSpec data = default_data();
    Index holdout_per_class = 50;
    std::string train_file;    // PSDD path; empty = generate
    std::string heldout_file;  // PSDD path; empty = generated split (or none)

    std::vector<Index> hidden_dims = {64};
    Index embed_dim = 32;
    Activation activation = Activation::tanh;

    TrainConfig train;  // encoder specs are filled from the data at run time

    bool linear_probe = true;
    ProbeOptions probe;

    Index ablate_seeds = 10;

    static SyntheticSpec default_data();

    void set(std::string_view key, std::string_view value);
    std::string get(std::string_view key) const;
    static const std::vector<std::string>& keys();

    /// Reads `key = value` lines; '#' starts a comment. Later lines override earlier ones.
    void merge_text(std::string_view text, std::string_view origin = "config");
    void merge_file(const std::string& path);
    /// Canonical dump of every key, parseable by merge_text.
    std::string to_text() const;

    TrainConfig train_config(Index image_dim, Index text_dim) const;
};

/// Seed stream used for synthetic data, distinct from the training streams.
inline constexpr std::uint64_t kDataSeedStream = 0xDA7A;

SplitDataset make_datasets(const ExperimentConfig& cfg);

Json dataset_summary(const PairedDataset& ds);

Json to_json(const StepRecord& r);
Json to_json(const EvalRecord& r, const StepRecord* last_step);
Json to_json(const RetrievalReport& r);

/// Training run that streams one JSON object per line to `metrics` (if given).
TrainResult run_training(const ExperimentConfig& cfg, const SplitDataset& data, std::ostream* metrics);

// Checkpoint directory: image.psdw, text.psdw, state.psds.
// PSDS: "PSDS", u32 version, u64 epochs, u64 optimizer step, f64 log-scale, u64 count,
// count f64 first moments, count f64 second moments, then the shuffle and caption RNG states.
inline constexpr std::uint32_t kStateFormatVersion = 1;

void save_checkpoint(const std::string& dir, const TrainResult& result);
/// Restores the encoders, optimizer moments and RNG states. History and final_eval stay empty.
TrainResult load_checkpoint(const std::string& dir);

struct EvalOutputs {
    Json report;
    std::string positive_csv;
    std::string negative_csv;
};

/// Retrieval, zero-shot, similarity statistics and (optionally) a linear probe trained on the
/// even-indexed images and scored on the odd-indexed ones.
EvalOutputs evaluate_report(const DualEncoder& model, const PairedDataset& ds, const IndexList& k_list,
                            Index bins, bool with_probe, const ProbeOptions& probe = {});

// Finite-difference verification.

/// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps roundoff on
/// near-zero coordinates (about eps * |f| / h) from counting as a large relative error.
double gradient_relative_error(double analytic, double numeric, double floor);

inline constexpr double kFiniteDifferenceStep = 1e-6;
inline constexpr double kGradientTolerance = 1e-5;
inline constexpr double kRelativeErrorFloor = 1e-2;

struct GradcheckRow {
    std::string name;
    Index trials = 0;
    Index coordinates = 0;
    double worst_error = 0.0;
    double tolerance = kGradientTolerance;
    bool passed = false;
};

struct GradcheckReport {
    std::vector<GradcheckRow> rows;
    bool all_passed() const noexcept;
    Json to_json() const;
    std::string table() const;
};

GradcheckReport run_gradcheck(std::uint64_t seed, Index trials);

// Ablation table: baseline, bootstrap+static, swapped+static, swapped+dynamic.

inline constexpr const char* kAblationRows[] = {"baseline", "bootstrap+static", "swapped+static",
                                                 "swapped+dynamic"};

/// `progress` (optional) receives one line per finished run.
Json run_ablation(const ExperimentConfig& cfg,
                  const std::function<void(const std::string&)>& progress = {});

} // namespace psd
