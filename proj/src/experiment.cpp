#include "psd/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <map>
#include <sstream>

#include "binary_io.hpp"

namespace psd {

// ---------------------------------------------------------------------------
// Config

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
    fail(ErrorCode::config, "config key '" + std::string(key) + "': cannot parse '" +
                                std::string(value) + "' as " + std::string(expected));
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
        bad_value(key, v, "an unsigned integer");
    }
    return out;
}

double parse_f64(std::string_view key, std::string_view v) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
        bad_value(key, v, "a finite number");
    }
    return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    bad_value(key, v, "a boolean");
}

IndexList parse_list(std::string_view key, std::string_view v) {
    IndexList out;
    std::string_view rest = v;
    while (!rest.empty()) {
        const auto comma = rest.find(',');
        const std::string item = trim(rest.substr(0, comma));
        if (!item.empty()) {
            out.push_back(parse_u64(key, item));
        } else if (comma != std::string_view::npos) {
            bad_value(key, v, "a comma-separated list");
        }
        if (comma == std::string_view::npos) {
            break;
        }
        rest = rest.substr(comma + 1);
    }
    return out;
}

std::string fmt(double x) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, ptr);
}

std::string fmt(std::uint64_t x) {
    return std::to_string(x);
}

std::string fmt_list(const IndexList& xs) {
    std::string out;
    for (Index i = 0; i < xs.size(); ++i) {
        out += (i ? "," : "") + std::to_string(xs[i]);
    }
    return out;
}

struct KeySpec {
    std::string name;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, std::string_view)> set;
};

template <typename Field>
KeySpec count_key(std::string name, Field field) {
    return {name, [field](const ExperimentConfig& c) { return fmt(std::uint64_t{field(const_cast<ExperimentConfig&>(c))}); },
            [name, field](ExperimentConfig& c, std::string_view v) { field(c) = parse_u64(name, v); }};
}

template <typename Field>
KeySpec real_key(std::string name, Field field) {
    return {name, [field](const ExperimentConfig& c) { return fmt(field(const_cast<ExperimentConfig&>(c))); },
            [name, field](ExperimentConfig& c, std::string_view v) { field(c) = parse_f64(name, v); }};
}

const std::vector<KeySpec>& key_table() {
    using C = ExperimentConfig;
    static const std::vector<KeySpec> table = {
        count_key("seed", [](C& c) -> std::uint64_t& { return c.seed; }),
        count_key("data.num_classes", [](C& c) -> Index& { return c.data.num_classes; }),
        count_key("data.latent_dim", [](C& c) -> Index& { return c.data.latent_dim; }),
        count_key("data.image_dim", [](C& c) -> Index& { return c.data.image_dim; }),
        count_key("data.text_dim", [](C& c) -> Index& { return c.data.text_dim; }),
        count_key("data.samples_per_class", [](C& c) -> Index& { return c.data.samples_per_class; }),
        real_key("data.within_class_std", [](C& c) -> double& { return c.data.within_class_std; }),
        real_key("data.feature_noise_sigma", [](C& c) -> double& { return c.data.feature_noise_sigma; }),
        real_key("data.mismatch_rate", [](C& c) -> double& { return c.data.mismatch_rate; }),
        count_key("data.captions_per_image", [](C& c) -> Index& { return c.data.captions_per_image; }),
        count_key("data.holdout_per_class", [](C& c) -> Index& { return c.holdout_per_class; }),
        {"data.train_file", [](const C& c) { return c.train_file; },
         [](C& c, std::string_view v) { c.train_file = std::string(v); }},
        {"data.heldout_file", [](const C& c) { return c.heldout_file; },
         [](C& c, std::string_view v) { c.heldout_file = std::string(v); }},
        {"model.hidden_dims", [](const C& c) { return fmt_list(c.hidden_dims); },
         [](C& c, std::string_view v) { c.hidden_dims = parse_list("model.hidden_dims", v); }},
        count_key("model.embed_dim", [](C& c) -> Index& { return c.embed_dim; }),
        {"model.activation", [](const C& c) { return std::string(to_string(c.activation)); },
         [](C& c, std::string_view v) { c.activation = parse_activation(v); }},
        count_key("train.batch_size", [](C& c) -> Index& { return c.train.batch_size; }),
        count_key("train.epochs", [](C& c) -> Index& { return c.train.epochs; }),
        real_key("train.alpha_start", [](C& c) -> double& { return c.train.alpha_start; }),
        real_key("train.alpha_end", [](C& c) -> double& { return c.train.alpha_end; }),
        {"train.alpha_schedule", [](const C& c) { return std::string(to_string(c.train.alpha_kind)); },
         [](C& c, std::string_view v) { c.train.alpha_kind = parse_schedule_kind(v); }},
        {"train.teacher_scale",
         [](const C& c) { return c.train.teacher_scale ? fmt(*c.train.teacher_scale) : std::string("student"); },
         [](C& c, std::string_view v) {
             if (v == "student") {
                 c.train.teacher_scale.reset();
             } else {
                 c.train.teacher_scale = parse_f64("train.teacher_scale", v);
             }
         }},
        {"train.target_mode", [](const C& c) { return std::string(to_string(c.train.target_mode)); },
         [](C& c, std::string_view v) { c.train.target_mode = parse_target_mode(v); }},
        {"train.partition_mode", [](const C& c) { return std::string(to_string(c.train.partition_mode)); },
         [](C& c, std::string_view v) { c.train.partition_mode = parse_partition_mode(v); }},
        real_key("train.lr", [](C& c) -> double& { return c.train.optimizer.lr; }),
        real_key("train.beta1", [](C& c) -> double& { return c.train.optimizer.beta1; }),
        real_key("train.beta2", [](C& c) -> double& { return c.train.optimizer.beta2; }),
        real_key("train.eps", [](C& c) -> double& { return c.train.optimizer.eps; }),
        real_key("train.weight_decay", [](C& c) -> double& { return c.train.optimizer.weight_decay; }),
        real_key("train.warmup_fraction", [](C& c) -> double& { return c.train.warmup_fraction; }),
        real_key("train.init_temperature", [](C& c) -> double& { return c.train.init_temperature; }),
        count_key("train.eval_every", [](C& c) -> Index& { return c.train.eval_every; }),
        {"eval.klist", [](const C& c) { return fmt_list(c.train.eval_k); },
         [](C& c, std::string_view v) { c.train.eval_k = parse_list("eval.klist", v); }},
        count_key("eval.histogram_bins", [](C& c) -> Index& { return c.train.histogram_bins; }),
        {"eval.linear_probe", [](const C& c) { return std::string(c.linear_probe ? "true" : "false"); },
         [](C& c, std::string_view v) { c.linear_probe = parse_bool("eval.linear_probe", v); }},
        real_key("eval.probe_l2", [](C& c) -> double& { return c.probe.l2; }),
        count_key("eval.probe_max_iters", [](C& c) -> Index& { return c.probe.max_iters; }),
        count_key("eval.probe_history", [](C& c) -> Index& { return c.probe.history; }),
        count_key("ablate.seeds", [](C& c) -> Index& { return c.ablate_seeds; }),
    };
    return table;
}

const KeySpec& find_key(std::string_view key) {
    const auto& table = key_table();
    const auto it = std::find_if(table.begin(), table.end(), [&](const KeySpec& k) { return k.name == key; });
    if (it == table.end()) {
        fail(ErrorCode::config, "unknown config key '" + std::string(key) + "'");
    }
    return *it;
}

} // namespace

SyntheticSpec ExperimentConfig::default_data() {
    SyntheticSpec spec;
    spec.num_classes = 10;
    spec.samples_per_class = 200;
    spec.mismatch_rate = 0.3;
    return spec;
}

void ExperimentConfig::set(std::string_view key, std::string_view value) {
    const std::string v = trim(value);
    try {
        find_key(key).set(*this, v);
    } catch (const Error& e) {
        if (e.code() == ErrorCode::config) {
            throw;
        }
        fail(ErrorCode::config, "config key '" + std::string(key) + "': " + e.what());
    }
}

std::string ExperimentConfig::get(std::string_view key) const {
    return find_key(key).get(*this);
}

const std::vector<std::string>& ExperimentConfig::keys() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& k : key_table()) {
            out.push_back(k.name);
        }
        return out;
    }();
    return names;
}

void ExperimentConfig::merge_text(std::string_view text, std::string_view origin) {
    Index line_no = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.resize(hash);
        }
        const std::string body = trim(line);
        if (body.empty()) {
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            fail(ErrorCode::config, std::string(origin) + ":" + std::to_string(line_no) +
                                        ": expected 'key = value'");
        }
        try {
            set(trim(body.substr(0, eq)), body.substr(eq + 1));
        } catch (const Error& e) {
            fail(ErrorCode::config,
                 std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

void ExperimentConfig::merge_file(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open config '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    merge_text(buf.str(), path);
}

std::string ExperimentConfig::to_text() const {
    std::string out;
    for (const auto& k : key_table()) {
        out += k.name + " = " + k.get(*this) + "\n";
    }
    return out;
}

TrainConfig ExperimentConfig::train_config(Index image_dim, Index text_dim) const {
    TrainConfig cfg = train;
    cfg.seed = seed;
    cfg.image_encoder = EncoderSpec{image_dim, hidden_dims, embed_dim, activation};
    cfg.text_encoder = EncoderSpec{text_dim, hidden_dims, embed_dim, activation};
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Data and metrics

SplitDataset make_datasets(const ExperimentConfig& cfg) {
    SplitDataset out;
    if (!cfg.train_file.empty()) {
        out.train = load_pairs(cfg.train_file);
        if (!cfg.heldout_file.empty()) {
            out.heldout = load_pairs(cfg.heldout_file);
        }
        return out;
    }
    Rng rng(derive_seed(cfg.seed, kDataSeedStream));
    out = generate_split(cfg.data, cfg.holdout_per_class, rng);
    if (!cfg.heldout_file.empty()) {
        out.heldout = load_pairs(cfg.heldout_file);
    }
    return out;
}

Json dataset_summary(const PairedDataset& ds) {
    return Json{{"n", ds.size()},
                {"m", ds.captions_per_image()},
                {"K", ds.num_classes},
                {"image_dim", ds.image_features.cols()},
                {"text_dim", ds.text_features.cols()},
                {"corrupted", ds.corrupted_count()}};
}

Json to_json(const StepRecord& r) {
    return Json{{"kind", "step"}, {"step", r.step}, {"epoch", r.epoch}, {"alpha", r.alpha},
                {"loss", r.loss}, {"lr", r.lr}, {"scale", r.scale}};
}

Json to_json(const EvalRecord& r, const StepRecord* last_step) {
    Json j{{"kind", "eval"}, {"step", r.step}, {"epoch", r.epoch}};
    if (last_step != nullptr) {
        j["alpha"] = last_step->alpha;
        j["loss"] = last_step->loss;
        j["lr"] = last_step->lr;
        j["scale"] = last_step->scale;
    }
    for (const auto& [name, value] : r.metrics) {
        j[name] = value;
    }
    return j;
}

Json to_json(const RetrievalReport& r) {
    Json recall = Json::object();
    for (const auto& [k, v] : r.recall_at) {
        recall[std::to_string(k)] = v;
    }
    return Json{{"direction", std::string(to_string(r.direction))},
                {"recall_at", recall},
                {"mean_rank", r.mean_rank}};
}

TrainResult run_training(const ExperimentConfig& cfg, const SplitDataset& data, std::ostream* metrics) {
    const TrainConfig tc =
        cfg.train_config(data.train.image_features.cols(), data.train.text_features.cols());
    const PairedDataset* heldout = data.heldout.size() > 0 ? &data.heldout : nullptr;
    StepRecord last{};
    bool have_last = false;
    TrainCallbacks callbacks;
    if (metrics != nullptr) {
        callbacks.on_step = [&](const StepRecord& r) {
            last = r;
            have_last = true;
            *metrics << to_json(r).dump() << '\n';
        };
        callbacks.on_eval = [&](const EvalRecord& r) {
            *metrics << to_json(r, have_last ? &last : nullptr).dump() << '\n';
            metrics->flush();
        };
    }
    return train(tc, data.train, heldout, callbacks);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void write_rng(binio::Writer& w, const Rng::State& s) {
    w.u64(s.seed);
    for (auto word : s.words) {
        w.u64(word);
    }
    w.u8(s.has_spare ? 1 : 0);
    w.f64(s.spare);
}

Rng::State read_rng(binio::Reader& r) {
    Rng::State s{};
    s.seed = r.u64();
    for (auto& word : s.words) {
        word = r.u64();
    }
    s.has_spare = r.u8() != 0;
    s.spare = r.f64();
    return s;
}

} // namespace

void save_checkpoint(const std::string& dir, const TrainResult& result) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(!ec, ErrorCode::io, "cannot create checkpoint directory '" + dir + "'");
    save_params(result.model.image, dir + "/image.psdw");
    save_params(result.model.text, dir + "/text.psdw");

    const std::string path = dir + "/state.psds";
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::io, "cannot open '" + path + "' for writing");
    binio::Writer w(out);
    w.magic("PSDS");
    w.u32(kStateFormatVersion);
    w.u64(result.epochs_completed);
    w.u64(result.optimizer.step);
    w.f64(result.model.temperature.log_scale);
    w.u64(result.optimizer.m.size());
    w.f64s(result.optimizer.m);
    w.f64s(result.optimizer.v);
    write_rng(w, result.shuffle_rng);
    write_rng(w, result.caption_rng);
    w.check(path);
}

TrainResult load_checkpoint(const std::string& dir) {
    TrainResult result;
    DualEncoder& model = result.model;
    model.image = load_params(dir + "/image.psdw");
    model.text = load_params(dir + "/text.psdw");
    require(model.image.spec.embed_dim == model.text.spec.embed_dim, ErrorCode::invalid_input,
            "checkpoint: encoders disagree on embed_dim");

    const std::string path = dir + "/state.psds";
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open '" + path + "'");
    binio::Reader r(in, path);
    r.expect_magic("PSDS");
    r.expect_version(kStateFormatVersion);
    result.epochs_completed = r.u64();
    result.optimizer.step = r.u64();
    model.temperature.log_scale = r.f64();
    require(std::isfinite(model.temperature.log_scale), ErrorCode::invalid_input,
            path + ": non-finite log-scale");
    const std::uint64_t count = r.u64();
    require(count == model.image.parameter_count() + model.text.parameter_count() + 1,
            ErrorCode::invalid_input, path + ": optimizer state does not match the encoders");
    r.require_remaining(count, 16);
    result.optimizer.m = r.f64s(count);
    result.optimizer.v = r.f64s(count);
    result.shuffle_rng = read_rng(r);
    result.caption_rng = read_rng(r);
    r.expect_end();
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation report

EvalOutputs evaluate_report(const DualEncoder& model, const PairedDataset& ds, const IndexList& k_list,
                            Index bins, bool with_probe, const ProbeOptions& probe) {
    const EvalMetrics m = evaluate_model(model, ds, k_list, bins);
    EvalOutputs out;
    out.report = Json{{"pairs", ds.size()},
                      {"scale", model.temperature.scale()},
                      {"image_to_text", to_json(m.retrieval.image_to_text)},
                      {"text_to_image", to_json(m.retrieval.text_to_image)},
                      {"zero_shot_top1", m.zero_shot_top1},
                      {"similarity",
                       Json{{"mean_positive", m.mean_positive},
                            {"mean_negative", m.mean_negative},
                            {"positives", m.similarity.positive_scores.size()},
                            {"negatives", m.similarity.negative_scores.size()},
                            {"bins", bins}}}};
    out.positive_csv = histogram_csv(m.similarity.positive_hist);
    out.negative_csv = histogram_csv(m.similarity.negative_hist);

    if (with_probe) {
        const Matrix features = encode(model.image, ds.image_features).embedding;
        IndexList train_idx, test_idx;
        for (Index i = 0; i < ds.size(); ++i) {
            (i % 2 == 0 ? train_idx : test_idx).push_back(i);
        }
        std::vector<std::uint32_t> train_y, test_y;
        for (Index i : train_idx) train_y.push_back(ds.labels[i]);
        for (Index i : test_idx) test_y.push_back(ds.labels[i]);
        const ProbeResult pr = linear_probe(select_rows(features, train_idx), train_y,
                                            select_rows(features, test_idx), test_y,
                                            ds.num_classes, probe);
        out.report["linear_probe"] = Json{{"test_accuracy", pr.test_accuracy},
                                          {"train_accuracy", pr.train_accuracy},
                                          {"iterations", pr.iterations},
                                          {"fallback_steps", pr.fallback_steps},
                                          {"initial_loss", pr.initial_loss},
                                          {"final_loss", pr.final_loss}};
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ablation

namespace {

struct Variant {
    const char* name;
    TargetMode target;
    PartitionMode partition;
};

constexpr Variant kVariants[] = {
    {"baseline", TargetMode::none, PartitionMode::dynamic},
    {"bootstrap+static", TargetMode::bootstrap, PartitionMode::fixed},
    {"swapped+static", TargetMode::swapped, PartitionMode::fixed},
    {"swapped+dynamic", TargetMode::swapped, PartitionMode::dynamic},
};

const char* const kAblationMetrics[] = {"t2i_R@1", "t2i_R@5", "i2t_R@1", "i2t_R@5",
                                        "zero_shot_top1", "mean_pos_sim", "mean_neg_sim"};

Json head_to_head(const std::vector<double>& a, const std::vector<double>& b) {
    Index wins = 0, losses = 0, ties = 0;
    double diff = 0.0;
    for (Index s = 0; s < a.size(); ++s) {
        wins += a[s] > b[s];
        losses += a[s] < b[s];
        ties += a[s] == b[s];
        diff += a[s] - b[s];
    }
    return Json{{"wins", wins}, {"losses", losses}, {"ties", ties},
                {"mean_difference", a.empty() ? 0.0 : diff / static_cast<double>(a.size())}};
}

} // namespace

Json run_ablation(const ExperimentConfig& cfg, const std::function<void(const std::string&)>& progress) {
    require(cfg.ablate_seeds >= 1, ErrorCode::config, "ablate.seeds must be >= 1");
    const IndexList k_list = cfg.train.eval_k;
    require(std::find(k_list.begin(), k_list.end(), Index{1}) != k_list.end() &&
                std::find(k_list.begin(), k_list.end(), Index{5}) != k_list.end(),
            ErrorCode::config, "ablation needs eval.klist to contain 1 and 5");

    // metric -> variant -> per-seed values
    std::map<std::string, std::vector<std::vector<double>>> values;
    for (const char* metric : kAblationMetrics) {
        values[metric].assign(std::size(kVariants), {});
    }

    for (Index s = 0; s < cfg.ablate_seeds; ++s) {
        ExperimentConfig run = cfg;
        run.seed = cfg.seed + s;
        const SplitDataset data = make_datasets(run);
        require(data.heldout.size() > 0, ErrorCode::config,
                "ablation needs a held-out set (data.holdout_per_class > 0 or data.heldout_file)");
        for (Index v = 0; v < std::size(kVariants); ++v) {
            run.train.target_mode = kVariants[v].target;
            run.train.partition_mode = kVariants[v].partition;
            const TrainResult result = run_training(run, data, nullptr);
            const auto named = result.final_eval->named();
            if (progress) {
                char line[160];
                std::snprintf(line, sizeof(line), "seed %llu %-18s t2i_R@1 %.2f zero_shot %.2f",
                              static_cast<unsigned long long>(run.seed), kVariants[v].name,
                              named.at("t2i_R@1"), named.at("zero_shot_top1"));
                progress(line);
            }
            for (const char* metric : kAblationMetrics) {
                values[metric][v].push_back(named.at(metric));
            }
        }
    }

    Json rows = Json::array();
    for (Index v = 0; v < std::size(kVariants); ++v) {
        Json row{{"name", kVariants[v].name},
                 {"target_mode", std::string(to_string(kVariants[v].target))},
                 {"partition_mode", std::string(to_string(kVariants[v].partition))}};
        Json per_seed = Json::object();
        for (const char* metric : kAblationMetrics) {
            const auto& xs = values[metric][v];
            double mean = 0.0;
            for (double x : xs) mean += x;
            row[std::string(metric) + "_mean"] = mean / static_cast<double>(xs.size());
            per_seed[metric] = xs;
        }
        row["per_seed"] = per_seed;
        rows.push_back(row);
    }

    const auto& r1 = values["t2i_R@1"];
    const auto& pos = values["mean_pos_sim"];
    const auto& neg = values["mean_neg_sim"];
    Index both_higher = 0;
    for (Index s = 0; s < cfg.ablate_seeds; ++s) {
        both_higher += pos[3][s] > pos[0][s] && neg[3][s] > neg[0][s];
    }
    Json win_loss{
        {"swapped+dynamic vs baseline", head_to_head(r1[3], r1[0])},
        {"swapped+dynamic vs swapped+static", head_to_head(r1[3], r1[2])},
        {"bootstrap+static vs swapped+dynamic", head_to_head(r1[1], r1[3])},
        {"bootstrap+static vs baseline", head_to_head(r1[1], r1[0])},
        {"swapped+static vs baseline", head_to_head(r1[2], r1[0])},
    };
    return Json{{"metric", "t2i_R@1"},
                {"seeds", cfg.ablate_seeds},
                {"base_seed", cfg.seed},
                {"rows", rows},
                {"win_loss", win_loss},
                {"similarity_both_higher_seeds", both_higher}};
}

} // namespace psd
