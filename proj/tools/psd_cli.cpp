// psd command-line driver. Talks to the library only through the C API.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "psd/psd.h"

namespace fs = std::filesystem;

namespace {

enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 2,
    kExitConfig = 3,
    kExitInput = 4,      // invalid, degenerate or oversized input
    kExitFormat = 5,     // unreadable binary file
    kExitIo = 6,
    kExitNumeric = 7,    // non-finite values or divergence
    kExitCheckFailed = 8,
    kExitInternal = 70,
};

int exit_code_for(psd_status s) {
    switch (s) {
    case PSD_OK: return kExitOk;
    case PSD_ERR_CONFIG: return kExitConfig;
    case PSD_ERR_INVALID_INPUT:
    case PSD_ERR_DEGENERATE_INPUT:
    case PSD_ERR_EMPTY_BATCH:
    case PSD_ERR_DIMENSION_OVERFLOW: return kExitInput;
    case PSD_ERR_BAD_MAGIC:
    case PSD_ERR_VERSION_MISMATCH:
    case PSD_ERR_TRUNCATED: return kExitFormat;
    case PSD_ERR_IO: return kExitIo;
    case PSD_ERR_NON_FINITE:
    case PSD_ERR_DIVERGENCE: return kExitNumeric;
    default: return kExitInternal;
    }
}

enum class Level { error = 0, info = 1, debug = 2 };
Level log_level = Level::info;

void log(Level level, const std::string& msg) {
    if (level <= log_level) {
        std::cerr << msg << '\n';
    }
}

struct Failure {
    int code;
};

void check(psd_status s, const std::string& what) {
    if (s != PSD_OK) {
        log(Level::error, "error: " + what + ": " + psd_status_name(s) + ": " + psd_last_error());
        throw Failure{exit_code_for(s)};
    }
}

// Owning wrappers for C API handles and strings.
struct Str {
    char* p = nullptr;
    ~Str() { psd_string_free(p); }
    std::string str() const { return p != nullptr ? std::string(p) : std::string(); }
};

template <typename T, void (*Destroy)(T*)>
struct Handle {
    T* p = nullptr;
    Handle() = default;
    Handle(const Handle&) = delete;
    Handle& operator=(const Handle&) = delete;
    ~Handle() { Destroy(p); }
};

using Config = Handle<psd_config, psd_config_destroy>;
using Dataset = Handle<psd_dataset, psd_dataset_destroy>;
using Model = Handle<psd_model, psd_model_destroy>;

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << content;
    out.close();
    if (!out) {
        log(Level::error, "error: cannot write '" + path.string() + "'");
        throw Failure{kExitIo};
    }
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        log(Level::error, "error: cannot create '" + dir.string() + "': " + ec.message());
        throw Failure{kExitIo};
    }
}

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool quiet = false;
    std::vector<std::string> overrides;  // key=value
};

// Config file first, then --set overrides, then the dedicated flags.
void build_config(Config& cfg, const Globals& g, const std::vector<std::pair<std::string, std::string>>& flags) {
    check(psd_config_create(&cfg.p), "config");
    if (!g.config_path.empty()) {
        check(psd_config_load(cfg.p, g.config_path.c_str()), "config");
    }
    for (const auto& kv : g.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            log(Level::error, "error: --set expects key=value, got '" + kv + "'");
            throw Failure{kExitUsage};
        }
        check(psd_config_set(cfg.p, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()), "--set " + kv);
    }
    if (g.seed) {
        check(psd_config_set(cfg.p, "seed", std::to_string(*g.seed).c_str()), "--seed");
    }
    for (const auto& [key, value] : flags) {
        if (!value.empty()) {
            check(psd_config_set(cfg.p, key.c_str(), value.c_str()), key);
        }
    }
}

void echo_config(const Config& cfg, const fs::path& dir) {
    Str text;
    check(psd_config_to_text(cfg.p, &text.p), "config");
    write_file(dir / "config.txt", text.str());
}

std::string config_value(const Config& cfg, const char* key) {
    Str v;
    check(psd_config_get(cfg.p, key, &v.p), key);
    return v.str();
}

// A dataset argument is either a PSDD file or a directory written by `generate`.
void point_at_dataset(Config& cfg, const std::string& dataset) {
    const fs::path p(dataset);
    if (fs::is_directory(p)) {
        check(psd_config_set(cfg.p, "data.train_file", (p / "train.psdd").string().c_str()), "--dataset");
        const fs::path held = p / "heldout.psdd";
        check(psd_config_set(cfg.p, "data.heldout_file", fs::exists(held) ? held.string().c_str() : ""),
              "--dataset");
    } else {
        check(psd_config_set(cfg.p, "data.train_file", dataset.c_str()), "--dataset");
    }
}

void print_line(const char* line, void* user) {
    auto* out = static_cast<std::ofstream*>(user);
    *out << line << '\n';
    if (log_level >= Level::debug) {
        std::cerr << line << '\n';
    }
}

void print_progress(const char* line, void*) {
    log(Level::info, line);
}

int cmd_generate(const Globals& g) {
    Config cfg;
    build_config(cfg, g, {});
    const fs::path dir(g.out);
    make_dir(dir);
    echo_config(cfg, dir);

    Dataset train, heldout;
    check(psd_dataset_generate(cfg.p, &train.p, &heldout.p), "generate");
    check(psd_dataset_save(train.p, (dir / "train.psdd").string().c_str()), "save");
    if (heldout.p != nullptr) {
        check(psd_dataset_save(heldout.p, (dir / "heldout.psdd").string().c_str()), "save");
    }
    std::uint64_t n = 0, corrupted = 0;
    check(psd_dataset_size(train.p, &n, &corrupted), "summary");
    std::cout << "n: " << n << '\n'
              << "K: " << config_value(cfg, "data.num_classes") << '\n'
              << "mismatch_rate: " << config_value(cfg, "data.mismatch_rate") << '\n'
              << "corrupted: " << corrupted << '\n';
    if (heldout.p != nullptr) {
        std::uint64_t held = 0;
        check(psd_dataset_size(heldout.p, &held, nullptr), "summary");
        std::cout << "heldout: " << held << '\n';
    }
    return kExitOk;
}

struct TrainFlags {
    std::string target_mode, alpha_schedule, partition_mode, klist, dataset;
};

int cmd_train(const Globals& g, const TrainFlags& f) {
    Config cfg;
    build_config(cfg, g,
                 {{"train.target_mode", f.target_mode},
                  {"train.alpha_schedule", f.alpha_schedule},
                  {"train.partition_mode", f.partition_mode},
                  {"eval.klist", f.klist}});
    if (!f.dataset.empty()) {
        point_at_dataset(cfg, f.dataset);
    }
    const fs::path dir(g.out);
    make_dir(dir);
    echo_config(cfg, dir);

    Dataset train, heldout;
    check(psd_dataset_generate(cfg.p, &train.p, &heldout.p), "dataset");
    std::uint64_t n = 0, corrupted = 0;
    check(psd_dataset_size(train.p, &n, &corrupted), "dataset");
    log(Level::info, "training on " + std::to_string(n) + " pairs (" + std::to_string(corrupted) +
                         " corrupted)");

    const fs::path metrics_path = dir / "metrics.jsonl";
    std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics) {
        log(Level::error, "error: cannot write '" + metrics_path.string() + "'");
        return kExitIo;
    }
    Model model;
    Str summary;
    check(psd_train(cfg.p, train.p, heldout.p, print_line, &metrics, &model.p, &summary.p), "train");
    metrics.close();
    if (!metrics) {
        log(Level::error, "error: cannot write '" + metrics_path.string() + "'");
        return kExitIo;
    }
    check(psd_model_save(model.p, (dir / "checkpoint").string().c_str()), "checkpoint");
    const auto j = nlohmann::ordered_json::parse(summary.str());
    write_file(dir / "summary.json", j.dump(2) + "\n");
    std::cout << j.dump(2) << '\n';
    return kExitOk;
}

struct EvalFlags {
    std::string checkpoint, dataset, klist;
};

int cmd_eval(const Globals& g, const EvalFlags& f) {
    Config cfg;
    build_config(cfg, g, {{"eval.klist", f.klist}});
    Model model;
    check(psd_model_load(f.checkpoint.c_str(), &model.p), "checkpoint");

    Dataset ds;
    if (!f.dataset.empty()) {
        fs::path p(f.dataset);
        if (fs::is_directory(p)) {
            p /= "heldout.psdd";
        }
        check(psd_dataset_load(p.string().c_str(), &ds.p), "dataset");
    } else {
        Dataset train;
        check(psd_dataset_generate(cfg.p, &train.p, &ds.p), "dataset");
        if (ds.p == nullptr) {
            log(Level::error, "error: no held-out set; pass --dataset or set data.holdout_per_class");
            return kExitConfig;
        }
    }

    Str report, pos, neg;
    check(psd_evaluate(cfg.p, model.p, ds.p, &report.p, &pos.p, &neg.p), "eval");
    if (!g.out.empty()) {
        const fs::path dir(g.out);
        make_dir(dir);
        echo_config(cfg, dir);
        write_file(dir / "report.json", report.str() + "\n");
        write_file(dir / "positive_hist.csv", pos.str());
        write_file(dir / "negative_hist.csv", neg.str());
    }
    std::cout << report.str() << '\n';
    return kExitOk;
}

int cmd_gradcheck(const Globals& g, std::uint64_t trials) {
    Str report, table;
    int passed = 0;
    check(psd_gradcheck(g.seed.value_or(0), trials, &report.p, &table.p, &passed), "gradcheck");
    if (!g.out.empty()) {
        make_dir(g.out);
        write_file(fs::path(g.out) / "gradcheck.json", report.str() + "\n");
    }
    std::cout << table.str();
    std::cout << (passed ? "all checks passed" : "gradient check FAILED") << '\n';
    return passed ? kExitOk : kExitCheckFailed;
}

int cmd_ablate(const Globals& g, const std::string& seeds, const std::string& dataset) {
    Config cfg;
    build_config(cfg, g, {{"ablate.seeds", seeds}});
    if (!dataset.empty()) {
        point_at_dataset(cfg, dataset);
    }
    if (!g.out.empty()) {
        make_dir(g.out);
        echo_config(cfg, g.out);
    }
    Str report;
    check(psd_ablate(cfg.p, print_progress, nullptr, &report.p), "ablate");
    const auto j = nlohmann::ordered_json::parse(report.str());
    if (!g.out.empty()) {
        write_file(fs::path(g.out) / "ablation.json", j.dump(2) + "\n");
    }

    std::printf("%-18s %9s %9s %9s %9s %9s\n", "variant", "t2i_R@1", "t2i_R@5", "i2t_R@1", "i2t_R@5", "zero_shot");
    for (const auto& row : j["rows"]) {
        std::printf("%-18s %9.2f %9.2f %9.2f %9.2f %9.2f\n", row["name"].get<std::string>().c_str(),
                    row["t2i_R@1_mean"].get<double>(), row["t2i_R@5_mean"].get<double>(),
                    row["i2t_R@1_mean"].get<double>(), row["i2t_R@5_mean"].get<double>(),
                    row["zero_shot_top1_mean"].get<double>());
    }
    std::printf("\nt2i_R@1 win/loss over %llu seeds\n", static_cast<unsigned long long>(j["seeds"].get<std::uint64_t>()));
    for (const auto& [name, wl] : j["win_loss"].items()) {
        std::printf("%-36s %2llu-%-2llu (ties %llu) mean diff %+.2f\n", name.c_str(),
                    static_cast<unsigned long long>(wl["wins"].get<std::uint64_t>()),
                    static_cast<unsigned long long>(wl["losses"].get<std::uint64_t>()),
                    static_cast<unsigned long long>(wl["ties"].get<std::uint64_t>()),
                    wl["mean_difference"].get<double>());
    }
    std::printf("seeds with higher positive and negative similarity (swapped+dynamic vs baseline): %llu\n",
                static_cast<unsigned long long>(j["similarity_both_higher_seeds"].get<std::uint64_t>()));
    if (g.out.empty()) {
        std::cout << j.dump(2) << '\n';
    }
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Progressive self-distillation for contrastive dual encoders"};
    app.require_subcommand(1);

    Globals g;
    std::uint64_t seed = 0;
    app.add_option("--config", g.config_path, "key = value configuration file")->check(CLI::ExistingFile);
    auto* seed_opt = app.add_option("--seed", seed, "run seed");
    app.add_option("--out", g.out, "output directory");
    app.add_flag("--quiet", g.quiet, "only print errors and results");
    app.add_option("--set", g.overrides, "override a config key (key=value), repeatable");

    auto* gen = app.add_subcommand("generate", "write a synthetic paired dataset");

    TrainFlags tf;
    auto* tr = app.add_subcommand("train", "train the dual encoder");
    tr->add_option("--target-mode", tf.target_mode, "swapped | bootstrap | none");
    tr->add_option("--alpha-schedule", tf.alpha_schedule, "cosine | linear");
    tr->add_option("--partition-mode", tf.partition_mode, "dynamic | static");
    tr->add_option("--klist", tf.klist, "recall cutoffs, e.g. 1,5,10");
    tr->add_option("--dataset", tf.dataset, "PSDD file or directory from generate");

    EvalFlags ef;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--checkpoint", ef.checkpoint, "checkpoint directory")->required();
    ev->add_option("--dataset", ef.dataset, "PSDD file or directory (uses heldout.psdd)");
    ev->add_option("--klist", ef.klist, "recall cutoffs, e.g. 1,5,10");

    std::uint64_t trials = 100;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    gc->add_option("--seeds", trials, "random instances per check")->check(CLI::PositiveNumber);

    std::string ablate_seeds, ablate_dataset;
    auto* ab = app.add_subcommand("ablate", "four-variant ablation over paired seeds");
    ab->add_option("--seeds", ablate_seeds, "number of paired seeds");
    ab->add_option("--dataset", ablate_dataset, "PSDD file or directory from generate");

    gen->callback([&] {
        if (g.out.empty()) throw CLI::RequiredError("--out");
    });
    tr->callback([&] {
        if (g.out.empty()) throw CLI::RequiredError("--out");
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }
    if (seed_opt->count() > 0) {
        g.seed = seed;
    }

    if (const char* env = std::getenv("PSD_LOG_LEVEL")) {
        const std::string v = env;
        if (v == "error") log_level = Level::error;
        else if (v == "info") log_level = Level::info;
        else if (v == "debug") log_level = Level::debug;
        else {
            std::cerr << "error: PSD_LOG_LEVEL must be error, info or debug\n";
            return kExitUsage;
        }
    }
    if (g.quiet) {
        log_level = Level::error;
    }

    try {
        if (gen->parsed()) return cmd_generate(g);
        if (tr->parsed()) return cmd_train(g, tf);
        if (ev->parsed()) return cmd_eval(g, ef);
        if (gc->parsed()) return cmd_gradcheck(g, trials);
        if (ab->parsed()) return cmd_ablate(g, ablate_seeds, ablate_dataset);
    } catch (const Failure& f) {
        return f.code;
    } catch (const std::exception& e) {
        log(Level::error, std::string("error: ") + e.what());
        return kExitInternal;
    }
    return kExitUsage;
}
