#include "psd/psd.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <new>
#include <sstream>
#include <string>

#include "psd/experiment.hpp"

struct psd_config {
    psd::ExperimentConfig cfg;
};

struct psd_dataset {
    psd::PairedDataset ds;
};

struct psd_model {
    psd::TrainResult result;
};

namespace {

thread_local std::string last_error;

psd_status to_status(psd::ErrorCode code) {
    return static_cast<psd_status>(static_cast<int>(code));
}

template <typename F>
psd_status guarded(F&& body) {
    try {
        last_error.clear();
        body();
        return PSD_OK;
    } catch (const psd::Error& e) {
        last_error = e.what();
        return to_status(e.code());
    } catch (const std::bad_alloc&) {
        last_error = "out of memory";
        return PSD_ERR_INTERNAL;
    } catch (const std::exception& e) {
        last_error = e.what();
        return PSD_ERR_INTERNAL;
    } catch (...) {
        last_error = "unknown exception";
        return PSD_ERR_INTERNAL;
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out == nullptr) {
        throw std::bad_alloc();
    }
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void need(const void* p, const char* what) {
    psd::require(p != nullptr, psd::ErrorCode::invalid_input, std::string(what) + " must not be NULL");
}

// Writes each complete line of a stream buffer to a callback.
class LineSink : public std::stringbuf {
public:
    LineSink(psd_line_fn fn, void* user) : fn_(fn), user_(user) {}

protected:
    int sync() override {
        std::string text = str();
        std::size_t start = 0;
        for (std::size_t nl; (nl = text.find('\n', start)) != std::string::npos; start = nl + 1) {
            const std::string line = text.substr(start, nl - start);
            fn_(line.c_str(), user_);
        }
        str(text.substr(start));
        return 0;
    }

private:
    psd_line_fn fn_;
    void* user_;
};

} // namespace

extern "C" {

const char* psd_version(void) {
    return "1.0.0";
}

const char* psd_status_name(psd_status status) {
    if (status == PSD_OK) {
        return "ok";
    }
    if (status == PSD_ERR_INTERNAL) {
        return "internal";
    }
    if (status < PSD_ERR_INVALID_INPUT || status > PSD_ERR_INTERNAL) {
        return "unknown";
    }
    return psd::error_code_name(static_cast<psd::ErrorCode>(static_cast<int>(status)));
}

const char* psd_last_error(void) {
    return last_error.c_str();
}

void psd_string_free(char* s) {
    std::free(s);
}

psd_status psd_config_create(psd_config** out) {
    return guarded([&] {
        need(out, "out");
        *out = new psd_config{};
    });
}

void psd_config_destroy(psd_config* cfg) {
    delete cfg;
}

psd_status psd_config_load(psd_config* cfg, const char* path) {
    return guarded([&] {
        need(cfg, "config");
        need(path, "path");
        cfg->cfg.merge_file(path);
    });
}

psd_status psd_config_merge_text(psd_config* cfg, const char* text) {
    return guarded([&] {
        need(cfg, "config");
        need(text, "text");
        cfg->cfg.merge_text(text);
    });
}

psd_status psd_config_set(psd_config* cfg, const char* key, const char* value) {
    return guarded([&] {
        need(cfg, "config");
        need(key, "key");
        need(value, "value");
        cfg->cfg.set(key, value);
    });
}

psd_status psd_config_get(const psd_config* cfg, const char* key, char** out) {
    return guarded([&] {
        need(cfg, "config");
        need(key, "key");
        need(out, "out");
        *out = dup_string(cfg->cfg.get(key));
    });
}

psd_status psd_config_to_text(const psd_config* cfg, char** out) {
    return guarded([&] {
        need(cfg, "config");
        need(out, "out");
        *out = dup_string(cfg->cfg.to_text());
    });
}

psd_status psd_dataset_generate(const psd_config* cfg, psd_dataset** train, psd_dataset** heldout) {
    return guarded([&] {
        need(cfg, "config");
        need(train, "train");
        psd::SplitDataset split = psd::make_datasets(cfg->cfg);
        auto* t = new psd_dataset{std::move(split.train)};
        if (heldout != nullptr) {
            *heldout = split.heldout.size() > 0 ? new psd_dataset{std::move(split.heldout)} : nullptr;
        }
        *train = t;
    });
}

psd_status psd_dataset_load(const char* path, psd_dataset** out) {
    return guarded([&] {
        need(path, "path");
        need(out, "out");
        *out = new psd_dataset{psd::load_pairs(path)};
    });
}

psd_status psd_dataset_save(const psd_dataset* ds, const char* path) {
    return guarded([&] {
        need(ds, "dataset");
        need(path, "path");
        psd::save_pairs(ds->ds, path);
    });
}

psd_status psd_dataset_summary(const psd_dataset* ds, char** json) {
    return guarded([&] {
        need(ds, "dataset");
        need(json, "json");
        *json = dup_string(psd::dataset_summary(ds->ds).dump());
    });
}

psd_status psd_dataset_size(const psd_dataset* ds, uint64_t* images, uint64_t* corrupted) {
    return guarded([&] {
        need(ds, "dataset");
        if (images != nullptr) {
            *images = ds->ds.size();
        }
        if (corrupted != nullptr) {
            *corrupted = ds->ds.corrupted_count();
        }
    });
}

void psd_dataset_destroy(psd_dataset* ds) {
    delete ds;
}

psd_status psd_train(const psd_config* cfg, const psd_dataset* train, const psd_dataset* heldout,
                     psd_line_fn metrics, void* user, psd_model** model, char** summary) {
    return guarded([&] {
        need(cfg, "config");
        need(train, "train dataset");
        psd::SplitDataset data{train->ds, heldout != nullptr ? heldout->ds : psd::PairedDataset{}};
        LineSink sink(metrics, user);
        std::ostream stream(&sink);
        psd::TrainResult result = psd::run_training(cfg->cfg, data, metrics != nullptr ? &stream : nullptr);
        stream.flush();

        if (summary != nullptr) {
            psd::Json j{{"epochs", result.epochs_completed},
                        {"steps", result.optimizer.step},
                        {"scale", result.model.temperature.scale()}};
            if (!result.history.steps.empty()) {
                j["final_loss"] = result.history.steps.back().loss;
            }
            if (result.final_eval) {
                psd::Json m = psd::Json::object();
                for (const auto& [name, value] : result.final_eval->named()) {
                    m[name] = value;
                }
                j["final_eval"] = m;
            }
            *summary = dup_string(j.dump());
        }
        if (model != nullptr) {
            *model = new psd_model{std::move(result)};
        }
    });
}

psd_status psd_model_save(const psd_model* model, const char* dir) {
    return guarded([&] {
        need(model, "model");
        need(dir, "dir");
        psd::save_checkpoint(dir, model->result);
    });
}

psd_status psd_model_load(const char* dir, psd_model** out) {
    return guarded([&] {
        need(dir, "dir");
        need(out, "out");
        *out = new psd_model{psd::load_checkpoint(dir)};
    });
}

void psd_model_destroy(psd_model* model) {
    delete model;
}

psd_status psd_evaluate(const psd_config* cfg, const psd_model* model, const psd_dataset* ds,
                        char** report, char** positive_csv, char** negative_csv) {
    return guarded([&] {
        need(cfg, "config");
        need(model, "model");
        need(ds, "dataset");
        need(report, "report");
        const auto& c = cfg->cfg;
        psd::EvalOutputs out = psd::evaluate_report(model->result.model, ds->ds, c.train.eval_k,
                                                    c.train.histogram_bins, c.linear_probe, c.probe);
        std::string r = out.report.dump(2);
        char* pos = positive_csv != nullptr ? dup_string(out.positive_csv) : nullptr;
        char* neg = nullptr;
        try {
            neg = negative_csv != nullptr ? dup_string(out.negative_csv) : nullptr;
            *report = dup_string(r);
        } catch (...) {
            std::free(pos);
            std::free(neg);
            throw;
        }
        if (positive_csv != nullptr) *positive_csv = pos;
        if (negative_csv != nullptr) *negative_csv = neg;
    });
}

psd_status psd_gradcheck(uint64_t seed, uint64_t trials, char** report, char** table, int* passed) {
    return guarded([&] {
        const psd::GradcheckReport r = psd::run_gradcheck(seed, trials);
        if (passed != nullptr) {
            *passed = r.all_passed() ? 1 : 0;
        }
        if (report != nullptr) {
            *report = dup_string(r.to_json().dump(2));
        }
        if (table != nullptr) {
            *table = dup_string(r.table());
        }
    });
}

psd_status psd_ablate(const psd_config* cfg, psd_line_fn progress, void* user, char** report) {
    return guarded([&] {
        need(cfg, "config");
        need(report, "report");
        std::function<void(const std::string&)> cb;
        if (progress != nullptr) {
            cb = [&](const std::string& line) { progress(line.c_str(), user); };
        }
        *report = dup_string(psd::run_ablation(cfg->cfg, cb).dump(2));
    });
}

} // extern "C"
