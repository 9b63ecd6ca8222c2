#ifndef PSD_PSD_H
#define PSD_PSD_H

/* C interface to the psd library. Every call returns a psd_status; on failure the message
 * is available from psd_last_error() on the same thread until the next call. Strings
 * returned through char** out-parameters are owned by the caller and released with
 * psd_string_free. */

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define PSD_API __declspec(dllexport)
#else
#define PSD_API __attribute__((visibility("default")))
#endif

typedef enum psd_status {
    PSD_OK = 0,
    PSD_ERR_INVALID_INPUT = 1,
    PSD_ERR_DEGENERATE_INPUT = 2,
    PSD_ERR_EMPTY_BATCH = 3,
    PSD_ERR_NON_FINITE = 4,
    PSD_ERR_DIVERGENCE = 5,
    PSD_ERR_BAD_MAGIC = 6,
    PSD_ERR_VERSION_MISMATCH = 7,
    PSD_ERR_TRUNCATED = 8,
    PSD_ERR_DIMENSION_OVERFLOW = 9,
    PSD_ERR_IO = 10,
    PSD_ERR_CONFIG = 11,
    PSD_ERR_INTERNAL = 12
} psd_status;

typedef struct psd_config psd_config;
typedef struct psd_dataset psd_dataset;
typedef struct psd_model psd_model;

/* Receives one line of text (no trailing newline). */
typedef void (*psd_line_fn)(const char* line, void* user);

PSD_API const char* psd_version(void);
PSD_API const char* psd_status_name(psd_status status);
PSD_API const char* psd_last_error(void);
PSD_API void psd_string_free(char* s);

/* Configuration: plain-text "key = value" with defaults for every key. */
PSD_API psd_status psd_config_create(psd_config** out);
PSD_API void psd_config_destroy(psd_config* cfg);
PSD_API psd_status psd_config_load(psd_config* cfg, const char* path);
PSD_API psd_status psd_config_merge_text(psd_config* cfg, const char* text);
PSD_API psd_status psd_config_set(psd_config* cfg, const char* key, const char* value);
PSD_API psd_status psd_config_get(const psd_config* cfg, const char* key, char** out);
PSD_API psd_status psd_config_to_text(const psd_config* cfg, char** out);

/* Datasets. generate builds (or loads, if data.train_file is set) the training set and the
 * held-out set; heldout may be NULL, and *heldout is NULL when the config has none. */
PSD_API psd_status psd_dataset_generate(const psd_config* cfg, psd_dataset** train, psd_dataset** heldout);
PSD_API psd_status psd_dataset_load(const char* path, psd_dataset** out);
PSD_API psd_status psd_dataset_save(const psd_dataset* ds, const char* path);
PSD_API psd_status psd_dataset_summary(const psd_dataset* ds, char** json);
PSD_API psd_status psd_dataset_size(const psd_dataset* ds, uint64_t* images, uint64_t* corrupted);
PSD_API void psd_dataset_destroy(psd_dataset* ds);

/* Training. metrics receives one JSON object per step and per evaluation. summary (optional)
 * gets a JSON object with the run totals and the final held-out metrics. */
PSD_API psd_status psd_train(const psd_config* cfg, const psd_dataset* train, const psd_dataset* heldout,
                             psd_line_fn metrics, void* user, psd_model** model, char** summary);

/* Checkpoint directory with image.psdw, text.psdw and state.psds. */
PSD_API psd_status psd_model_save(const psd_model* model, const char* dir);
PSD_API psd_status psd_model_load(const char* dir, psd_model** out);
PSD_API void psd_model_destroy(psd_model* model);

/* Evaluation with eval.klist / eval.histogram_bins / eval.linear_probe from cfg. The CSV
 * outputs are optional. */
PSD_API psd_status psd_evaluate(const psd_config* cfg, const psd_model* model, const psd_dataset* ds,
                                char** report, char** positive_csv, char** negative_csv);

/* Finite-difference checks over every analytic gradient. passed is set to 1 or 0. */
PSD_API psd_status psd_gradcheck(uint64_t seed, uint64_t trials, char** report, char** table, int* passed);

/* Four-row ablation over ablate.seeds paired seeds. */
PSD_API psd_status psd_ablate(const psd_config* cfg, psd_line_fn progress, void* user, char** report);

#ifdef __cplusplus
}
#endif

#endif
