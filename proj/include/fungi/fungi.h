#ifndef FUNGI_H
#define FUNGI_H

/* C interface to the fungi feature extractor and evaluation kit.
 *
 * Every function returns a fungi_status. On failure the message of the most recent error on
 * the calling thread is available from fungi_last_error(). Handles are opaque and owned by the
 * caller; release them with the matching *_free function (NULL is accepted). */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define FUNGI_API __declspec(dllexport)
#else
#define FUNGI_API __attribute__((visibility("default")))
#endif

typedef enum fungi_status {
    FUNGI_OK = 0,
    FUNGI_ERR_INTERNAL = 1,
    FUNGI_ERR_CONFIG = 2,
    FUNGI_ERR_DATA = 3,
    FUNGI_ERR_NUMERIC = 4
} fungi_status;

typedef struct fungi_config fungi_config_t;
typedef struct fungi_bank fungi_bank_t;
typedef struct fungi_report fungi_report_t;

typedef void (*fungi_log_fn)(const char* message, void* user);

FUNGI_API const char* fungi_version(void);
FUNGI_API const char* fungi_last_error(void);

/* ---- configuration ---- */
FUNGI_API fungi_status fungi_config_default(fungi_config_t** out);
FUNGI_API fungi_status fungi_config_load(const char* path, fungi_config_t** out);
FUNGI_API fungi_status fungi_config_parse(const char* text, fungi_config_t** out);
FUNGI_API fungi_status fungi_config_set(fungi_config_t* config, const char* section, const char* key, const char* value);
/* Copies the value, NUL-terminated, into buf; *needed receives the full length + 1. */
FUNGI_API fungi_status fungi_config_get(const fungi_config_t* config, const char* section, const char* key, char* buf,
                                        size_t size, size_t* needed);
/* Canonical text form; same buffer contract as fungi_config_get. */
FUNGI_API fungi_status fungi_config_text(const fungi_config_t* config, char* buf, size_t size, size_t* needed);
FUNGI_API fungi_status fungi_config_write(const fungi_config_t* config, const char* path);
FUNGI_API fungi_status fungi_config_hash(const fungi_config_t* config, uint64_t* out);
FUNGI_API void fungi_config_free(fungi_config_t* config);

/* ---- data ---- */
/* Writes <dir>/train.fngi and <dir>/test.fngi from the [synth] section. */
FUNGI_API fungi_status fungi_synth(const fungi_config_t* config, const char* dir);

/* Extracts the features of <data_dir>/<split>.fngi; SimCLR negatives come from train.fngi. */
FUNGI_API fungi_status fungi_extract(const fungi_config_t* config, const char* data_dir, const char* split, size_t jobs,
                                     fungi_log_fn log, void* log_user, fungi_bank_t** out);

/* ---- feature banks ---- */
FUNGI_API fungi_status fungi_bank_load(const char* path, fungi_bank_t** out);
FUNGI_API fungi_status fungi_bank_save(const fungi_bank_t* bank, const char* path);
FUNGI_API size_t fungi_bank_size(const fungi_bank_t* bank);
FUNGI_API size_t fungi_bank_dim(const fungi_bank_t* bank);
FUNGI_API uint64_t fungi_bank_config_hash(const fungi_bank_t* bank);
/* Copies row i of the fused matrix (fungi_bank_dim values). */
FUNGI_API fungi_status fungi_bank_row(const fungi_bank_t* bank, size_t i, double* out);
/* The configuration the bank was extracted with. */
FUNGI_API fungi_status fungi_bank_config(const fungi_bank_t* bank, fungi_config_t** out);
FUNGI_API void fungi_bank_free(fungi_bank_t* bank);

/* Fits PCA on train, replaces both banks' fused matrices and writes the model to pca_path
 * (may be NULL). */
FUNGI_API fungi_status fungi_fuse_pca(fungi_bank_t* train, fungi_bank_t* test, size_t out_dim, const char* pca_path);

/* ---- evaluation ---- */
FUNGI_API fungi_status fungi_eval(const fungi_config_t* config, const fungi_bank_t* train, const fungi_bank_t* test,
                                  size_t jobs, fungi_report_t** out);
FUNGI_API fungi_status fungi_cluster(const fungi_config_t* config, const fungi_bank_t* bank, fungi_report_t** out);
FUNGI_API fungi_status fungi_probe(const fungi_config_t* config, const fungi_bank_t* train, const fungi_bank_t* test,
                                   fungi_report_t** out);
FUNGI_API fungi_status fungi_retrieve(const fungi_config_t* config, const fungi_bank_t* train, const fungi_bank_t* test,
                                      fungi_report_t** out);
FUNGI_API fungi_status fungi_cka(const fungi_config_t* config, const fungi_bank_t* bank, fungi_report_t** out);
/* Memory bank from <data_dir>/train.fngi, queries from <data_dir>/test.fngi. */
FUNGI_API fungi_status fungi_segment(const fungi_config_t* config, const char* data_dir, size_t jobs, fungi_log_fn log,
                                     void* log_user, fungi_report_t** out);

/* ---- reports ---- */
/* Returned strings live until the report is freed or the same accessor is called again. */
FUNGI_API const char* fungi_report_csv(const fungi_report_t* report);
FUNGI_API const char* fungi_report_table(const fungi_report_t* report);
FUNGI_API size_t fungi_report_rows(const fungi_report_t* report);
/* Value of the first row matching name and metric. */
FUNGI_API fungi_status fungi_report_value(const fungi_report_t* report, const char* name, const char* metric, double* out);
/* Writes the CSV to path and every attachment to path + suffix. */
FUNGI_API fungi_status fungi_report_save(const fungi_report_t* report, const char* path);
FUNGI_API void fungi_report_free(fungi_report_t* report);

#ifdef __cplusplus
}
#endif

#endif /* FUNGI_H */
