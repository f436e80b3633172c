/* Copyright 2026 The vtexit Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the vtexit library. All objects are opaque handles owned by
 * the caller and released with the matching *_free function. Every call
 * returns a vtx_status; on failure vtx_last_error() describes the problem
 * (thread-local, valid until the next failing call on the same thread).
 * Strings returned through char** are released with vtx_string_free.
 */

#ifndef VTEXIT_VTEXIT_H_
#define VTEXIT_VTEXIT_H_

#include <stddef.h>
#include <stdint.h>

#if defined(VTX_BUILDING_LIBRARY)
#define VTX_API __attribute__((visibility("default")))
#else
#define VTX_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum vtx_status {
  VTX_OK = 0,
  VTX_ERR_INTERNAL = 1,
  VTX_ERR_INVALID = 2, /* contract violation: bad argument, schema mismatch */
  VTX_ERR_IO = 3       /* missing, unreadable or truncated file */
} vtx_status;

typedef struct vtx_dataset vtx_dataset;
typedef struct vtx_model vtx_model;
typedef struct vtx_gates vtx_gates;

/* Sentinel for "no layer" arguments. */
#define VTX_NO_LAYER (-1)

VTX_API const char* vtx_version(void);
VTX_API const char* vtx_last_error(void);
VTX_API void vtx_string_free(char* s);

/* Datasets. spec_json may be NULL or "{}" for defaults. */
VTX_API vtx_status vtx_dataset_generate(const char* spec_json, uint64_t seed, vtx_dataset** out);
VTX_API vtx_status vtx_dataset_save(const vtx_dataset* ds, const char* dir);
VTX_API vtx_status vtx_dataset_load(const char* dir, vtx_dataset** out);
/* split: "train", "val" or "test". */
VTX_API vtx_status vtx_dataset_size(const vtx_dataset* ds, const char* split, size_t* out);
VTX_API void vtx_dataset_free(vtx_dataset* ds);

/* Models. config_json holds optional "model" and "train" objects and a
 * "seed"; missing fields take defaults derived from the dataset. If
 * log_path is not NULL, one JSON line per evaluation is appended there. */
VTX_API vtx_status vtx_model_train(const char* config_json, const vtx_dataset* ds, const char* log_path,
                                   vtx_model** out);
VTX_API vtx_status vtx_model_random(const char* model_config_json, uint64_t seed, vtx_model** out);
VTX_API vtx_status vtx_model_save(const vtx_model* m, const char* path);
VTX_API vtx_status vtx_model_load(const char* path, vtx_model** out);
/* Model config as a JSON object. */
VTX_API vtx_status vtx_model_config(const vtx_model* m, char** json_out);
VTX_API vtx_status vtx_model_fingerprint(const vtx_model* m, uint64_t* out);
VTX_API void vtx_model_free(vtx_model* m);

/* Prefill plus greedy decoding of one prompt. visual is num_visual x
 * hidden_dim row-major (num_visual may be 0). exit_layer is
 * VTX_NO_LAYER or in [0, L]. logits_out receives vocab_size values for the
 * first generated token; tokens_out receives up to max_new_tokens ids. */
VTX_API vtx_status vtx_model_generate(const vtx_model* m, const double* visual, size_t num_visual,
                                      const int32_t* text, size_t text_len, int32_t exit_layer,
                                      size_t max_new_tokens, int32_t* tokens_out, size_t* num_tokens,
                                      double* logits_out, size_t logits_len);

/* Analyses over one split. */
VTX_API vtx_status vtx_stats(const vtx_model* m, const vtx_dataset* ds, const char* split, int32_t exit_layer,
                             const char* stats_csv, const char* entropy_csv);
VTX_API vtx_status vtx_sweep(const vtx_model* m, const vtx_dataset* ds, const char* split, const size_t* layers,
                             size_t num_layers, const char* out_csv);
/* Labels every layer in [1, L-1] for each sample of the split. */
VTX_API vtx_status vtx_label(const vtx_model* m, const vtx_dataset* ds, const char* split, double alpha,
                             const char* out_csv);

/* Gates. train_config_json fields: selector, attn_feature_dim, alpha, lr,
 * epochs, sample_fraction, gate_hidden, use_bias, seed, first_layer,
 * last_layer, split. labels_csv may be NULL to label on the fly. */
VTX_API vtx_status vtx_gates_train(const vtx_model* m, const vtx_dataset* ds, const char* labels_csv,
                                   const char* train_config_json, const char* log_path, vtx_gates** out);
VTX_API vtx_status vtx_gates_save(const vtx_gates* g, const char* path);
VTX_API vtx_status vtx_gates_load(const char* path, vtx_gates** out);
VTX_API void vtx_gates_free(vtx_gates* g);

/* Evaluation. gates may be NULL. force_layer: VTX_NO_LAYER uses the gates
 * (or plain baseline when gates is NULL); >= 0 forces the exit there,
 * where L means never. json_out receives the summary. */
VTX_API vtx_status vtx_eval(const vtx_model* m, const vtx_gates* g, const vtx_dataset* ds, const char* split,
                            int32_t force_layer, char** json_out);
VTX_API vtx_status vtx_compare(const vtx_model* m, const vtx_gates* g, const vtx_dataset* ds, const char* split,
                               size_t prune_layer, double keep_ratio, const char* out_csv);

#ifdef __cplusplus
}
#endif

#endif /* VTEXIT_VTEXIT_H_ */
