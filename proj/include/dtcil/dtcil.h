/* SPDX-License-Identifier: Apache-2.0 */

/* C interface to the class-incremental learning library.
 *
 * Every call returns a dtcil_status. On failure the message is available from
 * dtcil_last_error() until the next call on the same thread. Strings returned
 * through char** out-parameters are owned by the caller; release them with
 * dtcil_free_string(). */

#ifndef DTCIL_DTCIL_H
#define DTCIL_DTCIL_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define DTCIL_API __declspec(dllexport)
#else
#define DTCIL_API __attribute__((visibility("default")))
#endif

typedef enum dtcil_status {
  DTCIL_OK = 0,
  DTCIL_ERR_INVALID_ARGUMENT = 1, /* null handle or pointer, bad numeric argument */
  DTCIL_ERR_CONFIG = 2,           /* config does not parse or fails validation */
  DTCIL_ERR_IO = 3,               /* missing or unreadable file or directory */
  DTCIL_ERR_RUNTIME = 4           /* anything raised while training or evaluating */
} dtcil_status;

typedef struct dtcil_experiment dtcil_experiment;

/* stage is one of "base", "second_teacher", "generator", "increment", "skip". */
typedef void (*dtcil_progress_fn)(uint64_t seed, int time_index, const char* stage, void* user);

DTCIL_API const char* dtcil_version(void);
DTCIL_API const char* dtcil_last_error(void);
DTCIL_API const char* dtcil_status_name(dtcil_status s);
DTCIL_API void dtcil_free_string(char* s);

/* Experiment configs. Loading fills defaults and validates. */
DTCIL_API dtcil_status dtcil_experiment_load(const char* config_path, dtcil_experiment** out);
DTCIL_API dtcil_status dtcil_experiment_parse(const char* config_json, dtcil_experiment** out);
DTCIL_API void dtcil_experiment_free(dtcil_experiment* e);

/* Reads DTCIL_OUTPUT_DIR and DTCIL_DEVICE; no other setting comes from the environment. */
DTCIL_API dtcil_status dtcil_experiment_apply_env(dtcil_experiment* e);
DTCIL_API dtcil_status dtcil_experiment_set_output_dir(dtcil_experiment* e, const char* dir);
DTCIL_API dtcil_status dtcil_experiment_set_device(dtcil_experiment* e, const char* device);
DTCIL_API dtcil_status dtcil_experiment_set_seeds(dtcil_experiment* e, const uint64_t* seeds, size_t n);

DTCIL_API dtcil_status dtcil_experiment_validate(const dtcil_experiment* e);
/* Config with every default written out. */
DTCIL_API dtcil_status dtcil_experiment_config_json(const dtcil_experiment* e, char** out_json);
DTCIL_API dtcil_status dtcil_experiment_output_dir(const dtcil_experiment* e, char** out_dir);

/* Copy of e with the incremental alpha0 replaced and output written to <output_dir>/alpha0_<value>.
 * Used to search alpha0 by hand; each variant is then run like any other experiment. */
DTCIL_API dtcil_status dtcil_experiment_alpha_variant(const dtcil_experiment* e, double alpha0,
                                                      dtcil_experiment** out);

/* Trains every seed, skipping phases already complete on disk. phases_trained may be null. */
DTCIL_API dtcil_status dtcil_experiment_run(dtcil_experiment* e, dtcil_progress_fn progress, void* user,
                                            int* phases_trained);

/* Aligns finished runs by time and writes <out_dir>/compare.csv and <out_dir>/compare.svg. */
DTCIL_API dtcil_status dtcil_compare(const char* const* run_dirs, size_t n, const char* out_dir);

/* Writes a PPM grid (one labelled row per old class, per_class samples each) and a JSON sidecar. */
DTCIL_API dtcil_status dtcil_export_samples(const char* run_dir, int time_index, int per_class, uint64_t seed,
                                            const char* out_ppm);

#ifdef __cplusplus
}
#endif

#endif /* DTCIL_DTCIL_H */
