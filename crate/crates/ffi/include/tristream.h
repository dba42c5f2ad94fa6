#ifndef TRISTREAM_H
#define TRISTREAM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the CLI exit codes.
 */
typedef enum TsmStatus {
  Ok = 0,
  /**
   * Unclassified failure.
   */
  Unknown = 1,
  /**
   * Invalid configuration or arguments.
   */
  Config = 2,
  /**
   * I/O or serialization failure.
   */
  Io = 3,
  /**
   * Non-finite numerics during training.
   */
  Numeric = 4,
  /**
   * Incompatible shapes or versions.
   */
  Incompatible = 5,
  /**
   * A required pointer argument was null.
   */
  NullPointer = 6,
  /**
   * A string argument was not valid UTF-8.
   */
  InvalidUtf8 = 7,
} TsmStatus;

/**
 * Opaque trained-model handle.
 */
typedef struct TsmCheckpoint TsmCheckpoint;

/**
 * Opaque dataset handle.
 */
typedef struct TsmDataset TsmDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message for the current thread; valid until the next
 * failing call on this thread. Never null.
 */
const char *tsm_last_error_message(void);

/**
 * Generate a synthetic dataset from a run-config JSON string.
 *
 * # Safety
 * `config_json` must be NUL-terminated; `out` must be a valid pointer.
 */
enum TsmStatus tsm_dataset_generate(const char *config_json, struct TsmDataset **out);

/**
 * Load a dataset previously written by `tsm_dataset_write` or the CLI.
 *
 * # Safety
 * `dir` must be NUL-terminated; `out` must be a valid pointer.
 */
enum TsmStatus tsm_dataset_read(const char *dir, struct TsmDataset **out);

/**
 * Write a dataset (manifest.json plus one binary blob per stream).
 *
 * # Safety
 * `ds` must come from this library; `dir` must be NUL-terminated.
 */
enum TsmStatus tsm_dataset_write(const struct TsmDataset *ds, const char *dir);

/**
 * Number of snippets in the dataset; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a handle from this library.
 */
uintptr_t tsm_dataset_len(const struct TsmDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle from this library, not yet freed.
 */
void tsm_dataset_free(struct TsmDataset *ds);

/**
 * Train on `ds`, splitting train/test internally per the config.
 *
 * # Safety
 * `config_json` must be NUL-terminated; `ds` a valid dataset handle;
 * `out` a valid pointer.
 */
enum TsmStatus tsm_train(const char *config_json,
                         const struct TsmDataset *ds,
                         struct TsmCheckpoint **out);

/**
 * # Safety
 * `ckpt` must come from this library; `dir` must be NUL-terminated.
 */
enum TsmStatus tsm_checkpoint_save(const struct TsmCheckpoint *ckpt, const char *dir);

/**
 * # Safety
 * `dir` must be NUL-terminated; `out` must be a valid pointer.
 */
enum TsmStatus tsm_checkpoint_load(const char *dir, struct TsmCheckpoint **out);

/**
 * # Safety
 * `ckpt` must be null or a handle from this library, not yet freed.
 */
void tsm_checkpoint_free(struct TsmCheckpoint *ckpt);

/**
 * k-NN evaluation: the dataset is re-split with the checkpoint's stored
 * fraction and seed, the train side is the gallery, the test side the
 * queries. On success `*json_out` holds a JSON report string.
 *
 * # Safety
 * `ckpt` and `ds` must be valid handles; `json_out` a valid pointer.
 */
enum TsmStatus tsm_evaluate(const struct TsmCheckpoint *ckpt,
                            const struct TsmDataset *ds,
                            uintptr_t k,
                            char **json_out);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void tsm_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* TRISTREAM_H */
