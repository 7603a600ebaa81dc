/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef FSCIL_H
#define FSCIL_H

#include <stddef.h>
#include <stdint.h>

/*
 Status code of every fallible call.
 */
typedef enum FscilStatus {
  FSCIL_STATUS_OK = 0,
  FSCIL_STATUS_NULL_POINTER = 1,
  FSCIL_STATUS_INVALID_UTF8 = 2,
  FSCIL_STATUS_INVALID_INPUT = 3,
  FSCIL_STATUS_DEGENERATE = 4,
  FSCIL_STATUS_PROTOCOL = 5,
  FSCIL_STATUS_CONFIG = 6,
  FSCIL_STATUS_PARSE = 7,
  FSCIL_STATUS_CONSISTENCY = 8,
  FSCIL_STATUS_SCHEMA = 9,
  FSCIL_STATUS_IO = 10,
  FSCIL_STATUS_OUT_OF_RANGE = 11,
  FSCIL_STATUS_PANIC = 12,
} FscilStatus;

/*
 Output format of [`fscil_report_save`].
 */
typedef enum FscilFormat {
  FSCIL_FORMAT_JSON = 0,
  FSCIL_FORMAT_CSV = 1,
} FscilFormat;

/*
 Evaluation track of a report.
 */
typedef enum FscilTrack {
  FSCIL_TRACK_SOFTMAX = 0,
  FSCIL_TRACK_NCM = 1,
} FscilTrack;

/*
 Opaque run configuration.
 */
typedef struct FscilConfig FscilConfig;

/*
 Opaque evaluation report.
 */
typedef struct FscilReport FscilReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the most recent failed call on this thread, or NULL. The
 pointer stays valid until the next failing call on the same thread.
 */
const char *fscil_last_error(void);

/*
 Releases a string returned by this library. NULL is ignored.

 # Safety
 `s` must come from this library and not be freed twice.
 */
void fscil_string_free(char *s);

/*
 Default configuration.

 # Safety
 `out` must be a valid pointer.
 */
enum FscilStatus fscil_config_new(struct FscilConfig **out);

/*
 Configuration parsed from TOML text; missing keys take their defaults.

 # Safety
 `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FscilStatus fscil_config_from_toml(const char *toml, struct FscilConfig **out);

/*
 Configuration read from a TOML file.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FscilStatus fscil_config_load(const char *path, struct FscilConfig **out);

/*
 Overrides the data seed.

 # Safety
 `config` must be a live handle.
 */
enum FscilStatus fscil_config_set_seed(struct FscilConfig *config, uint64_t seed);

/*
 Disables the comma-separated components among `vcg`, `ct`, `pfs`, `us`.

 # Safety
 `config` must be a live handle and `list` a NUL-terminated string.
 */
enum FscilStatus fscil_config_ablate(struct FscilConfig *config, const char *list);

/*
 The configuration as TOML; release with [`fscil_string_free`].

 # Safety
 `config` must be a live handle and `out` a valid pointer.
 */
enum FscilStatus fscil_config_to_toml(const struct FscilConfig *config, char **out);

/*
 Releases a configuration. NULL is ignored.

 # Safety
 `config` must come from this library and not be freed twice.
 */
void fscil_config_free(struct FscilConfig *config);

/*
 Runs every session. `data_dir` names a directory written by `gen-data`;
 NULL generates the protocol from the configuration.

 # Safety
 `config` must be a live handle, `data_dir` NULL or a NUL-terminated
 string, and `out` a valid pointer.
 */
enum FscilStatus fscil_run(const struct FscilConfig *config,
                           const char *data_dir,
                           struct FscilReport **out);

/*
 Report read from JSON, checked for internal consistency.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FscilStatus fscil_report_load(const char *path, struct FscilReport **out);

/*
 Writes the report as JSON or long-format CSV.

 # Safety
 `report` must be a live handle and `path` a NUL-terminated string.
 */
enum FscilStatus fscil_report_save(const struct FscilReport *report,
                                   const char *path,
                                   enum FscilFormat format);

/*
 Number of tracks in the report.

 # Safety
 `report` must be a live handle and `out` a valid pointer.
 */
enum FscilStatus fscil_report_track_count(const struct FscilReport *report, uintptr_t *out);

/*
 Kind of track `index`.

 # Safety
 `report` must be a live handle and `out` a valid pointer.
 */
enum FscilStatus fscil_report_track_kind(const struct FscilReport *report,
                                         uintptr_t index,
                                         enum FscilTrack *out);

/*
 Number of evaluated sessions in track `index`.

 # Safety
 `report` must be a live handle and `out` a valid pointer.
 */
enum FscilStatus fscil_report_session_count(const struct FscilReport *report,
                                            uintptr_t index,
                                            uintptr_t *out);

/*
 Accuracy over all seen classes after `session`.

 # Safety
 `report` must be a live handle and `out` a valid pointer.
 */
enum FscilStatus fscil_report_accuracy(const struct FscilReport *report,
                                       uintptr_t index,
                                       uintptr_t session,
                                       double *out);

/*
 Accuracy on the base-session classes after `session`.

 # Safety
 `report` must be a live handle and `out` a valid pointer.
 */
enum FscilStatus fscil_report_base_accuracy(const struct FscilReport *report,
                                            uintptr_t index,
                                            uintptr_t session,
                                            double *out);

/*
 Average accuracy of track `index`.

 # Safety
 `report` must be a live handle and `out` a valid pointer.
 */
enum FscilStatus fscil_report_average_accuracy(const struct FscilReport *report,
                                               uintptr_t index,
                                               double *out);

/*
 Performance drop of track `index`.

 # Safety
 `report` must be a live handle and `out` a valid pointer.
 */
enum FscilStatus fscil_report_performance_drop(const struct FscilReport *report,
                                               uintptr_t index,
                                               double *out);

/*
 Number of warnings raised during the run.

 # Safety
 `report` must be a live handle and `out` a valid pointer.
 */
enum FscilStatus fscil_report_warning_count(const struct FscilReport *report, uintptr_t *out);

/*
 Releases a report. NULL is ignored.

 # Safety
 `report` must come from this library and not be freed twice.
 */
void fscil_report_free(struct FscilReport *report);

/*
 Mean of `len` session accuracies.

 # Safety
 `values` must point to `len` doubles and `out` be a valid pointer.
 */
enum FscilStatus fscil_average_accuracy(const double *values, uintptr_t len, double *out);

/*
 First minus last of `len` session accuracies.

 # Safety
 `values` must point to `len` doubles and `out` be a valid pointer.
 */
enum FscilStatus fscil_performance_drop(const double *values, uintptr_t len, double *out);

/*
 `value` rounded half-up to `digits` decimals, as used in reports.
 */
double fscil_round_half_up(double value, int32_t digits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FSCIL_H */
