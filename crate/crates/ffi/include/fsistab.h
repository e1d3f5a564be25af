#ifndef FSISTAB_H
#define FSISTAB_H

#include <stdbool.h>
#include <stddef.h>

// Status codes; the non-zero values from 2 to 5 match the CLI exit codes.
typedef enum {
  FSISTAB_STATUS_OK = 0,
  FSISTAB_STATUS_ASSEMBLY = 2,
  FSISTAB_STATUS_CONFIG = 3,
  FSISTAB_STATUS_CRITERION = 4,
  FSISTAB_STATUS_INTEGRATION = 5,
  FSISTAB_STATUS_NULL_POINTER = 10,
  FSISTAB_STATUS_INVALID_UTF8 = 11,
  FSISTAB_STATUS_BUFFER_TOO_SMALL = 12,
  FSISTAB_STATUS_PANIC = 13,
} FsistabStatus;

// Run configuration.
typedef struct FsistabConfig FsistabConfig;

// Synthesized delayed feedback law.
typedef struct FsistabLaw FsistabLaw;

// Assembled system together with its computed spectrum.
typedef struct FsistabModel FsistabModel;

// Simulated trajectory.
typedef struct FsistabTrajectory FsistabTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *fsistab_version(void);

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `cap`). Returns the full message length without the terminator.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t fsistab_last_error(char *buf, size_t cap);

// Creates the default configuration.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
FsistabStatus fsistab_config_default(FsistabConfig **out);

// Loads a configuration file (key = value text or JSON).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid handle slot.
FsistabStatus fsistab_config_load(const char *path, FsistabConfig **out);

// Applies one `key=value` override.
//
// # Safety
// `cfg` must be a live config handle and `kv` a NUL-terminated string.
FsistabStatus fsistab_config_set(FsistabConfig *cfg, const char *kv);

// # Safety
// `cfg` must be null or a handle from this library, not used afterwards.
void fsistab_config_free(FsistabConfig *cfg);

// Assembles the system selected by `cfg` and computes its rightmost spectrum.
//
// # Safety
// `cfg` must be a live config handle and `out` a valid handle slot.
FsistabStatus fsistab_model_build(const FsistabConfig *cfg, FsistabModel **out);

// State dimension of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live model handle.
size_t fsistab_model_dim(const FsistabModel *model);

// Copies the computed eigenvalues (rightmost first). `len` receives the count
// even when the buffers are too small.
//
// # Safety
// `re` and `im` must hold `cap` doubles; `len` must be null or writable.
FsistabStatus fsistab_model_eigenvalues(const FsistabModel *model,
                                        double *re,
                                        double *im,
                                        size_t cap,
                                        size_t *len);

// Hautus test at `sigma = gamma` from `cfg`. Writes the minimal ratio
// `|B* e| / |e|` and whether the test passed; a failed test is not an error.
//
// # Safety
// Handles must be live; `min_ratio` and `passed` must be null or writable.
FsistabStatus fsistab_hautus(const FsistabModel *model,
                             const FsistabConfig *cfg,
                             double *min_ratio,
                             bool *passed);

// Synthesizes the delayed feedback law with the control settings of `cfg`.
//
// # Safety
// Handles must be live and `out` a valid handle slot.
FsistabStatus fsistab_synthesize(const FsistabModel *model,
                                 const FsistabConfig *cfg,
                                 FsistabLaw **out);

// Number of modes the law acts on, or 0 for a null handle.
//
// # Safety
// `law` must be null or a live law handle.
size_t fsistab_law_modes(const FsistabLaw *law);

// Eigenvalues of the reduced closed loop.
//
// # Safety
// As for [`fsistab_model_eigenvalues`].
FsistabStatus fsistab_law_closed_loop(const FsistabLaw *law,
                                      double *re,
                                      double *im,
                                      size_t cap,
                                      size_t *len);

// Serializes the law as JSON into `buf` (NUL-terminated); `len` receives the
// length without the terminator even when `buf` is too small.
//
// # Safety
// `buf` must hold `cap` bytes; `len` must be null or writable.
FsistabStatus fsistab_law_to_json(const FsistabLaw *law, char *buf, size_t cap, size_t *len);

// # Safety
// `law` must be null or a handle from this library, not used afterwards.
void fsistab_law_free(FsistabLaw *law);

// Simulates from the seeded initial state of `cfg`. `law` may be null for an
// open-loop run. The nonlinear term is included when `simulation.nonlinear` is set.
//
// # Safety
// Handles must be live (or `law` null) and `out` a valid handle slot.
FsistabStatus fsistab_simulate(const FsistabModel *model,
                               const FsistabLaw *law,
                               const FsistabConfig *cfg,
                               FsistabTrajectory **out);

// Number of recorded samples, or 0 for a null handle.
//
// # Safety
// `traj` must be null or a live trajectory handle.
size_t fsistab_trajectory_len(const FsistabTrajectory *traj);

// Copies sample times and state norms.
//
// # Safety
// `times` and `norms` must hold `cap` doubles; `len` must be null or writable.
FsistabStatus fsistab_trajectory_norms(const FsistabTrajectory *traj,
                                       double *times,
                                       double *norms,
                                       size_t cap,
                                       size_t *len);

// Least-squares decay rate of the norm over `[t_start, T]`.
//
// # Safety
// `traj` must be a live handle and `rate` writable.
FsistabStatus fsistab_trajectory_decay_rate(const FsistabTrajectory *traj,
                                            double t_start,
                                            double *rate);

// # Safety
// `traj` must be null or a handle from this library, not used afterwards.
void fsistab_trajectory_free(FsistabTrajectory *traj);

// # Safety
// `model` must be null or a handle from this library, not used afterwards.
void fsistab_model_free(FsistabModel *model);

// Runs one CLI command (`spectrum`, `hautus`, `synthesize`, `simulate`, `verify`)
// writing its files into `out_dir`. A failed verification returns `Criterion`.
//
// # Safety
// `cfg` must be a live handle; `command` and `out_dir` NUL-terminated strings.
FsistabStatus fsistab_run_command(const FsistabConfig *cfg,
                                  const char *command,
                                  const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FSISTAB_H */
