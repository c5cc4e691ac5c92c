#ifndef CAPSROUT_CAPSROUT_H
#define CAPSROUT_CAPSROUT_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(CAPSROUT_BUILDING_LIBRARY)
#    define CAPSROUT_API __declspec(dllexport)
#  else
#    define CAPSROUT_API __declspec(dllimport)
#  endif
#else
#  define CAPSROUT_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Every call returns a status; on failure capsrout_last_error() holds a
 * one-line message for the calling thread until its next failing call. */
typedef enum capsrout_status {
  CAPSROUT_OK = 0,
  CAPSROUT_ERR_INVALID_ARGUMENT = 1,
  CAPSROUT_ERR_DIMENSION = 2,
  CAPSROUT_ERR_CONFIG = 3,
  CAPSROUT_ERR_IO = 4,
  CAPSROUT_ERR_BAD_MAGIC = 5,
  CAPSROUT_ERR_VERSION_MISMATCH = 6,
  CAPSROUT_ERR_CHECKSUM = 7,
  CAPSROUT_ERR_TRUNCATED = 8,
  CAPSROUT_ERR_INVALID_RECORD = 9,
  CAPSROUT_ERR_MODEL_KIND = 10,
  CAPSROUT_ERR_NON_FINITE = 11,
  CAPSROUT_ERR_EMPTY_SPLIT = 12,
  CAPSROUT_ERR_INTERNAL = 99
} capsrout_status;

typedef enum capsrout_model_kind {
  CAPSROUT_MODEL_ANY = 0,
  CAPSROUT_MODEL_CAPSNET = 1,
  CAPSROUT_MODEL_CNN = 2
} capsrout_model_kind;

typedef enum capsrout_input_mode {
  CAPSROUT_MODE_WHOLE_BRAIN = 0,
  CAPSROUT_MODE_SEGMENTED_TUMOR = 1,
  CAPSROUT_MODE_FROM_CHECKPOINT = -1
} capsrout_input_mode;

typedef enum capsrout_optimizer {
  CAPSROUT_OPT_ADAM = 0,
  CAPSROUT_OPT_SGD_MOMENTUM = 1
} capsrout_optimizer;

typedef enum capsrout_split_part {
  CAPSROUT_SPLIT_TRAIN = 0,
  CAPSROUT_SPLIT_VAL = 1,
  CAPSROUT_SPLIT_TEST = 2,
  CAPSROUT_SPLIT_ALL = 3
} capsrout_split_part;

typedef struct capsrout_dataset capsrout_dataset;
typedef struct capsrout_checkpoint capsrout_checkpoint;

CAPSROUT_API const char* capsrout_version(void);
CAPSROUT_API const char* capsrout_status_name(capsrout_status status);
CAPSROUT_API const char* capsrout_last_error(void);

/* ---- datasets ------------------------------------------------------------ */

#define CAPSROUT_IMAGE_SIDE 64
#define CAPSROUT_IMAGE_PIXELS (CAPSROUT_IMAGE_SIDE * CAPSROUT_IMAGE_SIDE)

CAPSROUT_API capsrout_status capsrout_dataset_synth(uint64_t seed, size_t n_per_class, capsrout_dataset** out);
CAPSROUT_API capsrout_status capsrout_dataset_load(const char* path, capsrout_dataset** out);
CAPSROUT_API capsrout_status capsrout_dataset_save(const capsrout_dataset* dataset, const char* path);
CAPSROUT_API size_t capsrout_dataset_size(const capsrout_dataset* dataset);
CAPSROUT_API int capsrout_dataset_has_masks(const capsrout_dataset* dataset);
/* Any output pointer may be NULL. `image` receives CAPSROUT_IMAGE_PIXELS floats. */
CAPSROUT_API capsrout_status capsrout_dataset_sample(const capsrout_dataset* dataset, size_t index, float* image,
                                                     uint8_t* label, uint32_t* patient_id);
CAPSROUT_API void capsrout_dataset_free(capsrout_dataset* dataset);

/* ---- training ------------------------------------------------------------ */

typedef struct capsrout_train_options {
  capsrout_model_kind model;
  const char* preset; /* NULL or "" selects the default architecture */
  capsrout_input_mode input_mode;
  uint32_t epochs_max;
  uint32_t batch_size;
  uint32_t patience;
  capsrout_optimizer optimizer;
  double learning_rate;
  double momentum;
  double beta1;
  double beta2;
  double epsilon;
  uint64_t seed;
  double split_train;
  double split_val;
  double split_test;
  uint32_t threads;    /* 0: CAPSROUT_THREADS or hardware concurrency */
  int record_timing;   /* nonzero fills the CSV seconds column */
} capsrout_train_options;

/* Defaults for the given model kind. */
CAPSROUT_API void capsrout_train_options_init(capsrout_train_options* options, capsrout_model_kind model);

typedef struct capsrout_epoch_report {
  uint32_t epoch;
  double capsnet_loss;
  double decoder_loss;
  double total_loss;
  double train_accuracy;
  double val_accuracy;
  double seconds;
} capsrout_epoch_report;

typedef void (*capsrout_epoch_callback)(const capsrout_epoch_report* report, void* user);

typedef struct capsrout_train_summary {
  uint32_t best_epoch;
  double best_val_accuracy;
  uint32_t epochs_run;
} capsrout_train_summary;

/* Trains and returns the best-validation checkpoint. With `warm_start` the
 * model and its parameters come from that checkpoint and `options->model` and
 * `options->preset` are ignored. `csv_path`, `on_epoch`, `summary` may be NULL. */
CAPSROUT_API capsrout_status capsrout_train(const capsrout_dataset* dataset, const capsrout_train_options* options,
                                            const capsrout_checkpoint* warm_start, const char* csv_path,
                                            capsrout_epoch_callback on_epoch, void* user,
                                            capsrout_checkpoint** out, capsrout_train_summary* summary);

/* ---- checkpoints ------------------------------------------------------------ */

CAPSROUT_API capsrout_status capsrout_checkpoint_save(const capsrout_checkpoint* ckpt, const char* path);
CAPSROUT_API capsrout_status capsrout_checkpoint_load(const char* path, capsrout_checkpoint** out);
CAPSROUT_API capsrout_model_kind capsrout_checkpoint_kind(const capsrout_checkpoint* ckpt);
/* JSON owned by the checkpoint. */
CAPSROUT_API const char* capsrout_checkpoint_metadata(const capsrout_checkpoint* ckpt);
CAPSROUT_API void capsrout_checkpoint_free(capsrout_checkpoint* ckpt);

/* ---- evaluation ------------------------------------------------------------ */

#define CAPSROUT_MAX_CLASSES 8

typedef struct capsrout_metrics {
  uint32_t count;
  uint32_t class_count;
  double accuracy;
  double precision[CAPSROUT_MAX_CLASSES];
  double recall[CAPSROUT_MAX_CLASSES];
  uint32_t confusion[CAPSROUT_MAX_CLASSES][CAPSROUT_MAX_CLASSES]; /* [true][predicted] */
} capsrout_metrics;

/* The split is rebuilt from the seed and fractions recorded in the
 * checkpoint. `expected` other than CAPSROUT_MODEL_ANY must match the
 * checkpoint or CAPSROUT_ERR_MODEL_KIND is returned. */
CAPSROUT_API capsrout_status capsrout_evaluate(const capsrout_checkpoint* ckpt, const capsrout_dataset* dataset,
                                               capsrout_split_part part, capsrout_input_mode mode,
                                               capsrout_model_kind expected, const char* confusion_csv_path,
                                               capsrout_metrics* out);

/* ---- experiments ------------------------------------------------------------ */

typedef struct capsrout_sweep_row {
  const char* preset;
  double test_accuracy;
  double val_accuracy;
  uint32_t best_epoch;
  uint32_t epochs_run;
} capsrout_sweep_row;

typedef void (*capsrout_sweep_callback)(const capsrout_sweep_row* row, void* user);

/* Capsule presets trained under identical options; `presets` NULL or
 * `count` 0 runs every table row. */
CAPSROUT_API capsrout_status capsrout_sweep(const capsrout_dataset* dataset, const capsrout_train_options* options,
                                            const char* const* presets, size_t count, const char* csv_path,
                                            capsrout_sweep_callback on_row, void* user);

/* CapsNet and CNN trained on whole-brain and segmented-tumor inputs. The
 * input_mode fields of both option sets are ignored. */
CAPSROUT_API capsrout_status capsrout_compare_modes(const capsrout_dataset* dataset,
                                                    const capsrout_train_options* capsnet_options,
                                                    const capsrout_train_options* cnn_options,
                                                    const char* csv_path);

typedef struct capsrout_gradcheck_group {
  const char* group;
  size_t checked;
  double max_rel_error;
  double tolerance;
  int passed;
} capsrout_gradcheck_group;

typedef void (*capsrout_gradcheck_callback)(const capsrout_gradcheck_group* group, void* user);

/* target: "capsnet" (tiny configuration), "cnn" (shrunken configuration) or
 * "ops". `corrupt_group` (NULL for none) perturbs one analytic gradient.
 * `passed` receives 1 when every group is within tolerance. */
CAPSROUT_API capsrout_status capsrout_gradcheck(const char* target, const char* corrupt_group, uint64_t seed,
                                                capsrout_gradcheck_callback on_group, void* user, int* passed);

/* Decodes the winning class capsule of one sample with dimension `dim`
 * shifted by each delta; writes tweak_NN.pgm and tweak_strip.pgm into
 * `out_dir`. `deltas` NULL or `count` 0 uses -0.25..0.25 step 0.05. */
CAPSROUT_API capsrout_status capsrout_tweak(const capsrout_checkpoint* ckpt, const capsrout_dataset* dataset,
                                            size_t sample_index, capsrout_input_mode mode, uint32_t dim,
                                            const double* deltas, size_t count, const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif
