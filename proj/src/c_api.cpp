#include "capsrout/capsrout.h"

#include <algorithm>
#include <cstring>
#include <json.hpp>
#include <new>
#include <string>
#include <vector>

#include "capsrout/checkpoint.hpp"
#include "capsrout/experiments.hpp"
#include "capsrout/gradcheck.hpp"

struct capsrout_dataset {
  capsrout::Dataset value;
};

struct capsrout_checkpoint {
  capsrout::Checkpoint value;
};

namespace {

using namespace capsrout;

thread_local std::string g_last_error;

template <typename Fn>
capsrout_status guarded(Fn&& fn) {
  try {
    fn();
    return CAPSROUT_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return static_cast<capsrout_status>(static_cast<int>(e.code()));
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
  } catch (const std::exception& e) {
    g_last_error = e.what();
  } catch (...) {
    g_last_error = "unknown failure";
  }
  return CAPSROUT_ERR_INTERNAL;
}

void require(bool ok, const char* what) {
  if (!ok) fail(ErrorCode::kInvalidArgument, what);
}

ModelKind to_kind(capsrout_model_kind k) {
  if (k == CAPSROUT_MODEL_CAPSNET) return ModelKind::kCapsNet;
  if (k == CAPSROUT_MODEL_CNN) return ModelKind::kCnn;
  fail(ErrorCode::kInvalidArgument, "model kind must be capsnet or cnn");
}

InputMode to_mode(capsrout_input_mode m) {
  if (m == CAPSROUT_MODE_WHOLE_BRAIN) return InputMode::kWholeBrain;
  if (m == CAPSROUT_MODE_SEGMENTED_TUMOR) return InputMode::kSegmentedTumor;
  fail(ErrorCode::kInvalidArgument, "unknown input mode");
}

TrainConfig to_config(const capsrout_train_options& o) {
  TrainConfig c;
  c.epochs_max = o.epochs_max;
  c.batch_size = o.batch_size;
  c.patience = o.patience;
  if (o.optimizer != CAPSROUT_OPT_ADAM && o.optimizer != CAPSROUT_OPT_SGD_MOMENTUM) {
    fail(ErrorCode::kInvalidArgument, "unknown optimizer");
  }
  c.optimizer = o.optimizer == CAPSROUT_OPT_ADAM ? OptimizerKind::kAdam : OptimizerKind::kSgdMomentum;
  c.learning_rate = o.learning_rate;
  c.momentum = o.momentum;
  c.beta1 = o.beta1;
  c.beta2 = o.beta2;
  c.epsilon = o.epsilon;
  c.seed = o.seed;
  c.split = {o.split_train, o.split_val, o.split_test};
  c.input_mode = to_mode(o.input_mode);
  c.threads = o.threads;
  c.validate();
  return c;
}

std::string preset_of(const capsrout_train_options& o) { return o.preset ? o.preset : ""; }

capsrout_epoch_report to_report(const EpochReport& r) {
  return {static_cast<std::uint32_t>(r.epoch), r.capsnet_loss, r.decoder_loss, r.total_loss,
          r.train_accuracy, r.val_accuracy, r.seconds};
}

// Split seed, fractions and input mode the checkpoint was trained with;
// library defaults when the metadata does not say.
TrainConfig recorded_config(const Checkpoint& ckpt) {
  TrainConfig c = TrainConfig::defaults_for(ckpt.kind);
  const auto meta = nlohmann::json::parse(ckpt.metadata_json, nullptr, false);
  if (meta.is_object() && meta.contains("train_config")) {
    c = TrainConfig::from_json(meta["train_config"].dump());
  }
  return c;
}

}  // namespace

extern "C" {

const char* capsrout_version(void) { return "0.1.0"; }

const char* capsrout_status_name(capsrout_status status) {
  if (status == CAPSROUT_OK) return "ok";
  if (status == CAPSROUT_ERR_INTERNAL) return "internal";
  if (status >= CAPSROUT_ERR_INVALID_ARGUMENT && status <= CAPSROUT_ERR_EMPTY_SPLIT) {
    return error_code_name(static_cast<ErrorCode>(status));
  }
  return "unknown";
}

const char* capsrout_last_error(void) { return g_last_error.c_str(); }

// ---- datasets ----------------------------------------------------------------

capsrout_status capsrout_dataset_synth(uint64_t seed, size_t n_per_class, capsrout_dataset** out) {
  return guarded([&] {
    require(out != nullptr, "out must not be NULL");
    *out = new capsrout_dataset{synth_generate(seed, n_per_class)};
  });
}

capsrout_status capsrout_dataset_load(const char* path, capsrout_dataset** out) {
  return guarded([&] {
    require(path && out, "path and out must not be NULL");
    *out = new capsrout_dataset{load_dataset(path)};
  });
}

capsrout_status capsrout_dataset_save(const capsrout_dataset* dataset, const char* path) {
  return guarded([&] {
    require(dataset && path, "dataset and path must not be NULL");
    store_dataset(dataset->value, path);
  });
}

size_t capsrout_dataset_size(const capsrout_dataset* dataset) { return dataset ? dataset->value.size() : 0; }

int capsrout_dataset_has_masks(const capsrout_dataset* dataset) {
  return dataset && dataset->value.has_masks() ? 1 : 0;
}

capsrout_status capsrout_dataset_sample(const capsrout_dataset* dataset, size_t index, float* image,
                                        uint8_t* label, uint32_t* patient_id) {
  return guarded([&] {
    require(dataset != nullptr, "dataset must not be NULL");
    if (index >= dataset->value.size()) {
      fail(ErrorCode::kInvalidArgument, "sample index " + std::to_string(index) + " out of range");
    }
    const auto& s = dataset->value.samples[index];
    if (image) std::copy(s.image.begin(), s.image.end(), image);
    if (label) *label = s.label;
    if (patient_id) *patient_id = s.patient_id;
  });
}

void capsrout_dataset_free(capsrout_dataset* dataset) { delete dataset; }

// ---- training ------------------------------------------------------------------

void capsrout_train_options_init(capsrout_train_options* options, capsrout_model_kind model) {
  if (!options) return;
  const ModelKind kind = model == CAPSROUT_MODEL_CNN ? ModelKind::kCnn : ModelKind::kCapsNet;
  const auto c = TrainConfig::defaults_for(kind);
  *options = {};
  options->model = kind == ModelKind::kCnn ? CAPSROUT_MODEL_CNN : CAPSROUT_MODEL_CAPSNET;
  options->preset = nullptr;
  options->input_mode = CAPSROUT_MODE_WHOLE_BRAIN;
  options->epochs_max = static_cast<std::uint32_t>(c.epochs_max);
  options->batch_size = static_cast<std::uint32_t>(c.batch_size);
  options->patience = static_cast<std::uint32_t>(c.patience);
  options->optimizer = c.optimizer == OptimizerKind::kAdam ? CAPSROUT_OPT_ADAM : CAPSROUT_OPT_SGD_MOMENTUM;
  options->learning_rate = c.learning_rate;
  options->momentum = c.momentum;
  options->beta1 = c.beta1;
  options->beta2 = c.beta2;
  options->epsilon = c.epsilon;
  options->seed = c.seed;
  options->split_train = c.split.train;
  options->split_val = c.split.val;
  options->split_test = c.split.test;
  options->threads = 0;
  options->record_timing = 0;
}

capsrout_status capsrout_train(const capsrout_dataset* dataset, const capsrout_train_options* options,
                               const capsrout_checkpoint* warm_start, const char* csv_path,
                               capsrout_epoch_callback on_epoch, void* user, capsrout_checkpoint** out,
                               capsrout_train_summary* summary) {
  return guarded([&] {
    require(dataset && options && out, "dataset, options and out must not be NULL");
    const auto config = to_config(*options);
    auto model = warm_start ? warm_start->value.instantiate()
                            : build_model(to_kind(options->model), preset_of(*options), config.seed);
    TrainHooks hooks;
    if (on_epoch) {
      hooks.on_epoch_end = [&](const EpochReport& r, const Model<float>&) {
        const auto report = to_report(r);
        on_epoch(&report, user);
      };
    }
    auto result = train(*model, dataset->value, config, hooks);
    if (csv_path) {
      write_text_file(csv_path, epoch_csv(result.reports, model->reconstruction_weight() > 0 ||
                                                              model->kind() == ModelKind::kCapsNet,
                                          options->record_timing != 0));
    }
    if (summary) {
      summary->best_epoch = static_cast<std::uint32_t>(result.best_epoch);
      summary->best_val_accuracy = result.best_val_accuracy;
      summary->epochs_run = static_cast<std::uint32_t>(result.reports.size());
    }
    *out = new capsrout_checkpoint{std::move(result.checkpoint)};
  });
}

// ---- checkpoints -----------------------------------------------------------------

capsrout_status capsrout_checkpoint_save(const capsrout_checkpoint* ckpt, const char* path) {
  return guarded([&] {
    require(ckpt && path, "checkpoint and path must not be NULL");
    save_checkpoint(ckpt->value, path);
  });
}

capsrout_status capsrout_checkpoint_load(const char* path, capsrout_checkpoint** out) {
  return guarded([&] {
    require(path && out, "path and out must not be NULL");
    *out = new capsrout_checkpoint{load_checkpoint(path)};
  });
}

capsrout_model_kind capsrout_checkpoint_kind(const capsrout_checkpoint* ckpt) {
  if (!ckpt) return CAPSROUT_MODEL_ANY;
  return ckpt->value.kind == ModelKind::kCnn ? CAPSROUT_MODEL_CNN : CAPSROUT_MODEL_CAPSNET;
}

const char* capsrout_checkpoint_metadata(const capsrout_checkpoint* ckpt) {
  return ckpt ? ckpt->value.metadata_json.c_str() : "";
}

void capsrout_checkpoint_free(capsrout_checkpoint* ckpt) { delete ckpt; }

// ---- evaluation ----------------------------------------------------------------

capsrout_status capsrout_evaluate(const capsrout_checkpoint* ckpt, const capsrout_dataset* dataset,
                                  capsrout_split_part part, capsrout_input_mode mode,
                                  capsrout_model_kind expected, const char* confusion_csv_path,
                                  capsrout_metrics* out) {
  return guarded([&] {
    require(ckpt && dataset && out, "checkpoint, dataset and out must not be NULL");
    if (expected != CAPSROUT_MODEL_ANY) ckpt->value.require_kind(to_kind(expected));
    const auto recorded = recorded_config(ckpt->value);
    const InputMode input = mode == CAPSROUT_MODE_FROM_CHECKPOINT ? recorded.input_mode : to_mode(mode);

    std::vector<std::size_t> indices;
    if (part == CAPSROUT_SPLIT_ALL) {
      indices.resize(dataset->value.size());
      for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    } else {
      if (part < CAPSROUT_SPLIT_TRAIN || part > CAPSROUT_SPLIT_TEST) fail(ErrorCode::kInvalidArgument, "bad split");
      const auto split = split_by_patient(dataset->value, recorded.split, recorded.seed);
      indices = split.part(static_cast<SplitPart>(part));
    }
    const auto model = ckpt->value.instantiate();
    const auto m = evaluate(*model, dataset->value, indices, input, recorded.threads);
    if (m.confusion.size() > CAPSROUT_MAX_CLASSES) fail(ErrorCode::kDimension, "too many classes for the C API");

    *out = {};
    out->count = static_cast<std::uint32_t>(m.count);
    out->class_count = static_cast<std::uint32_t>(m.confusion.size());
    out->accuracy = m.accuracy;
    for (std::size_t i = 0; i < m.confusion.size(); ++i) {
      out->precision[i] = m.precision[i];
      out->recall[i] = m.recall[i];
      for (std::size_t j = 0; j < m.confusion.size(); ++j) {
        out->confusion[i][j] = static_cast<std::uint32_t>(m.confusion[i][j]);
      }
    }
    if (confusion_csv_path) write_text_file(confusion_csv_path, confusion_csv(m));
  });
}

// ---- experiments -----------------------------------------------------------------

capsrout_status capsrout_sweep(const capsrout_dataset* dataset, const capsrout_train_options* options,
                               const char* const* presets, size_t count, const char* csv_path,
                               capsrout_sweep_callback on_row, void* user) {
  return guarded([&] {
    require(dataset && options, "dataset and options must not be NULL");
    const auto config = to_config(*options);
    std::vector<std::string> names;
    for (std::size_t i = 0; presets && i < count; ++i) {
      require(presets[i] != nullptr, "preset names must not be NULL");
      names.emplace_back(presets[i]);
    }
    std::function<void(const SweepRow&)> hook;
    if (on_row) {
      hook = [&](const SweepRow& r) {
        const capsrout_sweep_row row{r.preset.c_str(), r.test_accuracy, r.val_accuracy,
                                     static_cast<std::uint32_t>(r.best_epoch),
                                     static_cast<std::uint32_t>(r.epochs_run)};
        on_row(&row, user);
      };
    }
    const auto rows = run_sweep(dataset->value, config, names, hook);
    if (csv_path) write_text_file(csv_path, sweep_csv(rows));
  });
}

capsrout_status capsrout_compare_modes(const capsrout_dataset* dataset, const capsrout_train_options* capsnet_options,
                                       const capsrout_train_options* cnn_options, const char* csv_path) {
  return guarded([&] {
    require(dataset && capsnet_options && cnn_options, "dataset and options must not be NULL");
    const auto rows = run_mode_comparison(dataset->value, preset_of(*capsnet_options), to_config(*capsnet_options),
                                          preset_of(*cnn_options), to_config(*cnn_options));
    if (csv_path) write_text_file(csv_path, mode_comparison_csv(rows));
  });
}

capsrout_status capsrout_gradcheck(const char* target, const char* corrupt_group, uint64_t seed,
                                   capsrout_gradcheck_callback on_group, void* user, int* passed) {
  return guarded([&] {
    require(target != nullptr, "target must not be NULL");
    GradCheckOptions options;
    options.seed = seed;
    if (corrupt_group) options.corrupt_group = corrupt_group;
    GradCheckReport report;
    const std::string t = target;
    if (t == "capsnet") {
      report = gradcheck_capsnet_tiny(options);
    } else if (t == "cnn") {
      report = gradcheck_cnn_shrunken(options);
    } else if (t == "ops") {
      options.tolerance = 1e-6;
      report = gradcheck_ops(options);
    } else {
      fail(ErrorCode::kInvalidArgument, "unknown gradcheck target '" + t + "' (expected capsnet|cnn|ops)");
    }
    if (!options.corrupt_group.empty() &&
        std::none_of(report.groups.begin(), report.groups.end(),
                     [&](const GroupResult& g) { return g.group == options.corrupt_group; })) {
      fail(ErrorCode::kInvalidArgument, "no parameter group named '" + options.corrupt_group + "'");
    }
    if (on_group) {
      for (const auto& g : report.groups) {
        const capsrout_gradcheck_group row{g.group.c_str(), g.checked, g.max_rel_error, g.tolerance,
                                           g.passed ? 1 : 0};
        on_group(&row, user);
      }
    }
    if (passed) *passed = report.passed() ? 1 : 0;
  });
}

capsrout_status capsrout_tweak(const capsrout_checkpoint* ckpt, const capsrout_dataset* dataset, size_t sample_index,
                               capsrout_input_mode mode, uint32_t dim, const double* deltas, size_t count,
                               const char* out_dir) {
  return guarded([&] {
    require(ckpt && dataset && out_dir, "checkpoint, dataset and out_dir must not be NULL");
    ckpt->value.require_kind(ModelKind::kCapsNet);
    if (sample_index >= dataset->value.size()) {
      fail(ErrorCode::kInvalidArgument, "sample index " + std::to_string(sample_index) + " out of range");
    }
    const InputMode input =
        mode == CAPSROUT_MODE_FROM_CHECKPOINT ? recorded_config(ckpt->value).input_mode : to_mode(mode);
    const auto grid = deltas && count ? std::vector<double>(deltas, deltas + count) : default_tweak_deltas();
    const auto model = ckpt->value.as_capsnet();
    write_tweak_grid(model, dataset->value.samples[sample_index], input, dim, grid, out_dir);
  });
}

}  // extern "C"
