// Command-line front end. Talks to the engine only through capsrout.h.

#include <CLI11.hpp>
#include <capsrout/capsrout.h>

#include <cstdio>
#include <cstdlib>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

// Non-library failures (bad flag combinations) share the error line format.
struct UsageError {
  std::string message;
};

class CommandFailed {
 public:
  explicit CommandFailed(capsrout_status s) : status(s) {}
  capsrout_status status;
};

void check(capsrout_status s) {
  if (s != CAPSROUT_OK) throw CommandFailed(s);
}

std::vector<double> parse_doubles(const std::string& text, const char* flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    if (item.empty() || *end != '\0') throw UsageError{std::string(flag) + ": '" + item + "' is not a number"};
    out.push_back(v);
  }
  if (out.empty()) throw UsageError{std::string(flag) + ": empty list"};
  return out;
}

std::vector<std::string> parse_names(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

const std::map<std::string, capsrout_model_kind> kModels = {{"capsnet", CAPSROUT_MODEL_CAPSNET},
                                                            {"cnn", CAPSROUT_MODEL_CNN}};
const std::map<std::string, capsrout_input_mode> kModes = {{"whole", CAPSROUT_MODE_WHOLE_BRAIN},
                                                           {"segmented", CAPSROUT_MODE_SEGMENTED_TUMOR}};
const std::map<std::string, capsrout_split_part> kSplits = {
    {"train", CAPSROUT_SPLIT_TRAIN}, {"val", CAPSROUT_SPLIT_VAL}, {"test", CAPSROUT_SPLIT_TEST},
    {"all", CAPSROUT_SPLIT_ALL}};
const std::map<std::string, capsrout_optimizer> kOptimizers = {{"adam", CAPSROUT_OPT_ADAM},
                                                               {"sgd", CAPSROUT_OPT_SGD_MOMENTUM}};

// Hyperparameter flags shared by train, sweep and compare. Unset flags keep
// the per-model defaults.
struct TrainFlags {
  std::optional<std::uint32_t> epochs, batch, patience, threads;
  std::optional<std::string> optimizer;
  std::optional<double> lr, momentum, beta1, beta2;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> split;
  bool timing = false;

  void attach(CLI::App* app) {
    app->add_option("--epochs", epochs, "maximum epochs")->check(CLI::PositiveNumber);
    app->add_option("--batch-size", batch, "mini-batch size")->check(CLI::PositiveNumber);
    app->add_option("--patience", patience, "early-stopping patience in epochs")->check(CLI::PositiveNumber);
    app->add_option("--optimizer", optimizer, "adam | sgd")->check(CLI::IsMember({"adam", "sgd"}));
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--momentum", momentum, "SGD momentum");
    app->add_option("--beta1", beta1, "Adam beta1");
    app->add_option("--beta2", beta2, "Adam beta2");
    app->add_option("--seed", seed, "split, initialization and shuffle seed");
    app->add_option("--split", split, "train,val,test fractions");
    app->add_option("--threads", threads, "worker threads (default: CAPSROUT_THREADS or all cores)");
    app->add_flag("--timing", timing, "fill the seconds column of the epoch CSV");
  }

  capsrout_train_options build(capsrout_model_kind model) const {
    capsrout_train_options o;
    capsrout_train_options_init(&o, model);
    if (epochs) o.epochs_max = *epochs;
    if (batch) o.batch_size = *batch;
    if (patience) o.patience = *patience;
    if (optimizer) o.optimizer = kOptimizers.at(*optimizer);
    if (lr) o.learning_rate = *lr;
    if (momentum) o.momentum = *momentum;
    if (beta1) o.beta1 = *beta1;
    if (beta2) o.beta2 = *beta2;
    if (seed) o.seed = *seed;
    if (split) {
      const auto f = parse_doubles(*split, "--split");
      if (f.size() != 3) throw UsageError{"--split needs three fractions"};
      o.split_train = f[0];
      o.split_val = f[1];
      o.split_test = f[2];
    }
    if (threads) o.threads = *threads;
    o.record_timing = timing ? 1 : 0;
    return o;
  }
};

struct DatasetHandle {
  capsrout_dataset* ptr = nullptr;
  ~DatasetHandle() { capsrout_dataset_free(ptr); }
};

struct CheckpointHandle {
  capsrout_checkpoint* ptr = nullptr;
  ~CheckpointHandle() { capsrout_checkpoint_free(ptr); }
};

void print_epoch(const capsrout_epoch_report* r, void*) {
  std::printf("epoch %u capsnet_loss=%.6g decoder_loss=%.6g total_loss=%.6g train_accuracy=%.4f "
              "val_accuracy=%.4f seconds=%.2f\n",
              r->epoch, r->capsnet_loss, r->decoder_loss, r->total_loss, r->train_accuracy, r->val_accuracy,
              r->seconds);
  std::fflush(stdout);
}

void print_sweep_row(const capsrout_sweep_row* r, void*) {
  std::printf("preset=%s accuracy=%.4f val_accuracy=%.4f best_epoch=%u epochs_run=%u\n", r->preset,
              r->test_accuracy, r->val_accuracy, r->best_epoch, r->epochs_run);
  std::fflush(stdout);
}

void print_group(const capsrout_gradcheck_group* g, void*) {
  std::printf("%s group=%s checked=%zu max_rel_error=%.3e tolerance=%.0e\n", g->passed ? "PASS" : "FAIL", g->group,
              g->checked, g->max_rel_error, g->tolerance);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capsule-network brain-tumor classification engine"};
  app.require_subcommand(1);
  app.set_version_flag("--version", capsrout_version());

  // synth
  std::uint64_t synth_seed = 7;
  std::size_t per_class = 20;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "write a synthetic BTDS dataset");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--per-class", per_class, "samples per class")->check(CLI::PositiveNumber);
  synth->add_option("--out", synth_out, "output BTDS file")->required();

  // train
  std::string train_model = "capsnet", train_data, train_mode = "whole", train_preset, out_ckpt, out_csv, init_ckpt;
  bool quiet = false;
  TrainFlags train_flags;
  auto* train = app.add_subcommand("train", "train a model and write its best checkpoint");
  train->add_option("--model", train_model, "capsnet | cnn")->check(CLI::IsMember({"capsnet", "cnn"}));
  train->add_option("--data", train_data, "BTDS dataset")->required();
  train->add_option("--mode", train_mode, "whole | segmented")->check(CLI::IsMember({"whole", "segmented"}));
  train->add_option("--preset", train_preset, "architecture preset");
  train->add_option("--out-ckpt", out_ckpt, "checkpoint to write")->required();
  train->add_option("--out-csv", out_csv, "per-epoch loss CSV");
  train->add_option("--init-ckpt", init_ckpt, "continue from this checkpoint's parameters");
  train->add_flag("--quiet", quiet, "no per-epoch output");
  train_flags.attach(train);

  // eval
  std::string eval_ckpt, eval_data, eval_split = "test", eval_mode, eval_model, eval_csv;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one split");
  eval->add_option("--ckpt", eval_ckpt, "checkpoint")->required();
  eval->add_option("--data", eval_data, "BTDS dataset")->required();
  eval->add_option("--split", eval_split, "train | val | test | all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  eval->add_option("--mode", eval_mode, "whole | segmented (default: as trained)")
      ->check(CLI::IsMember({"whole", "segmented"}));
  eval->add_option("--model", eval_model, "expected model kind")->check(CLI::IsMember({"capsnet", "cnn"}));
  eval->add_option("--out-csv", eval_csv, "confusion matrix CSV");

  // sweep
  std::string sweep_data, sweep_presets = "table1", sweep_out, sweep_mode = "whole";
  TrainFlags sweep_flags;
  auto* sweep = app.add_subcommand("sweep", "train every capsule architecture preset");
  sweep->add_option("--data", sweep_data, "BTDS dataset")->required();
  sweep->add_option("--presets", sweep_presets, "'table1' or a comma-separated preset list");
  sweep->add_option("--out", sweep_out, "accuracy table CSV")->required();
  sweep->add_option("--mode", sweep_mode, "whole | segmented")->check(CLI::IsMember({"whole", "segmented"}));
  sweep_flags.attach(sweep);

  // compare
  std::string cmp_data, cmp_out, cmp_caps_preset, cmp_cnn_preset;
  TrainFlags cmp_flags;
  auto* compare = app.add_subcommand("compare", "CapsNet and CNN on whole-brain and segmented inputs");
  compare->add_option("--data", cmp_data, "BTDS dataset with masks")->required();
  compare->add_option("--out", cmp_out, "comparison CSV")->required();
  compare->add_option("--capsnet-preset", cmp_caps_preset, "capsule architecture preset");
  compare->add_option("--cnn-preset", cmp_cnn_preset, "default | shrunken");
  cmp_flags.attach(compare);

  // gradcheck
  std::string gc_model = "capsnet", gc_corrupt;
  std::uint64_t gc_seed = 17;
  bool tiny = true;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gradcheck->add_option("--model", gc_model, "capsnet | cnn | ops")->check(CLI::IsMember({"capsnet", "cnn", "ops"}));
  gradcheck->add_flag("--tiny-config,!--no-tiny-config", tiny,
                      "check the small configuration (the only size supported)");
  gradcheck->add_option("--seed", gc_seed, "seed for the test point");
  gradcheck->add_option("--corrupt", gc_corrupt, "perturb this group's analytic gradient (harness self-test)");

  // tweak
  std::string tw_ckpt, tw_data, tw_deltas, tw_out, tw_mode;
  std::size_t tw_index = 0;
  std::uint32_t tw_dim = 0;
  auto* tweak = app.add_subcommand("tweak", "decode a class capsule with one dimension shifted");
  tweak->add_option("--ckpt", tw_ckpt, "CapsNet checkpoint")->required();
  tweak->add_option("--data", tw_data, "BTDS dataset")->required();
  tweak->add_option("--index", tw_index, "sample index");
  tweak->add_option("--dim", tw_dim, "capsule dimension to shift");
  tweak->add_option("--deltas", tw_deltas, "comma-separated shifts (default -0.25..0.25 step 0.05)");
  tweak->add_option("--mode", tw_mode, "whole | segmented (default: as trained)")
      ->check(CLI::IsMember({"whole", "segmented"}));
  tweak->add_option("--out-dir", tw_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::fprintf(stderr, "error: code=usage message=%s\n", e.what());
    return 2;
  }

  try {
    if (*synth) {
      DatasetHandle ds;
      check(capsrout_dataset_synth(synth_seed, per_class, &ds.ptr));
      check(capsrout_dataset_save(ds.ptr, synth_out.c_str()));
      std::printf("wrote %zu samples to %s\n", capsrout_dataset_size(ds.ptr), synth_out.c_str());
    } else if (*train) {
      DatasetHandle ds;
      check(capsrout_dataset_load(train_data.c_str(), &ds.ptr));
      auto options = train_flags.build(kModels.at(train_model));
      options.preset = train_preset.empty() ? nullptr : train_preset.c_str();
      options.input_mode = kModes.at(train_mode);
      CheckpointHandle init, out;
      if (!init_ckpt.empty()) {
        check(capsrout_checkpoint_load(init_ckpt.c_str(), &init.ptr));
        if (capsrout_checkpoint_kind(init.ptr) != options.model) {
          throw UsageError{"--init-ckpt holds a different model kind than --model"};
        }
      }
      capsrout_train_summary summary{};
      check(capsrout_train(ds.ptr, &options, init.ptr, out_csv.empty() ? nullptr : out_csv.c_str(),
                           quiet ? nullptr : print_epoch, nullptr, &out.ptr, &summary));
      check(capsrout_checkpoint_save(out.ptr, out_ckpt.c_str()));
      std::printf("best_epoch=%u best_val_accuracy=%.4f epochs_run=%u checkpoint=%s\n", summary.best_epoch,
                  summary.best_val_accuracy, summary.epochs_run, out_ckpt.c_str());
    } else if (*eval) {
      CheckpointHandle ckpt;
      DatasetHandle ds;
      check(capsrout_checkpoint_load(eval_ckpt.c_str(), &ckpt.ptr));
      check(capsrout_dataset_load(eval_data.c_str(), &ds.ptr));
      capsrout_metrics m{};
      check(capsrout_evaluate(ckpt.ptr, ds.ptr, kSplits.at(eval_split),
                              eval_mode.empty() ? CAPSROUT_MODE_FROM_CHECKPOINT : kModes.at(eval_mode),
                              eval_model.empty() ? CAPSROUT_MODEL_ANY : kModels.at(eval_model),
                              eval_csv.empty() ? nullptr : eval_csv.c_str(), &m));
      std::printf("split=%s count=%u accuracy=%.4f\n", eval_split.c_str(), m.count, m.accuracy);
      for (std::uint32_t k = 0; k < m.class_count; ++k) {
        std::printf("class=%u precision=%.4f recall=%.4f\n", k + 1, m.precision[k], m.recall[k]);
      }
      std::printf("confusion (rows true, columns predicted):\n");
      for (std::uint32_t i = 0; i < m.class_count; ++i) {
        for (std::uint32_t j = 0; j < m.class_count; ++j) std::printf(j ? " %4u" : "%4u", m.confusion[i][j]);
        std::printf("\n");
      }
    } else if (*sweep) {
      DatasetHandle ds;
      check(capsrout_dataset_load(sweep_data.c_str(), &ds.ptr));
      auto options = sweep_flags.build(CAPSROUT_MODEL_CAPSNET);
      options.input_mode = kModes.at(sweep_mode);
      std::vector<std::string> names;
      if (sweep_presets != "table1") names = parse_names(sweep_presets);
      std::vector<const char*> ptrs;
      for (const auto& n : names) ptrs.push_back(n.c_str());
      check(capsrout_sweep(ds.ptr, &options, ptrs.empty() ? nullptr : ptrs.data(), ptrs.size(), sweep_out.c_str(),
                           print_sweep_row, nullptr));
    } else if (*compare) {
      DatasetHandle ds;
      check(capsrout_dataset_load(cmp_data.c_str(), &ds.ptr));
      auto caps = cmp_flags.build(CAPSROUT_MODEL_CAPSNET);
      auto cnn = cmp_flags.build(CAPSROUT_MODEL_CNN);
      // Optimizer flags apply to both models only when given explicitly.
      caps.preset = cmp_caps_preset.empty() ? nullptr : cmp_caps_preset.c_str();
      cnn.preset = cmp_cnn_preset.empty() ? nullptr : cmp_cnn_preset.c_str();
      check(capsrout_compare_modes(ds.ptr, &caps, &cnn, cmp_out.c_str()));
      std::printf("wrote %s\n", cmp_out.c_str());
    } else if (*gradcheck) {
      if (!tiny && gc_model != "ops") {
        throw UsageError{"full-size models are too large for exhaustive finite differences; use --tiny-config"};
      }
      int passed = 0;
      check(capsrout_gradcheck(gc_model.c_str(), gc_corrupt.empty() ? nullptr : gc_corrupt.c_str(), gc_seed,
                               print_group, nullptr, &passed));
      if (!passed) {
        std::fprintf(stderr, "error: code=gradcheck_failed message=one or more parameter groups exceed tolerance\n");
        return 1;
      }
      std::printf("gradcheck passed\n");
    } else if (*tweak) {
      CheckpointHandle ckpt;
      DatasetHandle ds;
      check(capsrout_checkpoint_load(tw_ckpt.c_str(), &ckpt.ptr));
      check(capsrout_dataset_load(tw_data.c_str(), &ds.ptr));
      std::vector<double> deltas;
      if (!tw_deltas.empty()) deltas = parse_doubles(tw_deltas, "--deltas");
      check(capsrout_tweak(ckpt.ptr, ds.ptr, tw_index,
                           tw_mode.empty() ? CAPSROUT_MODE_FROM_CHECKPOINT : kModes.at(tw_mode), tw_dim,
                           deltas.empty() ? nullptr : deltas.data(), deltas.size(), tw_out.c_str()));
      std::printf("wrote %zu images and tweak_strip.pgm to %s\n", deltas.empty() ? std::size_t{11} : deltas.size(),
                  tw_out.c_str());
    }
  } catch (const CommandFailed& e) {
    std::fprintf(stderr, "error: code=%s message=%s\n", capsrout_status_name(e.status), capsrout_last_error());
    return 1;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: code=usage message=%s\n", e.message.c_str());
    return 2;
  }
  return 0;
}
