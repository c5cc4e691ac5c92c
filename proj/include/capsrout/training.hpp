#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "capsrout/checkpoint.hpp"
#include "capsrout/dataset.hpp"
#include "capsrout/model.hpp"

namespace capsrout {

enum class OptimizerKind { kSgdMomentum, kAdam };

const char* optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);  // "sgd" | "adam"

struct TrainConfig {
  std::size_t epochs_max = 10;
  std::size_t batch_size = 16;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double learning_rate = 1e-4;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t patience = 2;
  std::uint64_t seed = 1;
  SplitFractions split;
  InputMode input_mode = InputMode::kWholeBrain;
  // Worker threads for per-sample work; 0 reads CAPSROUT_THREADS, falling
  // back to the hardware concurrency. Results do not depend on this value.
  std::size_t threads = 0;

  void validate() const;
  // Adam 1e-4 for the capsule network, SGD + momentum 0.9 at 1e-2 for the CNN.
  static TrainConfig defaults_for(ModelKind kind);

  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct EpochReport {
  std::size_t epoch = 0;       // 1-based
  double capsnet_loss = 0.0;   // mean margin loss (cross-entropy for the CNN)
  double decoder_loss = 0.0;   // mean reconstruction error before weighting
  double total_loss = 0.0;     // mean per-sample total
  double train_accuracy = 0.0; // on-the-fly, from the training forward passes
  double val_accuracy = 0.0;
  double seconds = 0.0;
};

// Stops once validation accuracy has failed to beat the best value seen for
// `patience` consecutive epochs. Ties do not count as improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience);

  // Records one epoch; returns true when it is the new best.
  bool observe(double val_accuracy);
  bool should_stop() const { return stale_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_accuracy() const { return best_; }
  std::size_t epochs_seen() const { return seen_; }

 private:
  std::size_t patience_;
  std::size_t seen_ = 0;
  std::size_t stale_ = 0;
  std::size_t best_epoch_ = 0;
  double best_ = -1.0;
};

struct TrainHooks {
  // Replaces the measured validation accuracy (tests inject sequences here).
  std::function<double(std::size_t epoch, const Model<float>& model)> validation_accuracy;
  std::function<void(const EpochReport& report, const Model<float>& model)> on_epoch_end;
};

struct TrainResult {
  Checkpoint checkpoint;  // best-validation snapshot
  std::vector<EpochReport> reports;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
};

// Mini-batch training with early stopping on validation accuracy. `model`
// supplies the architecture and the starting parameters and is left at the
// final (not best) state.
TrainResult train(Model<float>& model, const Dataset& dataset, const TrainConfig& config,
                  const TrainHooks& hooks = {});

struct Metrics {
  std::size_t count = 0;
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<double> precision;                    // 0 when a class is never predicted
  std::vector<double> recall;                       // 0 when a class never occurs
};

// Confusion-matrix metrics from (true, predicted) class-index pairs.
Metrics metrics_from_predictions(std::span<const int> truth, std::span<const int> predicted,
                                 std::size_t class_count);

Metrics evaluate(const Model<float>& model, const Dataset& dataset, std::span<const std::size_t> indices,
                 InputMode mode, std::size_t threads = 0);

// Resolves a thread count request against CAPSROUT_THREADS and the hardware.
std::size_t resolve_threads(std::size_t requested);

// Model input for a stored sample under an input mode. Side lengths below 64
// must divide it; the image is block-averaged down to `side`.
Tensor<float> model_input(const Sample& sample, InputMode mode, std::size_t side = kImageSide);

// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace capsrout
