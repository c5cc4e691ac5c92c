#include "capsrout/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <json.hpp>
#include <mutex>
#include <thread>

namespace capsrout {

using json = nlohmann::json;

const char* optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::kAdam ? "adam" : "sgd";
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::kAdam;
  if (name == "sgd" || name == "sgd_momentum") return OptimizerKind::kSgdMomentum;
  fail(ErrorCode::kInvalidArgument, "unknown optimizer '" + name + "' (expected adam|sgd)");
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::kConfig, "train config: " + what); };
  if (epochs_max == 0) bad("epochs_max must be positive");
  if (batch_size == 0) bad("batch_size must be positive");
  // A zero rate is accepted: it leaves parameters untouched, which tests use.
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) bad("learning rate must be finite and >= 0");
  if (momentum < 0 || momentum >= 1) bad("momentum must be in [0,1)");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) bad("adam betas must be in [0,1)");
  if (!(epsilon > 0)) bad("epsilon must be positive");
  if (patience < 1) bad("patience must be >= 1");
  split.validate();
}

TrainConfig TrainConfig::defaults_for(ModelKind kind) {
  TrainConfig c;
  if (kind == ModelKind::kCnn) {
    c.optimizer = OptimizerKind::kSgdMomentum;
    c.learning_rate = 1e-2;
  }
  return c;
}

std::string TrainConfig::to_json() const {
  json j = {{"epochs_max", epochs_max},
            {"batch_size", batch_size},
            {"optimizer", optimizer_name(optimizer)},
            {"learning_rate", learning_rate},
            {"momentum", momentum},
            {"beta1", beta1},
            {"beta2", beta2},
            {"epsilon", epsilon},
            {"patience", patience},
            {"seed", seed},
            {"split", {split.train, split.val, split.test}},
            {"input_mode", input_mode_name(input_mode)}};
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  try {
    const auto j = json::parse(text);
    c.epochs_max = j.at("epochs_max");
    c.batch_size = j.at("batch_size");
    c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
    c.learning_rate = j.at("learning_rate");
    c.momentum = j.at("momentum");
    c.beta1 = j.at("beta1");
    c.beta2 = j.at("beta2");
    c.epsilon = j.at("epsilon");
    c.patience = j.at("patience");
    c.seed = j.at("seed");
    const auto& s = j.at("split");
    c.split = {s.at(0), s.at(1), s.at(2)};
    c.input_mode = parse_input_mode(j.at("input_mode").get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, std::string("train config json: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- early stopping ---------------------------------------------------------

EarlyStopping::EarlyStopping(std::size_t patience) : patience_(patience) {
  if (patience_ < 1) fail(ErrorCode::kConfig, "early stopping patience must be >= 1");
}

bool EarlyStopping::observe(double val_accuracy) {
  ++seen_;
  if (val_accuracy > best_) {
    best_ = val_accuracy;
    best_epoch_ = seen_;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

// ---- helpers -----------------------------------------------------------------

std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("CAPSROUT_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(resolve_threads(threads), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> workers;
    for (std::size_t t = 0; t < threads; ++t) {
      workers.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

Tensor<float> model_input(const Sample& sample, InputMode mode, std::size_t side) {
  auto img = apply_input_mode(sample, mode);
  if (side == kImageSide) return img;
  if (side == 0 || side > kImageSide || kImageSide % side != 0) {
    fail(ErrorCode::kDimension, "model input side " + std::to_string(side) + " does not divide 64");
  }
  return block_mean(img, kImageSide / side);
}

// ---- metrics -----------------------------------------------------------------

Metrics metrics_from_predictions(std::span<const int> truth, std::span<const int> predicted,
                                 std::size_t class_count) {
  if (truth.size() != predicted.size()) fail(ErrorCode::kInvalidArgument, "truth/prediction count mismatch");
  if (truth.empty()) fail(ErrorCode::kEmptySplit, "cannot compute metrics over an empty split");
  Metrics m;
  m.count = truth.size();
  m.confusion.assign(class_count, std::vector<std::size_t>(class_count, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = truth[i], p = predicted[i];
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= class_count || static_cast<std::size_t>(p) >= class_count) {
      fail(ErrorCode::kInvalidArgument, "class index out of range in metrics");
    }
    ++m.confusion[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
    if (t == p) ++correct;
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.count);
  for (std::size_t k = 0; k < class_count; ++k) {
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < class_count; ++j) {
      row += m.confusion[k][j];
      col += m.confusion[j][k];
    }
    const double tp = static_cast<double>(m.confusion[k][k]);
    m.precision.push_back(col ? tp / static_cast<double>(col) : 0.0);
    m.recall.push_back(row ? tp / static_cast<double>(row) : 0.0);
  }
  return m;
}

namespace {

std::size_t class_count_of(const Model<float>& model) {
  const auto j = json::parse(model.config_json());
  return j.at("class_count").get<std::size_t>();
}

}  // namespace

Metrics evaluate(const Model<float>& model, const Dataset& dataset, std::span<const std::size_t> indices,
                 InputMode mode, std::size_t threads) {
  if (indices.empty()) fail(ErrorCode::kEmptySplit, "cannot evaluate an empty split");
  std::vector<int> truth(indices.size()), predicted(indices.size());
  parallel_for(indices.size(), threads, [&](std::size_t k) {
    const auto& s = dataset.samples.at(indices[k]);
    truth[k] = s.class_index();
    predicted[k] = model.predict(model_input(s, mode, model.input_side()));
  });
  return metrics_from_predictions(truth, predicted, class_count_of(model));
}

// ---- optimizers ----------------------------------------------------------------

namespace {

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const ParamSet<float>& params)
      : cfg_(cfg), first_(params.zeros_like()) {
    if (cfg.optimizer == OptimizerKind::kAdam) second_ = params.zeros_like();
  }

  void step(ParamSet<float>& params, const ParamSet<float>& grads) {
    ++t_;
    const auto lr = static_cast<float>(cfg_.learning_rate);
    if (cfg_.optimizer == OptimizerKind::kSgdMomentum) {
      const auto mu = static_cast<float>(cfg_.momentum);
      for (std::size_t g = 0; g < params.size(); ++g) {
        float* p = params[g].raw();
        float* vel = first_[g].raw();
        const float* gr = grads[g].raw();
        for (std::size_t i = 0; i < params[g].size(); ++i) {
          vel[i] = mu * vel[i] + gr[i];
          p[i] -= lr * vel[i];
        }
      }
      return;
    }
    const auto b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const auto eps = static_cast<float>(cfg_.epsilon);
    const auto c1 = static_cast<float>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const auto c2 = static_cast<float>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    for (std::size_t g = 0; g < params.size(); ++g) {
      float* p = params[g].raw();
      float* m = first_[g].raw();
      float* v = second_[g].raw();
      const float* gr = grads[g].raw();
      for (std::size_t i = 0; i < params[g].size(); ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * gr[i];
        v[i] = b2 * v[i] + (1.0f - b2) * gr[i] * gr[i];
        const float mhat = m[i] / c1, vhat = v[i] / c2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  TrainConfig cfg_;
  ParamSet<float> first_, second_;
  std::size_t t_ = 0;
};

}  // namespace

// ---- training loop ---------------------------------------------------------------

TrainResult train(Model<float>& model, const Dataset& dataset, const TrainConfig& config,
                  const TrainHooks& hooks) {
  config.validate();
  const auto split = split_by_patient(dataset, config.split, config.seed);
  if (split.train.empty()) fail(ErrorCode::kEmptySplit, "training split is empty");
  if (split.val.empty()) fail(ErrorCode::kEmptySplit, "validation split is empty");

  const std::size_t side = model.input_side();
  std::vector<Tensor<float>> inputs(dataset.size());
  for (auto idx : split.train) inputs[idx] = model_input(dataset.samples[idx], config.input_mode, side);

  const std::size_t threads = resolve_threads(config.threads);
  Rng shuffle_rng(config.seed ^ 0x5DEECE66DULL);
  Optimizer optimizer(config, model.params());
  EarlyStopping stopper(config.patience);

  TrainResult result;
  ParamSet<float> best_params = model.params();
  ParamSet<float> grads = model.params().zeros_like();
  const std::size_t wave = std::min(threads, config.batch_size);
  std::vector<ParamSet<float>> scratch(wave, grads);
  std::vector<SampleLoss> losses(config.batch_size);

  std::vector<std::size_t> order = split.train;
  for (std::size_t epoch = 1; epoch <= config.epochs_max; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double sum_primary = 0, sum_recon = 0, sum_total = 0;
    std::size_t correct = 0;

    for (std::size_t start = 0, batch_no = 0; start < order.size(); start += config.batch_size, ++batch_no) {
      const std::size_t count = std::min(config.batch_size, order.size() - start);
      grads.zero();
      // Per-sample gradients land in scratch buffers and are summed in sample
      // order, so the result is independent of the worker count.
      for (std::size_t w0 = 0; w0 < count; w0 += wave) {
        const std::size_t n = std::min(wave, count - w0);
        parallel_for(n, threads, [&](std::size_t k) {
          scratch[k].zero();
          const auto idx = order[start + w0 + k];
          losses[w0 + k] = model.accumulate_gradient(inputs[idx], dataset.samples[idx].class_index(), scratch[k]);
        });
        for (std::size_t k = 0; k < n; ++k) {
          for (std::size_t g = 0; g < grads.size(); ++g) ops::accumulate(grads[g], scratch[k][g]);
        }
      }
      for (std::size_t k = 0; k < count; ++k) {
        const auto& l = losses[k];
        if (!std::isfinite(l.total)) {
          fail(ErrorCode::kNonFinite, "non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                                          std::to_string(batch_no) + " (sample " +
                                          std::to_string(order[start + k]) + ")");
        }
        sum_primary += l.primary;
        sum_recon += l.reconstruction;
        sum_total += l.total;
        if (l.predicted == dataset.samples[order[start + k]].class_index()) ++correct;
      }
      const float inv = 1.0f / static_cast<float>(count);
      for (std::size_t g = 0; g < grads.size(); ++g) {
        for (auto& v : grads[g].data()) v *= inv;
        require_finite(grads[g], "gradient of parameter group '" + grads.name(g) + "' in epoch " +
                                     std::to_string(epoch) + ", batch " + std::to_string(batch_no));
      }
      optimizer.step(model.params(), grads);
    }

    EpochReport report;
    report.epoch = epoch;
    const auto n = static_cast<double>(order.size());
    report.capsnet_loss = sum_primary / n;
    report.decoder_loss = sum_recon / n;
    report.total_loss = sum_total / n;
    report.train_accuracy = static_cast<double>(correct) / n;
    report.val_accuracy = hooks.validation_accuracy
                              ? hooks.validation_accuracy(epoch, model)
                              : evaluate(model, dataset, split.val, config.input_mode, threads).accuracy;
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.reports.push_back(report);

    if (stopper.observe(report.val_accuracy)) best_params = model.params();
    if (hooks.on_epoch_end) hooks.on_epoch_end(report, model);
    if (stopper.should_stop()) break;
  }

  result.best_epoch = stopper.best_epoch();
  result.best_val_accuracy = stopper.best_accuracy();
  result.checkpoint = make_checkpoint(model);
  result.checkpoint.params = std::move(best_params);
  result.checkpoint.rng_state = shuffle_rng.state();
  json meta = {{"train_config", json::parse(config.to_json())},
               {"best_epoch", result.best_epoch},
               {"best_val_accuracy", result.best_val_accuracy},
               {"epochs_run", result.reports.size()}};
  result.checkpoint.metadata_json = meta.dump();
  return result;
}

}  // namespace capsrout
