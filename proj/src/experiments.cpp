#include "capsrout/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "capsrout/binio.hpp"
#include "capsrout/capsnet.hpp"
#include "capsrout/cnn.hpp"

namespace capsrout {

std::unique_ptr<Model<float>> build_model(ModelKind kind, const std::string& preset, std::uint64_t seed) {
  if (kind == ModelKind::kCapsNet) {
    return std::make_unique<CapsNet<float>>(capsnet_preset(preset.empty() ? "default" : preset), seed);
  }
  if (preset.empty() || preset == "default") return std::make_unique<Cnn<float>>(CnnConfig{}, seed);
  if (preset == "shrunken") return std::make_unique<Cnn<float>>(cnn_shrunken_config(), seed);
  fail(ErrorCode::kConfig, "unknown cnn preset '" + preset + "' (expected default|shrunken)");
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string epoch_csv(std::span<const EpochReport> reports, bool has_decoder, bool with_timing) {
  std::ostringstream os;
  os << "epoch,capsnet_loss,decoder_loss,total_loss,val_accuracy,seconds\n";
  for (const auto& r : reports) {
    os << r.epoch << ',' << fmt(r.capsnet_loss) << ',' << (has_decoder ? fmt(r.decoder_loss) : "") << ','
       << fmt(r.total_loss) << ',' << fmt(r.val_accuracy) << ',' << (with_timing ? fmt(r.seconds) : "") << '\n';
  }
  return os.str();
}

std::string confusion_csv(const Metrics& metrics) {
  std::ostringstream os;
  os << "true\\predicted";
  const std::size_t k = metrics.confusion.size();
  for (std::size_t j = 0; j < k; ++j) os << ',' << j + 1;
  os << '\n';
  for (std::size_t i = 0; i < k; ++i) {
    os << i + 1;
    for (std::size_t j = 0; j < k; ++j) os << ',' << metrics.confusion[i][j];
    os << '\n';
  }
  return os.str();
}

std::vector<std::uint8_t> encode_pgm(std::span<const float> pixels, std::size_t width, std::size_t height) {
  if (pixels.size() != width * height) {
    fail(ErrorCode::kDimension, "pgm: " + std::to_string(pixels.size()) + " pixels for " + std::to_string(width) +
                                    "x" + std::to_string(height));
  }
  const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + pixels.size());
  for (float v : pixels) {
    const double clamped = std::clamp(static_cast<double>(v), 0.0, 1.0);
    out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * clamped)));
  }
  return out;
}

std::vector<float> horizontal_strip(std::span<const Tensor<float>> images, std::size_t side) {
  const std::size_t width = side * images.size();
  std::vector<float> strip(width * side);
  for (std::size_t k = 0; k < images.size(); ++k) {
    if (images[k].size() != side * side) fail(ErrorCode::kDimension, "strip image has the wrong size");
    for (std::size_t y = 0; y < side; ++y) {
      std::copy_n(images[k].raw() + y * side, side, strip.data() + y * width + k * side);
    }
  }
  return strip;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---- sweep ---------------------------------------------------------------------------

std::vector<SweepRow> run_sweep(const Dataset& dataset, const TrainConfig& config,
                                std::span<const std::string> presets,
                                const std::function<void(const SweepRow&)>& on_row) {
  std::vector<std::string> names(presets.begin(), presets.end());
  if (names.empty()) names = capsnet_preset_names();
  const auto split = split_by_patient(dataset, config.split, config.seed);
  if (split.test.empty()) fail(ErrorCode::kEmptySplit, "sweep needs a non-empty test split");

  std::vector<SweepRow> rows;
  for (const auto& name : names) {
    auto model = build_model(ModelKind::kCapsNet, name, config.seed);
    auto result = train(*model, dataset, config);
    const auto best = result.checkpoint.instantiate();
    SweepRow row{name, result.best_val_accuracy,
                 evaluate(*best, dataset, split.test, config.input_mode, config.threads).accuracy,
                 result.best_epoch, result.reports.size()};
    if (on_row) on_row(row);
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  std::ostringstream os;
  os << "preset,accuracy,val_accuracy,best_epoch,epochs_run\n";
  for (const auto& r : rows) {
    os << r.preset << ',' << fmt(r.test_accuracy) << ',' << fmt(r.val_accuracy) << ',' << r.best_epoch << ','
       << r.epochs_run << '\n';
  }
  return os.str();
}

// ---- input-mode comparison ---------------------------------------------------------

std::vector<ModeComparisonRow> run_mode_comparison(const Dataset& dataset, const std::string& capsnet_preset,
                                                   const TrainConfig& capsnet_config,
                                                   const std::string& cnn_preset, const TrainConfig& cnn_config) {
  if (!dataset.has_masks()) fail(ErrorCode::kInvalidArgument, "input-mode comparison needs tumor masks");
  std::vector<ModeComparisonRow> rows;
  for (auto kind : {ModelKind::kCapsNet, ModelKind::kCnn}) {
    for (auto mode : {InputMode::kWholeBrain, InputMode::kSegmentedTumor}) {
      TrainConfig cfg = kind == ModelKind::kCapsNet ? capsnet_config : cnn_config;
      cfg.input_mode = mode;
      const auto& preset = kind == ModelKind::kCapsNet ? capsnet_preset : cnn_preset;
      auto model = build_model(kind, preset, cfg.seed);
      auto result = train(*model, dataset, cfg);
      const auto split = split_by_patient(dataset, cfg.split, cfg.seed);
      const auto best = result.checkpoint.instantiate();
      ModeComparisonRow row{kind, mode, result.best_val_accuracy, 0.0, result.reports.size()};
      row.test_accuracy = split.test.empty() ? row.val_accuracy
                                             : evaluate(*best, dataset, split.test, mode, cfg.threads).accuracy;
      rows.push_back(row);
    }
  }
  return rows;
}

std::string mode_comparison_csv(std::span<const ModeComparisonRow> rows) {
  std::ostringstream os;
  os << "model,mode,accuracy,val_accuracy,epochs_run\n";
  for (const auto& r : rows) {
    os << model_kind_name(r.model) << ',' << input_mode_name(r.mode) << ',' << fmt(r.test_accuracy) << ','
       << fmt(r.val_accuracy) << ',' << r.epochs_run << '\n';
  }
  return os.str();
}

// ---- tweak ---------------------------------------------------------------------------

std::vector<double> default_tweak_deltas() {
  std::vector<double> d;
  for (int k = -5; k <= 5; ++k) d.push_back(0.05 * k);
  return d;
}

TweakOutput write_tweak_grid(const CapsNet<float>& model, const Sample& sample, InputMode mode,
                             std::size_t dim, std::span<const double> deltas,
                             const std::filesystem::path& out_dir) {
  if (deltas.empty()) fail(ErrorCode::kInvalidArgument, "tweak needs at least one delta");
  const std::size_t side = model.input_side();
  const auto images = model.tweak(model_input(sample, mode, side), dim, deltas);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create '" + out_dir.string() + "'");

  TweakOutput out;
  for (std::size_t k = 0; k < images.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "tweak_%02zu.pgm", k);
    out.images.push_back(out_dir / name);
    write_file_atomic(out.images.back(), encode_pgm(images[k].data(), side, side));
  }
  out.strip = out_dir / "tweak_strip.pgm";
  write_file_atomic(out.strip, encode_pgm(horizontal_strip(images, side), side * images.size(), side));
  return out;
}

}  // namespace capsrout
