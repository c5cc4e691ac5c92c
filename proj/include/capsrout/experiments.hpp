#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capsrout/dataset.hpp"
#include "capsrout/training.hpp"

namespace capsrout {

// ---- model construction ------------------------------------------------------

// capsnet: any table preset, "default" or "tiny". cnn: "default" or "shrunken".
std::unique_ptr<Model<float>> build_model(ModelKind kind, const std::string& preset, std::uint64_t seed);

// ---- CSV artifacts -----------------------------------------------------------

// epoch,capsnet_loss,decoder_loss,total_loss,val_accuracy,seconds. Decoder
// cells stay empty for models without a decoder; seconds stays empty unless
// `with_timing`, so default output is reproducible byte for byte.
std::string epoch_csv(std::span<const EpochReport> reports, bool has_decoder, bool with_timing);

std::string confusion_csv(const Metrics& metrics);

// ---- portable graymaps ---------------------------------------------------------

// Binary P5, 8-bit, pixel = round(255 * clamp(value, 0, 1)).
std::vector<std::uint8_t> encode_pgm(std::span<const float> pixels, std::size_t width, std::size_t height);

// Side-by-side concatenation of square images of equal side.
std::vector<float> horizontal_strip(std::span<const Tensor<float>> images, std::size_t side);

void write_text_file(const std::filesystem::path& path, const std::string& text);

// ---- experiment drivers ----------------------------------------------------------

struct SweepRow {
  std::string preset;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
};

// Trains each capsule preset with the same data, split and seed. Empty
// `presets` means all six table rows.
std::vector<SweepRow> run_sweep(const Dataset& dataset, const TrainConfig& config,
                                std::span<const std::string> presets = {},
                                const std::function<void(const SweepRow&)>& on_row = {});
std::string sweep_csv(std::span<const SweepRow> rows);

struct ModeComparisonRow {
  ModelKind model = ModelKind::kCapsNet;
  InputMode mode = InputMode::kWholeBrain;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t epochs_run = 0;
};

// CapsNet and CNN, each trained on whole-brain and segmented inputs.
std::vector<ModeComparisonRow> run_mode_comparison(const Dataset& dataset, const std::string& capsnet_preset,
                                                   const TrainConfig& capsnet_config,
                                                   const std::string& cnn_preset, const TrainConfig& cnn_config);
std::string mode_comparison_csv(std::span<const ModeComparisonRow> rows);

// Default grid -0.25..0.25 in steps of 0.05 (11 values).
std::vector<double> default_tweak_deltas();

struct TweakOutput {
  std::vector<std::filesystem::path> images;
  std::filesystem::path strip;
};

// One PGM per delta (tweak_00.pgm, ...) plus tweak_strip.pgm in `out_dir`.
TweakOutput write_tweak_grid(const CapsNet<float>& model, const Sample& sample, InputMode mode,
                             std::size_t dim, std::span<const double> deltas,
                             const std::filesystem::path& out_dir);

}  // namespace capsrout
