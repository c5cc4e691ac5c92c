#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capsrout/tensor.hpp"

namespace capsrout {

inline constexpr std::size_t kImageSide = 64;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr std::size_t kSourceSide = 512;

// Stored labels are 1-based, model class indices 0-based (label - 1).
enum class TumorLabel : std::uint8_t { kMeningioma = 1, kGlioma = 2, kPituitary = 3 };

const char* tumor_label_name(std::uint8_t label);

enum class InputMode { kWholeBrain, kSegmentedTumor };

const char* input_mode_name(InputMode mode);
InputMode parse_input_mode(const std::string& name);  // "whole" | "segmented"

struct Sample {
  std::vector<float> image;                         // 64x64 row-major, values in [0,1]
  std::uint8_t label = 1;                           // 1..3
  std::optional<std::vector<std::uint8_t>> mask;    // 64x64, values in {0,1}
  std::uint32_t patient_id = 0;

  int class_index() const { return static_cast<int>(label) - 1; }
  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool has_masks() const { return !samples.empty() && samples.front().mask.has_value(); }
  // Throws kInvalidRecord naming the first offending record.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

// ---- preprocessing ---------------------------------------------------------

// Non-overlapping factor x factor block means.
Tensor<float> block_mean(const Tensor<float>& image, std::size_t factor);

// Rescales to [0,1]; a constant image maps to all zeros.
void min_max_normalize(std::span<float> pixels);

// 512x512 -> 64x64: 8x8 block mean followed by per-image min-max.
Tensor<float> downsample(const Tensor<float>& image_512);

// whole_brain: image as stored. segmented_tumor: image * mask.
Tensor<float> apply_input_mode(const Sample& sample, InputMode mode);

// ---- synthetic data --------------------------------------------------------

// Three parametric shape classes on a noisy brain-like background, each with
// an exact mask: 1 filled ellipse, 2 ring, 3 crossed bar pair. One patient
// per sample; labels interleave 1,2,3,1,2,3,...
Dataset synth_generate(std::uint64_t seed, std::size_t n_per_class);

// ---- BTDS file format ------------------------------------------------------

inline constexpr std::uint16_t kBtdsVersion = 1;

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);

void store_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// ---- splits ----------------------------------------------------------------

struct SplitFractions {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;

  void validate() const;
};

enum class SplitPart { kTrain, kVal, kTest };
const char* split_part_name(SplitPart part);
SplitPart parse_split_part(const std::string& name);  // "train" | "val" | "test"

struct DatasetSplit {
  std::vector<std::size_t> train, val, test;  // sample indices, ascending

  const std::vector<std::size_t>& part(SplitPart p) const {
    switch (p) {
      case SplitPart::kTrain: return train;
      case SplitPart::kVal: return val;
      case SplitPart::kTest: return test;
    }
    return train;
  }
};

// Whole patients are assigned to one part. Patient counts per part are
// round(P * fraction) for train and val; test takes the remainder.
DatasetSplit split_by_patient(const Dataset& dataset, const SplitFractions& fractions, std::uint64_t seed);

}  // namespace capsrout
