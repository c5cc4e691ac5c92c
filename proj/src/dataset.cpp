#include "capsrout/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "capsrout/binio.hpp"
#include "capsrout/rng.hpp"

namespace capsrout {

const char* tumor_label_name(std::uint8_t label) {
  switch (label) {
    case 1: return "meningioma";
    case 2: return "glioma";
    case 3: return "pituitary";
    default: return "invalid";
  }
}

const char* input_mode_name(InputMode mode) {
  return mode == InputMode::kWholeBrain ? "whole" : "segmented";
}

InputMode parse_input_mode(const std::string& name) {
  if (name == "whole" || name == "whole_brain") return InputMode::kWholeBrain;
  if (name == "segmented" || name == "segmented_tumor") return InputMode::kSegmentedTumor;
  fail(ErrorCode::kInvalidArgument, "unknown input mode '" + name + "' (expected whole|segmented)");
}

const char* split_part_name(SplitPart part) {
  switch (part) {
    case SplitPart::kTrain: return "train";
    case SplitPart::kVal: return "val";
    case SplitPart::kTest: return "test";
  }
  return "unknown";
}

SplitPart parse_split_part(const std::string& name) {
  if (name == "train") return SplitPart::kTrain;
  if (name == "val") return SplitPart::kVal;
  if (name == "test") return SplitPart::kTest;
  fail(ErrorCode::kInvalidArgument, "unknown split '" + name + "' (expected train|val|test)");
}

void Dataset::validate() const {
  const bool masks = has_masks();
  for (std::size_t r = 0; r < samples.size(); ++r) {
    const auto& s = samples[r];
    auto bad = [r](const std::string& what) {
      fail(ErrorCode::kInvalidRecord, "record " + std::to_string(r) + ": " + what);
    };
    if (s.label < 1 || s.label > 3) bad("label " + std::to_string(s.label) + " outside {1,2,3}");
    if (s.image.size() != kImagePixels) bad("image has " + std::to_string(s.image.size()) + " pixels");
    for (float px : s.image) {
      if (!std::isfinite(px) || px < 0.0f || px > 1.0f) bad("pixel value outside [0,1]");
    }
    if (s.mask.has_value() != masks) bad("mask presence differs from the rest of the dataset");
    if (s.mask) {
      if (s.mask->size() != kImagePixels) bad("mask has " + std::to_string(s.mask->size()) + " pixels");
      for (auto m : *s.mask) {
        if (m > 1) bad("mask value " + std::to_string(m) + " not in {0,1}");
      }
    }
  }
}

// ---- preprocessing ---------------------------------------------------------

Tensor<float> block_mean(const Tensor<float>& image, std::size_t factor) {
  if (image.rank() != 2 || factor == 0 || image.dim(0) % factor || image.dim(1) % factor) {
    fail(ErrorCode::kDimension, "block_mean: " + shape_str(image.shape()) + " not divisible by " +
                                    std::to_string(factor));
  }
  const std::size_t h = image.dim(0) / factor, w = image.dim(1) / factor, src_w = image.dim(1);
  Tensor<float> out({h, w});
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::size_t dy = 0; dy < factor; ++dy) {
        const float* row = image.raw() + (y * factor + dy) * src_w + x * factor;
        for (std::size_t dx = 0; dx < factor; ++dx) acc += row[dx];
      }
      out[y * w + x] = static_cast<float>(acc * inv);
    }
  }
  return out;
}

void min_max_normalize(std::span<float> pixels) {
  if (pixels.empty()) return;
  const auto [lo, hi] = std::minmax_element(pixels.begin(), pixels.end());
  const float mn = *lo, mx = *hi;
  if (!(mx > mn)) {
    std::fill(pixels.begin(), pixels.end(), 0.0f);
    return;
  }
  const float range = mx - mn;
  for (auto& p : pixels) p = std::clamp((p - mn) / range, 0.0f, 1.0f);
}

Tensor<float> downsample(const Tensor<float>& image_512) {
  if (image_512.shape() != Shape{kSourceSide, kSourceSide}) {
    fail(ErrorCode::kDimension, "downsample expects a 512x512 image, got " + shape_str(image_512.shape()));
  }
  auto out = block_mean(image_512, kSourceSide / kImageSide);
  min_max_normalize(out.data());
  return out;
}

Tensor<float> apply_input_mode(const Sample& sample, InputMode mode) {
  if (sample.image.size() != kImagePixels) {
    fail(ErrorCode::kDimension, "sample image has " + std::to_string(sample.image.size()) + " pixels");
  }
  Tensor<float> img({kImageSide, kImageSide}, sample.image);
  if (mode == InputMode::kWholeBrain) return img;
  if (!sample.mask) {
    fail(ErrorCode::kInvalidArgument, "segmented input mode requires a tumor mask (patient " +
                                          std::to_string(sample.patient_id) + ")");
  }
  for (std::size_t i = 0; i < kImagePixels; ++i) img[i] *= static_cast<float>((*sample.mask)[i]);
  return img;
}

// ---- synthetic data --------------------------------------------------------

namespace {

struct Pose {
  double cx, cy, scale, angle;
};

bool inside_shape(std::uint8_t label, const Pose& pose, double px, double py) {
  const double dx = px - pose.cx, dy = py - pose.cy;
  const double c = std::cos(pose.angle), s = std::sin(pose.angle);
  const double lx = (c * dx + s * dy) / pose.scale;
  const double ly = (-s * dx + c * dy) / pose.scale;
  switch (label) {
    case 1: {  // filled ellipse
      const double ex = lx / 11.0, ey = ly / 8.0;
      return ex * ex + ey * ey <= 1.0;
    }
    case 2: {  // ring
      const double r = std::hypot(lx, ly / 0.85);
      return r >= 7.0 && r <= 11.0;
    }
    default: {  // two crossed bars
      const bool bar1 = std::abs(lx) <= 12.0 && std::abs(ly) <= 2.5;
      const bool bar2 = std::abs(ly) <= 12.0 && std::abs(lx) <= 2.5;
      return bar1 || bar2;
    }
  }
}

Sample synth_sample(std::uint8_t label, std::uint32_t patient_id, Rng& rng) {
  constexpr double kMid = kImageSide / 2.0;
  const double brain_a = rng.uniform(24.0, 28.0), brain_b = rng.uniform(20.0, 24.0);
  struct Wave {
    double kx, ky, phase;
  };
  Wave waves[3];
  for (auto& w : waves) {
    const double freq = rng.uniform(0.1, 0.3), dir = rng.uniform(0.0, std::numbers::pi);
    w = {freq * std::cos(dir), freq * std::sin(dir), rng.uniform(0.0, 2.0 * std::numbers::pi)};
  }
  const Pose pose{kMid + rng.uniform(-4.0, 4.0), kMid + rng.uniform(-4.0, 4.0), rng.uniform(0.9, 1.1),
                  rng.uniform(0.0, std::numbers::pi)};

  Sample s;
  s.label = label;
  s.patient_id = patient_id;
  s.image.resize(kImagePixels);
  std::vector<std::uint8_t> mask(kImagePixels, 0);
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double ex = (px - kMid) / brain_a, ey = (py - kMid) / brain_b;
      const double rr = std::sqrt(ex * ex + ey * ey);
      double value = 0.0;
      if (rr <= 1.0) {
        value = 0.35;
        for (const auto& w : waves) value += 0.04 * std::sin(w.kx * px + w.ky * py + w.phase);
      } else if (rr <= 1.08) {
        value = 0.55;  // skull rim
      }
      const std::size_t i = y * kImageSide + x;
      if (inside_shape(label, pose, px, py)) {
        mask[i] = 1;
        value = 0.85;
      }
      value += rng.normal(0.0, 0.04);
      s.image[i] = static_cast<float>(std::clamp(value, 0.0, 1.0));
    }
  }
  min_max_normalize(s.image);
  s.mask = std::move(mask);
  return s;
}

}  // namespace

Dataset synth_generate(std::uint64_t seed, std::size_t n_per_class) {
  if (n_per_class == 0) fail(ErrorCode::kInvalidArgument, "synth_generate needs n_per_class > 0");
  Rng rng(seed);
  Dataset ds;
  ds.samples.reserve(3 * n_per_class);
  for (std::size_t k = 0; k < 3 * n_per_class; ++k) {
    const auto label = static_cast<std::uint8_t>(k % 3 + 1);
    ds.samples.push_back(synth_sample(label, static_cast<std::uint32_t>(1000 + k), rng));
  }
  return ds;
}

// ---- BTDS ------------------------------------------------------------------

namespace {
constexpr std::uint8_t kBtdsMagic[4] = {'B', 'T', 'D', 'S'};
constexpr std::size_t kBtdsHeader = 4 + 2 + 4 + 1;
}  // namespace

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset) {
  dataset.validate();
  ByteWriter w;
  w.bytes(kBtdsMagic);
  w.u16(kBtdsVersion);
  w.u32(static_cast<std::uint32_t>(dataset.size()));
  const bool masks = dataset.has_masks();
  w.u8(masks ? 1 : 0);
  for (const auto& s : dataset.samples) {
    w.u32(s.patient_id);
    w.u8(s.label);
    for (float px : s.image) w.f32(px);
    if (masks) w.bytes(*s.mask);
  }
  const auto crc = crc32_of(w.buffer());
  w.u32(crc);
  return w.take();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "BTDS file");
  const auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kBtdsMagic))) {
    fail(ErrorCode::kBadMagic, "not a BTDS file (bad magic)");
  }
  const auto version = r.u16();
  if (version != kBtdsVersion) {
    fail(ErrorCode::kVersionMismatch, "BTDS version " + std::to_string(version) + " unsupported (expected " +
                                          std::to_string(kBtdsVersion) + ")");
  }
  const auto count = r.u32();
  const auto mask_flag = r.u8();
  if (mask_flag > 1) fail(ErrorCode::kInvalidRecord, "BTDS header: mask flag " + std::to_string(mask_flag));
  const std::size_t record = 4 + 1 + 4 * kImagePixels + (mask_flag ? kImagePixels : 0);
  const std::size_t expected = kBtdsHeader + static_cast<std::size_t>(count) * record + 4;
  if (bytes.size() < expected) {
    const std::size_t rec = (bytes.size() - std::min(bytes.size(), kBtdsHeader)) / record;
    fail(ErrorCode::kTruncated, "BTDS file truncated at byte offset " + std::to_string(bytes.size()) +
                                    " (expected " + std::to_string(expected) + " bytes; record " +
                                    std::to_string(rec) + " incomplete)");
  }
  if (bytes.size() > expected) {
    fail(ErrorCode::kInvalidRecord, "BTDS file has " + std::to_string(bytes.size() - expected) +
                                        " trailing bytes after the checksum");
  }
  const auto stored_crc = ByteReader(bytes.subspan(expected - 4), "BTDS checksum").u32();
  if (crc32_of(bytes.first(expected - 4)) != stored_crc) {
    fail(ErrorCode::kChecksum, "BTDS checksum mismatch");
  }

  Dataset ds;
  ds.samples.resize(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    auto& s = ds.samples[k];
    s.patient_id = r.u32();
    s.label = r.u8();
    s.image.resize(kImagePixels);
    for (auto& px : s.image) px = r.f32();
    if (mask_flag) {
      auto m = r.bytes(kImagePixels);
      s.mask.emplace(m.begin(), m.end());
    }
  }
  ds.validate();
  return ds;
}

void store_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  write_file_atomic(path, encode_dataset(dataset));
}

Dataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(read_file(path));
}

// ---- splits ----------------------------------------------------------------

void SplitFractions::validate() const {
  if (train < 0 || val < 0 || test < 0) fail(ErrorCode::kConfig, "split fractions must be non-negative");
  if (std::abs(train + val + test - 1.0) > 1e-9) {
    fail(ErrorCode::kConfig, "split fractions must sum to 1");
  }
}

DatasetSplit split_by_patient(const Dataset& dataset, const SplitFractions& fractions, std::uint64_t seed) {
  fractions.validate();
  std::vector<std::uint32_t> patients;
  for (const auto& s : dataset.samples) patients.push_back(s.patient_id);
  std::sort(patients.begin(), patients.end());
  patients.erase(std::unique(patients.begin(), patients.end()), patients.end());

  Rng rng(seed);
  rng.shuffle(std::span<std::uint32_t>(patients));
  const std::size_t n = patients.size();
  const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(fractions.train * static_cast<double>(n))));
  const auto n_val =
      std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions.val * static_cast<double>(n))));

  std::map<std::uint32_t, SplitPart> assignment;
  for (std::size_t k = 0; k < n; ++k) {
    assignment[patients[k]] = k < n_train ? SplitPart::kTrain
                              : k < n_train + n_val ? SplitPart::kVal
                                                    : SplitPart::kTest;
  }
  DatasetSplit split;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    switch (assignment.at(dataset.samples[i].patient_id)) {
      case SplitPart::kTrain: split.train.push_back(i); break;
      case SplitPart::kVal: split.val.push_back(i); break;
      case SplitPart::kTest: split.test.push_back(i); break;
    }
  }
  return split;
}

}  // namespace capsrout
