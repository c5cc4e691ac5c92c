#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "capsrout/capsnet.hpp"
#include "capsrout/cnn.hpp"
#include "capsrout/model.hpp"

namespace capsrout {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Everything needed to evaluate, tweak, or warm-start a trained model.
struct Checkpoint {
  ModelKind kind = ModelKind::kCapsNet;
  std::string config_json;
  ParamSet<float> params;
  std::string rng_state;
  // Training provenance (train config, split seed and fractions, input mode,
  // best epoch and its validation accuracy) as a JSON object.
  std::string metadata_json = "{}";

  std::unique_ptr<Model<float>> instantiate() const;
  // kModelKind when the checkpoint holds a different model.
  void require_kind(ModelKind expected) const;
  CapsNet<float> as_capsnet() const;

  bool operator==(const Checkpoint&) const = default;
};

Checkpoint make_checkpoint(const Model<float>& model);

// Layout (little-endian): "CRCK", u16 version, u8 model kind, str config,
// str metadata, str rng state, u32 tensor count, per tensor {str name,
// u8 dtype (0 = f32), u8 rank, u32 extents[rank], f32 data}, then a CRC32 of
// everything before it. Strings are u32 length + bytes.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace capsrout
