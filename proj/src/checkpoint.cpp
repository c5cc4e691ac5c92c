#include "capsrout/checkpoint.hpp"

#include <algorithm>

#include "capsrout/binio.hpp"

namespace capsrout {

namespace {
constexpr std::uint8_t kMagic[4] = {'C', 'R', 'C', 'K'};
constexpr std::uint8_t kDtypeF32 = 0;
}  // namespace

std::unique_ptr<Model<float>> Checkpoint::instantiate() const {
  switch (kind) {
    case ModelKind::kCapsNet:
      return std::make_unique<CapsNet<float>>(CapsNetConfig::from_json(config_json), params);
    case ModelKind::kCnn:
      return std::make_unique<Cnn<float>>(CnnConfig::from_json(config_json), params);
  }
  fail(ErrorCode::kModelKind, "unknown model kind in checkpoint");
}

void Checkpoint::require_kind(ModelKind expected) const {
  if (kind != expected) {
    fail(ErrorCode::kModelKind, std::string("checkpoint holds a ") + model_kind_name(kind) +
                                    " model, expected " + model_kind_name(expected));
  }
}

CapsNet<float> Checkpoint::as_capsnet() const {
  require_kind(ModelKind::kCapsNet);
  return CapsNet<float>(CapsNetConfig::from_json(config_json), params);
}

Checkpoint make_checkpoint(const Model<float>& model) {
  Checkpoint c;
  c.kind = model.kind();
  c.config_json = model.config_json();
  c.params = model.params();
  return c;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.bytes(kMagic);
  w.u16(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(ckpt.kind));
  w.str(ckpt.config_json);
  w.str(ckpt.metadata_json);
  w.str(ckpt.rng_state);
  w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, value] : ckpt.params.entries()) {
    w.str(name);
    w.u8(kDtypeF32);
    w.u8(static_cast<std::uint8_t>(value.rank()));
    for (auto extent : value.shape()) w.u32(static_cast<std::uint32_t>(extent));
    for (float v : value.data()) w.f32(v);
  }
  const auto crc = crc32_of(w.buffer());
  w.u32(crc);
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader head(bytes, "checkpoint");
  const auto magic = head.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) {
    fail(ErrorCode::kBadMagic, "not a checkpoint file (bad magic)");
  }
  const auto version = head.u16();
  if (version != kCheckpointVersion) {
    fail(ErrorCode::kVersionMismatch, "checkpoint version " + std::to_string(version) +
                                          " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() < 4 + 2 + 4) fail(ErrorCode::kTruncated, "checkpoint truncated before checksum");
  const auto body = bytes.first(bytes.size() - 4);
  const auto stored = ByteReader(bytes.subspan(bytes.size() - 4), "checkpoint").u32();

  // Parse first so a short file reports truncation rather than a checksum.
  ByteReader r(body, "checkpoint");
  r.bytes(6);
  Checkpoint c;
  const auto kind = r.u8();
  if (kind != static_cast<std::uint8_t>(ModelKind::kCapsNet) && kind != static_cast<std::uint8_t>(ModelKind::kCnn)) {
    if (crc32_of(body) != stored) fail(ErrorCode::kChecksum, "checkpoint checksum mismatch");
    fail(ErrorCode::kModelKind, "checkpoint has unknown model kind " + std::to_string(kind));
  }
  c.kind = static_cast<ModelKind>(kind);
  c.config_json = r.str();
  c.metadata_json = r.str();
  c.rng_state = r.str();
  const auto count = r.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    auto name = r.str();
    const auto dtype = r.u8();
    if (dtype != kDtypeF32) {
      if (crc32_of(body) != stored) fail(ErrorCode::kChecksum, "checkpoint checksum mismatch");
      fail(ErrorCode::kInvalidRecord, "tensor '" + name + "' has unsupported dtype " + std::to_string(dtype));
    }
    const auto rank = r.u8();
    Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    const std::size_t n = shape_numel(shape);
    r.need(4 * n);
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32();
    c.params.add(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  if (crc32_of(body) != stored) fail(ErrorCode::kChecksum, "checkpoint checksum mismatch");
  if (r.remaining() != 0) fail(ErrorCode::kInvalidRecord, "checkpoint has trailing bytes");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace capsrout
