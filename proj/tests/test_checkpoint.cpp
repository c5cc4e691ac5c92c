#include <doctest.h>

#include <filesystem>

#include "capsrout/checkpoint.hpp"
#include "capsrout/training.hpp"

using namespace capsrout;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kInvalidArgument;
}

CapsNetConfig small_caps() {
  CapsNetConfig c;
  c.input_side = 16;
  c.conv_layers = {{8, 5, 1}};
  c.primary_kernel = 5;
  c.primary_stride = 2;
  c.component_capsules = 4;
  c.primary_dim = 4;
  c.primary_conv_filters = 16;
  c.class_dim = 8;
  c.decoder_widths = {32, 64, 256};
  return c;
}

}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip is bit-identical for both kinds") {
    const auto path = std::filesystem::temp_directory_path() / "capsrout_test.crck";
    for (int kind = 0; kind < 2; ++kind) {
      Checkpoint c = kind == 0 ? make_checkpoint(CapsNet<float>(small_caps(), 3))
                               : make_checkpoint(Cnn<float>(cnn_shrunken_config(), 3));
      c.metadata_json = R"({"note":"x"})";
      c.rng_state = "12 34";
      const auto bytes = encode_checkpoint(c);
      CHECK(decode_checkpoint(bytes) == c);
      CHECK(encode_checkpoint(decode_checkpoint(bytes)) == bytes);
      save_checkpoint(c, path);
      CHECK(load_checkpoint(path) == c);
    }
    std::filesystem::remove(path);
  }

  TEST_CASE("the restored model predicts identically") {
    const CapsNet<float> model(small_caps(), 3);
    const auto restored = decode_checkpoint(encode_checkpoint(make_checkpoint(model))).instantiate();
    const auto ds = synth_generate(2, 2);
    for (const auto& s : ds.samples) {
      const auto x = model_input(s, InputMode::kWholeBrain, 16);
      CHECK(restored->loss(x, s.class_index()).total == model.loss(x, s.class_index()).total);
    }
  }

  TEST_CASE("corruption is detected") {
    const auto good = encode_checkpoint(make_checkpoint(CapsNet<float>(small_caps(), 3)));
    auto b = good;
    b[good.size() / 2] ^= 0x10;
    CHECK(code_of([&] { decode_checkpoint(b); }) == ErrorCode::kChecksum);
    b = good;
    b[1] = 'X';
    CHECK(code_of([&] { decode_checkpoint(b); }) == ErrorCode::kBadMagic);
    b = good;
    b[4] = 9;
    CHECK(code_of([&] { decode_checkpoint(b); }) == ErrorCode::kVersionMismatch);
    b = good;
    b.resize(good.size() - 1000);
    CHECK(code_of([&] { decode_checkpoint(b); }) == ErrorCode::kTruncated);
    b.resize(8);
    CHECK(code_of([&] { decode_checkpoint(b); }) == ErrorCode::kTruncated);
  }

  TEST_CASE("a CNN checkpoint refuses to load as a capsule network") {
    const auto c = decode_checkpoint(encode_checkpoint(make_checkpoint(Cnn<float>(cnn_shrunken_config(), 3))));
    CHECK(code_of([&] { c.as_capsnet(); }) == ErrorCode::kModelKind);
    CHECK(code_of([&] { c.require_kind(ModelKind::kCapsNet); }) == ErrorCode::kModelKind);
    CHECK_NOTHROW(c.require_kind(ModelKind::kCnn));
  }

  TEST_CASE("missing file is an io error") {
    CHECK(code_of([] { load_checkpoint("/nonexistent/dir/x.crck"); }) == ErrorCode::kIo);
  }

  TEST_CASE("warm start from a saved checkpoint follows the same trajectory") {
    const auto ds = synth_generate(3, 4);
    TrainConfig cfg;
    cfg.epochs_max = 2;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-3;
    cfg.threads = 1;
    CapsNet<float> first(small_caps(), 8);
    train(first, ds, cfg);
    const auto saved = decode_checkpoint(encode_checkpoint(make_checkpoint(first)));

    auto direct = first;
    auto restored = saved.instantiate();
    const auto a = train(direct, ds, cfg);
    const auto b = train(*restored, ds, cfg);
    REQUIRE(a.reports.size() == b.reports.size());
    for (std::size_t i = 0; i < a.reports.size(); ++i) CHECK(a.reports[i].total_loss == b.reports[i].total_loss);
    CHECK(a.checkpoint.params == b.checkpoint.params);
  }
}
