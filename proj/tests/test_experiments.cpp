#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "capsrout/experiments.hpp"

using namespace capsrout;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> cells(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<EpochReport> fake_reports() {
  std::vector<EpochReport> r(3);
  for (std::size_t i = 0; i < 3; ++i) {
    r[i].epoch = i + 1;
    r[i].capsnet_loss = 0.5 / (i + 1);
    r[i].decoder_loss = 100.0 - 10 * i;
    r[i].total_loss = r[i].capsnet_loss + 0.0005 * r[i].decoder_loss;
    r[i].val_accuracy = 0.3 + 0.1 * i;
    r[i].seconds = 1.5;
  }
  return r;
}

}  // namespace

TEST_SUITE("epoch csv") {
  TEST_CASE("header, one row per epoch, total recomputes") {
    const auto reports = fake_reports();
    const auto lines = lines_of(epoch_csv(reports, true, false));
    REQUIRE(lines.size() == 4);
    CHECK(lines[0] == "epoch,capsnet_loss,decoder_loss,total_loss,val_accuracy,seconds");
    for (std::size_t i = 1; i < 4; ++i) {
      const auto c = cells(lines[i]);
      REQUIRE(c.size() == 6);
      CHECK(std::stoul(c[0]) == i);
      CHECK(std::abs(std::stod(c[3]) - (std::stod(c[1]) + 0.0005 * std::stod(c[2]))) < 1e-6);
      CHECK(c[5].empty());
    }
  }

  TEST_CASE("CNN rows leave the decoder column empty; timing fills seconds") {
    const auto reports = fake_reports();
    const auto c = cells(lines_of(epoch_csv(reports, false, true))[1]);
    REQUIRE(c.size() == 6);
    CHECK(c[2].empty());
    CHECK_FALSE(c[5].empty());
  }

  TEST_CASE("confusion csv") {
    const int truth[] = {0, 1, 2, 2};
    const int pred[] = {0, 2, 2, 2};
    const auto lines = lines_of(confusion_csv(metrics_from_predictions(truth, pred, 3)));
    REQUIRE(lines.size() == 4);
    CHECK(cells(lines[2]).back() == "1");
  }
}

TEST_SUITE("pgm") {
  TEST_CASE("header and pixel mapping") {
    std::vector<float> px(64 * 64, 0.5f);
    px[0] = -1.0f;
    px[1] = 2.0f;
    px[2] = 1.0f;
    const auto bytes = encode_pgm(px, 64, 64);
    const std::string header = "P5\n64 64\n255\n";
    CHECK(std::string(bytes.begin(), bytes.begin() + header.size()) == header);
    CHECK(bytes.size() == header.size() + 4096);
    CHECK(bytes[header.size()] == 0);
    CHECK(bytes[header.size() + 1] == 255);
    CHECK(bytes[header.size() + 2] == 255);
    CHECK(bytes[header.size() + 3] == 128);
  }

  TEST_CASE("strip places images side by side") {
    std::vector<Tensor<float>> imgs{Tensor<float>::filled({2, 2}, 0.0f), Tensor<float>::filled({2, 2}, 1.0f)};
    CHECK(horizontal_strip(imgs, 2) == std::vector<float>{0, 0, 1, 1, 0, 0, 1, 1});
  }
}

TEST_SUITE("tweak grid") {
  TEST_CASE("one file per delta plus a strip") {
    const auto ds = synth_generate(4, 1);
    const CapsNet<float> model(CapsNetConfig{}, 2);
    const auto dir = fs::temp_directory_path() / "capsrout_test_tweak";
    fs::remove_all(dir);
    const auto deltas = default_tweak_deltas();
    REQUIRE(deltas.size() == 11);
    CHECK(deltas.front() == doctest::Approx(-0.25));
    CHECK(deltas[5] == 0.0);
    CHECK(deltas.back() == doctest::Approx(0.25));
    const auto out = write_tweak_grid(model, ds.samples[0], InputMode::kWholeBrain, 0, deltas, dir);
    CHECK(out.images.size() == 11);
    for (const auto& p : out.images) CHECK(fs::file_size(p) == 13 + 4096);
    const auto strip = slurp(out.strip);
    const std::string header = "P5\n704 64\n255\n";
    CHECK(std::string(strip.begin(), strip.begin() + header.size()) == header);
    // Zero delta is the plain reconstruction.
    const auto base = model.forward(model_input(ds.samples[0], InputMode::kWholeBrain)).reconstruction;
    CHECK(slurp(out.images[5]) == encode_pgm(base.data(), 64, 64));
    fs::remove_all(dir);
  }
}

TEST_SUITE("experiment drivers") {
  TEST_CASE("sweep emits six rows with accuracies in [0,1]") {
    const auto ds = synth_generate(5, 2);
    TrainConfig cfg;
    cfg.epochs_max = 1;
    cfg.batch_size = 4;
    cfg.split = {0.5, 0.25, 0.25};
    const auto rows = run_sweep(ds, cfg);
    REQUIRE(rows.size() == 6);
    CHECK(rows[0].preset == "original-256-maps");
    for (const auto& r : rows) {
      CHECK(r.val_accuracy >= 0.0);
      CHECK(r.val_accuracy <= 1.0);
      CHECK(r.test_accuracy >= 0.0);
      CHECK(r.test_accuracy <= 1.0);
    }
    const auto lines = lines_of(sweep_csv(rows));
    CHECK(lines.size() == 7);
  }

  TEST_CASE("mode comparison covers both models and both modes") {
    const auto ds = synth_generate(5, 2);
    TrainConfig caps;
    caps.epochs_max = 1;
    caps.batch_size = 4;
    caps.split = {0.5, 0.25, 0.25};
    auto cnn = TrainConfig::defaults_for(ModelKind::kCnn);
    cnn.epochs_max = 1;
    cnn.split = caps.split;
    const auto rows = run_mode_comparison(ds, "default", caps, "shrunken", cnn);
    REQUIRE(rows.size() == 4);
    const auto lines = lines_of(mode_comparison_csv(rows));
    CHECK(lines.size() == 5);
    int seg = 0;
    for (const auto& r : rows) seg += r.mode == InputMode::kSegmentedTumor;
    CHECK(seg == 2);
  }

  TEST_CASE("unknown preset") {
    CHECK_THROWS_AS(build_model(ModelKind::kCnn, "huge", 1), Error);
  }
}
