#include <doctest.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "capsrout/dataset.hpp"
#include "oracles.hpp"

using namespace capsrout;

namespace {

std::string message_of(const std::function<void()>& fn, ErrorCode expected) {
  try {
    fn();
  } catch (const Error& e) {
    CHECK(e.code() == expected);
    return e.what();
  }
  FAIL("expected an Error");
  return {};
}

void rewrite_crc(std::vector<std::uint8_t>& bytes) {
  const auto n = bytes.size() - 4;
  const auto crc = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(n)));
  for (int k = 0; k < 4; ++k) bytes[n + k] = static_cast<std::uint8_t>(crc >> (8 * k));
}

constexpr std::size_t kHeader = 4 + 2 + 4 + 1;

}  // namespace

TEST_SUITE("downsample") {
  TEST_CASE("constant image stays constant and normalizes to zero") {
    const auto out = downsample(Tensor<float>::filled({512, 512}, 0.3f));
    CHECK(out.shape() == Shape{64, 64});
    for (float v : out.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("one white 8x8 block lands on one pixel") {
    Tensor<float> img({512, 512});
    for (std::size_t r = 8 * 17; r < 8 * 18; ++r)
      for (std::size_t c = 8 * 40; c < 8 * 41; ++c) img[r * 512 + c] = 1.0f;
    const auto out = downsample(img);
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == (i == 17 * 64 + 40 ? 1.0f : 0.0f));
  }

  TEST_CASE("block mean matches a double loop before normalization") {
    capsrout::Rng rng(4);
    Tensor<float> img({512, 512});
    for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
    const auto got = block_mean(img, 8);
    REQUIRE(got.shape() == Shape{64, 64});
    double worst = 0;
    for (std::size_t r = 0; r < 64; ++r)
      for (std::size_t c = 0; c < 64; ++c) {
        double s = 0;
        for (std::size_t dy = 0; dy < 8; ++dy)
          for (std::size_t dx = 0; dx < 8; ++dx) s += img[(8 * r + dy) * 512 + 8 * c + dx];
        worst = std::max(worst, std::abs(s / 64 - got[r * 64 + c]));
      }
    CHECK(worst < 1e-6);
    const auto norm = downsample(img);
    CHECK(*std::min_element(norm.data().begin(), norm.data().end()) == 0.0f);
    CHECK(*std::max_element(norm.data().begin(), norm.data().end()) == 1.0f);
  }

  TEST_CASE("non-512 input is rejected") {
    message_of([] { downsample(Tensor<float>({256, 256})); }, ErrorCode::kDimension);
  }
}

TEST_SUITE("input modes") {
  Sample sample_with_mask(std::vector<std::uint8_t> mask) {
    capsrout::Rng rng(3);
    Sample s;
    s.image.resize(kImagePixels);
    for (auto& v : s.image) v = static_cast<float>(rng.uniform());
    s.mask = std::move(mask);
    return s;
  }

  TEST_CASE("all-ones mask equals the whole image") {
    const auto s = sample_with_mask(std::vector<std::uint8_t>(kImagePixels, 1));
    CHECK(apply_input_mode(s, InputMode::kSegmentedTumor) == apply_input_mode(s, InputMode::kWholeBrain));
    const auto whole = apply_input_mode(s, InputMode::kWholeBrain);
    CHECK(std::equal(whole.data().begin(), whole.data().end(), s.image.begin(), s.image.end()));
  }

  TEST_CASE("all-zeros mask gives a black image") {
    const auto s = sample_with_mask(std::vector<std::uint8_t>(kImagePixels, 0));
    const auto out = apply_input_mode(s, InputMode::kSegmentedTumor);
    for (float v : out.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("checkerboard mask against an elementwise loop") {
    std::vector<std::uint8_t> mask(kImagePixels);
    for (std::size_t r = 0; r < 64; ++r)
      for (std::size_t c = 0; c < 64; ++c) mask[r * 64 + c] = (r + c) % 2;
    const auto s = sample_with_mask(mask);
    const auto out = apply_input_mode(s, InputMode::kSegmentedTumor);
    for (std::size_t i = 0; i < kImagePixels; ++i) CHECK(out[i] == s.image[i] * float(mask[i]));
  }

  TEST_CASE("segmented mode without a mask") {
    Sample s;
    s.image.assign(kImagePixels, 0.5f);
    message_of([&] { apply_input_mode(s, InputMode::kSegmentedTumor); }, ErrorCode::kInvalidArgument);
  }

  TEST_CASE("mode names") {
    CHECK(parse_input_mode("whole") == InputMode::kWholeBrain);
    CHECK(parse_input_mode("segmented") == InputMode::kSegmentedTumor);
    message_of([] { parse_input_mode("both"); }, ErrorCode::kInvalidArgument);
  }
}

TEST_SUITE("synth") {
  TEST_CASE("counts, invariants and masks") {
    const auto ds = synth_generate(7, 20);
    CHECK(ds.size() == 60);
    std::map<int, int> per;
    for (const auto& s : ds.samples) ++per[s.label];
    CHECK(per == std::map<int, int>{{1, 20}, {2, 20}, {3, 20}});
    CHECK(ds.has_masks());
    CHECK_NOTHROW(ds.validate());
    for (const auto& s : ds.samples) {
      const auto on = std::count(s.mask->begin(), s.mask->end(), std::uint8_t{1});
      CHECK(on > 20);
      CHECK(on < 2000);
    }
  }

  TEST_CASE("fixed seed gives identical bytes, another seed differs") {
    CHECK(encode_dataset(synth_generate(7, 5)) == encode_dataset(synth_generate(7, 5)));
    CHECK(encode_dataset(synth_generate(7, 5)) != encode_dataset(synth_generate(8, 5)));
  }

  TEST_CASE("nearest centroid on raw pixels beats 70% train accuracy") {
    const auto ds = synth_generate(7, 20);
    std::vector<std::vector<double>> centroid(3, std::vector<double>(kImagePixels, 0.0));
    std::vector<int> count(3, 0);
    for (const auto& s : ds.samples) {
      ++count[s.class_index()];
      for (std::size_t i = 0; i < kImagePixels; ++i) centroid[s.class_index()][i] += s.image[i];
    }
    for (int k = 0; k < 3; ++k)
      for (auto& v : centroid[k]) v /= count[k];
    int correct = 0;
    for (const auto& s : ds.samples) {
      int best = 0;
      double best_d = INFINITY;
      for (int k = 0; k < 3; ++k) {
        double d = 0;
        for (std::size_t i = 0; i < kImagePixels; ++i) d += (s.image[i] - centroid[k][i]) * (s.image[i] - centroid[k][i]);
        if (d < best_d) best_d = d, best = k;
      }
      correct += best == s.class_index();
    }
    CHECK(correct / 60.0 > 0.70);
  }
}

TEST_SUITE("btds") {
  TEST_CASE("round trip through bytes and a file") {
    const auto ds = synth_generate(11, 3);
    const auto bytes = encode_dataset(ds);
    CHECK(bytes.size() == kHeader + 9 * (4 + 1 + 4 * 4096 + 4096) + 4);
    CHECK(decode_dataset(bytes) == ds);
    const auto path = std::filesystem::temp_directory_path() / "capsrout_test_roundtrip.btds";
    store_dataset(ds, path);
    CHECK(load_dataset(path) == ds);
    std::filesystem::remove(path);
  }

  TEST_CASE("header layout") {
    const auto bytes = encode_dataset(synth_generate(11, 1));
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "BTDS");
    CHECK(bytes[4] == 1);
    CHECK(bytes[5] == 0);
    CHECK(bytes[6] == 3);
    CHECK(bytes[10] == 1);
  }

  TEST_CASE("maskless datasets are accepted") {
    auto ds = synth_generate(11, 2);
    for (auto& s : ds.samples) s.mask.reset();
    const auto bytes = encode_dataset(ds);
    CHECK(bytes.size() == kHeader + 6 * (4 + 1 + 4 * 4096) + 4);
    CHECK(decode_dataset(bytes) == ds);
  }

  TEST_CASE("bad magic, wrong version, flipped byte") {
    const auto good = encode_dataset(synth_generate(11, 1));
    auto b = good;
    b[0] = 'X';
    message_of([&] { decode_dataset(b); }, ErrorCode::kBadMagic);
    b = good;
    b[4] = 2;
    message_of([&] { decode_dataset(b); }, ErrorCode::kVersionMismatch);
    b = good;
    b[kHeader + 100] ^= 0x01;
    message_of([&] { decode_dataset(b); }, ErrorCode::kChecksum);
  }

  TEST_CASE("truncation names the byte offset") {
    auto b = encode_dataset(synth_generate(11, 1));
    b.resize(5000);
    const auto msg = message_of([&] { decode_dataset(b); }, ErrorCode::kTruncated);
    CHECK(msg.find("byte offset 5000") != std::string::npos);
    b.resize(3);
    message_of([&] { decode_dataset(b); }, ErrorCode::kTruncated);
  }

  TEST_CASE("label 7 is rejected naming the record") {
    auto b = encode_dataset(synth_generate(11, 1));
    const std::size_t record = 4 + 1 + 4 * 4096 + 4096;
    b[kHeader + 2 * record + 4] = 7;
    rewrite_crc(b);
    const auto msg = message_of([&] { decode_dataset(b); }, ErrorCode::kInvalidRecord);
    CHECK(msg.find("record 2") != std::string::npos);
    CHECK(msg.find("label 7") != std::string::npos);
  }
}

TEST_SUITE("patient split") {
  TEST_CASE("disjoint, exhaustive, sorted") {
    const auto ds = synth_generate(7, 20);
    const auto split = split_by_patient(ds, SplitFractions{}, 1);
    std::vector<std::size_t> all;
    for (auto p : {SplitPart::kTrain, SplitPart::kVal, SplitPart::kTest}) {
      CHECK(std::is_sorted(split.part(p).begin(), split.part(p).end()));
      all.insert(all.end(), split.part(p).begin(), split.part(p).end());
    }
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> expect(60);
    for (std::size_t i = 0; i < 60; ++i) expect[i] = i;
    CHECK(all == expect);
  }

  TEST_CASE("patients never straddle parts, fractions within one patient, for many seeds") {
    // Three samples per patient so grouping matters.
    auto ds = synth_generate(5, 10);
    for (std::size_t i = 0; i < ds.size(); ++i) ds.samples[i].patient_id = static_cast<std::uint32_t>(i / 3);
    const std::size_t patients = 10;
    const SplitFractions f{0.6, 0.2, 0.2};
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
      const auto split = split_by_patient(ds, f, seed);
      std::map<std::uint32_t, std::set<int>> where;
      int part = 0;
      for (auto p : {SplitPart::kTrain, SplitPart::kVal, SplitPart::kTest}) {
        for (auto i : split.part(p)) where[ds.samples[i].patient_id].insert(part);
        ++part;
      }
      for (const auto& [pid, parts] : where) CHECK(parts.size() == 1);
      auto n_patients = [&](SplitPart p) { return split.part(p).size() / 3.0; };
      CHECK(std::abs(n_patients(SplitPart::kTrain) - patients * f.train) <= 1.0);
      CHECK(std::abs(n_patients(SplitPart::kVal) - patients * f.val) <= 1.0);
      CHECK(std::abs(n_patients(SplitPart::kTest) - patients * f.test) <= 1.0);
    }
  }

  TEST_CASE("seeded and stable") {
    const auto ds = synth_generate(7, 20);
    const auto a = split_by_patient(ds, SplitFractions{}, 3);
    const auto b = split_by_patient(ds, SplitFractions{}, 3);
    CHECK(a.train == b.train);
    CHECK(a.val == b.val);
    CHECK(a.test == b.test);
  }

  TEST_CASE("fractions must sum to one") {
    message_of([] { SplitFractions{0.5, 0.2, 0.2}.validate(); }, ErrorCode::kConfig);
  }
}
