#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "capsrout/capsnet.hpp"
#include "capsrout/gradcheck.hpp"
#include "oracles.hpp"

using namespace capsrout;
using T = Tensor<double>;

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

double row_norm(const T& m, std::size_t row) {
  const std::size_t d = m.dim(1);
  double s = 0;
  for (std::size_t k = 0; k < d; ++k) s += m[row * d + k] * m[row * d + k];
  return std::sqrt(s);
}

// A 3-class configuration small enough for exhaustive checks.
CapsNetConfig small_config() {
  CapsNetConfig c;
  c.input_side = 16;
  c.conv_layers = {{4, 5, 1}};
  c.primary_kernel = 5;
  c.primary_stride = 2;
  c.component_capsules = 3;
  c.primary_dim = 4;
  c.primary_conv_filters = 12;
  c.class_count = 3;
  c.class_dim = 6;
  c.decoder_widths = {10, 20, 256};
  return c;
}

}  // namespace

TEST_SUITE("squash") {
  TEST_CASE("zero vector maps to zero") {
    const auto v = squash(T({1, 4}));
    for (double x : v.data()) CHECK(x == 0.0);
  }

  TEST_CASE("(3,4) scalar evaluation") {
    const auto v = squash(T({1, 2}, {3, 4}));
    CHECK(v[0] == doctest::Approx(25.0 / 26.0 * 0.6).epsilon(1e-14));
    CHECK(v[1] == doctest::Approx(25.0 / 26.0 * 0.8).epsilon(1e-14));
    CHECK(v[0] == doctest::Approx(0.576923).epsilon(1e-6));
    CHECK(v[1] == doctest::Approx(0.769231).epsilon(1e-6));
    CHECK(row_norm(v, 0) == doctest::Approx(25.0 / 26.0).epsilon(1e-14));
  }

  TEST_CASE("unit norm gives exactly one half") {
    const auto v = squash(T({1, 3}, {1, 0, 0}));
    CHECK(v[0] == 0.5);
    const auto w = squash(T({1, 2}, {0.6, 0.8}));
    CHECK(row_norm(w, 0) == doctest::Approx(0.5).epsilon(1e-15));
  }

  TEST_CASE("parallel to the input for positive scalings, matches the oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      auto s = oracle::random({1, 5}, rng, -3, 3);
      for (double alpha : {1e-3, 0.5, 2.0, 40.0}) {
        const auto scaled = ops::scale(s, alpha);
        const auto v = squash(scaled);
        const auto ref = oracle::squash({scaled.data().begin(), scaled.data().end()});
        CHECK(oracle::max_abs_diff(v.data(), ref) < 1e-14);
        // cosine with s equals one
        CHECK(oracle::dot(v, s) / (row_norm(v, 0) * row_norm(s, 0)) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(row_norm(v, 0) < 1.0);
      }
    }
  }

  TEST_CASE("backward against central differences, finite at zero") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      const auto s = oracle::random({3, 4}, rng, -2, 2);
      const auto gv = oracle::random({3, 4}, rng);
      const auto g = squash_backward(s, gv);
      const auto fd = oracle::numeric_gradient([&](const T& x) { return oracle::dot(squash(x), gv); }, s);
      CHECK(oracle::max_rel_error(g, fd) < 1e-6);
    }
    const auto g0 = squash_backward(T({1, 3}), T::filled({1, 3}, 1.0));
    for (double x : g0.data()) CHECK(std::isfinite(x));
  }
}

TEST_SUITE("capsnet config") {
  TEST_CASE("default sizes") {
    const CapsNetConfig c;
    CHECK(c.primary_map_side() == 24);
    CHECK(c.lower_capsules() == 18432);
    CHECK(c.primary_conv_filters == c.component_capsules * c.primary_dim);
    CHECK(c.decoder_widths.back() == 64 * 64);
    const auto shapes = capsnet_param_shapes(c);
    const auto it = std::find_if(shapes.begin(), shapes.end(), [](const auto& p) { return p.first == "routing.W"; });
    REQUIRE(it != shapes.end());
    CHECK(it->second == Shape{18432, 3, 16, 8});
  }

  TEST_CASE("broken invariants are config errors") {
    auto bad = [](auto mutate) {
      CapsNetConfig c;
      mutate(c);
      return code_of([&] { c.validate(); });
    };
    CHECK(bad([](CapsNetConfig& c) { c.primary_conv_filters = 200; }) == ErrorCode::kConfig);
    CHECK(bad([](CapsNetConfig& c) { c.decoder_widths = {512, 1024, 1000}; }) == ErrorCode::kConfig);
    CHECK(bad([](CapsNetConfig& c) { c.m_minus = 0.95; }) == ErrorCode::kConfig);
    CHECK(bad([](CapsNetConfig& c) { c.lambda = 0; }) == ErrorCode::kConfig);
    CHECK(bad([](CapsNetConfig& c) { c.routing_iters = 0; }) == ErrorCode::kConfig);
  }

  TEST_CASE("json round trip") {
    const auto c = capsnet_preset("two-conv-64");
    CHECK(CapsNetConfig::from_json(c.to_json()) == c);
  }

  TEST_CASE("six table presets, each valid") {
    const auto& names = capsnet_preset_names();
    CHECK(names.size() == 6);
    for (const auto& n : names) CHECK_NOTHROW(capsnet_preset(n));
    CHECK(capsnet_preset("16-primary-caps").component_capsules == 16);
    CHECK(capsnet_preset("16-primary-caps").primary_conv_filters == 128);
    CHECK(capsnet_preset("primary-dim-4").primary_dim == 4);
    CHECK(capsnet_preset("primary-dim-4").primary_conv_filters == 128);
    CHECK(capsnet_preset("decoder-1024-2048-4096").decoder_widths == std::vector<std::size_t>{1024, 2048, 4096});
    CHECK(capsnet_preset("original-256-maps").conv_layers.front().filters == 256);
    CHECK(capsnet_preset("two-conv-64").conv_layers.size() == 2);
    CHECK(capsnet_preset("one-conv-64") == CapsNetConfig{});
    CHECK(code_of([] { capsnet_preset("nope"); }) == ErrorCode::kConfig);
  }
}

TEST_SUITE("primary capsules") {
  TEST_CASE("default shape, norms below one, zero in gives zero out") {
    const CapsNet<float> model(CapsNetConfig{}, 3);
    Rng rng(1);
    Tensor<float> features({64, 56, 56});
    for (auto& v : features.data()) v = static_cast<float>(rng.uniform(0.0, 1.0));
    const auto u = model.primary_capsules(features);
    CHECK(u.shape() == Shape{18432, 8});
    for (std::size_t i = 0; i < u.dim(0); i += 97) {
      double s = 0;
      for (std::size_t d = 0; d < 8; ++d) s += double(u[i * 8 + d]) * u[i * 8 + d];
      CHECK(std::sqrt(s) < 1.0);
    }
    const auto z = model.primary_capsules(Tensor<float>({64, 56, 56}));
    for (float v : z.data()) CHECK(v == 0.0f);
  }
}

TEST_SUITE("routing") {
  TEST_CASE("single parent always has coupling one") {
    Rng rng(2);
    const auto state = route(oracle::random({1, 3}, rng), oracle::random({1, 1, 2, 3}, rng), 4);
    for (const auto& it : state.iterations) CHECK(it.couplings[0] == 1.0);
  }

  TEST_CASE("one iteration over two parents is uniform") {
    Rng rng(3);
    const auto state = route(oracle::random({1, 3}, rng), oracle::random({1, 2, 2, 3}, rng), 1);
    CHECK(state.iterations.size() == 1);
    CHECK(state.couplings()[0] == 0.5);
    CHECK(state.couplings()[1] == 0.5);
    for (double b : state.iterations[0].logits.data()) CHECK(b == 0.0);
  }

  TEST_CASE("zero iterations is a config error") {
    CHECK(code_of([] { route(T({1, 2}), T({1, 1, 1, 2}), 0); }) == ErrorCode::kConfig);
  }

  TEST_CASE("matches the straight-line oracle on 50 random instances") {
    Rng rng(2024);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t N = 1 + rng.below(6), J = 1 + rng.below(4), D = 1 + rng.below(4), P = 1 + rng.below(4);
      const std::size_t iters = 1 + rng.below(4);
      const auto u = oracle::random({N, P}, rng), W = oracle::random({N, J, D, P}, rng, -2, 2);
      const auto got = route(u, W, iters);
      const auto ref = oracle::route(u, W, iters);
      REQUIRE(got.iterations.size() == iters);
      for (std::size_t r = 0; r < iters; ++r) {
        const auto& c = got.iterations[r].couplings;
        for (std::size_t i = 0; i < N; ++i) {
          double sum = 0;
          for (std::size_t j = 0; j < J; ++j) {
            CHECK(std::abs(c[i * J + j] - ref.c[r][i][j]) < 1e-10);
            sum += c[i * J + j];
          }
          CHECK(std::abs(sum - 1.0) < 1e-6);
        }
      }
      for (std::size_t j = 0; j < J; ++j)
        for (std::size_t d = 0; d < D; ++d) CHECK(std::abs(got.output()[j * D + d] - ref.v[j][d]) < 1e-10);
      for (std::size_t j = 0; j < J; ++j) CHECK(row_norm(got.output(), j) < 1.0);
    }
  }

  TEST_CASE("the documented 4x2 instance, dims 3 to 2, three iterations") {
    Rng rng(77);
    const auto u = oracle::random({4, 3}, rng), W = oracle::random({4, 2, 2, 3}, rng);
    const auto got = route(u, W, 3);
    const auto ref = oracle::route(u, W, 3);
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t d = 0; d < 2; ++d) CHECK(std::abs(got.output()[j * 2 + d] - ref.v[j][d]) < 1e-10);
  }

  TEST_CASE("one iteration equals uniform-coupling aggregation") {
    Rng rng(5);
    const auto u = oracle::random({5, 3}, rng), W = oracle::random({5, 3, 4, 3}, rng);
    const auto got = route(u, W, 1);
    for (std::size_t j = 0; j < 3; ++j) {
      std::vector<double> s(4, 0.0);
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t d = 0; d < 4; ++d)
          for (std::size_t p = 0; p < 3; ++p) s[d] += W[((i * 3 + j) * 4 + d) * 3 + p] * u[i * 3 + p] / 3.0;
      const auto v = oracle::squash(s);
      for (std::size_t d = 0; d < 4; ++d) CHECK(std::abs(got.output()[j * 4 + d] - v[d]) < 1e-12);
    }
  }

  TEST_CASE("backward through the unrolled iterations against central differences") {
    Rng rng(15);
    for (int trial = 0; trial < 20; ++trial) {
      const auto u = oracle::random({4, 3}, rng), W = oracle::random({4, 2, 2, 3}, rng);
      const auto gv = oracle::random({2, 2}, rng);
      const auto state = route(u, W, 3);
      const auto g = route_backward(u, W, state, gv);
      auto loss_u = [&](const T& x) {
        const auto r = oracle::route(x, W, 3);
        return r.v[0][0] * gv[0] + r.v[0][1] * gv[1] + r.v[1][0] * gv[2] + r.v[1][1] * gv[3];
      };
      auto loss_w = [&](const T& x) {
        const auto r = oracle::route(u, x, 3);
        return r.v[0][0] * gv[0] + r.v[0][1] * gv[1] + r.v[1][0] * gv[2] + r.v[1][1] * gv[3];
      };
      CHECK(oracle::max_rel_error(g.u, oracle::numeric_gradient(loss_u, u)) < 1e-6);
      CHECK(oracle::max_rel_error(g.weights, oracle::numeric_gradient(loss_w, W)) < 1e-6);
    }
  }
}

TEST_SUITE("margin loss") {
  // Capsules of the requested lengths along the first axis.
  T caps(std::initializer_list<double> norms) {
    T v({norms.size(), 4});
    std::size_t k = 0;
    for (double n : norms) v[4 * k++] = n;
    return v;
  }

  TEST_CASE("on the margins the loss is exactly zero") {
    CHECK(margin_loss(caps({0.9, 0.1, 0.1}), 0, MarginParams{}) == 0.0);
  }

  TEST_CASE("one wrong class at 0.6") {
    CHECK(margin_loss(caps({0.9, 0.6, 0.1}), 0, MarginParams{}) == doctest::Approx(0.125).epsilon(1e-12));
  }

  TEST_CASE("all lengths zero") {
    CHECK(margin_loss(caps({0, 0, 0}), 2, MarginParams{}) == doctest::Approx(0.81).epsilon(1e-12));
  }

  TEST_CASE("nonnegative, matches the oracle, zero exactly when all sides are correct") {
    Rng rng(40);
    for (int trial = 0; trial < 200; ++trial) {
      const auto v = oracle::random({3, 5}, rng, -0.45, 0.45);
      const std::size_t label = rng.below(3);
      std::vector<double> norms;
      for (std::size_t k = 0; k < 3; ++k) norms.push_back(row_norm(v, k));
      const double l = margin_loss(v, label, MarginParams{});
      CHECK(l >= 0.0);
      CHECK(l == doctest::Approx(oracle::margin_from_norms(norms, label)).epsilon(1e-12));
      bool all_sides = norms[label] >= 0.9;
      for (std::size_t k = 0; k < 3; ++k)
        if (k != label) all_sides = all_sides && norms[k] <= 0.1;
      CHECK((l == 0.0) == all_sides);
    }
  }

  TEST_CASE("label out of range") {
    CHECK(code_of([&] { margin_loss(caps({0.1, 0.2, 0.3}), 3, MarginParams{}); }) == ErrorCode::kInvalidArgument);
  }
}

TEST_SUITE("reconstruction loss") {
  TEST_CASE("identity and unit offset") {
    Rng rng(1);
    const auto x = oracle::random({4096}, rng, 0, 1);
    CHECK(reconstruction_loss(x, x) == 0.0);
    T r = x;
    for (auto& v : r.data()) v += 1.0;
    CHECK(reconstruction_loss(r, x) == doctest::Approx(4096.0).epsilon(1e-12));
  }

  TEST_CASE("random pair against a loop") {
    Rng rng(2);
    const auto r = oracle::random({100}, rng), x = oracle::random({100}, rng);
    double s = 0;
    for (std::size_t i = 0; i < 100; ++i) s += (r[i] - x[i]) * (r[i] - x[i]);
    CHECK(reconstruction_loss(r, x) == doctest::Approx(s).epsilon(1e-14));
  }
}

TEST_SUITE("decoder") {
  TEST_CASE("masked-out capsules do not reach the output") {
    CapsNet<double> model(small_config(), 5);
    Rng rng(6);
    auto v = oracle::random({3, 6}, rng, -0.3, 0.3);
    const auto a = model.decode(v, 0);
    for (std::size_t d = 0; d < 6; ++d) std::swap(v[6 + d], v[12 + d]);
    CHECK(model.decode(v, 0) == a);
  }

  TEST_CASE("default output length is the pixel count") {
    const CapsNet<float> model(CapsNetConfig{}, 1);
    CHECK(model.decode(Tensor<float>({3, 16}), 1).size() == 4096);
  }

  TEST_CASE("zero capsules decode to the bias chain") {
    CapsNet<double> model(small_config(), 8);
    const auto layout = capsnet_param_layout(model.config());
    Rng rng(9);
    for (auto b : layout.decoder_bias) model.params()[b] = oracle::random(model.params()[b].shape(), rng);
    const auto& p = model.params();
    auto h = ops::relu(p[layout.decoder_bias[0]]);
    h = ops::relu(ops::fully_connected(h, p[layout.decoder_weight[1]], p[layout.decoder_bias[1]]));
    const auto expect = ops::sigmoid(ops::fully_connected(h, p[layout.decoder_weight[2]], p[layout.decoder_bias[2]]));
    const auto got = model.decode(T({3, 6}), 2);
    CHECK(oracle::max_abs_diff(got.data(), expect.data()) < 1e-15);
    CHECK(model.decode(T({3, 6}), 0) == got);
  }
}

TEST_SUITE("capsnet forward") {
  TEST_CASE("three scores in [0,1), argmax prediction, deterministic") {
    const CapsNet<float> model(CapsNetConfig{}, 11);
    Rng rng(3);
    Tensor<float> img({64, 64});
    for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
    const auto f = model.forward(img);
    REQUIRE(f.scores.size() == 3);
    for (float s : f.scores) {
      CHECK(s >= 0.0f);
      CHECK(s < 1.0f);
    }
    CHECK(f.predicted == std::max_element(f.scores.begin(), f.scores.end()) - f.scores.begin());
    CHECK(model.predict(img) == f.predicted);
    const auto g = model.forward(img);
    CHECK(g.scores == f.scores);
    CHECK(g.reconstruction == f.reconstruction);
    CHECK_FALSE(f.margin.has_value());
    const CapsNet<float> twin(CapsNetConfig{}, 11);
    CHECK(twin.forward(img).scores == f.scores);
  }

  TEST_CASE("argmax survives a shared monotone rescaling of the scores") {
    const CapsNet<double> model(small_config(), 2);
    Rng rng(4);
    const auto img = oracle::random({256}, rng, 0, 1);
    const auto f = model.forward(img);
    std::vector<double> mapped;
    for (double s : f.scores) mapped.push_back(std::sqrt(s) * 3 + 1);
    CHECK(std::max_element(mapped.begin(), mapped.end()) - mapped.begin() == f.predicted);
  }

  TEST_CASE("with a label the losses decompose") {
    const CapsNet<double> model(small_config(), 6);
    Rng rng(5);
    const auto img = oracle::random({256}, rng, 0, 1);
    const auto f = model.forward(img, 1);
    REQUIRE(f.margin.has_value());
    CHECK(*f.total == doctest::Approx(*f.margin + 0.0005 * *f.reconstruction_error).epsilon(1e-14));
    std::vector<double> norms(f.scores.begin(), f.scores.end());
    CHECK(*f.margin == doctest::Approx(oracle::margin_from_norms(norms, 1)).epsilon(1e-12));
    CHECK(*f.reconstruction_error == doctest::Approx(reconstruction_loss(f.reconstruction, img)).epsilon(1e-14));
    const auto l = model.loss(img, 1);
    CHECK(l.total == doctest::Approx(*f.total).epsilon(1e-14));
  }

  TEST_CASE("training mask follows the label, inference mask the prediction") {
    const CapsNet<double> model(small_config(), 6);
    Rng rng(5);
    const auto img = oracle::random({256}, rng, 0, 1);
    const auto f = model.forward(img);
    const auto other = (f.predicted + 1) % 3;
    CHECK(model.forward(img, other).reconstruction == model.decode(f.routing.output(), other));
    CHECK(f.reconstruction == model.decode(f.routing.output(), f.predicted));
  }

  TEST_CASE("wrong input size") {
    const CapsNet<double> model(small_config(), 1);
    CHECK(code_of([&] { model.forward(T({15, 15})); }) == ErrorCode::kDimension);
    CHECK(code_of([&] { model.forward(T({16, 16}), 3); }) == ErrorCode::kInvalidArgument);
  }
}

TEST_SUITE("tweak") {
  TEST_CASE("zero delta reproduces the reconstruction bit for bit") {
    const CapsNet<float> model(CapsNetConfig{}, 12);
    Rng rng(8);
    Tensor<float> img({64, 64});
    for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
    const double zero[] = {0.0};
    const auto out = model.tweak(img, 3, zero);
    REQUIRE(out.size() == 1);
    CHECK(out[0] == model.forward(img).reconstruction);
  }

  TEST_CASE("one image per delta; dimension out of range") {
    const CapsNet<double> model(small_config(), 12);
    Rng rng(8);
    const auto img = oracle::random({256}, rng, 0, 1);
    std::vector<double> deltas;
    for (int k = -5; k <= 5; ++k) deltas.push_back(0.05 * k);
    const auto out = model.tweak(img, 5, deltas);
    CHECK(out.size() == 11);
    for (const auto& im : out) CHECK(im.size() == 256);
    CHECK(out[5] == model.forward(img).reconstruction);
    CHECK(out[0] != out[10]);
    CHECK(code_of([&] { model.tweak(img, 6, deltas); }) == ErrorCode::kInvalidArgument);
  }
}

TEST_SUITE("capsnet gradients") {
  TEST_CASE("tiny configuration, every group within 1e-4") {
    const auto report = gradcheck_capsnet_tiny(GradCheckOptions{});
    CHECK(report.passed());
    const auto shapes = capsnet_param_shapes(capsnet_tiny_config());
    REQUIRE(report.groups.size() == shapes.size());
    for (std::size_t g = 0; g < shapes.size(); ++g) {
      INFO(report.groups[g].group);
      CHECK(report.groups[g].group == shapes[g].first);
      CHECK(report.groups[g].checked == shape_numel(shapes[g].second));
      CHECK(report.groups[g].max_rel_error < 1e-4);
    }
  }

  TEST_CASE("a corrupted backward is caught and named") {
    GradCheckOptions o;
    o.corrupt_group = "routing.W";
    const auto report = gradcheck_capsnet_tiny(o);
    CHECK_FALSE(report.passed());
    for (const auto& g : report.groups) CHECK(g.passed == (g.group != "routing.W"));
  }

  TEST_CASE("3-class configuration against central differences") {
    CapsNet<double> model(small_config(), 21);
    Rng rng(22);
    for (std::size_t g = 0; g < model.params().size(); ++g) {
      if (model.params().name(g).ends_with(".bias")) {
        for (auto& v : model.params()[g].data()) v = rng.uniform(-0.5, 0.5);
      }
    }
    const auto img = oracle::random({256}, rng, 0, 1);
    auto grads = model.params().zeros_like();
    model.accumulate_gradient(img, 2, grads);
    for (std::size_t g = 0; g < model.params().size(); ++g) {
      auto probe = model;
      const auto fd = oracle::numeric_gradient(
          [&](const T& x) {
            probe.params()[g] = x;
            return probe.loss(img, 2).total;
          },
          model.params()[g]);
      INFO(model.params().name(g));
      CHECK(oracle::max_rel_error(grads[g], fd) < 1e-4);
    }
  }
}
