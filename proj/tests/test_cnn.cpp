#include <doctest.h>

#include <cmath>

#include "capsrout/cnn.hpp"
#include "capsrout/gradcheck.hpp"
#include "oracles.hpp"

using namespace capsrout;
using T = Tensor<double>;

TEST_SUITE("cnn") {
  TEST_CASE("spatial trace and flattened width") {
    const CnnConfig c;
    CHECK(c.spatial_trace() == std::vector<std::size_t>{60, 30, 26, 13});
    CHECK(c.flat_features() == 10816);
  }

  TEST_CASE("parameter count") {
    const CnnConfig c;
    const auto shapes = cnn_param_shapes(c);
    std::size_t n = 0;
    for (const auto& [name, shape] : shapes) n += shape_numel(shape);
    const std::size_t expect = (64 * 25 + 64) + (64 * 64 * 25 + 64) + (10816 * 800 + 800) + (800 * 800 + 800) +
                               (800 * 3 + 3);
    CHECK(n == expect);
  }

  TEST_CASE("three logits, deterministic, prediction is the argmax") {
    const Cnn<float> model(CnnConfig{}, 4);
    Rng rng(1);
    Tensor<float> img({64, 64});
    for (auto& v : img.data()) v = static_cast<float>(rng.uniform());
    const auto a = model.logits(img);
    CHECK(a.size() == 3);
    CHECK(model.logits(img) == a);
    CHECK(Cnn<float>(CnnConfig{}, 4).logits(img) == a);
    CHECK(model.predict(img) == std::max_element(a.data().begin(), a.data().end()) - a.data().begin());
  }

  TEST_CASE("cross-entropy values") {
    CHECK(cross_entropy(T({3}, {0, 0, 0}), 0) == doctest::Approx(std::log(3.0)).epsilon(1e-14));
    CHECK(cross_entropy(T({3}, {10, -10, -10}), 0) == doctest::Approx(2 * std::exp(-20.0)).epsilon(1e-6));
    CHECK(std::isfinite(cross_entropy(T({3}, {1000, 0, 0}), 1)));
    CHECK(cross_entropy(T({3}, {1000, 0, 0}), 1) == doctest::Approx(1000.0).epsilon(1e-12));
  }

  TEST_CASE("cross-entropy gradient against central differences") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      const auto z = oracle::random({3}, rng, -4, 4);
      const std::size_t label = rng.below(3);
      const auto g = cross_entropy_backward(z, label);
      const auto fd = oracle::numeric_gradient([&](const T& x) { return cross_entropy(x, label); }, z);
      CHECK(oracle::max_rel_error(g, fd) < 1e-7);
    }
  }

  TEST_CASE("loss reports cross-entropy as the total") {
    const Cnn<double> model(cnn_shrunken_config(), 5);
    Rng rng(2);
    const auto img = oracle::random({16, 16}, rng, 0, 1);
    const auto l = model.loss(img, 1);
    CHECK(l.primary == doctest::Approx(cross_entropy(model.logits(img), 1)).epsilon(1e-14));
    CHECK(l.reconstruction == 0.0);
    CHECK(l.total == l.primary);
  }

  TEST_CASE("shrunken configuration gradients within 1e-4") {
    const auto report = gradcheck_cnn_shrunken(GradCheckOptions{});
    CHECK(report.passed());
    CHECK(report.groups.size() == cnn_param_shapes(cnn_shrunken_config()).size());
    for (const auto& g : report.groups) {
      INFO(g.group);
      CHECK(g.max_rel_error < 1e-4);
    }
  }

  TEST_CASE("wrong input side") {
    const Cnn<double> model(cnn_shrunken_config(), 5);
    CHECK_THROWS_AS(model.logits(T({64, 64})), Error);
  }
}
