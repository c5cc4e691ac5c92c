#include "capsrout/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "capsrout/capsnet.hpp"
#include "capsrout/cnn.hpp"
#include "capsrout/rng.hpp"

namespace capsrout {

bool GradCheckReport::passed() const {
  return !groups.empty() &&
         std::all_of(groups.begin(), groups.end(), [](const GroupResult& g) { return g.passed; });
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

namespace {

void corrupt(Tensor<double>& grad) {
  for (auto& v : grad.data()) v = v * 1.1 + 1e-3;
}

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Freshly initialized biases are zero, which parks many ReLU inputs within a
// finite-difference step of the kink. Random biases move the test point away.
void randomize_biases(ParamSet<double>& params, Rng& rng) {
  for (std::size_t g = 0; g < params.size(); ++g) {
    if (!params.name(g).ends_with(".bias")) continue;
    for (auto& v : params[g].data()) v = rng.uniform(-0.5, 0.5);
  }
}

}  // namespace

GradCheckReport check_model_gradients(const Model<double>& model, const Tensor<double>& image, int label,
                                      const GradCheckOptions& options) {
  auto analytic = model.params().zeros_like();
  model.accumulate_gradient(image, label, analytic);
  auto probe = model.clone();
  auto& params = probe->params();

  GradCheckReport report;
  for (std::size_t g = 0; g < params.size(); ++g) {
    if (params.name(g) == options.corrupt_group) corrupt(analytic[g]);
    GroupResult r{params.name(g), 0, 0.0, options.tolerance, false};
    auto& tensor = params[g];
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + options.step;
      const double up = probe->loss(image, label).total;
      tensor[i] = saved - options.step;
      const double down = probe->loss(image, label).total;
      tensor[i] = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[g][i], numeric));
      ++r.checked;
    }
    r.passed = r.max_rel_error < options.tolerance;
    report.groups.push_back(r);
  }
  return report;
}

GradCheckReport gradcheck_capsnet_tiny(const GradCheckOptions& options) {
  const auto config = capsnet_tiny_config();
  CapsNet<double> model(config, options.seed);
  Rng rng(options.seed + 1);
  randomize_biases(model.params(), rng);
  auto image = random_tensor({config.input_side * config.input_side}, rng, 0.0, 1.0);
  return check_model_gradients(model, image, 1, options);
}

GradCheckReport gradcheck_cnn_shrunken(const GradCheckOptions& options) {
  const auto config = cnn_shrunken_config();
  Cnn<double> model(config, options.seed);
  Rng rng(options.seed + 1);
  randomize_biases(model.params(), rng);
  auto image = random_tensor({config.input_side * config.input_side}, rng, 0.0, 1.0);
  return check_model_gradients(model, image, 2, options);
}

// ---- per-op checks -------------------------------------------------------------

namespace {

using Inputs = std::vector<Tensor<double>>;
using Forward = std::function<Tensor<double>(const Inputs&)>;
using Backward = std::function<Inputs(const Inputs&, const Tensor<double>&)>;

struct OpCase {
  std::string name;
  std::vector<std::string> input_names;
  std::function<Inputs(Rng&)> make;
  Forward forward;
  Backward backward;
};

double weighted(const Tensor<double>& out, const Tensor<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * w[i];
  return s;
}

Tensor<double> scalar(double v) { return Tensor<double>({1}, {v}); }

std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  cases.push_back({"matmul", {"a", "b"},
                   [](Rng& r) { return Inputs{random_tensor({3, 4}, r), random_tensor({4, 2}, r)}; },
                   [](const Inputs& in) { return ops::matmul(in[0], in[1]); },
                   [](const Inputs& in, const Tensor<double>& g) {
                     auto mg = ops::matmul_backward(in[0], in[1], g);
                     return Inputs{mg.a, mg.b};
                   }});
  for (std::size_t stride : {1, 2}) {
    cases.push_back({"conv2d_stride" + std::to_string(stride), {"input", "kernels", "bias"},
                     [](Rng& r) {
                       return Inputs{random_tensor({2, 7, 7}, r), random_tensor({3, 2, 3, 3}, r),
                                     random_tensor({3}, r)};
                     },
                     [stride](const Inputs& in) { return ops::conv2d(in[0], in[1], in[2], stride); },
                     [stride](const Inputs& in, const Tensor<double>& g) {
                       auto cg = ops::conv2d_backward(in[0], in[1], stride, g);
                       return Inputs{cg.input, cg.kernels, cg.bias};
                     }});
  }
  cases.push_back({"maxpool2", {"input"}, [](Rng& r) { return Inputs{random_tensor({2, 4, 5}, r)}; },
                   [](const Inputs& in) { return ops::maxpool2(in[0]).out; },
                   [](const Inputs& in, const Tensor<double>& g) {
                     auto p = ops::maxpool2(in[0]);
                     return Inputs{ops::maxpool2_backward(in[0].shape(), std::span<const std::size_t>(p.argmax), g)};
                   }});
  cases.push_back({"softmax", {"logits"}, [](Rng& r) { return Inputs{random_tensor({3, 4}, r, -3, 3)}; },
                   [](const Inputs& in) { return ops::softmax(in[0], 1); },
                   [](const Inputs& in, const Tensor<double>& g) {
                     return Inputs{ops::softmax_backward(ops::softmax(in[0], 1), g, 1)};
                   }});
  cases.push_back({"relu", {"x"}, [](Rng& r) { return Inputs{random_tensor({20}, r)}; },
                   [](const Inputs& in) { return ops::relu(in[0]); },
                   [](const Inputs& in, const Tensor<double>& g) { return Inputs{ops::relu_backward(in[0], g)}; }});
  cases.push_back({"sigmoid", {"x"}, [](Rng& r) { return Inputs{random_tensor({20}, r, -4, 4)}; },
                   [](const Inputs& in) { return ops::sigmoid(in[0]); },
                   [](const Inputs& in, const Tensor<double>& g) {
                     return Inputs{ops::sigmoid_backward(ops::sigmoid(in[0]), g)};
                   }});
  cases.push_back({"fully_connected", {"x", "weight", "bias"},
                   [](Rng& r) {
                     return Inputs{random_tensor({5}, r), random_tensor({4, 5}, r), random_tensor({4}, r)};
                   },
                   [](const Inputs& in) { return ops::fully_connected(in[0], in[1], in[2]); },
                   [](const Inputs& in, const Tensor<double>& g) {
                     auto fg = ops::fully_connected_backward(in[0], in[1], g);
                     return Inputs{fg.x, fg.weight, fg.bias};
                   }});
  cases.push_back({"add", {"a", "b"}, [](Rng& r) { return Inputs{random_tensor({6}, r), random_tensor({6}, r)}; },
                   [](const Inputs& in) { return ops::add(in[0], in[1]); },
                   [](const Inputs&, const Tensor<double>& g) { return Inputs{g, g}; }});
  cases.push_back({"scale", {"a"}, [](Rng& r) { return Inputs{random_tensor({6}, r)}; },
                   [](const Inputs& in) { return ops::scale(in[0], 0.75); },
                   [](const Inputs&, const Tensor<double>& g) { return Inputs{ops::scale(g, 0.75)}; }});
  cases.push_back({"square", {"a"}, [](Rng& r) { return Inputs{random_tensor({6}, r)}; },
                   [](const Inputs& in) { return ops::square(in[0]); },
                   [](const Inputs& in, const Tensor<double>& g) { return Inputs{ops::square_backward(in[0], g)}; }});
  cases.push_back({"sum", {"a"}, [](Rng& r) { return Inputs{random_tensor({7}, r)}; },
                   [](const Inputs& in) { return scalar(ops::sum(in[0])); },
                   [](const Inputs& in, const Tensor<double>& g) {
                     return Inputs{ops::sum_backward(in[0].shape(), g[0])};
                   }});
  cases.push_back({"squash", {"s"}, [](Rng& r) { return Inputs{random_tensor({4, 3}, r, -2, 2)}; },
                   [](const Inputs& in) { return squash(in[0]); },
                   [](const Inputs& in, const Tensor<double>& g) { return Inputs{squash_backward(in[0], g)}; }});
  cases.push_back({"route", {"u", "weights"},
                   [](Rng& r) { return Inputs{random_tensor({4, 3}, r), random_tensor({4, 2, 2, 3}, r)}; },
                   [](const Inputs& in) { return route(in[0], in[1], 3).output(); },
                   [](const Inputs& in, const Tensor<double>& g) {
                     const auto state = route(in[0], in[1], 3);
                     auto rg = route_backward(in[0], in[1], state, g);
                     return Inputs{rg.u, rg.weights};
                   }});
  cases.push_back({"margin_loss", {"v"}, [](Rng& r) { return Inputs{random_tensor({3, 4}, r, -0.5, 0.5)}; },
                   [](const Inputs& in) { return scalar(margin_loss(in[0], 1, MarginParams{})); },
                   [](const Inputs& in, const Tensor<double>& g) {
                     return Inputs{ops::scale(margin_loss_backward(in[0], 1, MarginParams{}), g[0])};
                   }});
  cases.push_back({"reconstruction_loss", {"reconstruction"},
                   [](Rng& r) { return Inputs{random_tensor({10}, r, 0, 1), random_tensor({10}, r, 0, 1)}; },
                   [](const Inputs& in) { return scalar(reconstruction_loss(in[0], in[1])); },
                   [](const Inputs& in, const Tensor<double>& g) {
                     return Inputs{ops::scale(reconstruction_loss_backward(in[0], in[1]), g[0])};
                   }});
  cases.push_back({"cross_entropy", {"logits"}, [](Rng& r) { return Inputs{random_tensor({3}, r, -3, 3)}; },
                   [](const Inputs& in) { return scalar(cross_entropy(in[0], 2)); },
                   [](const Inputs& in, const Tensor<double>& g) {
                     return Inputs{ops::scale(cross_entropy_backward(in[0], 2), g[0])};
                   }});
  return cases;
}

}  // namespace

GradCheckReport gradcheck_ops(const GradCheckOptions& options) {
  Rng rng(options.seed);
  GradCheckReport report;
  for (const auto& op : op_cases()) {
    std::vector<GroupResult> results;
    for (const auto& in_name : op.input_names) {
      results.push_back({"op:" + op.name + "." + in_name, 0, 0.0, options.tolerance, false});
    }
    for (std::size_t trial = 0; trial < options.trials; ++trial) {
      Inputs inputs = op.make(rng);
      const auto out = op.forward(inputs);
      const auto weights = random_tensor(out.shape(), rng);
      auto analytic = op.backward(inputs, weights);
      for (std::size_t k = 0; k < results.size(); ++k) {
        if (results[k].group == options.corrupt_group) corrupt(analytic[k]);
        auto& x = inputs[k];
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double saved = x[i];
          x[i] = saved + options.step;
          const double up = weighted(op.forward(inputs), weights);
          x[i] = saved - options.step;
          const double down = weighted(op.forward(inputs), weights);
          x[i] = saved;
          const double numeric = (up - down) / (2.0 * options.step);
          results[k].max_rel_error = std::max(results[k].max_rel_error, relative_error(analytic[k][i], numeric));
          ++results[k].checked;
        }
      }
    }
    for (auto& r : results) {
      r.passed = r.max_rel_error < options.tolerance;
      report.groups.push_back(r);
    }
  }
  return report;
}

}  // namespace capsrout
