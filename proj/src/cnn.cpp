#include "capsrout/cnn.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

namespace capsrout {

using json = nlohmann::json;

std::vector<std::size_t> CnnConfig::spatial_trace() const {
  std::vector<std::size_t> sides;
  std::size_t side = ops::conv_out_extent(input_side, conv1.kernel, conv1.stride);
  sides.push_back(side);
  side /= 2;
  sides.push_back(side);
  side = ops::conv_out_extent(side, conv2.kernel, conv2.stride);
  sides.push_back(side);
  side /= 2;
  sides.push_back(side);
  return sides;
}

std::size_t CnnConfig::flat_features() const {
  const std::size_t side = spatial_trace().back();
  return conv2.filters * side * side;
}

void CnnConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::kConfig, "cnn config: " + what); };
  for (const auto* c : {&conv1, &conv2}) {
    if (c->filters == 0 || c->kernel == 0 || c->stride == 0) bad("conv extents must be positive");
  }
  if (class_count < 2) bad("class_count must be at least 2");
  for (auto w : hidden_widths) {
    if (w == 0) bad("hidden widths must be positive");
  }
  if (input_side < conv1.kernel) bad("input smaller than first kernel");
  const std::size_t c1 = (input_side - conv1.kernel) / conv1.stride + 1;
  if (c1 < 2) bad("first pooling needs at least a 2x2 map");
  if (c1 / 2 < conv2.kernel) bad("second kernel exceeds pooled map");
  const std::size_t c2 = (c1 / 2 - conv2.kernel) / conv2.stride + 1;
  if (c2 < 2) bad("second pooling needs at least a 2x2 map");
}

std::string CnnConfig::to_json() const {
  auto conv = [](const ConvSpec& c) {
    return json{{"filters", c.filters}, {"kernel", c.kernel}, {"stride", c.stride}};
  };
  json j = {{"input_side", input_side},
            {"conv1", conv(conv1)},
            {"conv2", conv(conv2)},
            {"hidden_widths", hidden_widths},
            {"class_count", class_count}};
  return j.dump();
}

CnnConfig CnnConfig::from_json(const std::string& text) {
  CnnConfig c;
  try {
    const auto j = json::parse(text);
    auto conv = [](const json& x) {
      return ConvSpec{x.at("filters"), x.at("kernel"), x.at("stride")};
    };
    c.input_side = j.at("input_side");
    c.conv1 = conv(j.at("conv1"));
    c.conv2 = conv(j.at("conv2"));
    c.hidden_widths = j.at("hidden_widths").get<std::vector<std::size_t>>();
    c.class_count = j.at("class_count");
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, std::string("cnn config json: ") + e.what());
  }
  c.validate();
  return c;
}

CnnConfig cnn_shrunken_config() {
  CnnConfig c;
  c.input_side = 16;
  c.conv1 = {3, 5, 1};  // 12 -> pool 6
  c.conv2 = {3, 3, 1};  // 4 -> pool 2
  c.hidden_widths = {10, 10};
  c.class_count = 3;
  return c;
}

template <typename T>
T cross_entropy(const Tensor<T>& logits, std::size_t label) {
  if (label >= logits.size()) {
    fail(ErrorCode::kInvalidArgument, "cross entropy label " + std::to_string(label) + " out of range");
  }
  T m = logits[0];
  for (std::size_t k = 1; k < logits.size(); ++k) m = std::max(m, logits[k]);
  T z = 0;
  for (std::size_t k = 0; k < logits.size(); ++k) z += std::exp(logits[k] - m);
  return m + std::log(z) - logits[label];
}

template <typename T>
Tensor<T> cross_entropy_backward(const Tensor<T>& logits, std::size_t label) {
  if (label >= logits.size()) fail(ErrorCode::kInvalidArgument, "cross entropy label out of range");
  auto g = ops::softmax(logits.reshaped({logits.size()}), 0);
  g[label] -= T(1);
  return g.reshaped(logits.shape());
}

std::vector<std::pair<std::string, Shape>> cnn_param_shapes(const CnnConfig& config) {
  config.validate();
  std::vector<std::pair<std::string, Shape>> shapes = {
      {"conv1.weight", {config.conv1.filters, 1, config.conv1.kernel, config.conv1.kernel}},
      {"conv1.bias", {config.conv1.filters}},
      {"conv2.weight", {config.conv2.filters, config.conv1.filters, config.conv2.kernel, config.conv2.kernel}},
      {"conv2.bias", {config.conv2.filters}},
  };
  std::size_t width = config.flat_features();
  std::vector<std::size_t> widths = config.hidden_widths;
  widths.push_back(config.class_count);
  for (std::size_t k = 0; k < widths.size(); ++k) {
    const std::string base = "fc" + std::to_string(k + 1);
    shapes.push_back({base + ".weight", {widths[k], width}});
    shapes.push_back({base + ".bias", {widths[k]}});
    width = widths[k];
  }
  return shapes;
}

template <typename T>
Cnn<T>::Cnn(CnnConfig config, std::uint64_t seed) : config_(std::move(config)) {
  Rng rng(seed);
  for (auto& [name, shape] : cnn_param_shapes(config_)) {
    Tensor<T> t(shape);
    if (shape.size() > 1) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(shape_numel(shape) / shape[0]));
      for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    params_.add(name, std::move(t));
  }
}

template <typename T>
Cnn<T>::Cnn(CnnConfig config, ParamSet<T> params) : config_(std::move(config)), params_(std::move(params)) {
  const auto expected = cnn_param_shapes(config_);
  if (expected.size() != params_.size()) fail(ErrorCode::kConfig, "cnn parameter group count mismatch");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected[i].first != params_.name(i) || expected[i].second != params_[i].shape()) {
      fail(ErrorCode::kConfig, "cnn parameter '" + params_.name(i) + "' " + shape_str(params_[i].shape()) +
                                   " does not match expected '" + expected[i].first + "' " +
                                   shape_str(expected[i].second));
    }
  }
}

template <typename T>
struct Cnn<T>::Trace {
  Tensor<T> input;
  Tensor<T> conv1_pre, pool1_in, pool1;
  std::vector<std::size_t> pool1_argmax;
  Tensor<T> conv2_pre, pool2_in, pool2;
  std::vector<std::size_t> pool2_argmax;
  std::vector<Tensor<T>> fc_in, fc_pre;
  Tensor<T> logits;
};

template <typename T>
typename Cnn<T>::Trace Cnn<T>::run(const Tensor<T>& image) const {
  const std::size_t side = config_.input_side;
  if (image.size() != side * side) {
    fail(ErrorCode::kDimension, "cnn expects a " + std::to_string(side) + "x" + std::to_string(side) +
                                    " image, got " + shape_str(image.shape()));
  }
  Trace t;
  t.input = image.reshaped({1, side, side});
  t.conv1_pre = ops::conv2d(t.input, params_[0], params_[1], config_.conv1.stride);
  t.pool1_in = ops::relu(t.conv1_pre);
  auto p1 = ops::maxpool2(t.pool1_in);
  t.pool1 = std::move(p1.out);
  t.pool1_argmax = std::move(p1.argmax);
  t.conv2_pre = ops::conv2d(t.pool1, params_[2], params_[3], config_.conv2.stride);
  t.pool2_in = ops::relu(t.conv2_pre);
  auto p2 = ops::maxpool2(t.pool2_in);
  t.pool2 = std::move(p2.out);
  t.pool2_argmax = std::move(p2.argmax);

  Tensor<T> h = t.pool2.reshaped({t.pool2.size()});
  const std::size_t layers = config_.hidden_widths.size() + 1;
  for (std::size_t k = 0; k < layers; ++k) {
    t.fc_in.push_back(h);
    t.fc_pre.push_back(ops::fully_connected(h, params_[4 + 2 * k], params_[5 + 2 * k]));
    h = k + 1 < layers ? ops::relu(t.fc_pre.back()) : t.fc_pre.back();
  }
  t.logits = std::move(h);
  return t;
}

template <typename T>
Tensor<T> Cnn<T>::logits(const Tensor<T>& image) const {
  return run(image).logits;
}

namespace {

template <typename T>
int argmax(const Tensor<T>& x) {
  return static_cast<int>(std::distance(x.data().begin(), std::max_element(x.data().begin(), x.data().end())));
}

}  // namespace

template <typename T>
int Cnn<T>::predict(const Tensor<T>& image) const {
  return argmax(run(image).logits);
}

template <typename T>
SampleLoss Cnn<T>::loss(const Tensor<T>& image, int label) const {
  const auto t = run(image);
  const double ce = static_cast<double>(cross_entropy(t.logits, static_cast<std::size_t>(label)));
  return {ce, 0.0, ce, argmax(t.logits)};
}

template <typename T>
SampleLoss Cnn<T>::accumulate_gradient(const Tensor<T>& image, int label, ParamSet<T>& grads) const {
  const auto t = run(image);
  const auto lbl = static_cast<std::size_t>(label);
  const double ce = static_cast<double>(cross_entropy(t.logits, lbl));

  Tensor<T> g = cross_entropy_backward(t.logits, lbl);
  const std::size_t layers = config_.hidden_widths.size() + 1;
  for (std::size_t k = layers; k-- > 0;) {
    const Tensor<T> g_pre = k + 1 < layers ? ops::relu_backward(t.fc_pre[k], g) : g;
    auto fc = ops::fully_connected_backward(t.fc_in[k], params_[4 + 2 * k], g_pre);
    ops::accumulate(grads[4 + 2 * k], fc.weight);
    ops::accumulate(grads[5 + 2 * k], fc.bias);
    g = std::move(fc.x);
  }
  g = ops::maxpool2_backward(t.pool2_in.shape(), std::span<const std::size_t>(t.pool2_argmax),
                             g.reshaped(t.pool2.shape()));
  auto c2 = ops::conv2d_backward(t.pool1, params_[2], config_.conv2.stride, ops::relu_backward(t.conv2_pre, g));
  ops::accumulate(grads[2], c2.kernels);
  ops::accumulate(grads[3], c2.bias);
  g = ops::maxpool2_backward(t.pool1_in.shape(), std::span<const std::size_t>(t.pool1_argmax), c2.input);
  auto c1 = ops::conv2d_backward(t.input, params_[0], config_.conv1.stride, ops::relu_backward(t.conv1_pre, g),
                                 false);
  ops::accumulate(grads[0], c1.kernels);
  ops::accumulate(grads[1], c1.bias);
  return {ce, 0.0, ce, argmax(t.logits)};
}

template float cross_entropy(const Tensor<float>&, std::size_t);
template double cross_entropy(const Tensor<double>&, std::size_t);
template Tensor<float> cross_entropy_backward(const Tensor<float>&, std::size_t);
template Tensor<double> cross_entropy_backward(const Tensor<double>&, std::size_t);
template class Cnn<float>;
template class Cnn<double>;

}  // namespace capsrout
