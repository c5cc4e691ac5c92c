#include "capsrout/capsnet.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

namespace capsrout {

using json = nlohmann::json;

// ---- config ---------------------------------------------------------------

std::size_t CapsNetConfig::primary_map_side() const {
  std::size_t side = input_side;
  for (const auto& layer : conv_layers) side = ops::conv_out_extent(side, layer.kernel, layer.stride);
  return ops::conv_out_extent(side, primary_kernel, primary_stride);
}

void CapsNetConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::kConfig, "capsnet config: " + what); };
  if (input_side == 0) bad("input_side must be positive");
  if (conv_layers.empty()) bad("at least one conv layer is required");
  std::size_t side = input_side;
  for (const auto& layer : conv_layers) {
    if (layer.filters == 0 || layer.kernel == 0 || layer.stride == 0) bad("conv layer extents must be positive");
    if (layer.kernel > side) bad("conv kernel " + std::to_string(layer.kernel) + " exceeds map side " + std::to_string(side));
    side = (side - layer.kernel) / layer.stride + 1;
  }
  if (primary_kernel == 0 || primary_stride == 0) bad("primary kernel/stride must be positive");
  if (primary_kernel > side) bad("primary kernel exceeds feature map side");
  if (component_capsules == 0 || primary_dim == 0) bad("primary capsule count/dim must be positive");
  if (primary_conv_filters != component_capsules * primary_dim) {
    bad("primary_conv_filters (" + std::to_string(primary_conv_filters) +
        ") must equal component_capsules x primary_dim (" +
        std::to_string(component_capsules * primary_dim) + ")");
  }
  if (class_count == 0 || class_dim == 0) bad("class capsule count/dim must be positive");
  if (routing_iters < 1) bad("routing_iters must be >= 1");
  if (!(m_minus < m_plus)) bad("m_minus must be below m_plus");
  if (!(lambda > 0)) bad("lambda must be positive");
  if (decoder_loss_weight < 0) bad("decoder_loss_weight must be non-negative");
  if (decoder_widths.empty()) bad("decoder needs at least one layer");
  for (auto w : decoder_widths) {
    if (w == 0) bad("decoder widths must be positive");
  }
  if (decoder_widths.back() != input_side * input_side) {
    bad("last decoder width " + std::to_string(decoder_widths.back()) +
        " must equal input pixel count " + std::to_string(input_side * input_side));
  }
}

std::string CapsNetConfig::to_json() const {
  json layers = json::array();
  for (const auto& l : conv_layers) {
    layers.push_back({{"filters", l.filters}, {"kernel", l.kernel}, {"stride", l.stride}});
  }
  json j = {{"input_side", input_side},
            {"conv_layers", layers},
            {"primary_conv_filters", primary_conv_filters},
            {"primary_kernel", primary_kernel},
            {"primary_stride", primary_stride},
            {"component_capsules", component_capsules},
            {"primary_dim", primary_dim},
            {"class_count", class_count},
            {"class_dim", class_dim},
            {"routing_iters", routing_iters},
            {"m_plus", m_plus},
            {"m_minus", m_minus},
            {"lambda", lambda},
            {"decoder_widths", decoder_widths},
            {"decoder_loss_weight", decoder_loss_weight}};
  return j.dump();
}

CapsNetConfig CapsNetConfig::from_json(const std::string& text) {
  CapsNetConfig c;
  try {
    const auto j = json::parse(text);
    c.input_side = j.at("input_side");
    c.conv_layers.clear();
    for (const auto& l : j.at("conv_layers")) {
      c.conv_layers.push_back({l.at("filters"), l.at("kernel"), l.at("stride")});
    }
    c.primary_conv_filters = j.at("primary_conv_filters");
    c.primary_kernel = j.at("primary_kernel");
    c.primary_stride = j.at("primary_stride");
    c.component_capsules = j.at("component_capsules");
    c.primary_dim = j.at("primary_dim");
    c.class_count = j.at("class_count");
    c.class_dim = j.at("class_dim");
    c.routing_iters = j.at("routing_iters");
    c.m_plus = j.at("m_plus");
    c.m_minus = j.at("m_minus");
    c.lambda = j.at("lambda");
    c.decoder_widths = j.at("decoder_widths").get<std::vector<std::size_t>>();
    c.decoder_loss_weight = j.at("decoder_loss_weight");
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, std::string("capsnet config json: ") + e.what());
  }
  c.validate();
  return c;
}

const std::vector<std::string>& capsnet_preset_names() {
  static const std::vector<std::string> names = {
      "original-256-maps", "two-conv-64",  "one-conv-64",
      "16-primary-caps",   "primary-dim-4", "decoder-1024-2048-4096"};
  return names;
}

CapsNetConfig capsnet_preset(std::string_view name) {
  CapsNetConfig c;
  if (name == "one-conv-64" || name == "default") {
    // defaults
  } else if (name == "original-256-maps") {
    c.conv_layers = {{256, 9, 1}};
  } else if (name == "two-conv-64") {
    c.conv_layers = {{64, 9, 1}, {64, 9, 1}};
  } else if (name == "16-primary-caps") {
    // 16 capsule types of dim 8 -> 128 primary filters.
    c.component_capsules = 16;
    c.primary_conv_filters = 128;
  } else if (name == "primary-dim-4") {
    // 32 capsule types of dim 4 -> 128 primary filters.
    c.primary_dim = 4;
    c.primary_conv_filters = 128;
  } else if (name == "decoder-1024-2048-4096") {
    c.decoder_widths = {1024, 2048, 4096};
  } else if (name == "tiny") {
    c = capsnet_tiny_config();
  } else {
    fail(ErrorCode::kConfig, "unknown capsnet preset '" + std::string(name) + "'");
  }
  c.validate();
  return c;
}

CapsNetConfig capsnet_tiny_config() {
  CapsNetConfig c;
  c.input_side = 16;
  c.conv_layers = {{2, 5, 1}};
  c.primary_kernel = 5;
  c.primary_stride = 2;
  c.component_capsules = 2;
  c.primary_dim = 4;
  c.primary_conv_filters = 8;
  c.class_count = 2;
  c.class_dim = 4;
  c.routing_iters = 2;
  c.decoder_widths = {8, 16, 256};
  return c;
}

// ---- squash ---------------------------------------------------------------

namespace {

constexpr double kSquashEps = 1e-8;

void require_matrix(const Shape& s, const char* what) {
  if (s.size() != 2) fail(ErrorCode::kDimension, std::string(what) + " expects rank 2, got " + shape_str(s));
}

}  // namespace

template <typename T>
Tensor<T> squash(const Tensor<T>& s) {
  require_matrix(s.shape(), "squash");
  const std::size_t n = s.dim(0), d = s.dim(1);
  Tensor<T> v(s.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = s.raw() + i * d;
    T sq = 0;
    for (std::size_t k = 0; k < d; ++k) sq += row[k] * row[k];
    // |s|^2/(1+|s|^2) * s/|s| rewritten as s*|s|/(1+|s|^2): no division by |s|.
    const T factor = std::sqrt(sq) / (T(1) + sq);
    for (std::size_t k = 0; k < d; ++k) v[i * d + k] = row[k] * factor;
  }
  return v;
}

template <typename T>
Tensor<T> squash_backward(const Tensor<T>& s, const Tensor<T>& grad_v) {
  require_matrix(s.shape(), "squash backward");
  if (s.shape() != grad_v.shape()) {
    fail(ErrorCode::kDimension, "squash backward: " + shape_str(s.shape()) + " vs " + shape_str(grad_v.shape()));
  }
  const std::size_t n = s.dim(0), d = s.dim(1);
  Tensor<T> g(s.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = s.raw() + i * d;
    const T* gv = grad_v.raw() + i * d;
    T sq = 0, dot = 0;
    for (std::size_t k = 0; k < d; ++k) {
      sq += row[k] * row[k];
      dot += row[k] * gv[k];
    }
    const T norm = std::sqrt(sq);
    const T denom = T(1) + sq;
    // v = s*f(n), f(n) = n/(1+n^2); dv/ds = f I + f'(n)/n s s^T.
    const T f = norm / denom;
    const T radial = (T(1) - sq) / (denom * denom * std::max(norm, T(kSquashEps)));
    for (std::size_t k = 0; k < d; ++k) g[i * d + k] = f * gv[k] + radial * dot * row[k];
  }
  return g;
}

// ---- routing --------------------------------------------------------------

template <typename T>
RoutingState<T> route(const Tensor<T>& u, const Tensor<T>& weights, std::size_t iters) {
  if (iters == 0) fail(ErrorCode::kConfig, "routing needs at least one iteration");
  require_matrix(u.shape(), "route input");
  if (weights.rank() != 4 || weights.dim(0) != u.dim(0) || weights.dim(3) != u.dim(1)) {
    fail(ErrorCode::kDimension, "route: weights " + shape_str(weights.shape()) +
                                    " incompatible with capsules " + shape_str(u.shape()));
  }
  const std::size_t n = weights.dim(0), J = weights.dim(1), D = weights.dim(2), P = weights.dim(3);

  RoutingState<T> state;
  state.predictions = Tensor<T>({n, J, D});
  T* uhat = state.predictions.raw();
  const T* w = weights.raw();
  for (std::size_t i = 0; i < n; ++i) {
    const T* ui = u.raw() + i * P;
    for (std::size_t jd = 0; jd < J * D; ++jd) {
      const T* wrow = w + (i * J * D + jd) * P;
      T acc = 0;
      for (std::size_t p = 0; p < P; ++p) acc += wrow[p] * ui[p];
      uhat[i * J * D + jd] = acc;
    }
  }

  Tensor<T> logits({n, J});
  for (std::size_t r = 0; r < iters; ++r) {
    RoutingIteration<T> it;
    it.logits = logits;
    it.couplings = ops::softmax(logits, 1);
    it.preact = Tensor<T>({J, D});
    const T* c = it.couplings.raw();
    T* s = it.preact.raw();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < J; ++j) {
        const T cij = c[i * J + j];
        const T* pred = uhat + (i * J + j) * D;
        for (std::size_t d = 0; d < D; ++d) s[j * D + d] += cij * pred[d];
      }
    }
    it.output = squash(it.preact);
    if (r + 1 < iters) {
      const T* v = it.output.raw();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < J; ++j) {
          const T* pred = uhat + (i * J + j) * D;
          T agreement = 0;
          for (std::size_t d = 0; d < D; ++d) agreement += v[j * D + d] * pred[d];
          logits[i * J + j] += agreement;
        }
      }
    }
    state.iterations.push_back(std::move(it));
  }
  return state;
}

template <typename T>
RoutingGrads<T> route_backward(const Tensor<T>& u, const Tensor<T>& weights,
                               const RoutingState<T>& state, const Tensor<T>& grad_v) {
  const std::size_t n = weights.dim(0), J = weights.dim(1), D = weights.dim(2), P = weights.dim(3);
  if (grad_v.shape() != Shape{J, D}) {
    fail(ErrorCode::kDimension, "route backward: grad " + shape_str(grad_v.shape()) +
                                    " vs output " + shape_str({J, D}));
  }
  const T* uhat = state.predictions.raw();
  Tensor<T> g_uhat({n, J, D});
  Tensor<T> g_logits({n, J});
  T* gu_hat = g_uhat.raw();

  const std::size_t iters = state.iterations.size();
  for (std::size_t rr = iters; rr-- > 0;) {
    const auto& it = state.iterations[rr];
    Tensor<T> g_out({J, D});
    if (rr + 1 == iters) {
      g_out = grad_v;
    } else {
      // b_{r+1} = b_r + v_r . u_hat: g_logits holds d/d b_{r+1} and passes through.
      const T* v = it.output.raw();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < J; ++j) {
          const T gb = g_logits[i * J + j];
          const T* pred = uhat + (i * J + j) * D;
          T* gpred = gu_hat + (i * J + j) * D;
          for (std::size_t d = 0; d < D; ++d) {
            g_out[j * D + d] += gb * pred[d];
            gpred[d] += gb * v[j * D + d];
          }
        }
      }
    }
    const Tensor<T> g_pre = squash_backward(it.preact, g_out);
    Tensor<T> g_c({n, J});
    const T* c = it.couplings.raw();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < J; ++j) {
        const T* pred = uhat + (i * J + j) * D;
        T* gpred = gu_hat + (i * J + j) * D;
        const T cij = c[i * J + j];
        T acc = 0;
        for (std::size_t d = 0; d < D; ++d) {
          acc += g_pre[j * D + d] * pred[d];
          gpred[d] += cij * g_pre[j * D + d];
        }
        g_c[i * J + j] = acc;
      }
    }
    ops::accumulate(g_logits, ops::softmax_backward(it.couplings, g_c, 1));
  }

  RoutingGrads<T> g{Tensor<T>(u.shape()), Tensor<T>(weights.shape())};
  const T* w = weights.raw();
  T* gw = g.weights.raw();
  for (std::size_t i = 0; i < n; ++i) {
    const T* ui = u.raw() + i * P;
    T* gui = g.u.raw() + i * P;
    for (std::size_t jd = 0; jd < J * D; ++jd) {
      const T gp = gu_hat[i * J * D + jd];
      const std::size_t base = (i * J * D + jd) * P;
      for (std::size_t p = 0; p < P; ++p) {
        gw[base + p] = gp * ui[p];
        gui[p] += w[base + p] * gp;
      }
    }
  }
  return g;
}

// ---- losses ---------------------------------------------------------------

template <typename T>
std::vector<T> capsule_norms(const Tensor<T>& v) {
  require_matrix(v.shape(), "capsule_norms");
  const std::size_t J = v.dim(0), D = v.dim(1);
  std::vector<T> norms(J);
  for (std::size_t j = 0; j < J; ++j) {
    T sq = 0;
    for (std::size_t d = 0; d < D; ++d) sq += v[j * D + d] * v[j * D + d];
    norms[j] = std::sqrt(sq);
  }
  return norms;
}

template <typename T>
T margin_loss(const Tensor<T>& v, std::size_t label, const MarginParams& p) {
  const auto norms = capsule_norms(v);
  if (label >= norms.size()) {
    fail(ErrorCode::kInvalidArgument, "margin loss label " + std::to_string(label) +
                                          " out of range for " + std::to_string(norms.size()) + " classes");
  }
  T loss = 0;
  for (std::size_t k = 0; k < norms.size(); ++k) {
    if (k == label) {
      const T gap = std::max(T(0), T(p.m_plus) - norms[k]);
      loss += gap * gap;
    } else {
      const T gap = std::max(T(0), norms[k] - T(p.m_minus));
      loss += T(p.lambda) * gap * gap;
    }
  }
  return loss;
}

template <typename T>
Tensor<T> margin_loss_backward(const Tensor<T>& v, std::size_t label, const MarginParams& p) {
  const auto norms = capsule_norms(v);
  if (label >= norms.size()) {
    fail(ErrorCode::kInvalidArgument, "margin loss label out of range");
  }
  const std::size_t D = v.dim(1);
  Tensor<T> g(v.shape());
  for (std::size_t k = 0; k < norms.size(); ++k) {
    T d_norm;
    if (k == label) {
      d_norm = -T(2) * std::max(T(0), T(p.m_plus) - norms[k]);
    } else {
      d_norm = T(2) * T(p.lambda) * std::max(T(0), norms[k] - T(p.m_minus));
    }
    if (norms[k] <= T(0) || d_norm == T(0)) continue;
    for (std::size_t d = 0; d < D; ++d) g[k * D + d] = d_norm * v[k * D + d] / norms[k];
  }
  return g;
}

template <typename T>
T reconstruction_loss(const Tensor<T>& reconstruction, const Tensor<T>& image) {
  if (reconstruction.size() != image.size()) {
    fail(ErrorCode::kDimension, "reconstruction loss: " + shape_str(reconstruction.shape()) +
                                    " vs " + shape_str(image.shape()));
  }
  T loss = 0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const T diff = reconstruction[i] - image[i];
    loss += diff * diff;
  }
  return loss;
}

template <typename T>
Tensor<T> reconstruction_loss_backward(const Tensor<T>& reconstruction, const Tensor<T>& image) {
  if (reconstruction.size() != image.size()) {
    fail(ErrorCode::kDimension, "reconstruction loss backward: size mismatch");
  }
  Tensor<T> g(reconstruction.shape());
  for (std::size_t i = 0; i < image.size(); ++i) g[i] = T(2) * (reconstruction[i] - image[i]);
  return g;
}

// ---- parameters -----------------------------------------------------------

CapsNetParamLayout capsnet_param_layout(const CapsNetConfig& config) {
  CapsNetParamLayout l;
  std::size_t idx = 0;
  for (std::size_t k = 0; k < config.conv_layers.size(); ++k) {
    l.conv_weight.push_back(idx++);
    l.conv_bias.push_back(idx++);
  }
  l.primary_weight = idx++;
  l.primary_bias = idx++;
  l.routing = idx++;
  for (std::size_t k = 0; k < config.decoder_widths.size(); ++k) {
    l.decoder_weight.push_back(idx++);
    l.decoder_bias.push_back(idx++);
  }
  return l;
}

namespace {

template <typename T>
Tensor<T> uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace

std::vector<std::pair<std::string, Shape>> capsnet_param_shapes(const CapsNetConfig& config) {
  config.validate();
  std::vector<std::pair<std::string, Shape>> shapes;
  std::size_t channels = 1;
  for (std::size_t k = 0; k < config.conv_layers.size(); ++k) {
    const auto& l = config.conv_layers[k];
    const std::string base = "conv" + std::to_string(k + 1);
    shapes.push_back({base + ".weight", {l.filters, channels, l.kernel, l.kernel}});
    shapes.push_back({base + ".bias", {l.filters}});
    channels = l.filters;
  }
  shapes.push_back({"primary.weight",
                    {config.primary_conv_filters, channels, config.primary_kernel, config.primary_kernel}});
  shapes.push_back({"primary.bias", {config.primary_conv_filters}});
  shapes.push_back({"routing.W",
                    {config.lower_capsules(), config.class_count, config.class_dim, config.primary_dim}});
  std::size_t width = config.class_count * config.class_dim;
  for (std::size_t k = 0; k < config.decoder_widths.size(); ++k) {
    const std::string base = "decoder" + std::to_string(k + 1);
    shapes.push_back({base + ".weight", {config.decoder_widths[k], width}});
    shapes.push_back({base + ".bias", {config.decoder_widths[k]}});
    width = config.decoder_widths[k];
  }
  return shapes;
}

template <typename T>
ParamSet<T> capsnet_init_params(const CapsNetConfig& config, Rng& rng) {
  ParamSet<T> p;
  for (auto& [name, shape] : capsnet_param_shapes(config)) {
    if (shape.size() == 1) {
      p.add(name, Tensor<T>(shape));  // biases start at zero
    } else if (name == "routing.W") {
      Tensor<T> w(shape);
      for (auto& v : w.data()) v = static_cast<T>(rng.normal(0.0, 0.01));
      p.add(name, std::move(w));
    } else {
      const std::size_t fan_in = shape_numel(shape) / shape[0];
      p.add(name, uniform_fan_in<T>(shape, fan_in, rng));
    }
  }
  return p;
}

// ---- model ----------------------------------------------------------------

template <typename T>
CapsNet<T>::CapsNet(CapsNetConfig config, std::uint64_t seed) : config_(std::move(config)) {
  Rng rng(seed);
  params_ = capsnet_init_params<T>(config_, rng);
}

template <typename T>
CapsNet<T>::CapsNet(CapsNetConfig config, ParamSet<T> params)
    : config_(std::move(config)), params_(std::move(params)) {
  const auto expected = capsnet_param_shapes(config_);
  if (expected.size() != params_.size()) {
    fail(ErrorCode::kConfig, "capsnet parameter group count mismatch");
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected[i].first != params_.name(i) || expected[i].second != params_[i].shape()) {
      fail(ErrorCode::kConfig, "capsnet parameter '" + params_.name(i) + "' " +
                                   shape_str(params_[i].shape()) + " does not match expected '" +
                                   expected[i].first + "' " + shape_str(expected[i].second));
    }
  }
}

template <typename T>
struct CapsNet<T>::Trace {
  std::vector<Tensor<T>> conv_in;   // input to each conv layer
  std::vector<Tensor<T>> conv_pre;  // pre-ReLU output of each conv layer
  Tensor<T> features;               // post-ReLU input to the primary conv
  Tensor<T> primary_pre;            // regrouped, pre-squash [N, P]
  Tensor<T> u;                      // squashed primary capsules [N, P]
  RoutingState<T> routing;
  std::vector<T> norms;
  int predicted = -1;
  std::size_t mask_class = 0;
  std::vector<Tensor<T>> dec_in;   // input to each decoder layer
  std::vector<Tensor<T>> dec_pre;  // pre-activation of each decoder layer
  Tensor<T> reconstruction;
};

template <typename T>
void CapsNet<T>::check_image(const Tensor<T>& image) const {
  if (image.size() != config_.input_side * config_.input_side) {
    fail(ErrorCode::kDimension, "capsnet expects a " + std::to_string(config_.input_side) + "x" +
                                    std::to_string(config_.input_side) + " image, got " +
                                    shape_str(image.shape()));
  }
}

namespace {

// Channel (c*P + d) at map position (y,x) becomes component d of capsule
// c*side*side + y*side + x.
template <typename T>
Tensor<T> regroup_capsules(const Tensor<T>& maps, std::size_t types, std::size_t dim) {
  const std::size_t area = maps.dim(1) * maps.dim(2);
  Tensor<T> caps({types * area, dim});
  for (std::size_t c = 0; c < types; ++c) {
    for (std::size_t d = 0; d < dim; ++d) {
      const T* src = maps.raw() + (c * dim + d) * area;
      for (std::size_t a = 0; a < area; ++a) caps[(c * area + a) * dim + d] = src[a];
    }
  }
  return caps;
}

template <typename T>
Tensor<T> ungroup_capsules(const Tensor<T>& caps, const Shape& map_shape, std::size_t types,
                           std::size_t dim) {
  const std::size_t area = map_shape[1] * map_shape[2];
  Tensor<T> maps(map_shape);
  for (std::size_t c = 0; c < types; ++c) {
    for (std::size_t d = 0; d < dim; ++d) {
      T* dst = maps.raw() + (c * dim + d) * area;
      for (std::size_t a = 0; a < area; ++a) dst[a] = caps[(c * area + a) * dim + d];
    }
  }
  return maps;
}

template <typename T>
int argmax(const std::vector<T>& xs) {
  return static_cast<int>(std::distance(xs.begin(), std::max_element(xs.begin(), xs.end())));
}

}  // namespace

template <typename T>
Tensor<T> CapsNet<T>::primary_capsules(const Tensor<T>& features) const {
  const auto layout = capsnet_param_layout(config_);
  const auto maps = ops::conv2d(features, params_[layout.primary_weight], params_[layout.primary_bias],
                                config_.primary_stride);
  return squash(regroup_capsules(maps, config_.component_capsules, config_.primary_dim));
}

template <typename T>
typename CapsNet<T>::Trace CapsNet<T>::run(const Tensor<T>& image, std::optional<int> label) const {
  check_image(image);
  if (label && (*label < 0 || static_cast<std::size_t>(*label) >= config_.class_count)) {
    fail(ErrorCode::kInvalidArgument, "label " + std::to_string(*label) + " out of range");
  }
  const auto layout = capsnet_param_layout(config_);
  Trace t;
  Tensor<T> x = image.reshaped({1, config_.input_side, config_.input_side});
  for (std::size_t k = 0; k < config_.conv_layers.size(); ++k) {
    t.conv_in.push_back(x);
    t.conv_pre.push_back(ops::conv2d(x, params_[layout.conv_weight[k]], params_[layout.conv_bias[k]],
                                     config_.conv_layers[k].stride));
    x = ops::relu(t.conv_pre.back());
  }
  t.features = std::move(x);
  const auto maps = ops::conv2d(t.features, params_[layout.primary_weight],
                                params_[layout.primary_bias], config_.primary_stride);
  t.primary_pre = regroup_capsules(maps, config_.component_capsules, config_.primary_dim);
  t.u = squash(t.primary_pre);
  t.routing = route(t.u, params_[layout.routing], config_.routing_iters);
  t.norms = capsule_norms(t.routing.output());
  t.predicted = argmax(t.norms);
  t.mask_class = label ? static_cast<std::size_t>(*label) : static_cast<std::size_t>(t.predicted);

  t.reconstruction = decoder_pass(t.routing.output(), t.mask_class, &t.dec_in, &t.dec_pre);
  return t;
}

template <typename T>
CapsForward<T> CapsNet<T>::forward(const Tensor<T>& image, std::optional<int> label) const {
  auto t = run(image, label);
  CapsForward<T> f;
  f.scores = t.norms;
  f.predicted = t.predicted;
  if (label) {
    const MarginParams mp{config_.m_plus, config_.m_minus, config_.lambda};
    f.margin = margin_loss(t.routing.output(), static_cast<std::size_t>(*label), mp);
    f.reconstruction_error = reconstruction_loss(t.reconstruction, image);
    f.total = *f.margin + static_cast<T>(config_.decoder_loss_weight) * *f.reconstruction_error;
  }
  f.reconstruction = std::move(t.reconstruction);
  f.routing = std::move(t.routing);
  return f;
}

template <typename T>
Tensor<T> CapsNet<T>::decode(const Tensor<T>& v, std::size_t mask_class) const {
  if (v.shape() != Shape{config_.class_count, config_.class_dim}) {
    fail(ErrorCode::kDimension, "decode expects class capsules " +
                                    shape_str({config_.class_count, config_.class_dim}) + ", got " +
                                    shape_str(v.shape()));
  }
  if (mask_class >= config_.class_count) fail(ErrorCode::kInvalidArgument, "decode mask class out of range");
  return decoder_pass(v, mask_class, nullptr, nullptr);
}

template <typename T>
Tensor<T> CapsNet<T>::decoder_pass(const Tensor<T>& v, std::size_t mask_class,
                                   std::vector<Tensor<T>>* inputs,
                                   std::vector<Tensor<T>>* preacts) const {
  const auto layout = capsnet_param_layout(config_);
  const std::size_t D = config_.class_dim;
  Tensor<T> h({config_.class_count * D});
  std::copy(v.raw() + mask_class * D, v.raw() + (mask_class + 1) * D, h.raw() + mask_class * D);
  for (std::size_t k = 0; k < config_.decoder_widths.size(); ++k) {
    auto pre = ops::fully_connected(h, params_[layout.decoder_weight[k]], params_[layout.decoder_bias[k]]);
    const bool last = k + 1 == config_.decoder_widths.size();
    Tensor<T> next = last ? ops::sigmoid(pre) : ops::relu(pre);
    if (inputs) inputs->push_back(std::move(h));
    if (preacts) preacts->push_back(std::move(pre));
    h = std::move(next);
  }
  return h;
}

template <typename T>
SampleLoss CapsNet<T>::loss(const Tensor<T>& image, int label) const {
  const auto f = forward(image, label);
  const auto margin = static_cast<double>(*f.margin);
  const auto recon = static_cast<double>(*f.reconstruction_error);
  return {margin, recon, margin + config_.decoder_loss_weight * recon, f.predicted};
}

template <typename T>
int CapsNet<T>::predict(const Tensor<T>& image) const {
  return run(image, std::nullopt).predicted;
}

template <typename T>
SampleLoss CapsNet<T>::accumulate_gradient(const Tensor<T>& image, int label, ParamSet<T>& grads) const {
  auto t = run(image, label);
  const auto layout = capsnet_param_layout(config_);
  const MarginParams mp{config_.m_plus, config_.m_minus, config_.lambda};
  const auto lbl = static_cast<std::size_t>(label);
  const T weight = static_cast<T>(config_.decoder_loss_weight);

  SampleLoss out;
  out.primary = static_cast<double>(margin_loss(t.routing.output(), lbl, mp));
  out.reconstruction = static_cast<double>(reconstruction_loss(t.reconstruction, image));
  out.total = out.primary + config_.decoder_loss_weight * out.reconstruction;
  out.predicted = t.predicted;

  Tensor<T> g_v = margin_loss_backward(t.routing.output(), lbl, mp);

  // Decoder.
  Tensor<T> g_h = ops::scale(reconstruction_loss_backward(t.reconstruction, image), weight);
  for (std::size_t k = config_.decoder_widths.size(); k-- > 0;) {
    const bool last = k + 1 == config_.decoder_widths.size();
    const Tensor<T> g_pre = last ? ops::sigmoid_backward(t.reconstruction, g_h)
                                 : ops::relu_backward(t.dec_pre[k], g_h);
    auto fc = ops::fully_connected_backward(t.dec_in[k], params_[layout.decoder_weight[k]], g_pre);
    ops::accumulate(grads[layout.decoder_weight[k]], fc.weight);
    ops::accumulate(grads[layout.decoder_bias[k]], fc.bias);
    g_h = std::move(fc.x);
  }
  const std::size_t D = config_.class_dim;
  for (std::size_t d = 0; d < D; ++d) g_v[t.mask_class * D + d] += g_h[t.mask_class * D + d];

  // Routing and primary capsules.
  auto rg = route_backward(t.u, params_[layout.routing], t.routing, g_v);
  ops::accumulate(grads[layout.routing], rg.weights);
  const auto g_pre_caps = squash_backward(t.primary_pre, rg.u);
  const auto& primary_w = params_[layout.primary_weight];
  const Shape map_shape{config_.primary_conv_filters, config_.primary_map_side(), config_.primary_map_side()};
  auto pg = ops::conv2d_backward(t.features, primary_w, config_.primary_stride,
                                 ungroup_capsules(g_pre_caps, map_shape, config_.component_capsules,
                                                  config_.primary_dim));
  ops::accumulate(grads[layout.primary_weight], pg.kernels);
  ops::accumulate(grads[layout.primary_bias], pg.bias);

  Tensor<T> g_x = std::move(pg.input);
  for (std::size_t k = config_.conv_layers.size(); k-- > 0;) {
    const auto g_pre = ops::relu_backward(t.conv_pre[k], g_x);
    auto cg = ops::conv2d_backward(t.conv_in[k], params_[layout.conv_weight[k]],
                                   config_.conv_layers[k].stride, g_pre, k > 0);
    ops::accumulate(grads[layout.conv_weight[k]], cg.kernels);
    ops::accumulate(grads[layout.conv_bias[k]], cg.bias);
    g_x = std::move(cg.input);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> CapsNet<T>::tweak(const Tensor<T>& image, std::size_t dim,
                                         std::span<const double> deltas) const {
  if (dim >= config_.class_dim) {
    fail(ErrorCode::kInvalidArgument, "tweak dimension " + std::to_string(dim) +
                                          " out of range for class capsules of dim " +
                                          std::to_string(config_.class_dim));
  }
  const auto t = run(image, std::nullopt);
  const auto winner = static_cast<std::size_t>(t.predicted);
  std::vector<Tensor<T>> images;
  images.reserve(deltas.size());
  for (double delta : deltas) {
    Tensor<T> v = t.routing.output();
    v[winner * config_.class_dim + dim] += static_cast<T>(delta);
    images.push_back(decode(v, winner));
  }
  return images;
}

#define CAPSROUT_INSTANTIATE_CAPS(T)                                                           \
  template Tensor<T> squash(const Tensor<T>&);                                                  \
  template Tensor<T> squash_backward(const Tensor<T>&, const Tensor<T>&);                       \
  template RoutingState<T> route(const Tensor<T>&, const Tensor<T>&, std::size_t);              \
  template RoutingGrads<T> route_backward(const Tensor<T>&, const Tensor<T>&,                   \
                                          const RoutingState<T>&, const Tensor<T>&);            \
  template std::vector<T> capsule_norms(const Tensor<T>&);                                      \
  template T margin_loss(const Tensor<T>&, std::size_t, const MarginParams&);                   \
  template Tensor<T> margin_loss_backward(const Tensor<T>&, std::size_t, const MarginParams&);  \
  template T reconstruction_loss(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> reconstruction_loss_backward(const Tensor<T>&, const Tensor<T>&);          \
  template ParamSet<T> capsnet_init_params(const CapsNetConfig&, Rng&);                         \
  template class CapsNet<T>;

CAPSROUT_INSTANTIATE_CAPS(float)
CAPSROUT_INSTANTIATE_CAPS(double)

#undef CAPSROUT_INSTANTIATE_CAPS

}  // namespace capsrout
