#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "capsrout/model.hpp"
#include "capsrout/rng.hpp"

namespace capsrout {

struct ConvSpec {
  std::size_t filters = 64;
  std::size_t kernel = 9;
  std::size_t stride = 1;

  bool operator==(const ConvSpec&) const = default;
};

struct CapsNetConfig {
  std::size_t input_side = 64;
  // Feature layers before the primary capsules, each followed by ReLU.
  std::vector<ConvSpec> conv_layers = {{64, 9, 1}};
  std::size_t primary_conv_filters = 256;
  std::size_t primary_kernel = 9;
  std::size_t primary_stride = 2;
  std::size_t component_capsules = 32;
  std::size_t primary_dim = 8;
  std::size_t class_count = 3;
  std::size_t class_dim = 16;
  std::size_t routing_iters = 3;
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;
  std::vector<std::size_t> decoder_widths = {512, 1024, 4096};
  double decoder_loss_weight = 0.0005;

  // Throws kConfig on any broken invariant.
  void validate() const;

  std::size_t primary_map_side() const;
  std::size_t lower_capsules() const { return component_capsules * primary_map_side() * primary_map_side(); }

  std::string to_json() const;
  static CapsNetConfig from_json(const std::string& text);

  bool operator==(const CapsNetConfig&) const = default;
};

// Architecture variants of the comparison table. "one-conv-64" is the default
// model. Unknown names raise kConfig.
CapsNetConfig capsnet_preset(std::string_view name);
const std::vector<std::string>& capsnet_preset_names();

// 16x16 input, 2 conv maps, 2x4 primary capsules, 2 classes of dim 4,
// decoder 8/16/256, 2 routing iterations. Used for finite-difference checks.
CapsNetConfig capsnet_tiny_config();

// ---- squash ---------------------------------------------------------------

// Rows of `s` [n, d] are squashed independently: v = s * |s| / (1 + |s|^2).
template <typename T>
Tensor<T> squash(const Tensor<T>& s);

template <typename T>
Tensor<T> squash_backward(const Tensor<T>& s, const Tensor<T>& grad_v);

// ---- routing by agreement -------------------------------------------------

template <typename T>
struct RoutingIteration {
  Tensor<T> logits;     // b before this iteration's softmax [N, J]
  Tensor<T> couplings;  // c [N, J]
  Tensor<T> preact;     // s [J, D]
  Tensor<T> output;     // v [J, D]
};

template <typename T>
struct RoutingState {
  Tensor<T> predictions;  // u_hat [N, J, D]
  std::vector<RoutingIteration<T>> iterations;

  const Tensor<T>& couplings() const { return iterations.back().couplings; }
  const Tensor<T>& preact() const { return iterations.back().preact; }
  const Tensor<T>& output() const { return iterations.back().output; }
};

// u [N, P], weights [N, J, D, P]. Logits start at zero and are updated with
// the agreement v_j . u_hat_{j|i} after every iteration but the last.
template <typename T>
RoutingState<T> route(const Tensor<T>& u, const Tensor<T>& weights, std::size_t iters);

template <typename T>
struct RoutingGrads {
  Tensor<T> u;
  Tensor<T> weights;
};

// Gradient of the unrolled routing computation, couplings included.
template <typename T>
RoutingGrads<T> route_backward(const Tensor<T>& u, const Tensor<T>& weights,
                               const RoutingState<T>& state, const Tensor<T>& grad_v);

// ---- losses ---------------------------------------------------------------

struct MarginParams {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;
};

template <typename T>
T margin_loss(const Tensor<T>& v, std::size_t label, const MarginParams& p);

template <typename T>
Tensor<T> margin_loss_backward(const Tensor<T>& v, std::size_t label, const MarginParams& p);

template <typename T>
T reconstruction_loss(const Tensor<T>& reconstruction, const Tensor<T>& image);

template <typename T>
Tensor<T> reconstruction_loss_backward(const Tensor<T>& reconstruction, const Tensor<T>& image);

// Per-class capsule lengths |v_k|.
template <typename T>
std::vector<T> capsule_norms(const Tensor<T>& v);

// ---- model ----------------------------------------------------------------

template <typename T>
struct CapsForward {
  std::vector<T> scores;
  int predicted = -1;
  std::optional<T> margin;
  std::optional<T> reconstruction_error;
  std::optional<T> total;
  Tensor<T> reconstruction;  // [side*side]
  RoutingState<T> routing;
};

template <typename T>
class CapsNet final : public Model<T> {
 public:
  CapsNet(CapsNetConfig config, std::uint64_t seed);
  CapsNet(CapsNetConfig config, ParamSet<T> params);

  const CapsNetConfig& config() const { return config_; }

  ModelKind kind() const override { return ModelKind::kCapsNet; }
  ParamSet<T>& params() override { return params_; }
  const ParamSet<T>& params() const override { return params_; }

  SampleLoss accumulate_gradient(const Tensor<T>& image, int label,
                                 ParamSet<T>& grads) const override;
  SampleLoss loss(const Tensor<T>& image, int label) const override;
  int predict(const Tensor<T>& image) const override;
  double reconstruction_weight() const override { return config_.decoder_loss_weight; }
  std::size_t input_side() const override { return config_.input_side; }
  std::string config_json() const override { return config_.to_json(); }
  std::unique_ptr<Model<T>> clone() const override { return std::make_unique<CapsNet>(*this); }

  // Full pipeline. With a label the decoder is masked by the true class and
  // all losses are filled; without one the predicted class drives the mask.
  CapsForward<T> forward(const Tensor<T>& image, std::optional<int> label = std::nullopt) const;

  // Masked decoder. `v` is [J, D]; only row `mask_class` reaches the FC stack.
  Tensor<T> decode(const Tensor<T>& v, std::size_t mask_class) const;

  // Primary capsule vectors [N_lower, P] from post-ReLU features.
  Tensor<T> primary_capsules(const Tensor<T>& features) const;

  // Winning class capsule, dimension `dim` shifted by each delta, decoded.
  std::vector<Tensor<T>> tweak(const Tensor<T>& image, std::size_t dim,
                               std::span<const double> deltas) const;

 private:
  struct Trace;
  Trace run(const Tensor<T>& image, std::optional<int> label) const;
  Tensor<T> decoder_pass(const Tensor<T>& v, std::size_t mask_class, std::vector<Tensor<T>>* inputs,
                         std::vector<Tensor<T>>* preacts) const;
  void check_image(const Tensor<T>& image) const;

  CapsNetConfig config_;
  ParamSet<T> params_;
};

// Layout of CapsNet parameter groups; exposed for tests and tools.
struct CapsNetParamLayout {
  std::vector<std::size_t> conv_weight, conv_bias;
  std::size_t primary_weight = 0, primary_bias = 0, routing = 0;
  std::vector<std::size_t> decoder_weight, decoder_bias;
};
CapsNetParamLayout capsnet_param_layout(const CapsNetConfig& config);
std::vector<std::pair<std::string, Shape>> capsnet_param_shapes(const CapsNetConfig& config);

template <typename T>
ParamSet<T> capsnet_init_params(const CapsNetConfig& config, Rng& rng);

}  // namespace capsrout
