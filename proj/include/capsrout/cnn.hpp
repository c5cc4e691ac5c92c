#pragma once

#include <string>
#include <vector>

#include "capsrout/capsnet.hpp"
#include "capsrout/model.hpp"

namespace capsrout {

// conv -> ReLU -> 2x2 pool -> conv -> ReLU -> 2x2 pool -> FC stack -> logits.
struct CnnConfig {
  std::size_t input_side = 64;
  ConvSpec conv1{64, 5, 1};
  ConvSpec conv2{64, 5, 1};
  std::vector<std::size_t> hidden_widths = {800, 800};
  std::size_t class_count = 3;

  void validate() const;
  // Spatial side after each stage: conv1, pool1, conv2, pool2.
  std::vector<std::size_t> spatial_trace() const;
  std::size_t flat_features() const;

  std::string to_json() const;
  static CnnConfig from_json(const std::string& text);

  bool operator==(const CnnConfig&) const = default;
};

// 16x16 input variant used by the gradient checker.
CnnConfig cnn_shrunken_config();

template <typename T>
T cross_entropy(const Tensor<T>& logits, std::size_t label);

template <typename T>
Tensor<T> cross_entropy_backward(const Tensor<T>& logits, std::size_t label);

template <typename T>
class Cnn final : public Model<T> {
 public:
  Cnn(CnnConfig config, std::uint64_t seed);
  Cnn(CnnConfig config, ParamSet<T> params);

  const CnnConfig& config() const { return config_; }

  ModelKind kind() const override { return ModelKind::kCnn; }
  ParamSet<T>& params() override { return params_; }
  const ParamSet<T>& params() const override { return params_; }

  SampleLoss accumulate_gradient(const Tensor<T>& image, int label,
                                 ParamSet<T>& grads) const override;
  SampleLoss loss(const Tensor<T>& image, int label) const override;
  int predict(const Tensor<T>& image) const override;
  double reconstruction_weight() const override { return 0.0; }
  std::size_t input_side() const override { return config_.input_side; }
  std::string config_json() const override { return config_.to_json(); }
  std::unique_ptr<Model<T>> clone() const override { return std::make_unique<Cnn>(*this); }

  Tensor<T> logits(const Tensor<T>& image) const;

 private:
  struct Trace;
  Trace run(const Tensor<T>& image) const;

  CnnConfig config_;
  ParamSet<T> params_;
};

std::vector<std::pair<std::string, Shape>> cnn_param_shapes(const CnnConfig& config);

}  // namespace capsrout
