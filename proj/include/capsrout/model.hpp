#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "capsrout/params.hpp"
#include "capsrout/tensor.hpp"

namespace capsrout {

enum class ModelKind : std::uint8_t { kCapsNet = 1, kCnn = 2 };

const char* model_kind_name(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

// Per-sample loss breakdown. For the CNN `primary` is the cross-entropy and
// `reconstruction` stays zero.
struct SampleLoss {
  double primary = 0.0;
  double reconstruction = 0.0;
  double total = 0.0;
  int predicted = -1;
};

// Common surface the training engine, gradient checker and checkpoint code
// use. Implementations are pure given their parameters: every const member
// is safe to call concurrently.
template <typename T>
class Model {
 public:
  virtual ~Model() = default;

  virtual ModelKind kind() const = 0;
  virtual ParamSet<T>& params() = 0;
  virtual const ParamSet<T>& params() const = 0;

  // Full forward + backward for one labelled image; adds into `grads`, which
  // must be shaped like params().
  virtual SampleLoss accumulate_gradient(const Tensor<T>& image, int label,
                                         ParamSet<T>& grads) const = 0;
  virtual SampleLoss loss(const Tensor<T>& image, int label) const = 0;
  virtual int predict(const Tensor<T>& image) const = 0;

  // Weight of the reconstruction term inside `total`; zero for models with
  // no decoder.
  virtual double reconstruction_weight() const = 0;
  virtual std::size_t input_side() const = 0;
  virtual std::string config_json() const = 0;
  virtual std::unique_ptr<Model> clone() const = 0;
};

// Builds a freshly initialised model from a serialized config.
template <typename T>
std::unique_ptr<Model<T>> make_model(ModelKind kind, const std::string& config_json,
                                     std::uint64_t seed);

// Same architecture, parameters converted to another element type.
template <typename To, typename From>
std::unique_ptr<Model<To>> convert_model(const Model<From>& model);

}  // namespace capsrout
