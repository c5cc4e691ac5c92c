#include "capsrout/model.hpp"

#include "capsrout/capsnet.hpp"
#include "capsrout/cnn.hpp"

namespace capsrout {

const char* model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::kCapsNet: return "capsnet";
    case ModelKind::kCnn: return "cnn";
  }
  return "unknown";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "capsnet") return ModelKind::kCapsNet;
  if (name == "cnn") return ModelKind::kCnn;
  fail(ErrorCode::kInvalidArgument, "unknown model kind '" + name + "' (expected capsnet|cnn)");
}

template <typename T>
std::unique_ptr<Model<T>> make_model(ModelKind kind, const std::string& config_json, std::uint64_t seed) {
  switch (kind) {
    case ModelKind::kCapsNet:
      return std::make_unique<CapsNet<T>>(CapsNetConfig::from_json(config_json), seed);
    case ModelKind::kCnn:
      return std::make_unique<Cnn<T>>(CnnConfig::from_json(config_json), seed);
  }
  fail(ErrorCode::kModelKind, "unknown model kind");
}

template <typename To, typename From>
std::unique_ptr<Model<To>> convert_model(const Model<From>& model) {
  auto params = model.params().template cast<To>();
  switch (model.kind()) {
    case ModelKind::kCapsNet:
      return std::make_unique<CapsNet<To>>(CapsNetConfig::from_json(model.config_json()), std::move(params));
    case ModelKind::kCnn:
      return std::make_unique<Cnn<To>>(CnnConfig::from_json(model.config_json()), std::move(params));
  }
  fail(ErrorCode::kModelKind, "unknown model kind");
}

template std::unique_ptr<Model<float>> make_model(ModelKind, const std::string&, std::uint64_t);
template std::unique_ptr<Model<double>> make_model(ModelKind, const std::string&, std::uint64_t);
template std::unique_ptr<Model<double>> convert_model(const Model<float>&);
template std::unique_ptr<Model<float>> convert_model(const Model<double>&);
template std::unique_ptr<Model<float>> convert_model(const Model<float>&);
template std::unique_ptr<Model<double>> convert_model(const Model<double>&);

}  // namespace capsrout
