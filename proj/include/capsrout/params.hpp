#pragma once

#include <string>
#include <vector>

#include "capsrout/tensor.hpp"

namespace capsrout {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;

  bool operator==(const NamedTensor&) const = default;
};

// Ordered, named parameter groups. Order is part of the checkpoint format and
// of the gradient accumulation order, so it never changes after construction.
template <typename T>
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor<T> value) {
    entries_.push_back({std::move(name), std::move(value)});
    return entries_.size() - 1;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  Tensor<T>& operator[](std::size_t i) { return entries_[i].value; }
  const Tensor<T>& operator[](std::size_t i) const { return entries_[i].value; }
  const std::string& name(std::size_t i) const { return entries_[i].name; }

  std::vector<NamedTensor<T>>& entries() noexcept { return entries_; }
  const std::vector<NamedTensor<T>>& entries() const noexcept { return entries_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& e : entries_) out.add(e.name, Tensor<T>(e.value.shape()));
    return out;
  }

  void zero() {
    for (auto& e : entries_) e.value.fill(T(0));
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

  bool operator==(const ParamSet&) const = default;

 private:
  std::vector<NamedTensor<T>> entries_;
};

}  // namespace capsrout
