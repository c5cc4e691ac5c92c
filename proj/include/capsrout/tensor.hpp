#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "capsrout/error.hpp"

namespace capsrout {

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage. Eigen's vectorized reductions peel a prefix that
// depends on the buffer address, so a fixed alignment keeps float sums
// reproducible from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array. float is the training type; double backs the
// gradient-check path. Both go through the same templated ops.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {
    validate_shape();
  }
  Tensor(Shape shape, std::span<const T> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      fail(ErrorCode::kDimension, "tensor data length " + std::to_string(data_.size()) +
                                      " does not match shape " + shape_str(shape_));
    }
  }
  Tensor(std::initializer_list<std::size_t> shape, std::initializer_list<T> data)
      : Tensor(Shape(shape), std::span<const T>(data.begin(), data.size())) {}

  static Tensor filled(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }
  AlignedVector<T>& storage() noexcept { return data_; }
  const AlignedVector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // Same data viewed under a new shape of equal element count.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      fail(ErrorCode::kDimension,
           "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    const std::vector<U> converted(data_.begin(), data_.end());
    return Tensor<U>(shape_, converted);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool operator==(const Tensor& other) const = default;

 private:
  void validate_shape() const {
    for (auto extent : shape_) {
      if (extent == 0) fail(ErrorCode::kDimension, "zero extent in shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  AlignedVector<T> data_;
};

// Raises kNonFinite naming `context` when any element is NaN or Inf.
template <typename T>
void require_finite(const Tensor<T>& t, const std::string& context);

namespace ops {

// ---- matrix product -------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
struct MatmulGrads {
  Tensor<T> a;
  Tensor<T> b;
};

template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& grad_out);

// ---- convolution ----------------------------------------------------------

// Valid cross-correlation. input [C_in,H,W], kernels [C_out,C_in,k,k],
// bias [C_out]. Output [C_out, (H-k)/stride+1, (W-k)/stride+1].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                 std::size_t stride);

template <typename T>
struct Conv2dGrads {
  Tensor<T> input;  // left empty when not requested
  Tensor<T> kernels;
  Tensor<T> bias;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernels,
                               std::size_t stride, const Tensor<T>& grad_out,
                               bool want_input_grad = true);

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride);

// ---- pooling --------------------------------------------------------------

template <typename T>
struct PoolResult {
  Tensor<T> out;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

// 2x2 window, stride 2. Ties go to the first element in row-major order.
template <typename T>
PoolResult<T> maxpool2(const Tensor<T>& input);

template <typename T>
Tensor<T> maxpool2_backward(const Shape& input_shape, std::span<const std::size_t> argmax,
                            const Tensor<T>& grad_out);

// ---- softmax --------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, std::size_t axis);

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& grad_y, std::size_t axis);

// ---- pointwise and fully connected -----------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_y);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
// Takes the forward output, not the input.
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& grad_y);

// y = W x + b with x [in], W [out,in], b [out].
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
struct FcGrads {
  Tensor<T> x;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
FcGrads<T> fully_connected_backward(const Tensor<T>& x, const Tensor<T>& weight,
                                    const Tensor<T>& grad_y);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> square(const Tensor<T>& a);
template <typename T>
Tensor<T> square_backward(const Tensor<T>& a, const Tensor<T>& grad_y);
template <typename T>
T sum(const Tensor<T>& a);
// d sum / d a broadcast of the scalar upstream gradient.
template <typename T>
Tensor<T> sum_backward(const Shape& shape, T grad_y);

// In-place a += b, shapes must match.
template <typename T>
void accumulate(Tensor<T>& a, const Tensor<T>& b);

}  // namespace ops
}  // namespace capsrout
