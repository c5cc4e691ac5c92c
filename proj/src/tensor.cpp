#include "capsrout/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

namespace capsrout {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kDimension: return "dimension";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kVersionMismatch: return "version_mismatch";
    case ErrorCode::kChecksum: return "checksum";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kInvalidRecord: return "invalid_record";
    case ErrorCode::kModelKind: return "model_kind";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kEmptySplit: return "empty_split";
  }
  return "unknown";
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& context) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      fail(ErrorCode::kNonFinite,
           "non-finite value at element " + std::to_string(i) + " of " + context);
    }
  }
}

template void require_finite(const Tensor<float>&, const std::string&);
template void require_finite(const Tensor<double>&, const std::string&);

namespace ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
CMapMat<T> as_mat(const T* p, std::size_t rows, std::size_t cols) {
  return CMapMat<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
MapMat<T> as_mat(T* p, std::size_t rows, std::size_t cols) {
  return MapMat<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_rank(const Shape& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank) {
    fail(ErrorCode::kDimension, std::string(what) + " expects rank " + std::to_string(rank) +
                                    ", got " + shape_str(shape));
  }
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::kDimension,
         std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// col layout: rows (c, ky, kx), cols (oy, ox).
template <typename T>
void im2col(const T* in, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t k, std::size_t stride, std::size_t out_h, std::size_t out_w, T* col) {
  const std::size_t n_out = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = in + c * height * width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * n_out;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const T* src = plane + (oy * stride + ky) * width + kx;
          T* dst = row + oy * out_w;
          if (stride == 1) {
            std::copy(src, src + out_w, dst);
          } else {
            for (std::size_t ox = 0; ox < out_w; ++ox) dst[ox] = src[ox * stride];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t k, std::size_t stride, std::size_t out_h, std::size_t out_w, T* out) {
  const std::size_t n_out = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = out + c * height * width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * n_out;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          T* dst = plane + (oy * stride + ky) * width + kx;
          const T* src = row + oy * out_w;
          for (std::size_t ox = 0; ox < out_w; ++ox) dst[ox * stride] += src[ox];
        }
      }
    }
  }
}

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, k, out_h, out_w;
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& kernels, std::size_t stride) {
  require_rank(input.shape(), 3, "conv2d input");
  require_rank(kernels.shape(), 4, "conv2d kernels");
  if (stride == 0) fail(ErrorCode::kConfig, "conv2d stride must be positive");
  const auto& is = input.shape();
  const auto& ks = kernels.shape();
  if (ks[1] != is[0] || ks[2] != ks[3]) {
    fail(ErrorCode::kDimension, "conv2d kernels " + shape_str(ks) + " incompatible with input " +
                                    shape_str(is));
  }
  if (ks[2] > is[1] || ks[2] > is[2]) {
    fail(ErrorCode::kDimension, "conv2d kernel " + shape_str(ks) + " larger than input " +
                                    shape_str(is));
  }
  return {is[0], is[1], is[2], ks[0], ks[2], conv_out_extent(is[1], ks[2], stride),
          conv_out_extent(is[2], ks[2], stride)};
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul lhs");
  require_rank(b.shape(), 2, "matmul rhs");
  if (a.dim(1) != b.dim(0)) {
    fail(ErrorCode::kDimension,
         "matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  as_mat(out.raw(), a.dim(0), b.dim(1)).noalias() =
      as_mat(a.raw(), a.dim(0), a.dim(1)) * as_mat(b.raw(), b.dim(0), b.dim(1));
  return out;
}

template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& grad_out) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (grad_out.shape() != Shape{m, n}) {
    fail(ErrorCode::kDimension, "matmul grad shape " + shape_str(grad_out.shape()) +
                                    " does not match output " + shape_str({m, n}));
  }
  MatmulGrads<T> g{Tensor<T>({m, k}), Tensor<T>({k, n})};
  as_mat(g.a.raw(), m, k).noalias() =
      as_mat(grad_out.raw(), m, n) * as_mat(b.raw(), k, n).transpose();
  as_mat(g.b.raw(), k, n).noalias() =
      as_mat(a.raw(), m, k).transpose() * as_mat(grad_out.raw(), m, n);
  return g;
}

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride) {
  if (kernel > in) {
    fail(ErrorCode::kDimension, "kernel " + std::to_string(kernel) + " larger than input extent " +
                                    std::to_string(in));
  }
  return (in - kernel) / stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                 std::size_t stride) {
  const auto g = conv_geometry(input, kernels, stride);
  if (bias.shape() != Shape{g.c_out}) {
    fail(ErrorCode::kDimension, "conv2d bias " + shape_str(bias.shape()) + " vs kernels " +
                                    shape_str(kernels.shape()));
  }
  const std::size_t patch = g.c_in * g.k * g.k;
  const std::size_t n_out = g.out_h * g.out_w;
  AlignedVector<T> col(patch * n_out);
  im2col(input.raw(), g.c_in, g.h, g.w, g.k, stride, g.out_h, g.out_w, col.data());

  Tensor<T> out({g.c_out, g.out_h, g.out_w});
  auto out_mat = as_mat(out.raw(), g.c_out, n_out);
  out_mat.noalias() = as_mat(kernels.raw(), g.c_out, patch) * as_mat(col.data(), patch, n_out);
  for (std::size_t o = 0; o < g.c_out; ++o) out_mat.row(static_cast<Eigen::Index>(o)).array() += bias[o];
  return out;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& kernels,
                               std::size_t stride, const Tensor<T>& grad_out,
                               bool want_input_grad) {
  const auto g = conv_geometry(input, kernels, stride);
  if (grad_out.shape() != Shape{g.c_out, g.out_h, g.out_w}) {
    fail(ErrorCode::kDimension, "conv2d grad " + shape_str(grad_out.shape()) +
                                    " does not match output shape");
  }
  const std::size_t patch = g.c_in * g.k * g.k;
  const std::size_t n_out = g.out_h * g.out_w;
  AlignedVector<T> col(patch * n_out);
  im2col(input.raw(), g.c_in, g.h, g.w, g.k, stride, g.out_h, g.out_w, col.data());

  const auto gout = as_mat(grad_out.raw(), g.c_out, n_out);
  Conv2dGrads<T> grads;
  grads.kernels = Tensor<T>(kernels.shape());
  as_mat(grads.kernels.raw(), g.c_out, patch).noalias() =
      gout * as_mat(col.data(), patch, n_out).transpose();
  grads.bias = Tensor<T>({g.c_out});
  for (std::size_t o = 0; o < g.c_out; ++o) {
    grads.bias[o] = gout.row(static_cast<Eigen::Index>(o)).sum();
  }
  if (want_input_grad) {
    as_mat(col.data(), patch, n_out).noalias() =
        as_mat(kernels.raw(), g.c_out, patch).transpose() * gout;
    grads.input = Tensor<T>(input.shape());
    col2im(col.data(), g.c_in, g.h, g.w, g.k, stride, g.out_h, g.out_w, grads.input.raw());
  }
  return grads;
}

template <typename T>
PoolResult<T> maxpool2(const Tensor<T>& input) {
  require_rank(input.shape(), 3, "maxpool2 input");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (h < 2 || w < 2) fail(ErrorCode::kDimension, "maxpool2 input too small: " + shape_str(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  PoolResult<T> r{Tensor<T>({c, oh, ow}), std::vector<std::size_t>(c * oh * ow)};
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        std::size_t best = (ch * h + 2 * y) * w + 2 * x;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (ch * h + 2 * y + dy) * w + 2 * x + dx;
            if (input[idx] > input[best]) best = idx;
          }
        }
        r.out[o] = input[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> maxpool2_backward(const Shape& input_shape, std::span<const std::size_t> argmax,
                            const Tensor<T>& grad_out) {
  if (argmax.size() != grad_out.size()) {
    fail(ErrorCode::kDimension, "maxpool2 backward: argmax/grad size mismatch");
  }
  Tensor<T> g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_out[i];
  return g;
}

namespace {

struct AxisLayout {
  std::size_t outer, extent, inner;
};

AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    fail(ErrorCode::kDimension, "softmax axis " + std::to_string(axis) + " out of range for " +
                                    shape_str(shape));
  }
  AxisLayout l{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, std::size_t axis) {
  const auto l = axis_layout(logits.shape(), axis);
  Tensor<T> y(logits.shape());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.extent * l.inner + in;
      T m = logits[base];
      for (std::size_t j = 1; j < l.extent; ++j) m = std::max(m, logits[base + j * l.inner]);
      T z = 0;
      for (std::size_t j = 0; j < l.extent; ++j) {
        const T e = std::exp(logits[base + j * l.inner] - m);
        y[base + j * l.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < l.extent; ++j) y[base + j * l.inner] /= z;
    }
  }
  return y;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& grad_y, std::size_t axis) {
  require_same(y, grad_y, "softmax backward");
  const auto l = axis_layout(y.shape(), axis);
  Tensor<T> g(y.shape());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.extent * l.inner + in;
      T dot = 0;
      for (std::size_t j = 0; j < l.extent; ++j) {
        dot += y[base + j * l.inner] * grad_y[base + j * l.inner];
      }
      for (std::size_t j = 0; j < l.extent; ++j) {
        const std::size_t idx = base + j * l.inner;
        g[idx] = y[idx] * (grad_y[idx] - dot);
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  // NaN passes through so a poisoned input still surfaces as a non-finite loss.
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] > T(0) || std::isnan(x[i])) ? x[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_y) {
  require_same(x, grad_y, "relu backward");
  Tensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > T(0) ? grad_y[i] : T(0);
  return g;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    // Split on sign so exp never overflows.
    if (x[i] >= T(0)) {
      y[i] = T(1) / (T(1) + std::exp(-x[i]));
    } else {
      const T e = std::exp(x[i]);
      y[i] = e / (T(1) + e);
    }
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& grad_y) {
  require_same(y, grad_y, "sigmoid backward");
  Tensor<T> g(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) g[i] = grad_y[i] * y[i] * (T(1) - y[i]);
  return g;
}

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(weight.shape(), 2, "fully_connected weight");
  const std::size_t out = weight.dim(0), in = weight.dim(1);
  if (x.size() != in || bias.shape() != Shape{out}) {
    fail(ErrorCode::kDimension, "fully_connected: input " + shape_str(x.shape()) + ", weight " +
                                    shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()));
  }
  Tensor<T> y(bias);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> yv(y.raw(), static_cast<Eigen::Index>(out));
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> xv(x.raw(), static_cast<Eigen::Index>(in));
  yv.noalias() += as_mat(weight.raw(), out, in) * xv;
  return y;
}

template <typename T>
FcGrads<T> fully_connected_backward(const Tensor<T>& x, const Tensor<T>& weight,
                                    const Tensor<T>& grad_y) {
  const std::size_t out = weight.dim(0), in = weight.dim(1);
  if (x.size() != in || grad_y.size() != out) {
    fail(ErrorCode::kDimension, "fully_connected backward: input " + shape_str(x.shape()) +
                                    ", weight " + shape_str(weight.shape()) + ", grad " +
                                    shape_str(grad_y.shape()));
  }
  FcGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(weight.shape()), Tensor<T>(grad_y.shape())};
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> xv(x.raw(), static_cast<Eigen::Index>(in));
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> gy(grad_y.raw(), static_cast<Eigen::Index>(out));
  as_mat(g.weight.raw(), out, in).noalias() = gy * xv.transpose();
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(g.x.raw(), static_cast<Eigen::Index>(in)).noalias() =
      as_mat(weight.raw(), out, in).transpose() * gy;
  std::copy(grad_y.data().begin(), grad_y.data().end(), g.bias.data().begin());
  return g;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  Tensor<T> y(a);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
  return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> y(a);
  for (auto& v : y.data()) v *= factor;
  return y;
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  Tensor<T> y(a);
  for (auto& v : y.data()) v *= v;
  return y;
}

template <typename T>
Tensor<T> square_backward(const Tensor<T>& a, const Tensor<T>& grad_y) {
  require_same(a, grad_y, "square backward");
  Tensor<T> g(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = T(2) * a[i] * grad_y[i];
  return g;
}

template <typename T>
T sum(const Tensor<T>& a) {
  T s = 0;
  for (auto v : a.data()) s += v;
  return s;
}

template <typename T>
Tensor<T> sum_backward(const Shape& shape, T grad_y) {
  return Tensor<T>::filled(shape, grad_y);
}

template <typename T>
void accumulate(Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "accumulate");
  T* pa = a.raw();
  const T* pb = b.raw();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += pb[i];
}

#define CAPSROUT_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
  template MatmulGrads<T> matmul_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);  \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);   \
  template Conv2dGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, std::size_t,        \
                                          const Tensor<T>&, bool);                                \
  template PoolResult<T> maxpool2(const Tensor<T>&);                                              \
  template Tensor<T> maxpool2_backward(const Shape&, std::span<const std::size_t>,                \
                                       const Tensor<T>&);                                         \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                      \
  template Tensor<T> softmax_backward(const Tensor<T>&, const Tensor<T>&, std::size_t);           \
  template Tensor<T> relu(const Tensor<T>&);                                                      \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid_backward(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> fully_connected(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
  template FcGrads<T> fully_connected_backward(const Tensor<T>&, const Tensor<T>&,                \
                                               const Tensor<T>&);                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                  \
  template Tensor<T> square(const Tensor<T>&);                                                    \
  template Tensor<T> square_backward(const Tensor<T>&, const Tensor<T>&);                         \
  template T sum(const Tensor<T>&);                                                               \
  template Tensor<T> sum_backward(const Shape&, T);                                               \
  template void accumulate(Tensor<T>&, const Tensor<T>&);

CAPSROUT_INSTANTIATE_OPS(float)
CAPSROUT_INSTANTIATE_OPS(double)

#undef CAPSROUT_INSTANTIATE_OPS

}  // namespace ops
}  // namespace capsrout
