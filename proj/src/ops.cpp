#include "deepfuse/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <type_traits>

namespace deepfuse {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "gelu") return Activation::kGelu;
  if (name == "swish") return Activation::kSwish;
  throw ConfigError("unknown activation '" + std::string(name) + "' (expected relu, gelu or swish)");
}

std::string_view activation_name(Activation kind) {
  switch (kind) {
    case Activation::kRelu:
      return "relu";
    case Activation::kGelu:
      return "gelu";
    case Activation::kSwish:
      return "swish";
  }
  return "?";
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw DimensionError("convolution stride must be >= 1");
  if (kernel == 0 || kernel > in + 2 * pad) {
    throw DimensionError("kernel extent " + std::to_string(kernel) + " does not fit input extent " +
                         std::to_string(in) + " with padding " + std::to_string(pad));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMapMat<T> as_matrix(const T* p, std::size_t rows, std::size_t cols) {
  return ConstMapMat<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
MapMat<T> as_matrix(T* p, std::size_t rows, std::size_t cols) {
  return MapMat<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a) + " vs " + shape_to_string(b));
  }
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_to_string(s));
  }
}

// Adds `src` into the gradient of `dst` when dst takes part in differentiation.
template <typename T>
void accumulate(const Tensor<T>& dst, std::type_identity_t<std::span<const T>> src) {
  if (!dst.requires_grad()) return;
  auto g = dst.grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

// im2col for a single image: cols[(c*kh+i)*kw+j, oy*Wo+ox].
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* cols) {
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        T* row = cols + ((c * kh + i) * kw + j) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) - ipad;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) - ipad;
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                ix < static_cast<std::ptrdiff_t>(w);
            row[oy * wo + ox] = inside ? x[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* dx) {
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const T* row = cols + ((c * kh + i) * kw + j) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) - ipad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) - ipad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            dx[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

template <typename T>
T gelu_value(T x) {
  constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = static_cast<T>(0.044715);
  return T{0.5} * x * (T{1} + std::tanh(kC * (x + kA * x * x * x)));
}

template <typename T>
T gelu_derivative(T x) {
  constexpr T kC = static_cast<T>(0.7978845608028654);
  constexpr T kA = static_cast<T>(0.044715);
  const T t = std::tanh(kC * (x + kA * x * x * x));
  return T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * kC * (T{1} + T{3} * kA * x * x);
}

template <typename T>
T sigmoid_value(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  record_op(out, {&a, &b}, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    accumulate(a, out.grad());
    accumulate(b, out.grad());
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] - b[i];
  record_op(out, {&a, &b}, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    accumulate(a, g);
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  record_op(out, {&a, &b}, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * factor;
  record_op(out, {&x}, [x, out, factor]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * factor;
  });
  return out;
}

template <typename T>
Tensor<T> sine(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::sin(x[i]);
  record_op(out, {&x}, [x, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * std::cos(x[i]);
  });
  return out;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank(bias.shape(), 1, "add_bias");
  const std::size_t d = bias.extent(0);
  if (x.rank() == 0 || x.shape().back() != d) {
    throw DimensionError("add_bias: last extent of " + shape_to_string(x.shape()) + " must equal " + std::to_string(d));
  }
  Tensor<T> out(x.shape());
  const std::size_t rows = x.numel() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] + bias[j];
  }
  record_op(out, {&x, &bias}, [x, bias, out, rows, d]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    accumulate(x, g);
    if (bias.requires_grad()) {
      auto gb = bias.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (T v : x.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  record_op(out, {&x}, [x, out]() mutable {
    if (!out.has_grad()) return;
    const T g = out.grad()[0];
    for (T& gx : x.grad()) gx += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  Tensor<T> out({m, n});
  as_matrix(out.ptr(), m, n).noalias() = as_matrix(a.ptr(), m, k) * as_matrix(b.ptr(), k, n);
  record_op(out, {&a, &b}, [a, b, out, m, k, n]() mutable {
    if (!out.has_grad()) return;
    auto g = as_matrix(out.grad().data(), m, n);
    if (a.requires_grad()) as_matrix(a.grad().data(), m, k).noalias() += g * as_matrix(b.ptr(), k, n).transpose();
    if (b.requires_grad()) as_matrix(b.grad().data(), k, n).noalias() += as_matrix(a.ptr(), m, k).transpose() * g;
  });
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank(x.shape(), 2, "transpose");
  const std::size_t r = x.extent(0), c = x.extent(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  }
  record_op(out, {&x}, [x, out, r, c]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  record_op(out, {&x}, [x, out]() mutable {
    if (!out.has_grad()) return;
    accumulate(x, out.grad());
  });
  return out;
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "concat_rows");
  require_rank(b.shape(), 2, "concat_rows");
  if (a.extent(1) != b.extent(1)) {
    throw DimensionError("concat_rows: widths differ " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  const std::size_t na = a.numel();
  Tensor<T> out({a.extent(0) + b.extent(0), a.extent(1)});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(na));
  record_op(out, {&a, &b}, [a, b, out, na]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    accumulate(a, g.subspan(0, na));
    accumulate(b, g.subspan(na));
  });
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  require_rank(x.shape(), 2, "slice_rows");
  const std::size_t d = x.extent(1);
  if (count == 0 || begin + count > x.extent(0)) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") out of range for " + shape_to_string(x.shape()));
  }
  Tensor<T> out({count, d});
  std::copy_n(x.ptr() + begin * d, count * d, out.ptr());
  record_op(out, {&x}, [x, out, begin, d]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * d + i] += g[i];
  });
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  require_rank(x.shape(), 2, "slice_cols");
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  if (count == 0 || begin + count > cols) {
    throw DimensionError("slice_cols: columns [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") out of range for " + shape_to_string(x.shape()));
  }
  Tensor<T> out({rows, count});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.ptr() + r * cols + begin, count, out.ptr() + r * count);
  record_op(out, {&x}, [x, out, begin, rows, cols, count]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < count; ++j) gx[r * cols + begin + j] += g[r * count + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts.front().extent(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_rank(p.shape(), 2, "concat_cols");
    if (p.extent(0) != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.extent(1);
  }
  Tensor<T> out({rows, cols});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.extent(1);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(p.ptr() + r * w, w, out.ptr() + r * cols + offset);
    offset += w;
  }
  Tape<T>* tape = Tape<T>::active();
  const bool any = std::any_of(parts.begin(), parts.end(), [](const Tensor<T>& p) { return p.requires_grad(); });
  if (tape != nullptr && any) {
    out.set_requires_grad(true);
    tape->record([parts, out, rows, cols]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t w = p.extent(1);
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += g[r * cols + off + j];
          }
        }
        off += w;
      }
    });
  }
  return out;
}

namespace {

// Splits x into (samples, C, H, W); rank 3 is one sample.
struct Batched {
  std::size_t n, c, h, w;
  bool batched;
};

Batched batched_dims(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  throw DimensionError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + shape_to_string(s));
}

Shape with_batch(const Batched& b, std::size_t c, std::size_t h, std::size_t w) {
  return b.batched ? Shape{b.n, c, h, w} : Shape{c, h, w};
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
  const Batched b = batched_dims(x.shape(), "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  const std::size_t n = b.n, cin = b.c, h = b.h, wd = b.w;
  const std::size_t cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  if (w.extent(1) != cin) {
    throw DimensionError("conv2d: weight " + shape_to_string(w.shape()) + " expects " + std::to_string(w.extent(1)) +
                         " input channels, input has " + std::to_string(cin));
  }
  const std::size_t ho = conv_output_extent(h, kh, stride, pad);
  const std::size_t wo = conv_output_extent(wd, kw, stride, pad);
  const std::size_t patch = cin * kh * kw, npix = ho * wo, in_size = cin * h * wd, out_size = cout * npix;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

  std::vector<T> cols;
  if (!pointwise) cols.resize(n * patch * npix);
  Tensor<T> out(with_batch(b, cout, ho, wo));
  for (std::size_t i = 0; i < n; ++i) {
    const T* col_ptr = x.ptr() + i * in_size;
    if (!pointwise) {
      im2col(x.ptr() + i * in_size, cin, h, wd, kh, kw, stride, pad, ho, wo, cols.data() + i * patch * npix);
      col_ptr = cols.data() + i * patch * npix;
    }
    as_matrix(out.ptr() + i * out_size, cout, npix).noalias() =
        as_matrix(w.ptr(), cout, patch) * as_matrix(col_ptr, patch, npix);
  }

  record_op(out, {&x, &w},
            [x, w, out, cols = std::move(cols), pointwise, n, cin, h, wd, kh, kw, stride, pad, ho, wo, cout, patch,
             npix, in_size, out_size]() mutable {
              if (!out.has_grad()) return;
              std::vector<T> dcols(pointwise ? 0 : patch * npix);
              for (std::size_t i = 0; i < n; ++i) {
                auto g = as_matrix(out.grad().data() + i * out_size, cout, npix);
                const T* cp = pointwise ? x.ptr() + i * in_size : cols.data() + i * patch * npix;
                if (w.requires_grad()) {
                  as_matrix(w.grad().data(), cout, patch).noalias() += g * as_matrix(cp, patch, npix).transpose();
                }
                if (!x.requires_grad()) continue;
                T* gx = x.grad().data() + i * in_size;
                if (pointwise) {
                  as_matrix(gx, cin, npix).noalias() += as_matrix(w.ptr(), cout, patch).transpose() * g;
                } else {
                  as_matrix(dcols.data(), patch, npix).noalias() = as_matrix(w.ptr(), cout, patch).transpose() * g;
                  col2im_add(dcols.data(), cin, h, wd, kh, kw, stride, pad, ho, wo, gx);
                }
              }
            });
  return out;
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
  const Batched b = batched_dims(x.shape(), "depthwise_conv2d input");
  require_rank(w.shape(), 3, "depthwise_conv2d weight");
  const std::size_t c = b.c, h = b.h, wd = b.w;
  const std::size_t kh = w.extent(1), kw = w.extent(2);
  if (w.extent(0) != c) {
    throw DimensionError("depthwise_conv2d: weight " + shape_to_string(w.shape()) + " does not match " +
                         std::to_string(c) + " channels");
  }
  const std::size_t ho = conv_output_extent(h, kh, stride, pad);
  const std::size_t wo = conv_output_extent(wd, kw, stride, pad);
  const std::size_t planes = b.n * c;
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  const auto ih = static_cast<std::ptrdiff_t>(h), iw = static_cast<std::ptrdiff_t>(wd);

  Tensor<T> out(with_batch(b, c, ho, wo));
  for (std::size_t plane = 0; plane < planes; ++plane) {
    const T* xin = x.ptr() + plane * h * wd;
    const T* ker = w.ptr() + (plane % c) * kh * kw;
    T* o = out.ptr() + plane * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T acc{0};
        for (std::size_t i = 0; i < kh; ++i) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) - ipad;
          if (iy < 0 || iy >= ih) continue;
          for (std::size_t j = 0; j < kw; ++j) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) - ipad;
            if (ix < 0 || ix >= iw) continue;
            acc += ker[i * kw + j] * xin[iy * iw + ix];
          }
        }
        o[oy * wo + ox] = acc;
      }
    }
  }
  record_op(out, {&x, &w}, [x, w, out, c, planes, h, wd, kh, kw, ho, wo, stride, ipad, ih, iw]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    const bool need_x = x.requires_grad(), need_w = w.requires_grad();
    T* gx = need_x ? x.grad().data() : nullptr;
    T* gw = need_w ? w.grad().data() : nullptr;
    for (std::size_t plane = 0; plane < planes; ++plane) {
      const std::size_t ch = plane % c;
      const T* xin = x.ptr() + plane * h * wd;
      const T* ker = w.ptr() + ch * kh * kw;
      const T* go = g.data() + plane * ho * wo;
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const T gv = go[oy * wo + ox];
          for (std::size_t i = 0; i < kh; ++i) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) - ipad;
            if (iy < 0 || iy >= ih) continue;
            for (std::size_t j = 0; j < kw; ++j) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) - ipad;
              if (ix < 0 || ix >= iw) continue;
              if (need_w) gw[ch * kh * kw + i * kw + j] += gv * xin[iy * iw + ix];
              if (need_x) gx[plane * h * wd + static_cast<std::size_t>(iy * iw + ix)] += gv * ker[i * kw + j];
            }
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                     NormMode mode, T eps) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("batch_norm: expected [N,C,H,W] or [C,H,W], got " + shape_to_string(x.shape()));
  }
  if (!(eps > T{0})) throw ConfigError("batch_norm: eps must be positive");
  const std::size_t n = x.rank() == 4 ? x.extent(0) : 1;
  const std::size_t c = x.extent(x.rank() - 3);
  const std::size_t hw = x.extent(x.rank() - 2) * x.extent(x.rank() - 1);
  const Shape cshape{c};
  require_same_shape(gamma.shape(), cshape, "batch_norm gamma");
  require_same_shape(beta.shape(), cshape, "batch_norm beta");
  require_same_shape(state.running_mean.shape(), cshape, "batch_norm running_mean");
  require_same_shape(state.running_var.shape(), cshape, "batch_norm running_var");

  const std::size_t m = n * hw;
  std::vector<T> mu(c), inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (mode == NormMode::kTrain) {
      T s{0};
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.ptr() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      const T mean_c = s / static_cast<T>(m);
      T ss{0};
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.ptr() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - mean_c) * (p[i] - mean_c);
      }
      const T var_c = ss / static_cast<T>(m);
      mu[ch] = mean_c;
      inv_std[ch] = T{1} / std::sqrt(var_c + eps);
      const T unbiased = m > 1 ? ss / static_cast<T>(m - 1) : var_c;
      state.running_mean[ch] = (T{1} - state.momentum) * state.running_mean[ch] + state.momentum * mean_c;
      state.running_var[ch] = (T{1} - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
    } else {
      mu[ch] = state.running_mean[ch];
      inv_std[ch] = T{1} / std::sqrt(state.running_var[ch] + eps);
    }
  }

  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        xhat[base + i] = (x[base + i] - mu[ch]) * inv_std[ch];
        out[base + i] = gamma[ch] * xhat[base + i] + beta[ch];
      }
    }
  }

  record_op(out, {&x, &gamma, &beta},
            [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), mode, n, c, hw, m]() mutable {
              if (!out.has_grad()) return;
              auto g = out.grad();
              for (std::size_t ch = 0; ch < c; ++ch) {
                T sum_g{0}, sum_gx{0};
                for (std::size_t b = 0; b < n; ++b) {
                  const std::size_t base = (b * c + ch) * hw;
                  for (std::size_t i = 0; i < hw; ++i) {
                    sum_g += g[base + i];
                    sum_gx += g[base + i] * xhat[base + i];
                  }
                }
                if (gamma.requires_grad()) gamma.grad()[ch] += sum_gx;
                if (beta.requires_grad()) beta.grad()[ch] += sum_g;
                if (!x.requires_grad()) continue;
                auto gx = x.grad();
                const T k = gamma[ch] * inv_std[ch];
                for (std::size_t b = 0; b < n; ++b) {
                  const std::size_t base = (b * c + ch) * hw;
                  for (std::size_t i = 0; i < hw; ++i) {
                    if (mode == NormMode::kTrain) {
                      const T mm = static_cast<T>(m);
                      gx[base + i] += k * (g[base + i] - sum_g / mm - xhat[base + i] * sum_gx / mm);
                    } else {
                      gx[base + i] += k * g[base + i];
                    }
                  }
                }
              }
            });
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_rank(gamma.shape(), 1, "layer_norm gamma");
  if (!(eps > T{0})) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t d = gamma.extent(0);
  if (x.rank() == 0 || x.shape().back() != d) {
    throw DimensionError("layer_norm: last extent of " + shape_to_string(x.shape()) + " must equal " +
                         std::to_string(d));
  }
  require_same_shape(beta.shape(), gamma.shape(), "layer_norm beta");
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = x.ptr() + r * d;
    T s{0};
    for (std::size_t j = 0; j < d; ++j) s += p[j];
    const T mu = s / static_cast<T>(d);
    T ss{0};
    for (std::size_t j = 0; j < d; ++j) ss += (p[j] - mu) * (p[j] - mu);
    inv_std[r] = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (p[j] - mu) * inv_std[r];
      out[r * d + j] = gamma[j] * xhat[r * d + j] + beta[j];
    }
  }
  record_op(out, {&x, &gamma, &beta},
            [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d]() mutable {
              if (!out.has_grad()) return;
              auto g = out.grad();
              const bool need_x = x.requires_grad();
              T* gx = need_x ? x.grad().data() : nullptr;
              T* gg = gamma.requires_grad() ? gamma.grad().data() : nullptr;
              T* gb = beta.requires_grad() ? beta.grad().data() : nullptr;
              std::vector<T> dxhat(d);
              for (std::size_t r = 0; r < rows; ++r) {
                T sum_d{0}, sum_dx{0};
                for (std::size_t j = 0; j < d; ++j) {
                  const T gv = g[r * d + j];
                  if (gg) gg[j] += gv * xhat[r * d + j];
                  if (gb) gb[j] += gv;
                  dxhat[j] = gv * gamma[j];
                  sum_d += dxhat[j];
                  sum_dx += dxhat[j] * xhat[r * d + j];
                }
                if (!need_x) continue;
                const T dd = static_cast<T>(d);
                for (std::size_t j = 0; j < d; ++j) {
                  gx[r * d + j] += inv_std[r] * (dxhat[j] - sum_d / dd - xhat[r * d + j] * sum_dx / dd);
                }
              }
            });
  return out;
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = x[i];
    switch (kind) {
      case Activation::kRelu:
        out[i] = v > T{0} ? v : T{0};
        break;
      case Activation::kGelu:
        out[i] = gelu_value(v);
        break;
      case Activation::kSwish:
        out[i] = v * sigmoid_value(v);
        break;
    }
  }
  record_op(out, {&x}, [x, out, kind]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T v = x[i];
      T d{0};
      switch (kind) {
        case Activation::kRelu:
          d = v > T{0} ? T{1} : T{0};
          break;
        case Activation::kGelu:
          d = gelu_derivative(v);
          break;
        case Activation::kSwish: {
          const T s = sigmoid_value(v);
          d = s + v * s * (T{1} - s);
          break;
        }
      }
      gx[i] += g[i] * d;
    }
  });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = sigmoid_value(x[i]);
  record_op(out, {&x}, [x, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * out[i] * (T{1} - out[i]);
  });
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) throw DimensionError("softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = x.ptr() + r * n;
    T* o = out.ptr() + r * n;
    const T mx = *std::max_element(p, p + n);
    T total{0};
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(p[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  record_op(out, {&x}, [x, out, rows, n]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * out[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += out[r * n + j] * (g[r * n + j] - dot);
    }
  });
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Batched b = batched_dims(x.shape(), "global_avg_pool");
  const std::size_t planes = b.n * b.c, hw = b.h * b.w;
  Tensor<T> out(b.batched ? Shape{b.n, b.c} : Shape{b.c});
  for (std::size_t p = 0; p < planes; ++p) {
    T s{0};
    for (std::size_t i = 0; i < hw; ++i) s += x[p * hw + i];
    out[p] = s / static_cast<T>(hw);
  }
  record_op(out, {&x}, [x, out, planes, hw]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t p = 0; p < planes; ++p) {
      const T v = g[p] / static_cast<T>(hw);
      for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += v;
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
  const Batched b = batched_dims(x.shape(), "scale_channels");
  require_same_shape(s.shape(), b.batched ? Shape{b.n, b.c} : Shape{b.c}, "scale_channels");
  const std::size_t planes = b.n * b.c, hw = b.h * b.w;
  Tensor<T> out(x.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < hw; ++i) out[p * hw + i] = x[p * hw + i] * s[p];
  }
  record_op(out, {&x, &s}, [x, s, out, planes, hw]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    const bool need_x = x.requires_grad(), need_s = s.requires_grad();
    T* gx = need_x ? x.grad().data() : nullptr;
    T* gs = need_s ? s.grad().data() : nullptr;
    for (std::size_t p = 0; p < planes; ++p) {
      T acc{0};
      for (std::size_t i = 0; i < hw; ++i) {
        if (gx) gx[p * hw + i] += g[p * hw + i] * s[p];
        acc += g[p * hw + i] * x[p * hw + i];
      }
      if (gs) gs[p] += acc;
    }
  });
  return out;
}

template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& p, const std::vector<T>& targets, T eps) {
  if (p.numel() != targets.size()) {
    throw DimensionError("binary_cross_entropy: " + std::to_string(p.numel()) + " probabilities vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = targets.size();
  std::vector<T> clamped(n);
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    clamped[i] = std::clamp(p[i], eps, T{1} - eps);
    const T y = targets[i];
    total -= y * std::log(clamped[i]) + (T{1} - y) * std::log(T{1} - clamped[i]);
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(n));
  record_op(out, {&p}, [p, out, targets, clamped = std::move(clamped), n]() mutable {
    if (!out.has_grad()) return;
    const T g = out.grad()[0] / static_cast<T>(n);
    auto gp = p.grad();
    for (std::size_t i = 0; i < n; ++i) {
      const T y = targets[i], q = clamped[i];
      gp[i] += g * (-y / q + (T{1} - y) / (T{1} - q));
    }
  });
  return out;
}

#define DEEPFUSE_INSTANTIATE_OPS(T)                                                                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                                               \
  template Tensor<T> sine(const Tensor<T>&);                                                                   \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> transpose(const Tensor<T>&);                                                              \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                         \
  template Tensor<T> concat_rows(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                                   \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                                   \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                               \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);                     \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);           \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&,      \
                                NormMode, T);                                                                  \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                      \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                                 \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                \
  template Tensor<T> softmax(const Tensor<T>&);                                                                \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                        \
  template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> binary_cross_entropy(const Tensor<T>&, const std::vector<T>&, T);

DEEPFUSE_INSTANTIATE_OPS(float)
DEEPFUSE_INSTANTIATE_OPS(double)

#undef DEEPFUSE_INSTANTIATE_OPS

}  // namespace deepfuse
