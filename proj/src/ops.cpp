#include "msn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace msn::ops {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t n, h, w, ci;
  std::size_t kh, kw, co;
  std::size_t oh, ow;
  std::size_t stride, pad;

  std::size_t patch() const { return kh * kw * ci; }
  std::size_t pixels() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

ConvGeometry geometry(const Shape& input, const Shape& kernel, std::size_t stride, std::size_t pad) {
  const Shape out = conv2d_output_shape(input, kernel, stride, pad);
  return {input[0], input[1], input[2], input[3], kernel[0], kernel[1], kernel[3], out[1], out[2], stride, pad};
}

// Gathers one sample's receptive fields into a (pixels x patch) matrix.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  for (std::size_t oy = 0; oy < g.oh; ++oy) {
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      T* row = cols + (oy * g.ow + ox) * g.patch();
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
          T* dst = row + (ky * g.kw + kx) * g.ci;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w)) {
            std::fill(dst, dst + g.ci, T(0));
          } else {
            const T* src = image + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.ci;
            std::copy(src, src + g.ci, dst);
          }
        }
      }
    }
  }
}

// Scatter-adds a (pixels x patch) gradient back onto one sample's image.
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* image) {
  for (std::size_t oy = 0; oy < g.oh; ++oy) {
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      const T* row = cols + (oy * g.ow + ox) * g.patch();
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
        if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
          if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
          const T* src = row + (ky * g.kw + kx) * g.ci;
          T* dst = image + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.ci;
          for (std::size_t c = 0; c < g.ci; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " + s.str());
  }
}

}  // namespace

Shape conv2d_output_shape(const Shape& input, const Shape& kernel, std::size_t stride, std::size_t pad) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (input[3] != kernel[2]) {
    throw ShapeError("conv2d: input " + input.str() + " has " + std::to_string(input[3]) +
                     " channels but kernel " + kernel.str() + " expects " + std::to_string(kernel[2]));
  }
  const std::size_t ph = input[1] + 2 * pad;
  const std::size_t pw = input[2] + 2 * pad;
  if (ph < kernel[0] || pw < kernel[1]) {
    throw ShapeError("conv2d: kernel " + kernel.str() + " larger than padded input " + input.str());
  }
  return Shape{input[0], (ph - kernel[0]) / stride + 1, (pw - kernel[1]) / stride + 1, kernel[3]};
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                      std::size_t stride, std::size_t pad) {
  const ConvGeometry g = geometry(input.shape(), kernel.shape(), stride, pad);
  if (bias.size() != g.co) {
    throw ShapeError("conv2d: bias " + bias.shape().str() + " does not match kernel " + kernel.shape().str());
  }
  BasicTensor<T> output(Shape{g.n, g.oh, g.ow, g.co});
  ConstMatrixMap<T> k(kernel.data(), g.patch(), g.co);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data(), g.co);
  std::vector<T> cols(g.pointwise() ? 0 : g.pixels() * g.patch());

  for (std::size_t n = 0; n < g.n; ++n) {
    const T* image = input.data() + n * g.h * g.w * g.ci;
    const T* patches = image;
    if (!g.pointwise()) {
      im2col(image, g, cols.data());
      patches = cols.data();
    }
    ConstMatrixMap<T> x(patches, g.pixels(), g.patch());
    MatrixMap<T> y(output.data() + n * g.pixels() * g.co, g.pixels(), g.co);
    y.noalias() = x * k;
    y.rowwise() += b;
  }
  return output;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                               const BasicTensor<T>& grad_output, std::size_t stride, std::size_t pad) {
  const ConvGeometry g = geometry(input.shape(), kernel.shape(), stride, pad);
  require_same_shape(grad_output.shape(), Shape{g.n, g.oh, g.ow, g.co}, "conv2d_backward grad_output");

  Conv2dGrads<T> grads{BasicTensor<T>(input.shape()), BasicTensor<T>(kernel.shape()), BasicTensor<T>(Shape{g.co})};
  ConstMatrixMap<T> k(kernel.data(), g.patch(), g.co);
  MatrixMap<T> dk(grads.kernel.data(), g.patch(), g.co);
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(grads.bias.data(), g.co);
  std::vector<T> cols(g.pointwise() ? 0 : g.pixels() * g.patch());
  std::vector<T> dcols(g.pointwise() ? 0 : g.pixels() * g.patch());

  for (std::size_t n = 0; n < g.n; ++n) {
    const T* image = input.data() + n * g.h * g.w * g.ci;
    T* dimage = grads.input.data() + n * g.h * g.w * g.ci;
    ConstMatrixMap<T> dy(grad_output.data() + n * g.pixels() * g.co, g.pixels(), g.co);
    db += dy.colwise().sum();
    if (g.pointwise()) {
      ConstMatrixMap<T> x(image, g.pixels(), g.patch());
      dk.noalias() += x.transpose() * dy;
      MatrixMap<T> dx(dimage, g.pixels(), g.patch());
      dx.noalias() = dy * k.transpose();
    } else {
      im2col(image, g, cols.data());
      ConstMatrixMap<T> x(cols.data(), g.pixels(), g.patch());
      dk.noalias() += x.transpose() * dy;
      MatrixMap<T> dx(dcols.data(), g.pixels(), g.patch());
      dx.noalias() = dy * k.transpose();
      col2im(dcols.data(), g, dimage);
    }
  }
  return grads;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output) {
  require_same_shape(input.shape(), grad_output.shape(), "relu_backward");
  BasicTensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? grad_output[i] : T(0);
  return out;
}

template <typename T>
MaxPoolResult<T> max_pool2(const BasicTensor<T>& input) {
  const Shape& s = input.shape();
  require_rank(s, 4, "max_pool2 input");
  if (s[1] % 2 != 0 || s[2] % 2 != 0) {
    throw ShapeError("max_pool2: spatial extents must be even, got " + s.str());
  }
  const std::size_t n = s[0], h = s[1], w = s[2], c = s[3];
  MaxPoolResult<T> result{BasicTensor<T>(Shape{n, h / 2, w / 2, c}), {}};
  result.argmax.resize(result.output.size());
  std::size_t o = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t y = 0; y < h / 2; ++y) {
      for (std::size_t x = 0; x < w / 2; ++x) {
        for (std::size_t ch = 0; ch < c; ++ch, ++o) {
          std::size_t best = ((b * h + 2 * y) * w + 2 * x) * c + ch;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((b * h + 2 * y + dy) * w + 2 * x + dx) * c + ch;
              if (input[idx] > input[best]) best = idx;
            }
          }
          result.output[o] = input[best];
          result.argmax[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return result;
}

template <typename T>
BasicTensor<T> max_pool2_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                                  const BasicTensor<T>& grad_output) {
  if (argmax.size() != grad_output.size()) {
    throw ShapeError("max_pool2_backward: argmax/grad_output size mismatch");
  }
  BasicTensor<T> grad(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) grad[argmax[o]] += grad_output[o];
  return grad;
}

template <typename T>
BasicTensor<T> global_average_pool(const BasicTensor<T>& input) {
  const Shape& s = input.shape();
  require_rank(s, 4, "global_average_pool input");
  const std::size_t n = s[0], area = s[1] * s[2], c = s[3];
  BasicTensor<T> out(Shape{n, c});
  for (std::size_t b = 0; b < n; ++b) {
    const T* base = input.data() + b * area * c;
    for (std::size_t p = 0; p < area; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) out[b * c + ch] += base[p * c + ch];
    }
    for (std::size_t ch = 0; ch < c; ++ch) out[b * c + ch] /= static_cast<T>(area);
  }
  return out;
}

template <typename T>
BasicTensor<T> global_average_pool_backward(const Shape& input_shape, const BasicTensor<T>& grad_output) {
  require_rank(input_shape, 4, "global_average_pool_backward input");
  const std::size_t n = input_shape[0], area = input_shape[1] * input_shape[2], c = input_shape[3];
  require_same_shape(grad_output.shape(), Shape{n, c}, "global_average_pool_backward");
  BasicTensor<T> grad(input_shape);
  const T scale = T(1) / static_cast<T>(area);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < area; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) grad[(b * area + p) * c + ch] = grad_output[b * c + ch] * scale;
    }
  }
  return grad;
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  require_rank(input.shape(), 2, "linear input");
  require_rank(weight.shape(), 2, "linear weight");
  if (input.shape()[1] != weight.shape()[0]) {
    throw ShapeError("linear: input " + input.shape().str() + " incompatible with weight " + weight.shape().str());
  }
  const std::size_t n = input.shape()[0], d = weight.shape()[0], c = weight.shape()[1];
  if (bias.size() != c) {
    throw ShapeError("linear: bias " + bias.shape().str() + " incompatible with weight " + weight.shape().str());
  }
  BasicTensor<T> out(Shape{n, c});
  MatrixMap<T> y(out.data(), n, c);
  y.noalias() = ConstMatrixMap<T>(input.data(), n, d) * ConstMatrixMap<T>(weight.data(), d, c);
  y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data(), c);
  return out;
}

template <typename T>
LinearGrads<T> linear_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                               const BasicTensor<T>& grad_output) {
  const std::size_t n = input.shape()[0], d = weight.shape()[0], c = weight.shape()[1];
  require_same_shape(grad_output.shape(), Shape{n, c}, "linear_backward grad_output");
  LinearGrads<T> grads{BasicTensor<T>(input.shape()), BasicTensor<T>(weight.shape()), BasicTensor<T>(Shape{c})};
  ConstMatrixMap<T> x(input.data(), n, d);
  ConstMatrixMap<T> w(weight.data(), d, c);
  ConstMatrixMap<T> dy(grad_output.data(), n, c);
  MatrixMap<T>(grads.input.data(), n, d).noalias() = dy * w.transpose();
  MatrixMap<T>(grads.weight.data(), d, c).noalias() = x.transpose() * dy;
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(grads.bias.data(), c) = dy.colwise().sum();
  return grads;
}

template <typename T>
BatchNormResult<T> batch_norm(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                              BasicTensor<T>& running_mean, BasicTensor<T>& running_var, Mode mode,
                              const BatchNormOptions& options) {
  const Shape& s = input.shape();
  const std::size_t c = s[s.rank() - 1];
  for (const BasicTensor<T>* p : std::initializer_list<const BasicTensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->size() != c) {
      throw ShapeError("batch_norm: parameter " + p->shape().str() + " does not match channels of " + s.str());
    }
  }
  const std::size_t rows = input.size() / c;
  BatchNormResult<T> result{BasicTensor<T>(s), {BasicTensor<T>(s), std::vector<T>(c), mode}};

  std::vector<T> mean(c), var(c);
  if (mode == Mode::train) {
    std::vector<double> sum(c, 0.0), sq(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t ch = 0; ch < c; ++ch) sum[ch] += input[r * c + ch];
    }
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] = static_cast<T>(sum[ch] / static_cast<double>(rows));
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double d = static_cast<double>(input[r * c + ch]) - static_cast<double>(mean[ch]);
        sq[ch] += d * d;
      }
    }
    const T keep = static_cast<T>(options.momentum);
    for (std::size_t ch = 0; ch < c; ++ch) {
      var[ch] = static_cast<T>(sq[ch] / static_cast<double>(rows));
      running_mean[ch] = keep * running_mean[ch] + (T(1) - keep) * mean[ch];
      running_var[ch] = keep * running_var[ch] + (T(1) - keep) * var[ch];
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      var[ch] = running_var[ch];
    }
  }

  for (std::size_t ch = 0; ch < c; ++ch) {
    result.cache.inv_std[ch] = T(1) / std::sqrt(var[ch] + static_cast<T>(options.eps));
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = r * c + ch;
      const T xhat = (input[i] - mean[ch]) * result.cache.inv_std[ch];
      result.cache.normalized[i] = xhat;
      result.output[i] = gamma[ch] * xhat + beta[ch];
    }
  }
  return result;
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>& cache, const BasicTensor<T>& gamma,
                                      const BasicTensor<T>& grad_output) {
  const Shape& s = cache.normalized.shape();
  require_same_shape(s, grad_output.shape(), "batch_norm_backward");
  const std::size_t c = gamma.size();
  const std::size_t rows = grad_output.size() / c;
  BatchNormGrads<T> grads{BasicTensor<T>(s), BasicTensor<T>(Shape{c}), BasicTensor<T>(Shape{c})};

  std::vector<T> sum_dy(c, T(0)), sum_dy_xhat(c, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = r * c + ch;
      sum_dy[ch] += grad_output[i];
      sum_dy_xhat[ch] += grad_output[i] * cache.normalized[i];
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    grads.beta[ch] = sum_dy[ch];
    grads.gamma[ch] = sum_dy_xhat[ch];
  }

  if (cache.mode == Mode::infer) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        grads.input[r * c + ch] = grad_output[r * c + ch] * gamma[ch] * cache.inv_std[ch];
      }
    }
    return grads;
  }

  const T inv_rows = T(1) / static_cast<T>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = r * c + ch;
      grads.input[i] = gamma[ch] * cache.inv_std[ch] *
                       (grad_output[i] - sum_dy[ch] * inv_rows - cache.normalized[i] * sum_dy_xhat[ch] * inv_rows);
    }
  }
  return grads;
}

template <typename T>
BasicTensor<T> residual_add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "residual_add");
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

#define MSN_INSTANTIATE_OPS(T)                                                                                      \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, std::size_t, \
                                 std::size_t);                                                                      \
  template Conv2dGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,      \
                                          std::size_t, std::size_t);                                                \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                              \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                              \
  template MaxPoolResult<T> max_pool2(const BasicTensor<T>&);                                                       \
  template BasicTensor<T> max_pool2_backward(const Shape&, const std::vector<std::uint32_t>&,                       \
                                             const BasicTensor<T>&);                                                \
  template BasicTensor<T> global_average_pool(const BasicTensor<T>&);                                               \
  template BasicTensor<T> global_average_pool_backward(const Shape&, const BasicTensor<T>&);                        \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);              \
  template LinearGrads<T> linear_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);     \
  template BatchNormResult<T> batch_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,       \
                                         BasicTensor<T>&, BasicTensor<T>&, Mode, const BatchNormOptions&);          \
  template BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>&, const BasicTensor<T>&,                   \
                                                 const BasicTensor<T>&);                                            \
  template BasicTensor<T> residual_add(const BasicTensor<T>&, const BasicTensor<T>&);

MSN_INSTANTIATE_OPS(float)
MSN_INSTANTIATE_OPS(double)

#undef MSN_INSTANTIATE_OPS

}  // namespace msn::ops
