#pragma once

#include <cstdint>
#include <vector>

#include "msn/tensor.hpp"

// Forward and backward kernels for the layers the networks are built from.
// Every function is pure: inputs are never modified (batch_norm's running
// statistics are the one explicit in/out parameter).
//
// Layout: activations NHWC, convolution kernels (Kh, Kw, Ci, Co).

namespace msn::ops {

template <typename T>
struct Conv2dGrads {
  BasicTensor<T> input;
  BasicTensor<T> kernel;
  BasicTensor<T> bias;
};

/// Output shape of conv2d; throws ShapeError on mismatch or empty output.
Shape conv2d_output_shape(const Shape& input, const Shape& kernel, std::size_t stride, std::size_t pad);

/// Cross-correlation with zero padding. bias has length Co.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                      std::size_t stride, std::size_t pad);

template <typename T>
Conv2dGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                               const BasicTensor<T>& grad_output, std::size_t stride, std::size_t pad);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

/// Passes grad_output where input > 0; zero at exactly 0.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output);

template <typename T>
struct MaxPoolResult {
  BasicTensor<T> output;
  /// Flat input index of each output's maximum (first in row-major window order on ties).
  std::vector<std::uint32_t> argmax;
};

/// 2x2 window, stride 2. H and W must be even.
template <typename T>
MaxPoolResult<T> max_pool2(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> max_pool2_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                                  const BasicTensor<T>& grad_output);

/// (N, H, W, C) -> (N, C) spatial mean.
template <typename T>
BasicTensor<T> global_average_pool(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> global_average_pool_backward(const Shape& input_shape, const BasicTensor<T>& grad_output);

template <typename T>
struct LinearGrads {
  BasicTensor<T> input;
  BasicTensor<T> weight;
  BasicTensor<T> bias;
};

/// (N, d) x (d, c) + bias(c) -> (N, c).
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

template <typename T>
LinearGrads<T> linear_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                               const BasicTensor<T>& grad_output);

enum class Mode { train, infer };

struct BatchNormOptions {
  double eps = 1e-5;
  /// running <- momentum * running + (1 - momentum) * batch statistic.
  double momentum = 0.9;
};

template <typename T>
struct BatchNormCache {
  BasicTensor<T> normalized;  // x-hat
  std::vector<T> inv_std;     // per channel
  Mode mode = Mode::train;
};

template <typename T>
struct BatchNormResult {
  BasicTensor<T> output;
  BatchNormCache<T> cache;
};

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

/// Per-channel normalization over every axis except the last.
/// Train mode uses batch statistics (biased variance) and updates the running
/// statistics in place; infer mode reads them.
template <typename T>
BatchNormResult<T> batch_norm(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                              BasicTensor<T>& running_mean, BasicTensor<T>& running_var, Mode mode,
                              const BatchNormOptions& options = {});

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>& cache, const BasicTensor<T>& gamma,
                                      const BasicTensor<T>& grad_output);

template <typename T>
BasicTensor<T> residual_add(const BasicTensor<T>& a, const BasicTensor<T>& b);

}  // namespace msn::ops
