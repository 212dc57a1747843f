#pragma once

#include "msac/nn/tensor.hpp"

#include <random>

namespace msac::nn {

/// Same-padded, stride-1 2-D convolution (odd kernels only). Implemented as
/// im2col + GEMM, processed in row chunks to bound the scratch buffer.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel_h, int kernel_w, bool bias);

  Tensor forward(const Tensor& x) const;
  /// Accumulates weight/bias gradients and returns dL/dx.
  Tensor backward(const Tensor& x, const Tensor& dy);
  /// Input gradient only (frozen weights).
  Tensor backward_input(const Tensor& x, const Tensor& dy) const;

  void init(std::mt19937_64& rng);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel_h() const { return kh_; }
  int kernel_w() const { return kw_; }
  bool has_bias() const { return has_bias_; }

  Parameter weight;  // [out x in*kh*kw]
  Parameter bias;    // [out], empty when has_bias() is false

 private:
  Tensor backward_impl(const Tensor& x, const Tensor& dy, bool accumulate);

  int in_ = 0, out_ = 0, kh_ = 1, kw_ = 1;
  bool has_bias_ = false;
};

/// Batch normalization over every axis except the feature/channel axis.
/// Works on NCHW tensors (per channel) and on [N x D] matrices (per column).
class BatchNorm {
 public:
  struct Cache {
    Eigen::VectorXf mean;
    Eigen::VectorXf inv_std;
    std::vector<float> normalized;  // x-hat, same layout as the input
    bool training = false;
    Eigen::VectorXf batch_var_unbiased;
    int count = 0;
  };

  BatchNorm() = default;
  explicit BatchNorm(int features, float momentum = 0.1f, float eps = 1e-5f);

  Tensor forward(const Tensor& x, bool training, Cache& cache) const;
  RowMatrix forward(const RowMatrix& x, bool training, Cache& cache) const;
  Tensor backward(const Tensor& dy, const Cache& cache);
  RowMatrix backward(const RowMatrix& dy, const Cache& cache);
  Tensor backward_input(const Tensor& dy, const Cache& cache) const;
  RowMatrix backward_input(const RowMatrix& dy, const Cache& cache) const;

  /// Folds the batch statistics of a training-mode forward into the running estimates.
  void update_running(const Cache& cache);

  int features() const { return static_cast<int>(gamma.numel()); }

  Parameter gamma;
  Parameter beta;
  Eigen::VectorXf running_mean;
  Eigen::VectorXf running_var;

 private:
  // Views the data as [groups x features x inner]; for matrices inner = 1.
  void forward_impl(const float* x, float* y, int groups, int inner, bool training, Cache& cache) const;
  void backward_impl(const float* dy, float* dx, int groups, int inner, const Cache& cache, bool accumulate);

  float momentum_ = 0.1f;
  float eps_ = 1e-5f;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features, bool bias);

  RowMatrix forward(const RowMatrix& x) const;
  RowMatrix backward(const RowMatrix& x, const RowMatrix& dy);
  RowMatrix backward_input(const RowMatrix& dy) const;
  void init(std::mt19937_64& rng);

  int in_features() const { return in_; }
  int out_features() const { return out_; }

  Parameter weight;  // [out x in]
  Parameter bias;    // [out]

 private:
  int in_ = 0, out_ = 0;
  bool has_bias_ = false;
};

/// 2x2 average pooling, stride 2, ceil mode. Partial windows at the border
/// average over their valid cells only.
Tensor avg_pool2x2(const Tensor& x);
Tensor avg_pool2x2_backward(const Tensor& x_shape, const Tensor& dy);

void relu_inplace(Tensor& x);
void relu_backward_inplace(const Tensor& y, Tensor& dy);
void leaky_relu_inplace(RowMatrix& x, float slope);
void leaky_relu_backward_inplace(const RowMatrix& y, RowMatrix& dy, float slope);

Tensor concat_channels(const std::vector<Tensor>& parts);
std::vector<Tensor> split_channels(const Tensor& x, const std::vector<int>& channels);

/// Identity on the forward pass; scales the incoming gradient by -lambda on
/// the backward pass.
class GradientReversal {
 public:
  explicit GradientReversal(float lambda = 1.0f);
  const RowMatrix& forward(const RowMatrix& x) const { return x; }
  RowMatrix backward(const RowMatrix& dy) const { return -lambda_ * dy; }
  float lambda() const { return lambda_; }

 private:
  float lambda_;
};

}  // namespace msac::nn
