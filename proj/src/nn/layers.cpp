#include "msac/nn/layers.hpp"

#include "msac/error.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace msac::nn {

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

Parameter::Parameter(std::vector<int> shape_) : shape(std::move(shape_)) {
  Eigen::Index total = 1;
  for (int d : shape) total *= d;
  value = Eigen::VectorXf::Zero(total);
  grad = Eigen::VectorXf::Zero(total);
}

MatrixMap Parameter::matrix() {
  const Eigen::Index rows = shape.empty() ? 1 : shape[0];
  return {value.data(), rows, value.size() / rows};
}
ConstMatrixMap Parameter::matrix() const {
  const Eigen::Index rows = shape.empty() ? 1 : shape[0];
  return {value.data(), rows, value.size() / rows};
}
MatrixMap Parameter::grad_matrix() {
  const Eigen::Index rows = shape.empty() ? 1 : shape[0];
  return {grad.data(), rows, grad.size() / rows};
}

// --- Conv2d ---------------------------------------------------------------------

namespace {

constexpr Eigen::Index kMaxScratch = 1 << 22;  // floats per im2col chunk

int rows_per_chunk(int patch, int h, int w) {
  const Eigen::Index per_row = static_cast<Eigen::Index>(patch) * w;
  return static_cast<int>(std::clamp<Eigen::Index>(kMaxScratch / std::max<Eigen::Index>(per_row, 1), 1, h));
}

// Fills col[(c*kh+dy)*kw+dx, (i-i0)*w + j] = x[c, i+dy-ph, j+dx-pw] (zero outside).
void im2col(const float* x, int channels, int h, int w, int kh, int kw, int i0, int i1, RowMatrix& col) {
  const int ph = kh / 2, pw = kw / 2;
  const int positions = (i1 - i0) * w;
  col.resize(static_cast<Eigen::Index>(channels) * kh * kw, positions);
  for (int c = 0; c < channels; ++c) {
    const float* plane = x + static_cast<std::size_t>(c) * h * w;
    for (int dy = 0; dy < kh; ++dy) {
      for (int dx = 0; dx < kw; ++dx) {
        float* row = col.data() + ((static_cast<Eigen::Index>(c) * kh + dy) * kw + dx) * positions;
        for (int i = i0; i < i1; ++i) {
          float* dst = row + static_cast<std::ptrdiff_t>(i - i0) * w;
          const int si = i + dy - ph;
          if (si < 0 || si >= h) {
            std::fill(dst, dst + w, 0.0f);
            continue;
          }
          const float* src = plane + static_cast<std::ptrdiff_t>(si) * w;
          const int shift = dx - pw;
          const int j_lo = std::min(w, std::max(0, -shift)), j_hi = std::max(j_lo, std::min(w, w - shift));
          std::fill(dst, dst + j_lo, 0.0f);
          std::copy(src + j_lo + shift, src + j_hi + shift, dst + j_lo);
          std::fill(dst + j_hi, dst + w, 0.0f);
        }
      }
    }
  }
}

void col2im_add(const RowMatrix& col, int channels, int h, int w, int kh, int kw, int i0, int i1, float* dx) {
  const int ph = kh / 2, pw = kw / 2;
  const int positions = (i1 - i0) * w;
  for (int c = 0; c < channels; ++c) {
    float* plane = dx + static_cast<std::size_t>(c) * h * w;
    for (int dy = 0; dy < kh; ++dy) {
      for (int dxk = 0; dxk < kw; ++dxk) {
        const float* row = col.data() + ((static_cast<Eigen::Index>(c) * kh + dy) * kw + dxk) * positions;
        for (int i = i0; i < i1; ++i) {
          const int si = i + dy - ph;
          if (si < 0 || si >= h) continue;
          const float* src = row + static_cast<std::ptrdiff_t>(i - i0) * w;
          float* dst = plane + static_cast<std::ptrdiff_t>(si) * w;
          const int shift = dxk - pw;
          const int j_lo = std::min(w, std::max(0, -shift)), j_hi = std::max(j_lo, std::min(w, w - shift));
          for (int j = j_lo; j < j_hi; ++j) dst[j + shift] += src[j];
        }
      }
    }
  }
}

float fan_in_std(int fan_in) { return std::sqrt(2.0f / static_cast<float>(std::max(fan_in, 1))); }

}  // namespace

Conv2d::Conv2d(int in_channels, int out_channels, int kernel_h, int kernel_w, bool bias)
    : weight({out_channels, in_channels * kernel_h * kernel_w}),
      in_(in_channels),
      out_(out_channels),
      kh_(kernel_h),
      kw_(kernel_w),
      has_bias_(bias) {
  if (kernel_h % 2 == 0 || kernel_w % 2 == 0) throw config_error("same-padded convolution needs odd kernels");
  if (bias) this->bias = Parameter({out_channels});
}

void Conv2d::init(std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, fan_in_std(in_ * kh_ * kw_));
  for (Eigen::Index i = 0; i < weight.numel(); ++i) weight.value[i] = dist(rng);
  if (has_bias_) bias.value.setZero();
}

Tensor Conv2d::forward(const Tensor& x) const {
  if (x.c != in_)
    throw config_error("conv expects " + std::to_string(in_) + " input channels, got " + std::to_string(x.c));
  Tensor y(x.n, out_, x.h, x.w);
  const ConstMatrixMap wm = weight.matrix();
  const int patch = in_ * kh_ * kw_;
  const bool pointwise = kh_ == 1 && kw_ == 1;
  const int chunk = rows_per_chunk(patch, x.h, x.w);
  RowMatrix col;
  for (int s = 0; s < x.n; ++s) {
    MatrixMap ys = y.sample(s);
    if (pointwise) {
      ys.noalias() = wm * x.sample(s);
    } else {
      const float* xs = x.data.data() + s * x.sample_stride();
      for (int i0 = 0; i0 < x.h; i0 += chunk) {
        const int i1 = std::min(x.h, i0 + chunk);
        im2col(xs, in_, x.h, x.w, kh_, kw_, i0, i1, col);
        ys.middleCols(static_cast<Eigen::Index>(i0) * x.w, col.cols()).noalias() = wm * col;
      }
    }
    if (has_bias_) ys.colwise() += bias.value;
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& dy) { return backward_impl(x, dy, true); }

Tensor Conv2d::backward_input(const Tensor& x, const Tensor& dy) const {
  return const_cast<Conv2d*>(this)->backward_impl(x, dy, false);
}

Tensor Conv2d::backward_impl(const Tensor& x, const Tensor& dy, bool accumulate) {
  Tensor dx(x.n, x.c, x.h, x.w);
  const ConstMatrixMap wm = std::as_const(weight).matrix();
  MatrixMap gw = weight.grad_matrix();
  const int patch = in_ * kh_ * kw_;
  const bool pointwise = kh_ == 1 && kw_ == 1;
  const int chunk = rows_per_chunk(patch, x.h, x.w);
  RowMatrix col, dcol;
  for (int s = 0; s < x.n; ++s) {
    const ConstMatrixMap dys = dy.sample(s);
    if (accumulate && has_bias_) bias.grad += dys.rowwise().sum();
    if (pointwise) {
      if (accumulate) gw.noalias() += dys * x.sample(s).transpose();
      dx.sample(s).noalias() = wm.transpose() * dys;
      continue;
    }
    const float* xs = x.data.data() + s * x.sample_stride();
    float* dxs = dx.data.data() + s * dx.sample_stride();
    for (int i0 = 0; i0 < x.h; i0 += chunk) {
      const int i1 = std::min(x.h, i0 + chunk);
      const auto block = dys.middleCols(static_cast<Eigen::Index>(i0) * x.w,
                                        static_cast<Eigen::Index>(i1 - i0) * x.w);
      if (accumulate) {
        im2col(xs, in_, x.h, x.w, kh_, kw_, i0, i1, col);
        gw.noalias() += block * col.transpose();
      }
      dcol.noalias() = wm.transpose() * block;
      col2im_add(dcol, in_, x.h, x.w, kh_, kw_, i0, i1, dxs);
    }
  }
  return dx;
}

// --- BatchNorm ------------------------------------------------------------------

BatchNorm::BatchNorm(int features, float momentum, float eps)
    : gamma({features}),
      beta({features}),
      running_mean(Eigen::VectorXf::Zero(features)),
      running_var(Eigen::VectorXf::Ones(features)),
      momentum_(momentum),
      eps_(eps) {
  gamma.value.setOnes();
}

void BatchNorm::forward_impl(const float* x, float* y, int groups, int inner, bool training, Cache& cache) const {
  const int f = features();
  const std::size_t stride = static_cast<std::size_t>(f) * inner;
  cache.training = training;
  cache.count = groups * inner;
  cache.mean.resize(f);
  cache.inv_std.resize(f);
  cache.normalized.resize(static_cast<std::size_t>(groups) * stride);
  if (training) cache.batch_var_unbiased.resize(f);

  for (int c = 0; c < f; ++c) {
    double mean, var;
    if (training) {
      double sum = 0.0;
      for (int g = 0; g < groups; ++g) {
        const float* p = x + g * stride + static_cast<std::size_t>(c) * inner;
        for (int k = 0; k < inner; ++k) sum += p[k];
      }
      mean = sum / cache.count;
      double sq = 0.0;
      for (int g = 0; g < groups; ++g) {
        const float* p = x + g * stride + static_cast<std::size_t>(c) * inner;
        for (int k = 0; k < inner; ++k) sq += (p[k] - mean) * (p[k] - mean);
      }
      var = sq / cache.count;
      cache.batch_var_unbiased[c] = static_cast<float>(cache.count > 1 ? sq / (cache.count - 1) : 0.0);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const float inv_std = static_cast<float>(1.0 / std::sqrt(var + eps_));
    const float m = static_cast<float>(mean);
    cache.mean[c] = m;
    cache.inv_std[c] = inv_std;
    const float gm = gamma.value[c], bt = beta.value[c];
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = g * stride + static_cast<std::size_t>(c) * inner;
      for (int k = 0; k < inner; ++k) {
        const float xhat = (x[off + k] - m) * inv_std;
        cache.normalized[off + k] = xhat;
        y[off + k] = gm * xhat + bt;
      }
    }
  }
}

void BatchNorm::backward_impl(const float* dy, float* dx, int groups, int inner, const Cache& cache,
                              bool accumulate) {
  const int f = features();
  const std::size_t stride = static_cast<std::size_t>(f) * inner;
  for (int c = 0; c < f; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = g * stride + static_cast<std::size_t>(c) * inner;
      for (int k = 0; k < inner; ++k) {
        sum_dy += dy[off + k];
        sum_dy_xhat += dy[off + k] * cache.normalized[off + k];
      }
    }
    if (accumulate) {
      gamma.grad[c] += static_cast<float>(sum_dy_xhat);
      beta.grad[c] += static_cast<float>(sum_dy);
    }
    const float scale = gamma.value[c] * cache.inv_std[c];
    if (!cache.training) {
      for (int g = 0; g < groups; ++g) {
        const std::size_t off = g * stride + static_cast<std::size_t>(c) * inner;
        for (int k = 0; k < inner; ++k) dx[off + k] = scale * dy[off + k];
      }
      continue;
    }
    const auto mean_dy = static_cast<float>(sum_dy / cache.count);
    const auto mean_dy_xhat = static_cast<float>(sum_dy_xhat / cache.count);
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = g * stride + static_cast<std::size_t>(c) * inner;
      for (int k = 0; k < inner; ++k)
        dx[off + k] = scale * (dy[off + k] - mean_dy - cache.normalized[off + k] * mean_dy_xhat);
    }
  }
}

Tensor BatchNorm::forward(const Tensor& x, bool training, Cache& cache) const {
  if (x.c != features()) throw config_error("batch norm channel mismatch");
  Tensor y(x.n, x.c, x.h, x.w);
  forward_impl(x.data.data(), y.data.data(), x.n, static_cast<int>(x.plane()), training, cache);
  return y;
}

RowMatrix BatchNorm::forward(const RowMatrix& x, bool training, Cache& cache) const {
  if (x.cols() != features()) throw config_error("batch norm feature mismatch");
  RowMatrix y(x.rows(), x.cols());
  forward_impl(x.data(), y.data(), static_cast<int>(x.rows()), 1, training, cache);
  return y;
}

Tensor BatchNorm::backward(const Tensor& dy, const Cache& cache) {
  Tensor dx(dy.n, dy.c, dy.h, dy.w);
  backward_impl(dy.data.data(), dx.data.data(), dy.n, static_cast<int>(dy.plane()), cache, true);
  return dx;
}

RowMatrix BatchNorm::backward(const RowMatrix& dy, const Cache& cache) {
  RowMatrix dx(dy.rows(), dy.cols());
  backward_impl(dy.data(), dx.data(), static_cast<int>(dy.rows()), 1, cache, true);
  return dx;
}

Tensor BatchNorm::backward_input(const Tensor& dy, const Cache& cache) const {
  Tensor dx(dy.n, dy.c, dy.h, dy.w);
  const_cast<BatchNorm*>(this)->backward_impl(dy.data.data(), dx.data.data(), dy.n, static_cast<int>(dy.plane()),
                                              cache, false);
  return dx;
}

RowMatrix BatchNorm::backward_input(const RowMatrix& dy, const Cache& cache) const {
  RowMatrix dx(dy.rows(), dy.cols());
  const_cast<BatchNorm*>(this)->backward_impl(dy.data(), dx.data(), static_cast<int>(dy.rows()), 1, cache, false);
  return dx;
}

void BatchNorm::update_running(const Cache& cache) {
  if (!cache.training) return;
  running_mean = (1.0f - momentum_) * running_mean + momentum_ * cache.mean;
  running_var = (1.0f - momentum_) * running_var + momentum_ * cache.batch_var_unbiased;
}

// --- Linear ---------------------------------------------------------------------

Linear::Linear(int in_features, int out_features, bool bias)
    : weight({out_features, in_features}), in_(in_features), out_(out_features), has_bias_(bias) {
  if (bias) this->bias = Parameter({out_features});
}

void Linear::init(std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, fan_in_std(in_));
  for (Eigen::Index i = 0; i < weight.numel(); ++i) weight.value[i] = dist(rng);
  if (has_bias_) bias.value.setZero();
}

RowMatrix Linear::forward(const RowMatrix& x) const {
  if (x.cols() != in_) throw config_error("linear layer input width mismatch");
  RowMatrix y = x * weight.matrix().transpose();
  if (has_bias_) y.rowwise() += bias.value.transpose();
  return y;
}

RowMatrix Linear::backward(const RowMatrix& x, const RowMatrix& dy) {
  weight.grad_matrix().noalias() += dy.transpose() * x;
  if (has_bias_) bias.grad += dy.colwise().sum().transpose();
  return backward_input(dy);
}

RowMatrix Linear::backward_input(const RowMatrix& dy) const { return dy * weight.matrix(); }

// --- elementwise / pooling ------------------------------------------------------

Tensor avg_pool2x2(const Tensor& x) {
  const int oh = (x.h + 1) / 2, ow = (x.w + 1) / 2;
  Tensor y(x.n, x.c, oh, ow);
  for (int s = 0; s < x.n; ++s)
    for (int c = 0; c < x.c; ++c)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          float acc = 0.0f;
          int count = 0;
          for (int di = 0; di < 2; ++di)
            for (int dj = 0; dj < 2; ++dj) {
              const int si = 2 * i + di, sj = 2 * j + dj;
              if (si < x.h && sj < x.w) {
                acc += x.at(s, c, si, sj);
                ++count;
              }
            }
          y.at(s, c, i, j) = acc / static_cast<float>(count);
        }
  return y;
}

Tensor avg_pool2x2_backward(const Tensor& x_shape, const Tensor& dy) {
  Tensor dx(x_shape.n, x_shape.c, x_shape.h, x_shape.w);
  for (int s = 0; s < dy.n; ++s)
    for (int c = 0; c < dy.c; ++c)
      for (int i = 0; i < dy.h; ++i)
        for (int j = 0; j < dy.w; ++j) {
          const int rows = std::min(2, dx.h - 2 * i), cols = std::min(2, dx.w - 2 * j);
          const float g = dy.at(s, c, i, j) / static_cast<float>(rows * cols);
          for (int di = 0; di < rows; ++di)
            for (int dj = 0; dj < cols; ++dj) dx.at(s, c, 2 * i + di, 2 * j + dj) = g;
        }
  return dx;
}

void relu_inplace(Tensor& x) {
  for (float& v : x.data) v = std::max(v, 0.0f);
}

void relu_backward_inplace(const Tensor& y, Tensor& dy) {
  for (std::size_t i = 0; i < dy.data.size(); ++i)
    if (y.data[i] <= 0.0f) dy.data[i] = 0.0f;
}

void leaky_relu_inplace(RowMatrix& x, float slope) {
  x = x.unaryExpr([slope](float v) { return v > 0.0f ? v : slope * v; });
}

void leaky_relu_backward_inplace(const RowMatrix& y, RowMatrix& dy, float slope) {
  dy = dy.binaryExpr(y, [slope](float g, float v) { return v > 0.0f ? g : slope * g; });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) return {};
  int channels = 0;
  for (const auto& p : parts) {
    if (p.n != parts[0].n || p.h != parts[0].h || p.w != parts[0].w)
      throw config_error("concat: spatial shape mismatch");
    channels += p.c;
  }
  Tensor y(parts[0].n, channels, parts[0].h, parts[0].w);
  for (int s = 0; s < y.n; ++s) {
    float* dst = y.data.data() + s * y.sample_stride();
    for (const auto& p : parts) {
      const float* src = p.data.data() + s * p.sample_stride();
      dst = std::copy(src, src + p.sample_stride(), dst);
    }
  }
  return y;
}

std::vector<Tensor> split_channels(const Tensor& x, const std::vector<int>& channels) {
  std::vector<Tensor> parts;
  for (int c : channels) parts.emplace_back(x.n, c, x.h, x.w);
  for (int s = 0; s < x.n; ++s) {
    const float* src = x.data.data() + s * x.sample_stride();
    for (auto& p : parts) {
      const std::size_t len = p.sample_stride();
      std::copy(src, src + len, p.data.data() + s * len);
      src += len;
    }
  }
  return parts;
}

GradientReversal::GradientReversal(float lambda) : lambda_(lambda) {
  if (!(lambda >= 0.0f)) throw config_error("gradient reversal lambda must be >= 0");
}

}  // namespace msac::nn
