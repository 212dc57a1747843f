#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <string>
#include <vector>

namespace msac::nn {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

/// Dense NCHW activation tensor. For spectrogram inputs H is time and W is
/// frequency.
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t sample_stride() const { return static_cast<std::size_t>(c) * h * w; }

  float& at(int in, int ic, int ih, int iw) { return data[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw]; }
  float at(int in, int ic, int ih, int iw) const {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw];
  }

  /// Sample `i` viewed as [c x (h*w)].
  MatrixMap sample(int i) { return {data.data() + i * sample_stride(), c, static_cast<Eigen::Index>(plane())}; }
  ConstMatrixMap sample(int i) const {
    return {data.data() + i * sample_stride(), c, static_cast<Eigen::Index>(plane())};
  }

  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  std::string shape_string() const;
};

/// A learnable tensor and its accumulated gradient. `shape` is informational
/// (checkpoint metadata); storage is always a flat row-major buffer.
struct Parameter {
  std::vector<int> shape;
  Eigen::VectorXf value;
  Eigen::VectorXf grad;

  Parameter() = default;
  explicit Parameter(std::vector<int> shape_);

  Eigen::Index numel() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
  /// View as [rows x cols] (rows = shape[0]).
  MatrixMap matrix();
  ConstMatrixMap matrix() const;
  MatrixMap grad_matrix();
};

}  // namespace msac::nn
