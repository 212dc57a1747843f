#include "msac/losses.hpp"

#include "msac/error.hpp"

#include <algorithm>
#include <cmath>

namespace msac {

std::string to_string(AttributeRole role) { return role == AttributeRole::kAgnostic ? "agnostic" : "correlated"; }

AttributeRole parse_role(const std::string& text) {
  if (text == "agnostic") return AttributeRole::kAgnostic;
  if (text == "correlated") return AttributeRole::kCorrelated;
  throw config_error("unknown attribute role '" + text + "' (expected agnostic|correlated)");
}

AttributeRole default_role(const std::string& attribute) {
  if (attribute == "gender") return AttributeRole::kCorrelated;
  if (attribute == "speaker" || attribute == "language" || attribute == "corpus") return AttributeRole::kAgnostic;
  throw config_error("unknown auxiliary attribute '" + attribute + "'");
}

double MSACWeights::emotion_weight() const {
  double sum = 0.0;
  for (const auto& [name, a] : alpha) sum += a;
  return 1.0 - sum;
}

void MSACWeights::validate() const {
  double sum = 0.0;
  for (const auto& [name, a] : alpha) {
    if (!(a >= 0.0 && a <= 1.0)) throw config_error("alpha for '" + name + "' must lie in [0, 1]");
    if (!roles.contains(name)) throw config_error("no role given for attribute '" + name + "'");
    sum += a;
  }
  if (!(sum < 1.0)) throw config_error("auxiliary alphas sum to " + std::to_string(sum) + "; must be < 1");
}

MSACWeights MSACWeights::none() { return {}; }

MSACWeights MSACWeights::iemocap() {
  return {{{"speaker", 0.3}, {"gender", 0.2}},
          {{"speaker", AttributeRole::kAgnostic}, {"gender", AttributeRole::kCorrelated}}};
}

MSACWeights MSACWeights::emodb() {
  return {{{"speaker", 0.1}, {"gender", 0.05}},
          {{"speaker", AttributeRole::kAgnostic}, {"gender", AttributeRole::kCorrelated}}};
}

MSACWeights MSACWeights::cross_corpus() {
  return {{{"speaker", 0.15}, {"gender", 0.2}, {"language", 0.15}},
          {{"speaker", AttributeRole::kAgnostic},
           {"gender", AttributeRole::kCorrelated},
           {"language", AttributeRole::kAgnostic}}};
}

MSACWeights MSACWeights::preset(const std::string& name) {
  if (name == "none") return none();
  if (name == "iemocap") return iemocap();
  if (name == "emodb") return emodb();
  if (name == "cross_corpus") return cross_corpus();
  throw config_error("unknown MSAC weight preset '" + name + "'");
}

LossMatrix normalize_for_cosine(const LossMatrix& features, const LossMatrix& class_weights) {
  if (features.cols() != class_weights.cols()) throw config_error("cosine: feature and class-weight widths differ");
  const Eigen::VectorXf xn = features.rowwise().norm().cwiseMax(static_cast<float>(kCosineNormFloor));
  const Eigen::VectorXf wn = class_weights.rowwise().norm().cwiseMax(static_cast<float>(kCosineNormFloor));
  LossMatrix cos = features * class_weights.transpose();
  cos.array().colwise() /= xn.array();
  cos.array().rowwise() /= wn.transpose().array();
  return cos.cwiseMax(-1.0f).cwiseMin(1.0f);
}

namespace {

// d/dv of v / max(|v|, floor) applied to upstream g: (g - (g.u) u) / |v| above
// the floor, g / floor below it.
void unit_backward(const LossMatrix& v, const LossMatrix& g, LossMatrix& out) {
  out.resize(v.rows(), v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const float norm = v.row(r).norm();
    if (norm <= static_cast<float>(kCosineNormFloor)) {
      out.row(r) = g.row(r) / static_cast<float>(kCosineNormFloor);
      continue;
    }
    const auto u = v.row(r) / norm;
    out.row(r) = (g.row(r) - g.row(r).dot(u) * u) / norm;
  }
}

}  // namespace

void normalize_for_cosine_backward(const LossMatrix& features, const LossMatrix& class_weights,
                                   const LossMatrix& grad_cosines, LossMatrix* grad_features,
                                   LossMatrix* grad_weights) {
  const Eigen::VectorXf xn = features.rowwise().norm().cwiseMax(static_cast<float>(kCosineNormFloor));
  const Eigen::VectorXf wn = class_weights.rowwise().norm().cwiseMax(static_cast<float>(kCosineNormFloor));
  const LossMatrix xu = features.array().colwise() / xn.array();
  const LossMatrix wu = class_weights.array().colwise() / wn.array();
  if (grad_features) unit_backward(features, grad_cosines * wu, *grad_features);
  if (grad_weights) unit_backward(class_weights, grad_cosines.transpose() * xu, *grad_weights);
}

LossWithGrad am_softmax_loss_with_grad(const LossMatrix& cosines, std::span<const int> labels,
                                       const AMSoftmaxParams& params) {
  const auto n = cosines.rows();
  const auto k = cosines.cols();
  if (n == 0) throw data_error("empty_batch", "am_softmax_loss on an empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != n) throw config_error("label count does not match batch size");
  if (!(params.s > 0.0) || !(params.m >= 0.0)) throw config_error("AM-Softmax needs s > 0 and m >= 0");

  LossWithGrad out;
  out.grad.resize(n, k);
  std::vector<double> z(k);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= k)
      throw data_error("label_out_of_range", "label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    for (Eigen::Index j = 0; j < k; ++j) z[j] = params.s * (cosines(i, j) - (j == y ? params.m : 0.0));
    // -log softmax_y = log sum_j exp(z_j - z_y); log1p keeps precision when
    // the target dominates.
    const double zy = z[y];
    const double shift = std::max(0.0, *std::max_element(z.begin(), z.end()) - zy);
    double others = 0.0;
    for (Eigen::Index j = 0; j < k; ++j)
      if (j != y) others += std::exp(z[j] - zy - shift);
    const double sample_loss = shift == 0.0 ? std::log1p(others) : shift + std::log(std::exp(-shift) + others);
    const double lse = zy + sample_loss;
    total += sample_loss;
    for (Eigen::Index j = 0; j < k; ++j) {
      const double p = std::exp(z[j] - lse);
      out.grad(i, j) = static_cast<float>(params.s * (p - (j == y ? 1.0 : 0.0)) / static_cast<double>(n));
    }
  }
  out.loss = std::max(total / static_cast<double>(n), 0.0);  // NaN propagates
  return out;
}

double am_softmax_loss(const LossMatrix& cosines, std::span<const int> labels, const AMSoftmaxParams& params) {
  return am_softmax_loss_with_grad(cosines, labels, params).loss;
}

double msac_total_loss(double emotion_loss, const std::map<std::string, double>& aux_losses,
                       const MSACWeights& weights) {
  weights.validate();
  double total = weights.emotion_weight() * emotion_loss;
  for (const auto& [name, loss] : aux_losses) {
    const auto it = weights.alpha.find(name);
    if (it == weights.alpha.end()) throw config_error("no MSAC weight for auxiliary loss '" + name + "'");
    total += it->second * loss;
  }
  return total;
}

}  // namespace msac
