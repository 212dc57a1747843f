#pragma once

#include <Eigen/Core>

#include <map>
#include <span>
#include <string>

namespace msac {

using LossMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kCosineNormFloor = 1e-12;

struct AMSoftmaxParams {
  double s = 30.0;
  double m = 0.2;
};

enum class AttributeRole { kAgnostic, kCorrelated };

std::string to_string(AttributeRole role);
AttributeRole parse_role(const std::string& text);

/// Loss weights of the auxiliary attribute heads. The emotion head receives
/// 1 - sum(alpha).
struct MSACWeights {
  std::map<std::string, double> alpha;
  std::map<std::string, AttributeRole> roles;

  double emotion_weight() const;
  /// Throws a configuration error on negative weights, missing roles or
  /// sum(alpha) >= 1.
  void validate() const;

  static MSACWeights none();
  static MSACWeights iemocap();
  static MSACWeights emodb();
  static MSACWeights cross_corpus();
  /// "none", "iemocap", "emodb" or "cross_corpus".
  static MSACWeights preset(const std::string& name);
};

/// Default role of a known attribute: gender is emotion-correlated; speaker,
/// language and corpus are emotion-agnostic.
AttributeRole default_role(const std::string& attribute);

/// cos(theta_{j,i}) = <x_i, w_j> / (|x_i| |w_j|), norms floored at 1e-12.
/// features: [N x D], class_weights: [K x D] -> [N x K].
LossMatrix normalize_for_cosine(const LossMatrix& features, const LossMatrix& class_weights);

/// Backward pass of normalize_for_cosine. Either output pointer may be null.
void normalize_for_cosine_backward(const LossMatrix& features, const LossMatrix& class_weights,
                                   const LossMatrix& grad_cosines, LossMatrix* grad_features,
                                   LossMatrix* grad_weights);

struct LossWithGrad {
  double loss = 0.0;
  LossMatrix grad;  // dL/dcosines, [N x K]
};

/// Mean additive-margin softmax loss over the batch, log-sum-exp stabilized.
double am_softmax_loss(const LossMatrix& cosines, std::span<const int> labels, const AMSoftmaxParams& params);
LossWithGrad am_softmax_loss_with_grad(const LossMatrix& cosines, std::span<const int> labels,
                                       const AMSoftmaxParams& params);

/// (1 - sum alpha) * L_E + sum_agnostic alpha_i L_i + sum_correlated alpha_j L_j.
double msac_total_loss(double emotion_loss, const std::map<std::string, double>& aux_losses,
                       const MSACWeights& weights);

}  // namespace msac
