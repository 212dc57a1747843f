#pragma once

#include "msac/features.hpp"
#include "msac/metrics.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace msac {

class MsacNet;

enum class DetectorKind { kMaxLogit, kOdin, kRodin, kReact, kMahalanobis };

std::string to_string(DetectorKind kind);
/// Accepts "maxlogit", "odin", "rodin", "react", "mahalanobis".
DetectorKind parse_detector(const std::string& name);

struct DetectorSpec {
  DetectorKind kind = DetectorKind::kMaxLogit;
  double temperature = 1000.0;  // odin / rodin
  double epsilon = 0.0014;      // odin / rodin, in feature units
  double percentile = 90.0;     // react clip percentile

  std::string name() const { return to_string(kind); }
  void validate() const;
  bool needs_fit() const { return kind == DetectorKind::kReact || kind == DetectorKind::kMahalanobis; }
};

/// Class-conditional Gaussians with one shared covariance.
struct MahalanobisState {
  Eigen::MatrixXd means;      // [classes x dim]
  Eigen::MatrixXd precision;  // inverse of the ridge-regularized shared covariance
  double ridge = 0.0;
};

struct FittedDetector {
  DetectorSpec spec;
  std::optional<double> clip;                      // react
  std::optional<MahalanobisState> mahalanobis;     // mahalanobis

  bool ready() const;
};

/// What a detector needs from a classifier. Logits are the emotion-head
/// logits; the embedding is the penultimate representation they are computed from.
class ScoringModel {
 public:
  virtual ~ScoringModel() = default;
  virtual Eigen::VectorXd logits(const FBankFeatures& x) const = 0;
  virtual Eigen::VectorXd embedding(const FBankFeatures& x) const = 0;
  virtual Eigen::VectorXd logits_from_embedding(const Eigen::VectorXd& embedding) const = 0;
  virtual bool has_input_gradient() const { return false; }
  /// d(sum_k weights_k * logit_k)/d(input), same shape as x.values.
  virtual RowMatrix input_gradient(const FBankFeatures& x, const Eigen::VectorXd& weights) const;
};

/// Emotion head of a trained network; logits are scale * cosines.
class MsacScoringModel : public ScoringModel {
 public:
  MsacScoringModel(const MsacNet& net, double scale);
  Eigen::VectorXd logits(const FBankFeatures& x) const override;
  Eigen::VectorXd embedding(const FBankFeatures& x) const override;
  Eigen::VectorXd logits_from_embedding(const Eigen::VectorXd& embedding) const override;
  bool has_input_gradient() const override { return true; }
  RowMatrix input_gradient(const FBankFeatures& x, const Eigen::VectorXd& weights) const override;

 private:
  const MsacNet& net_;
  double scale_;
};

/// logits = W * vec(x) + b, with vec(x) (row-major flattening) as the embedding.
class LinearScoringModel : public ScoringModel {
 public:
  LinearScoringModel(Eigen::MatrixXd weight, Eigen::VectorXd bias);
  Eigen::VectorXd logits(const FBankFeatures& x) const override;
  Eigen::VectorXd embedding(const FBankFeatures& x) const override;
  Eigen::VectorXd logits_from_embedding(const Eigen::VectorXd& embedding) const override;
  bool has_input_gradient() const override { return true; }
  RowMatrix input_gradient(const FBankFeatures& x, const Eigen::VectorXd& weights) const override;

 private:
  Eigen::MatrixXd weight_;
  Eigen::VectorXd bias_;
};

double log_sum_exp(const Eigen::VectorXd& logits);
/// Largest softmax probability of logits / temperature.
double max_softmax(const Eigen::VectorXd& logits, double temperature);

double score_maxlogit(const Eigen::VectorXd& logits);

/// Input after one signed-gradient step on the temperature-scaled max
/// log-probability: +eps (towards confidence) when `towards` is true, -eps otherwise.
FBankFeatures perturb_input(const ScoringModel& model, const FBankFeatures& x, double temperature, double eps,
                            bool towards);
double score_odin(const ScoringModel& model, const FBankFeatures& x, double temperature, double eps);
double score_rodin(const ScoringModel& model, const FBankFeatures& x, double temperature, double eps);

/// Nearest-rank percentile over every entry of the ID embeddings.
FittedDetector fit_react(std::span<const Eigen::VectorXd> id_embeddings, double percentile = 90.0);
Eigen::VectorXd clip_activations(const Eigen::VectorXd& activations, double clip);
/// Energy score (log-sum-exp) of the logits recomputed from clipped activations.
double score_react_embedding(const ScoringModel& model, const Eigen::VectorXd& embedding, const FittedDetector& fitted);
double score_react(const ScoringModel& model, const FBankFeatures& x, const FittedDetector& fitted);

/// Per-class means and a pooled covariance with ridge 1e-3 * trace / dim.
FittedDetector fit_mahalanobis(std::span<const Eigen::VectorXd> embeddings, std::span<const int> labels,
                               int num_classes);
/// Negative squared Mahalanobis distance to the nearest class mean.
double score_mahalanobis(const Eigen::VectorXd& embedding, const FittedDetector& fitted);

/// Fits whatever the detector needs on the ID training set (no-op for the rest).
FittedDetector fit_detector(const DetectorSpec& spec, const ScoringModel& model,
                            std::span<const FBankFeatures> id_train, std::span<const int> id_train_labels,
                            int num_classes);

double score(const ScoringModel& model, const FBankFeatures& x, const FittedDetector& fitted);

struct OODScoreSet {
  std::string detector;
  std::vector<double> id_scores;
  std::vector<double> ood_scores;

  ReliabilityReport report() const { return reliability(detector, id_scores, ood_scores); }
};

OODScoreSet evaluate_detector(const ScoringModel& model, const FittedDetector& fitted,
                              std::span<const FBankFeatures> id_set, std::span<const FBankFeatures> ood_set);

/// CSV with columns utterance_id,set,score.
void write_scores_csv(const std::filesystem::path& path, const OODScoreSet& scores,
                      std::span<const std::string> id_names, std::span<const std::string> ood_names);

}  // namespace msac
