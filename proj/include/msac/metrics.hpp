#pragma once

#include <Eigen/Core>

#include <span>
#include <string>
#include <vector>

namespace msac {

using ConfusionMatrix = Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct EvalReport {
  double war = 0.0;
  double uar = 0.0;
  ConfusionMatrix confusion;         // rows = true class, cols = predicted
  std::vector<double> per_class_recall;  // NaN for classes without samples
  std::vector<std::string> class_names;

  std::size_t num_samples() const { return static_cast<std::size_t>(confusion.sum()); }
};

struct ReliabilityReport {
  std::string detector;
  double fpr95 = 0.0;
  double auroc = 0.0;
};

double war(std::span<const int> preds, std::span<const int> labels);
/// Mean recall over the classes that occur in `labels`.
double uar(std::span<const int> preds, std::span<const int> labels);
ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels, int num_classes);

/// Builds the report from the confusion matrix alone, so WAR/UAR always agree with it.
EvalReport make_eval_report(const ConfusionMatrix& confusion, std::vector<std::string> class_names = {});
EvalReport make_eval_report(std::span<const int> preds, std::span<const int> labels, int num_classes,
                            std::vector<std::string> class_names = {});

/// Rows normalized to sum to 1 (rows without samples stay zero).
Eigen::MatrixXd row_normalized(const ConfusionMatrix& confusion);

/// P(id > ood) + 0.5 P(id == ood), ID is the positive class. Sort-based, exact.
double auroc(std::span<const double> id_scores, std::span<const double> ood_scores);

/// Fraction of OOD scores >= tau, where tau is the largest threshold that
/// keeps at least ceil(0.95 n) of the n ID scores.
double fpr95(std::span<const double> id_scores, std::span<const double> ood_scores);
/// The threshold used by fpr95.
double tpr95_threshold(std::span<const double> id_scores);

ReliabilityReport reliability(const std::string& detector, std::span<const double> id_scores,
                              std::span<const double> ood_scores);

}  // namespace msac
