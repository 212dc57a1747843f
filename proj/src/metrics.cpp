#include "msac/metrics.hpp"

#include "msac/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace msac {

namespace {

void check_pair(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size())
    throw data_error("length_mismatch", "predictions (" + std::to_string(preds.size()) + ") and labels (" +
                                            std::to_string(labels.size()) + ") differ in length");
  if (labels.empty()) throw data_error("empty_input", "no samples to score");
}

void check_scores(std::span<const double> id_scores, std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) throw data_error("empty_input", "ID and OOD score sets must be non-empty");
  for (auto set : {id_scores, ood_scores})
    for (double s : set)
      if (std::isnan(s)) throw numerical_error("NaN detector score");
}

int max_label(std::span<const int> preds, std::span<const int> labels) {
  int k = -1;
  for (int v : preds) k = std::max(k, v);
  for (int v : labels) k = std::max(k, v);
  return k + 1;
}

}  // namespace

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels, int num_classes) {
  if (preds.size() != labels.size())
    throw data_error("length_mismatch", "predictions and labels differ in length");
  if (num_classes < 0) throw config_error("negative class count");
  ConfusionMatrix m = ConfusionMatrix::Zero(num_classes, num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = preds[i];
    if (t < 0 || t >= num_classes || p < 0 || p >= num_classes)
      throw data_error("label_out_of_range", "sample " + std::to_string(i) + " has label " + std::to_string(t) +
                                                 " / prediction " + std::to_string(p) + " outside [0, " +
                                                 std::to_string(num_classes) + ")");
    ++m(t, p);
  }
  return m;
}

EvalReport make_eval_report(const ConfusionMatrix& confusion, std::vector<std::string> class_names) {
  EvalReport r;
  r.confusion = confusion;
  r.class_names = std::move(class_names);
  const Eigen::Index k = confusion.rows();
  long long total = 0, correct = 0;
  double recall_sum = 0.0;
  int present = 0;
  r.per_class_recall.assign(k, std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index c = 0; c < k; ++c) {
    const long long row = confusion.row(c).sum();
    total += row;
    correct += confusion(c, c);
    if (row == 0) continue;
    r.per_class_recall[c] = static_cast<double>(confusion(c, c)) / static_cast<double>(row);
    recall_sum += r.per_class_recall[c];
    ++present;
  }
  r.war = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  r.uar = present ? recall_sum / present : 0.0;
  return r;
}

EvalReport make_eval_report(std::span<const int> preds, std::span<const int> labels, int num_classes,
                            std::vector<std::string> class_names) {
  return make_eval_report(confusion_matrix(preds, labels, num_classes), std::move(class_names));
}

double war(std::span<const int> preds, std::span<const int> labels) {
  check_pair(preds, labels);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double uar(std::span<const int> preds, std::span<const int> labels) {
  check_pair(preds, labels);
  return make_eval_report(preds, labels, max_label(preds, labels)).uar;
}

Eigen::MatrixXd row_normalized(const ConfusionMatrix& confusion) {
  Eigen::MatrixXd out = confusion.cast<double>();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double s = out.row(r).sum();
    if (s > 0) out.row(r) /= s;
  }
  return out;
}

double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  check_scores(id_scores, ood_scores);
  std::vector<double> id(id_scores.begin(), id_scores.end());
  std::vector<double> ood(ood_scores.begin(), ood_scores.end());
  std::sort(id.begin(), id.end());
  std::sort(ood.begin(), ood.end());
  // twice the Mann-Whitney statistic, kept in integers so the result is exact
  unsigned long long twice_u = 0;
  std::size_t below = 0, upto = 0;  // OOD scores < s and <= s
  for (double s : id) {
    while (below < ood.size() && ood[below] < s) ++below;
    upto = std::max(upto, below);
    while (upto < ood.size() && ood[upto] <= s) ++upto;
    twice_u += 2 * below + (upto - below);
  }
  const double pairs = static_cast<double>(id.size()) * static_cast<double>(ood.size());
  return static_cast<double>(twice_u) / (2.0 * pairs);
}

double tpr95_threshold(std::span<const double> id_scores) {
  if (id_scores.empty()) throw data_error("empty_input", "ID score set must be non-empty");
  std::vector<double> id(id_scores.begin(), id_scores.end());
  std::sort(id.begin(), id.end(), std::greater<>());
  // ceil(0.95 n) in integer arithmetic
  const std::size_t quota = (95 * id.size() + 99) / 100;
  return id[quota - 1];
}

double fpr95(std::span<const double> id_scores, std::span<const double> ood_scores) {
  check_scores(id_scores, ood_scores);
  const double tau = tpr95_threshold(id_scores);
  const auto passed = std::count_if(ood_scores.begin(), ood_scores.end(), [&](double s) { return s >= tau; });
  return static_cast<double>(passed) / static_cast<double>(ood_scores.size());
}

ReliabilityReport reliability(const std::string& detector, std::span<const double> id_scores,
                              std::span<const double> ood_scores) {
  return {detector, fpr95(id_scores, ood_scores), auroc(id_scores, ood_scores)};
}

}  // namespace msac
