#include "msac/ood.hpp"

#include "msac/error.hpp"
#include "msac/model.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace msac {

namespace {

Eigen::Index argmax(const Eigen::VectorXd& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  const Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

void require_logits(const Eigen::VectorXd& logits) {
  if (logits.size() == 0) throw data_error("empty_logits", "detector received an empty logit vector");
}

}  // namespace

std::string to_string(DetectorKind kind) {
  switch (kind) {
    case DetectorKind::kMaxLogit: return "maxlogit";
    case DetectorKind::kOdin: return "odin";
    case DetectorKind::kRodin: return "rodin";
    case DetectorKind::kReact: return "react";
    case DetectorKind::kMahalanobis: return "mahalanobis";
  }
  return "unknown";
}

DetectorKind parse_detector(const std::string& name) {
  for (DetectorKind k : {DetectorKind::kMaxLogit, DetectorKind::kOdin, DetectorKind::kRodin, DetectorKind::kReact,
                         DetectorKind::kMahalanobis})
    if (to_string(k) == name) return k;
  throw config_error("unknown detector '" + name + "' (expected maxlogit, odin, rodin, react or mahalanobis)");
}

void DetectorSpec::validate() const {
  if (!(temperature > 0.0)) throw config_error(name() + ": temperature must be > 0");
  if (!(epsilon >= 0.0)) throw config_error(name() + ": epsilon must be >= 0");
  if (!(percentile > 0.0 && percentile <= 100.0)) throw config_error(name() + ": percentile must be in (0, 100]");
}

bool FittedDetector::ready() const {
  switch (spec.kind) {
    case DetectorKind::kReact: return clip.has_value();
    case DetectorKind::kMahalanobis: return mahalanobis.has_value();
    default: return true;
  }
}

RowMatrix ScoringModel::input_gradient(const FBankFeatures&, const Eigen::VectorXd&) const {
  throw config_error("this model cannot provide input gradients; use eps = 0");
}

// ---------------------------------------------------------------------------

MsacScoringModel::MsacScoringModel(const MsacNet& net, double scale) : net_(net), scale_(scale) {}

Eigen::VectorXd MsacScoringModel::logits(const FBankFeatures& x) const {
  return scale_ * net_.forward(x).cosines.at("emotion").cast<double>();
}

Eigen::VectorXd MsacScoringModel::embedding(const FBankFeatures& x) const {
  return net_.forward(x).embedding.cast<double>();
}

Eigen::VectorXd MsacScoringModel::logits_from_embedding(const Eigen::VectorXd& embedding) const {
  const nn::RowMatrix e = embedding.cast<float>().transpose();
  const nn::RowMatrix cos = net_.head_cosines("emotion", e);
  return scale_ * Eigen::VectorXd(cos.row(0).transpose().cast<double>());
}

RowMatrix MsacScoringModel::input_gradient(const FBankFeatures& x, const Eigen::VectorXd& weights) const {
  MsacNet::Trace trace;
  net_.forward(make_batch(x), false, trace);
  const nn::RowMatrix g = (scale_ * weights).cast<float>().transpose();
  const Tensor dx = net_.input_gradient(trace, {{"emotion", g}});
  RowMatrix out(x.values.rows(), x.values.cols());
  std::copy(dx.data.begin(), dx.data.end(), out.data());
  return out;
}

LinearScoringModel::LinearScoringModel(Eigen::MatrixXd weight, Eigen::VectorXd bias)
    : weight_(std::move(weight)), bias_(std::move(bias)) {
  if (bias_.size() != weight_.rows()) throw config_error("linear scorer: bias size does not match weight rows");
}

Eigen::VectorXd LinearScoringModel::embedding(const FBankFeatures& x) const {
  Eigen::VectorXd v(x.values.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = x.values.data()[i];
  return v;
}

Eigen::VectorXd LinearScoringModel::logits_from_embedding(const Eigen::VectorXd& embedding) const {
  if (embedding.size() != weight_.cols())
    throw config_error("linear scorer expects " + std::to_string(weight_.cols()) + " inputs, got " +
                       std::to_string(embedding.size()));
  return weight_ * embedding + bias_;
}

Eigen::VectorXd LinearScoringModel::logits(const FBankFeatures& x) const { return logits_from_embedding(embedding(x)); }

RowMatrix LinearScoringModel::input_gradient(const FBankFeatures& x, const Eigen::VectorXd& weights) const {
  const Eigen::VectorXd g = weight_.transpose() * weights;
  RowMatrix out(x.values.rows(), x.values.cols());
  for (Eigen::Index i = 0; i < g.size(); ++i) out.data()[i] = static_cast<float>(g[i]);
  return out;
}

// ---------------------------------------------------------------------------

double log_sum_exp(const Eigen::VectorXd& logits) {
  require_logits(logits);
  const double m = logits.maxCoeff();
  return m + std::log((logits.array() - m).exp().sum());
}

double max_softmax(const Eigen::VectorXd& logits, double temperature) {
  require_logits(logits);
  return softmax(logits / temperature).maxCoeff();
}

double score_maxlogit(const Eigen::VectorXd& logits) {
  require_logits(logits);
  return logits.maxCoeff();
}

FBankFeatures perturb_input(const ScoringModel& model, const FBankFeatures& x, double temperature, double eps,
                            bool towards) {
  if (!(temperature > 0.0)) throw config_error("temperature must be > 0");
  if (!(eps >= 0.0)) throw config_error("perturbation magnitude must be >= 0");
  if (eps == 0.0) return x;
  if (!model.has_input_gradient()) throw config_error("perturbation requires a model with input gradients");
  const Eigen::VectorXd z = model.logits(x);
  require_logits(z);
  // gradient of log softmax(z / T)[argmax] with respect to z
  Eigen::VectorXd w = -softmax(z / temperature);
  w[argmax(z)] += 1.0;
  w /= temperature;
  const RowMatrix g = model.input_gradient(x, w);
  FBankFeatures out = x;
  const float step = static_cast<float>(towards ? eps : -eps);
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const float gi = g.data()[i];
    out.values.data()[i] += step * static_cast<float>((gi > 0.0f) - (gi < 0.0f));
  }
  return out;
}

double score_odin(const ScoringModel& model, const FBankFeatures& x, double temperature, double eps) {
  return max_softmax(model.logits(perturb_input(model, x, temperature, eps, true)), temperature);
}

double score_rodin(const ScoringModel& model, const FBankFeatures& x, double temperature, double eps) {
  return max_softmax(model.logits(perturb_input(model, x, temperature, eps, false)), temperature);
}

FittedDetector fit_react(std::span<const Eigen::VectorXd> id_embeddings, double percentile) {
  FittedDetector f;
  f.spec.kind = DetectorKind::kReact;
  f.spec.percentile = percentile;
  f.spec.validate();
  std::vector<double> all;
  for (const auto& e : id_embeddings) all.insert(all.end(), e.data(), e.data() + e.size());
  if (all.empty()) throw data_error("empty_input", "react needs ID activations to fit the clip value");
  std::sort(all.begin(), all.end());
  const auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * static_cast<double>(all.size())));
  f.clip = all[std::clamp<std::size_t>(rank, 1, all.size()) - 1];
  return f;
}

Eigen::VectorXd clip_activations(const Eigen::VectorXd& activations, double clip) {
  return activations.cwiseMin(clip);
}

double score_react_embedding(const ScoringModel& model, const Eigen::VectorXd& embedding,
                             const FittedDetector& fitted) {
  if (!fitted.clip) throw config_error("react detector has not been fitted");
  return log_sum_exp(model.logits_from_embedding(clip_activations(embedding, *fitted.clip)));
}

double score_react(const ScoringModel& model, const FBankFeatures& x, const FittedDetector& fitted) {
  return score_react_embedding(model, model.embedding(x), fitted);
}

FittedDetector fit_mahalanobis(std::span<const Eigen::VectorXd> embeddings, std::span<const int> labels,
                               int num_classes) {
  if (embeddings.size() != labels.size())
    throw data_error("length_mismatch", "embeddings and labels differ in length");
  if (embeddings.empty()) throw data_error("empty_input", "mahalanobis needs ID embeddings to fit");
  const Eigen::Index dim = embeddings.front().size();
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(num_classes, dim);
  std::vector<int> counts(num_classes, 0);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].size() != dim) throw data_error("dimension_mismatch", "embeddings differ in dimension");
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw data_error("label_out_of_range", "label " + std::to_string(labels[i]) + " outside the class range");
    means.row(labels[i]) += embeddings[i].transpose();
    ++counts[labels[i]];
  }
  for (int k = 0; k < num_classes; ++k) {
    if (counts[k] < 1) throw data_error("empty_class", "class " + std::to_string(k) + " has no ID samples");
    means.row(k) /= counts[k];
  }
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(dim, dim);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const Eigen::VectorXd d = embeddings[i] - means.row(labels[i]).transpose();
    cov.noalias() += d * d.transpose();
  }
  cov /= static_cast<double>(embeddings.size());
  const double trace = cov.trace();
  // identical embeddings leave a zero covariance; fall back to an absolute ridge
  const double ridge = trace > 0.0 ? 1e-3 * trace / static_cast<double>(dim) : 1e-3;
  cov.diagonal().array() += ridge;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw numerical_error("shared covariance is not positive definite after regularization");
  Eigen::MatrixXd precision = ldlt.solve(Eigen::MatrixXd::Identity(dim, dim));
  precision = 0.5 * (precision + precision.transpose());

  FittedDetector f;
  f.spec.kind = DetectorKind::kMahalanobis;
  f.mahalanobis = MahalanobisState{std::move(means), std::move(precision), ridge};
  return f;
}

double score_mahalanobis(const Eigen::VectorXd& embedding, const FittedDetector& fitted) {
  if (!fitted.mahalanobis) throw config_error("mahalanobis detector has not been fitted");
  const MahalanobisState& st = *fitted.mahalanobis;
  if (embedding.size() != st.means.cols())
    throw data_error("dimension_mismatch", "embedding has dimension " + std::to_string(embedding.size()) +
                                               ", detector expects " + std::to_string(st.means.cols()));
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < st.means.rows(); ++k) {
    const Eigen::VectorXd d = embedding - st.means.row(k).transpose();
    best = std::min(best, d.dot(st.precision * d));
  }
  return -best;
}

FittedDetector fit_detector(const DetectorSpec& spec, const ScoringModel& model,
                            std::span<const FBankFeatures> id_train, std::span<const int> id_train_labels,
                            int num_classes) {
  spec.validate();
  if (!spec.needs_fit()) return FittedDetector{spec, std::nullopt, std::nullopt};
  std::vector<Eigen::VectorXd> emb;
  emb.reserve(id_train.size());
  for (const auto& x : id_train) emb.push_back(model.embedding(x));
  FittedDetector f = spec.kind == DetectorKind::kReact ? fit_react(emb, spec.percentile)
                                                       : fit_mahalanobis(emb, id_train_labels, num_classes);
  f.spec = spec;
  return f;
}

double score(const ScoringModel& model, const FBankFeatures& x, const FittedDetector& fitted) {
  const DetectorSpec& s = fitted.spec;
  switch (s.kind) {
    case DetectorKind::kMaxLogit: return score_maxlogit(model.logits(x));
    case DetectorKind::kOdin: return score_odin(model, x, s.temperature, s.epsilon);
    case DetectorKind::kRodin: return score_rodin(model, x, s.temperature, s.epsilon);
    case DetectorKind::kReact: return score_react(model, x, fitted);
    case DetectorKind::kMahalanobis: return score_mahalanobis(model.embedding(x), fitted);
  }
  throw config_error("unknown detector");
}

OODScoreSet evaluate_detector(const ScoringModel& model, const FittedDetector& fitted,
                              std::span<const FBankFeatures> id_set, std::span<const FBankFeatures> ood_set) {
  if (id_set.empty() || ood_set.empty()) throw data_error("empty_input", "ID and OOD sets must be non-empty");
  if (!fitted.ready()) throw config_error(fitted.spec.name() + " detector has not been fitted");
  OODScoreSet out;
  out.detector = fitted.spec.name();
  for (const auto& x : id_set) out.id_scores.push_back(score(model, x, fitted));
  for (const auto& x : ood_set) out.ood_scores.push_back(score(model, x, fitted));
  for (auto* v : {&out.id_scores, &out.ood_scores})
    for (double s : *v)
      if (!std::isfinite(s)) throw numerical_error(out.detector + " produced a non-finite score");
  return out;
}

void write_scores_csv(const std::filesystem::path& path, const OODScoreSet& scores,
                      std::span<const std::string> id_names, std::span<const std::string> ood_names) {
  if (id_names.size() != scores.id_scores.size() || ood_names.size() != scores.ood_scores.size())
    throw data_error("length_mismatch", "score and utterance id counts differ");
  std::ofstream out(path);
  if (!out) throw data_error("io_error", "cannot write " + path.string());
  out.precision(17);
  out << "utterance_id,set,score\n";
  for (std::size_t i = 0; i < id_names.size(); ++i) out << id_names[i] << ",id," << scores.id_scores[i] << "\n";
  for (std::size_t i = 0; i < ood_names.size(); ++i) out << ood_names[i] << ",ood," << scores.ood_scores[i] << "\n";
  if (!out) throw data_error("io_error", "failed writing " + path.string());
}

}  // namespace msac
