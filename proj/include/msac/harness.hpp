#pragma once

#include "msac/data.hpp"
#include "msac/features.hpp"
#include "msac/losses.hpp"
#include "msac/metrics.hpp"
#include "msac/model.hpp"
#include "msac/ood.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace msac {

struct OptimizerConfig {
  std::string kind = "adamw";
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct SplitConfig {
  std::string kind = "kfold";  // kfold | holdout | plan
  int k = 10;
  std::uint64_t seed = 0;
  int fold = -1;          // -1 runs every fold
  std::string plan_file;  // kind == plan
};

struct DataConfig {
  std::string manifest;
  std::string scheme = "iemocap4";
  std::string feature_dir;  // optional cache of <utterance_id>.fbank files
  std::vector<std::string> unseen_corpora;  // never split; evaluated whole
  SplitConfig split;
};

struct ExperimentConfig {
  FbankOptions fbank;
  int target_frames = 300;
  bool spec_augment = true;
  AugmentSpec augment;
  ModelConfig model;
  AMSoftmaxParams loss;
  std::string msac_preset = "none";
  MSACWeights msac = MSACWeights::none();
  OptimizerConfig optimizer;
  int batch_size = 64;
  int epochs = 100;
  std::uint64_t seed = 0;
  DataConfig data;
  std::vector<DetectorSpec> detectors;
  std::string runs_dir = "runs";

  ExperimentConfig();
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Sets a dotted key ("optimizer.lr=0.0005"). The value is read as JSON when
/// it parses, otherwise as a plain string.
void apply_override(nlohmann::json& config, const std::string& assignment);
/// Defaults, then the file (if any), then the overrides in order.
ExperimentConfig resolve_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

// --- logging / run directories -------------------------------------------------

class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(const std::filesystem::path& file, bool echo = true);
  void info(const std::string& message);
  void warn(const std::string& message);

 private:
  std::shared_ptr<std::ofstream> out_;
  bool echo_ = true;
};

/// Creates <root>/<YYYYmmdd-HHMMSS>, adding a numeric suffix instead of ever
/// reusing an existing directory.
std::filesystem::path make_run_dir(const std::filesystem::path& root);

// --- datasets ------------------------------------------------------------------

struct Example {
  std::string utterance_id;
  FBankFeatures features;
  int emotion = -1;
  std::map<std::string, int> attributes;  // auxiliary head labels
};

/// Attribute vocabularies (speaker, gender, language, corpus) built from the
/// training split.
struct AttributeVocab {
  std::map<std::string, std::map<std::string, int>> values;

  static AttributeVocab build(const std::vector<LabeledUtterance>& records);
  int num_classes(const std::string& attribute) const;
  int index(const std::string& attribute, const UtteranceRecord& r) const;  // -1 when unseen
};

std::string attribute_value(const std::string& attribute, const UtteranceRecord& r);

/// Extracts (or reads cached) features for one record.
FBankFeatures features_for(const UtteranceRecord& r, const ExperimentConfig& config);

std::vector<Example> make_examples(const std::vector<LabeledUtterance>& records, const ExperimentConfig& config,
                                   const AttributeVocab* vocab);
std::vector<Example> make_unlabeled_examples(const std::vector<UtteranceRecord>& records,
                                             const ExperimentConfig& config);

/// Heads for the emotion classes plus every auxiliary attribute with a positive weight.
ModelConfig model_for_task(const ExperimentConfig& config, int num_emotions, const AttributeVocab& vocab);

// --- training --------------------------------------------------------------------

/// Decoupled weight decay Adam.
class AdamW {
 public:
  AdamW(const OptimizerConfig& config, std::vector<MsacNet::NamedParameter> params);
  void step();
  long long steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<MsacNet::NamedParameter> params_;
  std::vector<Eigen::VectorXf> m_, v_;
  long long t_ = 0;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_war = 0.0;
  std::optional<EvalReport> valid;
};

struct CheckpointBundle {
  std::filesystem::path path;
  std::unique_ptr<MsacNet> net;
  nlohmann::json config;  // resolved experiment config
  std::vector<std::string> class_names;
  int epoch = 0;
  double best_valid_uar = -1.0;  // -1 without a validation split
};

CheckpointBundle load_bundle(const std::filesystem::path& path);
void save_bundle(const std::filesystem::path& path, MsacNet& net, const ExperimentConfig& config,
                 const std::vector<std::string>& class_names, int epoch, double best_valid_uar);

struct TrainResult {
  CheckpointBundle best;
  std::vector<EpochStats> history;
};

/// Optimizes the weighted multi-head loss; keeps the best validation-UAR state
/// (the last state when there is no validation data).
TrainResult train(const ExperimentConfig& config, const ModelConfig& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& valid_set, const std::vector<std::string>& class_names,
                  const std::filesystem::path& checkpoint_dir, RunLog& log);

/// Emotion argmax over cosines; ties go to the lowest class index.
int predict(const MsacNet& net, const FBankFeatures& features);
EvalReport evaluate(const MsacNet& net, const std::vector<Example>& set, const std::vector<std::string>& class_names);
EvalReport evaluate(const CheckpointBundle& bundle, const std::vector<Example>& set);
/// Unweighted mean of WAR/UAR across folds; confusion counts are summed.
EvalReport aggregate_folds(const std::vector<EvalReport>& folds);

std::vector<OODScoreSet> ood_evaluate(const MsacNet& net, double logit_scale, const std::vector<DetectorSpec>& detectors,
                                      const std::vector<Example>& id_train, const std::vector<Example>& id_set,
                                      const std::vector<Example>& ood_set, int num_classes);

// --- reports -------------------------------------------------------------------

/// metrics.csv: one row per fold plus a "mean" row when several folds exist.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<EvalReport>& folds);
/// Row-normalized confusion grid (recall on the diagonal) followed by raw counts.
void write_confusion(const std::filesystem::path& path, const EvalReport& report);
/// reliability.csv: fold,detector,fpr95,auroc plus per-detector "mean" rows
/// when several folds exist.
void write_reliability_csv(const std::filesystem::path& path,
                           const std::vector<std::vector<ReliabilityReport>>& per_fold);
void write_config_snapshot(const std::filesystem::path& path, const ExperimentConfig& config);

struct RunReport {
  std::vector<EvalReport> folds;
  std::vector<OODScoreSet> scores;  // pooled over folds, one per detector
  std::vector<std::vector<std::string>> id_names, ood_names;  // per score set
  std::vector<std::vector<ReliabilityReport>> reliability;   // per fold, per detector
};

/// Writes config_snapshot.json, metrics.csv, confusion.txt,
/// scores_<detector>.csv and reliability.csv (whichever apply) into `dir`.
void write_report_files(const std::filesystem::path& dir, const RunReport& report, const ExperimentConfig& config);
/// write_report_files into a fresh timestamped directory under `root`.
std::filesystem::path emit_report(const RunReport& report, const ExperimentConfig& config,
                                  const std::filesystem::path& root);

// --- synthetic data ----------------------------------------------------------------

struct SyntheticCorpusSpec {
  int speakers = 5;
  int utterances_per_class = 2;  // per speaker
  std::vector<std::string> emotions{"angry", "happy", "sad", "neutral"};
  std::vector<std::string> ood_emotions{};  // e.g. "frustrated"
  int ood_per_speaker = 0;
  double seconds = 1.0;
  std::string corpus = "synth";
  std::string language = "en";
  std::uint64_t seed = 0;
};

/// Sine mixtures with a class-specific fundamental, per-speaker detuning and
/// noise. Writes wavs plus manifest.jsonl into `dir`; returns the manifest path.
std::filesystem::path make_synthetic_corpus(const std::filesystem::path& dir, const SyntheticCorpusSpec& spec);

// --- end-to-end experiment -----------------------------------------------------------

struct ExperimentData {
  LabelScheme scheme;
  MappedRecords mapped;
  SplitPlan plan;
  std::vector<LabeledUtterance> unseen;  // records of corpora held out from splitting
};

ExperimentData prepare_experiment(const ExperimentConfig& config, RunLog& log);

struct FoldSets {
  std::vector<LabeledUtterance> train, valid, test;
  std::vector<UtteranceRecord> ood;  // OOD-pool records of the test speakers
};
FoldSets fold_sets(const ExperimentData& data, std::size_t fold);

}  // namespace msac
