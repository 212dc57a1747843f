#pragma once

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace msac {

struct UtteranceRecord {
  std::string utterance_id;
  std::string audio_path;  // absolute, or relative to the manifest's directory
  std::string emotion;
  std::string speaker;
  std::string gender;  // "male" or "female"
  std::string language;
  std::string corpus;

  bool operator==(const UtteranceRecord&) const = default;
};

void to_json(nlohmann::json& j, const UtteranceRecord& r);

using WarningSink = std::function<void(const std::string&)>;

/// One JSON object per line with the seven string fields. Blank lines are
/// skipped; relative audio paths are resolved against the manifest directory.
std::vector<UtteranceRecord> load_manifest(const std::filesystem::path& path, const WarningSink& warn = {});
void write_manifest(const std::filesystem::path& path, std::span<const UtteranceRecord> records);

/// "corpus/speaker": speaker ids are only unique within a corpus.
std::string speaker_key(const UtteranceRecord& r);

enum class LabelFate { kClass, kOod, kDrop };

struct LabelRule {
  LabelFate fate = LabelFate::kDrop;
  int index = -1;  // class index when fate == kClass
};

struct LabelScheme {
  std::string name;
  std::vector<std::string> class_names;
  std::map<std::string, LabelRule> rules;  // keyed by lower-case raw label

  int num_classes() const { return static_cast<int>(class_names.size()); }
  /// Throws a data error for labels the scheme does not cover.
  LabelRule lookup(const std::string& raw) const;
  int class_index(const std::string& class_name) const;

  /// angry, happy (+excited), sad, neutral; frustrated/fear/surprised are OOD.
  static LabelScheme iemocap4();
  /// happy, angry, sad, fear, neutral; the remaining emotions are OOD.
  static LabelScheme cross5();
  static LabelScheme preset(const std::string& name);
};

struct LabeledUtterance {
  UtteranceRecord record;
  int label = -1;
};

struct MappedRecords {
  std::vector<LabeledUtterance> kept;
  std::vector<UtteranceRecord> ood;
  std::vector<UtteranceRecord> dropped;

  std::size_t total() const { return kept.size() + ood.size() + dropped.size(); }
};

/// Routes every record to a class, the OOD pool or DROP. Unmapped labels are
/// collected and reported together.
MappedRecords map_labels(std::span<const UtteranceRecord> records, const LabelScheme& scheme);

enum class SplitKind { kKFold, kHoldout };

struct Fold {
  std::set<std::string> train, valid, test;  // speaker keys
  bool operator==(const Fold&) const = default;
};

struct SplitPlan {
  SplitKind kind = SplitKind::kKFold;
  std::uint64_t seed = 0;
  std::vector<Fold> folds;

  /// Throws unless train/valid/test speakers are pairwise disjoint in every fold.
  void validate() const;
  bool operator==(const SplitPlan&) const = default;
};

void to_json(nlohmann::json& j, const SplitPlan& p);
void from_json(const nlohmann::json& j, SplitPlan& p);
void save_plan(const std::filesystem::path& path, const SplitPlan& plan);
SplitPlan load_plan(const std::filesystem::path& path);

/// Sorted speakers cut into k contiguous, near-equal groups. Fold f tests
/// group f and validates on group f+1 (cyclic); with k = 2 there is no
/// validation group.
template <class Record>
SplitPlan make_kfold_splits(std::span<const Record> records, int k);
/// Per corpus: one seeded-random speaker for validation, one for test.
template <class Record>
SplitPlan make_holdout_splits(std::span<const Record> records, std::uint64_t seed);

SplitPlan make_kfold_splits(const std::set<std::string>& speakers, int k);
SplitPlan make_holdout_splits(const std::map<std::string, std::set<std::string>>& speakers_by_corpus,
                              std::uint64_t seed);

struct FoldPartition {
  std::vector<std::size_t> train, valid, test;  // indices into the records
};

template <class Record>
FoldPartition partition(std::span<const Record> records, const Fold& fold);

enum class BatchMode { kTrain, kEval };

/// Index batches of at most batch_size. Train mode shuffles with a generator
/// seeded from (seed, epoch); eval mode keeps order.
std::vector<std::vector<std::size_t>> build_batches(std::size_t num_records, int batch_size, std::uint64_t seed,
                                                    BatchMode mode, int epoch = 0);

// ---------------------------------------------------------------------------

namespace detail {
inline const UtteranceRecord& as_record(const UtteranceRecord& r) { return r; }
inline const UtteranceRecord& as_record(const LabeledUtterance& r) { return r.record; }
}  // namespace detail

template <class Record>
SplitPlan make_kfold_splits(std::span<const Record> records, int k) {
  std::set<std::string> speakers;
  for (const auto& r : records) speakers.insert(speaker_key(detail::as_record(r)));
  return make_kfold_splits(speakers, k);
}

template <class Record>
SplitPlan make_holdout_splits(std::span<const Record> records, std::uint64_t seed) {
  std::map<std::string, std::set<std::string>> by_corpus;
  for (const auto& r : records) by_corpus[detail::as_record(r).corpus].insert(speaker_key(detail::as_record(r)));
  return make_holdout_splits(by_corpus, seed);
}

template <class Record>
FoldPartition partition(std::span<const Record> records, const Fold& fold) {
  FoldPartition p;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::string key = speaker_key(detail::as_record(records[i]));
    if (fold.train.count(key)) p.train.push_back(i);
    else if (fold.valid.count(key)) p.valid.push_back(i);
    else if (fold.test.count(key)) p.test.push_back(i);
  }
  return p;
}

}  // namespace msac
