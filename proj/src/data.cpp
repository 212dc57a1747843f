#include "msac/data.hpp"

#include "msac/error.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

namespace msac {

namespace {

constexpr const char* kFields[] = {"utterance_id", "audio_path", "emotion", "speaker", "gender", "language", "corpus"};

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::string where(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

}  // namespace

void to_json(nlohmann::json& j, const UtteranceRecord& r) {
  j = {{"utterance_id", r.utterance_id}, {"audio_path", r.audio_path}, {"emotion", r.emotion},
       {"speaker", r.speaker},           {"gender", r.gender},         {"language", r.language},
       {"corpus", r.corpus}};
}

std::vector<UtteranceRecord> load_manifest(const std::filesystem::path& path, const WarningSink& warn) {
  std::ifstream in(path);
  if (!in) throw data_error("manifest_missing", "cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<UtteranceRecord> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw data_error("manifest_parse", where(path, number) + ": " + e.what());
    }
    if (!j.is_object()) throw data_error("manifest_parse", where(path, number) + ": expected an object");
    std::string values[7];
    for (int f = 0; f < 7; ++f) {
      const auto it = j.find(kFields[f]);
      if (it == j.end()) throw data_error("manifest_field", where(path, number) + ": missing field '" + kFields[f] + "'");
      if (!it->is_string())
        throw data_error("manifest_field", where(path, number) + ": field '" + kFields[f] + "' must be a string");
      values[f] = trim(it->get<std::string>());
      if (values[f].empty())
        throw data_error("manifest_field", where(path, number) + ": field '" + kFields[f] + "' is empty");
    }
    UtteranceRecord r{values[0], values[1], values[2], values[3], lower(values[4]), values[5], values[6]};
    if (r.gender != "male" && r.gender != "female")
      throw data_error("manifest_field", where(path, number) + ": gender must be male or female, got '" + values[4] + "'");
    if (std::filesystem::path(r.audio_path).is_relative()) r.audio_path = (base / r.audio_path).lexically_normal().string();
    if (!seen.insert(r.utterance_id).second)
      throw data_error("duplicate_id", where(path, number) + ": duplicate utterance_id '" + r.utterance_id + "'");
    out.push_back(std::move(r));
  }
  if (out.empty()) {
    const std::string msg = "manifest " + path.string() + " contains no records";
    if (warn) warn(msg);
    else std::cerr << "warning: " << msg << "\n";
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, std::span<const UtteranceRecord> records) {
  std::ofstream out(path);
  if (!out) throw data_error("io_error", "cannot write " + path.string());
  for (const auto& r : records) out << nlohmann::json(r).dump() << "\n";
}

std::string speaker_key(const UtteranceRecord& r) { return r.corpus + "/" + r.speaker; }

// ---------------------------------------------------------------------------

LabelRule LabelScheme::lookup(const std::string& raw) const {
  const auto it = rules.find(lower(trim(raw)));
  if (it == rules.end()) throw data_error("unmapped_label", "label '" + raw + "' is not covered by scheme " + name);
  return it->second;
}

int LabelScheme::class_index(const std::string& class_name) const {
  const auto it = std::find(class_names.begin(), class_names.end(), class_name);
  if (it == class_names.end()) throw config_error("scheme " + name + " has no class '" + class_name + "'");
  return static_cast<int>(it - class_names.begin());
}

namespace {

LabelScheme build_scheme(std::string name, std::vector<std::string> classes,
                         const std::map<std::string, std::vector<std::string>>& aliases,
                         const std::vector<std::string>& ood, const std::vector<std::string>& drop) {
  LabelScheme s;
  s.name = std::move(name);
  s.class_names = std::move(classes);
  for (int c = 0; c < s.num_classes(); ++c) {
    s.rules[s.class_names[c]] = {LabelFate::kClass, c};
    if (const auto it = aliases.find(s.class_names[c]); it != aliases.end())
      for (const auto& a : it->second) s.rules[a] = {LabelFate::kClass, c};
  }
  for (const auto& o : ood) s.rules[o] = {LabelFate::kOod, -1};
  for (const auto& d : drop) s.rules[d] = {LabelFate::kDrop, -1};
  return s;
}

}  // namespace

LabelScheme LabelScheme::iemocap4() {
  return build_scheme("iemocap4", {"angry", "happy", "sad", "neutral"},
                      {{"angry", {"ang", "anger"}},
                       {"happy", {"hap", "happiness", "excited", "exc"}},
                       {"sad", {"sadness"}},
                       {"neutral", {"neu"}}},
                      {"frustrated", "fru", "frustration", "fear", "fea", "fearful", "surprised", "sur", "surprise"},
                      {"disgust", "dis", "other", "oth", "xxx"});
}

LabelScheme LabelScheme::cross5() {
  return build_scheme("cross5", {"happy", "angry", "sad", "fear", "neutral"},
                      {{"happy", {"hap", "happiness"}},
                       {"angry", {"ang", "anger"}},
                       {"sad", {"sadness"}},
                       {"fear", {"fea", "fearful", "anxiety"}},
                       {"neutral", {"neu"}}},
                      {"boredom", "disgust", "dis", "surprise", "surprised", "sur", "pleasant_surprise", "ps", "calm",
                       "excited", "exc", "frustrated", "fru", "contempt"},
                      {});
}

LabelScheme LabelScheme::preset(const std::string& name) {
  if (name == "iemocap4") return iemocap4();
  if (name == "cross5") return cross5();
  throw config_error("unknown label scheme '" + name + "' (expected iemocap4 or cross5)");
}

MappedRecords map_labels(std::span<const UtteranceRecord> records, const LabelScheme& scheme) {
  MappedRecords out;
  std::set<std::string> unmapped;
  for (const auto& r : records) {
    const auto it = scheme.rules.find(lower(trim(r.emotion)));
    if (it == scheme.rules.end()) {
      unmapped.insert(r.emotion);
      continue;
    }
    switch (it->second.fate) {
      case LabelFate::kClass: out.kept.push_back({r, it->second.index}); break;
      case LabelFate::kOod: out.ood.push_back(r); break;
      case LabelFate::kDrop: out.dropped.push_back(r); break;
    }
  }
  if (!unmapped.empty()) {
    std::string list;
    for (const auto& u : unmapped) list += (list.empty() ? "" : ", ") + u;
    throw data_error("unmapped_label", "scheme " + scheme.name + " does not cover: " + list);
  }
  return out;
}

// ---------------------------------------------------------------------------

void SplitPlan::validate() const {
  if (folds.empty()) throw data_error("empty_split", "split plan has no folds");
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const Fold& fold = folds[f];
    auto check = [&](const std::set<std::string>& a, const std::set<std::string>& b, const char* what) {
      for (const auto& s : a)
        if (b.count(s))
          throw data_error("speaker_overlap", "fold " + std::to_string(f) + ": speaker " + s + " is in both " + what);
    };
    check(fold.train, fold.test, "train and test");
    check(fold.train, fold.valid, "train and valid");
    check(fold.valid, fold.test, "valid and test");
    if (fold.test.empty()) throw data_error("empty_split", "fold " + std::to_string(f) + " has no test speakers");
  }
}

void to_json(nlohmann::json& j, const SplitPlan& p) {
  j = {{"kind", p.kind == SplitKind::kKFold ? "kfold" : "holdout"}, {"seed", p.seed}, {"folds", nlohmann::json::array()}};
  for (const auto& f : p.folds) j["folds"].push_back({{"train", f.train}, {"valid", f.valid}, {"test", f.test}});
}

void from_json(const nlohmann::json& j, SplitPlan& p) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind != "kfold" && kind != "holdout") throw data_error("bad_plan", "unknown split kind '" + kind + "'");
  p.kind = kind == "kfold" ? SplitKind::kKFold : SplitKind::kHoldout;
  p.seed = j.value("seed", std::uint64_t{0});
  p.folds.clear();
  for (const auto& f : j.at("folds"))
    p.folds.push_back({f.at("train").get<std::set<std::string>>(), f.at("valid").get<std::set<std::string>>(),
                       f.at("test").get<std::set<std::string>>()});
}

void save_plan(const std::filesystem::path& path, const SplitPlan& plan) {
  std::ofstream out(path);
  if (!out) throw data_error("io_error", "cannot write " + path.string());
  out << nlohmann::json(plan).dump(2) << "\n";
}

SplitPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("io_error", "cannot open split plan " + path.string());
  try {
    SplitPlan p = nlohmann::json::parse(in).get<SplitPlan>();
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw data_error("bad_plan", path.string() + ": " + e.what());
  }
}

SplitPlan make_kfold_splits(const std::set<std::string>& speakers, int k) {
  if (k < 2) throw config_error("k-fold needs k >= 2, got " + std::to_string(k));
  const std::vector<std::string> sorted(speakers.begin(), speakers.end());
  const auto s = static_cast<int>(sorted.size());
  if (k > s) throw data_error("too_few_speakers", std::to_string(k) + " folds requested but only " +
                                                      std::to_string(s) + " speakers");
  std::vector<std::set<std::string>> groups(k);
  for (int g = 0; g < k; ++g)
    for (int i = g * s / k; i < (g + 1) * s / k; ++i) groups[g].insert(sorted[i]);
  SplitPlan plan;
  plan.kind = SplitKind::kKFold;
  for (int f = 0; f < k; ++f) {
    Fold fold;
    fold.test = groups[f];
    const int v = (f + 1) % k;
    if (k > 2) fold.valid = groups[v];
    for (int g = 0; g < k; ++g)
      if (g != f && (k == 2 || g != v)) fold.train.insert(groups[g].begin(), groups[g].end());
    plan.folds.push_back(std::move(fold));
  }
  plan.validate();
  return plan;
}

SplitPlan make_holdout_splits(const std::map<std::string, std::set<std::string>>& speakers_by_corpus,
                              std::uint64_t seed) {
  if (speakers_by_corpus.empty()) throw data_error("empty_split", "no records to split");
  std::mt19937_64 rng(seed);
  Fold fold;
  for (const auto& [corpus, speakers] : speakers_by_corpus) {
    if (speakers.size() < 3)
      throw data_error("too_few_speakers", "corpus " + corpus + " has " + std::to_string(speakers.size()) +
                                               " speakers; holdout needs at least 3");
    std::vector<std::string> order(speakers.begin(), speakers.end());
    std::shuffle(order.begin(), order.end(), rng);
    fold.valid.insert(order[0]);
    fold.test.insert(order[1]);
    fold.train.insert(order.begin() + 2, order.end());
  }
  SplitPlan plan;
  plan.kind = SplitKind::kHoldout;
  plan.seed = seed;
  plan.folds.push_back(std::move(fold));
  plan.validate();
  return plan;
}

std::vector<std::vector<std::size_t>> build_batches(std::size_t num_records, int batch_size, std::uint64_t seed,
                                                    BatchMode mode, int epoch) {
  if (batch_size < 1) throw config_error("batch size must be positive");
  std::vector<std::size_t> order(num_records);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (mode == BatchMode::kTrain) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < num_records; i += batch_size)
    out.emplace_back(order.begin() + i, order.begin() + std::min(num_records, i + batch_size));
  return out;
}

}  // namespace msac
