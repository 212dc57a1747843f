#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "msac/data.hpp"
#include "msac/error.hpp"

#include <fstream>
#include <random>

using namespace msac;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("msac_data_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

fs::path write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

const char* kLine1 =
    R"({"utterance_id":"u1","audio_path":"a/u1.wav","emotion":"angry","speaker":"s1","gender":"male","language":"en","corpus":"iemocap"})";
const char* kLine2 =
    R"({"utterance_id":"u2","audio_path":"/abs/u2.wav","emotion":"exc","speaker":"s2","gender":"Female","language":"en","corpus":"iemocap"})";
const char* kLine3 =
    R"({"utterance_id":"u3","audio_path":"u3.wav","emotion":"sad","speaker":"s1","gender":"male","language":"en","corpus":"iemocap"})";

UtteranceRecord rec(const std::string& id, const std::string& emotion, const std::string& speaker,
                    const std::string& corpus = "c") {
  return {id, id + ".wav", emotion, speaker, "female", "en", corpus};
}

std::vector<UtteranceRecord> speakers_corpus(int speakers, int per_speaker, const std::string& corpus = "c") {
  std::vector<UtteranceRecord> out;
  for (int s = 0; s < speakers; ++s)
    for (int u = 0; u < per_speaker; ++u)
      out.push_back(rec(corpus + std::to_string(s) + "_" + std::to_string(u), "neutral", "spk" + std::to_string(s), corpus));
  return out;
}

void check_disjoint(const SplitPlan& plan) {
  for (const auto& f : plan.folds) {
    for (const auto& s : f.test) {
      CHECK(f.train.count(s) == 0);
      CHECK(f.valid.count(s) == 0);
    }
    for (const auto& s : f.valid) CHECK(f.train.count(s) == 0);
  }
}

}  // namespace

TEST_CASE("well-formed manifest loads with resolved paths") {
  TempDir dir;
  const auto path = write_text(dir.path / "m.jsonl", std::string(kLine1) + "\n" + kLine2 + "\n\n" + kLine3 + "\n");
  const auto records = load_manifest(path);
  REQUIRE(records.size() == 3);
  CHECK(records[0].utterance_id == "u1");
  CHECK(records[0].audio_path == (dir.path / "a/u1.wav").string());
  CHECK(records[1].audio_path == "/abs/u2.wav");
  CHECK(records[1].gender == "female");
  CHECK(records[2].speaker == "s1");
}

TEST_CASE("manifest errors name the offending line") {
  TempDir dir;
  std::string missing = kLine2;
  missing.replace(missing.find("\"gender\":\"Female\","), 18, "");
  const auto path = write_text(dir.path / "m.jsonl", std::string(kLine1) + "\n" + missing + "\n");
  try {
    load_manifest(path);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.category() == ErrorCategory::kData);
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
    CHECK(std::string(e.what()).find("gender") != std::string::npos);
  }

  const auto dup = write_text(dir.path / "d.jsonl", std::string(kLine1) + "\n" + kLine1 + "\n");
  CHECK_THROWS_WITH_AS(load_manifest(dup), doctest::Contains("duplicate"), Error);
  const auto bad = write_text(dir.path / "b.jsonl", std::string(kLine1) + "\n{not json\n");
  CHECK_THROWS_WITH_AS(load_manifest(bad), doctest::Contains(":2"), Error);
  std::string nb = kLine1;
  nb.replace(nb.find("\"male\""), 6, "\"other\"");
  CHECK_THROWS_AS(load_manifest(write_text(dir.path / "g.jsonl", nb)), Error);
  CHECK_THROWS_AS(load_manifest(dir.path / "nope.jsonl"), Error);
}

TEST_CASE("empty manifest yields no records and a warning") {
  TempDir dir;
  const auto path = write_text(dir.path / "e.jsonl", "");
  std::vector<std::string> warnings;
  const auto records = load_manifest(path, [&](const std::string& w) { warnings.push_back(w); });
  CHECK(records.empty());
  CHECK(warnings.size() == 1);
}

TEST_CASE("manifest write and reload round trip") {
  TempDir dir;
  std::vector<UtteranceRecord> r{rec("x", "happy", "a"), rec("y", "sad", "b")};
  for (auto& x : r) x.audio_path = (dir.path / x.audio_path).string();
  write_manifest(dir.path / "m.jsonl", r);
  CHECK(load_manifest(dir.path / "m.jsonl") == r);
}

TEST_CASE("iemocap4 scheme merges excited into happy and routes three classes to OOD") {
  const LabelScheme s = LabelScheme::iemocap4();
  CHECK(s.class_names == std::vector<std::string>{"angry", "happy", "sad", "neutral"});
  CHECK(s.lookup("excited").fate == LabelFate::kClass);
  CHECK(s.lookup("excited").index == s.class_index("happy"));
  CHECK(s.lookup("exc").index == s.class_index("happy"));
  for (const char* o : {"frustrated", "fear", "surprised"}) CHECK(s.lookup(o).fate == LabelFate::kOod);
  CHECK(s.lookup("xxx").fate == LabelFate::kDrop);
  CHECK(s.lookup("Angry").index == 0);
  CHECK_THROWS_AS(s.lookup("boredom"), Error);
}

TEST_CASE("cross5 scheme keeps five classes and routes the residual emotions to OOD") {
  const LabelScheme s = LabelScheme::cross5();
  CHECK(s.num_classes() == 5);
  CHECK(s.lookup("boredom").fate == LabelFate::kOod);
  CHECK(s.lookup("fear").index == s.class_index("fear"));
  CHECK(s.lookup("anger").index == s.class_index("angry"));
  CHECK_THROWS_AS(s.lookup("bewildered"), Error);
  CHECK_THROWS_AS(LabelScheme::preset("iemocap6"), Error);
  CHECK(LabelScheme::preset("cross5").name == "cross5");
}

TEST_CASE("label mapping conserves records and reports every unmapped label") {
  std::vector<UtteranceRecord> r;
  const char* labels[] = {"angry", "happy", "excited", "sad", "neutral", "frustrated", "fear", "surprised", "xxx", "other"};
  for (int i = 0; i < 50; ++i) r.push_back(rec("u" + std::to_string(i), labels[i % 10], "s"));
  const MappedRecords m = map_labels(r, LabelScheme::iemocap4());
  CHECK(m.total() == r.size());
  CHECK(m.kept.size() == 25);
  CHECK(m.ood.size() == 15);
  CHECK(m.dropped.size() == 10);
  for (const auto& k : m.kept)
    if (k.record.emotion == "excited") CHECK(k.label == 1);

  r.push_back(rec("b1", "bored", "s"));
  r.push_back(rec("b2", "calm", "s"));
  try {
    map_labels(r, LabelScheme::iemocap4());
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("bored") != std::string::npos);
    CHECK(std::string(e.what()).find("calm") != std::string::npos);
  }
}

TEST_CASE("k-fold over ten speakers tests one speaker per fold") {
  const auto r = speakers_corpus(10, 3);
  const SplitPlan p = make_kfold_splits<UtteranceRecord>(r, 10);
  CHECK(p.folds.size() == 10);
  std::set<std::string> tested;
  for (std::size_t f = 0; f < p.folds.size(); ++f) {
    const auto& fold = p.folds[f];
    CHECK(fold.test.size() == 1);
    CHECK(fold.valid.size() == 1);
    CHECK(fold.train.size() == 8);
    CHECK(fold.valid == p.folds[(f + 1) % 10].test);
    tested.insert(fold.test.begin(), fold.test.end());
    const FoldPartition part = partition<UtteranceRecord>(r, fold);
    CHECK(part.train.size() + part.valid.size() + part.test.size() == r.size());
    for (auto i : part.test) CHECK(fold.test.count(speaker_key(r[i])));
  }
  CHECK(tested.size() == 10);
  check_disjoint(p);
}

TEST_CASE("k-fold with four speakers and k=2") {
  const auto r = speakers_corpus(4, 2);
  const SplitPlan p = make_kfold_splits<UtteranceRecord>(r, 2);
  std::set<std::string> tested;
  for (const auto& f : p.folds) {
    CHECK(f.test.size() == 2);
    CHECK(f.train.size() == 2);
    CHECK(f.valid.empty());
    tested.insert(f.test.begin(), f.test.end());
  }
  CHECK(tested.size() == 4);
  check_disjoint(p);
  CHECK_THROWS_AS(make_kfold_splits<UtteranceRecord>(r, 5), Error);
  CHECK_THROWS_AS(make_kfold_splits<UtteranceRecord>(r, 1), Error);
}

TEST_CASE("k-fold partitions uneven speaker counts evenly") {
  for (int speakers = 3; speakers <= 23; ++speakers)
    for (int k = 2; k <= std::min(speakers, 10); ++k) {
      const SplitPlan p = make_kfold_splits<UtteranceRecord>(speakers_corpus(speakers, 1), k);
      std::size_t lo = 1000, hi = 0, total = 0;
      for (const auto& f : p.folds) {
        lo = std::min(lo, f.test.size());
        hi = std::max(hi, f.test.size());
        total += f.test.size();
        CHECK(f.train.size() + f.valid.size() + f.test.size() == static_cast<std::size_t>(speakers));
      }
      CHECK(hi - lo <= 1);
      CHECK(total == static_cast<std::size_t>(speakers));
      check_disjoint(p);
    }
}

TEST_CASE("holdout picks one valid and one test speaker per corpus") {
  std::vector<UtteranceRecord> r;
  for (const char* c : {"c1", "c2", "c3", "c4", "c5"}) {
    const auto part = speakers_corpus(4 + static_cast<int>(r.size() % 3), 2, c);
    r.insert(r.end(), part.begin(), part.end());
  }
  const SplitPlan p = make_holdout_splits<UtteranceRecord>(r, 7);
  REQUIRE(p.folds.size() == 1);
  const Fold& f = p.folds[0];
  CHECK(f.valid.size() == 5);
  CHECK(f.test.size() == 5);
  check_disjoint(p);
  const FoldPartition part = partition<UtteranceRecord>(r, f);
  std::set<std::string> valid_corpora, test_corpora;
  for (auto i : part.valid) valid_corpora.insert(r[i].corpus);
  for (auto i : part.test) test_corpora.insert(r[i].corpus);
  CHECK(valid_corpora.size() == 5);
  CHECK(test_corpora.size() == 5);

  CHECK(make_holdout_splits<UtteranceRecord>(r, 7) == p);
  // a different seed picks a different plan for at least one of several seeds
  bool differs = false;
  for (std::uint64_t s = 8; s < 16 && !differs; ++s) differs = !(make_holdout_splits<UtteranceRecord>(r, s) == p);
  CHECK(differs);

  const auto four = speakers_corpus(4, 1);
  const Fold& g = make_holdout_splits<UtteranceRecord>(four, 1).folds[0];
  CHECK(g.valid.size() == 1);
  CHECK(g.test.size() == 1);
  CHECK(g.train.size() == 2);
  CHECK_THROWS_AS(make_holdout_splits<UtteranceRecord>(speakers_corpus(2, 3), 1), Error);
}

TEST_CASE("speaker keys separate equal speaker ids across corpora") {
  std::vector<UtteranceRecord> r{rec("a", "sad", "s1", "x"), rec("b", "sad", "s1", "y"), rec("c", "sad", "s2", "x")};
  const SplitPlan p = make_kfold_splits<UtteranceRecord>(r, 3);
  for (const auto& f : p.folds) CHECK(f.test.size() == 1);
}

TEST_CASE("split plans survive a file round trip and overlaps are rejected") {
  TempDir dir;
  const SplitPlan p = make_kfold_splits<UtteranceRecord>(speakers_corpus(6, 1), 3);
  save_plan(dir.path / "plan.json", p);
  CHECK(load_plan(dir.path / "plan.json") == p);

  SplitPlan bad = p;
  bad.folds[0].train.insert(*bad.folds[0].test.begin());
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("both"), Error);
  write_text(dir.path / "bad.json", nlohmann::json(bad).dump());
  CHECK_THROWS_AS(load_plan(dir.path / "bad.json"), Error);
}

TEST_CASE("batches: sizes, eval order, train shuffles") {
  const auto b = build_batches(130, 64, 1, BatchMode::kEval);
  REQUIRE(b.size() == 3);
  CHECK(b[0].size() == 64);
  CHECK(b[1].size() == 64);
  CHECK(b[2].size() == 2);
  CHECK(b[0][0] == 0);
  CHECK(b[2][1] == 129);
  CHECK(build_batches(130, 64, 99, BatchMode::kEval) == b);

  const auto t1 = build_batches(40, 8, 1, BatchMode::kTrain);
  const auto t2 = build_batches(40, 8, 2, BatchMode::kTrain);
  CHECK(t1 != t2);
  CHECK(build_batches(40, 8, 1, BatchMode::kTrain) == t1);
  CHECK(build_batches(40, 8, 1, BatchMode::kTrain, 1) != t1);
  std::vector<std::size_t> all;
  for (const auto& x : t1) all.insert(all.end(), x.begin(), x.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
  CHECK_THROWS_AS(build_batches(10, 0, 1, BatchMode::kEval), Error);
}
