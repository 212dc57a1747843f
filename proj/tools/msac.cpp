// Command-line front end: extract-features, train, evaluate, ood-eval, report
// (plus make-synthetic for a self-contained demo corpus).

#include "msac/error.hpp"
#include "msac/harness.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <iostream>
#include <regex>

namespace fs = std::filesystem;
using namespace msac;

namespace {

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "Experiment config (JSON)");
  cmd->add_option("--set", o.overrides, "Override a config value, e.g. --set optimizer.lr=0.0005")->allow_extra_args(false);
}

ExperimentConfig config_from(const CommonOptions& o) { return resolve_config(o.config, o.overrides); }

/// Without --config the checkpoint's own snapshot is the base.
ExperimentConfig config_for_checkpoint(const CommonOptions& o, const CheckpointBundle& b) {
  if (!o.config.empty()) return config_from(o);
  nlohmann::json j = b.config;
  for (const auto& s : o.overrides) apply_override(j, s);
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("checkpoint config: ") + e.what());
  }
  c.validate();
  return c;
}

/// A checkpoint file, or a run directory with checkpoints/fold<k>/best.ckpt.
std::vector<std::pair<int, fs::path>> find_checkpoints(const fs::path& where, int default_fold) {
  std::vector<std::pair<int, fs::path>> out;
  if (fs::is_regular_file(where)) {
    out.emplace_back(std::max(default_fold, 0), where);
    return out;
  }
  const fs::path dir = fs::is_directory(where / "checkpoints") ? where / "checkpoints" : where;
  if (!fs::is_directory(dir)) throw data_error("missing_checkpoint", "no checkpoint at " + where.string());
  const std::regex fold_re("fold([0-9]+)");
  for (const auto& e : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (e.is_directory() && std::regex_match(name, m, fold_re) && fs::exists(e.path() / "best.ckpt"))
      out.emplace_back(std::stoi(m[1]), e.path() / "best.ckpt");
  }
  if (out.empty()) throw data_error("missing_checkpoint", "no fold*/best.ckpt under " + dir.string());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> folds_to_run(const ExperimentConfig& c, const ExperimentData& d) {
  if (c.data.split.fold >= 0) return {c.data.split.fold};
  std::vector<int> all(d.plan.folds.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  return all;
}

struct RunContext {
  fs::path dir;
  RunLog log;
};

RunContext open_run(const ExperimentConfig& c, const std::string& command) {
  RunContext r;
  r.dir = make_run_dir(c.runs_dir);
  r.log = RunLog(r.dir / "log.txt");
  write_config_snapshot(r.dir / "config_snapshot.json", c);
  r.log.info(command + " -> " + r.dir.string());
  return r;
}

void check_classes(const CheckpointBundle& b, const LabelScheme& scheme) {
  if (b.class_names != scheme.class_names)
    throw config_error(b.path.string() + " was trained on " + std::to_string(b.class_names.size()) +
                       " classes that do not match scheme " + scheme.name);
}

// --- subcommands ------------------------------------------------------------------

int cmd_extract(const CommonOptions& o, std::string out_dir) {
  const ExperimentConfig c = config_from(o);
  if (out_dir.empty()) out_dir = c.data.feature_dir;
  if (out_dir.empty()) throw config_error("give --out or set data.feature_dir");
  if (c.data.manifest.empty()) throw config_error("data.manifest is not set");
  fs::create_directories(out_dir);
  RunLog log;
  const auto records = load_manifest(c.data.manifest, [&](const std::string& w) { log.warn(w); });
  ExperimentConfig direct = c;
  direct.data.feature_dir.clear();  // always recompute
  for (const auto& r : records) write_feature_file(fs::path(out_dir) / (r.utterance_id + ".fbank"), features_for(r, direct));
  log.info("wrote " + std::to_string(records.size()) + " feature files to " + out_dir);
  return 0;
}

int cmd_train(const CommonOptions& o) {
  const ExperimentConfig c = config_from(o);
  RunContext run = open_run(c, "train");
  const ExperimentData data = prepare_experiment(c, run.log);
  save_plan(run.dir / "split_plan.json", data.plan);

  RunReport report;
  std::vector<EvalReport> unseen;
  std::ofstream history(run.dir / "history.csv");
  history << "fold,epoch,train_loss,train_war,valid_war,valid_uar\n";
  for (int f : folds_to_run(c, data)) {
    const FoldSets sets = fold_sets(data, f);
    run.log.info("fold " + std::to_string(f) + ": " + std::to_string(sets.train.size()) + " train, " +
                 std::to_string(sets.valid.size()) + " valid, " + std::to_string(sets.test.size()) + " test");
    const AttributeVocab vocab = AttributeVocab::build(sets.train);
    const auto train_set = make_examples(sets.train, c, &vocab);
    const auto valid_set = make_examples(sets.valid, c, &vocab);
    const ModelConfig model = model_for_task(c, data.scheme.num_classes(), vocab);
    const TrainResult r = train(c, model, train_set, valid_set, data.scheme.class_names,
                                run.dir / "checkpoints" / ("fold" + std::to_string(f)), run.log);
    for (const auto& h : r.history) {
      history << f << "," << h.epoch << "," << h.train_loss << "," << h.train_war << ",";
      if (h.valid) history << h.valid->war << "," << h.valid->uar;
      else history << ",";
      history << "\n";
    }
    if (!sets.test.empty()) {
      report.folds.push_back(evaluate(r.best, make_examples(sets.test, c, nullptr)));
      run.log.info("fold " + std::to_string(f) + " test war " + std::to_string(report.folds.back().war) + " uar " +
                   std::to_string(report.folds.back().uar));
    }
    if (!data.unseen.empty()) unseen.push_back(evaluate(r.best, make_examples(data.unseen, c, nullptr)));
  }
  write_report_files(run.dir, report, c);
  if (!unseen.empty()) write_metrics_csv(run.dir / "metrics_unseen.csv", unseen);
  std::cout << run.dir.string() << "\n";
  return 0;
}

int cmd_evaluate(const CommonOptions& o, const std::string& checkpoint) {
  const auto first = load_bundle(find_checkpoints(checkpoint, 0).front().second);
  const ExperimentConfig c = config_for_checkpoint(o, first);
  RunContext run = open_run(c, "evaluate");
  const ExperimentData data = prepare_experiment(c, run.log);
  RunReport report;
  for (const auto& [fold, path] : find_checkpoints(checkpoint, c.data.split.fold)) {
    const CheckpointBundle b = load_bundle(path);
    check_classes(b, data.scheme);
    if (fold >= static_cast<int>(data.plan.folds.size()))
      throw config_error("checkpoint for fold " + std::to_string(fold) + " but the plan has " +
                         std::to_string(data.plan.folds.size()) + " folds");
    const FoldSets sets = fold_sets(data, fold);
    report.folds.push_back(evaluate(b, make_examples(sets.test, c, nullptr)));
    run.log.info("fold " + std::to_string(fold) + " (" + path.string() + "): war " +
                 std::to_string(report.folds.back().war) + " uar " + std::to_string(report.folds.back().uar));
  }
  write_report_files(run.dir, report, c);
  std::cout << run.dir.string() << "\n";
  return 0;
}

int cmd_ood(const CommonOptions& o, const std::string& checkpoint) {
  const auto first = load_bundle(find_checkpoints(checkpoint, 0).front().second);
  const ExperimentConfig c = config_for_checkpoint(o, first);
  RunContext run = open_run(c, "ood-eval");
  const ExperimentData data = prepare_experiment(c, run.log);
  RunReport report;
  for (const auto& [fold, path] : find_checkpoints(checkpoint, c.data.split.fold)) {
    const CheckpointBundle b = load_bundle(path);
    check_classes(b, data.scheme);
    const FoldSets sets = fold_sets(data, fold);
    if (sets.ood.empty())
      throw data_error("empty_split", "fold " + std::to_string(fold) + " has no OOD-pool utterances from test speakers");
    const auto id_train = make_examples(sets.train, c, nullptr);
    const auto id_test = make_examples(sets.test, c, nullptr);
    const auto ood = make_unlabeled_examples(sets.ood, c);
    const auto scores = ood_evaluate(*b.net, c.loss.s, c.detectors, id_train, id_test, ood, data.scheme.num_classes());
    std::vector<ReliabilityReport> rel;
    for (std::size_t d = 0; d < scores.size(); ++d) {
      rel.push_back(scores[d].report());
      run.log.info("fold " + std::to_string(fold) + " " + rel.back().detector + ": fpr95 " +
                   std::to_string(rel.back().fpr95) + " auroc " + std::to_string(rel.back().auroc));
      if (report.scores.size() <= d) {
        report.scores.push_back({scores[d].detector, {}, {}});
        report.id_names.emplace_back();
        report.ood_names.emplace_back();
      }
      auto& pooled = report.scores[d];
      pooled.id_scores.insert(pooled.id_scores.end(), scores[d].id_scores.begin(), scores[d].id_scores.end());
      pooled.ood_scores.insert(pooled.ood_scores.end(), scores[d].ood_scores.begin(), scores[d].ood_scores.end());
      for (const auto& e : id_test) report.id_names[d].push_back(e.utterance_id);
      for (const auto& e : ood) report.ood_names[d].push_back(e.utterance_id);
    }
    report.reliability.push_back(std::move(rel));
  }
  write_report_files(run.dir, report, c);
  std::cout << run.dir.string() << "\n";
  return 0;
}

int cmd_report(const CommonOptions& o, std::string run_dir) {
  if (run_dir.empty()) {
    const ExperimentConfig c = config_from(o);
    if (!fs::is_directory(c.runs_dir)) throw data_error("missing_run", "no runs under " + c.runs_dir);
    std::vector<fs::path> runs;
    for (const auto& e : fs::directory_iterator(c.runs_dir))
      if (e.is_directory()) runs.push_back(e.path());
    if (runs.empty()) throw data_error("missing_run", "no runs under " + c.runs_dir);
    // names are <timestamp> or <timestamp>-<n>; order by both parts
    auto order = [](const fs::path& p) {
      const std::string name = p.filename().string();
      const auto dash = name.find('-', name.find('-') + 1);
      const int n = dash == std::string::npos ? 0 : std::atoi(name.c_str() + dash + 1);
      return std::make_pair(name.substr(0, dash), n);
    };
    run_dir = std::max_element(runs.begin(), runs.end(), [&](const fs::path& a, const fs::path& b) {
                return order(a) < order(b);
              })->string();
  }
  bool any = false;
  for (const char* name : {"metrics.csv", "metrics_unseen.csv", "reliability.csv", "confusion.txt"}) {
    const fs::path p = fs::path(run_dir) / name;
    if (!fs::exists(p)) continue;
    std::ifstream in(p);
    std::cout << "== " << p.string() << "\n" << in.rdbuf() << "\n";
    any = true;
  }
  if (!any) throw data_error("missing_run", run_dir + " has no report files");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speech emotion recognition with multiple speech attribute control"};
  app.require_subcommand(1);

  CommonOptions common;
  std::string out_dir, checkpoint, run_dir;
  SyntheticCorpusSpec synth;
  std::vector<std::string> ood_emotions;

  auto* extract = app.add_subcommand("extract-features", "Compute and cache log mel filterbanks for a manifest");
  add_common(extract, common);
  extract->add_option("--out", out_dir, "Feature directory (default: data.feature_dir)");

  auto* train_cmd = app.add_subcommand("train", "Train every configured fold and evaluate on its test speakers");
  add_common(train_cmd, common);

  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint or a training run on the test split");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file or training run directory")->required();

  auto* ood_cmd = app.add_subcommand("ood-eval", "Score ID test and OOD-pool utterances with each detector");
  add_common(ood_cmd, common);
  ood_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file or training run directory")->required();

  auto* report_cmd = app.add_subcommand("report", "Print the metrics of a run (default: the latest)");
  add_common(report_cmd, common);
  report_cmd->add_option("--run", run_dir, "Run directory");

  auto* synth_cmd = app.add_subcommand("make-synthetic", "Write a synthetic sine-tone corpus and manifest");
  synth_cmd->add_option("--out", out_dir, "Output directory")->required();
  synth_cmd->add_option("--speakers", synth.speakers, "Number of speakers");
  synth_cmd->add_option("--per-class", synth.utterances_per_class, "Utterances per class and speaker");
  synth_cmd->add_option("--ood-per-speaker", synth.ood_per_speaker, "OOD utterances per speaker");
  synth_cmd->add_option("--ood-emotions", ood_emotions, "OOD emotion labels (default frustrated)");
  synth_cmd->add_option("--seconds", synth.seconds, "Mean utterance duration");
  synth_cmd->add_option("--corpus", synth.corpus, "Corpus name");
  synth_cmd->add_option("--seed", synth.seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorCategory::kConfig);
  }

  try {
    if (*extract) return cmd_extract(common, out_dir);
    if (*train_cmd) return cmd_train(common);
    if (*eval_cmd) return cmd_evaluate(common, checkpoint);
    if (*ood_cmd) return cmd_ood(common, checkpoint);
    if (*report_cmd) return cmd_report(common, run_dir);
    if (*synth_cmd) {
      synth.ood_emotions = ood_emotions.empty() && synth.ood_per_speaker > 0 ? std::vector<std::string>{"frustrated"}
                                                                             : ood_emotions;
      std::cout << make_synthetic_corpus(out_dir, synth).string() << "\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return static_cast<int>(ErrorCategory::kConfig);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ErrorCategory::kData);
  }
  return 0;
}
