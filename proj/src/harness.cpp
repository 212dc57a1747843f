#include "msac/harness.hpp"

#include "msac/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace msac {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kAttributes{"speaker", "gender", "language", "corpus"};

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& section) {
  if (!j.is_object()) throw config_error("config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw config_error("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
}

const json& section(const json& j, const char* name) {
  static const json empty = json::object();
  const auto it = j.find(name);
  return it == j.end() ? empty : *it;
}

std::string format_double(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

}  // namespace

// --- config -------------------------------------------------------------------

ExperimentConfig::ExperimentConfig() {
  for (auto k : {DetectorKind::kMaxLogit, DetectorKind::kOdin, DetectorKind::kRodin, DetectorKind::kReact,
                 DetectorKind::kMahalanobis}) {
    DetectorSpec d;
    d.kind = k;
    detectors.push_back(d);
  }
}

void ExperimentConfig::validate() const {
  if (fbank.num_mel_bins <= 0 || fbank.fft_size <= 0 || !(fbank.frame_length_ms > 0) || !(fbank.frame_shift_ms > 0))
    throw config_error("feature options must be positive");
  if (!(fbank.log_floor > 0)) throw config_error("features.log_floor must be > 0");
  if (model.num_mel_bins != fbank.num_mel_bins)
    throw config_error("model.num_mel_bins (" + std::to_string(model.num_mel_bins) +
                       ") differs from features.num_mel_bins (" + std::to_string(fbank.num_mel_bins) + ")");
  if (target_frames <= 0) throw config_error("features.target_frames must be positive");
  if (augment.freq_mask_width < 0 || augment.time_mask_width < 0 || augment.num_freq_masks < 0 ||
      augment.num_time_masks < 0)
    throw config_error("augmentation widths and counts must be >= 0");
  model.validate();
  if (!(loss.s > 0)) throw config_error("loss.scale must be > 0");
  if (!(loss.m >= 0)) throw config_error("loss.margin must be >= 0");
  msac.validate();
  for (const auto& [attr, alpha] : msac.alpha)
    if (std::find(kAttributes.begin(), kAttributes.end(), attr) == kAttributes.end())
      throw config_error("msac weight for unsupported attribute '" + attr + "'");
  if (optimizer.kind != "adamw") throw config_error("optimizer.kind must be adamw");
  if (!(optimizer.lr > 0)) throw config_error("optimizer.lr must be > 0");
  if (!(optimizer.weight_decay >= 0)) throw config_error("optimizer.weight_decay must be >= 0");
  if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1))
    throw config_error("optimizer betas must be in [0, 1)");
  if (!(optimizer.eps > 0)) throw config_error("optimizer.eps must be > 0");
  if (batch_size < 1) throw config_error("train.batch_size must be >= 1");
  if (epochs < 0) throw config_error("train.epochs must be >= 0");
  const auto& sp = data.split;
  if (sp.kind != "kfold" && sp.kind != "holdout" && sp.kind != "plan")
    throw config_error("data.split.kind must be kfold, holdout or plan");
  if (sp.kind == "kfold" && sp.k < 2) throw config_error("data.split.k must be >= 2");
  if (sp.kind == "plan" && sp.plan_file.empty()) throw config_error("data.split.plan_file is required for kind plan");
  if (sp.fold < -1) throw config_error("data.split.fold must be -1 (all) or a fold index");
  LabelScheme::preset(data.scheme);
  std::set<std::string> names;
  for (const auto& d : detectors) {
    d.validate();
    if (!names.insert(d.name()).second) throw config_error("detector '" + d.name() + "' listed twice");
  }
}

void to_json(json& j, const ExperimentConfig& c) {
  json msac = {{"preset", c.msac_preset}};
  // explicit weights only when they differ from the preset
  const MSACWeights preset = MSACWeights::preset(c.msac_preset);
  if (preset.alpha != c.msac.alpha || preset.roles != c.msac.roles) {
    msac["alpha"] = c.msac.alpha;
    json roles = json::object();
    for (const auto& [k, r] : c.msac.roles) roles[k] = to_string(r);
    msac["roles"] = roles;
  }
  json detectors = json::array();
  for (const auto& d : c.detectors)
    detectors.push_back(
        {{"kind", d.name()}, {"temperature", d.temperature}, {"epsilon", d.epsilon}, {"percentile", d.percentile}});
  j = {{"features",
        {{"frame_length_ms", c.fbank.frame_length_ms},
         {"frame_shift_ms", c.fbank.frame_shift_ms},
         {"num_mel_bins", c.fbank.num_mel_bins},
         {"fft_size", c.fbank.fft_size},
         {"log_floor", c.fbank.log_floor},
         {"target_frames", c.target_frames},
         {"spec_augment", c.spec_augment},
         {"augment",
          {{"freq_mask_width", c.augment.freq_mask_width},
           {"time_mask_width", c.augment.time_mask_width},
           {"num_freq_masks", c.augment.num_freq_masks},
           {"num_time_masks", c.augment.num_time_masks}}}}},
       {"model", c.model},
       {"loss", {{"scale", c.loss.s}, {"margin", c.loss.m}}},
       {"msac", msac},
       {"optimizer",
        {{"kind", c.optimizer.kind},
         {"lr", c.optimizer.lr},
         {"weight_decay", c.optimizer.weight_decay},
         {"beta1", c.optimizer.beta1},
         {"beta2", c.optimizer.beta2},
         {"eps", c.optimizer.eps}}},
       {"train", {{"batch_size", c.batch_size}, {"epochs", c.epochs}, {"seed", c.seed}}},
       {"data",
        {{"manifest", c.data.manifest},
         {"scheme", c.data.scheme},
         {"feature_dir", c.data.feature_dir},
         {"unseen_corpora", c.data.unseen_corpora},
         {"split",
          {{"kind", c.data.split.kind},
           {"k", c.data.split.k},
           {"seed", c.data.split.seed},
           {"fold", c.data.split.fold},
           {"plan_file", c.data.split.plan_file}}}}},
       {"ood", {{"detectors", detectors}}},
       {"output", {{"runs_dir", c.runs_dir}}}};
}

void from_json(const json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  check_keys(j, {"features", "model", "loss", "msac", "optimizer", "train", "data", "ood", "output"}, "");

  const json& f = section(j, "features");
  check_keys(f, {"frame_length_ms", "frame_shift_ms", "num_mel_bins", "fft_size", "log_floor", "target_frames",
                 "spec_augment", "augment"},
             "features");
  c.fbank.frame_length_ms = f.value("frame_length_ms", c.fbank.frame_length_ms);
  c.fbank.frame_shift_ms = f.value("frame_shift_ms", c.fbank.frame_shift_ms);
  c.fbank.num_mel_bins = f.value("num_mel_bins", c.fbank.num_mel_bins);
  c.fbank.fft_size = f.value("fft_size", c.fbank.fft_size);
  c.fbank.log_floor = f.value("log_floor", c.fbank.log_floor);
  c.target_frames = f.value("target_frames", c.target_frames);
  c.spec_augment = f.value("spec_augment", c.spec_augment);
  const json& a = section(f, "augment");
  check_keys(a, {"freq_mask_width", "time_mask_width", "num_freq_masks", "num_time_masks"}, "features.augment");
  c.augment.freq_mask_width = a.value("freq_mask_width", c.augment.freq_mask_width);
  c.augment.time_mask_width = a.value("time_mask_width", c.augment.time_mask_width);
  c.augment.num_freq_masks = a.value("num_freq_masks", c.augment.num_freq_masks);
  c.augment.num_time_masks = a.value("num_time_masks", c.augment.num_time_masks);

  const json& m = section(j, "model");
  check_keys(m, {"num_mel_bins", "shallow_branch_kernels", "shallow_branch_channels", "merge_kernel", "width_divisor",
                 "deep_blocks", "embedding_dim", "projection_hidden", "leaky_slope", "heads", "grl_lambda"},
             "model");
  c.model = m.get<ModelConfig>();
  if (!m.contains("num_mel_bins")) c.model.num_mel_bins = c.fbank.num_mel_bins;

  const json& l = section(j, "loss");
  check_keys(l, {"scale", "margin"}, "loss");
  c.loss.s = l.value("scale", c.loss.s);
  c.loss.m = l.value("margin", c.loss.m);

  const json& w = section(j, "msac");
  check_keys(w, {"preset", "alpha", "roles"}, "msac");
  c.msac_preset = w.value("preset", c.msac_preset);
  c.msac = MSACWeights::preset(c.msac_preset);
  if (w.contains("alpha")) {
    c.msac.alpha = w.at("alpha").get<std::map<std::string, double>>();
    c.msac.roles.clear();
    for (const auto& [k, v] : c.msac.alpha) c.msac.roles[k] = default_role(k);
  }
  if (w.contains("roles"))
    for (const auto& [k, v] : w.at("roles").items()) c.msac.roles[k] = parse_role(v.get<std::string>());

  const json& o = section(j, "optimizer");
  check_keys(o, {"kind", "lr", "weight_decay", "beta1", "beta2", "eps"}, "optimizer");
  c.optimizer.kind = o.value("kind", c.optimizer.kind);
  c.optimizer.lr = o.value("lr", c.optimizer.lr);
  c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
  c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
  c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
  c.optimizer.eps = o.value("eps", c.optimizer.eps);

  const json& t = section(j, "train");
  check_keys(t, {"batch_size", "epochs", "seed"}, "train");
  c.batch_size = t.value("batch_size", c.batch_size);
  c.epochs = t.value("epochs", c.epochs);
  c.seed = t.value("seed", c.seed);

  const json& d = section(j, "data");
  check_keys(d, {"manifest", "scheme", "feature_dir", "unseen_corpora", "split"}, "data");
  c.data.manifest = d.value("manifest", c.data.manifest);
  c.data.scheme = d.value("scheme", c.data.scheme);
  c.data.feature_dir = d.value("feature_dir", c.data.feature_dir);
  c.data.unseen_corpora = d.value("unseen_corpora", c.data.unseen_corpora);
  const json& s = section(d, "split");
  check_keys(s, {"kind", "k", "seed", "fold", "plan_file"}, "data.split");
  c.data.split.kind = s.value("kind", c.data.split.kind);
  c.data.split.k = s.value("k", c.data.split.k);
  c.data.split.seed = s.value("seed", c.data.split.seed);
  c.data.split.fold = s.value("fold", c.data.split.fold);
  c.data.split.plan_file = s.value("plan_file", c.data.split.plan_file);

  const json& od = section(j, "ood");
  check_keys(od, {"detectors"}, "ood");
  if (od.contains("detectors")) {
    c.detectors.clear();
    for (const auto& e : od.at("detectors")) {
      DetectorSpec spec;
      if (e.is_string()) {
        spec.kind = parse_detector(e.get<std::string>());
      } else {
        check_keys(e, {"kind", "temperature", "epsilon", "percentile"}, "ood.detectors[]");
        spec.kind = parse_detector(e.at("kind").get<std::string>());
        spec.temperature = e.value("temperature", spec.temperature);
        spec.epsilon = e.value("epsilon", spec.epsilon);
        spec.percentile = e.value("percentile", spec.percentile);
      }
      c.detectors.push_back(spec);
    }
  }

  const json& out = section(j, "output");
  check_keys(out, {"runs_dir"}, "output");
  c.runs_dir = out.value("runs_dir", c.runs_dir);
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw config_error("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw config_error("override key '" + key + "' has an empty component");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

ExperimentConfig resolve_config(const fs::path& file, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw config_error("cannot open config file " + file.string());
    try {
      j = json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw config_error(file.string() + ": " + e.what());
    }
  }
  // data paths written in a config file are relative to the file; overrides
  // and the runs directory stay relative to the working directory
  const fs::path base = file.parent_path();
  for (const auto& ptr : {"/data/manifest", "/data/feature_dir", "/data/split/plan_file"}) {
    const json::json_pointer at(ptr);
    if (base.empty() || !j.contains(at) || !j.at(at).is_string()) continue;
    const fs::path p = j.at(at).get<std::string>();
    if (!p.empty() && p.is_relative()) j[at] = (base / p).lexically_normal().string();
  }
  for (const auto& o : overrides) apply_override(j, o);
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw config_error(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

// --- logging / run directories ----------------------------------------------------

RunLog::RunLog(const fs::path& file, bool echo)
    : out_(std::make_shared<std::ofstream>(file, std::ios::app)), echo_(echo) {
  if (!*out_) throw data_error("io_error", "cannot open log file " + file.string());
}

namespace {
std::string now_string(const char* format) {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&t, &tm);
  char buf[64];
  std::strftime(buf, sizeof buf, format, &tm);
  return buf;
}
}  // namespace

void RunLog::info(const std::string& message) {
  const std::string line = "[" + now_string("%H:%M:%S") + "] " + message;
  if (out_) {
    *out_ << line << "\n";
    out_->flush();
  }
  if (echo_) std::cerr << line << "\n";
}

void RunLog::warn(const std::string& message) { info("warning: " + message); }

fs::path make_run_dir(const fs::path& root) {
  fs::create_directories(root);
  const std::string stamp = now_string("%Y%m%d-%H%M%S");
  for (int suffix = 0;; ++suffix) {
    const fs::path dir = root / (suffix == 0 ? stamp : stamp + "-" + std::to_string(suffix));
    if (fs::create_directory(dir)) return dir;
  }
}

// --- datasets -------------------------------------------------------------------------

std::string attribute_value(const std::string& attribute, const UtteranceRecord& r) {
  if (attribute == "speaker") return speaker_key(r);
  if (attribute == "gender") return r.gender;
  if (attribute == "language") return r.language;
  if (attribute == "corpus") return r.corpus;
  throw config_error("unknown attribute '" + attribute + "'");
}

AttributeVocab AttributeVocab::build(const std::vector<LabeledUtterance>& records) {
  AttributeVocab v;
  for (const auto& attr : kAttributes) {
    std::set<std::string> seen;
    for (const auto& r : records) seen.insert(attribute_value(attr, r.record));
    if (attr == "gender") seen = {"male", "female"};  // fixed so indices never depend on the split
    int i = 0;
    for (const auto& s : seen) v.values[attr][s] = i++;
  }
  return v;
}

int AttributeVocab::num_classes(const std::string& attribute) const {
  const auto it = values.find(attribute);
  return it == values.end() ? 0 : static_cast<int>(it->second.size());
}

int AttributeVocab::index(const std::string& attribute, const UtteranceRecord& r) const {
  const auto it = values.find(attribute);
  if (it == values.end()) return -1;
  const auto jt = it->second.find(attribute_value(attribute, r));
  return jt == it->second.end() ? -1 : jt->second;
}

FBankFeatures features_for(const UtteranceRecord& r, const ExperimentConfig& config) {
  if (!config.data.feature_dir.empty()) {
    const fs::path cached = fs::path(config.data.feature_dir) / (r.utterance_id + ".fbank");
    if (fs::exists(cached)) {
      FBankFeatures f = read_feature_file(cached);
      if (f.num_mel_bins() != config.fbank.num_mel_bins)
        throw data_error("feature_mismatch", cached.string() + " has " + std::to_string(f.num_mel_bins()) +
                                                 " mel bins, config expects " +
                                                 std::to_string(config.fbank.num_mel_bins));
      return f;
    }
  }
  try {
    return compute_fbanks(load_audio(r.audio_path), config.fbank);
  } catch (const Error& e) {
    throw Error(e.category(), e.code(), r.utterance_id + " (" + r.audio_path + "): " + e.what());
  }
}

std::vector<Example> make_examples(const std::vector<LabeledUtterance>& records, const ExperimentConfig& config,
                                   const AttributeVocab* vocab) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    Example e{r.record.utterance_id, features_for(r.record, config), r.label, {}};
    if (vocab)
      for (const auto& [attr, alpha] : config.msac.alpha)
        if (alpha > 0) e.attributes[attr] = vocab->index(attr, r.record);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Example> make_unlabeled_examples(const std::vector<UtteranceRecord>& records,
                                             const ExperimentConfig& config) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.utterance_id, features_for(r, config), -1, {}});
  return out;
}

ModelConfig model_for_task(const ExperimentConfig& config, int num_emotions, const AttributeVocab& vocab) {
  ModelConfig m = config.model;
  m.num_mel_bins = config.fbank.num_mel_bins;
  m.heads = {{"emotion", num_emotions, AttributeRole::kCorrelated}};
  for (const auto& [attr, alpha] : config.msac.alpha) {
    if (!(alpha > 0)) continue;
    const int k = vocab.num_classes(attr);
    if (k < 1) throw data_error("empty_split", "no training values for attribute '" + attr + "'");
    m.heads.push_back({attr, k, config.msac.roles.at(attr)});
  }
  m.validate();
  return m;
}

// --- training -------------------------------------------------------------------------

AdamW::AdamW(const OptimizerConfig& config, std::vector<MsacNet::NamedParameter> params)
    : cfg_(config), params_(std::move(params)) {
  for (const auto& p : params_) {
    m_.push_back(Eigen::VectorXf::Zero(p.param->numel()));
    v_.push_back(Eigen::VectorXf::Zero(p.param->numel()));
  }
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
  const auto decay = static_cast<float>(1.0 - cfg_.lr * cfg_.weight_decay);
  const auto step = static_cast<float>(cfg_.lr / c1);
  const auto root_c2 = static_cast<float>(std::sqrt(c2));
  const auto eps = static_cast<float>(cfg_.eps);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i].param;
    m_[i] = b1 * m_[i] + (1.0f - b1) * p.grad;
    v_[i] = b2 * v_[i] + (1.0f - b2) * p.grad.cwiseAbs2();
    p.value *= decay;
    p.value.array() -= step * m_[i].array() / (v_[i].array().sqrt() / root_c2 + eps);
  }
}

void save_bundle(const fs::path& path, MsacNet& net, const ExperimentConfig& config,
                 const std::vector<std::string>& class_names, int epoch, double best_valid_uar) {
  save_checkpoint(path, net,
                  {{"experiment", config}, {"class_names", class_names}, {"epoch", epoch},
                   {"best_valid_uar", best_valid_uar}});
}

CheckpointBundle load_bundle(const fs::path& path) {
  LoadedCheckpoint ck = load_checkpoint(path);
  CheckpointBundle b;
  b.path = path;
  b.net = std::make_unique<MsacNet>(std::move(ck.net));
  try {
    b.config = ck.metadata.at("experiment");
    b.class_names = ck.metadata.at("class_names").get<std::vector<std::string>>();
    b.epoch = ck.metadata.value("epoch", 0);
    b.best_valid_uar = ck.metadata.value("best_valid_uar", -1.0);
  } catch (const json::exception& e) {
    throw data_error("bad_checkpoint", path.string() + ": missing experiment metadata (" + e.what() + ")");
  }
  if (static_cast<int>(b.class_names.size()) != b.net->config().head("emotion").num_classes)
    throw data_error("bad_checkpoint", path.string() + ": class names do not match the emotion head");
  return b;
}

namespace {

int argmax_row(const nn::RowMatrix& m, Eigen::Index row) {
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < m.cols(); ++j)
    if (m(row, j) > m(row, best)) best = j;
  return static_cast<int>(best);
}

std::string describe_losses(double emotion, const std::map<std::string, double>& aux) {
  std::string s = "emotion=" + format_double(emotion);
  for (const auto& [k, v] : aux) s += " " + k + "=" + format_double(v);
  return s;
}

}  // namespace

TrainResult train(const ExperimentConfig& config, const ModelConfig& model, const std::vector<Example>& train_set,
                  const std::vector<Example>& valid_set, const std::vector<std::string>& class_names,
                  const fs::path& checkpoint_dir, RunLog& log) {
  config.validate();
  if (train_set.empty()) throw data_error("empty_split", "training split is empty");
  if (model.head("emotion").num_classes != static_cast<int>(class_names.size()))
    throw config_error("emotion head size differs from the number of class names");
  fs::create_directories(checkpoint_dir);
  const fs::path best_path = checkpoint_dir / "best.ckpt";

  MsacNet net(model, config.seed);
  AdamW opt(config.optimizer, net.parameters());
  std::mt19937_64 rng(config.seed + 0x5eed);
  const double emotion_weight = config.msac.emotion_weight();
  log.info("training " + std::to_string(net.parameter_count()) + " parameters on " +
           std::to_string(train_set.size()) + " utterances (" + std::to_string(valid_set.size()) + " validation)");

  TrainResult result;
  double best_uar = -1.0;
  save_bundle(best_path, net, config, class_names, 0, best_uar);
  bool warned_single = false;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochStats stats;
    stats.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    for (const auto& batch : build_batches(train_set.size(), config.batch_size, config.seed, BatchMode::kTrain, epoch)) {
      // batch statistics of a single utterance are degenerate
      if (batch.size() < 2 && train_set.size() >= 2) {
        if (!warned_single) log.warn("skipping trailing single-utterance batches");
        warned_single = true;
        continue;
      }
      std::vector<FBankFeatures> items;
      std::vector<int> labels;
      for (auto i : batch) {
        FBankFeatures f = fix_length(train_set[i].features, config.target_frames, LengthMode::kTrainRandomCropOrPad, rng);
        if (config.spec_augment) f = spec_augment(f, config.augment, rng);
        items.push_back(std::move(f));
        labels.push_back(train_set[i].emotion);
      }
      MsacNet::Trace trace;
      const BatchLogits out = net.forward(make_batch(items), true, trace);
      const LossWithGrad le = am_softmax_loss_with_grad(out.cosines.at("emotion"), labels, config.loss);
      std::map<std::string, nn::RowMatrix> grads{{"emotion", static_cast<float>(emotion_weight) * le.grad}};
      std::map<std::string, double> aux;
      for (const auto& head : model.heads) {
        if (head.attribute == "emotion") continue;
        std::vector<int> al;
        for (auto i : batch) {
          const auto it = train_set[i].attributes.find(head.attribute);
          if (it == train_set[i].attributes.end() || it->second < 0)
            throw data_error("missing_attribute", train_set[i].utterance_id + " has no " + head.attribute + " label");
          al.push_back(it->second);
        }
        const LossWithGrad la = am_softmax_loss_with_grad(out.cosines.at(head.attribute), al, config.loss);
        aux[head.attribute] = la.loss;
        grads[head.attribute] = static_cast<float>(config.msac.alpha.at(head.attribute)) * la.grad;
      }
      const double total = msac_total_loss(le.loss, aux, config.msac);
      if (!std::isfinite(total))
        throw numerical_error("non-finite loss at epoch " + std::to_string(epoch) + " (" + describe_losses(le.loss, aux) +
                              ")");
      net.zero_grad();
      net.backward(trace, grads);
      net.commit_batch_statistics(trace);
      opt.step();
      loss_sum += total * static_cast<double>(batch.size());
      seen += batch.size();
      const auto& cos = out.cosines.at("emotion");
      for (std::size_t r = 0; r < batch.size(); ++r) correct += argmax_row(cos, static_cast<Eigen::Index>(r)) == labels[r];
    }
    stats.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    stats.train_war = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    std::string line = "epoch " + std::to_string(epoch) + " loss " + format_double(stats.train_loss) + " train_war " +
                       format_double(stats.train_war);
    if (!valid_set.empty()) {
      stats.valid = evaluate(net, valid_set, class_names);
      line += " valid_war " + format_double(stats.valid->war) + " valid_uar " + format_double(stats.valid->uar);
      if (stats.valid->uar > best_uar) {
        best_uar = stats.valid->uar;
        save_bundle(best_path, net, config, class_names, epoch, best_uar);
        line += " *";
      }
    } else {
      save_bundle(best_path, net, config, class_names, epoch, best_uar);
    }
    log.info(line);
    result.history.push_back(std::move(stats));
  }
  save_bundle(checkpoint_dir / "last.ckpt", net, config, class_names, config.epochs, best_uar);
  result.best = load_bundle(best_path);
  log.info("best checkpoint: epoch " + std::to_string(result.best.epoch) +
           (valid_set.empty() ? std::string(" (no validation split)") : " valid_uar " + format_double(best_uar)));
  return result;
}

int predict(const MsacNet& net, const FBankFeatures& features) {
  const Eigen::VectorXf cos = net.forward(features).cosines.at("emotion");
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < cos.size(); ++j)
    if (cos[j] > cos[best]) best = j;
  return static_cast<int>(best);
}

EvalReport evaluate(const MsacNet& net, const std::vector<Example>& set, const std::vector<std::string>& class_names) {
  const int k = net.config().head("emotion").num_classes;
  if (k != static_cast<int>(class_names.size()))
    throw config_error("model has " + std::to_string(k) + " emotion classes but the label scheme has " +
                       std::to_string(class_names.size()));
  if (set.empty()) throw data_error("empty_split", "evaluation split is empty");
  std::vector<int> preds, labels;
  for (const auto& e : set) {
    preds.push_back(predict(net, e.features));
    labels.push_back(e.emotion);
  }
  return make_eval_report(preds, labels, k, class_names);
}

EvalReport evaluate(const CheckpointBundle& bundle, const std::vector<Example>& set) {
  return evaluate(*bundle.net, set, bundle.class_names);
}

EvalReport aggregate_folds(const std::vector<EvalReport>& folds) {
  if (folds.empty()) throw data_error("empty_split", "no fold reports to aggregate");
  ConfusionMatrix total = ConfusionMatrix::Zero(folds[0].confusion.rows(), folds[0].confusion.cols());
  double war_sum = 0.0, uar_sum = 0.0;
  for (const auto& f : folds) {
    if (f.confusion.rows() != total.rows()) throw config_error("fold reports disagree on the class count");
    total += f.confusion;
    war_sum += f.war;
    uar_sum += f.uar;
  }
  EvalReport r = make_eval_report(total, folds[0].class_names);
  r.war = war_sum / static_cast<double>(folds.size());
  r.uar = uar_sum / static_cast<double>(folds.size());
  return r;
}

std::vector<OODScoreSet> ood_evaluate(const MsacNet& net, double logit_scale, const std::vector<DetectorSpec>& detectors,
                                      const std::vector<Example>& id_train, const std::vector<Example>& id_set,
                                      const std::vector<Example>& ood_set, int num_classes) {
  const MsacScoringModel model(net, logit_scale);
  auto features = [](const std::vector<Example>& set) {
    std::vector<FBankFeatures> out;
    out.reserve(set.size());
    for (const auto& e : set) out.push_back(e.features);
    return out;
  };
  const auto train_x = features(id_train), id_x = features(id_set), ood_x = features(ood_set);
  std::vector<int> train_y;
  for (const auto& e : id_train) train_y.push_back(e.emotion);
  std::vector<OODScoreSet> out;
  for (const auto& spec : detectors) {
    const FittedDetector fitted = fit_detector(spec, model, train_x, train_y, num_classes);
    out.push_back(evaluate_detector(model, fitted, id_x, ood_x));
  }
  return out;
}

// --- reports ----------------------------------------------------------------------------

namespace {
std::ofstream open_for_write(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw data_error("io_error", "cannot write " + path.string());
  out.precision(6);
  return out;
}

std::string class_label(const EvalReport& r, Eigen::Index c) {
  return c < static_cast<Eigen::Index>(r.class_names.size()) ? r.class_names[c] : "class" + std::to_string(c);
}
}  // namespace

void write_metrics_csv(const fs::path& path, const std::vector<EvalReport>& folds) {
  if (folds.empty()) return;
  auto out = open_for_write(path);
  const EvalReport& first = folds.front();
  out << "fold,war,uar,num_samples";
  for (Eigen::Index c = 0; c < first.confusion.rows(); ++c) out << ",recall_" << class_label(first, c);
  out << "\n";
  auto row = [&](const std::string& name, const EvalReport& r) {
    out << name << "," << r.war << "," << r.uar << "," << r.num_samples();
    for (double v : r.per_class_recall) {
      out << ",";
      if (!std::isnan(v)) out << v;
    }
    out << "\n";
  };
  for (std::size_t f = 0; f < folds.size(); ++f) row(std::to_string(f), folds[f]);
  if (folds.size() > 1) row("mean", aggregate_folds(folds));
}

void write_confusion(const fs::path& path, const EvalReport& report) {
  auto out = open_for_write(path);
  const Eigen::MatrixXd norm = row_normalized(report.confusion);
  std::size_t width = 8;
  for (Eigen::Index c = 0; c < report.confusion.rows(); ++c) width = std::max(width, class_label(report, c).size() + 1);
  auto header = [&] {
    out << std::setw(static_cast<int>(width)) << "true\\pred";
    for (Eigen::Index c = 0; c < report.confusion.cols(); ++c)
      out << std::setw(static_cast<int>(width)) << class_label(report, c);
    out << "\n";
  };
  out << "# row-normalized (diagonal = per-class recall)\n";
  header();
  for (Eigen::Index r = 0; r < norm.rows(); ++r) {
    out << std::setw(static_cast<int>(width)) << class_label(report, r);
    for (Eigen::Index c = 0; c < norm.cols(); ++c)
      out << std::setw(static_cast<int>(width)) << std::fixed << std::setprecision(4) << norm(r, c);
    out << "\n";
  }
  out << "\n# counts\n";
  header();
  for (Eigen::Index r = 0; r < report.confusion.rows(); ++r) {
    out << std::setw(static_cast<int>(width)) << class_label(report, r);
    for (Eigen::Index c = 0; c < report.confusion.cols(); ++c)
      out << std::setw(static_cast<int>(width)) << report.confusion(r, c);
    out << "\n";
  }
}

void write_reliability_csv(const fs::path& path, const std::vector<std::vector<ReliabilityReport>>& per_fold) {
  if (per_fold.empty()) return;
  auto out = open_for_write(path);
  out << "fold,detector,fpr95,auroc\n";
  std::map<std::string, std::pair<double, double>> sums;
  std::vector<std::string> order;
  for (std::size_t f = 0; f < per_fold.size(); ++f)
    for (const auto& r : per_fold[f]) {
      out << f << "," << r.detector << "," << r.fpr95 << "," << r.auroc << "\n";
      if (!sums.count(r.detector)) order.push_back(r.detector);
      sums[r.detector].first += r.fpr95;
      sums[r.detector].second += r.auroc;
    }
  if (per_fold.size() > 1) {
    const auto n = static_cast<double>(per_fold.size());
    for (const auto& d : order) out << "mean," << d << "," << sums[d].first / n << "," << sums[d].second / n << "\n";
  }
}

void write_config_snapshot(const fs::path& path, const ExperimentConfig& config) {
  auto out = open_for_write(path);
  out << json(config).dump(2) << "\n";
}

void write_report_files(const fs::path& dir, const RunReport& report, const ExperimentConfig& config) {
  fs::create_directories(dir);
  write_config_snapshot(dir / "config_snapshot.json", config);
  if (!report.folds.empty()) {
    write_metrics_csv(dir / "metrics.csv", report.folds);
    write_confusion(dir / "confusion.txt",
                    report.folds.size() == 1 ? report.folds.front() : aggregate_folds(report.folds));
  }
  for (std::size_t i = 0; i < report.scores.size(); ++i)
    write_scores_csv(dir / ("scores_" + report.scores[i].detector + ".csv"), report.scores[i], report.id_names.at(i),
                     report.ood_names.at(i));
  write_reliability_csv(dir / "reliability.csv", report.reliability);
}

fs::path emit_report(const RunReport& report, const ExperimentConfig& config, const fs::path& root) {
  const fs::path dir = make_run_dir(root);
  write_report_files(dir, report, config);
  return dir;
}

// --- synthetic data -------------------------------------------------------------------------

fs::path make_synthetic_corpus(const fs::path& dir, const SyntheticCorpusSpec& spec) {
  if (spec.speakers < 1 || spec.utterances_per_class < 0 || spec.emotions.empty())
    throw config_error("synthetic corpus needs speakers and emotions");
  fs::create_directories(dir / "wav");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<UtteranceRecord> records;

  // class c sits at 150 Hz * 2^(0.8 c); OOD classes continue the ladder
  auto synth = [&](int tone_index, int speaker, const std::string& emotion, int n) {
    const int sr = kTargetSampleRate;
    const double detune = 1.0 + 0.03 * (speaker - (spec.speakers - 1) / 2.0) / std::max(1, spec.speakers);
    const double f0 = 150.0 * std::pow(2.0, 0.8 * tone_index) * detune * (1.0 + 0.01 * (unit(rng) - 0.5));
    const double seconds = spec.seconds * (0.9 + 0.2 * unit(rng));
    Waveform w;
    w.sample_rate = sr;
    w.samples.resize(static_cast<std::size_t>(seconds * sr));
    const double phase = 2 * std::numbers::pi * unit(rng);
    const double trem = 2.0 + 3.0 * unit(rng);
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
      const double t = static_cast<double>(i) / sr;
      const double env = 0.75 + 0.25 * std::sin(2 * std::numbers::pi * trem * t);
      double v = 0.0;
      for (int h = 1; h <= 3; ++h) v += std::sin(2 * std::numbers::pi * f0 * h * t + h * phase) / h;
      w.samples[i] = static_cast<float>(0.5 * env * v + 0.01 * noise(rng));
    }
    const char* gender = speaker % 2 == 0 ? "male" : "female";
    const std::string spk = "spk" + std::to_string(speaker);
    const std::string id = spec.corpus + "_" + spk + "_" + emotion + "_" + std::to_string(n);
    const fs::path rel = fs::path("wav") / (id + ".wav");
    write_wav(dir / rel, w);
    records.push_back({id, rel.string(), emotion, spk, gender, spec.language, spec.corpus});
  };

  for (int s = 0; s < spec.speakers; ++s) {
    for (std::size_t c = 0; c < spec.emotions.size(); ++c)
      for (int u = 0; u < spec.utterances_per_class; ++u) synth(static_cast<int>(c), s, spec.emotions[c], u);
    for (int u = 0; u < spec.ood_per_speaker && !spec.ood_emotions.empty(); ++u) {
      const std::size_t o = u % spec.ood_emotions.size();
      synth(static_cast<int>(spec.emotions.size() + o), s, spec.ood_emotions[o], u);
    }
  }
  const fs::path manifest = dir / "manifest.jsonl";
  write_manifest(manifest, records);
  return manifest;
}

// --- experiment plumbing ---------------------------------------------------------------------

ExperimentData prepare_experiment(const ExperimentConfig& config, RunLog& log) {
  if (config.data.manifest.empty()) throw config_error("data.manifest is not set");
  ExperimentData d;
  d.scheme = LabelScheme::preset(config.data.scheme);
  const auto records = load_manifest(config.data.manifest, [&](const std::string& w) { log.warn(w); });
  d.mapped = map_labels(records, d.scheme);
  log.info("manifest " + config.data.manifest + ": " + std::to_string(records.size()) + " records, " +
           std::to_string(d.mapped.kept.size()) + " kept, " + std::to_string(d.mapped.ood.size()) + " OOD, " +
           std::to_string(d.mapped.dropped.size()) + " dropped");

  const std::set<std::string> unseen(config.data.unseen_corpora.begin(), config.data.unseen_corpora.end());
  std::vector<LabeledUtterance> kept;
  for (auto& r : d.mapped.kept) (unseen.count(r.record.corpus) ? d.unseen : kept).push_back(r);
  d.mapped.kept = std::move(kept);
  std::vector<UtteranceRecord> pool;
  for (const auto& r : d.mapped.kept) pool.push_back(r.record);
  for (const auto& r : d.mapped.ood)
    if (!unseen.count(r.corpus)) pool.push_back(r);
  if (pool.empty()) throw data_error("empty_split", "no records left to split");

  const auto& sp = config.data.split;
  if (sp.kind == "kfold") d.plan = make_kfold_splits<UtteranceRecord>(pool, sp.k);
  else if (sp.kind == "holdout") d.plan = make_holdout_splits<UtteranceRecord>(pool, sp.seed);
  else d.plan = load_plan(sp.plan_file);
  d.plan.validate();
  if (sp.fold >= static_cast<int>(d.plan.folds.size()))
    throw config_error("data.split.fold " + std::to_string(sp.fold) + " but the plan has " +
                       std::to_string(d.plan.folds.size()) + " folds");
  return d;
}

FoldSets fold_sets(const ExperimentData& data, std::size_t fold) {
  const Fold& f = data.plan.folds.at(fold);
  FoldSets s;
  for (const auto& r : data.mapped.kept) {
    const std::string key = speaker_key(r.record);
    if (f.train.count(key)) s.train.push_back(r);
    else if (f.valid.count(key)) s.valid.push_back(r);
    else if (f.test.count(key)) s.test.push_back(r);
  }
  for (const auto& r : data.mapped.ood)
    if (f.test.count(speaker_key(r))) s.ood.push_back(r);
  return s;
}

}  // namespace msac
