#include "msac/model.hpp"

#include "msac/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace msac {

using nn::RowMatrix;

namespace {

constexpr std::array<int, 5> kDeepChannels{32, 64, 128, 256, 256};
constexpr int kShallowChannels = 96;
constexpr int kNumPools = 6;  // shallow merge + five deep blocks

}  // namespace

std::vector<DeepBlockSpec> default_deep_blocks(int width_divisor) {
  if (width_divisor <= 0 || kDeepChannels[0] % width_divisor != 0)
    throw config_error("width_divisor must be a positive divisor of 32, got " + std::to_string(width_divisor));
  std::vector<DeepBlockSpec> blocks;
  int in = kShallowChannels / width_divisor;
  for (std::size_t b = 0; b < kDeepChannels.size(); ++b) {
    const int out = kDeepChannels[b] / width_divisor;
    const KernelSize first = b == 0 ? KernelSize{5, 5} : KernelSize{3, 3};
    const KernelSize second = b == 0 ? KernelSize{3, 3} : KernelSize{1, 1};
    blocks.push_back({{first, in, out}, {second, out, out}});
    in = out;
  }
  return blocks;
}

bool is_known_attribute(const std::string& name) {
  static const std::set<std::string> known{"emotion", "gender", "speaker", "language", "corpus"};
  return known.contains(name);
}

ModelConfig ModelConfig::reduced(int width_divisor) {
  ModelConfig c;
  c.width_divisor = width_divisor;
  c.deep_blocks = default_deep_blocks(width_divisor);
  c.shallow_branch_channels = 32 / width_divisor;
  return c;
}

void ModelConfig::validate() const {
  if (num_mel_bins <= 0) throw config_error("num_mel_bins must be positive");
  if (shallow_branch_kernels.empty()) throw config_error("at least one shallow branch is required");
  auto check_kernel = [](const KernelSize& k, const std::string& where) {
    if (k.h <= 0 || k.w <= 0 || k.h % 2 == 0 || k.w % 2 == 0)
      throw config_error(where + ": kernels must be odd and positive");
  };
  for (const auto& k : shallow_branch_kernels) check_kernel(k, "shallow branch");
  check_kernel(merge_kernel, "shallow merge");

  const auto expected = default_deep_blocks(width_divisor);
  if (deep_blocks != expected) {
    std::string trace;
    for (const auto& b : deep_blocks) trace += std::to_string(b.first.in) + "->" + std::to_string(b.second.out) + " ";
    throw config_error("deep stack does not follow the five-block channel chain (96->32->64->128->256->256 / " +
                       std::to_string(width_divisor) + "); got " + trace);
  }
  const int shallow_total = shallow_branch_channels * static_cast<int>(shallow_branch_kernels.size());
  if (shallow_total != deep_blocks.front().first.in)
    throw config_error("shallow branches produce " + std::to_string(shallow_total) + " channels but deep block 1 expects " +
                       std::to_string(deep_blocks.front().first.in));
  if (embedding_dim <= 0 || projection_hidden <= 0) throw config_error("projection widths must be positive");
  if (!(leaky_slope >= 0.0f)) throw config_error("leaky_slope must be >= 0");
  if (!(grl_lambda >= 0.0f)) throw config_error("grl_lambda must be >= 0");

  std::set<std::string> seen;
  for (const auto& h : heads) {
    if (!is_known_attribute(h.attribute)) throw config_error("unknown attribute head '" + h.attribute + "'");
    if (!seen.insert(h.attribute).second) throw config_error("duplicate head '" + h.attribute + "'");
    if (h.num_classes <= 0) throw config_error("head '" + h.attribute + "' needs at least one class");
  }
  if (!seen.contains("emotion")) throw config_error("an 'emotion' head is required");
}

const HeadSpec& ModelConfig::head(const std::string& attribute) const {
  for (const auto& h : heads)
    if (h.attribute == attribute) return h;
  throw config_error("no head for attribute '" + attribute + "'");
}

bool ModelConfig::has_head(const std::string& attribute) const {
  return std::any_of(heads.begin(), heads.end(), [&](const HeadSpec& h) { return h.attribute == attribute; });
}

int ModelConfig::pooled_freq_bins() const {
  int f = num_mel_bins;
  for (int i = 0; i < kNumPools; ++i) f = (f + 1) / 2;
  return f;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  auto kernel = [](const KernelSize& k) { return nlohmann::json::array({k.h, k.w}); };
  nlohmann::json branches = nlohmann::json::array();
  for (const auto& k : c.shallow_branch_kernels) branches.push_back(kernel(k));
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : c.deep_blocks)
    blocks.push_back({{"kernels", {kernel(b.first.kernel), kernel(b.second.kernel)}},
                      {"channels", {b.first.in, b.first.out, b.second.out}}});
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : c.heads)
    heads.push_back({{"attribute", h.attribute}, {"num_classes", h.num_classes}, {"role", to_string(h.role)}});
  j = {{"num_mel_bins", c.num_mel_bins},
       {"shallow_branch_kernels", branches},
       {"shallow_branch_channels", c.shallow_branch_channels},
       {"merge_kernel", kernel(c.merge_kernel)},
       {"width_divisor", c.width_divisor},
       {"deep_blocks", blocks},
       {"embedding_dim", c.embedding_dim},
       {"projection_hidden", c.projection_hidden},
       {"leaky_slope", c.leaky_slope},
       {"heads", heads},
       {"grl_lambda", c.grl_lambda}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto kernel = [](const nlohmann::json& k) { return KernelSize{k.at(0).get<int>(), k.at(1).get<int>()}; };
  c = ModelConfig{};
  c.num_mel_bins = j.value("num_mel_bins", c.num_mel_bins);
  if (j.contains("shallow_branch_kernels")) {
    c.shallow_branch_kernels.clear();
    for (const auto& k : j.at("shallow_branch_kernels")) c.shallow_branch_kernels.push_back(kernel(k));
  }
  c.width_divisor = j.value("width_divisor", c.width_divisor);
  if (c.width_divisor < 1) throw config_error("width_divisor must be >= 1");
  c.shallow_branch_channels = j.value("shallow_branch_channels", 32 / c.width_divisor);
  if (j.contains("merge_kernel")) c.merge_kernel = kernel(j.at("merge_kernel"));
  if (j.contains("deep_blocks")) {
    c.deep_blocks.clear();
    for (const auto& b : j.at("deep_blocks")) {
      const auto& ch = b.at("channels");
      c.deep_blocks.push_back({{kernel(b.at("kernels").at(0)), ch.at(0).get<int>(), ch.at(1).get<int>()},
                               {kernel(b.at("kernels").at(1)), ch.at(1).get<int>(), ch.at(2).get<int>()}});
    }
  } else {
    c.deep_blocks = default_deep_blocks(c.width_divisor);
  }
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.projection_hidden = j.value("projection_hidden", c.projection_hidden);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  if (j.contains("heads")) {
    c.heads.clear();
    for (const auto& h : j.at("heads")) {
      HeadSpec spec;
      spec.attribute = h.at("attribute").get<std::string>();
      spec.num_classes = h.at("num_classes").get<int>();
      if (h.contains("role"))
        spec.role = parse_role(h.at("role").get<std::string>());
      else if (spec.attribute != "emotion")
        spec.role = default_role(spec.attribute);
      c.heads.push_back(spec);
    }
  }
  c.grl_lambda = j.value("grl_lambda", c.grl_lambda);
}

AttributeLogits BatchLogits::row(int i) const {
  AttributeLogits out;
  for (const auto& [name, m] : cosines) out.cosines[name] = m.row(i).transpose();
  out.embedding = embedding.row(i).transpose();
  return out;
}

Tensor make_batch(std::span<const FBankFeatures> items) {
  if (items.empty()) throw data_error("empty_batch", "cannot build a batch from zero utterances");
  const int frames = items[0].num_frames(), bins = items[0].num_mel_bins();
  Tensor t(static_cast<int>(items.size()), 1, frames, bins);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].num_frames() != frames || items[i].num_mel_bins() != bins)
      throw data_error("ragged_batch", "batched utterances must share one shape");
    std::copy(items[i].values.data(), items[i].values.data() + items[i].values.size(),
              t.data.begin() + static_cast<std::ptrdiff_t>(i * t.sample_stride()));
  }
  return t;
}

Tensor make_batch(const FBankFeatures& item) { return make_batch(std::span<const FBankFeatures>(&item, 1)); }

// --- MsacNet --------------------------------------------------------------------

MsacNet::MsacNet(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), reversal_(config_.grl_lambda) {
  config_.validate();
  std::mt19937_64 rng(seed);

  for (const auto& k : config_.shallow_branch_kernels) {
    ConvUnit unit{nn::Conv2d(1, config_.shallow_branch_channels, k.h, k.w, false),
                  nn::BatchNorm(config_.shallow_branch_channels)};
    unit.conv.init(rng);
    branches_.push_back(std::move(unit));
  }
  const int shallow = config_.deep_blocks.front().first.in;
  merge_ = nn::Conv2d(shallow, shallow, config_.merge_kernel.h, config_.merge_kernel.w, true);
  merge_.init(rng);

  for (const auto& spec : config_.deep_blocks) {
    DeepBlock block{{nn::Conv2d(spec.first.in, spec.first.out, spec.first.kernel.h, spec.first.kernel.w, false),
                     nn::BatchNorm(spec.first.out)},
                    {nn::Conv2d(spec.second.in, spec.second.out, spec.second.kernel.h, spec.second.kernel.w, false),
                     nn::BatchNorm(spec.second.out)}};
    block.first.conv.init(rng);
    block.second.conv.init(rng);
    blocks_.push_back(std::move(block));
  }

  const int stats_dim = 2 * config_.deep_blocks.back().second.out * config_.pooled_freq_bins();
  fc1_ = nn::Linear(stats_dim, config_.projection_hidden, true);
  fc2_ = nn::Linear(config_.projection_hidden, config_.embedding_dim, true);
  fc1_.init(rng);
  fc2_.init(rng);
  proj_bn1_ = nn::BatchNorm(config_.projection_hidden);
  proj_bn2_ = nn::BatchNorm(config_.embedding_dim);

  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (const auto& h : config_.heads) {
    nn::Parameter w({h.num_classes, config_.embedding_dim});
    auto m = w.matrix();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = normal(rng);
      m.row(r).normalize();
    }
    heads_.emplace(h.attribute, std::move(w));
  }
}

Tensor MsacNet::unit_forward(const ConvUnit& unit, const Tensor& x, bool training, ConvUnitTrace* trace) const {
  nn::BatchNorm::Cache local;
  nn::BatchNorm::Cache& cache = trace ? trace->bn : local;
  Tensor y = unit.bn.forward(unit.conv.forward(x), training, cache);
  nn::relu_inplace(y);
  if (trace) {
    trace->input = x;
    trace->output = y;
  }
  return y;
}

Tensor MsacNet::unit_backward(ConvUnit& unit, const ConvUnitTrace& trace, Tensor dy, bool accumulate) {
  nn::relu_backward_inplace(trace.output, dy);
  if (accumulate) {
    const Tensor dz = unit.bn.backward(dy, trace.bn);
    return unit.conv.backward(trace.input, dz);
  }
  const Tensor dz = unit.bn.backward_input(dy, trace.bn);
  return unit.conv.backward_input(trace.input, dz);
}

Tensor MsacNet::shallow_extract(const Tensor& input) const {
  if (input.c != 1 || input.w != config_.num_mel_bins)
    throw config_error("input " + input.shape_string() + " does not match 1 channel x " +
                       std::to_string(config_.num_mel_bins) + " mel bins");
  std::vector<Tensor> outs;
  for (const auto& unit : branches_) outs.push_back(unit_forward(unit, input, false, nullptr));
  return nn::avg_pool2x2(merge_.forward(nn::concat_channels(outs)));
}

Tensor MsacNet::deep_extract(const Tensor& map) const {
  if (map.c != config_.deep_blocks.front().first.in)
    throw config_error("deep stack expects " + std::to_string(config_.deep_blocks.front().first.in) +
                       " input channels, got " + std::to_string(map.c));
  Tensor x = map;
  for (const auto& block : blocks_) {
    x = unit_forward(block.second, unit_forward(block.first, x, false, nullptr), false, nullptr);
    x = nn::avg_pool2x2(x);
  }
  return x;
}

RowMatrix time_mean_std(const Tensor& map) {
  if (map.n == 0 || map.h == 0) throw data_error("empty_map", "aggregation pooling on an empty feature map");
  const int cells = map.c * map.w;
  RowMatrix stats(map.n, 2 * cells);
  for (int s = 0; s < map.n; ++s)
    for (int c = 0; c < map.c; ++c)
      for (int f = 0; f < map.w; ++f) {
        double sum = 0.0;
        for (int t = 0; t < map.h; ++t) sum += map.at(s, c, t, f);
        const double mu = sum / map.h;
        double sq = 0.0;
        for (int t = 0; t < map.h; ++t) sq += (map.at(s, c, t, f) - mu) * (map.at(s, c, t, f) - mu);
        stats(s, c * map.w + f) = static_cast<float>(mu);
        stats(s, cells + c * map.w + f) = static_cast<float>(std::sqrt(sq / map.h));
      }
  return stats;
}

RowMatrix MsacNet::pool_forward(const Tensor& map, bool training, Trace* trace) const {
  RowMatrix stats = time_mean_std(map);

  nn::BatchNorm::Cache local1, local2;
  RowMatrix a1 = proj_bn1_.forward(fc1_.forward(stats), training, trace ? trace->proj_bn1 : local1);
  nn::leaky_relu_inplace(a1, config_.leaky_slope);
  RowMatrix a2 = proj_bn2_.forward(fc2_.forward(a1), training, trace ? trace->proj_bn2 : local2);
  nn::leaky_relu_inplace(a2, config_.leaky_slope);
  if (trace) {
    trace->stats = std::move(stats);
    trace->proj_act1 = a1;
    trace->embedding = a2;
  }
  return a2;
}

RowMatrix MsacNet::aggregate_pool(const Tensor& map) const { return pool_forward(map, false, nullptr); }

RowMatrix MsacNet::head_cosines(const std::string& attribute, const RowMatrix& embedding) const {
  const auto it = heads_.find(attribute);
  if (it == heads_.end()) throw config_error("unknown attribute head '" + attribute + "'");
  return normalize_for_cosine(embedding, RowMatrix(it->second.matrix()));
}

BatchLogits MsacNet::forward(const Tensor& input, bool training, Trace& trace) const {
  if (input.c != 1 || input.w != config_.num_mel_bins)
    throw config_error("input " + input.shape_string() + " does not match 1 channel x " +
                       std::to_string(config_.num_mel_bins) + " mel bins");
  trace = Trace{};
  trace.training = training;

  trace.branches.resize(branches_.size());
  std::vector<Tensor> outs;
  for (std::size_t b = 0; b < branches_.size(); ++b)
    outs.push_back(unit_forward(branches_[b], input, training, &trace.branches[b]));
  trace.merge_input = nn::concat_channels(outs);
  trace.merge_output = merge_.forward(trace.merge_input);
  trace.shallow_output = nn::avg_pool2x2(trace.merge_output);
  trace.channel_trace.push_back(trace.shallow_output.c);

  trace.deep_units.resize(2 * blocks_.size());
  Tensor x = trace.shallow_output;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    x = unit_forward(blocks_[b].first, x, training, &trace.deep_units[2 * b]);
    x = unit_forward(blocks_[b].second, x, training, &trace.deep_units[2 * b + 1]);
    trace.deep_pre_pool.push_back(x);
    x = nn::avg_pool2x2(x);
    trace.channel_trace.push_back(x.c);
  }
  trace.deep_output = std::move(x);

  BatchLogits out;
  out.embedding = pool_forward(trace.deep_output, training, &trace);
  for (const auto& h : config_.heads) out.cosines[h.attribute] = head_cosines(h.attribute, out.embedding);
  return out;
}

BatchLogits MsacNet::forward(const Tensor& input) const {
  BatchLogits out;
  out.embedding = aggregate_pool(deep_extract(shallow_extract(input)));
  for (const auto& h : config_.heads) out.cosines[h.attribute] = head_cosines(h.attribute, out.embedding);
  return out;
}

AttributeLogits MsacNet::forward(const FBankFeatures& fbanks) const { return forward(make_batch(fbanks)).row(0); }

Tensor MsacNet::backward(const Trace& trace, const std::map<std::string, RowMatrix>& grad_cosines) {
  return backward_impl(trace, grad_cosines, true);
}

Tensor MsacNet::input_gradient(const Trace& trace, const std::map<std::string, RowMatrix>& grad_cosines) const {
  return const_cast<MsacNet*>(this)->backward_impl(trace, grad_cosines, false);
}

Tensor MsacNet::backward_impl(const Trace& trace, const std::map<std::string, RowMatrix>& grad_cosines,
                              bool accumulate) {
  const RowMatrix& emb = trace.embedding;
  RowMatrix d_emb = RowMatrix::Zero(emb.rows(), emb.cols());
  for (const auto& [name, grad] : grad_cosines) {
    const HeadSpec& spec = config_.head(name);
    nn::Parameter& w = heads_.at(name);
    const RowMatrix wm = w.matrix();
    RowMatrix d_feat, d_w;
    normalize_for_cosine_backward(emb, wm, grad, &d_feat, accumulate ? &d_w : nullptr);
    if (accumulate) w.grad_matrix() += d_w;
    if (name != "emotion" && spec.role == AttributeRole::kAgnostic && reversal_enabled_)
      d_feat = reversal_.backward(reversal_.forward(d_feat));
    d_emb += d_feat;
  }

  // Projection blocks.
  RowMatrix g = d_emb;
  nn::leaky_relu_backward_inplace(trace.embedding, g, config_.leaky_slope);
  g = accumulate ? proj_bn2_.backward(g, trace.proj_bn2) : proj_bn2_.backward_input(g, trace.proj_bn2);
  g = accumulate ? fc2_.backward(trace.proj_act1, g) : fc2_.backward_input(g);
  nn::leaky_relu_backward_inplace(trace.proj_act1, g, config_.leaky_slope);
  g = accumulate ? proj_bn1_.backward(g, trace.proj_bn1) : proj_bn1_.backward_input(g, trace.proj_bn1);
  g = accumulate ? fc1_.backward(trace.stats, g) : fc1_.backward_input(g);

  // Mean/std statistics over time.
  const Tensor& map = trace.deep_output;
  const int cells = map.c * map.w;
  Tensor d_map(map.n, map.c, map.h, map.w);
  for (int s = 0; s < map.n; ++s)
    for (int c = 0; c < map.c; ++c)
      for (int f = 0; f < map.w; ++f) {
        const int cell = c * map.w + f;
        const float g_mean = g(s, cell) / static_cast<float>(map.h);
        const float mu = trace.stats(s, cell);
        const float sd = trace.stats(s, cells + cell);
        const float g_std = sd > 0.0f ? g(s, cells + cell) / (static_cast<float>(map.h) * sd) : 0.0f;
        for (int t = 0; t < map.h; ++t) d_map.at(s, c, t, f) = g_mean + g_std * (map.at(s, c, t, f) - mu);
      }

  // Deep stack.
  Tensor d = std::move(d_map);
  for (std::size_t b = blocks_.size(); b-- > 0;) {
    d = nn::avg_pool2x2_backward(trace.deep_pre_pool[b], d);
    d = unit_backward(blocks_[b].second, trace.deep_units[2 * b + 1], std::move(d), accumulate);
    d = unit_backward(blocks_[b].first, trace.deep_units[2 * b], std::move(d), accumulate);
  }

  // Shallow stage.
  d = nn::avg_pool2x2_backward(trace.merge_output, d);
  d = accumulate ? merge_.backward(trace.merge_input, d) : merge_.backward_input(trace.merge_input, d);
  std::vector<int> widths(branches_.size(), config_.shallow_branch_channels);
  auto parts = nn::split_channels(d, widths);
  Tensor d_input;
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    Tensor di = unit_backward(branches_[b], trace.branches[b], std::move(parts[b]), accumulate);
    if (b == 0) {
      d_input = std::move(di);
    } else {
      for (std::size_t i = 0; i < d_input.data.size(); ++i) d_input.data[i] += di.data[i];
    }
  }
  return d_input;
}

void MsacNet::commit_batch_statistics(const Trace& trace) {
  if (!trace.training) return;
  for (std::size_t b = 0; b < branches_.size(); ++b) branches_[b].bn.update_running(trace.branches[b].bn);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    blocks_[b].first.bn.update_running(trace.deep_units[2 * b].bn);
    blocks_[b].second.bn.update_running(trace.deep_units[2 * b + 1].bn);
  }
  proj_bn1_.update_running(trace.proj_bn1);
  proj_bn2_.update_running(trace.proj_bn2);
}

std::vector<MsacNet::NamedParameter> MsacNet::parameters() {
  std::vector<NamedParameter> out;
  auto add_unit = [&out](const std::string& prefix, ConvUnit& u, const std::string& conv, const std::string& bn) {
    out.push_back({prefix + conv + ".weight", &u.conv.weight});
    out.push_back({prefix + bn + ".gamma", &u.bn.gamma});
    out.push_back({prefix + bn + ".beta", &u.bn.beta});
  };
  for (std::size_t b = 0; b < branches_.size(); ++b)
    add_unit("shallow.branch" + std::to_string(b) + ".", branches_[b], "conv", "bn");
  out.push_back({"shallow.merge.weight", &merge_.weight});
  out.push_back({"shallow.merge.bias", &merge_.bias});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string prefix = "deep.block" + std::to_string(b + 1) + ".";
    add_unit(prefix, blocks_[b].first, "conv1", "bn1");
    add_unit(prefix, blocks_[b].second, "conv2", "bn2");
  }
  out.push_back({"pool.fc1.weight", &fc1_.weight});
  out.push_back({"pool.fc1.bias", &fc1_.bias});
  out.push_back({"pool.bn1.gamma", &proj_bn1_.gamma});
  out.push_back({"pool.bn1.beta", &proj_bn1_.beta});
  out.push_back({"pool.fc2.weight", &fc2_.weight});
  out.push_back({"pool.fc2.bias", &fc2_.bias});
  out.push_back({"pool.bn2.gamma", &proj_bn2_.gamma});
  out.push_back({"pool.bn2.beta", &proj_bn2_.beta});
  for (auto& [name, w] : heads_) out.push_back({"head." + name + ".weight", &w});
  return out;
}

std::vector<MsacNet::NamedBuffer> MsacNet::buffers() {
  std::vector<NamedBuffer> out;
  auto add_bn = [&out](const std::string& prefix, nn::BatchNorm& bn) {
    out.push_back({prefix + ".running_mean", &bn.running_mean});
    out.push_back({prefix + ".running_var", &bn.running_var});
  };
  for (std::size_t b = 0; b < branches_.size(); ++b) add_bn("shallow.branch" + std::to_string(b) + ".bn", branches_[b].bn);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string prefix = "deep.block" + std::to_string(b + 1) + ".";
    add_bn(prefix + "bn1", blocks_[b].first.bn);
    add_bn(prefix + "bn2", blocks_[b].second.bn);
  }
  add_bn("pool.bn1", proj_bn1_);
  add_bn("pool.bn2", proj_bn2_);
  return out;
}

void MsacNet::zero_grad() {
  for (auto& p : parameters()) p.param->zero_grad();
}

std::size_t MsacNet::parameter_count() {
  std::size_t total = 0;
  for (auto& p : parameters()) total += static_cast<std::size_t>(p.param->numel());
  return total;
}

// --- checkpoint -----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'S', 'A', 'C', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    out.write(bytes.data(), sizeof(T));
  } else {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
}

template <typename T>
T get(std::istream& in) {
  std::array<char, sizeof(T)> bytes{};
  in.read(bytes.data(), sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, MsacNet& net, const nlohmann::json& metadata) {
  nlohmann::json header;
  header["config"] = net.config();
  header["metadata"] = metadata.is_null() ? nlohmann::json::object() : metadata;
  nlohmann::json index = nlohmann::json::array();
  std::vector<const Eigen::VectorXf*> payload;
  std::uint64_t offset = 0;
  for (auto& p : net.parameters()) {
    index.push_back({{"name", p.name}, {"kind", "param"}, {"shape", p.param->shape}, {"offset", offset},
                     {"numel", p.param->numel()}});
    payload.push_back(&p.param->value);
    offset += static_cast<std::uint64_t>(p.param->numel());
  }
  for (auto& b : net.buffers()) {
    index.push_back({{"name", b.name}, {"kind", "buffer"}, {"shape", {b.buffer->size()}}, {"offset", offset},
                     {"numel", b.buffer->size()}});
    payload.push_back(b.buffer);
    offset += static_cast<std::uint64_t>(b.buffer->size());
  }
  header["tensors"] = index;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("io_error", "cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto* v : payload)
    for (Eigen::Index i = 0; i < v->size(); ++i) put<float>(out, (*v)[i]);
  if (!out) throw data_error("io_error", "failed writing checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("io_error", "cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw data_error("bad_checkpoint", path.string() + " is not an MSAC checkpoint");
  if (const auto version = get<std::uint32_t>(in); version != kVersion)
    throw data_error("bad_checkpoint", "unsupported checkpoint version " + std::to_string(version));
  const auto header_len = get<std::uint64_t>(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw data_error("bad_checkpoint", path.string() + ": truncated header");
  const auto header = nlohmann::json::parse(text);

  ModelConfig config = header.at("config").get<ModelConfig>();
  config.validate();  // rejects archives whose deep stack breaks the channel chain
  LoadedCheckpoint loaded{MsacNet(config), header.value("metadata", nlohmann::json::object())};

  std::map<std::string, Eigen::VectorXf*> targets;
  for (auto& p : loaded.net.parameters()) targets[p.name] = &p.param->value;
  for (auto& b : loaded.net.buffers()) targets[b.name] = b.buffer;

  const auto payload_start = in.tellg();
  std::set<std::string> filled;
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto it = targets.find(name);
    if (it == targets.end()) throw data_error("bad_checkpoint", "unexpected tensor '" + name + "'");
    const auto numel = entry.at("numel").get<Eigen::Index>();
    if (numel != it->second->size())
      throw data_error("bad_checkpoint", "tensor '" + name + "' has " + std::to_string(numel) + " values, model expects " +
                                             std::to_string(it->second->size()));
    in.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>() * sizeof(float)));
    for (Eigen::Index i = 0; i < numel; ++i) (*it->second)[i] = get<float>(in);
    if (!in) throw data_error("bad_checkpoint", path.string() + ": truncated payload");
    filled.insert(name);
  }
  if (filled.size() != targets.size()) {
    for (const auto& [name, ptr] : targets)
      if (!filled.contains(name)) throw data_error("bad_checkpoint", "checkpoint lacks tensor '" + name + "'");
  }
  return loaded;
}

}  // namespace msac
