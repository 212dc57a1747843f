#include "msac/features.hpp"

#include "msac/error.hpp"

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>

namespace msac {

namespace {

// FFTW planning is not thread-safe; execution with the new-array interface is.
class RealFftPlan {
 public:
  explicit RealFftPlan(int n) : n_(n) {
    float* in = fftwf_alloc_real(n);
    fftwf_complex* out = fftwf_alloc_complex(n / 2 + 1);
    plan_ = fftwf_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE);
    fftwf_free(in);
    fftwf_free(out);
  }
  ~RealFftPlan() { fftwf_destroy_plan(plan_); }
  RealFftPlan(const RealFftPlan&) = delete;
  RealFftPlan& operator=(const RealFftPlan&) = delete;

  void execute(float* in, fftwf_complex* out) const { fftwf_execute_dft_r2c(plan_, in, out); }
  int size() const { return n_; }

 private:
  int n_;
  fftwf_plan plan_;
};

const RealFftPlan& plan_for(int n) {
  static std::mutex mutex;
  static std::map<int, std::unique_ptr<RealFftPlan>> plans;
  std::lock_guard lock(mutex);
  auto& slot = plans[n];
  if (!slot) slot = std::make_unique<RealFftPlan>(n);
  return *slot;
}

struct FftBuffers {
  float* in;
  fftwf_complex* out;
  explicit FftBuffers(int n) : in(fftwf_alloc_real(n)), out(fftwf_alloc_complex(n / 2 + 1)) {}
  ~FftBuffers() {
    fftwf_free(in);
    fftwf_free(out);
  }
  FftBuffers(const FftBuffers&) = delete;
  FftBuffers& operator=(const FftBuffers&) = delete;
};

std::vector<float> hamming(int length) {
  std::vector<float> w(length);
  if (length == 1) {
    w[0] = 1.0f;
    return w;
  }
  for (int n = 0; n < length; ++n)
    w[n] = static_cast<float>(0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / (length - 1)));
  return w;
}

template <typename T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return value;
}

template <typename T>
void write_le(std::ostream& out, T value) {
  value = to_little(value);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  return to_little(value);
}

}  // namespace

int num_frames_for(std::int64_t num_samples, int frame_length, int frame_shift) {
  if (num_samples < frame_length) return 0;
  return static_cast<int>((num_samples - frame_length) / frame_shift + 1);
}

double hz_to_mel(double hz) { return 1127.0 * std::log1p(hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * std::expm1(mel / 1127.0); }

std::vector<double> mel_center_frequencies(int num_bins, int sample_rate) {
  const double low = hz_to_mel(0.0);
  const double high = hz_to_mel(sample_rate / 2.0);
  const double delta = (high - low) / (num_bins + 1);
  std::vector<double> centers(num_bins);
  for (int b = 0; b < num_bins; ++b) centers[b] = mel_to_hz(low + (b + 1) * delta);
  return centers;
}

RowMatrix mel_filterbank(int num_bins, int fft_size, int sample_rate) {
  if (num_bins <= 0 || fft_size <= 0) throw config_error("mel_filterbank: non-positive size");
  const int num_fft_bins = fft_size / 2 + 1;
  const double low = hz_to_mel(0.0);
  const double high = hz_to_mel(sample_rate / 2.0);
  const double delta = (high - low) / (num_bins + 1);
  const double bin_hz = static_cast<double>(sample_rate) / fft_size;

  RowMatrix bank = RowMatrix::Zero(num_bins, num_fft_bins);
  for (int b = 0; b < num_bins; ++b) {
    const double left = low + b * delta;
    const double center = left + delta;
    const double right = center + delta;
    for (int k = 0; k < num_fft_bins; ++k) {
      const double mel = hz_to_mel(k * bin_hz);
      if (mel <= left || mel >= right) continue;
      bank(b, k) = static_cast<float>(mel <= center ? (mel - left) / (center - left)
                                                    : (right - mel) / (right - center));
    }
  }
  return bank;
}

void normalize_peak(Waveform& waveform) {
  float peak = 0.0f;
  for (float s : waveform.samples) {
    if (!std::isfinite(s)) throw data_error("invalid_waveform", "non-finite sample");
    peak = std::max(peak, std::abs(s));
  }
  if (peak == 0.0f) return;
  for (float& s : waveform.samples) s /= peak;
}

Waveform resample(const Waveform& waveform, int target_rate) {
  if (target_rate <= 0 || waveform.sample_rate <= 0) throw config_error("resample: non-positive rate");
  if (waveform.sample_rate == target_rate) return waveform;

  const double ratio = static_cast<double>(target_rate) / waveform.sample_rate;
  const double cutoff = std::min(1.0, ratio);  // relative to the input Nyquist
  constexpr int kZeroCrossings = 16;
  const double half_width = kZeroCrossings / cutoff;

  const auto in_len = static_cast<std::int64_t>(waveform.samples.size());
  const auto out_len = static_cast<std::int64_t>(std::floor(in_len * ratio));
  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(out_len);
  for (std::int64_t i = 0; i < out_len; ++i) {
    const double t = i / ratio;
    const auto first = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil(t - half_width)));
    const auto last = std::min<std::int64_t>(in_len - 1, static_cast<std::int64_t>(std::floor(t + half_width)));
    double acc = 0.0;
    for (std::int64_t j = first; j <= last; ++j) {
      const double x = (t - j) * cutoff;
      const double sinc = x == 0.0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
      const double window = 0.5 + 0.5 * std::cos(std::numbers::pi * (t - j) / half_width);
      acc += waveform.samples[j] * sinc * window * cutoff;
    }
    out.samples[i] = static_cast<float>(acc);
  }
  return out;
}

FBankFeatures compute_fbanks(const Waveform& waveform, const FbankOptions& options) {
  if (waveform.samples.empty()) throw data_error("utterance_too_short", "empty waveform");
  for (float s : waveform.samples)
    if (!std::isfinite(s)) throw data_error("invalid_waveform", "non-finite sample");

  const int frame_length = static_cast<int>(std::lround(options.frame_length_ms * waveform.sample_rate / 1000.0));
  const int frame_shift = static_cast<int>(std::lround(options.frame_shift_ms * waveform.sample_rate / 1000.0));
  if (frame_length <= 0 || frame_shift <= 0) throw config_error("frame length and shift must be positive");
  if (options.fft_size < frame_length)
    throw config_error("fft_size " + std::to_string(options.fft_size) + " is smaller than the frame (" +
                       std::to_string(frame_length) + " samples)");

  const int frames = num_frames_for(static_cast<std::int64_t>(waveform.samples.size()), frame_length, frame_shift);
  if (frames == 0)
    throw data_error("utterance_too_short", std::to_string(waveform.samples.size()) +
                                                " samples is shorter than one frame of " +
                                                std::to_string(frame_length));

  const RowMatrix bank = mel_filterbank(options.num_mel_bins, options.fft_size, waveform.sample_rate);
  const std::vector<float> window = hamming(frame_length);
  const RealFftPlan& plan = plan_for(options.fft_size);
  FftBuffers buf(options.fft_size);
  const int num_fft_bins = options.fft_size / 2 + 1;
  Eigen::VectorXf power(num_fft_bins);

  FBankFeatures result;
  result.frame_length_ms = options.frame_length_ms;
  result.frame_shift_ms = options.frame_shift_ms;
  result.values.resize(frames, options.num_mel_bins);

  for (int f = 0; f < frames; ++f) {
    const float* frame = waveform.samples.data() + static_cast<std::ptrdiff_t>(f) * frame_shift;
    for (int n = 0; n < frame_length; ++n) buf.in[n] = frame[n] * window[n];
    std::fill(buf.in + frame_length, buf.in + options.fft_size, 0.0f);
    plan.execute(buf.in, buf.out);
    for (int k = 0; k < num_fft_bins; ++k) power[k] = buf.out[k][0] * buf.out[k][0] + buf.out[k][1] * buf.out[k][1];
    for (int b = 0; b < options.num_mel_bins; ++b) {
      const double energy = bank.row(b).dot(power.transpose());
      result.values(f, b) = static_cast<float>(std::log(energy + options.log_floor));
    }
  }
  return result;
}

FBankFeatures compute_fbanks(const Waveform& waveform, int num_mel_bins, int fft_size) {
  FbankOptions options;
  options.num_mel_bins = num_mel_bins;
  options.fft_size = fft_size;
  return compute_fbanks(waveform, options);
}

FBankFeatures spec_augment(const FBankFeatures& fbanks, const AugmentSpec& spec, std::mt19937_64& rng) {
  FBankFeatures out = fbanks;
  const int frames = fbanks.num_frames();
  const int bins = fbanks.num_mel_bins();
  if (frames == 0 || bins == 0) return out;

  auto draw_span = [&rng](int max_width, int extent) {
    std::uniform_int_distribution<int> width_dist(0, std::max(0, max_width));
    const int width = std::min(width_dist(rng), extent);
    std::uniform_int_distribution<int> start_dist(0, extent - width);
    return std::pair{start_dist(rng), width};
  };

  for (int i = 0; i < spec.num_freq_masks; ++i) {
    const auto [start, width] = draw_span(spec.freq_mask_width, bins);
    out.values.middleCols(start, width).setZero();
  }
  for (int i = 0; i < spec.num_time_masks; ++i) {
    const auto [start, width] = draw_span(spec.time_mask_width, frames);
    out.values.middleRows(start, width).setZero();
  }
  return out;
}

FBankFeatures fix_length(const FBankFeatures& fbanks, int target_frames, LengthMode mode, std::mt19937_64& rng) {
  if (mode == LengthMode::kEvalFull) return fbanks;
  if (target_frames <= 0) throw config_error("target_frames must be positive in train mode");

  FBankFeatures out;
  out.frame_length_ms = fbanks.frame_length_ms;
  out.frame_shift_ms = fbanks.frame_shift_ms;
  const int frames = fbanks.num_frames();
  if (frames > target_frames) {
    std::uniform_int_distribution<int> start_dist(0, frames - target_frames);
    out.values = fbanks.values.middleRows(start_dist(rng), target_frames);
  } else {
    out.values = RowMatrix::Zero(target_frames, fbanks.num_mel_bins());
    out.values.topRows(frames) = fbanks.values;
  }
  return out;
}

// --- I/O ------------------------------------------------------------------------

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("io_error", "cannot open " + path.string());

  char tag[4];
  auto read_tag = [&](const char* expected) {
    in.read(tag, 4);
    if (!in || std::memcmp(tag, expected, 4) != 0)
      throw data_error("invalid_waveform", path.string() + ": expected '" + std::string(expected) + "' chunk");
  };
  read_tag("RIFF");
  read_le<std::uint32_t>(in);
  read_tag("WAVE");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  while (in.read(tag, 4)) {
    const auto size = read_le<std::uint32_t>(in);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      format = read_le<std::uint16_t>(in);
      channels = read_le<std::uint16_t>(in);
      rate = read_le<std::uint32_t>(in);
      read_le<std::uint32_t>(in);  // byte rate
      read_le<std::uint16_t>(in);  // block align
      bits = read_le<std::uint16_t>(in);
      in.seekg(size - 16 + (size & 1), std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw data_error("invalid_waveform", path.string() + ": data chunk before fmt chunk");
      if (format != 1 || bits != 16 || channels == 0)
        throw data_error("invalid_waveform", path.string() + ": only 16-bit linear PCM is supported");
      const std::size_t total = size / 2;
      const std::size_t frames = total / channels;
      Waveform wav;
      wav.sample_rate = static_cast<int>(rate);
      wav.samples.assign(frames, 0.0f);
      for (std::size_t i = 0; i < frames; ++i) {
        float acc = 0.0f;
        for (int c = 0; c < channels; ++c) acc += read_le<std::int16_t>(in) / 32768.0f;
        wav.samples[i] = acc / channels;
      }
      if (!in) throw data_error("invalid_waveform", path.string() + ": truncated data chunk");
      return wav;
    } else {
      in.seekg(size + (size & 1), std::ios::cur);
    }
  }
  throw data_error("invalid_waveform", path.string() + ": no data chunk");
}

void write_wav(const std::filesystem::path& path, const Waveform& waveform) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("io_error", "cannot write " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(waveform.samples.size() * 2);
  out.write("RIFF", 4);
  write_le<std::uint32_t>(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_le<std::uint32_t>(out, 16);
  write_le<std::uint16_t>(out, 1);
  write_le<std::uint16_t>(out, 1);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(waveform.sample_rate));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(waveform.sample_rate * 2));
  write_le<std::uint16_t>(out, 2);
  write_le<std::uint16_t>(out, 16);
  out.write("data", 4);
  write_le<std::uint32_t>(out, data_bytes);
  for (float s : waveform.samples) {
    const float clamped = std::clamp(s, -1.0f, 1.0f);
    write_le<std::int16_t>(out, static_cast<std::int16_t>(std::lround(clamped * 32767.0f)));
  }
  if (!out) throw data_error("io_error", "failed writing " + path.string());
}

Waveform load_audio(const std::filesystem::path& path) {
  Waveform wav = resample(read_wav(path), kTargetSampleRate);
  normalize_peak(wav);
  return wav;
}

void write_feature_file(const std::filesystem::path& path, const FBankFeatures& fbanks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("io_error", "cannot write " + path.string());
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(fbanks.num_frames()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(fbanks.num_mel_bins()));
  for (Eigen::Index r = 0; r < fbanks.values.rows(); ++r)
    for (Eigen::Index c = 0; c < fbanks.values.cols(); ++c) write_le<float>(out, fbanks.values(r, c));
  if (!out) throw data_error("io_error", "failed writing " + path.string());
}

FBankFeatures read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("io_error", "cannot open " + path.string());
  const auto frames = read_le<std::uint32_t>(in);
  const auto bins = read_le<std::uint32_t>(in);
  if (!in) throw data_error("io_error", path.string() + ": truncated header");
  FBankFeatures fbanks;
  fbanks.values.resize(frames, bins);
  for (std::uint32_t r = 0; r < frames; ++r)
    for (std::uint32_t c = 0; c < bins; ++c) fbanks.values(r, c) = read_le<float>(in);
  if (!in) throw data_error("io_error", path.string() + ": truncated payload");
  return fbanks;
}

}  // namespace msac
