#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "msac/error.hpp"
#include "msac/features.hpp"

#include <cmath>
#include <complex>
#include <filesystem>
#include <numbers>
#include <random>

using namespace msac;

namespace {

Waveform sine(double freq, double seconds, double amplitude = 0.5, int rate = 16000) {
  Waveform w;
  w.sample_rate = rate;
  const auto n = static_cast<std::size_t>(seconds * rate);
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    w.samples[i] = static_cast<float>(amplitude * std::sin(2.0 * std::numbers::pi * freq * i / rate));
  return w;
}

// Reference filterbank written independently of the library: naive DFT in
// double precision and triangles built from HTK's log10 mel formula.
std::vector<std::vector<double>> reference_fbank(const Waveform& w, int bins, int fft) {
  const int len = 400, hop = 160;
  const int frames = static_cast<int>((w.samples.size() - len) / hop + 1);
  auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  const double top = mel(w.sample_rate / 2.0);
  std::vector<std::vector<double>> out(frames, std::vector<double>(bins));
  for (int f = 0; f < frames; ++f) {
    std::vector<double> power(fft / 2 + 1);
    for (int k = 0; k <= fft / 2; ++k) {
      std::complex<double> acc = 0.0;
      for (int n = 0; n < len; ++n) {
        const double win = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / (len - 1));
        acc += w.samples[f * hop + n] * win * std::polar(1.0, -2.0 * std::numbers::pi * k * n / fft);
      }
      power[k] = std::norm(acc);
    }
    for (int b = 0; b < bins; ++b) {
      const double l = top * b / (bins + 1), c = top * (b + 1) / (bins + 1), r = top * (b + 2) / (bins + 1);
      double e = 0.0;
      for (int k = 0; k <= fft / 2; ++k) {
        const double m = mel(k * static_cast<double>(w.sample_rate) / fft);
        if (m > l && m < r) e += power[k] * (m <= c ? (m - l) / (c - l) : (r - m) / (r - c));
      }
      out[f][b] = std::log(e + 1e-10);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("one second at 16 kHz yields 98 frames") {
  const auto fb = compute_fbanks(sine(440.0, 1.0), 80, 1024);
  CHECK(fb.num_frames() == 98);
  CHECK(fb.num_mel_bins() == 80);
  CHECK(fb.frame_length_ms == 25.0f);
  CHECK(fb.frame_shift_ms == 10.0f);
}

TEST_CASE("frame count matches the framing formula for random lengths") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> len_dist(400, 6000);
  for (int trial = 0; trial < 40; ++trial) {
    Waveform w;
    w.samples.assign(len_dist(rng), 0.1f);
    const int expected = static_cast<int>((w.samples.size() - 400) / 160 + 1);
    CHECK(num_frames_for(static_cast<std::int64_t>(w.samples.size()), 400, 160) == expected);
    CHECK(compute_fbanks(w, 20, 512).num_frames() == expected);
  }
  std::uniform_int_distribution<int> win_dist(1, 500), hop_dist(1, 300);
  for (int trial = 0; trial < 500; ++trial) {
    const int win = win_dist(rng), hop = hop_dist(rng);
    const int n = win + len_dist(rng);
    int count = 0;
    for (int start = 0; start + win <= n; start += hop) ++count;
    CHECK(num_frames_for(n, win, hop) == count);
  }
}

TEST_CASE("silence maps to the log floor everywhere") {
  Waveform w;
  w.samples.assign(8000, 0.0f);
  const auto fb = compute_fbanks(w, 80, 1024);
  const float floor_value = static_cast<float>(std::log(1e-10));
  CHECK(fb.num_frames() == 48);
  CHECK((fb.values.array() == floor_value).all());
}

TEST_CASE("1 kHz tone peaks in the mel bin centred nearest 1 kHz") {
  const auto wave = sine(1000.0, 0.3);
  const auto fb = compute_fbanks(wave, 80, 1024);
  const auto ref = reference_fbank(wave, 80, 1024);

  Eigen::VectorXf mean = fb.values.colwise().mean().transpose();
  Eigen::Index argmax = 0;
  mean.maxCoeff(&argmax);

  std::vector<double> ref_mean(80, 0.0);
  for (const auto& row : ref)
    for (int b = 0; b < 80; ++b) ref_mean[b] += row[b] / ref.size();
  const auto ref_argmax = std::distance(ref_mean.begin(), std::max_element(ref_mean.begin(), ref_mean.end()));
  CHECK(argmax == ref_argmax);

  const auto centers = mel_center_frequencies(80, 16000);
  std::size_t nearest = 0;
  for (std::size_t b = 1; b < centers.size(); ++b)
    if (std::abs(centers[b] - 1000.0) < std::abs(centers[nearest] - 1000.0)) nearest = b;
  CHECK(argmax == static_cast<Eigen::Index>(nearest));

  // Full-matrix agreement with the reference wherever energy is meaningful.
  for (int f = 0; f < fb.num_frames(); ++f)
    for (int b = 0; b < 80; ++b)
      if (ref[f][b] > -10.0) CHECK(fb.values(f, b) == doctest::Approx(ref[f][b]).epsilon(1e-3));
}

TEST_CASE("scaling the waveform shifts log energies by 2 ln c") {
  Waveform w = sine(700.0, 0.2, 0.3);
  std::mt19937_64 rng(3);
  std::normal_distribution<float> noise(0.0f, 0.05f);
  for (float& s : w.samples) s += noise(rng);
  Waveform scaled = w;
  const float c = 1.7f;
  for (float& s : scaled.samples) s *= c;
  const auto a = compute_fbanks(w, 40, 512);
  const auto b = compute_fbanks(scaled, 40, 512);
  const double shift = 2.0 * std::log(c);
  for (Eigen::Index i = 0; i < a.values.size(); ++i)
    if (a.values.data()[i] > std::log(1e-4)) CHECK(b.values.data()[i] - a.values.data()[i] == doctest::Approx(shift).epsilon(1e-4));
}

TEST_CASE("compute_fbanks is deterministic") {
  const auto w = sine(300.0, 0.5);
  CHECK(compute_fbanks(w, 80, 1024).values == compute_fbanks(w, 80, 1024).values);
}

TEST_CASE("compute_fbanks error paths") {
  Waveform tiny;
  tiny.samples.assign(399, 0.1f);
  try {
    compute_fbanks(tiny, 80, 1024);
    FAIL("expected utterance_too_short");
  } catch (const Error& e) {
    CHECK(e.code() == "utterance_too_short");
  }
  Waveform bad = sine(100.0, 0.1);
  bad.samples[10] = std::numeric_limits<float>::quiet_NaN();
  try {
    compute_fbanks(bad, 80, 1024);
    FAIL("expected invalid_waveform");
  } catch (const Error& e) {
    CHECK(e.code() == "invalid_waveform");
  }
  CHECK_THROWS_AS(compute_fbanks(sine(100.0, 0.1), 80, 256), Error);
}

TEST_CASE("peak normalization bounds samples to [-1, 1]") {
  Waveform w = sine(200.0, 0.1, 3.0);
  normalize_peak(w);
  float peak = 0.0f;
  for (float s : w.samples) peak = std::max(peak, std::abs(s));
  CHECK(peak == doctest::Approx(1.0f));
}

TEST_CASE("resampling 48 kHz to 16 kHz preserves a tone") {
  const Waveform hi = sine(1000.0, 0.5, 0.5, 48000);
  const Waveform lo = resample(hi, 16000);
  CHECK(lo.sample_rate == 16000);
  CHECK(lo.samples.size() == 8000);
  const Waveform direct = sine(1000.0, 0.5, 0.5, 16000);
  for (std::size_t i = 200; i < 7800; ++i) CHECK(lo.samples[i] == doctest::Approx(direct.samples[i]).epsilon(0.01).scale(1.0));
}

TEST_CASE("spec_augment with zero widths is the identity") {
  std::mt19937_64 rng(1);
  FBankFeatures fb;
  fb.values = RowMatrix::Random(98, 80);
  const auto out = spec_augment(fb, AugmentSpec{0, 0, 1, 1}, rng);
  CHECK(out.values == fb.values);
}

TEST_CASE("spec_augment zeroes one contiguous band of at most two mel rows") {
  FBankFeatures fb;
  fb.values = RowMatrix::Random(98, 80).array() + 5.0f;  // strictly positive
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const auto out = spec_augment(fb, AugmentSpec{2, 0, 1, 1}, rng);
    std::vector<int> zeroed;
    for (int b = 0; b < 80; ++b) {
      const bool all_zero = (out.values.col(b).array() == 0.0f).all();
      const bool untouched = out.values.col(b) == fb.values.col(b);
      CHECK((all_zero || untouched));
      if (all_zero) zeroed.push_back(b);
    }
    CHECK(zeroed.size() <= 2);
    if (zeroed.size() == 2) CHECK(zeroed[1] == zeroed[0] + 1);
  }
}

TEST_CASE("spec_augment clips time masks to short inputs and never grows magnitudes") {
  FBankFeatures fb;
  fb.values = RowMatrix::Random(10, 80);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const auto out = spec_augment(fb, AugmentSpec{2, 30, 1, 1}, rng);
    REQUIRE(out.num_frames() == 10);
    CHECK((out.values.array().abs() <= fb.values.array().abs()).all());
    for (Eigen::Index i = 0; i < fb.values.size(); ++i) {
      const float v = out.values.data()[i];
      CHECK((v == 0.0f || v == fb.values.data()[i]));
    }
  }
  std::mt19937_64 a(9), b(9);
  CHECK(spec_augment(fb, {}, a).values == spec_augment(fb, {}, b).values);
}

TEST_CASE("fix_length pads, crops and passes through") {
  std::mt19937_64 rng(4);
  FBankFeatures short_fb;
  short_fb.values = RowMatrix::Random(98, 80);
  const auto padded = fix_length(short_fb, 300, LengthMode::kTrainRandomCropOrPad, rng);
  REQUIRE(padded.num_frames() == 300);
  CHECK(padded.values.topRows(98) == short_fb.values);
  CHECK((padded.values.bottomRows(202).array() == 0.0f).all());

  FBankFeatures long_fb;
  long_fb.values = RowMatrix::Random(500, 80);
  const auto cropped = fix_length(long_fb, 300, LengthMode::kTrainRandomCropOrPad, rng);
  REQUIRE(cropped.num_frames() == 300);
  bool found = false;
  for (int start = 0; start <= 200 && !found; ++start) found = long_fb.values.middleRows(start, 300) == cropped.values;
  CHECK(found);

  CHECK(fix_length(long_fb, 300, LengthMode::kEvalFull, rng).values == long_fb.values);
  CHECK_THROWS_AS(fix_length(long_fb, 0, LengthMode::kTrainRandomCropOrPad, rng), Error);
}

TEST_CASE("wav and feature files round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "msac_test_features";
  std::filesystem::create_directories(dir);
  Waveform w = sine(440.0, 0.25, 0.8);
  write_wav(dir / "a.wav", w);
  const Waveform back = read_wav(dir / "a.wav");
  CHECK(back.sample_rate == 16000);
  REQUIRE(back.samples.size() == w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i) CHECK(std::abs(back.samples[i] - w.samples[i]) < 1e-4f);

  const auto fb = compute_fbanks(w, 80, 1024);
  write_feature_file(dir / "a.fbank", fb);
  CHECK(read_feature_file(dir / "a.fbank").values == fb.values);
  CHECK(std::filesystem::file_size(dir / "a.fbank") == 8 + 4u * fb.values.size());
  std::filesystem::remove_all(dir);
}
