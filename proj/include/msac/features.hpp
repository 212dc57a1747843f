#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

namespace msac {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kTargetSampleRate = 16000;

struct Waveform {
  std::vector<float> samples;
  int sample_rate = kTargetSampleRate;
};

/// Log mel filterbank energies, one row per frame.
struct FBankFeatures {
  RowMatrix values;  // [num_frames x num_mel_bins]
  float frame_shift_ms = 10.0f;
  float frame_length_ms = 25.0f;

  int num_frames() const { return static_cast<int>(values.rows()); }
  int num_mel_bins() const { return static_cast<int>(values.cols()); }
};

struct FbankOptions {
  float frame_length_ms = 25.0f;
  float frame_shift_ms = 10.0f;
  int num_mel_bins = 80;
  int fft_size = 1024;
  double log_floor = 1e-10;
};

struct AugmentSpec {
  int freq_mask_width = 2;
  int time_mask_width = 30;
  int num_freq_masks = 1;
  int num_time_masks = 1;
};

enum class LengthMode { kTrainRandomCropOrPad, kEvalFull };

/// floor((num_samples - frame_length) / frame_shift) + 1, or 0 when the signal
/// is shorter than a frame.
int num_frames_for(std::int64_t num_samples, int frame_length, int frame_shift);

/// HTK-style mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular mel filterbank over the one-sided spectrum of an fft_size-point
/// FFT, spanning 0 Hz to Nyquist. Returns [num_bins x (fft_size/2 + 1)].
RowMatrix mel_filterbank(int num_bins, int fft_size, int sample_rate);

/// Center frequency (Hz) of each mel filter.
std::vector<double> mel_center_frequencies(int num_bins, int sample_rate);

/// Scales samples into [-1, 1] by the peak absolute amplitude. Silent input is
/// left untouched. Throws "invalid_waveform" on non-finite samples.
void normalize_peak(Waveform& waveform);

/// Band-limited (windowed-sinc) sample-rate conversion.
Waveform resample(const Waveform& waveform, int target_rate);

FBankFeatures compute_fbanks(const Waveform& waveform, const FbankOptions& options = {});
FBankFeatures compute_fbanks(const Waveform& waveform, int num_mel_bins, int fft_size);

/// Zeroes one random frequency band and one random time span per mask count.
/// Widths are drawn uniformly from [0, width] and clipped to the feature extents.
FBankFeatures spec_augment(const FBankFeatures& fbanks, const AugmentSpec& spec, std::mt19937_64& rng);

FBankFeatures fix_length(const FBankFeatures& fbanks, int target_frames, LengthMode mode,
                         std::mt19937_64& rng);

// --- audio / feature file I/O -------------------------------------------------

/// Reads 16-bit linear PCM RIFF/WAVE. Multi-channel audio is averaged to mono.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& waveform);

/// Full ingestion: read, downmix, resample to 16 kHz, peak-normalize.
Waveform load_audio(const std::filesystem::path& path);

/// Binary matrix file: u32 num_frames, u32 num_mel_bins, then row-major
/// little-endian float32 values.
void write_feature_file(const std::filesystem::path& path, const FBankFeatures& fbanks);
FBankFeatures read_feature_file(const std::filesystem::path& path);

}  // namespace msac
