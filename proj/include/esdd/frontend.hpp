#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "esdd/audio.hpp"

namespace esdd {

enum class SpecKind { MEL, CQT, GAM };

std::string to_string(SpecKind kind);
SpecKind spec_kind_from_string(const std::string& s);

struct SpectrogramConfig {
  SpecKind kind = SpecKind::MEL;
  int n_bands = 64;
  int window_len = 1024;  // samples
  int hop_len = 160;      // samples
  double f_min = 50.0;    // Hz
  double f_max = 8000.0;  // Hz
  int bins_per_octave = 12;  // CQT only
  double log_floor = 1e-10;

  void validate(int sample_rate) const;  // throws ConfigMismatch
  std::uint64_t hash() const;

  static SpectrogramConfig defaults(SpecKind kind);
};

struct Spectrogram {
  Eigen::MatrixXd values;  // n_bands x n_frames, log power
  SpecKind kind = SpecKind::MEL;
  std::uint64_t config_hash = 0;

  Eigen::Index bands() const { return values.rows(); }
  Eigen::Index frames() const { return values.cols(); }
};

// Hann-windowed magnitude-squared short-time spectrum,
// (window_len/2 + 1) x n_frames with n_frames = floor((len-window)/hop)+1.
Eigen::MatrixXd stft_power(const AudioClip& clip, const SpectrogramConfig& cfg);

Spectrogram mel_spectrogram(const AudioClip& clip, const SpectrogramConfig& cfg);
Spectrogram cqt_spectrogram(const AudioClip& clip, const SpectrogramConfig& cfg);
Spectrogram gam_spectrogram(const AudioClip& clip, const SpectrogramConfig& cfg);

// Dispatch on cfg.kind.
Spectrogram compute_spectrogram(const AudioClip& clip, const SpectrogramConfig& cfg);

// Per-utterance zero mean / unit variance over all entries
// (variance floor 1e-8: constant input maps to zeros).
Spectrogram normalize(const Spectrogram& spec);

// Band center frequencies, exposed for localization checks.
std::vector<double> mel_band_centers(const SpectrogramConfig& cfg);
std::vector<double> cqt_band_centers(const SpectrogramConfig& cfg, int sample_rate);
std::vector<double> gam_band_centers(const SpectrogramConfig& cfg);
std::vector<double> band_centers(const SpectrogramConfig& cfg, int sample_rate);

// Feature file: 16-byte header (magic "ESDDFEAT", u32 bands, u32 frames,
// little-endian) followed by row-major float32 values.
void write_feat(const std::filesystem::path& path, const Spectrogram& spec);
Eigen::MatrixXd read_feat(const std::filesystem::path& path);  // widened to double

}  // namespace esdd
