#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <vector>

namespace esdd {

inline constexpr int kPipelineRate = 16000;
inline constexpr double kClipSeconds = 4.0;

// Fixed-length mono waveform, the unit of detection.
struct AudioClip {
  Eigen::VectorXd samples;  // amplitude, nominal range [-1, 1]
  int sample_rate = kPipelineRate;

  Eigen::Index length() const { return samples.size(); }
  void validate() const;  // throws NumericError on invariant breach
};

// Decode a RIFF/WAVE file (PCM16 LE or IEEE float32, 1-2 channels),
// downmix to mono, resample to the pipeline rate and fit to 4 s.
// Clips shorter than half the target duration are rejected.
AudioClip load_wav(const std::filesystem::path& path);

// Write a clip as PCM16 mono.
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

// Windowed-sinc (64-tap Kaiser) band-limited resampling. Identity when the
// rates match. Output always spans exactly 4 s at target_rate.
AudioClip resample(const AudioClip& clip, int target_rate);

// Pad with trailing zeros or truncate so the clip spans exactly 4 s.
AudioClip fit_to_length(const AudioClip& clip);

}  // namespace esdd
