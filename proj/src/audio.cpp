#include "esdd/audio.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "esdd/errors.hpp"

namespace esdd {
namespace {

constexpr int kResampleHalfTaps = 32;  // 64-tap windowed sinc
constexpr double kKaiserBeta = 8.0;

double bessel_i0(double x) {
  // Series expansion; converges quickly for the argument range we use.
  double sum = 1.0, term = 1.0;
  const double half_x = x / 2.0;
  for (int k = 1; k < 64; ++k) {
    term *= (half_x / k) * (half_x / k);
    sum += term;
    if (term < 1e-16 * sum) break;
  }
  return sum;
}

double kaiser(double t) {  // t in [-1, 1]
  const double arg = 1.0 - t * t;
  if (arg < 0.0) return 0.0;
  return bessel_i0(kKaiserBeta * std::sqrt(arg)) / bessel_i0(kKaiserBeta);
}

double sinc(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  return std::sin(M_PI * x) / (M_PI * x);
}

template <typename T>
T read_le(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;  // little-endian host assumed
}

}  // namespace

void AudioClip::validate() const {
  if (sample_rate <= 0) throw NumericError("AudioClip: non-positive sample rate");
  const auto want = static_cast<Eigen::Index>(sample_rate * kClipSeconds);
  if (samples.size() != want)
    throw NumericError("AudioClip: length " + std::to_string(samples.size()) +
                       " != 4 s at " + std::to_string(sample_rate) + " Hz");
  if (!samples.allFinite()) throw NumericError("AudioClip: non-finite sample");
}

AudioClip fit_to_length(const AudioClip& clip) {
  const auto want = static_cast<Eigen::Index>(clip.sample_rate * kClipSeconds);
  if (clip.samples.size() == want) return clip;
  AudioClip out;
  out.sample_rate = clip.sample_rate;
  out.samples = Eigen::VectorXd::Zero(want);
  const auto n = std::min(want, clip.samples.size());
  out.samples.head(n) = clip.samples.head(n);
  return out;
}

AudioClip resample(const AudioClip& clip, int target_rate) {
  if (clip.sample_rate <= 0 || target_rate <= 0)
    throw NumericError("resample: rates must be positive");
  if (target_rate == clip.sample_rate) return fit_to_length(clip);

  const double ratio = static_cast<double>(clip.sample_rate) / target_rate;
  // Anti-alias cutoff at the narrower Nyquist, with a little headroom.
  const double cutoff = 0.9 * std::min(1.0, 1.0 / ratio);

  const auto n_out = static_cast<Eigen::Index>(target_rate * kClipSeconds);
  AudioClip out;
  out.sample_rate = target_rate;
  out.samples = Eigen::VectorXd::Zero(n_out);

  const Eigen::Index n_in = clip.samples.size();
  for (Eigen::Index i = 0; i < n_out; ++i) {
    const double t = i * ratio;  // position in input samples
    const auto center = static_cast<Eigen::Index>(std::floor(t));
    double acc = 0.0, wsum = 0.0;
    for (Eigen::Index k = center - kResampleHalfTaps + 1; k <= center + kResampleHalfTaps; ++k) {
      const double x = t - static_cast<double>(k);
      const double w = cutoff * sinc(cutoff * x) * kaiser(x / kResampleHalfTaps);
      wsum += w;
      if (k < 0 || k >= n_in) continue;
      acc += clip.samples[k] * w;
    }
    // Unit tap sum keeps DC exact regardless of phase.
    out.samples[i] = wsum > 1e-12 ? acc / wsum : acc;
  }
  return out;
}

AudioClip load_wav(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_wav: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw MalformedWav("load_wav: not a RIFF/WAVE file: " + path.string());

  // Walk chunks for fmt and data.
  std::size_t pos = 12;
  int format = 0, channels = 0, rate = 0, bits = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  bool have_fmt = false;
  while (pos + 8 <= bytes.size()) {
    const char* id = reinterpret_cast<const char*>(bytes.data() + pos);
    const auto len = read_le<std::uint32_t>(bytes.data() + pos + 4);
    if (pos + 8 + len > bytes.size()) throw MalformedWav("load_wav: truncated chunk in " + path.string());
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (len < 16) throw MalformedWav("load_wav: short fmt chunk");
      format = read_le<std::uint16_t>(bytes.data() + pos + 8);
      channels = read_le<std::uint16_t>(bytes.data() + pos + 10);
      rate = static_cast<int>(read_le<std::uint32_t>(bytes.data() + pos + 12));
      bits = read_le<std::uint16_t>(bytes.data() + pos + 22);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data = bytes.data() + pos + 8;
      data_len = len;
    }
    pos += 8 + len + (len & 1);  // chunks are word-aligned
  }
  if (!have_fmt || data == nullptr) throw MalformedWav("load_wav: missing fmt/data chunk");
  if (channels < 1 || channels > 2) throw UnsupportedEncoding("load_wav: " + std::to_string(channels) + " channels");
  if (rate <= 0) throw MalformedWav("load_wav: bad sample rate");

  const bool pcm16 = (format == 1 && bits == 16);
  const bool f32 = (format == 3 && bits == 32);
  if (!pcm16 && !f32)
    throw UnsupportedEncoding("load_wav: format tag " + std::to_string(format) + " / " +
                              std::to_string(bits) + " bits unsupported");

  const std::size_t bytes_per_sample = pcm16 ? 2 : 4;
  const std::size_t frames = data_len / (bytes_per_sample * channels);
  if (frames == 0) throw EmptyAudio("load_wav: no audio frames in " + path.string());

  AudioClip raw;
  raw.sample_rate = rate;
  raw.samples.resize(static_cast<Eigen::Index>(frames));
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
      const unsigned char* p = data + (i * channels + c) * bytes_per_sample;
      if (pcm16) {
        acc += read_le<std::int16_t>(p) / 32768.0;
      } else {
        acc += read_le<float>(p);
      }
    }
    raw.samples[static_cast<Eigen::Index>(i)] = acc / channels;
  }
  if (!raw.samples.allFinite()) throw MalformedWav("load_wav: non-finite sample in " + path.string());

  // Short-clip rule: at least half the target duration must be present.
  if (static_cast<double>(frames) / rate < kClipSeconds / 2.0)
    throw EmptyAudio("load_wav: clip shorter than 2 s: " + path.string());

  AudioClip clip = resample(raw, kPipelineRate);
  return fit_to_length(clip);
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_wav: cannot open " + path.string());
  const auto n = static_cast<std::uint32_t>(clip.samples.size());
  const std::uint32_t data_len = n * 2;
  const std::uint32_t riff_len = 36 + data_len;
  auto put_u32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  auto put_u16 = [&](std::uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };
  f.write("RIFF", 4);
  put_u32(riff_len);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  put_u32(16);
  put_u16(1);  // PCM
  put_u16(1);  // mono
  put_u32(static_cast<std::uint32_t>(clip.sample_rate));
  put_u32(static_cast<std::uint32_t>(clip.sample_rate) * 2);
  put_u16(2);
  put_u16(16);
  f.write("data", 4);
  put_u32(data_len);
  for (Eigen::Index i = 0; i < clip.samples.size(); ++i) {
    double v = std::clamp(clip.samples[i], -1.0, 1.0);
    auto s = static_cast<std::int16_t>(std::min(32767L, std::lrint(v * 32768.0)));
    f.write(reinterpret_cast<const char*>(&s), 2);
  }
  if (!f) throw IoError("write_wav: write failed for " + path.string());
}

}  // namespace esdd
