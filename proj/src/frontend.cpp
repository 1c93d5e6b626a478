#include "esdd/frontend.hpp"

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>

#include "esdd/errors.hpp"

namespace esdd {
namespace {

constexpr double kVarianceFloor = 1e-8;

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// Glasberg-Moore ERB-rate scale.
double hz_to_erb(double f) { return 21.4 * std::log10(1.0 + 4.37 * f / 1000.0); }
double erb_to_hz(double e) { return (std::pow(10.0, e / 21.4) - 1.0) * 1000.0 / 4.37; }
double erb_bandwidth(double f) { return 24.7 * (4.37 * f / 1000.0 + 1.0); }

Eigen::VectorXd hann_window(int n) {
  Eigen::VectorXd w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / n));
  return w;
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

// Apply a filterbank to the power spectrum and log-compress with the floor.
Spectrogram apply_bank(const Eigen::MatrixXd& bank, const Eigen::MatrixXd& power,
                       const SpectrogramConfig& cfg) {
  Spectrogram out;
  out.kind = cfg.kind;
  out.config_hash = cfg.hash();
  out.values = (bank * power).array().max(cfg.log_floor).log().matrix();
  return out;
}

}  // namespace

std::string to_string(SpecKind kind) {
  switch (kind) {
    case SpecKind::MEL: return "MEL";
    case SpecKind::CQT: return "CQT";
    case SpecKind::GAM: return "GAM";
  }
  return "?";
}

SpecKind spec_kind_from_string(const std::string& s) {
  if (s == "MEL" || s == "mel") return SpecKind::MEL;
  if (s == "CQT" || s == "cqt") return SpecKind::CQT;
  if (s == "GAM" || s == "gam") return SpecKind::GAM;
  throw ConfigError("unknown spectrogram kind: " + s);
}

void SpectrogramConfig::validate(int sample_rate) const {
  if (n_bands <= 0 || window_len <= 0 || hop_len <= 0 || bins_per_octave <= 0)
    throw ConfigMismatch("SpectrogramConfig: sizes must be positive");
  if (hop_len > window_len) throw ConfigMismatch("SpectrogramConfig: hop_len > window_len");
  if (!(f_min < f_max) || f_max > sample_rate / 2.0 + 1e-9)
    throw ConfigMismatch("SpectrogramConfig: need f_min < f_max <= Nyquist");
  if (!(log_floor > 0.0)) throw ConfigMismatch("SpectrogramConfig: log_floor must be > 0");
}

std::uint64_t SpectrogramConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  const int k = static_cast<int>(kind);
  h = fnv1a(h, &k, sizeof k);
  h = fnv1a(h, &n_bands, sizeof n_bands);
  h = fnv1a(h, &window_len, sizeof window_len);
  h = fnv1a(h, &hop_len, sizeof hop_len);
  h = fnv1a(h, &f_min, sizeof f_min);
  h = fnv1a(h, &f_max, sizeof f_max);
  h = fnv1a(h, &bins_per_octave, sizeof bins_per_octave);
  h = fnv1a(h, &log_floor, sizeof log_floor);
  return h;
}

SpectrogramConfig SpectrogramConfig::defaults(SpecKind kind) {
  SpectrogramConfig cfg;
  cfg.kind = kind;
  if (kind == SpecKind::CQT) {
    // Geometric band grid from C1; 96 bands put the top band near 7.9 kHz.
    // The long window is needed to resolve semitone spacing at low bands.
    cfg.f_min = 32.7;
    cfg.bins_per_octave = 12;
    cfg.n_bands = 96;
    cfg.window_len = 4096;
  }
  return cfg;
}

Eigen::MatrixXd stft_power(const AudioClip& clip, const SpectrogramConfig& cfg) {
  clip.validate();
  const Eigen::Index len = clip.samples.size();
  if (cfg.window_len > len)
    throw ConfigMismatch("stft_power: window_len " + std::to_string(cfg.window_len) +
                         " exceeds clip length " + std::to_string(len));
  const int n_bins = cfg.window_len / 2 + 1;
  const auto n_frames =
      static_cast<Eigen::Index>((len - cfg.window_len) / cfg.hop_len) + 1;
  const Eigen::VectorXd window = hann_window(cfg.window_len);

  Eigen::MatrixXd out(n_bins, n_frames);
  Eigen::FFT<double> fft;
  std::vector<double> frame(static_cast<std::size_t>(cfg.window_len));
  std::vector<std::complex<double>> spectrum;
  for (Eigen::Index t = 0; t < n_frames; ++t) {
    const Eigen::Index start = t * cfg.hop_len;
    for (int i = 0; i < cfg.window_len; ++i)
      frame[static_cast<std::size_t>(i)] = clip.samples[start + i] * window[i];
    fft.fwd(spectrum, frame);
    for (int b = 0; b < n_bins; ++b) out(b, t) = std::norm(spectrum[static_cast<std::size_t>(b)]);
  }
  return out;
}

std::vector<double> mel_band_centers(const SpectrogramConfig& cfg) {
  // Triangular filters need n_bands + 2 edge points; centers are the
  // interior edges.
  const double lo = hz_to_mel(cfg.f_min), hi = hz_to_mel(cfg.f_max);
  std::vector<double> centers(static_cast<std::size_t>(cfg.n_bands));
  for (int k = 0; k < cfg.n_bands; ++k)
    centers[static_cast<std::size_t>(k)] = mel_to_hz(lo + (hi - lo) * (k + 1) / (cfg.n_bands + 1));
  return centers;
}

std::vector<double> cqt_band_centers(const SpectrogramConfig& cfg, int sample_rate) {
  std::vector<double> centers(static_cast<std::size_t>(cfg.n_bands));
  const double nyquist = sample_rate / 2.0;
  for (int k = 0; k < cfg.n_bands; ++k) {
    const double f = cfg.f_min * std::pow(2.0, static_cast<double>(k) / cfg.bins_per_octave);
    if (f >= nyquist)
      throw BandOverflow("cqt: band " + std::to_string(k) + " center " + std::to_string(f) +
                         " Hz >= Nyquist " + std::to_string(nyquist));
    centers[static_cast<std::size_t>(k)] = f;
  }
  return centers;
}

std::vector<double> gam_band_centers(const SpectrogramConfig& cfg) {
  const double lo = hz_to_erb(cfg.f_min), hi = hz_to_erb(cfg.f_max);
  std::vector<double> centers(static_cast<std::size_t>(cfg.n_bands));
  for (int k = 0; k < cfg.n_bands; ++k)
    centers[static_cast<std::size_t>(k)] =
        erb_to_hz(lo + (hi - lo) * k / std::max(1, cfg.n_bands - 1));
  return centers;
}

std::vector<double> band_centers(const SpectrogramConfig& cfg, int sample_rate) {
  switch (cfg.kind) {
    case SpecKind::MEL: return mel_band_centers(cfg);
    case SpecKind::CQT: return cqt_band_centers(cfg, sample_rate);
    case SpecKind::GAM: return gam_band_centers(cfg);
  }
  throw ConfigError("band_centers: bad kind");
}

Spectrogram mel_spectrogram(const AudioClip& clip, const SpectrogramConfig& cfg) {
  if (cfg.kind != SpecKind::MEL) throw ConfigMismatch("mel_spectrogram: cfg.kind is not MEL");
  cfg.validate(clip.sample_rate);
  const Eigen::MatrixXd power = stft_power(clip, cfg);
  const int n_bins = cfg.window_len / 2 + 1;
  const double bin_hz = static_cast<double>(clip.sample_rate) / cfg.window_len;

  const double lo = hz_to_mel(cfg.f_min), hi = hz_to_mel(cfg.f_max);
  std::vector<double> edges(static_cast<std::size_t>(cfg.n_bands) + 2);
  for (int k = 0; k < cfg.n_bands + 2; ++k)
    edges[static_cast<std::size_t>(k)] = mel_to_hz(lo + (hi - lo) * k / (cfg.n_bands + 1));

  Eigen::MatrixXd bank = Eigen::MatrixXd::Zero(cfg.n_bands, n_bins);
  for (int k = 0; k < cfg.n_bands; ++k) {
    const double fl = edges[static_cast<std::size_t>(k)];
    const double fc = edges[static_cast<std::size_t>(k) + 1];
    const double fr = edges[static_cast<std::size_t>(k) + 2];
    const double area = (fr - fl) / 2.0;  // unit-area normalization
    for (int b = 0; b < n_bins; ++b) {
      const double f = b * bin_hz;
      double w = 0.0;
      if (f > fl && f < fc) w = (f - fl) / (fc - fl);
      else if (f >= fc && f < fr) w = (fr - f) / (fr - fc);
      bank(k, b) = w / area;
    }
    if (bank.row(k).sum() <= 0.0) {
      // Narrow filter falling between bins: take the nearest bin.
      const auto nearest = static_cast<int>(std::lrint(fc / bin_hz));
      bank(k, std::clamp(nearest, 0, n_bins - 1)) = 1.0 / area;
    }
  }
  return apply_bank(bank, power, cfg);
}

Spectrogram cqt_spectrogram(const AudioClip& clip, const SpectrogramConfig& cfg) {
  if (cfg.kind != SpecKind::CQT) throw ConfigMismatch("cqt_spectrogram: cfg.kind is not CQT");
  cfg.validate(clip.sample_rate);
  const std::vector<double> centers = cqt_band_centers(cfg, clip.sample_rate);
  const Eigen::MatrixXd power = stft_power(clip, cfg);
  const int n_bins = cfg.window_len / 2 + 1;
  const double bin_hz = static_cast<double>(clip.sample_rate) / cfg.window_len;
  const double q = 1.0 / (std::pow(2.0, 1.0 / cfg.bins_per_octave) - 1.0);

  Eigen::MatrixXd bank = Eigen::MatrixXd::Zero(cfg.n_bands, n_bins);
  for (int k = 0; k < cfg.n_bands; ++k) {
    const double fc = centers[static_cast<std::size_t>(k)];
    const double half = fc / q / 2.0;  // half bandwidth at constant Q
    const int b_lo = std::max(0, static_cast<int>(std::ceil((fc - half) / bin_hz)));
    const int b_hi = std::min(n_bins - 1, static_cast<int>(std::floor((fc + half) / bin_hz)));
    double sum = 0.0;
    for (int b = b_lo; b <= b_hi; ++b) {
      const double x = (b * bin_hz - fc) / half;  // [-1, 1]
      const double w = 0.5 * (1.0 + std::cos(M_PI * x));
      bank(k, b) = w;
      sum += w;
    }
    if (sum <= 0.0) {
      const auto nearest = static_cast<int>(std::lrint(fc / bin_hz));
      bank(k, std::clamp(nearest, 0, n_bins - 1)) = 1.0;
      sum = 1.0;
    }
    bank.row(k) /= sum;
  }
  return apply_bank(bank, power, cfg);
}

Spectrogram gam_spectrogram(const AudioClip& clip, const SpectrogramConfig& cfg) {
  if (cfg.kind != SpecKind::GAM) throw ConfigMismatch("gam_spectrogram: cfg.kind is not GAM");
  cfg.validate(clip.sample_rate);
  const Eigen::MatrixXd power = stft_power(clip, cfg);
  const int n_bins = cfg.window_len / 2 + 1;
  const double bin_hz = static_cast<double>(clip.sample_rate) / cfg.window_len;
  const std::vector<double> centers = gam_band_centers(cfg);

  Eigen::MatrixXd bank(cfg.n_bands, n_bins);
  for (int k = 0; k < cfg.n_bands; ++k) {
    const double fc = centers[static_cast<std::size_t>(k)];
    const double b = 1.019 * erb_bandwidth(fc);
    for (int bin = 0; bin < n_bins; ++bin) {
      const double x = (bin * bin_hz - fc) / b;
      // Squared magnitude response of a 4th-order gammatone.
      bank(k, bin) = std::pow(1.0 + x * x, -4.0);
    }
    bank.row(k) /= bank.row(k).sum();
  }
  return apply_bank(bank, power, cfg);
}

Spectrogram compute_spectrogram(const AudioClip& clip, const SpectrogramConfig& cfg) {
  switch (cfg.kind) {
    case SpecKind::MEL: return mel_spectrogram(clip, cfg);
    case SpecKind::CQT: return cqt_spectrogram(clip, cfg);
    case SpecKind::GAM: return gam_spectrogram(clip, cfg);
  }
  throw ConfigError("compute_spectrogram: bad kind");
}

Spectrogram normalize(const Spectrogram& spec) {
  if (!spec.values.allFinite()) throw NumericError("normalize: non-finite spectrogram");
  Spectrogram out = spec;
  const double mean = spec.values.mean();
  const double var = (spec.values.array() - mean).square().mean();
  if (var < kVarianceFloor) {
    out.values.setZero();
  } else {
    out.values = ((spec.values.array() - mean) / std::sqrt(var)).matrix();
  }
  return out;
}

void write_feat(const std::filesystem::path& path, const Spectrogram& spec) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_feat: cannot open " + path.string());
  f.write("ESDDFEAT", 8);
  const auto bands = static_cast<std::uint32_t>(spec.values.rows());
  const auto frames = static_cast<std::uint32_t>(spec.values.cols());
  f.write(reinterpret_cast<const char*>(&bands), 4);
  f.write(reinterpret_cast<const char*>(&frames), 4);
  for (Eigen::Index r = 0; r < spec.values.rows(); ++r)
    for (Eigen::Index c = 0; c < spec.values.cols(); ++c) {
      const auto v = static_cast<float>(spec.values(r, c));
      f.write(reinterpret_cast<const char*>(&v), 4);
    }
  if (!f) throw IoError("write_feat: write failed for " + path.string());
}

Eigen::MatrixXd read_feat(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_feat: cannot open " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "ESDDFEAT", 8) != 0)
    throw IoError("read_feat: bad magic in " + path.string());
  std::uint32_t bands = 0, frames = 0;
  f.read(reinterpret_cast<char*>(&bands), 4);
  f.read(reinterpret_cast<char*>(&frames), 4);
  if (!f || bands == 0 || frames == 0) throw IoError("read_feat: bad header in " + path.string());
  Eigen::MatrixXd out(bands, frames);
  for (std::uint32_t r = 0; r < bands; ++r)
    for (std::uint32_t c = 0; c < frames; ++c) {
      float v = 0.0f;
      f.read(reinterpret_cast<char*>(&v), 4);
      out(r, c) = v;
    }
  if (!f) throw IoError("read_feat: truncated file " + path.string());
  return out;
}

}  // namespace esdd
