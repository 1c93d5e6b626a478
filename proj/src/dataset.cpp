#include "esdd/dataset.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <set>
#include <sstream>

#include "esdd/errors.hpp"
#include "esdd/rng.hpp"

namespace esdd {
namespace {

namespace fs = std::filesystem;

constexpr int kSynthWindow = 512;
constexpr int kSynthHop = 128;

std::uint64_t fnv64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void validate_entry(const ManifestEntry& e, int row) {
  auto bad = [row](const std::string& field, const std::string& why) {
    throw InvalidRow("manifest row " + std::to_string(row) + ", field '" + field + "': " + why);
  };
  if (e.path.empty()) bad("path", "empty");
  if (e.label != 0 && e.label != 1) bad("label", "must be bonafide or fake");
  if ((e.label == 0) != (e.generator_id == "none"))
    bad("generator_id", "bonafide rows must have generator_id none and fake rows must not");
  if (e.audio_kind != "scene" && e.audio_kind != "event") bad("audio_kind", "must be scene or event");
  if (e.split != "dev" && e.split != "test") bad("split", "must be dev or test");
}

// --- STFT machinery for resynthesis ------------------------------------

using CMat = Eigen::MatrixXcd;

Eigen::VectorXd hann(int n) {
  Eigen::VectorXd w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / n));
  return w;
}

// Analysis with a window of padding on both ends so overlap-add inverts
// exactly in the interior of the clip.
CMat synth_stft(const Eigen::VectorXd& x) {
  const int pad = kSynthWindow;
  Eigen::VectorXd padded = Eigen::VectorXd::Zero(x.size() + 2 * pad);
  padded.segment(pad, x.size()) = x;
  const auto n_frames =
      static_cast<Eigen::Index>((padded.size() - kSynthWindow) / kSynthHop) + 1;
  const Eigen::VectorXd window = hann(kSynthWindow);
  CMat out(kSynthWindow / 2 + 1, n_frames);
  Eigen::FFT<double> fft;
  std::vector<double> frame(kSynthWindow);
  std::vector<std::complex<double>> spec;
  for (Eigen::Index t = 0; t < n_frames; ++t) {
    for (int i = 0; i < kSynthWindow; ++i) frame[i] = padded[t * kSynthHop + i] * window[i];
    fft.fwd(spec, frame);
    for (int b = 0; b <= kSynthWindow / 2; ++b) out(b, t) = spec[b];
  }
  return out;
}

Eigen::VectorXd synth_istft(const CMat& spec, Eigen::Index out_len) {
  const int pad = kSynthWindow;
  const Eigen::Index n_frames = spec.cols();
  const Eigen::Index padded_len = (n_frames - 1) * kSynthHop + kSynthWindow;
  const Eigen::VectorXd window = hann(kSynthWindow);
  Eigen::VectorXd num = Eigen::VectorXd::Zero(padded_len);
  Eigen::VectorXd den = Eigen::VectorXd::Zero(padded_len);
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> full(kSynthWindow);
  std::vector<double> frame;
  for (Eigen::Index t = 0; t < n_frames; ++t) {
    for (int b = 0; b <= kSynthWindow / 2; ++b) full[b] = spec(b, t);
    for (int b = kSynthWindow / 2 + 1; b < kSynthWindow; ++b)
      full[b] = std::conj(full[kSynthWindow - b]);
    fft.inv(frame, full);
    for (int i = 0; i < kSynthWindow; ++i) {
      num[t * kSynthHop + i] += window[i] * frame[i];
      den[t * kSynthHop + i] += window[i] * window[i];
    }
  }
  Eigen::VectorXd out(out_len);
  for (Eigen::Index i = 0; i < out_len; ++i) {
    const double d = den[pad + i];
    out[i] = d > 1e-12 ? num[pad + i] / d : 0.0;
  }
  return out;
}

CMat unit_phase(const CMat& reference) {
  CMat phase = reference;
  for (Eigen::Index c = 0; c < phase.cols(); ++c)
    for (Eigen::Index r = 0; r < phase.rows(); ++r) {
      const double a = std::abs(phase(r, c));
      phase(r, c) = a > 1e-30 ? phase(r, c) / a : std::complex<double>(1.0, 0.0);
    }
  return phase;
}

AudioClip resynthesize(const AudioClip& clip, const Eigen::MatrixXd& magnitude,
                       const CMat& reference, int iterations) {
  const Eigen::Index n = clip.samples.size();
  CMat phase = unit_phase(reference);
  Eigen::VectorXd x =
      synth_istft(phase.cwiseProduct(magnitude.cast<std::complex<double>>()), n);
  for (int it = 0; it < iterations; ++it) {
    phase = unit_phase(synth_stft(x));
    x = synth_istft(phase.cwiseProduct(magnitude.cast<std::complex<double>>()), n);
  }
  AudioClip out;
  out.sample_rate = clip.sample_rate;
  out.samples = x;
  const double peak = out.samples.cwiseAbs().maxCoeff();
  if (peak > 1.0) out.samples /= peak;
  return out;
}

}  // namespace

std::string ManifestEntry::clip_id() const { return fs::path(path).stem().string(); }

std::vector<ManifestEntry> load_manifest(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("load_manifest: cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "path,label,generator_id,source_id,audio_kind,split")
    throw BadHeader("load_manifest: bad header in " + path.string());
  std::vector<ManifestEntry> out;
  int row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty()) continue;
    const auto fields = split_line(line);
    if (fields.size() != 6)
      throw InvalidRow("manifest row " + std::to_string(row) + ": expected 6 fields, got " +
                       std::to_string(fields.size()));
    ManifestEntry e;
    e.path = fields[0];
    if (fields[1] == "bonafide") e.label = 0;
    else if (fields[1] == "fake") e.label = 1;
    else throw InvalidRow("manifest row " + std::to_string(row) + ", field 'label': " + fields[1]);
    e.generator_id = fields[2];
    e.source_id = fields[3];
    e.audio_kind = fields[4];
    e.split = fields[5];
    validate_entry(e, row);
    out.push_back(e);
  }
  return out;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const fs::path& path) {
  int row = 1;
  for (const auto& e : entries) validate_entry(e, ++row);
  std::ofstream f(path);
  if (!f) throw IoError("write_manifest: cannot open " + path.string());
  f << "path,label,generator_id,source_id,audio_kind,split\n";
  for (const auto& e : entries)
    f << e.path << ',' << (e.label ? "fake" : "bonafide") << ',' << e.generator_id << ','
      << e.source_id << ',' << e.audio_kind << ',' << e.split << '\n';
  if (!f) throw IoError("write_manifest: write failed for " + path.string());
}

std::string GeneratorSpec::id() const {
  const char prefix = family == "rankred" ? 'r' : 'w';
  return family + "_" + prefix + std::to_string(param);
}

GeneratorSpec generator_from_id(const std::string& id) {
  const auto us = id.rfind('_');
  if (us == std::string::npos || us + 2 >= id.size())
    throw ConfigError("bad generator id: " + id);
  GeneratorSpec g;
  g.family = id.substr(0, us);
  if (g.family != "rankred" && g.family != "envsmooth")
    throw ConfigError("unknown generator family in id: " + id);
  g.param = std::stoi(id.substr(us + 2));
  return g;
}

Technique technique_of(const std::string& generator_id) {
  if (generator_id == "none") return Technique::none;
  if (generator_id.rfind("rankred", 0) == 0) return Technique::TTA;
  if (generator_id.rfind("envsmooth", 0) == 0) return Technique::ATA;
  throw ConfigError("technique_of: unknown generator id " + generator_id);
}

void SyntheticSpec::validate() const {
  if (sources.empty()) throw ConfigError("SyntheticSpec: need at least one source");
  if (generators.empty()) throw ConfigError("SyntheticSpec: need at least one seen generator");
  if (train_bonafide_per_kind < 1 || test_bonafide_per_kind < 1)
    throw ConfigError("SyntheticSpec: bonafide counts must be >= 1");
  if (train_fake_per_generator_per_kind < 0 || test_fake_per_generator_per_kind < 0 ||
      test_fake_per_heldout_generator_per_kind < 0)
    throw ConfigError("SyntheticSpec: fake counts must be >= 0");
  for (const auto& g : generators)
    if (g.param < 1) throw ConfigError("SyntheticSpec: generator param must be >= 1");
  for (const auto& g : heldout_generators)
    if (g.param < 1) throw ConfigError("SyntheticSpec: generator param must be >= 1");
  if (phase_iterations < 0) throw ConfigError("SyntheticSpec: phase_iterations must be >= 0");
}

SyntheticSpec SyntheticSpec::defaults() {
  SyntheticSpec s;
  s.generators = {{"rankred", 2}, {"envsmooth", 21}};
  s.heldout_generators = {{"rankred", 8}};
  s.sources = {"srcA", "srcB"};
  s.heldout_sources = {"srcC"};
  return s;
}

AudioClip synth_bonafide(const std::string& kind, const std::string& source_id,
                         std::uint64_t clip_seed) {
  if (kind != "scene" && kind != "event")
    throw ConfigError("synth_bonafide: audio kind must be scene or event, got " + kind);
  const auto n = static_cast<Eigen::Index>(kPipelineRate * kClipSeconds);
  Rng rng(clip_seed);
  // Per-source texture regime: spectral tilt and modulation ranges.
  Rng src_rng(fnv64(source_id));
  const double tilt_base = src_rng.uniform(0.2, 1.6);
  const double mod_rate_base = src_rng.uniform(0.5, 4.0);
  const double burst_freq_lo = src_rng.uniform(200.0, 1500.0);
  const double burst_freq_hi = burst_freq_lo + src_rng.uniform(1500.0, 4000.0);

  AudioClip clip;
  clip.sample_rate = kPipelineRate;
  clip.samples.resize(n);

  if (kind == "scene") {
    // Stationary colored noise: FFT-domain 1/f^tilt shaping, then slow
    // amplitude modulation.
    const double tilt = tilt_base + rng.uniform(-0.1, 0.1);
    std::vector<double> noise(static_cast<std::size_t>(n));
    for (auto& v : noise) v = rng.normal();
    Eigen::FFT<double> fft;
    std::vector<std::complex<double>> spec;
    fft.fwd(spec, noise);
    for (std::size_t b = 1; b < spec.size(); ++b) {
      const double f = std::min<double>(b, spec.size() - b) * kPipelineRate /
                       static_cast<double>(n);
      spec[b] *= std::pow(std::max(f, 30.0) / 1000.0, -tilt / 2.0);
    }
    spec[0] = 0.0;
    std::vector<double> shaped;
    fft.inv(shaped, spec);
    const double mod_rate = mod_rate_base + rng.uniform(-0.2, 0.2);
    const double mod_depth = rng.uniform(0.1, 0.5);
    const double mod_phase = rng.uniform(0.0, 2.0 * M_PI);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double env =
          1.0 + mod_depth * std::sin(2.0 * M_PI * mod_rate * i / kPipelineRate + mod_phase);
      clip.samples[i] = shaped[static_cast<std::size_t>(i)] * env;
    }
  } else {  // event: transient bursts over a low noise floor
    for (Eigen::Index i = 0; i < n; ++i) clip.samples[i] = 0.02 * rng.normal();
    const int n_bursts = 1 + static_cast<int>(rng.below(5));
    for (int b = 0; b < n_bursts; ++b) {
      const double dur = rng.uniform(0.05, 0.4);  // seconds
      const auto len = static_cast<Eigen::Index>(dur * kPipelineRate);
      const auto start = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n - len)));
      const double freq = rng.uniform(burst_freq_lo, burst_freq_hi);
      const double amp = rng.uniform(0.3, 0.7);
      const double phase = rng.uniform(0.0, 2.0 * M_PI);
      const bool tonal = rng.uniform() < 0.7;
      for (Eigen::Index i = 0; i < len; ++i) {
        const double env = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / len));  // Hann envelope
        const double carrier =
            tonal ? std::sin(2.0 * M_PI * freq * i / kPipelineRate + phase) : rng.normal() * 0.5;
        clip.samples[start + i] += amp * env * carrier;
      }
    }
  }
  // Normalize to a fixed peak so PCM16 quantization is uniform.
  const double peak = clip.samples.cwiseAbs().maxCoeff();
  if (peak > 1e-12) clip.samples *= 0.7 / peak;
  return clip;
}

AudioClip rank_reduce_resynth(const AudioClip& clip, int rank, int iterations) {
  if (rank < 1) throw ConfigError("rank_reduce: rank must be >= 1");
  const CMat s = synth_stft(clip.samples);
  Eigen::MatrixXd mag = s.cwiseAbs();
  const auto full = std::min(mag.rows(), mag.cols());
  if (rank < full) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(mag, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    Eigen::MatrixXd approx = Eigen::MatrixXd::Zero(mag.rows(), mag.cols());
    for (int k = 0; k < rank; ++k)
      approx.noalias() += sv[k] * svd.matrixU().col(k) * svd.matrixV().col(k).transpose();
    mag = approx.cwiseMax(0.0);
  }
  return resynthesize(clip, mag, s, iterations);
}

AudioClip envelope_smooth_resynth(const AudioClip& clip, int width, int iterations) {
  if (width < 1) throw ConfigError("envelope_smooth: width must be >= 1");
  const CMat s = synth_stft(clip.samples);
  Eigen::MatrixXd mag = s.cwiseAbs();
  if (width > 1) {
    // Width-w moving average of each band's temporal envelope: smears
    // onsets and transients the way waveform-domain resynthesis does.
    const int half = width / 2;
    Eigen::MatrixXd smoothed(mag.rows(), mag.cols());
    for (Eigen::Index r = 0; r < mag.rows(); ++r)
      for (Eigen::Index c = 0; c < mag.cols(); ++c) {
        double acc = 0.0;
        int cnt = 0;
        for (int k = -half; k <= half; ++k) {
          const Eigen::Index cc = c + k;
          if (cc < 0 || cc >= mag.cols()) continue;
          acc += mag(r, cc);
          ++cnt;
        }
        smoothed(r, c) = acc / cnt;
      }
    mag = smoothed;
  }
  return resynthesize(clip, mag, s, iterations);
}

AudioClip apply_generator(const AudioClip& clip, const GeneratorSpec& gen, int iterations) {
  if (gen.family == "rankred") return rank_reduce_resynth(clip, gen.param, iterations);
  if (gen.family == "envsmooth") return envelope_smooth_resynth(clip, gen.param, iterations);
  throw ConfigError("unknown generator family: " + gen.family);
}

std::vector<ManifestEntry> synthesize_dataset(const SyntheticSpec& spec,
                                              const fs::path& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("synthesize_dataset: cannot create " + out_dir.string());

  std::vector<std::string> all_sources = spec.sources;
  all_sources.insert(all_sources.end(), spec.heldout_sources.begin(),
                     spec.heldout_sources.end());
  std::vector<GeneratorSpec> all_generators = spec.generators;
  all_generators.insert(all_generators.end(), spec.heldout_generators.begin(),
                        spec.heldout_generators.end());

  std::vector<ManifestEntry> manifest;
  auto emit = [&](const std::string& kind, const std::string& gen_id, const std::string& split,
                  const std::vector<std::string>& sources, int count,
                  const GeneratorSpec* gen) {
    for (int i = 0; i < count; ++i) {
      const std::string& source = sources[static_cast<std::size_t>(i) % sources.size()];
      ManifestEntry e;
      e.label = gen ? 1 : 0;
      e.generator_id = gen_id;
      e.source_id = source;
      e.audio_kind = kind;
      e.split = split;
      const std::string clip_id =
          kind + "_" + gen_id + "_" + split + "_" + source + "_" + std::to_string(i);
      e.path = kind + "/" + gen_id + "/" + clip_id + ".wav";

      const fs::path wav_path = out_dir / e.path;
      fs::create_directories(wav_path.parent_path(), ec);
      if (ec) throw IoError("synthesize_dataset: cannot create " + wav_path.parent_path().string());

      const std::uint64_t clip_seed = mix_seed(spec.seed, fnv64(clip_id));
      AudioClip clip = synth_bonafide(kind, source, gen ? mix_seed(clip_seed, 7) : clip_seed);
      if (gen) clip = apply_generator(clip, *gen, spec.phase_iterations);
      write_wav(wav_path, clip);
      manifest.push_back(std::move(e));
    }
  };

  for (const std::string kind : {"scene", "event"}) {
    emit(kind, "none", "dev", spec.sources, spec.train_bonafide_per_kind, nullptr);
    for (const auto& g : spec.generators)
      emit(kind, g.id(), "dev", spec.sources, spec.train_fake_per_generator_per_kind, &g);
    emit(kind, "none", "test", all_sources, spec.test_bonafide_per_kind, nullptr);
    for (const auto& g : spec.generators)
      emit(kind, g.id(), "test", all_sources, spec.test_fake_per_generator_per_kind, &g);
    for (const auto& g : spec.heldout_generators)
      emit(kind, g.id(), "test", all_sources, spec.test_fake_per_heldout_generator_per_kind, &g);
  }
  write_manifest(manifest, out_dir / "manifest.csv");
  return manifest;
}

TestCase test_case_from_string(const std::string& s) {
  if (s == "1" || s == "case1") return TestCase::case1;
  if (s == "2" || s == "case2") return TestCase::case2;
  if (s == "3a" || s == "case3a") return TestCase::case3a;
  if (s == "3b" || s == "case3b") return TestCase::case3b;
  if (s == "joint") return TestCase::joint;
  throw ConfigError("unknown test case: " + s);
}

std::string to_string(TestCase c) {
  switch (c) {
    case TestCase::case1: return "case1";
    case TestCase::case2: return "case2";
    case TestCase::case3a: return "case3a";
    case TestCase::case3b: return "case3b";
    case TestCase::joint: return "joint";
  }
  return "?";
}

std::pair<std::vector<ManifestEntry>, std::vector<ManifestEntry>> split_test_cases(
    const std::vector<ManifestEntry>& manifest, TestCase plan) {
  if (manifest.empty()) throw EmptySplit("split_test_cases: empty manifest");
  std::string train_kind, test_kind;  // empty = both kinds
  switch (plan) {
    case TestCase::case1: train_kind = test_kind = "scene"; break;
    case TestCase::case2: train_kind = test_kind = "event"; break;
    case TestCase::case3a: train_kind = "scene"; test_kind = "event"; break;
    case TestCase::case3b: train_kind = "event"; test_kind = "scene"; break;
    case TestCase::joint: break;
  }
  std::vector<ManifestEntry> train, test;
  for (const auto& e : manifest) {
    if (e.split == "dev" && (train_kind.empty() || e.audio_kind == train_kind))
      train.push_back(e);
    if (e.split == "test" && (test_kind.empty() || e.audio_kind == test_kind))
      test.push_back(e);
  }
  if (train.empty()) throw EmptySplit("split_test_cases: train filter yields no rows");
  if (test.empty()) throw EmptySplit("split_test_cases: test filter yields no rows");
  return {std::move(train), std::move(test)};
}

std::vector<SeenFlags> mark_seen_axes(const std::vector<ManifestEntry>& test_entries,
                                      const std::vector<ManifestEntry>& train_entries) {
  std::set<std::string> train_sources, train_generators;
  for (const auto& e : train_entries) {
    train_sources.insert(e.source_id);
    if (e.generator_id != "none") train_generators.insert(e.generator_id);
  }
  std::vector<SeenFlags> out;
  out.reserve(test_entries.size());
  for (const auto& e : test_entries) {
    SeenFlags f;
    f.seen_source = train_sources.count(e.source_id) > 0;
    f.seen_generator =
        e.generator_id == "none" || train_generators.count(e.generator_id) > 0;
    out.push_back(f);
  }
  return out;
}

}  // namespace esdd
