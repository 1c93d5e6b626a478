#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "esdd/audio.hpp"
#include "esdd/dataset.hpp"
#include "esdd/errors.hpp"
#include "esdd/frontend.hpp"
#include "esdd/metrics.hpp"

using namespace esdd;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("esdd_dataset_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

double rms(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  REQUIRE(a.size() == b.size());
  return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size()));
}

// Fraction of spectral-magnitude energy outside the best rank-k approximation.
// Rank-reduced resyntheses collapse this residual, bonafide textures do not.
double rank_residual(const AudioClip& clip, int k) {
  SpectrogramConfig cfg;
  cfg.window_len = 512;
  cfg.hop_len = 128;
  const Eigen::MatrixXd mag = stft_power(clip, cfg).cwiseSqrt();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(mag);
  const auto& sv = svd.singularValues();
  double total = 0.0, head = 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    total += sv[i] * sv[i];
    if (i < k) head += sv[i] * sv[i];
  }
  return 1.0 - head / total;
}

}  // namespace

TEST_CASE("manifest round-trip preserves rows and clip ids") {
  std::vector<ManifestEntry> rows;
  for (int i = 0; i < 4; ++i) {
    ManifestEntry e;
    e.path = "scene/none/clip_" + std::to_string(i) + ".wav";
    e.label = i % 2;
    e.generator_id = i % 2 ? "rankred_r8" : "none";
    e.source_id = "srcA";
    e.audio_kind = i < 2 ? "scene" : "event";
    e.split = i < 3 ? "dev" : "test";
    rows.push_back(e);
  }
  const fs::path dir = temp_dir("manifest");
  write_manifest(rows, dir / "manifest.csv");
  const auto back = load_manifest(dir / "manifest.csv");
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].path == rows[i].path);
    CHECK(back[i].label == rows[i].label);
    CHECK(back[i].generator_id == rows[i].generator_id);
    CHECK(back[i].source_id == rows[i].source_id);
    CHECK(back[i].audio_kind == rows[i].audio_kind);
    CHECK(back[i].split == rows[i].split);
  }
  CHECK(back[0].clip_id() == "clip_0");

  // Exact header line.
  std::ifstream f(dir / "manifest.csv");
  std::string header;
  std::getline(f, header);
  CHECK(header == "path,label,generator_id,source_id,audio_kind,split");
  fs::remove_all(dir);
}

TEST_CASE("manifest loader rejects malformed input") {
  const fs::path dir = temp_dir("manifest_bad");
  auto write_text = [&](const std::string& name, const std::string& text) {
    std::ofstream f(dir / name, std::ios::binary);
    f << text;
    return dir / name;
  };

  const auto bad_header = write_text("h.csv", "path,label,generator\nx.wav,0,none\n");
  CHECK_THROWS_AS(load_manifest(bad_header), BadHeader);

  const auto short_row = write_text(
      "r.csv", "path,label,generator_id,source_id,audio_kind,split\nx.wav,0,none\n");
  CHECK_THROWS_AS(load_manifest(short_row), InvalidRow);

  const auto bad_label = write_text(
      "l.csv",
      "path,label,generator_id,source_id,audio_kind,split\nx.wav,7,none,srcA,scene,dev\n");
  CHECK_THROWS_AS(load_manifest(bad_label), InvalidRow);

  const auto bad_split = write_text(
      "s.csv",
      "path,label,generator_id,source_id,audio_kind,split\nx.wav,0,none,srcA,scene,weird\n");
  CHECK_THROWS_AS(load_manifest(bad_split), InvalidRow);

  const auto empty = write_text("e.csv", "");
  CHECK_THROWS_AS(load_manifest(empty), BadHeader);

  CHECK_THROWS_AS(load_manifest(dir / "missing.csv"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("generator ids parse and classify by technique") {
  const GeneratorSpec g{"rankred", 8};
  CHECK(g.id() == "rankred_r8");
  const GeneratorSpec h{"envsmooth", 5};
  CHECK(h.id() == "envsmooth_w5");

  const auto back = generator_from_id("rankred_r12");
  CHECK(back.family == "rankred");
  CHECK(back.param == 12);
  const auto back2 = generator_from_id("envsmooth_w3");
  CHECK(back2.family == "envsmooth");
  CHECK(back2.param == 3);

  CHECK(technique_of("rankred_r8") == Technique::TTA);
  CHECK(technique_of("envsmooth_w5") == Technique::ATA);
  CHECK_THROWS_AS(generator_from_id("mystery_x1"), ConfigError);
  CHECK_THROWS_AS(technique_of("mystery_x1"), ConfigError);
}

TEST_CASE("bonafide synthesis is seed-deterministic and well-formed") {
  const AudioClip a = synth_bonafide("scene", "srcA", 42);
  const AudioClip b = synth_bonafide("scene", "srcA", 42);
  CHECK(a.sample_rate == kPipelineRate);
  CHECK(a.samples.size() == static_cast<Eigen::Index>(kPipelineRate * kClipSeconds));
  CHECK(a.samples == b.samples);  // bit-identical
  CHECK(a.samples.allFinite());
  CHECK(std::abs(a.samples.cwiseAbs().maxCoeff() - 0.7) < 1e-12);

  const AudioClip c = synth_bonafide("scene", "srcA", 43);
  CHECK(a.samples != c.samples);
  const AudioClip d = synth_bonafide("event", "srcA", 42);
  CHECK(a.samples != d.samples);
  const AudioClip e = synth_bonafide("scene", "srcB", 42);
  CHECK(a.samples != e.samples);
  CHECK_THROWS_AS(synth_bonafide("voice", "srcA", 1), ConfigError);
}

TEST_CASE("full-rank resynthesis with exact phase is lossless") {
  const AudioClip clip = synth_bonafide("scene", "srcA", 7);
  // Requested rank exceeds the spectral dimension, so magnitudes are kept
  // exactly; with the original phases the inverse transform is exact.
  const AudioClip back = rank_reduce_resynth(clip, 100000, 0);
  CHECK(rms(clip.samples, back.samples) < 1e-9);
}

TEST_CASE("artifact generators change the waveform") {
  const AudioClip clip = synth_bonafide("event", "srcB", 11);
  const AudioClip r = rank_reduce_resynth(clip, 8, 4);
  CHECK(r.samples.size() == clip.samples.size());
  CHECK(rms(clip.samples, r.samples) > 1e-4);
  CHECK(r.samples.allFinite());

  const AudioClip w = envelope_smooth_resynth(clip, 5, 4);
  CHECK(rms(clip.samples, w.samples) > 1e-4);
  CHECK(w.samples.allFinite());

  // apply_generator dispatches on family.
  const AudioClip r2 = apply_generator(clip, GeneratorSpec{"rankred", 8}, 4);
  CHECK(r2.samples == r.samples);
  CHECK_THROWS_AS(apply_generator(clip, GeneratorSpec{"other", 1}, 4), ConfigError);
  CHECK_THROWS_AS(rank_reduce_resynth(clip, 0, 4), ConfigError);
  CHECK_THROWS_AS(envelope_smooth_resynth(clip, 0, 4), ConfigError);
}

TEST_CASE("synthesize_dataset layout, counts and determinism") {
  SyntheticSpec spec;
  spec.generators = {{"rankred", 8}, {"envsmooth", 5}};
  spec.heldout_generators = {{"rankred", 4}};
  spec.sources = {"srcA", "srcB"};
  spec.heldout_sources = {"srcC"};
  spec.train_bonafide_per_kind = 4;
  spec.train_fake_per_generator_per_kind = 3;
  spec.test_bonafide_per_kind = 4;
  spec.test_fake_per_generator_per_kind = 3;
  spec.test_fake_per_heldout_generator_per_kind = 3;
  spec.phase_iterations = 2;
  spec.seed = 5;

  const fs::path dir1 = temp_dir("synth1");
  const auto manifest = synthesize_dataset(spec, dir1);

  // Per kind: 4 bona dev + 2*3 fake dev + 4 bona test + 2*3 fake test + 3 heldout.
  const int per_kind = 4 + 6 + 4 + 6 + 3;
  REQUIRE(manifest.size() == static_cast<std::size_t>(2 * per_kind));
  for (const auto& e : manifest) {
    CHECK(fs::exists(dir1 / e.path));
    CHECK((e.label == 0) == (e.generator_id == "none"));
  }
  CHECK(fs::exists(dir1 / "manifest.csv"));
  const auto loaded = load_manifest(dir1 / "manifest.csv");
  REQUIRE(loaded.size() == manifest.size());

  // Heldout sources and generators only appear in the test split.
  for (const auto& e : manifest) {
    if (e.split == "dev") {
      CHECK(e.source_id != "srcC");
      CHECK(e.generator_id != "rankred_r4");
    }
  }
  std::set<std::string> test_sources;
  for (const auto& e : manifest)
    if (e.split == "test") test_sources.insert(e.source_id);
  CHECK(test_sources.count("srcC") == 1);

  // A second run with the same spec is byte-identical.
  const fs::path dir2 = temp_dir("synth2");
  synthesize_dataset(spec, dir2);
  CHECK(slurp(dir1 / "manifest.csv") == slurp(dir2 / "manifest.csv"));
  int compared = 0;
  for (const auto& e : manifest) {
    if (compared >= 6) break;
    CHECK(slurp(dir1 / e.path) == slurp(dir2 / e.path));
    ++compared;
  }

  // A different seed changes the audio.
  SyntheticSpec other = spec;
  other.seed = 6;
  const fs::path dir3 = temp_dir("synth3");
  synthesize_dataset(other, dir3);
  CHECK(slurp(dir1 / manifest.front().path) != slurp(dir3 / manifest.front().path));

  SUBCASE("test-case splits filter by audio kind") {
    auto [tr1, te1] = split_test_cases(manifest, TestCase::case1);
    for (const auto& e : tr1) {
      CHECK(e.audio_kind == "scene");
      CHECK(e.split == "dev");
    }
    for (const auto& e : te1) {
      CHECK(e.audio_kind == "scene");
      CHECK(e.split == "test");
    }

    auto [tr3a, te3a] = split_test_cases(manifest, TestCase::case3a);
    for (const auto& e : tr3a) CHECK(e.audio_kind == "scene");
    for (const auto& e : te3a) CHECK(e.audio_kind == "event");

    auto [trj, tej] = split_test_cases(manifest, TestCase::joint);
    CHECK(trj.size() + tej.size() == manifest.size());

    CHECK_THROWS_AS(split_test_cases({}, TestCase::joint), EmptySplit);
    CHECK_THROWS_AS(split_test_cases(te1, TestCase::case1), EmptySplit);  // no dev rows

    SUBCASE("seen axes mark all four cells") {
      const auto flags = mark_seen_axes(tej, trj);
      REQUIRE(flags.size() == tej.size());
      std::set<std::pair<bool, bool>> cells;
      for (std::size_t i = 0; i < tej.size(); ++i) {
        if (tej[i].label == 1) cells.insert({flags[i].seen_source, flags[i].seen_generator});
        else
          CHECK(flags[i].seen_generator);  // bonafide marked seen-generator
      }
      CHECK(cells.size() == 4);
    }
  }

  fs::remove_all(dir1);
  fs::remove_all(dir2);
  fs::remove_all(dir3);
}

TEST_CASE("spec validation rejects bad configurations") {
  SyntheticSpec s = SyntheticSpec::defaults();
  CHECK_NOTHROW(s.validate());
  SyntheticSpec bad = s;
  bad.sources.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.generators.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.train_bonafide_per_kind = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.phase_iterations = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(test_case_from_string("case9"), ConfigError);
  CHECK(test_case_from_string(to_string(TestCase::case3b)) == TestCase::case3b);
}

TEST_CASE("rank residual statistic separates bonafide from rank-reduced fakes") {
  ScoreSet s;
  for (int i = 0; i < 8; ++i) {
    const std::string source = i % 2 ? "srcA" : "srcB";
    const std::string kind = i < 4 ? "scene" : "event";
    const AudioClip bona = synth_bonafide(kind, source, 100 + i);
    const AudioClip fake = rank_reduce_resynth(bona, 8, 4);

    ScoreEntry eb;
    eb.clip_id = "b" + std::to_string(i);
    eb.label = 0;
    eb.score = 1.0 - rank_residual(bona, 8);
    s.entries.push_back(eb);

    ScoreEntry ef;
    ef.clip_id = "f" + std::to_string(i);
    ef.label = 1;
    ef.score = 1.0 - rank_residual(fake, 8);
    s.entries.push_back(ef);
  }
  CHECK(auc(s) > 0.7);
}
