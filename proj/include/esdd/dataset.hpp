#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "esdd/audio.hpp"
#include "esdd/metrics.hpp"

namespace esdd {

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  int label = 0;     // bonafide=0, fake=1
  std::string generator_id = "none";
  std::string source_id;
  std::string audio_kind = "scene";  // scene | event
  std::string split = "dev";         // dev | test

  std::string clip_id() const;  // path stem
};

// CSV with the exact header path,label,generator_id,source_id,audio_kind,split
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ManifestEntry>& entries,
                    const std::filesystem::path& path);

// Generator ids are "<family>_<param>", e.g. rankred_r8, envsmooth_w5.
// rank_reduce fakes are labeled TTA-like, envelope_smooth ATA-like so that
// seen-axis reports have two technique columns.
struct GeneratorSpec {
  std::string family;  // rankred | envsmooth
  int param = 8;       // rank r, or smoothing width w

  std::string id() const;
};
GeneratorSpec generator_from_id(const std::string& id);
Technique technique_of(const std::string& generator_id);

struct SyntheticSpec {
  std::vector<GeneratorSpec> generators;          // seen in training
  std::vector<GeneratorSpec> heldout_generators;  // test only
  std::vector<std::string> sources;               // seen in training
  std::vector<std::string> heldout_sources;       // test only
  int train_bonafide_per_kind = 100;
  int train_fake_per_generator_per_kind = 100;
  int test_bonafide_per_kind = 50;
  int test_fake_per_generator_per_kind = 30;
  int test_fake_per_heldout_generator_per_kind = 40;
  int phase_iterations = 8;  // Griffin-Lim refinement steps
  std::uint64_t seed = 1;

  void validate() const;
  static SyntheticSpec defaults();
};

// Writes WAVs under out_dir/<kind>/<generator_id>/<clip_id>.wav plus
// out_dir/manifest.csv; fully determined by (spec, seed).
std::vector<ManifestEntry> synthesize_dataset(const SyntheticSpec& spec,
                                              const std::filesystem::path& out_dir);

// Texture synthesis and artifact families, exposed for direct checks.
AudioClip synth_bonafide(const std::string& kind, const std::string& source_id,
                         std::uint64_t clip_seed);
AudioClip rank_reduce_resynth(const AudioClip& clip, int rank, int iterations);
AudioClip envelope_smooth_resynth(const AudioClip& clip, int width, int iterations);
AudioClip apply_generator(const AudioClip& clip, const GeneratorSpec& gen, int iterations);

enum class TestCase { case1, case2, case3a, case3b, joint };
TestCase test_case_from_string(const std::string& s);
std::string to_string(TestCase c);

// Filters the manifest per the plan: case1 scene-only, case2 event-only,
// 3a train scene / test event, 3b train event / test scene, joint both.
std::pair<std::vector<ManifestEntry>, std::vector<ManifestEntry>> split_test_cases(
    const std::vector<ManifestEntry>& manifest, TestCase plan);

struct SeenFlags {
  bool seen_source = true;
  bool seen_generator = true;
};

// seen_source/seen_generator per test entry, relative to the train list.
// Bonafide rows are marked seen_generator by convention.
std::vector<SeenFlags> mark_seen_axes(const std::vector<ManifestEntry>& test_entries,
                                      const std::vector<ManifestEntry>& train_entries);

}  // namespace esdd
