#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace esdd {

enum class Technique { none, TTA, ATA };
std::string to_string(Technique t);
Technique technique_from_string(const std::string& s);

struct ScoreEntry {
  std::string clip_id;
  double score = 0.5;  // probability of fake, in [0,1]
  int label = 0;       // bonafide=0, fake=1
  std::string generator_id = "none";
  std::string source_id;
  std::string audio_kind = "scene";  // scene | event
  bool seen_source = true;
  bool seen_generator = true;
  Technique technique = Technique::none;
};

struct ScoreSet {
  std::vector<ScoreEntry> entries;

  void validate() const;  // throws on out-of-range scores / labels
  ScoreSet filtered(const std::function<bool(const ScoreEntry&)>& keep) const;
};

struct Confusion {
  // rows = true label (bonafide, fake); cols = predicted
  long long counts[2][2] = {{0, 0}, {0, 0}};
  long long total() const;
};

double accuracy(const ScoreSet& s, double threshold = 0.5);
double f1(const ScoreSet& s, double threshold = 0.5);   // fake is the positive class
double auc(const ScoreSet& s);                          // ties count 1/2
double eer(const ScoreSet& s);  // midpoint at the operating point nearest FAR == FRR
Confusion confusion(const ScoreSet& s, double threshold = 0.5);

// Per-clip arithmetic-mean fusion; member sets must cover identical clips
// with identical labels and metadata.
ScoreSet fuse_scores(const std::vector<ScoreSet>& sets);

struct MetricBlock {
  double acc = 0.0, f1 = 0.0;
  std::optional<double> auc, eer;  // absent when only one class is present
  Confusion confusion;
  long long n = 0;
};

MetricBlock metric_block(const ScoreSet& s, double threshold = 0.5);

struct EvalReport {
  MetricBlock overall;
  // axis name -> (axis value -> block)
  std::map<std::string, std::map<std::string, MetricBlock>> breakdowns;
  // The seen-source x seen-generator EER matrix with TTA/ATA columns and an
  // average row ("Test 01".."Test 04", "Average"); present when the `seen`
  // axis is requested.
  std::optional<nlohmann::ordered_json> seen_matrix;
};

// axes may contain: audio_kind, generator_id, source_id, technique, seen.
EvalReport evaluate(const ScoreSet& s, const std::vector<std::string>& axes = {},
                    double threshold = 0.5);

nlohmann::ordered_json report_to_json(const EvalReport& report);

// CSV: clip_id,score,label,generator_id,source_id,audio_kind,seen_source,seen_generator,technique
void write_scores_csv(const std::filesystem::path& path, const ScoreSet& s);
ScoreSet read_scores_csv(const std::filesystem::path& path);

}  // namespace esdd
