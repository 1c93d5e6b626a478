#include "esdd/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <limits>
#include "esdd/errors.hpp"

namespace esdd {
namespace {

using ordered_json = nlohmann::ordered_json;

std::string format_score(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9f", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void require_both_classes(const ScoreSet& s, const char* op) {
  bool has0 = false, has1 = false;
  for (const auto& e : s.entries) (e.label ? has1 : has0) = true;
  if (!has0 || !has1) throw OneClassOnly(std::string(op) + ": needs both classes present");
}

}  // namespace

std::string to_string(Technique t) {
  switch (t) {
    case Technique::none: return "none";
    case Technique::TTA: return "TTA";
    case Technique::ATA: return "ATA";
  }
  return "?";
}

Technique technique_from_string(const std::string& s) {
  if (s == "none") return Technique::none;
  if (s == "TTA") return Technique::TTA;
  if (s == "ATA") return Technique::ATA;
  throw ConfigError("unknown technique: " + s);
}

void ScoreSet::validate() const {
  for (const auto& e : entries) {
    if (!std::isfinite(e.score) || e.score < 0.0 || e.score > 1.0)
      throw NumericError("ScoreSet: score out of [0,1] for clip " + e.clip_id);
    if (e.label != 0 && e.label != 1)
      throw NumericError("ScoreSet: non-binary label for clip " + e.clip_id);
  }
}

ScoreSet ScoreSet::filtered(const std::function<bool(const ScoreEntry&)>& keep) const {
  ScoreSet out;
  for (const auto& e : entries)
    if (keep(e)) out.entries.push_back(e);
  return out;
}

long long Confusion::total() const {
  return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1];
}

Confusion confusion(const ScoreSet& s, double threshold) {
  if (s.entries.empty()) throw EmptyScoreSet("confusion: empty score set");
  Confusion c;
  for (const auto& e : s.entries) {
    const int pred = e.score >= threshold ? 1 : 0;
    ++c.counts[e.label][pred];
  }
  return c;
}

double accuracy(const ScoreSet& s, double threshold) {
  if (s.entries.empty()) throw EmptyScoreSet("accuracy: empty score set");
  const Confusion c = confusion(s, threshold);
  return static_cast<double>(c.counts[0][0] + c.counts[1][1]) / static_cast<double>(c.total());
}

double f1(const ScoreSet& s, double threshold) {
  if (s.entries.empty()) throw EmptyScoreSet("f1: empty score set");
  const Confusion c = confusion(s, threshold);
  const auto tp = c.counts[1][1], fp = c.counts[0][1], fn = c.counts[1][0];
  if (tp == 0) return 0.0;
  return 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
}

double auc(const ScoreSet& s) {
  require_both_classes(s, "auc");
  // Rank-sum (Mann-Whitney) with average ranks on ties; exactly equals
  // pairwise counting with ties at 1/2.
  std::vector<std::pair<double, int>> v;
  v.reserve(s.entries.size());
  for (const auto& e : s.entries) v.emplace_back(e.score, e.label);
  std::sort(v.begin(), v.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum_pos = 0.0;
  long long n_pos = 0, n_neg = 0;
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j < v.size() && v[j].first == v[i].first) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (v[k].second == 1) {
        rank_sum_pos += avg_rank;
        ++n_pos;
      } else {
        ++n_neg;
      }
    }
    i = j;
  }
  const double u = rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double eer(const ScoreSet& s) {
  require_both_classes(s, "eer");
  long long n_pos = 0, n_neg = 0;
  std::vector<double> pos, neg;
  for (const auto& e : s.entries) {
    if (e.label == 1) {
      pos.push_back(e.score);
      ++n_pos;
    } else {
      neg.push_back(e.score);
      ++n_neg;
    }
  }
  std::vector<double> thresholds;
  thresholds.reserve(s.entries.size() + 2);
  for (const auto& e : s.entries) thresholds.push_back(e.score);
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  thresholds.insert(thresholds.begin(), thresholds.front() - 1.0);
  thresholds.push_back(thresholds.back() + 1.0);

  // Predict fake when score >= t. FAR falls and FRR rises with t.
  auto rates = [&](double t) {
    long long fa = 0, fr = 0;
    for (double v : neg)
      if (v >= t) ++fa;
    for (double v : pos)
      if (v < t) ++fr;
    return std::pair<double, double>{static_cast<double>(fa) / n_neg,
                                     static_cast<double>(fr) / n_pos};
  };

  // The step functions FAR(t) and FRR(t) only change at observed scores, so
  // every reachable operating point is visited here. Take the midpoint of
  // (FAR, FRR) at the threshold where the two rates are closest; when an
  // exact crossing exists this is the exact equal-error rate.
  double best_gap = std::numeric_limits<double>::infinity();
  double best_eer = 0.5;
  for (double t : thresholds) {
    auto [far, frr] = rates(t);
    const double gap = std::abs(far - frr);
    if (gap < best_gap) {
      best_gap = gap;
      best_eer = (far + frr) / 2.0;
    }
  }
  return best_eer;
}

ScoreSet fuse_scores(const std::vector<ScoreSet>& sets) {
  if (sets.empty()) throw ClipMismatch("fuse_scores: no input sets");
  auto sorted = [](const ScoreSet& s) {
    ScoreSet out = s;
    std::sort(out.entries.begin(), out.entries.end(),
              [](const ScoreEntry& a, const ScoreEntry& b) { return a.clip_id < b.clip_id; });
    return out;
  };
  ScoreSet base = sorted(sets.front());
  std::vector<double> acc(base.entries.size(), 0.0);
  for (const auto& set : sets) {
    const ScoreSet s = sorted(set);
    if (s.entries.size() != base.entries.size())
      throw ClipMismatch("fuse_scores: member sets cover different clip counts");
    for (std::size_t i = 0; i < s.entries.size(); ++i) {
      if (s.entries[i].clip_id != base.entries[i].clip_id)
        throw ClipMismatch("fuse_scores: clip id mismatch at " + s.entries[i].clip_id);
      if (s.entries[i].label != base.entries[i].label)
        throw LabelMismatch("fuse_scores: label mismatch for clip " + s.entries[i].clip_id);
      acc[i] += s.entries[i].score;
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i)
    base.entries[i].score = acc[i] / static_cast<double>(sets.size());
  return base;
}

MetricBlock metric_block(const ScoreSet& s, double threshold) {
  MetricBlock b;
  b.acc = accuracy(s, threshold);
  b.f1 = f1(s, threshold);
  b.confusion = confusion(s, threshold);
  b.n = static_cast<long long>(s.entries.size());
  bool has0 = false, has1 = false;
  for (const auto& e : s.entries) (e.label ? has1 : has0) = true;
  if (has0 && has1) {
    b.auc = auc(s);
    b.eer = eer(s);
  }
  return b;
}

EvalReport evaluate(const ScoreSet& s, const std::vector<std::string>& axes, double threshold) {
  if (s.entries.empty()) throw EmptyScoreSet("evaluate: empty score set");
  s.validate();
  EvalReport report;
  report.overall = metric_block(s, threshold);
  for (const auto& axis : axes) {
    if (axis == "seen") {
      // Seen-source x seen-generator EER matrix: each cell's fakes are split
      // by attack technique and bonafide clips are matched on seen_source.
      ordered_json matrix = ordered_json::array();
      const bool cells[4][2] = {{true, true}, {true, false}, {false, true}, {false, false}};
      double sums[2] = {0.0, 0.0};
      int counts[2] = {0, 0};
      for (int c = 0; c < 4; ++c) {
        const bool ss = cells[c][0], sg = cells[c][1];
        ordered_json row;
        row["test"] = "Test 0" + std::to_string(c + 1);
        row["seen_source"] = ss;
        row["seen_generator"] = sg;
        const Technique techs[2] = {Technique::TTA, Technique::ATA};
        const char* keys[2] = {"eer_tta", "eer_ata"};
        for (int t = 0; t < 2; ++t) {
          ScoreSet cell = s.filtered([&](const ScoreEntry& e) {
            if (e.label == 0) return e.seen_source == ss;
            return e.seen_source == ss && e.seen_generator == sg && e.technique == techs[t];
          });
          bool has0 = false, has1 = false;
          for (const auto& e : cell.entries) (e.label ? has1 : has0) = true;
          if (has0 && has1) {
            const double v = eer(cell);
            row[keys[t]] = v;
            sums[t] += v;
            ++counts[t];
          } else {
            row[keys[t]] = nullptr;
          }
        }
        matrix.push_back(row);
      }
      ordered_json avg;
      avg["test"] = "Average";
      avg["eer_tta"] = counts[0] ? ordered_json(sums[0] / counts[0]) : ordered_json(nullptr);
      avg["eer_ata"] = counts[1] ? ordered_json(sums[1] / counts[1]) : ordered_json(nullptr);
      matrix.push_back(avg);
      report.seen_matrix = matrix;
      continue;
    }
    auto key_of = [&axis](const ScoreEntry& e) -> std::string {
      if (axis == "audio_kind") return e.audio_kind;
      if (axis == "generator_id") return e.generator_id;
      if (axis == "source_id") return e.source_id;
      if (axis == "technique") return to_string(e.technique);
      throw ConfigError("evaluate: unknown breakdown axis " + axis);
    };
    std::map<std::string, ScoreSet> groups;
    for (const auto& e : s.entries) groups[key_of(e)].entries.push_back(e);
    for (const auto& [key, group] : groups)
      report.breakdowns[axis][key] = metric_block(group, threshold);
  }
  return report;
}

namespace {

ordered_json block_to_json(const MetricBlock& b) {
  ordered_json j;
  j["acc"] = b.acc;
  j["f1"] = b.f1;
  j["auc"] = b.auc ? ordered_json(*b.auc) : ordered_json(nullptr);
  j["eer"] = b.eer ? ordered_json(*b.eer) : ordered_json(nullptr);
  j["n"] = b.n;
  j["confusion"] = {{b.confusion.counts[0][0], b.confusion.counts[0][1]},
                    {b.confusion.counts[1][0], b.confusion.counts[1][1]}};
  return j;
}

}  // namespace

ordered_json report_to_json(const EvalReport& report) {
  ordered_json j;
  j["overall"] = block_to_json(report.overall);
  if (!report.breakdowns.empty()) {
    ordered_json bd;
    for (const auto& [axis, groups] : report.breakdowns) {
      ordered_json g;
      for (const auto& [key, block] : groups) g[key] = block_to_json(block);
      bd[axis] = g;
    }
    j["breakdowns"] = bd;
  }
  if (report.seen_matrix) j["seen_matrix"] = *report.seen_matrix;
  return j;
}

void write_scores_csv(const std::filesystem::path& path, const ScoreSet& s) {
  s.validate();
  std::ofstream f(path);
  if (!f) throw IoError("write_scores_csv: cannot open " + path.string());
  f << "clip_id,score,label,generator_id,source_id,audio_kind,seen_source,seen_generator,"
       "technique\n";
  for (const auto& e : s.entries) {
    f << e.clip_id << ',' << format_score(e.score) << ',' << e.label << ',' << e.generator_id
      << ',' << e.source_id << ',' << e.audio_kind << ',' << (e.seen_source ? 1 : 0) << ','
      << (e.seen_generator ? 1 : 0) << ',' << to_string(e.technique) << '\n';
  }
  if (!f) throw IoError("write_scores_csv: write failed for " + path.string());
}

ScoreSet read_scores_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("read_scores_csv: cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) ||
      line != "clip_id,score,label,generator_id,source_id,audio_kind,seen_source,seen_generator,"
              "technique")
    throw BadHeader("read_scores_csv: bad header in " + path.string());
  ScoreSet out;
  int row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 9)
      throw InvalidRow("read_scores_csv: row " + std::to_string(row) + ": expected 9 fields");
    ScoreEntry e;
    e.clip_id = fields[0];
    e.score = std::stod(fields[1]);
    e.label = std::stoi(fields[2]);
    e.generator_id = fields[3];
    e.source_id = fields[4];
    e.audio_kind = fields[5];
    e.seen_source = fields[6] == "1";
    e.seen_generator = fields[7] == "1";
    e.technique = technique_from_string(fields[8]);
    out.entries.push_back(e);
  }
  out.validate();
  return out;
}

}  // namespace esdd
