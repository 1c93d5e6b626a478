// esdd: command-line pipeline for environmental-sound deepfake detection.
//
// Subcommands: synth-data, extract, train, eval, ensemble, report.
// Exit codes: 0 success, 2 usage/config error, 3 I/O error, 4 numeric error.
// The environment variable ESDD_SEED overrides any configured seed.

#include <CLI11.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "esdd/audio.hpp"
#include "esdd/config.hpp"
#include "esdd/dataset.hpp"
#include "esdd/errors.hpp"
#include "esdd/frontend.hpp"
#include "esdd/metrics.hpp"
#include "esdd/model.hpp"
#include "esdd/train.hpp"

namespace fs = std::filesystem;
using esdd::RunConfig;
using nlohmann::ordered_json;

namespace {

RunConfig load_config(const std::string& path, const std::vector<std::string>& sets) {
  RunConfig cfg = path.empty() ? RunConfig() : RunConfig::load(path);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw esdd::ConfigError("--set expects key=value, got: " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

std::uint64_t resolve_seed(const RunConfig& cfg, const std::string& key, std::uint64_t fallback) {
  std::uint64_t seed = static_cast<std::uint64_t>(
      cfg.get_int(key, static_cast<long long>(fallback)));
  if (const char* env = std::getenv("ESDD_SEED")) {
    try {
      seed = std::stoull(env);
    } catch (const std::exception&) {
      throw esdd::ConfigError("ESDD_SEED is not an integer: " + std::string(env));
    }
  }
  return seed;
}

std::vector<esdd::GeneratorSpec> parse_generators(const std::string& csv) {
  std::vector<esdd::GeneratorSpec> out;
  std::stringstream ss(csv);
  std::string id;
  while (std::getline(ss, id, ','))
    if (!id.empty()) out.push_back(esdd::generator_from_id(id));
  return out;
}

std::vector<std::string> parse_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

esdd::SyntheticSpec synthetic_spec(const RunConfig& cfg) {
  esdd::SyntheticSpec spec = esdd::SyntheticSpec::defaults();
  if (cfg.has("data.generators")) spec.generators = parse_generators(cfg.get_string("data.generators", ""));
  if (cfg.has("data.heldout_generators"))
    spec.heldout_generators = parse_generators(cfg.get_string("data.heldout_generators", ""));
  if (cfg.has("data.sources")) spec.sources = parse_list(cfg.get_string("data.sources", ""));
  if (cfg.has("data.heldout_sources"))
    spec.heldout_sources = parse_list(cfg.get_string("data.heldout_sources", ""));
  spec.train_bonafide_per_kind =
      static_cast<int>(cfg.get_int("data.train_bonafide_per_kind", spec.train_bonafide_per_kind));
  spec.train_fake_per_generator_per_kind = static_cast<int>(cfg.get_int(
      "data.train_fake_per_generator_per_kind", spec.train_fake_per_generator_per_kind));
  spec.test_bonafide_per_kind =
      static_cast<int>(cfg.get_int("data.test_bonafide_per_kind", spec.test_bonafide_per_kind));
  spec.test_fake_per_generator_per_kind = static_cast<int>(
      cfg.get_int("data.test_fake_per_generator_per_kind", spec.test_fake_per_generator_per_kind));
  spec.test_fake_per_heldout_generator_per_kind =
      static_cast<int>(cfg.get_int("data.test_fake_per_heldout_generator_per_kind",
                                   spec.test_fake_per_heldout_generator_per_kind));
  spec.phase_iterations =
      static_cast<int>(cfg.get_int("data.phase_iterations", spec.phase_iterations));
  spec.seed = resolve_seed(cfg, "data.seed", spec.seed);
  return spec;
}

esdd::SpectrogramConfig spectrogram_config(const RunConfig& cfg, const std::string& kind_flag) {
  const std::string kind_name =
      !kind_flag.empty() ? kind_flag : cfg.get_string("frontend.kind", "gam");
  const esdd::SpecKind kind = esdd::spec_kind_from_string(kind_name);
  esdd::SpectrogramConfig sc = esdd::SpectrogramConfig::defaults(kind);
  sc.n_bands = static_cast<int>(cfg.get_int("frontend.n_bands", sc.n_bands));
  sc.window_len = static_cast<int>(cfg.get_int("frontend.window_len", sc.window_len));
  sc.hop_len = static_cast<int>(cfg.get_int("frontend.hop", sc.hop_len));
  sc.f_min = cfg.get_double("frontend.f_min", sc.f_min);
  sc.f_max = cfg.get_double("frontend.f_max", sc.f_max);
  sc.bins_per_octave = static_cast<int>(cfg.get_int("frontend.bins_per_octave", sc.bins_per_octave));
  sc.log_floor = cfg.get_double("frontend.log_floor", sc.log_floor);
  return sc;
}

esdd::BackboneConfig backbone_config(const RunConfig& cfg) {
  esdd::BackboneConfig bc = esdd::BackboneConfig::defaults();
  if (cfg.has("model.blocks")) {
    const int kernel = static_cast<int>(cfg.get_int("model.kernel", 3));
    bc.blocks.clear();
    for (const auto& ch : parse_list(cfg.get_string("model.blocks", "")))
      bc.blocks.push_back({std::stoi(ch), kernel, 1, 2});
    if (bc.blocks.empty()) throw esdd::ConfigError("model.blocks: empty block list");
    bc.embedding_dim = bc.blocks.back().out_channels;
  }
  bc.embedding_dim = static_cast<int>(cfg.get_int("model.embedding_dim", bc.embedding_dim));
  bc.validate();
  return bc;
}

esdd::TrainOptions train_options(const RunConfig& cfg) {
  esdd::TrainOptions opts;
  opts.batch_size = static_cast<int>(cfg.get_int("train.batch_size", opts.batch_size));
  opts.seed = resolve_seed(cfg, "train.seed", opts.seed);
  opts.mixup.alpha = cfg.get_double("mixup.alpha", opts.mixup.alpha);
  opts.mixup.apply_probability =
      cfg.get_double("mixup.apply_probability", opts.mixup.apply_probability);
  opts.mixup.enabled = cfg.get_bool("mixup.enabled", opts.mixup.enabled);
  opts.weights.asoftmax = cfg.get_double("loss.w_asoftmax", opts.weights.asoftmax);
  opts.weights.contrastive = cfg.get_double("loss.w_contrastive", opts.weights.contrastive);
  opts.weights.center = cfg.get_double("loss.w_center", opts.weights.center);
  opts.asoftmax_margin = static_cast<int>(cfg.get_int("loss.asoftmax_margin", opts.asoftmax_margin));
  opts.contrastive_margin = cfg.get_double("loss.contrastive_margin", opts.contrastive_margin);
  opts.center_update_rate = cfg.get_double("loss.center_update_rate", opts.center_update_rate);
  opts.head_warm_start = cfg.get_bool("train.head_warm_start", opts.head_warm_start);
  return opts;
}

std::vector<esdd::StageConfig> stage_configs(const RunConfig& cfg) {
  std::vector<esdd::StageConfig> stages;
  for (int id = 1; id <= 3; ++id) {
    esdd::StageConfig s = esdd::StageConfig::stage_default(id);
    const std::string prefix = "train.stage" + std::to_string(id);
    s.epochs = static_cast<int>(cfg.get_int(prefix + "_epochs", s.epochs));
    s.learning_rate = cfg.get_double(prefix + "_lr", s.learning_rate);
    stages.push_back(s);
  }
  return stages;
}

std::string feat_name(const esdd::ManifestEntry& e) { return e.clip_id() + ".feat"; }

Eigen::MatrixXd load_features(const fs::path& features_dir, const esdd::ManifestEntry& e) {
  const fs::path p = features_dir / feat_name(e);
  if (!fs::exists(p))
    throw esdd::IoError("missing features " + p.string() + "; run `esdd extract` first");
  return esdd::read_feat(p);
}

// Multiclass ids for the embedding stage: bonafide 0, one id per generator.
std::map<std::string, int> class_id_map(const std::vector<esdd::ManifestEntry>& entries) {
  std::set<std::string> generators;
  for (const auto& e : entries)
    if (e.generator_id != "none") generators.insert(e.generator_id);
  std::map<std::string, int> ids;
  ids["none"] = 0;
  int next = 1;
  for (const auto& g : generators) ids[g] = next++;
  return ids;
}

esdd::ScoreSet score_entries(const esdd::ModelParams& model, const fs::path& features_dir,
                             const std::vector<esdd::ManifestEntry>& entries,
                             const std::vector<esdd::SeenFlags>& seen) {
  esdd::ScoreSet scores;
  constexpr std::size_t kEvalBatch = 16;
  for (std::size_t start = 0; start < entries.size(); start += kEvalBatch) {
    const std::size_t end = std::min(entries.size(), start + kEvalBatch);
    std::vector<Eigen::MatrixXd> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(load_features(features_dir, entries[i]));
    const Eigen::VectorXd prob = esdd::infer_fake_probability(model, batch);
    for (std::size_t i = start; i < end; ++i) {
      const auto& e = entries[i];
      esdd::ScoreEntry se;
      se.clip_id = e.clip_id();
      se.score = prob[static_cast<Eigen::Index>(i - start)];
      se.label = e.label;
      se.generator_id = e.generator_id;
      se.source_id = e.source_id;
      se.audio_kind = e.audio_kind;
      se.seen_source = seen[i].seen_source;
      se.seen_generator = seen[i].seen_generator;
      se.technique = esdd::technique_of(e.generator_id);
      scores.entries.push_back(std::move(se));
    }
  }
  return scores;
}

ordered_json metrics_row(const esdd::ScoreSet& s) {
  const esdd::MetricBlock b = esdd::metric_block(s);
  ordered_json j;
  j["acc"] = b.acc;
  j["f1"] = b.f1;
  j["auc"] = b.auc ? ordered_json(*b.auc) : ordered_json(nullptr);
  j["eer"] = b.eer ? ordered_json(*b.eer) : ordered_json(nullptr);
  j["n"] = b.n;
  return j;
}

void write_json(const fs::path& path, const ordered_json& j) {
  std::ofstream f(path);
  if (!f) throw esdd::IoError("cannot open " + path.string());
  f << j.dump(2) << '\n';
  if (!f) throw esdd::IoError("write failed for " + path.string());
}

void print_metrics(const esdd::ScoreSet& s) {
  const esdd::MetricBlock b = esdd::metric_block(s);
  std::printf("clips %lld\n", b.n);
  std::printf("Acc  %.4f\n", b.acc);
  std::printf("F1   %.4f\n", b.f1);
  if (b.auc) std::printf("AUC  %.4f\n", *b.auc);
  if (b.eer) std::printf("EER  %.4f\n", *b.eer);
}

// ---- subcommand bodies --------------------------------------------------

int cmd_synth_data(const RunConfig& cfg, const std::string& out_dir) {
  const esdd::SyntheticSpec spec = synthetic_spec(cfg);
  esdd::synthesize_dataset(spec, out_dir);
  std::printf("%s\n", (fs::path(out_dir) / "manifest.csv").string().c_str());
  return 0;
}

int cmd_extract(const RunConfig& cfg, const std::string& manifest_path, const std::string& kind,
                const std::string& out_dir) {
  const auto manifest = esdd::load_manifest(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  const esdd::SpectrogramConfig sc = spectrogram_config(cfg, kind);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw esdd::IoError("cannot create " + out_dir);

  int written = 0, skipped = 0, failed = 0;
  for (const auto& e : manifest) {
    try {
      const esdd::AudioClip clip = esdd::load_wav(base / e.path);
      const esdd::Spectrogram spec = esdd::normalize(esdd::compute_spectrogram(clip, sc));
      const fs::path out = fs::path(out_dir) / feat_name(e);
      const fs::path tmp = out.string() + ".tmp";
      esdd::write_feat(tmp, spec);
      // Content-hash idempotence: leave up-to-date outputs untouched.
      if (fs::exists(out)) {
        std::ifstream a(out, std::ios::binary), b(tmp, std::ios::binary);
        std::stringstream sa, sb;
        sa << a.rdbuf();
        sb << b.rdbuf();
        if (sa.str() == sb.str()) {
          fs::remove(tmp);
          ++skipped;
          continue;
        }
      }
      fs::rename(tmp, out);
      ++written;
    } catch (const esdd::Error& err) {
      std::fprintf(stderr, "extract: %s: %s\n", e.path.c_str(), err.what());
      ++failed;
    }
  }
  std::printf("written %d skipped %d failed %d\n", written, skipped, failed);
  return failed == 0 ? 0 : 3;
}

int cmd_train(const RunConfig& cfg, const std::string& manifest_path,
              const std::string& features_dir, const std::string& test_case,
              const std::string& strategy, const std::string& out_ckpt,
              const std::string& log_path, const std::string& stage_ckpt_dir) {
  const auto manifest = esdd::load_manifest(manifest_path);
  const auto [train_entries, test_entries] =
      esdd::split_test_cases(manifest, esdd::test_case_from_string(test_case));
  (void)test_entries;

  const auto class_ids = class_id_map(train_entries);
  std::vector<esdd::TrainItem> items;
  items.reserve(train_entries.size());
  for (const auto& e : train_entries) {
    esdd::TrainItem it;
    it.features = load_features(features_dir, e);
    it.label = e.label;
    it.class_id = class_ids.at(e.generator_id);
    items.push_back(std::move(it));
  }

  esdd::TrainOptions opts = train_options(cfg);
  opts.checkpoint_dir = stage_ckpt_dir;
  esdd::ModelParams model = esdd::init_model(backbone_config(cfg), 2, opts.seed);

  esdd::TrainLog log;
  if (strategy == "three-stage") {
    log = esdd::run_three_stage(model, items, stage_configs(cfg), opts);
  } else if (strategy == "plain") {
    const int epochs = static_cast<int>(cfg.get_int("train.epochs", 20));
    const double lr = cfg.get_double("train.lr", 5e-4);
    log = esdd::run_plain(model, items, epochs, lr, opts);
  } else {
    throw esdd::ConfigError("unknown strategy: " + strategy + " (use three-stage or plain)");
  }

  esdd::save_checkpoint_file(out_ckpt, model);
  const std::string log_out = log_path.empty() ? out_ckpt + ".log.jsonl" : log_path;
  esdd::write_train_log(log_out, log);
  std::printf("checkpoint %s\nepochs %zu\n", out_ckpt.c_str(), log.epochs.size());
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& manifest_path,
             const std::string& features_dir, const std::string& test_case,
             const std::string& scores_out, const std::string& report_out, bool seen_report) {
  const esdd::ModelParams model = esdd::load_checkpoint_file(ckpt_path);
  const auto manifest = esdd::load_manifest(manifest_path);
  const esdd::TestCase tc = esdd::test_case_from_string(test_case);
  const auto [train_entries, test_entries] = esdd::split_test_cases(manifest, tc);
  const auto seen = esdd::mark_seen_axes(test_entries, train_entries);

  const esdd::ScoreSet scores = score_entries(model, features_dir, test_entries, seen);
  esdd::write_scores_csv(scores_out, scores);

  std::vector<std::string> axes = {"audio_kind", "technique"};
  if (seen_report) axes.push_back("seen");
  const esdd::EvalReport report = esdd::evaluate(scores, axes);

  ordered_json j;
  j["test_case"] = esdd::to_string(tc);
  j["train_kind"] = tc == esdd::TestCase::case1 || tc == esdd::TestCase::case3a ? "scene"
                    : tc == esdd::TestCase::joint                               ? "both"
                                                                                : "event";
  j["test_kind"] = tc == esdd::TestCase::case1 || tc == esdd::TestCase::case3b ? "scene"
                   : tc == esdd::TestCase::joint                               ? "both"
                                                                               : "event";
  j.update(esdd::report_to_json(report));
  write_json(report_out, j);
  print_metrics(scores);
  return 0;
}

int cmd_ensemble(const std::vector<std::string>& score_files, const std::string& scores_out,
                 const std::string& report_out) {
  if (score_files.size() < 2)
    throw esdd::ConfigError("ensemble needs at least 2 score files, got " +
                            std::to_string(score_files.size()));
  std::vector<esdd::ScoreSet> sets;
  for (const auto& f : score_files) sets.push_back(esdd::read_scores_csv(f));
  const esdd::ScoreSet fused = esdd::fuse_scores(sets);
  if (!scores_out.empty()) esdd::write_scores_csv(scores_out, fused);
  if (!report_out.empty()) {
    ordered_json j;
    j["members"] = score_files;
    j.update(esdd::report_to_json(esdd::evaluate(fused, {"audio_kind", "technique"})));
    write_json(report_out, j);
  }
  print_metrics(fused);
  return 0;
}

// Inputs are label=path.csv pairs; style picks the table layout.
int cmd_report(const std::string& style, const std::vector<std::string>& inputs,
               const std::string& out) {
  auto split_pair = [](const std::string& s) {
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw esdd::ConfigError("report input expects label=path.csv, got: " + s);
    return std::pair<std::string, std::string>(s.substr(0, eq), s.substr(eq + 1));
  };

  ordered_json j;
  j["style"] = style;
  if (style == "test-case") {
    // One row per system plus a mean-fusion row, Acc/F1/AUC/EER columns.
    if (inputs.empty()) throw esdd::ConfigError("report: no inputs");
    std::vector<esdd::ScoreSet> sets;
    ordered_json rows = ordered_json::array();
    for (const auto& in : inputs) {
      const auto [name, path] = split_pair(in);
      sets.push_back(esdd::read_scores_csv(path));
      ordered_json row;
      row["system"] = name;
      row.update(metrics_row(sets.back()));
      rows.push_back(row);
    }
    if (sets.size() >= 2) {
      ordered_json row;
      row["system"] = "ensemble";
      row.update(metrics_row(esdd::fuse_scores(sets)));
      rows.push_back(row);
    }
    j["rows"] = rows;
  } else if (style == "cross") {
    // Labels are train_kind:test_kind; one row per train/test kind pair.
    ordered_json rows = ordered_json::array();
    for (const auto& in : inputs) {
      const auto [name, path] = split_pair(in);
      const auto colon = name.find(':');
      if (colon == std::string::npos)
        throw esdd::ConfigError("cross report labels must be train_kind:test_kind, got: " + name);
      ordered_json row;
      row["train_kind"] = name.substr(0, colon);
      row["test_kind"] = name.substr(colon + 1);
      row.update(metrics_row(esdd::read_scores_csv(path)));
      rows.push_back(row);
    }
    if (rows.empty()) throw esdd::ConfigError("report: no inputs");
    j["rows"] = rows;
  } else if (style == "seen") {
    if (inputs.size() != 1) throw esdd::ConfigError("seen report takes exactly one score file");
    const auto [name, path] = split_pair(inputs.front());
    const auto report = esdd::evaluate(esdd::read_scores_csv(path), {"seen"});
    j["system"] = name;
    j["matrix"] = *report.seen_matrix;
  } else {
    throw esdd::ConfigError("unknown report style: " + style +
                            " (use test-case, cross or seen)");
  }
  write_json(out, j);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Environmental-sound deepfake detection pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // accept --config / --set after the subcommand name too

  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "Run configuration file (key = value with [sections])");
  app.add_option("--set", sets, "Override a config key, e.g. --set train.seed=7")
      ->take_all();

  auto* synth = app.add_subcommand("synth-data", "Generate the deterministic synthetic corpus");
  std::string out_dir;
  synth->add_option("--out", out_dir, "Output directory")->required();

  auto* extract = app.add_subcommand("extract", "Compute spectrogram features for a manifest");
  std::string manifest_path, kind, feat_dir;
  extract->add_option("--manifest", manifest_path, "Manifest CSV")->required();
  extract->add_option("--kind", kind, "Spectrogram kind: mel, cqt or gam (default from config)");
  extract->add_option("--out", feat_dir, "Feature output directory")->required();

  auto* train = app.add_subcommand("train", "Train a detector on the dev split");
  std::string tr_manifest, tr_features, tr_case = "joint", strategy = "three-stage";
  std::string tr_out, tr_log, tr_stage_dir;
  train->add_option("--manifest", tr_manifest, "Manifest CSV")->required();
  train->add_option("--features", tr_features, "Extracted feature directory")->required();
  train->add_option("--test-case", tr_case, "Evaluation plan: 1, 2, 3a, 3b or joint (default joint)");
  train->add_option("--strategy", strategy, "three-stage (default) or plain");
  train->add_option("--out", tr_out, "Checkpoint output path")->required();
  train->add_option("--log", tr_log, "Train-log JSONL path (default <out>.log.jsonl)");
  train->add_option("--stage-checkpoints", tr_stage_dir, "Directory for per-stage checkpoints");

  auto* eval = app.add_subcommand("eval", "Score the test split and report metrics");
  std::string ev_ckpt, ev_manifest, ev_features, ev_case = "joint", ev_scores, ev_report;
  bool ev_seen = false;
  eval->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->required();
  eval->add_option("--manifest", ev_manifest, "Manifest CSV")->required();
  eval->add_option("--features", ev_features, "Extracted feature directory")->required();
  eval->add_option("--test-case", ev_case, "Evaluation plan: 1, 2, 3a, 3b or joint (default joint)");
  eval->add_option("--scores", ev_scores, "Score CSV output path")->required();
  eval->add_option("--report", ev_report, "Report JSON output path")->required();
  eval->add_flag("--seen-report", ev_seen, "Include the seen-source x seen-generator EER matrix");

  auto* ensemble = app.add_subcommand("ensemble", "Mean-fuse two or more score files");
  std::vector<std::string> en_inputs;
  std::string en_scores, en_report;
  ensemble->add_option("inputs", en_inputs, "Score CSV files (>= 2)");
  ensemble->add_option("--scores", en_scores, "Fused score CSV output path");
  ensemble->add_option("--report", en_report, "Fused report JSON output path");

  auto* report = app.add_subcommand("report", "Build a labeled comparison table from score files");
  std::string rp_style = "test-case", rp_out;
  std::vector<std::string> rp_inputs;
  report->add_option("--style", rp_style, "test-case (default), cross or seen");
  report->add_option("inputs", rp_inputs, "label=path.csv inputs (cross labels: train:test=path)");
  report->add_option("--out", rp_out, "Report JSON output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const RunConfig cfg = load_config(config_path, sets);
    if (synth->parsed()) return cmd_synth_data(cfg, out_dir);
    if (extract->parsed()) return cmd_extract(cfg, manifest_path, kind, feat_dir);
    if (train->parsed())
      return cmd_train(cfg, tr_manifest, tr_features, tr_case, strategy, tr_out, tr_log,
                       tr_stage_dir);
    if (eval->parsed())
      return cmd_eval(ev_ckpt, ev_manifest, ev_features, ev_case, ev_scores, ev_report, ev_seen);
    if (ensemble->parsed()) return cmd_ensemble(en_inputs, en_scores, en_report);
    if (report->parsed()) return cmd_report(rp_style, rp_inputs, rp_out);
  } catch (const esdd::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const esdd::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const esdd::NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
  return 0;
}
