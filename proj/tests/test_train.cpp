#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "esdd/errors.hpp"
#include "esdd/model.hpp"
#include "esdd/rng.hpp"
#include "esdd/train.hpp"

using namespace esdd;
namespace fs = std::filesystem;

namespace {

BackboneConfig tiny_backbone() {
  BackboneConfig cfg;
  cfg.blocks = {{8, 3, 1, 2}};
  cfg.embedding_dim = 8;
  return cfg;
}

// Two visually distinct textures: smooth vs. high-frequency checkerboard.
std::vector<TrainItem> toy_items(int per_class, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TrainItem> items;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < per_class; ++i) {
      TrainItem it;
      it.features = Eigen::MatrixXd(8, 12);
      for (Eigen::Index r = 0; r < 8; ++r)
        for (Eigen::Index t = 0; t < 12; ++t) {
          const double base = c == 0 ? 1.0 : ((r + t) % 2 ? 1.8 : -1.8);
          it.features(r, t) = base + 0.05 * rng.normal();
        }
      it.label = c;
      it.class_id = c;
      items.push_back(std::move(it));
    }
  return items;
}

std::vector<std::uint8_t> snapshot(const ModelParams& m) { return save_checkpoint(m); }

bool group_equal(const ModelParams& a, const ModelParams& b, ParamGroup g) {
  for (const auto& [name, t] : a.params) {
    if (a.group_of(name) != g) continue;
    const auto it = b.params.find(name);
    if (it == b.params.end()) return false;
    if ((t.data != it->second.data).any()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("scalar adam: first step size and quadratic convergence") {
  double m = 0.0, v = 0.0;
  long long step = 0;
  const double lr = 0.01;
  const double w1 = adam_step_scalar(1.0, 5.0, m, v, step, lr);
  // With bias correction the first update has magnitude lr/(1+eps') ~ lr.
  CHECK(1.0 - w1 > 0.99 * lr);
  CHECK(1.0 - w1 <= lr + 1e-12);

  // Gradient sign flips give steps of the opposite sign.
  double m2 = 0.0, v2 = 0.0;
  long long s2 = 0;
  const double w2 = adam_step_scalar(1.0, -5.0, m2, v2, s2, lr);
  CHECK(w2 - 1.0 > 0.99 * lr);

  // Minimize (w - 3)^2.
  double w = -4.0, mm = 0.0, vv = 0.0;
  long long st = 0;
  for (int i = 0; i < 500; ++i) w = adam_step_scalar(w, 2.0 * (w - 3.0), mm, vv, st, 0.05);
  CHECK(std::abs(w - 3.0) < 0.01);
}

TEST_CASE("tensor adam: updates, validation and frozen groups") {
  ModelParams model = init_model(tiny_backbone(), 2, 3);
  AdamState st;
  const Eigen::ArrayXd before = model.params.at("head.fc2.b").data;
  std::map<std::string, Eigen::ArrayXd> grads;
  grads["head.fc2.b"] = Eigen::ArrayXd::Constant(before.size(), 2.5);
  adam_step(model, grads, st, 1e-3);
  const Eigen::ArrayXd delta = before - model.params.at("head.fc2.b").data;
  for (Eigen::Index i = 0; i < delta.size(); ++i) {
    CHECK(delta[i] > 0.99e-3);
    CHECK(delta[i] <= 1e-3 + 1e-15);
  }
  CHECK(st.step == 1);

  std::map<std::string, Eigen::ArrayXd> bad;
  bad["head.fc9.w"] = Eigen::ArrayXd::Zero(4);
  CHECK_THROWS_AS(adam_step(model, bad, st, 1e-3), ShapeMismatch);

  bad.clear();
  bad["head.fc2.b"] = Eigen::ArrayXd::Zero(before.size() + 1);
  CHECK_THROWS_AS(adam_step(model, bad, st, 1e-3), ShapeMismatch);

  set_frozen(model, ParamGroup::head, true);
  bad.clear();
  bad["head.fc2.b"] = Eigen::ArrayXd::Zero(before.size());
  CHECK_THROWS_AS(adam_step(model, bad, st, 1e-3), ShapeMismatch);
}

TEST_CASE("stage defaults and validation") {
  const StageConfig s1 = StageConfig::stage_default(1);
  CHECK(s1.epochs == 20);
  CHECK(s1.learning_rate == doctest::Approx(5e-4));
  CHECK(s1.losses == std::set<std::string>{"asoftmax", "contrastive", "center"});
  CHECK_FALSE(s1.mixup);
  CHECK_FALSE(s1.backbone_frozen);

  const StageConfig s2 = StageConfig::stage_default(2);
  CHECK(s2.epochs == 10);
  CHECK(s2.learning_rate == doctest::Approx(1e-5));
  CHECK(s2.losses == std::set<std::string>{"cross_entropy"});
  CHECK(s2.mixup);

  const StageConfig s3 = StageConfig::stage_default(3);
  CHECK(s3.epochs == 5);
  CHECK(s3.learning_rate == doctest::Approx(1e-6));
  CHECK(s3.losses == std::set<std::string>{"cross_entropy"});
  CHECK(s3.backbone_frozen);

  CHECK_THROWS_AS(StageConfig::stage_default(4), ConfigError);

  StageConfig bad = s1;
  bad.losses = {"cross_entropy", "center"};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s1;
  bad.losses = {"focal"};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s1;
  bad.epochs = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s1;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("train log serializes one json object per epoch") {
  TrainLog log;
  log.seed = 42;
  EpochRecord r;
  r.stage = 2;
  r.epoch = 3;
  r.mean_loss = 0.25;
  r.components["cross_entropy"] = 0.25;
  r.learning_rate = 1e-5;
  r.wall_seconds = 0.5;
  log.epochs.push_back(r);
  log.epochs.push_back(r);

  const std::string text = train_log_jsonl(log);
  std::istringstream ss(text);
  std::string line;
  int lines = 0;
  while (std::getline(ss, line)) {
    ++lines;
    const auto j = nlohmann::json::parse(line);
    CHECK(j["stage"] == 2);
    CHECK(j["epoch"] == 3);
    CHECK(j["mean_loss"] == doctest::Approx(0.25));
    CHECK(j["components"]["cross_entropy"] == doctest::Approx(0.25));
    CHECK(j["learning_rate"] == doctest::Approx(1e-5));
    CHECK(j["seed"] == 42);
    CHECK(j.contains("wall_seconds"));
  }
  CHECK(lines == 2);

  const fs::path p = fs::temp_directory_path() / "esdd_train_log_test.jsonl";
  write_train_log(p.string(), log);
  CHECK(fs::file_size(p) > 0);
  fs::remove(p);
}

TEST_CASE("default three-stage schedule: 35 records, pinned lrs and loss sets") {
  const auto items = toy_items(4, 1);
  ModelParams model = init_model(tiny_backbone(), 2, 5);
  TrainOptions opts;
  opts.batch_size = 4;
  opts.seed = 9;
  const fs::path ckdir = fs::temp_directory_path() / "esdd_train_ck";
  fs::create_directories(ckdir);
  opts.checkpoint_dir = ckdir.string();

  const std::vector<StageConfig> stages = {StageConfig::stage_default(1),
                                           StageConfig::stage_default(2),
                                           StageConfig::stage_default(3)};
  const TrainLog log = run_three_stage(model, items, stages, opts);
  REQUIRE(log.epochs.size() == 35);
  for (std::size_t i = 0; i < log.epochs.size(); ++i) {
    const auto& r = log.epochs[i];
    if (i < 20) {
      CHECK(r.stage == 1);
      CHECK(r.learning_rate == doctest::Approx(5e-4));
      CHECK(r.components.count("asoftmax") == 1);
      CHECK(r.components.count("contrastive") == 1);
      CHECK(r.components.count("center") == 1);
      CHECK(r.components.count("cross_entropy") == 0);
    } else if (i < 30) {
      CHECK(r.stage == 2);
      CHECK(r.learning_rate == doctest::Approx(1e-5));
      CHECK(r.components.count("cross_entropy") == 1);
      CHECK(r.components.size() == 1);
    } else {
      CHECK(r.stage == 3);
      CHECK(r.learning_rate == doctest::Approx(1e-6));
      CHECK(r.components.count("cross_entropy") == 1);
    }
    CHECK(r.epoch == static_cast<int>(i < 20 ? i + 1 : (i < 30 ? i - 19 : i - 29)));
    CHECK(std::isfinite(r.mean_loss));
  }

  // The frozen stage leaves the backbone bit-identical.
  const ModelParams after2 = load_checkpoint_file((ckdir / "stage2.ckpt").string());
  const ModelParams after3 = load_checkpoint_file((ckdir / "stage3.ckpt").string());
  CHECK(group_equal(after2, after3, ParamGroup::backbone));
  CHECK_FALSE(group_equal(after2, after3, ParamGroup::head));
  fs::remove_all(ckdir);
}

TEST_CASE("stage overrides run in order with custom epoch counts") {
  const auto items = toy_items(3, 2);
  ModelParams model = init_model(tiny_backbone(), 2, 5);
  TrainOptions opts;
  opts.batch_size = 3;
  std::vector<StageConfig> stages = {StageConfig::stage_default(1),
                                     StageConfig::stage_default(2),
                                     StageConfig::stage_default(3)};
  stages[0].epochs = 1;
  stages[1].epochs = 1;
  stages[2].epochs = 1;
  const TrainLog log = run_three_stage(model, items, stages, opts);
  REQUIRE(log.epochs.size() == 3);
  CHECK(log.epochs[0].stage == 1);
  CHECK(log.epochs[1].stage == 2);
  CHECK(log.epochs[2].stage == 3);
}

TEST_CASE("embedding stage reduces the composite loss on separable toys") {
  const auto items = toy_items(6, 3);
  ModelParams model = init_model(tiny_backbone(), 2, 7);
  TrainOptions opts;
  opts.batch_size = 6;
  opts.seed = 3;
  StageConfig cfg = StageConfig::stage_default(1);
  cfg.epochs = 12;
  CenterBank bank;
  TrainLog log;
  run_stage(model, bank, items, cfg, opts, log);
  REQUIRE(log.epochs.size() == 12);
  // Epochs 1-6 run margin-free and 7-12 at the configured margin, so compare
  // descent within each phase of the warm-up schedule.
  CHECK(log.epochs[5].mean_loss < 0.8 * log.epochs[0].mean_loss);
  CHECK(log.epochs[11].mean_loss < log.epochs[6].mean_loss);
}

TEST_CASE("plain strategy: zero epochs is a no-op, otherwise logs each epoch") {
  const auto items = toy_items(3, 4);
  ModelParams model = init_model(tiny_backbone(), 2, 11);
  const auto before = snapshot(model);
  TrainOptions opts;
  opts.batch_size = 3;
  const TrainLog none = run_plain(model, items, 0, 1e-3, opts);
  CHECK(none.epochs.empty());
  CHECK(snapshot(model) == before);

  const TrainLog two = run_plain(model, items, 2, 1e-3, opts);
  REQUIRE(two.epochs.size() == 2);
  CHECK(two.epochs[0].components.count("cross_entropy") == 1);
  CHECK(snapshot(model) != before);
}

TEST_CASE("training is bit-deterministic under a fixed seed") {
  const auto items = toy_items(4, 5);
  std::vector<StageConfig> stages = {StageConfig::stage_default(1),
                                     StageConfig::stage_default(2)};
  stages[0].epochs = 2;
  stages[1].epochs = 2;

  auto run_once = [&](std::uint64_t seed) {
    ModelParams model = init_model(tiny_backbone(), 2, 13);
    TrainOptions opts;
    opts.batch_size = 4;
    opts.seed = seed;
    run_three_stage(model, items, stages, opts);
    return snapshot(model);
  };
  CHECK(run_once(21) == run_once(21));
  CHECK(run_once(21) != run_once(22));
}

TEST_CASE("mixup only affects stages that enable it") {
  const auto items = toy_items(4, 6);
  auto run_stage_once = [&](int stage_id, bool mixup_enabled) {
    ModelParams model = init_model(tiny_backbone(), 2, 17);
    TrainOptions opts;
    opts.batch_size = 4;
    opts.seed = 31;
    opts.mixup.enabled = mixup_enabled;
    StageConfig cfg = StageConfig::stage_default(stage_id);
    cfg.epochs = 2;
    CenterBank bank;
    TrainLog log;
    run_stage(model, bank, items, cfg, opts, log);
    return snapshot(model);
  };
  // Stage 3 never mixes, so the toggle is invisible there.
  CHECK(run_stage_once(3, true) == run_stage_once(3, false));
  // Stage 2 mixes when enabled.
  CHECK(run_stage_once(2, true) != run_stage_once(2, false));
}

TEST_CASE("embedding stages demand multiclass ids and data") {
  ModelParams model = init_model(tiny_backbone(), 2, 19);
  TrainOptions opts;
  CenterBank bank;
  TrainLog log;
  const StageConfig cfg = StageConfig::stage_default(1);

  CHECK_THROWS_AS(run_stage(model, bank, {}, cfg, opts, log), EmptyDataset);

  auto items = toy_items(2, 7);
  items[0].class_id = -1;
  CHECK_THROWS_AS(run_stage(model, bank, items, cfg, opts, log), MissingGeneratorLabels);

  auto single = toy_items(2, 7);
  for (auto& it : single) it.class_id = 0;
  CHECK_THROWS_AS(run_stage(model, bank, single, cfg, opts, log), MissingGeneratorLabels);
}

TEST_CASE("warm start copies class directions into the binary head") {
  ModelParams model = init_model(BackboneConfig::defaults(), 2, 23);
  add_asoftmax_weights(model, 3);
  warm_start_head(model, {1, 2});

  const int dim = model.cfg.embedding_dim;
  const Eigen::MatrixXd cw = model.params.at("asoftmax.w").to_matrix();
  const Eigen::MatrixXd w2 = model.params.at("head.fc2.w").to_matrix();
  REQUIRE(w2.rows() == dim);
  REQUIRE(w2.cols() == 2);
  const Eigen::VectorXd bona = cw.row(0).normalized().transpose();
  CHECK((w2.col(0) - bona).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(std::abs(w2.col(1).norm() - 1.0) < 1e-12);

  // With a nonnegative embedding the first two layers are pass-through, so
  // logits are plain dot products against the stored directions.
  Rng rng(3);
  Eigen::MatrixXd emb(1, dim);
  for (int i = 0; i < dim; ++i) emb(0, i) = std::abs(rng.normal());
  ad::Graph g;
  const auto ids = register_params(g, model);
  const int e = g.leaf(ad::Tensor::from_matrix(emb), "emb");
  const int logits = head_logits(g, model, ids, e);
  const Eigen::MatrixXd out = g.value(logits).to_matrix();
  CHECK(std::abs(out(0, 0) - emb.row(0).dot(w2.col(0))) < 1e-9);
  CHECK(std::abs(out(0, 1) - emb.row(0).dot(w2.col(1))) < 1e-9);
}
