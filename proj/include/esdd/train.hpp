#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "esdd/losses.hpp"
#include "esdd/mixup.hpp"
#include "esdd/model.hpp"
#include "esdd/rng.hpp"

namespace esdd {

struct TrainItem {
  Eigen::MatrixXd features;  // bands x frames
  int label = 0;             // bonafide=0, fake=1
  int class_id = -1;         // multiclass id (bonafide=0, one per generator); -1 = absent
};

struct StageConfig {
  int stage_id = 1;
  int epochs = 20;
  double learning_rate = 5e-4;
  std::set<std::string> losses = {"asoftmax", "contrastive", "center"};
  bool mixup = false;
  bool backbone_frozen = false;

  static StageConfig stage_default(int id);
  void validate() const;
};

struct EpochRecord {
  int stage = 0;
  int epoch = 0;  // 1-based within the stage
  double mean_loss = 0.0;
  std::map<std::string, double> components;
  double learning_rate = 0.0;
  double wall_seconds = 0.0;
};

struct TrainLog {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
};

// One JSON object per epoch record.
std::string train_log_jsonl(const TrainLog& log);
void write_train_log(const std::string& path, const TrainLog& log);

// Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8. Moments are
// keyed by parameter name and created lazily on first update.
struct AdamState {
  std::map<std::string, Eigen::ArrayXd> m;
  std::map<std::string, Eigen::ArrayXd> v;
  long long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void adam_step(ModelParams& model, const std::map<std::string, Eigen::ArrayXd>& grads,
               AdamState& state, double lr);
// Scalar variant for optimizer checks.
double adam_step_scalar(double w, double grad, double& m, double& v, long long& step, double lr,
                        double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct TrainOptions {
  int batch_size = 16;
  std::uint64_t seed = 1;
  MixupConfig mixup;
  CompositeWeights weights;
  int asoftmax_margin = 2;
  double contrastive_margin = 1.0;
  double center_update_rate = 0.5;
  bool head_warm_start = true;  // seed the binary head from stage-1 embeddings
  std::string checkpoint_dir;   // empty = no stage-boundary checkpoints
};

// One stage over the items. Stage 1 (any of asoftmax/contrastive/center
// active) requires class_id >= 0 on every item. Mixup applies only when
// cfg.mixup and only to cross-entropy stages.
void run_stage(ModelParams& model, CenterBank& bank, const std::vector<TrainItem>& items,
               const StageConfig& cfg, const TrainOptions& opts, TrainLog& log);

// Stages 1 -> 2 -> 3 with fresh optimizer state per stage.
TrainLog run_three_stage(ModelParams& model, const std::vector<TrainItem>& items,
                         const std::vector<StageConfig>& stages, const TrainOptions& opts);

// Single-stage cross-entropy baseline ("plain" strategy).
TrainLog run_plain(ModelParams& model, const std::vector<TrainItem>& items, int epochs, double lr,
                   const TrainOptions& opts);

// Copies learned stage-1 class directions into the binary head so the
// low-learning-rate stages start from an informative classifier: the first
// two layers pass the embedding through unchanged and the output layer
// projects onto the bonafide direction vs the mean fake direction.
void warm_start_head(ModelParams& model, const std::vector<int>& fake_class_ids);

// Data-driven variant used at the stage-1 -> stage-2 boundary: embeds the
// training items with the current backbone and seeds the head with a
// regularized two-class linear discriminant on those embeddings. No-op
// unless the model is binary with the default head geometry.
void warm_start_head_lda(ModelParams& model, const std::vector<TrainItem>& items);

}  // namespace esdd
