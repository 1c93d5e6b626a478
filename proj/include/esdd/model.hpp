#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "esdd/autodiff.hpp"

namespace esdd {

enum class ParamGroup { backbone, head, asoftmax, centers };

ParamGroup param_group_from_string(const std::string& s);
std::string to_string(ParamGroup g);

struct BackboneBlock {
  int out_channels = 16;
  int kernel = 3;
  int stride = 1;
  int pool = 2;  // 1 disables pooling
};

struct BackboneConfig {
  std::vector<BackboneBlock> blocks;
  int embedding_dim = 64;

  void validate() const;  // throws ConfigError
  static BackboneConfig defaults();
};

inline constexpr int kHeadHidden1 = 128;
inline constexpr int kHeadHidden2 = 64;

// Named, shape-tagged parameter collection with per-group freeze flags.
// Parameter names are prefixed with their group ("backbone.", "head.",
// "asoftmax.", "centers.").
struct ModelParams {
  BackboneConfig cfg;
  int n_classes = 2;
  std::uint64_t seed = 0;
  std::map<std::string, ad::Tensor> params;  // ordered => deterministic
  std::map<ParamGroup, bool> frozen;

  bool is_frozen(ParamGroup g) const;
  ParamGroup group_of(const std::string& name) const;
};

// Kaiming-uniform weights, zero biases; deterministic under seed.
// Head layout: embedding_dim -> 128 -> 64 -> n_classes, relu between layers.
ModelParams init_model(const BackboneConfig& cfg, int n_classes, std::uint64_t seed);

// A-Softmax class weights ((n_multiclass) x embedding_dim) and the center
// bank row, created on demand by the training engine.
void add_asoftmax_weights(ModelParams& model, int n_multiclass);
void add_center_bank(ModelParams& model, int n_tracked);

void set_frozen(ModelParams& model, ParamGroup group, bool frozen);
void set_frozen(ModelParams& model, const std::string& group, bool frozen);

// Register every parameter as a graph leaf. requires_grad is true for
// trainable (unfrozen) groups; the center bank is never a gradient target.
std::map<std::string, int> register_params(ad::Graph& g, const ModelParams& model);

// Conv blocks -> global average pool. batch_node is (B, 1, bands, frames).
int forward_embedding(ad::Graph& g, const ModelParams& model,
                      const std::map<std::string, int>& ids, int batch_node);

// Three dense layers, relu after layers 1 and 2; raw logits.
int head_logits(ad::Graph& g, const ModelParams& model,
                const std::map<std::string, int>& ids, int emb_node);

// Grad-free inference: per-row softmax probability of class `positive`.
Eigen::VectorXd infer_fake_probability(const ModelParams& model,
                                       const std::vector<Eigen::MatrixXd>& batch,
                                       int positive = 1);

// Checkpoint: magic "ESDDCKPT", version u16, then length-prefixed
// (name, shape, float64 data) records, trailing CRC32 - little-endian.
std::vector<std::uint8_t> save_checkpoint(const ModelParams& model);
ModelParams load_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint_file(const std::string& path, const ModelParams& model);
ModelParams load_checkpoint_file(const std::string& path);

std::uint32_t crc32(const std::uint8_t* data, std::size_t len);

}  // namespace esdd
