#include "esdd/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "esdd/errors.hpp"
#include "esdd/rng.hpp"

namespace esdd {
namespace {

ad::Tensor kaiming_uniform(ad::Shape shape, Eigen::Index fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  ad::Tensor t = ad::Tensor::zeros(std::move(shape));
  for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data[i] = rng.uniform(-bound, bound);
  return t;
}

void put_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  put_bytes(out, &v, sizeof v);
}

struct Reader {
  const std::uint8_t* p;
  std::size_t len;
  std::size_t pos = 0;
  template <typename T>
  T get() {
    if (pos + sizeof(T) > len) throw CorruptCheckpoint("checkpoint truncated");
    T v;
    std::memcpy(&v, p + pos, sizeof v);
    pos += sizeof v;
    return v;
  }
  std::string get_string(std::size_t n) {
    if (pos + n > len) throw CorruptCheckpoint("checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(p + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace

ParamGroup param_group_from_string(const std::string& s) {
  if (s == "backbone") return ParamGroup::backbone;
  if (s == "head") return ParamGroup::head;
  if (s == "asoftmax" || s == "asoftmax_weights") return ParamGroup::asoftmax;
  if (s == "centers") return ParamGroup::centers;
  throw UnknownGroup("unknown parameter group: " + s);
}

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::head: return "head";
    case ParamGroup::asoftmax: return "asoftmax";
    case ParamGroup::centers: return "centers";
  }
  return "?";
}

void BackboneConfig::validate() const {
  if (blocks.empty()) throw ConfigError("BackboneConfig: need at least one block");
  if (embedding_dim < 2) throw ConfigError("BackboneConfig: embedding_dim must be >= 2");
  for (const auto& b : blocks)
    if (b.out_channels < 1 || b.kernel < 1 || b.stride < 1 || b.pool < 1)
      throw ConfigError("BackboneConfig: block fields must be positive");
  if (blocks.back().out_channels != embedding_dim)
    throw ConfigError("BackboneConfig: embedding_dim must equal the last block's channels");
}

BackboneConfig BackboneConfig::defaults() {
  BackboneConfig cfg;
  cfg.blocks = {{16, 3, 1, 2}, {32, 3, 1, 2}, {64, 3, 1, 2}};
  cfg.embedding_dim = 64;
  return cfg;
}

bool ModelParams::is_frozen(ParamGroup g) const {
  auto it = frozen.find(g);
  return it != frozen.end() && it->second;
}

ParamGroup ModelParams::group_of(const std::string& name) const {
  const auto dot = name.find('.');
  return param_group_from_string(name.substr(0, dot));
}

ModelParams init_model(const BackboneConfig& cfg, int n_classes, std::uint64_t seed) {
  cfg.validate();
  if (n_classes < 2) throw ConfigError("init_model: n_classes must be >= 2");
  ModelParams m;
  m.cfg = cfg;
  m.n_classes = n_classes;
  m.seed = seed;
  m.frozen = {{ParamGroup::backbone, false},
              {ParamGroup::head, false},
              {ParamGroup::asoftmax, false},
              {ParamGroup::centers, false}};
  Rng rng(seed);
  int c_in = 1;
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    const auto& b = cfg.blocks[i];
    const std::string base = "backbone.conv" + std::to_string(i);
    m.params[base + ".w"] = kaiming_uniform(
        {b.out_channels, c_in, b.kernel, b.kernel},
        static_cast<Eigen::Index>(c_in) * b.kernel * b.kernel, rng);
    m.params[base + ".b"] = ad::Tensor::zeros({b.out_channels});
    c_in = b.out_channels;
  }
  const int dims[4] = {cfg.embedding_dim, kHeadHidden1, kHeadHidden2, n_classes};
  for (int l = 0; l < 3; ++l) {
    const std::string base = "head.fc" + std::to_string(l);
    m.params[base + ".w"] = kaiming_uniform({dims[l], dims[l + 1]}, dims[l], rng);
    m.params[base + ".b"] = ad::Tensor::zeros({dims[l + 1]});
  }
  return m;
}

void add_asoftmax_weights(ModelParams& model, int n_multiclass) {
  if (n_multiclass < 2) throw ConfigError("add_asoftmax_weights: need >= 2 classes");
  Rng rng(mix_seed(model.seed, 1001));
  model.params["asoftmax.w"] = kaiming_uniform({n_multiclass, model.cfg.embedding_dim},
                                               model.cfg.embedding_dim, rng);
}

void add_center_bank(ModelParams& model, int n_tracked) {
  if (n_tracked < 1) throw ConfigError("add_center_bank: need >= 1 tracked class");
  model.params["centers.c"] = ad::Tensor::zeros({n_tracked, model.cfg.embedding_dim});
}

void set_frozen(ModelParams& model, ParamGroup group, bool frozen) {
  model.frozen[group] = frozen;
}

void set_frozen(ModelParams& model, const std::string& group, bool frozen) {
  set_frozen(model, param_group_from_string(group), frozen);
}

std::map<std::string, int> register_params(ad::Graph& g, const ModelParams& model) {
  std::map<std::string, int> ids;
  for (const auto& [name, tensor] : model.params) {
    const ParamGroup group = model.group_of(name);
    ad::Tensor t = tensor;
    t.requires_grad = group != ParamGroup::centers && !model.is_frozen(group);
    ids[name] = g.leaf(std::move(t), name);
  }
  return ids;
}

int forward_embedding(ad::Graph& g, const ModelParams& model,
                      const std::map<std::string, int>& ids, int batch_node) {
  const auto& shape = g.value(batch_node).shape;
  if (shape.size() != 4 || shape[1] != 1)
    throw ShapeMismatch("forward_embedding: expected (B,1,bands,frames), got " +
                        ad::shape_str(shape));
  int x = batch_node;
  for (std::size_t i = 0; i < model.cfg.blocks.size(); ++i) {
    const auto& b = model.cfg.blocks[i];
    const std::string base = "backbone.conv" + std::to_string(i);
    x = g.conv2d(x, ids.at(base + ".w"), b.stride, b.kernel / 2);
    x = g.bias_add_channel(x, ids.at(base + ".b"));
    x = g.relu(x);
    if (b.pool > 1) x = g.maxpool2d(x, b.pool, b.pool);
  }
  return g.global_avg_pool(x);
}

int head_logits(ad::Graph& g, const ModelParams& model,
                const std::map<std::string, int>& ids, int emb_node) {
  const auto& shape = g.value(emb_node).shape;
  if (shape.size() != 2 || shape[1] != model.cfg.embedding_dim)
    throw ShapeMismatch("head_logits: expected (B," + std::to_string(model.cfg.embedding_dim) +
                        "), got " + ad::shape_str(shape));
  int x = emb_node;
  for (int l = 0; l < 3; ++l) {
    const std::string base = "head.fc" + std::to_string(l);
    x = g.matmul(x, ids.at(base + ".w"));
    x = g.bias_add_row(x, ids.at(base + ".b"));
    if (l < 2) x = g.relu(x);
  }
  return x;
}

Eigen::VectorXd infer_fake_probability(const ModelParams& model,
                                       const std::vector<Eigen::MatrixXd>& batch,
                                       int positive) {
  if (batch.empty()) return {};
  const auto bands = batch.front().rows();
  const auto frames = batch.front().cols();
  ad::Tensor in = ad::Tensor::zeros({static_cast<Eigen::Index>(batch.size()), 1, bands, frames});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].rows() != bands || batch[i].cols() != frames)
      throw ShapeMismatch("infer: non-uniform batch shapes");
    Eigen::Map<ad::RowMat>(in.data.data() + static_cast<Eigen::Index>(i) * bands * frames,
                           bands, frames) = batch[i];
  }
  ModelParams frozen_view = model;
  for (auto& [group, flag] : frozen_view.frozen) flag = true;
  ad::Graph g;
  auto ids = register_params(g, frozen_view);
  const int emb = forward_embedding(g, frozen_view, ids, g.leaf(std::move(in), "input"));
  const int probs = g.softmax(head_logits(g, frozen_view, ids, emb));
  return g.value(probs).to_matrix().col(positive);
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t len) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = 0xffffffffu;
  for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

std::vector<std::uint8_t> save_checkpoint(const ModelParams& model) {
  for (const auto& [name, t] : model.params)
    if (!t.data.allFinite()) throw NumericError("save_checkpoint: non-finite parameter " + name);

  std::vector<std::uint8_t> out;
  put_bytes(out, "ESDDCKPT", 8);
  put<std::uint16_t>(out, 1);  // version
  put<std::uint64_t>(out, model.seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.n_classes));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.cfg.embedding_dim));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.cfg.blocks.size()));
  for (const auto& b : model.cfg.blocks) {
    put<std::int32_t>(out, b.out_channels);
    put<std::int32_t>(out, b.kernel);
    put<std::int32_t>(out, b.stride);
    put<std::int32_t>(out, b.pool);
  }
  std::uint8_t flags = 0;
  for (const auto g : {ParamGroup::backbone, ParamGroup::head, ParamGroup::asoftmax,
                       ParamGroup::centers})
    flags = static_cast<std::uint8_t>(flags << 1 | (model.is_frozen(g) ? 1 : 0));
  put<std::uint8_t>(out, flags);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.params.size()));
  for (const auto& [name, t] : model.params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    put_bytes(out, name.data(), name.size());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    put_bytes(out, t.data.data(), static_cast<std::size_t>(t.data.size()) * 8);
  }
  put<std::uint32_t>(out, crc32(out.data(), out.size()));
  return out;
}

ModelParams load_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 + 4) throw CorruptCheckpoint("checkpoint too short");
  if (std::memcmp(bytes.data(), "ESDDCKPT", 8) != 0)
    throw CorruptCheckpoint("checkpoint: bad magic");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (crc32(bytes.data(), bytes.size() - 4) != stored_crc)
    throw CorruptCheckpoint("checkpoint: CRC mismatch");

  Reader r{bytes.data(), bytes.size() - 4};
  r.pos = 8;
  if (r.get<std::uint16_t>() != 1) throw CorruptCheckpoint("checkpoint: unknown version");
  ModelParams m;
  m.seed = r.get<std::uint64_t>();
  m.n_classes = static_cast<int>(r.get<std::uint32_t>());
  m.cfg.embedding_dim = static_cast<int>(r.get<std::uint32_t>());
  const auto n_blocks = r.get<std::uint32_t>();
  if (n_blocks == 0 || n_blocks > 64) throw CorruptCheckpoint("checkpoint: bad block count");
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    BackboneBlock b;
    b.out_channels = r.get<std::int32_t>();
    b.kernel = r.get<std::int32_t>();
    b.stride = r.get<std::int32_t>();
    b.pool = r.get<std::int32_t>();
    m.cfg.blocks.push_back(b);
  }
  std::uint8_t flags = r.get<std::uint8_t>();
  m.frozen[ParamGroup::centers] = flags & 1;
  m.frozen[ParamGroup::asoftmax] = flags & 2;
  m.frozen[ParamGroup::head] = flags & 4;
  m.frozen[ParamGroup::backbone] = flags & 8;
  const auto n_records = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_records; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    if (name_len > 4096) throw CorruptCheckpoint("checkpoint: bad name length");
    const std::string name = r.get_string(name_len);
    const auto ndim = r.get<std::uint32_t>();
    if (ndim == 0 || ndim > 8) throw CorruptCheckpoint("checkpoint: bad rank for " + name);
    ad::Shape shape;
    Eigen::Index n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const auto dim = static_cast<Eigen::Index>(r.get<std::uint64_t>());
      if (dim <= 0 || dim > (1 << 24)) throw CorruptCheckpoint("checkpoint: bad dim for " + name);
      shape.push_back(dim);
      n *= dim;
    }
    if (r.pos + static_cast<std::size_t>(n) * 8 > r.len)
      throw CorruptCheckpoint("checkpoint: truncated data for " + name);
    Eigen::ArrayXd data(n);
    std::memcpy(data.data(), r.p + r.pos, static_cast<std::size_t>(n) * 8);
    r.pos += static_cast<std::size_t>(n) * 8;
    m.params[name] = ad::Tensor(std::move(shape), std::move(data));
  }
  if (r.pos != r.len) throw CorruptCheckpoint("checkpoint: trailing bytes");

  // Cross-check declared sizes against stored shapes.
  auto it = m.params.find("head.fc2.w");
  if (it == m.params.end() || it->second.shape.size() != 2 ||
      it->second.shape[1] != m.n_classes)
    throw CorruptCheckpoint("checkpoint: head shape inconsistent with declared n_classes");
  auto fc0 = m.params.find("head.fc0.w");
  if (fc0 == m.params.end() || fc0->second.shape[0] != m.cfg.embedding_dim)
    throw CorruptCheckpoint("checkpoint: head shape inconsistent with embedding_dim");
  m.cfg.validate();
  return m;
}

void save_checkpoint_file(const std::string& path, const ModelParams& model) {
  const auto bytes = save_checkpoint(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_checkpoint_file: cannot open " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("save_checkpoint_file: write failed for " + path);
}

ModelParams load_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint_file: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return load_checkpoint(bytes);
}

}  // namespace esdd
