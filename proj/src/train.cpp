#include "esdd/train.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>

#include "esdd/errors.hpp"

namespace esdd {
namespace {

using Clock = std::chrono::steady_clock;

bool is_embedding_stage(const StageConfig& cfg) {
  return cfg.losses.count("asoftmax") || cfg.losses.count("contrastive") ||
         cfg.losses.count("center");
}

Eigen::MatrixXd one_hot(const std::vector<int>& labels, int n_classes) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()), n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) out(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  return out;
}

ad::Tensor batch_tensor(const std::vector<Eigen::MatrixXd>& batch) {
  const auto bands = batch.front().rows();
  const auto frames = batch.front().cols();
  ad::Tensor t = ad::Tensor::zeros({static_cast<Eigen::Index>(batch.size()), 1, bands, frames});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].rows() != bands || batch[i].cols() != frames)
      throw ShapeMismatch("train: non-uniform feature shapes in batch");
    Eigen::Map<ad::RowMat>(t.data.data() + static_cast<Eigen::Index>(i) * bands * frames, bands,
                           frames) = batch[i];
  }
  return t;
}

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t>& order, Rng& rng,
                                                   int batch_size, std::size_t min_batch) {
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    if (end - start < min_batch) break;  // drop a too-small trailing batch
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace

StageConfig StageConfig::stage_default(int id) {
  StageConfig c;
  c.stage_id = id;
  switch (id) {
    case 1:
      c.epochs = 20;
      c.learning_rate = 5e-4;
      c.losses = {"asoftmax", "contrastive", "center"};
      c.mixup = false;
      c.backbone_frozen = false;
      break;
    case 2:
      c.epochs = 10;
      c.learning_rate = 1e-5;
      c.losses = {"cross_entropy"};
      c.mixup = true;
      c.backbone_frozen = false;
      break;
    case 3:
      c.epochs = 5;
      c.learning_rate = 1e-6;
      c.losses = {"cross_entropy"};
      c.mixup = false;
      c.backbone_frozen = true;
      break;
    default:
      throw ConfigError("StageConfig: stage id must be 1, 2 or 3");
  }
  return c;
}

void StageConfig::validate() const {
  if (stage_id < 1 || stage_id > 3) throw ConfigError("StageConfig: stage id must be 1, 2 or 3");
  if (epochs < 0) throw ConfigError("StageConfig: epochs must be >= 0");
  if (learning_rate <= 0) throw ConfigError("StageConfig: learning rate must be positive");
  if (losses.empty()) throw ConfigError("StageConfig: loss set must be nonempty");
  for (const auto& l : losses)
    if (l != "asoftmax" && l != "contrastive" && l != "center" && l != "cross_entropy")
      throw ConfigError("StageConfig: unknown loss: " + l);
  if (losses.count("cross_entropy") && losses.size() > 1)
    throw ConfigError("StageConfig: cross_entropy does not combine with embedding losses");
}

std::string train_log_jsonl(const TrainLog& log) {
  std::string out;
  for (const auto& r : log.epochs) {
    nlohmann::ordered_json j;
    j["stage"] = r.stage;
    j["epoch"] = r.epoch;
    j["mean_loss"] = r.mean_loss;
    j["components"] = r.components;
    j["learning_rate"] = r.learning_rate;
    j["wall_seconds"] = r.wall_seconds;
    j["seed"] = log.seed;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_train_log(const std::string& path, const TrainLog& log) {
  std::ofstream f(path);
  if (!f) throw IoError("write_train_log: cannot open " + path);
  f << train_log_jsonl(log);
  if (!f) throw IoError("write_train_log: write failed for " + path);
}

double adam_step_scalar(double w, double grad, double& m, double& v, long long& step, double lr,
                        double beta1, double beta2, double eps) {
  ++step;
  m = beta1 * m + (1.0 - beta1) * grad;
  v = beta2 * v + (1.0 - beta2) * grad * grad;
  const double mh = m / (1.0 - std::pow(beta1, static_cast<double>(step)));
  const double vh = v / (1.0 - std::pow(beta2, static_cast<double>(step)));
  return w - lr * mh / (std::sqrt(vh) + eps);
}

void adam_step(ModelParams& model, const std::map<std::string, Eigen::ArrayXd>& grads,
               AdamState& state, double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    auto it = model.params.find(name);
    if (it == model.params.end()) throw ShapeMismatch("adam_step: unknown parameter " + name);
    ad::Tensor& p = it->second;
    if (g.size() != p.data.size())
      throw ShapeMismatch("adam_step: gradient size mismatch for " + name);
    const ParamGroup group = model.group_of(name);
    if (model.is_frozen(group) || group == ParamGroup::centers)
      throw ShapeMismatch("adam_step: gradient supplied for frozen parameter " + name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() == 0) {
      m = Eigen::ArrayXd::Zero(g.size());
      v = Eigen::ArrayXd::Zero(g.size());
    }
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.square();
    p.data -= lr * (m / bc1) / ((v / bc2).sqrt() + state.eps);
  }
}

void warm_start_head(ModelParams& model, const std::vector<int>& fake_class_ids) {
  const auto it = model.params.find("asoftmax.w");
  if (it == model.params.end() || fake_class_ids.empty()) return;
  const int dim = model.cfg.embedding_dim;
  if (model.n_classes != 2 || dim != kHeadHidden2 || 2 * dim > 2 * kHeadHidden1) return;
  const Eigen::MatrixXd cw = it->second.to_matrix();  // classes x dim

  auto unit_row = [&](int r) -> Eigen::VectorXd {
    Eigen::VectorXd v = cw.row(r).transpose();
    const double n = v.norm();
    return n > 1e-12 ? Eigen::VectorXd(v / n) : v;
  };
  Eigen::VectorXd bona = unit_row(0);
  Eigen::VectorXd fake = Eigen::VectorXd::Zero(dim);
  for (int id : fake_class_ids) {
    if (id <= 0 || id >= cw.rows()) return;
    fake += unit_row(id);
  }
  const double fn = fake.norm();
  if (fn > 1e-12) fake /= fn;

  // Embeddings are global-average-pooled relu activations, hence
  // nonnegative, so identity weights pass through the head relus unchanged.
  Eigen::MatrixXd w0 = Eigen::MatrixXd::Zero(dim, kHeadHidden1);
  w0.block(0, 0, dim, dim) = Eigen::MatrixXd::Identity(dim, dim);
  Eigen::MatrixXd w1 = Eigen::MatrixXd::Zero(kHeadHidden1, kHeadHidden2);
  w1.block(0, 0, dim, dim) = Eigen::MatrixXd::Identity(dim, dim);
  Eigen::MatrixXd w2(dim, 2);
  w2.col(0) = bona;
  w2.col(1) = fake;

  model.params["head.fc0.w"] = ad::Tensor::from_matrix(w0);
  model.params["head.fc0.b"] = ad::Tensor::zeros({kHeadHidden1});
  model.params["head.fc1.w"] = ad::Tensor::from_matrix(w1);
  model.params["head.fc1.b"] = ad::Tensor::zeros({kHeadHidden2});
  model.params["head.fc2.w"] = ad::Tensor::from_matrix(w2);
  model.params["head.fc2.b"] = ad::Tensor::zeros({2});
}

void warm_start_head_lda(ModelParams& model, const std::vector<TrainItem>& items) {
  const int dim = model.cfg.embedding_dim;
  if (model.n_classes != 2 || dim != kHeadHidden2) return;

  // Embed the training set with the stage-1 backbone (inference only).
  Eigen::MatrixXd emb(static_cast<Eigen::Index>(items.size()), dim);
  for (std::size_t i = 0; i < items.size(); i += 32) {
    std::vector<Eigen::MatrixXd> feats;
    for (std::size_t j = i; j < std::min(i + 32, items.size()); ++j)
      feats.push_back(items[j].features);
    ad::Graph g;
    auto ids = register_params(g, model);
    const int node = forward_embedding(g, model, ids, g.leaf(batch_tensor(feats)));
    emb.middleRows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(feats.size())) =
        g.value(node).to_matrix();
  }

  // Regularized two-class linear discriminant on the embeddings.
  Eigen::VectorXd mu0 = Eigen::VectorXd::Zero(dim), mu1 = Eigen::VectorXd::Zero(dim);
  long long n0 = 0, n1 = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].label == 0) {
      mu0 += emb.row(static_cast<Eigen::Index>(i)).transpose();
      ++n0;
    } else {
      mu1 += emb.row(static_cast<Eigen::Index>(i)).transpose();
      ++n1;
    }
  }
  if (n0 == 0 || n1 == 0) return;
  mu0 /= static_cast<double>(n0);
  mu1 /= static_cast<double>(n1);

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(dim, dim);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Eigen::VectorXd d =
        emb.row(static_cast<Eigen::Index>(i)).transpose() - (items[i].label == 0 ? mu0 : mu1);
    cov.noalias() += d * d.transpose();
  }
  cov /= static_cast<double>(std::max<long long>(n0 + n1 - 2, 1));
  const double ridge = std::max(1e-3 * cov.trace() / dim, 1e-9);
  cov.diagonal().array() += ridge;

  Eigen::VectorXd w = cov.ldlt().solve(mu1 - mu0);
  double bias = -0.5 * w.dot(mu0 + mu1);

  // Bound the logit spread so stage-2 cross entropy starts confident but
  // not saturated.
  const Eigen::VectorXd z = emb * w;
  const double spread = std::sqrt((z.array() + bias).square().mean());
  if (spread > 1e-12) {
    const double scale = 4.0 / spread;
    w *= scale;
    bias *= scale;
  }

  // Embeddings are global-average-pooled relu activations, hence
  // nonnegative, so identity weights pass through the head relus unchanged.
  Eigen::MatrixXd w0 = Eigen::MatrixXd::Zero(dim, kHeadHidden1);
  w0.block(0, 0, dim, dim) = Eigen::MatrixXd::Identity(dim, dim);
  Eigen::MatrixXd w1 = Eigen::MatrixXd::Zero(kHeadHidden1, kHeadHidden2);
  w1.block(0, 0, dim, dim) = Eigen::MatrixXd::Identity(dim, dim);
  Eigen::MatrixXd w2 = Eigen::MatrixXd::Zero(dim, 2);
  w2.col(1) = w;
  Eigen::ArrayXd b2 = Eigen::ArrayXd::Zero(2);
  b2[1] = bias;

  model.params["head.fc0.w"] = ad::Tensor::from_matrix(w0);
  model.params["head.fc0.b"] = ad::Tensor::zeros({kHeadHidden1});
  model.params["head.fc1.w"] = ad::Tensor::from_matrix(w1);
  model.params["head.fc1.b"] = ad::Tensor::zeros({kHeadHidden2});
  model.params["head.fc2.w"] = ad::Tensor::from_matrix(w2);
  model.params["head.fc2.b"] = ad::Tensor({2}, b2);
}

void run_stage(ModelParams& model, CenterBank& bank, const std::vector<TrainItem>& items,
               const StageConfig& cfg, const TrainOptions& opts, TrainLog& log) {
  cfg.validate();
  if (items.empty()) throw EmptyDataset("run_stage: no training items");
  const bool embedding_stage = is_embedding_stage(cfg);

  int n_multiclass = 0;
  if (embedding_stage) {
    for (const auto& it : items) {
      if (it.class_id < 0)
        throw MissingGeneratorLabels("run_stage: embedding stage needs multiclass ids");
      n_multiclass = std::max(n_multiclass, it.class_id + 1);
    }
    if (n_multiclass < 2)
      throw MissingGeneratorLabels("run_stage: embedding stage needs >= 2 classes");
    if (!model.params.count("asoftmax.w")) add_asoftmax_weights(model, n_multiclass);
    if (bank.centers.size() == 0) {
      bank.centers = Eigen::MatrixXd::Zero(1, model.cfg.embedding_dim);  // bonafide centroid
      bank.update_rate = opts.center_update_rate;
    }
  }

  set_frozen(model, ParamGroup::backbone, cfg.backbone_frozen);

  AdamState adam;
  Rng rng(mix_seed(opts.seed, static_cast<std::uint64_t>(cfg.stage_id)));
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = Clock::now();
    // Margin warm-up: hard angular margins collapse embedding norms from a
    // random start, so the first half of an embedding stage runs margin-free
    // before switching to the configured margin.
    const int margin =
        (embedding_stage && epoch <= cfg.epochs / 2) ? 1 : opts.asoftmax_margin;
    const auto batches = make_batches(order, rng, opts.batch_size, embedding_stage ? 2 : 1);
    if (batches.empty()) throw EmptyDataset("run_stage: no batch of usable size");

    double loss_sum = 0.0;
    std::map<std::string, double> comp_sum;
    for (const auto& l : cfg.losses) comp_sum[l] = 0.0;

    for (const auto& batch_idx : batches) {
      std::vector<Eigen::MatrixXd> feats;
      std::vector<int> labels, class_ids;
      feats.reserve(batch_idx.size());
      for (std::size_t i : batch_idx) {
        feats.push_back(items[i].features);
        labels.push_back(items[i].label);
        class_ids.push_back(items[i].class_id);
      }

      Eigen::MatrixXd soft = one_hot(labels, model.n_classes);
      if (cfg.mixup && opts.mixup.enabled) {
        MixupResult mixed = mixup_batch(feats, soft, opts.mixup, rng);
        feats = std::move(mixed.batch);
        soft = std::move(mixed.labels);
      }

      ad::Graph g;
      auto ids = register_params(g, model);
      const int input = g.leaf(batch_tensor(feats), "input");
      const int emb = forward_embedding(g, model, ids, input);

      int loss_node = -1;
      std::map<std::string, double> comps;
      auto add_weighted = [&](int node, double w, const std::string& name) {
        comps[name] = g.value(node).scalar_value();
        const int scaled = w == 1.0 ? node : g.scalar_mul(node, w);
        loss_node = loss_node < 0 ? scaled : g.add(loss_node, scaled);
      };

      Eigen::MatrixXd emb_values;
      if (embedding_stage) {
        emb_values = g.value(emb).to_matrix();
        if (cfg.losses.count("asoftmax"))
          add_weighted(a_softmax_node(g, emb, ids.at("asoftmax.w"), class_ids, margin),
                       opts.weights.asoftmax, "asoftmax");
        if (cfg.losses.count("contrastive"))
          add_weighted(contrastive_node(g, emb, labels, opts.contrastive_margin, true),
                       opts.weights.contrastive, "contrastive");
        if (cfg.losses.count("center"))
          add_weighted(center_loss_node(g, emb, class_ids, bank), opts.weights.center, "center");
      } else {
        const int logits = head_logits(g, model, ids, emb);
        add_weighted(cross_entropy_node(g, logits, soft), 1.0, "cross_entropy");
      }

      loss_sum += g.value(loss_node).scalar_value();
      for (const auto& [k, v] : comps) comp_sum[k] += v;

      auto grads = g.backward(loss_node);
      std::map<std::string, Eigen::ArrayXd> named;
      for (const auto& [name, id] : ids) {
        const auto it = grads.find(id);
        if (it != grads.end()) named[name] = it->second.data;
      }
      adam_step(model, named, adam, cfg.learning_rate);

      if (embedding_stage && cfg.losses.count("center"))
        bank = update_center_bank(bank, emb_values, class_ids);
    }

    EpochRecord rec;
    rec.stage = cfg.stage_id;
    rec.epoch = epoch;
    rec.learning_rate = cfg.learning_rate;
    rec.mean_loss = loss_sum / static_cast<double>(batches.size());
    for (const auto& [k, v] : comp_sum)
      rec.components[k] = v / static_cast<double>(batches.size());
    rec.wall_seconds =
        std::chrono::duration<double>(Clock::now() - t0).count();
    if (!std::isfinite(rec.mean_loss))
      throw NumericError("run_stage: non-finite epoch loss at stage " +
                         std::to_string(cfg.stage_id));
    log.epochs.push_back(std::move(rec));
  }
}

TrainLog run_three_stage(ModelParams& model, const std::vector<TrainItem>& items,
                         const std::vector<StageConfig>& stages, const TrainOptions& opts) {
  TrainLog log;
  log.seed = opts.seed;
  CenterBank bank;
  bool warmed = false;
  for (const auto& stage : stages) {
    if (!warmed && !is_embedding_stage(stage) && opts.head_warm_start) {
      warm_start_head_lda(model, items);
      warmed = true;
    }
    run_stage(model, bank, items, stage, opts, log);
    if (!opts.checkpoint_dir.empty())
      save_checkpoint_file(opts.checkpoint_dir + "/stage" + std::to_string(stage.stage_id) +
                               ".ckpt",
                           model);
  }
  return log;
}

TrainLog run_plain(ModelParams& model, const std::vector<TrainItem>& items, int epochs, double lr,
                   const TrainOptions& opts) {
  StageConfig cfg;
  cfg.stage_id = 1;
  cfg.epochs = epochs;
  cfg.learning_rate = lr;
  cfg.losses = {"cross_entropy"};
  cfg.mixup = false;
  cfg.backbone_frozen = false;
  TrainLog log;
  log.seed = opts.seed;
  CenterBank bank;
  run_stage(model, bank, items, cfg, opts, log);
  return log;
}

}  // namespace esdd
