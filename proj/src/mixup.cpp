#include "esdd/mixup.hpp"

#include <cmath>

#include "esdd/errors.hpp"

namespace esdd {

void MixupConfig::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("mixup: alpha must be > 0");
  if (apply_probability < 0.0 || apply_probability > 1.0)
    throw ConfigError("mixup: apply_probability must be in [0,1]");
}

namespace {

void check_batch(const std::vector<Eigen::MatrixXd>& batch, const Eigen::MatrixXd& labels) {
  const auto bsz = static_cast<Eigen::Index>(batch.size());
  if (bsz < 2) throw BatchTooSmall("mixup: needs a batch of >= 2");
  if (labels.rows() != bsz) throw ConfigError("mixup: labels row count mismatch");
  for (Eigen::Index r = 0; r < labels.rows(); ++r)
    if (std::abs(labels.row(r).sum() - 1.0) > 1e-6 || (labels.row(r).array() < -1e-9).any())
      throw ConfigError("mixup: label row " + std::to_string(r) + " not on the simplex");
  for (const auto& x : batch)
    if (x.rows() != batch.front().rows() || x.cols() != batch.front().cols())
      throw ConfigError("mixup: non-uniform batch shapes");
}

}  // namespace

MixupResult mixup_batch_fixed(const std::vector<Eigen::MatrixXd>& batch,
                              const Eigen::MatrixXd& labels, double lambda,
                              Eigen::Index offset) {
  check_batch(batch, labels);
  MixupResult out;
  out.batch = batch;
  out.labels = labels;
  out.lambda = lambda;
  if (lambda == 1.0) return out;  // bit-exact identity
  const auto bsz = static_cast<Eigen::Index>(batch.size());
  for (Eigen::Index i = 0; i < bsz; ++i) {
    const Eigen::Index j = (i + offset) % bsz;
    out.batch[static_cast<std::size_t>(i)] = lambda * batch[static_cast<std::size_t>(i)] +
                                             (1.0 - lambda) * batch[static_cast<std::size_t>(j)];
    out.labels.row(i) = lambda * labels.row(i) + (1.0 - lambda) * labels.row(j);
  }
  return out;
}

MixupResult mixup_batch(const std::vector<Eigen::MatrixXd>& batch, const Eigen::MatrixXd& labels,
                        const MixupConfig& cfg, Rng& rng) {
  cfg.validate();
  check_batch(batch, labels);
  if (!cfg.enabled || rng.uniform() >= cfg.apply_probability) {
    MixupResult out;
    out.batch = batch;
    out.labels = labels;
    out.lambda = 1.0;
    return out;
  }
  const double lambda = rng.beta(cfg.alpha, cfg.alpha);
  // Rotation by a nonzero offset: every sample gets a distinct partner.
  const auto offset =
      static_cast<Eigen::Index>(1 + rng.below(static_cast<std::uint64_t>(batch.size() - 1)));
  return mixup_batch_fixed(batch, labels, lambda, offset);
}

}  // namespace esdd
