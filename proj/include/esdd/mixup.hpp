#pragma once

#include <Eigen/Dense>
#include <vector>

#include "esdd/rng.hpp"

namespace esdd {

struct MixupConfig {
  double alpha = 0.5;            // Beta(alpha, alpha) shape
  double apply_probability = 0.8;
  bool enabled = true;

  void validate() const;  // throws ConfigError
};

struct MixupResult {
  std::vector<Eigen::MatrixXd> batch;
  Eigen::MatrixXd labels;  // B x C simplex rows
  double lambda = 1.0;
};

// x' = lambda x_i + (1-lambda) x_j with a rotation-derangement partner
// assignment; identity (lambda = 1) when disabled or the apply-probability
// draw fails. One lambda per batch.
MixupResult mixup_batch(const std::vector<Eigen::MatrixXd>& batch, const Eigen::MatrixXd& labels,
                        const MixupConfig& cfg, Rng& rng);

// Deterministic variant with the mixing weight and partner offset pinned.
MixupResult mixup_batch_fixed(const std::vector<Eigen::MatrixXd>& batch,
                              const Eigen::MatrixXd& labels, double lambda,
                              Eigen::Index offset);

}  // namespace esdd
