#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

#include "esdd/autodiff.hpp"

namespace esdd {

struct LossValue {
  double value = 0.0;
  std::map<std::string, double> components;  // unweighted sub-loss values
};

// Running class centroids; tracked class ids are 0..rows-1.
struct CenterBank {
  Eigen::MatrixXd centers;  // n_tracked x embedding_dim
  double update_rate = 0.5;
};

struct CompositeWeights {
  double asoftmax = 1.0;
  double contrastive = 1.0;
  double center = 1.0;
};

// Graph-integrated loss nodes (scalar outputs, analytic backward).
int cross_entropy_node(ad::Graph& g, int logits, const Eigen::MatrixXd& soft_labels);
int a_softmax_node(ad::Graph& g, int emb, int class_weights,
                   const std::vector<int>& class_ids, int margin);
// All B(B-1)/2 unordered in-batch pairs. When normalize_rows is set the
// distance is taken between L2-normalized embeddings.
int contrastive_node(ad::Graph& g, int emb, const std::vector<int>& labels, double margin,
                     bool normalize_rows = false);
int center_loss_node(ad::Graph& g, int emb, const std::vector<int>& class_ids,
                     const CenterBank& bank);

// EMA update toward the batch mean of each tracked class; returns the new
// bank (classes absent from the batch keep their center).
CenterBank update_center_bank(const CenterBank& bank, const Eigen::MatrixXd& emb,
                              const std::vector<int>& class_ids);

// Plain-value wrappers over the graph nodes.
LossValue cross_entropy(const Eigen::MatrixXd& logits, const Eigen::MatrixXd& soft_labels);
LossValue a_softmax(const Eigen::MatrixXd& emb, const Eigen::MatrixXd& class_weights,
                    const std::vector<int>& class_ids, int margin);
LossValue contrastive(const Eigen::MatrixXd& emb, const std::vector<int>& labels, double margin,
                      bool normalize_rows = false);
std::pair<LossValue, CenterBank> center_loss(const Eigen::MatrixXd& emb,
                                             const std::vector<int>& class_ids,
                                             const CenterBank& bank);

struct CompositeResult {
  int node = -1;
  LossValue loss;
};

// w_a * a_softmax + w_c * contrastive + w_z * center_loss.
CompositeResult composite_phase1_node(ad::Graph& g, int emb, int class_weights,
                                      const std::vector<int>& class_ids,
                                      const std::vector<int>& binary_labels,
                                      const CenterBank& bank, const CompositeWeights& w,
                                      int margin, double contrastive_margin,
                                      bool contrastive_normalized = true);

// Angular-margin map psi(theta) = (-1)^k cos(m theta) - 2k evaluated in
// cos(theta) via Chebyshev polynomials, plus its derivative d psi / d cos.
double asoftmax_psi(double cos_theta, int margin);
double asoftmax_psi_dcos(double cos_theta, int margin);

}  // namespace esdd
