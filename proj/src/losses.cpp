#include "esdd/losses.hpp"

#include <cmath>
#include <memory>

#include "esdd/errors.hpp"

namespace esdd {
namespace {

constexpr double kNormEps = 1e-12;

void check_simplex(const Eigen::MatrixXd& labels) {
  for (Eigen::Index r = 0; r < labels.rows(); ++r) {
    if (std::abs(labels.row(r).sum() - 1.0) > 1e-6 || (labels.row(r).array() < -1e-9).any())
      throw LabelNotSimplex("label row " + std::to_string(r) + " is not on the simplex");
  }
}

// Chebyshev T_m(c) and T_m'(c).
double cheb_t(int m, double c) {
  double t0 = 1.0, t1 = c;
  if (m == 0) return t0;
  for (int k = 1; k < m; ++k) {
    const double t2 = 2.0 * c * t1 - t0;
    t0 = t1;
    t1 = t2;
  }
  return t1;
}

double cheb_u(int m, double c) {  // U_m(c)
  double u0 = 1.0, u1 = 2.0 * c;
  if (m < 0) return 0.0;
  if (m == 0) return u0;
  for (int k = 1; k < m; ++k) {
    const double u2 = 2.0 * c * u1 - u0;
    u0 = u1;
    u1 = u2;
  }
  return u1;
}

int psi_segment(double c, int m) {
  // theta in [k pi/m, (k+1) pi/m]  <=>  cos(k pi/m) >= c  (k smallest such)
  int k = 0;
  for (int j = 1; j < m; ++j)
    if (c < std::cos(j * M_PI / m)) k = j;
  return k;
}

Eigen::MatrixXd row_normalized(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out = x;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = std::max(x.row(r).norm(), kNormEps);
    out.row(r) /= n;
  }
  return out;
}

}  // namespace

double asoftmax_psi(double cos_theta, int margin) {
  const int k = psi_segment(cos_theta, margin);
  return (k % 2 == 0 ? 1.0 : -1.0) * cheb_t(margin, cos_theta) - 2.0 * k;
}

double asoftmax_psi_dcos(double cos_theta, int margin) {
  const int k = psi_segment(cos_theta, margin);
  return (k % 2 == 0 ? 1.0 : -1.0) * margin * cheb_u(margin - 1, cos_theta);
}

int cross_entropy_node(ad::Graph& g, int logits, const Eigen::MatrixXd& soft_labels) {
  const auto& t = g.value(logits);
  if (t.shape.size() != 2 || t.shape[0] != soft_labels.rows() || t.shape[1] != soft_labels.cols())
    throw ShapeMismatch("cross_entropy: logits " + ad::shape_str(t.shape) + " vs labels (" +
                        std::to_string(soft_labels.rows()) + "," +
                        std::to_string(soft_labels.cols()) + ")");
  check_simplex(soft_labels);
  const Eigen::Index bsz = t.shape[0], cls = t.shape[1];
  const Eigen::MatrixXd z = t.to_matrix();
  Eigen::MatrixXd probs(bsz, cls);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < bsz; ++r) {
    const Eigen::ArrayXd shifted = z.row(r).array() - z.row(r).maxCoeff();
    const double lse = std::log(shifted.exp().sum());
    probs.row(r) = (shifted - lse).exp().matrix();
    loss -= (soft_labels.row(r).transpose().array() * (shifted - lse)).sum();
  }
  loss /= static_cast<double>(bsz);
  auto labels = std::make_shared<Eigen::MatrixXd>(soft_labels);
  auto p = std::make_shared<Eigen::MatrixXd>(std::move(probs));
  return g.custom(ad::Tensor::scalar(loss), {logits},
                  [labels, p, bsz](ad::Graph& gr, int self) {
                    const double up = gr.grad(self)[0];
                    const Eigen::MatrixXd dz = up / static_cast<double>(bsz) * (*p - *labels);
                    Eigen::ArrayXd flat(dz.size());
                    Eigen::Map<ad::RowMat>(flat.data(), dz.rows(), dz.cols()) = dz;
                    ad::accumulate_grad(gr, gr.inputs_of(self)[0], flat);
                  },
                  "cross_entropy");
}

int a_softmax_node(ad::Graph& g, int emb, int class_weights, const std::vector<int>& class_ids,
                   int margin) {
  if (margin < 1) throw BadMargin("a_softmax: margin must be >= 1, got " + std::to_string(margin));
  const auto& te = g.value(emb);
  const auto& tw = g.value(class_weights);
  if (te.shape.size() != 2 || tw.shape.size() != 2 || te.shape[1] != tw.shape[1])
    throw ShapeMismatch("a_softmax: emb " + ad::shape_str(te.shape) + " vs weights " +
                        ad::shape_str(tw.shape));
  const Eigen::Index bsz = te.shape[0], cls = tw.shape[0];
  if (static_cast<Eigen::Index>(class_ids.size()) != bsz)
    throw ShapeMismatch("a_softmax: class_ids size mismatch");
  for (int id : class_ids)
    if (id < 0 || id >= cls)
      throw ClassOutOfRange("a_softmax: class id " + std::to_string(id) + " out of [0," +
                            std::to_string(cls) + ")");

  const Eigen::MatrixXd x = te.to_matrix();
  const Eigen::MatrixXd w = tw.to_matrix();
  const Eigen::MatrixXd w_hat = row_normalized(w);

  // Logits: z_j = x . w_hat_j for j != y; z_y = |x| psi(cos theta_y).
  Eigen::MatrixXd z = x * w_hat.transpose();
  Eigen::VectorXd norms(bsz), cos_y(bsz);
  for (Eigen::Index i = 0; i < bsz; ++i) {
    const double r = std::max(x.row(i).norm(), kNormEps);
    norms[i] = r;
    const double c = z(i, class_ids[static_cast<std::size_t>(i)]) / r;
    cos_y[i] = std::clamp(c, -1.0, 1.0);
    z(i, class_ids[static_cast<std::size_t>(i)]) = r * asoftmax_psi(cos_y[i], margin);
  }

  double loss = 0.0;
  Eigen::MatrixXd probs(bsz, cls);
  for (Eigen::Index i = 0; i < bsz; ++i) {
    const Eigen::ArrayXd shifted = z.row(i).array() - z.row(i).maxCoeff();
    const double lse = std::log(shifted.exp().sum());
    probs.row(i) = (shifted - lse).exp().matrix();
    loss -= shifted[class_ids[static_cast<std::size_t>(i)]] - lse;
  }
  loss /= static_cast<double>(bsz);

  auto ctx = std::make_shared<std::tuple<Eigen::MatrixXd, Eigen::MatrixXd, Eigen::MatrixXd,
                                         Eigen::VectorXd, Eigen::VectorXd, std::vector<int>>>(
      x, w, probs, norms, cos_y, class_ids);
  return g.custom(
      ad::Tensor::scalar(loss), {emb, class_weights},
      [ctx, margin](ad::Graph& gr, int self) {
        const auto& [x, w, probs, norms, cos_y, ids] = *ctx;
        const Eigen::Index bsz = x.rows(), dim = x.cols(), cls = w.rows();
        const double up = gr.grad(self)[0];

        Eigen::MatrixXd w_hat = row_normalized(w);
        Eigen::VectorXd w_norms(cls);
        for (Eigen::Index j = 0; j < cls; ++j) w_norms[j] = std::max(w.row(j).norm(), kNormEps);

        // dL/dz, then chain through the margin logit construction.
        Eigen::MatrixXd dz = probs;
        for (Eigen::Index i = 0; i < bsz; ++i) dz(i, ids[static_cast<std::size_t>(i)]) -= 1.0;
        dz *= up / static_cast<double>(bsz);

        Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(bsz, dim);
        Eigen::MatrixXd dw = Eigen::MatrixXd::Zero(cls, dim);
        for (Eigen::Index i = 0; i < bsz; ++i) {
          const int y = ids[static_cast<std::size_t>(i)];
          const double r = norms[i];
          const Eigen::RowVectorXd x_hat = x.row(i) / r;
          for (Eigen::Index j = 0; j < cls; ++j) {
            const double gj = dz(i, j);
            if (gj == 0.0) continue;
            if (j == y) {
              const double c = cos_y[i];
              const double psi = asoftmax_psi(c, margin);
              const double dpsi = asoftmax_psi_dcos(c, margin);
              // z = r psi(c), c = x_hat . w_hat
              dx.row(i) += gj * (psi * x_hat + dpsi * (w_hat.row(j) - c * x_hat));
              dw.row(j) += gj * r * dpsi * (x_hat - c * w_hat.row(j)) / w_norms[j];
            } else {
              const double c_j = x_hat.dot(w_hat.row(j));
              dx.row(i) += gj * w_hat.row(j);
              dw.row(j) += gj * r * (x_hat - c_j * w_hat.row(j)) / w_norms[j];
            }
          }
        }
        Eigen::ArrayXd dxf(dx.size());
        Eigen::Map<ad::RowMat>(dxf.data(), dx.rows(), dx.cols()) = dx;
        Eigen::ArrayXd dwf(dw.size());
        Eigen::Map<ad::RowMat>(dwf.data(), dw.rows(), dw.cols()) = dw;
        ad::accumulate_grad(gr, gr.inputs_of(self)[0], dxf);
        ad::accumulate_grad(gr, gr.inputs_of(self)[1], dwf);
      },
      "a_softmax");
}

int contrastive_node(ad::Graph& g, int emb, const std::vector<int>& labels, double margin,
                     bool normalize_rows) {
  const auto& te = g.value(emb);
  if (te.shape.size() != 2) throw ShapeMismatch("contrastive: emb " + ad::shape_str(te.shape));
  const Eigen::Index bsz = te.shape[0];
  if (bsz < 2) throw BatchTooSmall("contrastive: needs a batch of >= 2");
  if (static_cast<Eigen::Index>(labels.size()) != bsz)
    throw ShapeMismatch("contrastive: labels size mismatch");

  const Eigen::MatrixXd x = te.to_matrix();
  const Eigen::MatrixXd u = normalize_rows ? row_normalized(x) : x;
  const double n_pairs = static_cast<double>(bsz * (bsz - 1)) / 2.0;

  double loss = 0.0;
  Eigen::MatrixXd du = Eigen::MatrixXd::Zero(u.rows(), u.cols());
  for (Eigen::Index i = 0; i < bsz; ++i) {
    for (Eigen::Index j = i + 1; j < bsz; ++j) {
      const Eigen::RowVectorXd diff = u.row(i) - u.row(j);
      const double d = diff.norm();
      if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
        loss += d * d;
        du.row(i) += 2.0 * diff;
        du.row(j) -= 2.0 * diff;
      } else if (d < margin) {
        loss += (margin - d) * (margin - d);
        const double safe_d = std::max(d, kNormEps);
        du.row(i) += -2.0 * (margin - d) / safe_d * diff;
        du.row(j) -= -2.0 * (margin - d) / safe_d * diff;
      }
    }
  }
  loss /= n_pairs;
  du /= n_pairs;

  auto ctx = std::make_shared<std::pair<Eigen::MatrixXd, Eigen::MatrixXd>>(x, std::move(du));
  return g.custom(ad::Tensor::scalar(loss), {emb},
                  [ctx, normalize_rows](ad::Graph& gr, int self) {
                    const auto& [x, du] = *ctx;
                    const double up = gr.grad(self)[0];
                    Eigen::MatrixXd dx = du;
                    if (normalize_rows) {
                      for (Eigen::Index r = 0; r < x.rows(); ++r) {
                        const double n = std::max(x.row(r).norm(), kNormEps);
                        const Eigen::RowVectorXd xh = x.row(r) / n;
                        dx.row(r) = (du.row(r) - du.row(r).dot(xh) * xh) / n;
                      }
                    }
                    dx *= up;
                    Eigen::ArrayXd flat(dx.size());
                    Eigen::Map<ad::RowMat>(flat.data(), dx.rows(), dx.cols()) = dx;
                    ad::accumulate_grad(gr, gr.inputs_of(self)[0], flat);
                  },
                  "contrastive");
}

int center_loss_node(ad::Graph& g, int emb, const std::vector<int>& class_ids,
                     const CenterBank& bank) {
  const auto& te = g.value(emb);
  if (te.shape.size() != 2 || te.shape[1] != bank.centers.cols())
    throw ShapeMismatch("center_loss: emb " + ad::shape_str(te.shape) + " vs centers (" +
                        std::to_string(bank.centers.rows()) + "," +
                        std::to_string(bank.centers.cols()) + ")");
  const Eigen::Index bsz = te.shape[0];
  if (static_cast<Eigen::Index>(class_ids.size()) != bsz)
    throw ShapeMismatch("center_loss: class_ids size mismatch");

  const Eigen::MatrixXd x = te.to_matrix();
  const int n_tracked = static_cast<int>(bank.centers.rows());
  double loss = 0.0;
  int count = 0;
  Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < bsz; ++i) {
    const int c = class_ids[static_cast<std::size_t>(i)];
    if (c < 0 || c >= n_tracked) continue;
    const Eigen::RowVectorXd diff = x.row(i) - bank.centers.row(c);
    loss += 0.5 * diff.squaredNorm();
    dx.row(i) = diff;
    ++count;
  }
  if (count > 0) {
    loss /= count;
    dx /= count;
  }
  auto grad = std::make_shared<Eigen::MatrixXd>(std::move(dx));
  return g.custom(ad::Tensor::scalar(loss), {emb},
                  [grad](ad::Graph& gr, int self) {
                    const double up = gr.grad(self)[0];
                    Eigen::ArrayXd flat(grad->size());
                    Eigen::Map<ad::RowMat>(flat.data(), grad->rows(), grad->cols()) = up * *grad;
                    ad::accumulate_grad(gr, gr.inputs_of(self)[0], flat);
                  },
                  "center_loss");
}

CenterBank update_center_bank(const CenterBank& bank, const Eigen::MatrixXd& emb,
                              const std::vector<int>& class_ids) {
  CenterBank out = bank;
  for (Eigen::Index c = 0; c < bank.centers.rows(); ++c) {
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(bank.centers.cols());
    int count = 0;
    for (Eigen::Index i = 0; i < emb.rows(); ++i) {
      if (class_ids[static_cast<std::size_t>(i)] == static_cast<int>(c)) {
        mean += emb.row(i);
        ++count;
      }
    }
    if (count == 0) continue;
    mean /= count;
    out.centers.row(c) =
        (1.0 - bank.update_rate) * bank.centers.row(c) + bank.update_rate * mean;
  }
  return out;
}

LossValue cross_entropy(const Eigen::MatrixXd& logits, const Eigen::MatrixXd& soft_labels) {
  ad::Graph g;
  const int node = cross_entropy_node(g, g.leaf(ad::Tensor::from_matrix(logits)), soft_labels);
  LossValue v;
  v.value = g.value(node).scalar_value();
  v.components["cross_entropy"] = v.value;
  return v;
}

LossValue a_softmax(const Eigen::MatrixXd& emb, const Eigen::MatrixXd& class_weights,
                    const std::vector<int>& class_ids, int margin) {
  ad::Graph g;
  const int node = a_softmax_node(g, g.leaf(ad::Tensor::from_matrix(emb)),
                                  g.leaf(ad::Tensor::from_matrix(class_weights)), class_ids,
                                  margin);
  LossValue v;
  v.value = g.value(node).scalar_value();
  v.components["asoftmax"] = v.value;
  return v;
}

LossValue contrastive(const Eigen::MatrixXd& emb, const std::vector<int>& labels, double margin,
                      bool normalize_rows) {
  ad::Graph g;
  const int node =
      contrastive_node(g, g.leaf(ad::Tensor::from_matrix(emb)), labels, margin, normalize_rows);
  LossValue v;
  v.value = g.value(node).scalar_value();
  v.components["contrastive"] = v.value;
  return v;
}

std::pair<LossValue, CenterBank> center_loss(const Eigen::MatrixXd& emb,
                                             const std::vector<int>& class_ids,
                                             const CenterBank& bank) {
  ad::Graph g;
  const int node = center_loss_node(g, g.leaf(ad::Tensor::from_matrix(emb)), class_ids, bank);
  LossValue v;
  v.value = g.value(node).scalar_value();
  v.components["center"] = v.value;
  return {v, update_center_bank(bank, emb, class_ids)};
}

CompositeResult composite_phase1_node(ad::Graph& g, int emb, int class_weights,
                                      const std::vector<int>& class_ids,
                                      const std::vector<int>& binary_labels,
                                      const CenterBank& bank, const CompositeWeights& w,
                                      int margin, double contrastive_margin,
                                      bool contrastive_normalized) {
  const int a = a_softmax_node(g, emb, class_weights, class_ids, margin);
  const int c =
      contrastive_node(g, emb, binary_labels, contrastive_margin, contrastive_normalized);
  const int z = center_loss_node(g, emb, class_ids, bank);
  const int total = g.add(g.add(g.scalar_mul(a, w.asoftmax), g.scalar_mul(c, w.contrastive)),
                          g.scalar_mul(z, w.center));
  CompositeResult out;
  out.node = total;
  out.loss.value = g.value(total).scalar_value();
  out.loss.components["asoftmax"] = g.value(a).scalar_value();
  out.loss.components["contrastive"] = g.value(c).scalar_value();
  out.loss.components["center"] = g.value(z).scalar_value();
  return out;
}

}  // namespace esdd
