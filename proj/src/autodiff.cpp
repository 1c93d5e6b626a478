#include "esdd/autodiff.hpp"

#include <cmath>
#include <limits>
#include <memory>

#include "esdd/errors.hpp"

namespace esdd::ad {
namespace {

void expect_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank)
    throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) +
                        ", got shape " + shape_str(s));
}

void expect_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a) + " vs " + shape_str(b));
}

// im2col for one batch item: (C*kh*kw) x (Ho*Wo), zero padding p.
void im2col(const double* x, Eigen::Index c_in, Eigen::Index h, Eigen::Index w,
            Eigen::Index kh, Eigen::Index kw, Eigen::Index stride, Eigen::Index pad,
            Eigen::Index ho, Eigen::Index wo, RowMat& cols) {
  for (Eigen::Index c = 0; c < c_in; ++c) {
    const double* plane = x + c * h * w;
    for (Eigen::Index ky = 0; ky < kh; ++ky) {
      for (Eigen::Index kx = 0; kx < kw; ++kx) {
        const Eigen::Index row = (c * kh + ky) * kw + kx;
        for (Eigen::Index oy = 0; oy < ho; ++oy) {
          const Eigen::Index iy = oy * stride + ky - pad;
          for (Eigen::Index ox = 0; ox < wo; ++ox) {
            const Eigen::Index ix = ox * stride + kx - pad;
            cols(row, oy * wo + ox) =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? plane[iy * w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const RowMat& cols, Eigen::Index c_in, Eigen::Index h, Eigen::Index w,
            Eigen::Index kh, Eigen::Index kw, Eigen::Index stride, Eigen::Index pad,
            Eigen::Index ho, Eigen::Index wo, double* dx) {
  for (Eigen::Index c = 0; c < c_in; ++c) {
    double* plane = dx + c * h * w;
    for (Eigen::Index ky = 0; ky < kh; ++ky) {
      for (Eigen::Index kx = 0; kx < kw; ++kx) {
        const Eigen::Index row = (c * kh + ky) * kw + kx;
        for (Eigen::Index oy = 0; oy < ho; ++oy) {
          const Eigen::Index iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (Eigen::Index ox = 0; ox < wo; ++ox) {
            const Eigen::Index ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            plane[iy * w + ix] += cols(row, oy * wo + ox);
          }
        }
      }
    }
  }
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

Eigen::Index numel(const Shape& s) {
  Eigen::Index n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape s, Eigen::ArrayXd d, bool rg)
    : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
  if (data.size() != ad::numel(shape))
    throw ShapeMismatch("Tensor: data length " + std::to_string(data.size()) +
                        " != product of shape " + shape_str(shape));
}

Tensor Tensor::zeros(Shape s, bool rg) {
  const auto n = ad::numel(s);
  return Tensor(std::move(s), Eigen::ArrayXd::Zero(n), rg);
}

Tensor Tensor::scalar(double v, bool rg) {
  Eigen::ArrayXd d(1);
  d[0] = v;
  return Tensor({1}, std::move(d), rg);
}

Tensor Tensor::from_matrix(const Eigen::MatrixXd& m, bool rg) {
  Eigen::ArrayXd d(m.size());
  Eigen::Map<RowMat>(d.data(), m.rows(), m.cols()) = m;
  return Tensor({m.rows(), m.cols()}, std::move(d), rg);
}

double Tensor::scalar_value() const {
  if (data.size() != 1) throw ShapeMismatch("scalar_value: shape " + shape_str(shape));
  return data[0];
}

Eigen::MatrixXd Tensor::to_matrix() const {
  if (shape.size() != 2) throw ShapeMismatch("to_matrix: shape " + shape_str(shape));
  return Eigen::Map<const RowMat>(data.data(), shape[0], shape[1]);
}

Eigen::Map<const RowMat> Tensor::mat() const {
  if (shape.size() != 2) throw ShapeMismatch("mat: shape " + shape_str(shape));
  return {data.data(), shape[0], shape[1]};
}

Eigen::Map<RowMat> Tensor::mat() {
  if (shape.size() != 2) throw ShapeMismatch("mat: shape " + shape_str(shape));
  return {data.data(), shape[0], shape[1]};
}

void Graph::check_id(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
    throw NumericError("Graph: bad node id " + std::to_string(id));
}

const Tensor& Graph::value(int id) const {
  check_id(id);
  return nodes_[static_cast<std::size_t>(id)].value;
}

bool Graph::requires_grad(int id) const {
  check_id(id);
  return nodes_[static_cast<std::size_t>(id)].requires_grad;
}

const std::vector<int>& Graph::inputs_of(int id) const {
  check_id(id);
  return nodes_[static_cast<std::size_t>(id)].inputs;
}

Eigen::ArrayXd& Graph::grad(int id) {
  check_id(id);
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() != n.value.data.size()) n.grad = Eigen::ArrayXd::Zero(n.value.data.size());
  return n.grad;
}

int Graph::push(Tensor value, std::vector<int> inputs,
                std::function<void(Graph&, int)> backprop, std::string tag) {
  if (consumed_) throw NumericError("Graph: already consumed by backward");
  if (!value.data.allFinite())
    throw NumericError("non-finite forward output at node '" + tag + "' #" +
                       std::to_string(nodes_.size()));
  bool rg = value.requires_grad;
  for (int i : inputs) {
    check_id(i);
    rg = rg || nodes_[static_cast<std::size_t>(i)].requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.value.requires_grad = rg;
  n.requires_grad = rg;
  n.inputs = std::move(inputs);
  n.backprop = rg ? std::move(backprop) : nullptr;
  n.tag = std::move(tag);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

void Graph::accumulate(int id, const Eigen::ArrayXd& g) {
  auto& slot = grad(id);
  if (slot.size() != g.size())
    throw ShapeMismatch("gradient accumulation size mismatch at node " + std::to_string(id));
  slot += g;
}

void accumulate_grad(Graph& g, int id, const Eigen::ArrayXd& delta) {
  if (!g.requires_grad(id)) return;
  auto& slot = g.grad(id);
  if (slot.size() != delta.size())
    throw ShapeMismatch("gradient accumulation size mismatch at node " + std::to_string(id));
  slot += delta;
}

int Graph::leaf(Tensor t, std::string tag) {
  return push(std::move(t), {}, nullptr, std::move(tag));
}

int Graph::custom(Tensor value, std::vector<int> inputs,
                  std::function<void(Graph&, int)> backprop, std::string tag) {
  return push(std::move(value), std::move(inputs), std::move(backprop), std::move(tag));
}

int Graph::add(int a, int b) {
  expect_same(value(a).shape, value(b).shape, "add");
  Tensor out(value(a).shape, value(a).data + value(b).data);
  return push(std::move(out), {a, b},
              [](Graph& g, int self) {
                const auto& up = g.grad(self);
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                accumulate_grad(g, in[0], up);
                accumulate_grad(g, in[1], up);
              },
              "add");
}

int Graph::sub(int a, int b) {
  expect_same(value(a).shape, value(b).shape, "sub");
  Tensor out(value(a).shape, value(a).data - value(b).data);
  return push(std::move(out), {a, b},
              [](Graph& g, int self) {
                const auto& up = g.grad(self);
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                accumulate_grad(g, in[0], up);
                accumulate_grad(g, in[1], -up);
              },
              "sub");
}

int Graph::mul(int a, int b) {
  expect_same(value(a).shape, value(b).shape, "mul");
  Tensor out(value(a).shape, value(a).data * value(b).data);
  return push(std::move(out), {a, b},
              [](Graph& g, int self) {
                const auto& up = g.grad(self);
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                accumulate_grad(g, in[0], up * g.value(in[1]).data);
                accumulate_grad(g, in[1], up * g.value(in[0]).data);
              },
              "mul");
}

int Graph::scalar_mul(int a, double s) {
  Tensor out(value(a).shape, value(a).data * s);
  return push(std::move(out), {a},
              [s](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                accumulate_grad(g, in[0], g.grad(self) * s);
              },
              "scalar_mul");
}

int Graph::matmul(int a, int b) {
  const auto& ta = value(a);
  const auto& tb = value(b);
  expect_rank(ta.shape, 2, "matmul");
  expect_rank(tb.shape, 2, "matmul");
  if (ta.shape[1] != tb.shape[0])
    throw ShapeMismatch("matmul: " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
  Tensor out = Tensor::zeros({ta.shape[0], tb.shape[1]});
  out.mat().noalias() = ta.mat() * tb.mat();
  return push(std::move(out), {a, b},
              [](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                const auto& ta = g.value(in[0]);
                const auto& tb = g.value(in[1]);
                Eigen::Map<const RowMat> up(g.grad(self).data(), ta.shape[0], tb.shape[1]);
                if (g.requires_grad(in[0])) {
                  Eigen::ArrayXd da(ta.data.size());
                  Eigen::Map<RowMat>(da.data(), ta.shape[0], ta.shape[1]).noalias() =
                      up * tb.mat().transpose();
                  accumulate_grad(g, in[0], da);
                }
                if (g.requires_grad(in[1])) {
                  Eigen::ArrayXd db(tb.data.size());
                  Eigen::Map<RowMat>(db.data(), tb.shape[0], tb.shape[1]).noalias() =
                      ta.mat().transpose() * up;
                  accumulate_grad(g, in[1], db);
                }
              },
              "matmul");
}

int Graph::bias_add_row(int a, int b) {
  const auto& ta = value(a);
  const auto& tb = value(b);
  expect_rank(ta.shape, 2, "bias_add_row");
  expect_rank(tb.shape, 1, "bias_add_row");
  if (ta.shape[1] != tb.shape[0])
    throw ShapeMismatch("bias_add_row: " + shape_str(ta.shape) + " + " + shape_str(tb.shape));
  Tensor out = ta;
  out.requires_grad = false;
  out.mat().rowwise() += Eigen::Map<const Eigen::RowVectorXd>(tb.data.data(), tb.data.size());
  return push(std::move(out), {a, b},
              [](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                const auto& ta = g.value(in[0]);
                accumulate_grad(g, in[0], g.grad(self));
                if (g.requires_grad(in[1])) {
                  Eigen::Map<const RowMat> up(g.grad(self).data(), ta.shape[0], ta.shape[1]);
                  accumulate_grad(g, in[1], up.colwise().sum().transpose().array());
                }
              },
              "bias_add_row");
}

int Graph::bias_add_channel(int a, int b) {
  const auto& ta = value(a);
  const auto& tb = value(b);
  expect_rank(ta.shape, 4, "bias_add_channel");
  expect_rank(tb.shape, 1, "bias_add_channel");
  if (ta.shape[1] != tb.shape[0])
    throw ShapeMismatch("bias_add_channel: " + shape_str(ta.shape) + " + " + shape_str(tb.shape));
  const auto [bsz, c, h, w] = std::tuple{ta.shape[0], ta.shape[1], ta.shape[2], ta.shape[3]};
  Tensor out = ta;
  out.requires_grad = false;
  for (Eigen::Index i = 0; i < bsz; ++i)
    for (Eigen::Index j = 0; j < c; ++j)
      out.data.segment((i * c + j) * h * w, h * w) += tb.data[j];
  return push(std::move(out), {a, b},
              [](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                const auto& ta = g.value(in[0]);
                accumulate_grad(g, in[0], g.grad(self));
                if (g.requires_grad(in[1])) {
                  const auto [bsz, c, h, w] =
                      std::tuple{ta.shape[0], ta.shape[1], ta.shape[2], ta.shape[3]};
                  Eigen::ArrayXd db = Eigen::ArrayXd::Zero(c);
                  const auto& up = g.grad(self);
                  for (Eigen::Index i = 0; i < bsz; ++i)
                    for (Eigen::Index j = 0; j < c; ++j)
                      db[j] += up.segment((i * c + j) * h * w, h * w).sum();
                  accumulate_grad(g, in[1], db);
                }
              },
              "bias_add_channel");
}

int Graph::conv2d(int x, int w, int stride, int pad) {
  const auto& tx = value(x);
  const auto& tw = value(w);
  expect_rank(tx.shape, 4, "conv2d");
  expect_rank(tw.shape, 4, "conv2d");
  if (tx.shape[1] != tw.shape[1])
    throw ShapeMismatch("conv2d: input channels " + shape_str(tx.shape) + " vs kernel " +
                        shape_str(tw.shape));
  if (stride < 1 || pad < 0) throw ShapeMismatch("conv2d: bad stride/pad");
  const Eigen::Index bsz = tx.shape[0], c_in = tx.shape[1], h = tx.shape[2], wd = tx.shape[3];
  const Eigen::Index c_out = tw.shape[0], kh = tw.shape[2], kw = tw.shape[3];
  const Eigen::Index ho = (h + 2 * pad - kh) / stride + 1;
  const Eigen::Index wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1)
    throw ShapeMismatch("conv2d: kernel " + shape_str(tw.shape) + " too large for input " +
                        shape_str(tx.shape));

  Eigen::Map<const RowMat> wmat(tw.data.data(), c_out, c_in * kh * kw);
  Tensor out = Tensor::zeros({bsz, c_out, ho, wo});
  RowMat cols(c_in * kh * kw, ho * wo);
  for (Eigen::Index i = 0; i < bsz; ++i) {
    im2col(tx.data.data() + i * c_in * h * wd, c_in, h, wd, kh, kw, stride, pad, ho, wo, cols);
    Eigen::Map<RowMat>(out.data.data() + i * c_out * ho * wo, c_out, ho * wo).noalias() =
        wmat * cols;
  }
  return push(std::move(out), {x, w},
              [stride, pad](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                const auto& tx = g.value(in[0]);
                const auto& tw = g.value(in[1]);
                const Eigen::Index bsz = tx.shape[0], c_in = tx.shape[1], h = tx.shape[2],
                                   wd = tx.shape[3];
                const Eigen::Index c_out = tw.shape[0], kh = tw.shape[2], kw = tw.shape[3];
                const Eigen::Index ho = (h + 2 * pad - kh) / stride + 1;
                const Eigen::Index wo = (wd + 2 * pad - kw) / stride + 1;
                Eigen::Map<const RowMat> wmat(tw.data.data(), c_out, c_in * kh * kw);
                const auto& up = g.grad(self);

                Eigen::ArrayXd dw = Eigen::ArrayXd::Zero(tw.data.size());
                Eigen::Map<RowMat> dwmat(dw.data(), c_out, c_in * kh * kw);
                Eigen::ArrayXd dx = Eigen::ArrayXd::Zero(tx.data.size());
                RowMat cols(c_in * kh * kw, ho * wo);
                RowMat dcols(c_in * kh * kw, ho * wo);
                const bool need_dx = g.requires_grad(in[0]);
                const bool need_dw = g.requires_grad(in[1]);
                for (Eigen::Index i = 0; i < bsz; ++i) {
                  Eigen::Map<const RowMat> dout(up.data() + i * c_out * ho * wo, c_out, ho * wo);
                  if (need_dw) {
                    im2col(tx.data.data() + i * c_in * h * wd, c_in, h, wd, kh, kw, stride, pad,
                           ho, wo, cols);
                    dwmat.noalias() += dout * cols.transpose();
                  }
                  if (need_dx) {
                    dcols.noalias() = wmat.transpose() * dout;
                    col2im(dcols, c_in, h, wd, kh, kw, stride, pad, ho, wo,
                           dx.data() + i * c_in * h * wd);
                  }
                }
                if (need_dx) accumulate_grad(g, in[0], dx);
                if (need_dw) accumulate_grad(g, in[1], dw);
              },
              "conv2d");
}

int Graph::maxpool2d(int x, int k, int s) {
  const auto& tx = value(x);
  expect_rank(tx.shape, 4, "maxpool2d");
  if (k < 1 || s < 1) throw ShapeMismatch("maxpool2d: bad kernel/stride");
  const Eigen::Index bsz = tx.shape[0], c = tx.shape[1], h = tx.shape[2], w = tx.shape[3];
  const Eigen::Index ho = (h - k) / s + 1, wo = (w - k) / s + 1;
  if (ho < 1 || wo < 1)
    throw ShapeMismatch("maxpool2d: window too large for input " + shape_str(tx.shape));

  Tensor out = Tensor::zeros({bsz, c, ho, wo});
  auto argmax = std::make_shared<std::vector<Eigen::Index>>(
      static_cast<std::size_t>(bsz * c * ho * wo));
  for (Eigen::Index i = 0; i < bsz * c; ++i) {
    const double* plane = tx.data.data() + i * h * w;
    for (Eigen::Index oy = 0; oy < ho; ++oy)
      for (Eigen::Index ox = 0; ox < wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        Eigen::Index best_idx = 0;
        for (Eigen::Index ky = 0; ky < k; ++ky)
          for (Eigen::Index kx = 0; kx < k; ++kx) {
            const Eigen::Index idx = (oy * s + ky) * w + (ox * s + kx);
            if (plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
            }
          }
        const Eigen::Index o = (i * ho + oy) * wo + ox;
        out.data[o] = best;
        (*argmax)[static_cast<std::size_t>(o)] = i * h * w + best_idx;
      }
  }
  return push(std::move(out), {x},
              [argmax](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                if (!g.requires_grad(in[0])) return;
                const auto& up = g.grad(self);
                Eigen::ArrayXd dx = Eigen::ArrayXd::Zero(g.value(in[0]).data.size());
                for (Eigen::Index o = 0; o < up.size(); ++o)
                  dx[(*argmax)[static_cast<std::size_t>(o)]] += up[o];
                accumulate_grad(g, in[0], dx);
              },
              "maxpool2d");
}

int Graph::relu(int a) {
  Tensor out(value(a).shape, value(a).data.max(0.0));
  return push(std::move(out), {a},
              [](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                const auto mask = (g.value(in[0]).data > 0.0).cast<double>();
                accumulate_grad(g, in[0], g.grad(self) * mask);
              },
              "relu");
}

int Graph::global_avg_pool(int a) {
  const auto& ta = value(a);
  expect_rank(ta.shape, 4, "global_avg_pool");
  const Eigen::Index bsz = ta.shape[0], c = ta.shape[1], hw = ta.shape[2] * ta.shape[3];
  Tensor out = Tensor::zeros({bsz, c});
  for (Eigen::Index i = 0; i < bsz * c; ++i) out.data[i] = ta.data.segment(i * hw, hw).mean();
  return push(std::move(out), {a},
              [](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                const auto& ta = g.value(in[0]);
                const Eigen::Index hw = ta.shape[2] * ta.shape[3];
                const auto& up = g.grad(self);
                Eigen::ArrayXd dx(ta.data.size());
                for (Eigen::Index i = 0; i < up.size(); ++i)
                  dx.segment(i * hw, hw).setConstant(up[i] / static_cast<double>(hw));
                accumulate_grad(g, in[0], dx);
              },
              "global_avg_pool");
}

int Graph::concat_cols(int a, int b) {
  const auto& ta = value(a);
  const auto& tb = value(b);
  expect_rank(ta.shape, 2, "concat_cols");
  expect_rank(tb.shape, 2, "concat_cols");
  if (ta.shape[0] != tb.shape[0])
    throw ShapeMismatch("concat_cols: " + shape_str(ta.shape) + " | " + shape_str(tb.shape));
  Tensor out = Tensor::zeros({ta.shape[0], ta.shape[1] + tb.shape[1]});
  out.mat().leftCols(ta.shape[1]) = ta.mat();
  out.mat().rightCols(tb.shape[1]) = tb.mat();
  return push(std::move(out), {a, b},
              [](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                const auto& ta = g.value(in[0]);
                const auto& tb = g.value(in[1]);
                Eigen::Map<const RowMat> up(g.grad(self).data(), ta.shape[0],
                                            ta.shape[1] + tb.shape[1]);
                if (g.requires_grad(in[0])) {
                  Eigen::ArrayXd da(ta.data.size());
                  Eigen::Map<RowMat>(da.data(), ta.shape[0], ta.shape[1]) =
                      up.leftCols(ta.shape[1]);
                  accumulate_grad(g, in[0], da);
                }
                if (g.requires_grad(in[1])) {
                  Eigen::ArrayXd db(tb.data.size());
                  Eigen::Map<RowMat>(db.data(), tb.shape[0], tb.shape[1]) =
                      up.rightCols(tb.shape[1]);
                  accumulate_grad(g, in[1], db);
                }
              },
              "concat_cols");
}

int Graph::log_op(int a) {
  Tensor out(value(a).shape, value(a).data.log());
  return push(std::move(out), {a},
              [](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                accumulate_grad(g, in[0], g.grad(self) / g.value(in[0]).data);
              },
              "log");
}

int Graph::exp_op(int a) {
  Tensor out(value(a).shape, value(a).data.exp());
  return push(std::move(out), {a},
              [](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                accumulate_grad(g, in[0], g.grad(self) * g.value(self).data);
              },
              "exp");
}

int Graph::sum(int a) {
  Tensor out = Tensor::scalar(value(a).data.sum());
  return push(std::move(out), {a},
              [](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                accumulate_grad(g, in[0],
                                Eigen::ArrayXd::Constant(g.value(in[0]).data.size(),
                                                         g.grad(self)[0]));
              },
              "sum");
}

int Graph::mean(int a) {
  const auto n = static_cast<double>(value(a).data.size());
  Tensor out = Tensor::scalar(value(a).data.mean());
  return push(std::move(out), {a},
              [n](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                accumulate_grad(g, in[0],
                                Eigen::ArrayXd::Constant(g.value(in[0]).data.size(),
                                                         g.grad(self)[0] / n));
              },
              "mean");
}

int Graph::softmax(int a) {
  const auto& ta = value(a);
  expect_rank(ta.shape, 2, "softmax");
  Tensor out = Tensor::zeros(ta.shape);
  for (Eigen::Index r = 0; r < ta.shape[0]; ++r) {
    const auto row = ta.data.segment(r * ta.shape[1], ta.shape[1]);
    const Eigen::ArrayXd e = (row - row.maxCoeff()).exp();
    out.data.segment(r * ta.shape[1], ta.shape[1]) = e / e.sum();
  }
  return push(std::move(out), {a},
              [](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                const auto& p = g.value(self);
                const auto& up = g.grad(self);
                Eigen::ArrayXd dx(p.data.size());
                const Eigen::Index cols = p.shape[1];
                for (Eigen::Index r = 0; r < p.shape[0]; ++r) {
                  const auto prow = p.data.segment(r * cols, cols);
                  const auto grow = up.segment(r * cols, cols);
                  const double dot = (prow * grow).sum();
                  dx.segment(r * cols, cols) = prow * (grow - dot);
                }
                accumulate_grad(g, in[0], dx);
              },
              "softmax");
}

int Graph::l2norm(int a) {
  const auto& ta = value(a);
  expect_rank(ta.shape, 2, "l2norm");
  Tensor out = Tensor::zeros({ta.shape[0]});
  for (Eigen::Index r = 0; r < ta.shape[0]; ++r)
    out.data[r] = std::sqrt(ta.data.segment(r * ta.shape[1], ta.shape[1]).square().sum());
  return push(std::move(out), {a},
              [](Graph& g, int self) {
                const auto& in = g.nodes_[static_cast<std::size_t>(self)].inputs;
                const auto& ta = g.value(in[0]);
                const auto& norms = g.value(self).data;
                const auto& up = g.grad(self);
                const Eigen::Index cols = ta.shape[1];
                Eigen::ArrayXd dx(ta.data.size());
                for (Eigen::Index r = 0; r < ta.shape[0]; ++r) {
                  const double n = std::max(norms[r], 1e-12);
                  dx.segment(r * cols, cols) = up[r] * ta.data.segment(r * cols, cols) / n;
                }
                accumulate_grad(g, in[0], dx);
              },
              "l2norm");
}

std::map<int, Tensor> Graph::backward(int root) {
  check_id(root);
  if (consumed_) throw NumericError("Graph: backward called twice");
  if (value(root).numel() != 1)
    throw NonScalarRoot("backward: root has shape " + shape_str(value(root).shape));
  consumed_ = true;
  grad(root).setConstant(1.0);
  for (int id = root; id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.backprop) continue;
    if (n.grad.size() == 0) continue;  // not on any path from the root
    n.backprop(*this, id);
  }
  std::map<int, Tensor> grads;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    auto& n = nodes_[i];
    if (!n.requires_grad) continue;
    Eigen::ArrayXd g = n.grad.size() ? n.grad : Eigen::ArrayXd::Zero(n.value.data.size());
    grads.emplace(static_cast<int>(i), Tensor(n.value.shape, std::move(g)));
  }
  return grads;
}

}  // namespace esdd::ad
