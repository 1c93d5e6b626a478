#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace esdd::ad {

using Shape = std::vector<Eigen::Index>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string shape_str(const Shape& s);
Eigen::Index numel(const Shape& s);

// Dense row-major tensor. Without an attached graph it is a plain value.
struct Tensor {
  Shape shape;
  Eigen::ArrayXd data;  // row-major flattened, length == product(shape)
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, Eigen::ArrayXd d, bool rg = false);

  static Tensor zeros(Shape s, bool rg = false);
  static Tensor scalar(double v, bool rg = false);
  static Tensor from_matrix(const Eigen::MatrixXd& m, bool rg = false);

  Eigen::Index numel() const { return data.size(); }
  double scalar_value() const;
  Eigen::MatrixXd to_matrix() const;  // 2-D tensors only

  Eigen::Map<const RowMat> mat() const;  // 2-D view
  Eigen::Map<RowMat> mat();
};

// Reverse-mode tape. Nodes are appended in topological order by
// construction; ids index the tape. Single-owner while recording.
class Graph {
 public:
  int leaf(Tensor t, std::string tag = "leaf");

  const Tensor& value(int id) const;
  bool requires_grad(int id) const;
  const std::vector<int>& inputs_of(int id) const;

  // Upstream gradient accumulator for node id (valid during backward).
  Eigen::ArrayXd& grad(int id);

  // Primitives. Every op validates shapes (ShapeMismatch) and checks the
  // forward output for NaN/Inf (NumericError naming the node).
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int scalar_mul(int a, double s);
  int matmul(int a, int b);                // (m,k)x(k,n)
  int bias_add_row(int a, int b);          // (B,N) + (N,)
  int bias_add_channel(int a, int b);      // (B,C,H,W) + (C,)
  int conv2d(int x, int w, int stride, int pad);   // (B,C,H,W), (O,C,kh,kw)
  int maxpool2d(int x, int k, int s);      // (B,C,H,W)
  int relu(int a);
  int global_avg_pool(int a);              // (B,C,H,W) -> (B,C)
  int concat_cols(int a, int b);           // 2-D along columns
  int log_op(int a);
  int exp_op(int a);
  int sum(int a);                          // -> scalar
  int mean(int a);                         // -> scalar
  int softmax(int a);                      // 2-D, last dim
  int l2norm(int a);                       // (B,D) -> (B,)

  // Hook for fused loss nodes with hand-written backward passes.
  int custom(Tensor value, std::vector<int> inputs,
             std::function<void(Graph&, int)> backprop, std::string tag);

  // Reverse sweep from a scalar root. Returns the gradient of every
  // requires_grad node (leaves included). The graph is consumed.
  std::map<int, Tensor> backward(int root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Eigen::ArrayXd grad;
    std::vector<int> inputs;
    std::function<void(Graph&, int)> backprop;  // null for leaves
    bool requires_grad = false;
    std::string tag;
  };

  int push(Tensor value, std::vector<int> inputs,
           std::function<void(Graph&, int)> backprop, std::string tag);
  void accumulate(int id, const Eigen::ArrayXd& g);
  void check_id(int id) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;

  friend class GraphBackwardAccess;
};

// Gradient accumulation helper exposed to custom nodes.
void accumulate_grad(Graph& g, int id, const Eigen::ArrayXd& delta);

}  // namespace esdd::ad
