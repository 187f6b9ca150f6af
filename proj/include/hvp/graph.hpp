#ifndef HVP_GRAPH_HPP
#define HVP_GRAPH_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "hvp/tensor.hpp"

namespace hvp {

// Trainable tensor with its accumulated gradient. decay_eligible is false for
// bias and normalization scale/shift parameters; the optimizer skips weight
// decay on those.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool decay_eligible = true;

  Param(std::string n, Tensor v, bool decay)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape)), decay_eligible(decay) {}

  void zero_grad() { grad.fill(0.0); }
};

// Handle into the tape. Invalid (id < 0) handles stand for "no tensor", e.g.
// an empty prefix.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in topological order during the
// forward pass; backward() walks them in reverse. Single-threaded by contract;
// identical op sequences produce bit-identical results.
class Graph {
 public:
  explicit Graph(Precision p = Precision::f64, uint64_t dropout_seed = 0);

  Precision precision() const { return precision_; }
  bool training = false;

  // Leaves.
  Var param(Param& p);            // cached per graph; gradient lands in p.grad
  Var constant(Tensor t);         // no gradient

  // Elementwise and structural primitives.
  Var add(Var a, Var b);                       // same shape
  Var add_rowvec(Var m, Var v);                // [r,c] + [c] broadcast over rows
  Var add_channel_bias(Var x, Var b);          // [C,H,W] + [C]
  Var mul(Var a, Var b);                       // same shape, elementwise
  Var scale(Var a, double s);                  // constant scalar multiply
  Var scale_by(Var scalar, Var a);             // scalar is a [1] node
  Var leaky_relu(Var a, double slope);
  Var transpose(Var a);                        // 2-D
  Var reshape(Var a, std::vector<int> shape);
  Var concat(const std::vector<Var>& parts, int axis);
  Var slice(Var a, int axis, int start, int len);
  Var gather(Var a, std::vector<int64_t> flat_idx);   // picks into a [k] vector
  Var embedding(Var table, const std::vector<int>& ids);  // [V,d] rows -> [n,d]
  Var matmul(Var a, Var b);                    // [r,k] x [k,c]
  Var softmax_rows(Var a);                     // over last axis, max-shifted
  Var logsumexp_rows(Var a);                   // reduce last axis, max-shifted
  Var layer_norm(Var a, Var gain, Var shift, double eps);  // over last axis
  Var conv2d(Var x, Var kernel, Var bias, int stride, int pad);
  Var avg_pool2d(Var x, int out_h, int out_w);
  Var dropout(Var a, double p);                // identity unless training
  Var sum(Var a);                              // full reduce -> [1]
  Var mean(Var a);                             // full reduce -> [1]

  // Execution.
  void backward(Var loss);    // loss must be scalar; accumulates into Param::grad
  const Tensor& value(Var v) const;
  size_t size() const { return nodes_.size(); }
  void clear();

  std::mt19937_64& rng() { return rng_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    Param* bound = nullptr;
    std::function<void(Graph&, int)> backprop;  // (graph, own id)
  };

  int make_node(Tensor value, bool needs_grad, std::function<void(Graph&, int)> backprop);
  Node& node(Var v);
  const Node& node(Var v) const;
  Tensor* grad_sink(int id);      // nullptr when the node does not need a gradient
  const Tensor& grad_of(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
  void seal(Tensor& t) const;     // f32 rounding in 32-bit mode

  std::vector<Node> nodes_;
  std::unordered_map<const Param*, int> param_leaves_;
  Precision precision_;
  std::mt19937_64 rng_;
};

}  // namespace hvp

#endif
