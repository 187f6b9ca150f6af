#include "hvp/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "hvp/rng.hpp"

namespace hvp {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

int64_t rows_of(const Tensor& t) { return t.numel() / t.shape.back(); }

void check_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_str(t.shape));
  }
}

}  // namespace

Graph::Graph(Precision p, uint64_t dropout_seed) : precision_(p), rng_(dropout_seed) {}

void Graph::seal(Tensor& t) const {
  if (precision_ == Precision::f32) round_to_f32(t.data);
}

int Graph::make_node(Tensor value, bool needs_grad, std::function<void(Graph&, int)> backprop) {
  seal(value);
  if (!value.all_finite()) {
    throw std::runtime_error("non-finite values produced at tape node " + std::to_string(nodes_.size()));
  }
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.backprop = needs_grad ? std::move(backprop) : nullptr;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Graph::Node& Graph::node(Var v) {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("invalid tape handle");
  }
  return nodes_[static_cast<size_t>(v.id)];
}

const Graph::Node& Graph::node(Var v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("invalid tape handle");
  }
  return nodes_[static_cast<size_t>(v.id)];
}

Tensor* Graph::grad_sink(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.needs_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Tensor::zeros(n.value.shape);
    n.has_grad = true;
  }
  return &n.grad;
}

const Tensor& Graph::value(Var v) const { return node(v).value; }

void Graph::clear() {
  nodes_.clear();
  param_leaves_.clear();
}

Var Graph::param(Param& p) {
  auto it = param_leaves_.find(&p);
  if (it != param_leaves_.end()) return Var{it->second};
  Tensor v = p.value;
  seal(v);
  Node n;
  n.value = std::move(v);
  n.needs_grad = true;
  n.bound = &p;
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  param_leaves_.emplace(&p, id);
  return Var{id};
}

Var Graph::constant(Tensor t) { return Var{make_node(std::move(t), false, nullptr)}; }

void Graph::backward(Var loss) {
  Node& top = node(loss);
  if (top.value.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(top.value.shape));
  }
  if (!top.needs_grad) return;  // nothing trainable reachable
  Tensor* g = grad_sink(loss.id);
  g->fill(0.0);
  (*g)[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.has_grad) continue;
    seal(n.grad);
    if (n.bound != nullptr) {
      if (!n.grad.all_finite()) {
        throw std::runtime_error("non-finite gradient for parameter " + n.bound->name);
      }
      for (int64_t j = 0; j < n.grad.numel(); ++j) n.bound->grad[j] += n.grad[j];
      seal(n.bound->grad);
    } else if (n.backprop) {
      n.backprop(*this, i);
    }
  }
}

Var Graph::add(Var a, Var b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  if (!A.same_shape(B)) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  }
  Tensor out = A;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += B[i];
  bool ng = node(a).needs_grad || node(b).needs_grad;
  int aid = a.id, bid = b.id;
  return Var{make_node(std::move(out), ng, [aid, bid](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* da = g.grad_sink(aid)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*da)[i] += dy[i];
    }
    if (Tensor* db = g.grad_sink(bid)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*db)[i] += dy[i];
    }
  })};
}

Var Graph::add_rowvec(Var m, Var v) {
  const Tensor& M = node(m).value;
  const Tensor& V = node(v).value;
  check_rank(M, 2, "add_rowvec");
  int r = M.dim(0), c = M.dim(1);
  if (V.numel() != c) {
    throw std::invalid_argument("add_rowvec: vector length " + std::to_string(V.numel()) +
                                " does not match columns " + std::to_string(c));
  }
  Tensor out = M;
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) out[static_cast<int64_t>(i) * c + j] += V[j];
  }
  bool ng = node(m).needs_grad || node(v).needs_grad;
  int mid = m.id, vid = v.id;
  return Var{make_node(std::move(out), ng, [mid, vid, r, c](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* dm = g.grad_sink(mid)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*dm)[i] += dy[i];
    }
    if (Tensor* dv = g.grad_sink(vid)) {
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) (*dv)[j] += dy[static_cast<int64_t>(i) * c + j];
      }
    }
  })};
}

Var Graph::add_channel_bias(Var x, Var b) {
  const Tensor& X = node(x).value;
  const Tensor& B = node(b).value;
  check_rank(X, 3, "add_channel_bias");
  int ch = X.dim(0);
  int64_t hw = static_cast<int64_t>(X.dim(1)) * X.dim(2);
  if (B.numel() != ch) {
    throw std::invalid_argument("add_channel_bias: bias length does not match channels");
  }
  Tensor out = X;
  for (int c = 0; c < ch; ++c) {
    for (int64_t i = 0; i < hw; ++i) out[c * hw + i] += B[c];
  }
  bool ng = node(x).needs_grad || node(b).needs_grad;
  int xid = x.id, bid = b.id;
  return Var{make_node(std::move(out), ng, [xid, bid, ch, hw](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* dx = g.grad_sink(xid)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*dx)[i] += dy[i];
    }
    if (Tensor* db = g.grad_sink(bid)) {
      for (int c = 0; c < ch; ++c) {
        double s = 0.0;
        for (int64_t i = 0; i < hw; ++i) s += dy[c * hw + i];
        (*db)[c] += s;
      }
    }
  })};
}

Var Graph::mul(Var a, Var b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  if (!A.same_shape(B)) {
    throw std::invalid_argument("mul: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  }
  Tensor out = A;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
  bool ng = node(a).needs_grad || node(b).needs_grad;
  int aid = a.id, bid = b.id;
  return Var{make_node(std::move(out), ng, [aid, bid](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    const Tensor& A = g.nodes_[static_cast<size_t>(aid)].value;
    const Tensor& B = g.nodes_[static_cast<size_t>(bid)].value;
    if (Tensor* da = g.grad_sink(aid)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*da)[i] += dy[i] * B[i];
    }
    if (Tensor* db = g.grad_sink(bid)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*db)[i] += dy[i] * A[i];
    }
  })};
}

Var Graph::scale(Var a, double s) {
  Tensor out = node(a).value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  bool ng = node(a).needs_grad;
  int aid = a.id;
  return Var{make_node(std::move(out), ng, [aid, s](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* da = g.grad_sink(aid)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*da)[i] += dy[i] * s;
    }
  })};
}

Var Graph::scale_by(Var scalar, Var a) {
  const Tensor& S = node(scalar).value;
  if (S.numel() != 1) throw std::invalid_argument("scale_by: scalar operand must have one element");
  double s = S[0];
  Tensor out = node(a).value;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  bool ng = node(a).needs_grad || node(scalar).needs_grad;
  int aid = a.id, sid = scalar.id;
  return Var{make_node(std::move(out), ng, [aid, sid](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    const Tensor& A = g.nodes_[static_cast<size_t>(aid)].value;
    double s = g.nodes_[static_cast<size_t>(sid)].value[0];
    if (Tensor* da = g.grad_sink(aid)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*da)[i] += dy[i] * s;
    }
    if (Tensor* ds = g.grad_sink(sid)) {
      double acc = 0.0;
      for (int64_t i = 0; i < dy.numel(); ++i) acc += dy[i] * A[i];
      (*ds)[0] += acc;
    }
  })};
}

Var Graph::leaky_relu(Var a, double slope) {
  if (slope <= 0.0 || slope >= 1.0) throw std::invalid_argument("leaky_relu: slope must lie in (0,1)");
  Tensor out = node(a).value;
  for (int64_t i = 0; i < out.numel(); ++i) {
    if (out[i] < 0.0) out[i] *= slope;
  }
  bool ng = node(a).needs_grad;
  int aid = a.id;
  return Var{make_node(std::move(out), ng, [aid, slope](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    const Tensor& A = g.nodes_[static_cast<size_t>(aid)].value;
    if (Tensor* da = g.grad_sink(aid)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*da)[i] += dy[i] * (A[i] >= 0.0 ? 1.0 : slope);
    }
  })};
}

Var Graph::transpose(Var a) {
  const Tensor& A = node(a).value;
  check_rank(A, 2, "transpose");
  int r = A.dim(0), c = A.dim(1);
  Tensor out = Tensor::zeros({c, r});
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) out[static_cast<int64_t>(j) * r + i] = A[static_cast<int64_t>(i) * c + j];
  }
  bool ng = node(a).needs_grad;
  int aid = a.id;
  return Var{make_node(std::move(out), ng, [aid, r, c](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* da = g.grad_sink(aid)) {
      for (int j = 0; j < c; ++j) {
        for (int i = 0; i < r; ++i) {
          (*da)[static_cast<int64_t>(i) * c + j] += dy[static_cast<int64_t>(j) * r + i];
        }
      }
    }
  })};
}

Var Graph::reshape(Var a, std::vector<int> shape) {
  const Tensor& A = node(a).value;
  if (shape_numel(shape) != A.numel()) {
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(A.shape) + " -> " +
                                shape_str(shape));
  }
  Tensor out(std::move(shape), A.data);
  bool ng = node(a).needs_grad;
  int aid = a.id;
  return Var{make_node(std::move(out), ng, [aid](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* da = g.grad_sink(aid)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*da)[i] += dy[i];
    }
  })};
}

Var Graph::concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  const Tensor& first = node(parts[0]).value;
  int rank = first.rank();
  if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: axis out of range");
  std::vector<int> out_shape = first.shape;
  int64_t inner = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= first.dim(i);
  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= first.dim(i);
  int total_axis = 0;
  std::vector<int> lens;
  for (Var p : parts) {
    const Tensor& T = node(p).value;
    if (T.rank() != rank) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != axis && T.dim(i) != first.dim(i)) {
        throw std::invalid_argument("concat: shape mismatch " + shape_str(T.shape) + " vs " +
                                    shape_str(first.shape));
      }
    }
    lens.push_back(T.dim(axis));
    total_axis += T.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = total_axis;
  Tensor out = Tensor::zeros(out_shape);
  int64_t dst_stride = static_cast<int64_t>(total_axis) * inner;
  int64_t offset = 0;
  bool ng = false;
  std::vector<int> ids;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const Tensor& T = node(parts[pi]).value;
    int64_t src_stride = static_cast<int64_t>(lens[pi]) * inner;
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(T.data.begin() + o * src_stride, src_stride, out.data.begin() + o * dst_stride + offset);
    }
    offset += src_stride;
    ng = ng || node(parts[pi]).needs_grad;
    ids.push_back(parts[pi].id);
  }
  return Var{make_node(std::move(out), ng, [ids, lens, inner, outer, total_axis](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    int64_t dst_stride = static_cast<int64_t>(total_axis) * inner;
    int64_t offset = 0;
    for (size_t pi = 0; pi < ids.size(); ++pi) {
      int64_t src_stride = static_cast<int64_t>(lens[pi]) * inner;
      if (Tensor* dp = g.grad_sink(ids[pi])) {
        for (int64_t o = 0; o < outer; ++o) {
          const double* src = dy.data.data() + o * dst_stride + offset;
          double* dst = dp->data.data() + o * src_stride;
          for (int64_t i = 0; i < src_stride; ++i) dst[i] += src[i];
        }
      }
      offset += src_stride;
    }
  })};
}

Var Graph::slice(Var a, int axis, int start, int len) {
  const Tensor& A = node(a).value;
  int rank = A.rank();
  if (axis < 0 || axis >= rank) throw std::invalid_argument("slice: axis out of range");
  if (start < 0 || len <= 0 || start + len > A.dim(axis)) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") exceeds dim " + std::to_string(A.dim(axis)));
  }
  int64_t inner = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= A.dim(i);
  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= A.dim(i);
  int full = A.dim(axis);
  std::vector<int> out_shape = A.shape;
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor out = Tensor::zeros(out_shape);
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(A.data.begin() + (o * full + start) * inner, static_cast<int64_t>(len) * inner,
                out.data.begin() + o * len * inner);
  }
  bool ng = node(a).needs_grad;
  int aid = a.id;
  return Var{make_node(std::move(out), ng, [aid, inner, outer, full, start, len](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* da = g.grad_sink(aid)) {
      for (int64_t o = 0; o < outer; ++o) {
        const double* src = dy.data.data() + o * len * inner;
        double* dst = da->data.data() + (o * full + start) * inner;
        for (int64_t i = 0; i < static_cast<int64_t>(len) * inner; ++i) dst[i] += src[i];
      }
    }
  })};
}

Var Graph::gather(Var a, std::vector<int64_t> flat_idx) {
  const Tensor& A = node(a).value;
  Tensor out = Tensor::zeros({static_cast<int>(flat_idx.size())});
  for (size_t i = 0; i < flat_idx.size(); ++i) {
    int64_t k = flat_idx[i];
    if (k < 0 || k >= A.numel()) throw std::invalid_argument("gather: index out of range");
    out[static_cast<int64_t>(i)] = A[k];
  }
  bool ng = node(a).needs_grad;
  int aid = a.id;
  return Var{make_node(std::move(out), ng, [aid, idx = std::move(flat_idx)](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* da = g.grad_sink(aid)) {
      for (size_t i = 0; i < idx.size(); ++i) (*da)[idx[i]] += dy[static_cast<int64_t>(i)];
    }
  })};
}

Var Graph::embedding(Var table, const std::vector<int>& ids) {
  const Tensor& T = node(table).value;
  check_rank(T, 2, "embedding");
  int vocab = T.dim(0), d = T.dim(1);
  int n = static_cast<int>(ids.size());
  if (n == 0) throw std::invalid_argument("embedding: empty id list");
  Tensor out = Tensor::zeros({n, d});
  for (int r = 0; r < n; ++r) {
    if (ids[static_cast<size_t>(r)] < 0 || ids[static_cast<size_t>(r)] >= vocab) {
      throw std::invalid_argument("embedding: id " + std::to_string(ids[static_cast<size_t>(r)]) +
                                  " out of vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(T.data.begin() + static_cast<int64_t>(ids[static_cast<size_t>(r)]) * d, d,
                out.data.begin() + static_cast<int64_t>(r) * d);
  }
  bool ng = node(table).needs_grad;
  int tid = table.id;
  return Var{make_node(std::move(out), ng, [tid, ids, d](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* dt = g.grad_sink(tid)) {
      for (size_t r = 0; r < ids.size(); ++r) {
        double* dst = dt->data.data() + static_cast<int64_t>(ids[r]) * d;
        const double* src = dy.data.data() + static_cast<int64_t>(r) * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    }
  })};
}

Var Graph::matmul(Var a, Var b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  check_rank(A, 2, "matmul");
  check_rank(B, 2, "matmul");
  if (A.dim(1) != B.dim(0)) {
    throw std::invalid_argument("matmul: inner dims " + shape_str(A.shape) + " x " + shape_str(B.shape));
  }
  int r = A.dim(0), k = A.dim(1), c = B.dim(1);
  Tensor out = Tensor::zeros({r, c});
  {
    CMapM ma(A.data.data(), r, k);
    CMapM mb(B.data.data(), k, c);
    MapM mo(out.data.data(), r, c);
    mo.noalias() = ma * mb;
  }
  bool ng = node(a).needs_grad || node(b).needs_grad;
  int aid = a.id, bid = b.id;
  return Var{make_node(std::move(out), ng, [aid, bid, r, k, c](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    CMapM mdy(dy.data.data(), r, c);
    const Tensor& A = g.nodes_[static_cast<size_t>(aid)].value;
    const Tensor& B = g.nodes_[static_cast<size_t>(bid)].value;
    if (Tensor* da = g.grad_sink(aid)) {
      MapM mda(da->data.data(), r, k);
      CMapM mb(B.data.data(), k, c);
      mda.noalias() += mdy * mb.transpose();
    }
    if (Tensor* db = g.grad_sink(bid)) {
      MapM mdb(db->data.data(), k, c);
      CMapM ma(A.data.data(), r, k);
      mdb.noalias() += ma.transpose() * mdy;
    }
  })};
}

Var Graph::softmax_rows(Var a) {
  const Tensor& A = node(a).value;
  if (A.rank() < 1) throw std::invalid_argument("softmax_rows: rank must be >= 1");
  int n = A.shape.back();
  int64_t rows = rows_of(A);
  Tensor out = A;
  for (int64_t r = 0; r < rows; ++r) {
    double* row = out.data.data() + r * n;
    double mx = row[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
      row[i] = std::exp(row[i] - mx);
      z += row[i];
    }
    for (int i = 0; i < n; ++i) row[i] /= z;
  }
  bool ng = node(a).needs_grad;
  int aid = a.id;
  return Var{make_node(std::move(out), ng, [aid, n, rows](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    const Tensor& y = g.nodes_[static_cast<size_t>(self)].value;
    if (Tensor* da = g.grad_sink(aid)) {
      for (int64_t r = 0; r < rows; ++r) {
        const double* yr = y.data.data() + r * n;
        const double* dr = dy.data.data() + r * n;
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += yr[i] * dr[i];
        double* out = da->data.data() + r * n;
        for (int i = 0; i < n; ++i) out[i] += yr[i] * (dr[i] - dot);
      }
    }
  })};
}

Var Graph::logsumexp_rows(Var a) {
  const Tensor& A = node(a).value;
  if (A.rank() < 1) throw std::invalid_argument("logsumexp_rows: rank must be >= 1");
  int n = A.shape.back();
  int64_t rows = rows_of(A);
  std::vector<int> out_shape(A.shape.begin(), A.shape.end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor out = Tensor::zeros(out_shape);
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = A.data.data() + r * n;
    double mx = row[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, row[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) z += std::exp(row[i] - mx);
    out[r] = mx + std::log(z);
  }
  bool ng = node(a).needs_grad;
  int aid = a.id;
  return Var{make_node(std::move(out), ng, [aid, n, rows](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    const Tensor& y = g.nodes_[static_cast<size_t>(self)].value;
    const Tensor& A = g.nodes_[static_cast<size_t>(aid)].value;
    if (Tensor* da = g.grad_sink(aid)) {
      for (int64_t r = 0; r < rows; ++r) {
        const double* xr = A.data.data() + r * n;
        double* out = da->data.data() + r * n;
        for (int i = 0; i < n; ++i) out[i] += dy[r] * std::exp(xr[i] - y[r]);
      }
    }
  })};
}

Var Graph::layer_norm(Var a, Var gain, Var shift, double eps) {
  const Tensor& A = node(a).value;
  const Tensor& G = node(gain).value;
  const Tensor& S = node(shift).value;
  int d = A.shape.back();
  if (d < 2) throw std::invalid_argument("layer_norm: last axis must have size >= 2");
  if (G.numel() != d || S.numel() != d) {
    throw std::invalid_argument("layer_norm: gain/shift length must equal last axis");
  }
  int64_t rows = rows_of(A);
  Tensor out = A;
  for (int64_t r = 0; r < rows; ++r) {
    double* row = out.data.data() + r * d;
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += row[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
      double c = row[i] - mu;
      var += c * c;
    }
    var /= d;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < d; ++i) row[i] = (row[i] - mu) * inv * G[i] + S[i];
  }
  bool ng = node(a).needs_grad || node(gain).needs_grad || node(shift).needs_grad;
  int aid = a.id, gid = gain.id, sid = shift.id;
  return Var{make_node(std::move(out), ng, [aid, gid, sid, d, rows, eps](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    const Tensor& A = g.nodes_[static_cast<size_t>(aid)].value;
    const Tensor& G = g.nodes_[static_cast<size_t>(gid)].value;
    Tensor* da = g.grad_sink(aid);
    Tensor* dg = g.grad_sink(gid);
    Tensor* ds = g.grad_sink(sid);
    std::vector<double> xhat(static_cast<size_t>(d));
    for (int64_t r = 0; r < rows; ++r) {
      const double* xr = A.data.data() + r * d;
      const double* dr = dy.data.data() + r * d;
      double mu = 0.0;
      for (int i = 0; i < d; ++i) mu += xr[i];
      mu /= d;
      double var = 0.0;
      for (int i = 0; i < d; ++i) {
        double c = xr[i] - mu;
        var += c * c;
      }
      var /= d;
      double inv = 1.0 / std::sqrt(var + eps);
      for (int i = 0; i < d; ++i) xhat[static_cast<size_t>(i)] = (xr[i] - mu) * inv;
      if (dg != nullptr) {
        for (int i = 0; i < d; ++i) (*dg)[i] += dr[i] * xhat[static_cast<size_t>(i)];
      }
      if (ds != nullptr) {
        for (int i = 0; i < d; ++i) (*ds)[i] += dr[i];
      }
      if (da != nullptr) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (int i = 0; i < d; ++i) {
          double dxh = dr[i] * G[i];
          mean_dxhat += dxh;
          mean_dxhat_xhat += dxh * xhat[static_cast<size_t>(i)];
        }
        mean_dxhat /= d;
        mean_dxhat_xhat /= d;
        double* out = da->data.data() + r * d;
        for (int i = 0; i < d; ++i) {
          double dxh = dr[i] * G[i];
          out[i] += inv * (dxh - mean_dxhat - xhat[static_cast<size_t>(i)] * mean_dxhat_xhat);
        }
      }
    }
  })};
}

Var Graph::conv2d(Var x, Var kernel, Var bias, int stride, int pad) {
  const Tensor& X = node(x).value;
  const Tensor& K = node(kernel).value;
  check_rank(X, 3, "conv2d");
  check_rank(K, 4, "conv2d");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
  int ci = X.dim(0), h = X.dim(1), w = X.dim(2);
  int co = K.dim(0), kc = K.dim(1), kh = K.dim(2), kw = K.dim(3);
  if (kh != kw) throw std::invalid_argument("conv2d: kernel must be square");
  if (kc != ci) {
    throw std::invalid_argument("conv2d: input channels " + std::to_string(ci) +
                                " do not match kernel channels " + std::to_string(kc));
  }
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  int oh = (h + 2 * pad - kh) / stride + 1;
  int ow = (w + 2 * pad - kw) / stride + 1;
  bool has_bias = bias.valid();
  const double* bptr = nullptr;
  if (has_bias) {
    const Tensor& B = node(bias).value;
    if (B.numel() != co) throw std::invalid_argument("conv2d: bias length must equal output channels");
    bptr = B.data.data();
  }
  Tensor out = Tensor::zeros({co, oh, ow});
  for (int o = 0; o < co; ++o) {
    double* yplane = out.data.data() + static_cast<int64_t>(o) * oh * ow;
    for (int c = 0; c < ci; ++c) {
      const double* xplane = X.data.data() + static_cast<int64_t>(c) * h * w;
      const double* kbase = K.data.data() + ((static_cast<int64_t>(o) * ci + c) * kh) * kw;
      for (int oy = 0; oy < oh; ++oy) {
        int iy0 = oy * stride - pad;
        for (int ox = 0; ox < ow; ++ox) {
          int ix0 = ox * stride - pad;
          double acc = 0.0;
          for (int u = 0; u < kh; ++u) {
            int yy = iy0 + u;
            if (yy < 0 || yy >= h) continue;
            const double* xrow = xplane + static_cast<int64_t>(yy) * w;
            const double* krow = kbase + static_cast<int64_t>(u) * kw;
            for (int v = 0; v < kw; ++v) {
              int xx = ix0 + v;
              if (xx < 0 || xx >= w) continue;
              acc += xrow[xx] * krow[v];
            }
          }
          yplane[static_cast<int64_t>(oy) * ow + ox] += acc;
        }
      }
    }
    if (has_bias) {
      for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) yplane[i] += bptr[o];
    }
  }
  bool ng = node(x).needs_grad || node(kernel).needs_grad || (has_bias && node(bias).needs_grad);
  int xid = x.id, kid = kernel.id, bid = has_bias ? bias.id : -1;
  return Var{make_node(std::move(out), ng,
                       [xid, kid, bid, ci, h, w, co, kh, kw, oh, ow, stride, pad](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    const Tensor& X = g.nodes_[static_cast<size_t>(xid)].value;
    const Tensor& K = g.nodes_[static_cast<size_t>(kid)].value;
    Tensor* dx = g.grad_sink(xid);
    Tensor* dk = g.grad_sink(kid);
    Tensor* db = bid >= 0 ? g.grad_sink(bid) : nullptr;
    for (int o = 0; o < co; ++o) {
      const double* gplane = dy.data.data() + static_cast<int64_t>(o) * oh * ow;
      if (db != nullptr) {
        double s = 0.0;
        for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) s += gplane[i];
        (*db)[o] += s;
      }
      for (int c = 0; c < ci; ++c) {
        const double* xplane = X.data.data() + static_cast<int64_t>(c) * h * w;
        const double* kbase = K.data.data() + ((static_cast<int64_t>(o) * ci + c) * kh) * kw;
        double* dxplane = dx != nullptr ? dx->data.data() + static_cast<int64_t>(c) * h * w : nullptr;
        double* dkbase = dk != nullptr ? dk->data.data() + ((static_cast<int64_t>(o) * ci + c) * kh) * kw : nullptr;
        for (int oy = 0; oy < oh; ++oy) {
          int iy0 = oy * stride - pad;
          for (int ox = 0; ox < ow; ++ox) {
            int ix0 = ox * stride - pad;
            double gv = gplane[static_cast<int64_t>(oy) * ow + ox];
            if (gv == 0.0) continue;
            for (int u = 0; u < kh; ++u) {
              int yy = iy0 + u;
              if (yy < 0 || yy >= h) continue;
              for (int v = 0; v < kw; ++v) {
                int xx = ix0 + v;
                if (xx < 0 || xx >= w) continue;
                int64_t xat = static_cast<int64_t>(yy) * w + xx;
                int64_t kat = static_cast<int64_t>(u) * kw + v;
                if (dxplane != nullptr) dxplane[xat] += gv * kbase[kat];
                if (dkbase != nullptr) dkbase[kat] += gv * xplane[xat];
              }
            }
          }
        }
      }
    }
  })};
}

Var Graph::avg_pool2d(Var x, int out_h, int out_w) {
  const Tensor& X = node(x).value;
  check_rank(X, 3, "avg_pool2d");
  int c = X.dim(0), h = X.dim(1), w = X.dim(2);
  if (out_h < 1 || out_w < 1 || h % out_h != 0 || w % out_w != 0) {
    throw ConfigError("avg_pool2d: input " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible into " + std::to_string(out_h) + "x" + std::to_string(out_w) + " windows");
  }
  int wh = h / out_h, ww = w / out_w;
  double inv = 1.0 / (static_cast<double>(wh) * ww);
  Tensor out = Tensor::zeros({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    const double* xplane = X.data.data() + static_cast<int64_t>(ch) * h * w;
    double* yplane = out.data.data() + static_cast<int64_t>(ch) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        double acc = 0.0;
        for (int u = 0; u < wh; ++u) {
          const double* xrow = xplane + static_cast<int64_t>(oy * wh + u) * w + ox * ww;
          for (int v = 0; v < ww; ++v) acc += xrow[v];
        }
        yplane[static_cast<int64_t>(oy) * out_w + ox] = acc * inv;
      }
    }
  }
  bool ng = node(x).needs_grad;
  int xid = x.id;
  return Var{make_node(std::move(out), ng, [xid, c, h, w, out_h, out_w, wh, ww, inv](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* dx = g.grad_sink(xid)) {
      for (int ch = 0; ch < c; ++ch) {
        double* dxplane = dx->data.data() + static_cast<int64_t>(ch) * h * w;
        const double* gplane = dy.data.data() + static_cast<int64_t>(ch) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
          for (int ox = 0; ox < out_w; ++ox) {
            double gv = gplane[static_cast<int64_t>(oy) * out_w + ox] * inv;
            for (int u = 0; u < wh; ++u) {
              double* dxrow = dxplane + static_cast<int64_t>(oy * wh + u) * w + ox * ww;
              for (int v = 0; v < ww; ++v) dxrow[v] += gv;
            }
          }
        }
      }
    }
  })};
}

Var Graph::dropout(Var a, double p) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: probability must lie in [0,1)");
  if (!training || p == 0.0) return a;  // identity in eval mode
  const Tensor& A = node(a).value;
  double keep = 1.0 - p;
  std::vector<double> mask(static_cast<size_t>(A.numel()));
  for (double& m : mask) m = rng_unit(rng_) < keep ? 1.0 / keep : 0.0;
  Tensor out = A;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= mask[static_cast<size_t>(i)];
  bool ng = node(a).needs_grad;
  int aid = a.id;
  return Var{make_node(std::move(out), ng, [aid, mask = std::move(mask)](Graph& g, int self) {
    const Tensor& dy = g.grad_of(self);
    if (Tensor* da = g.grad_sink(aid)) {
      for (int64_t i = 0; i < dy.numel(); ++i) (*da)[i] += dy[i] * mask[static_cast<size_t>(i)];
    }
  })};
}

Var Graph::sum(Var a) {
  const Tensor& A = node(a).value;
  double acc = 0.0;
  for (double v : A.data) acc += v;
  bool ng = node(a).needs_grad;
  int aid = a.id;
  return Var{make_node(Tensor::scalar(acc), ng, [aid](Graph& g, int self) {
    double gv = g.grad_of(self)[0];
    if (Tensor* da = g.grad_sink(aid)) {
      for (int64_t i = 0; i < da->numel(); ++i) (*da)[i] += gv;
    }
  })};
}

Var Graph::mean(Var a) {
  const Tensor& A = node(a).value;
  double acc = 0.0;
  for (double v : A.data) acc += v;
  double inv = 1.0 / static_cast<double>(A.numel());
  bool ng = node(a).needs_grad;
  int aid = a.id;
  return Var{make_node(Tensor::scalar(acc * inv), ng, [aid, inv](Graph& g, int self) {
    double gv = g.grad_of(self)[0] * inv;
    if (Tensor* da = g.grad_sink(aid)) {
      for (int64_t i = 0; i < da->numel(); ++i) (*da)[i] += gv;
    }
  })};
}

}  // namespace hvp
