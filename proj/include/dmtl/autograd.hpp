#pragma once

// Minimal reverse-mode automatic differentiation over dense matrices. A forward
// pass builds a graph of shared nodes; backward() walks it in reverse topological
// order and accumulates gradients into every node that requires them.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dmtl/common.hpp"

namespace dmtl::ag {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : node_(std::move(n)) {}

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  const NodePtr& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  NodePtr node_;
};

inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : saved_(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

inline Var constant(Matrix m) {
  auto n = std::make_shared<Node>();
  n->value = std::move(m);
  return Var(std::move(n));
}

inline Var leaf(Matrix m, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(m);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

// Builds an op node. The backward closure receives the node itself; parents are
// reachable through node.inputs in the order given here.
inline Var make_op(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool needs = false;
  if (grad_enabled())
    for (const auto& v : inputs) needs = needs || v.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& v : inputs) n->inputs.push_back(v.node());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

inline void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw Error("backward() needs a scalar root");
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

namespace detail {
inline void push(Node& self, std::size_t i, const Matrix& g) {
  Node& in = *self.inputs[i];
  if (in.requires_grad) in.accumulate(g);
}
inline bool wants(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }
}  // namespace detail

// ---- elementary ops ---------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw Error("matmul: shape mismatch");
  return make_op(a.value() * b.value(), {a, b}, [](Node& s) {
    if (detail::wants(s, 0)) detail::push(s, 0, s.grad * s.inputs[1]->value.transpose());
    if (detail::wants(s, 1)) detail::push(s, 1, s.inputs[0]->value.transpose() * s.grad);
  });
}

inline Var add(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("add: shape mismatch");
  return make_op(a.value() + b.value(), {a, b}, [](Node& s) {
    detail::push(s, 0, s.grad);
    detail::push(s, 1, s.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("sub: shape mismatch");
  return make_op(a.value() - b.value(), {a, b}, [](Node& s) {
    detail::push(s, 0, s.grad);
    detail::push(s, 1, -s.grad);
  });
}

inline Var mul(const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw Error("mul: shape mismatch");
  return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& s) {
    if (detail::wants(s, 0)) detail::push(s, 0, s.grad.cwiseProduct(s.inputs[1]->value));
    if (detail::wants(s, 1)) detail::push(s, 1, s.grad.cwiseProduct(s.inputs[0]->value));
  });
}

inline Var scale(const Var& a, double k) {
  return make_op(a.value() * k, {a}, [k](Node& s) { detail::push(s, 0, s.grad * k); });
}

// a (N x c) + row (1 x c) broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw Error("add_row: shape mismatch");
  Matrix v = a.value().rowwise() + row.value().row(0);
  return make_op(std::move(v), {a, row}, [](Node& s) {
    detail::push(s, 0, s.grad);
    if (detail::wants(s, 1)) detail::push(s, 1, s.grad.colwise().sum());
  });
}

inline Var broadcast_rows(const Var& row, Index n) {
  if (row.rows() != 1) throw Error("broadcast_rows: expects a single row");
  Matrix v = row.value().replicate(n, 1);
  return make_op(std::move(v), {row}, [](Node& s) { detail::push(s, 0, s.grad.colwise().sum()); });
}

inline Var tanh(const Var& a) {
  Matrix v = a.value().array().tanh().matrix();
  return make_op(v, {a}, [](Node& s) {
    detail::push(s, 0, (s.grad.array() * (1.0 - s.value.array().square())).matrix());
  });
}

inline Matrix sigmoid_of(const Matrix& m) { return (1.0 / (1.0 + (-m.array()).exp())).matrix(); }

inline Var sigmoid(const Var& a) {
  return make_op(sigmoid_of(a.value()), {a}, [](Node& s) {
    detail::push(s, 0, (s.grad.array() * s.value.array() * (1.0 - s.value.array())).matrix());
  });
}

inline Matrix softmax_rows_of(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    const double mx = m.row(i).maxCoeff();
    out.row(i) = (m.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

inline Var softmax_rows(const Var& a) {
  return make_op(softmax_rows_of(a.value()), {a}, [](Node& s) {
    const Matrix& y = s.value;
    Matrix g(y.rows(), y.cols());
    for (Index i = 0; i < y.rows(); ++i) {
      const double dot = s.grad.row(i).dot(y.row(i));
      g.row(i) = (y.row(i).array() * (s.grad.row(i).array() - dot)).matrix();
    }
    detail::push(s, 0, g);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_cols: nothing to concatenate");
  Index rows = parts[0].rows(), cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw Error("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make_op(std::move(v), parts, [](Node& s) {
    Index off = 0;
    for (std::size_t i = 0; i < s.inputs.size(); ++i) {
      const Index c = s.inputs[i]->value.cols();
      if (detail::wants(s, i)) detail::push(s, i, s.grad.middleCols(off, c));
      off += c;
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_rows: nothing to concatenate");
  Index cols = parts[0].cols(), rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw Error("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix v(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make_op(std::move(v), parts, [](Node& s) {
    Index off = 0;
    for (std::size_t i = 0; i < s.inputs.size(); ++i) {
      const Index r = s.inputs[i]->value.rows();
      if (detail::wants(s, i)) detail::push(s, i, s.grad.middleRows(off, r));
      off += r;
    }
  });
}

inline Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw Error("slice_cols: out of range");
  return make_op(a.value().middleCols(start, count), {a}, [start, count](Node& s) {
    Matrix g = Matrix::Zero(s.inputs[0]->value.rows(), s.inputs[0]->value.cols());
    g.middleCols(start, count) = s.grad;
    detail::push(s, 0, g);
  });
}

// Selects rows by index (duplicates allowed).
inline Var gather_rows(const Var& a, std::vector<Index> rows) {
  Matrix v(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw Error("gather_rows: index out of range");
    v.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  return make_op(std::move(v), {a}, [rows = std::move(rows)](Node& s) {
    Matrix g = Matrix::Zero(s.inputs[0]->value.rows(), s.inputs[0]->value.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) g.row(rows[i]) += s.grad.row(static_cast<Index>(i));
    detail::push(s, 0, g);
  });
}

inline Var sum(const Var& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return make_op(std::move(v), {a}, [](Node& s) {
    detail::push(s, 0, Matrix::Constant(s.inputs[0]->value.rows(), s.inputs[0]->value.cols(), s.grad(0, 0)));
  });
}

// Row i is the mean of the table rows listed in ids[i]; an empty list yields zeros.
inline Var embedding_bag_mean(const Var& table, std::vector<std::vector<Index>> ids) {
  Matrix v = Matrix::Zero(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i].empty()) continue;
    for (Index id : ids[i]) {
      if (id < 0 || id >= table.rows()) throw Error("embedding_bag_mean: id out of range");
      v.row(static_cast<Index>(i)) += table.value().row(id);
    }
    v.row(static_cast<Index>(i)) /= static_cast<double>(ids[i].size());
  }
  return make_op(std::move(v), {table}, [ids = std::move(ids)](Node& s) {
    Matrix g = Matrix::Zero(s.inputs[0]->value.rows(), s.inputs[0]->value.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i].empty()) continue;
      const double w = 1.0 / static_cast<double>(ids[i].size());
      for (Index id : ids[i]) g.row(id) += w * s.grad.row(static_cast<Index>(i));
    }
    detail::push(s, 0, g);
  });
}

// Scalar node whose value and gradient w.r.t. `input` were computed externally
// (losses with analytic gradients).
inline Var external_loss(const Var& input, double value, Matrix grad_wrt_input) {
  if (grad_wrt_input.rows() != input.rows() || grad_wrt_input.cols() != input.cols())
    throw Error("external_loss: gradient shape mismatch");
  Matrix v(1, 1);
  v(0, 0) = value;
  return make_op(std::move(v), {input}, [g = std::move(grad_wrt_input)](Node& s) {
    detail::push(s, 0, g * s.grad(0, 0));
  });
}

// Unidirectional LSTM over the rows of X (N x in), fused so one node covers the
// whole sequence. Gate layout in the 4h columns: input, forget, cell, output.
// With reverse=true the sequence is consumed last row first; output row t always
// corresponds to input row t.
inline Var lstm(const Var& X, const Var& Wx, const Var& Wh, const Var& b, bool reverse) {
  const Index n = X.rows();
  const Index h = Wh.rows();
  if (Wx.rows() != X.cols() || Wx.cols() != 4 * h || Wh.cols() != 4 * h || b.rows() != 1 || b.cols() != 4 * h)
    throw Error("lstm: parameter shape mismatch");
  struct Cache {
    Matrix gates;  // N x 4h, post-activation
    Matrix cells;  // N x h
    Matrix hidden;
  };
  auto cache = std::make_shared<Cache>();
  cache->gates.resize(n, 4 * h);
  cache->cells.resize(n, h);
  cache->hidden.resize(n, h);
  const Matrix xz = X.value() * Wx.value();
  Eigen::RowVectorXd hp = Eigen::RowVectorXd::Zero(h), cp = Eigen::RowVectorXd::Zero(h);
  for (Index k = 0; k < n; ++k) {
    const Index t = reverse ? n - 1 - k : k;
    Eigen::RowVectorXd z = xz.row(t) + hp * Wh.value() + b.value().row(0);
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    for (Index j = 0; j < h; ++j) {
      z(j) = sig(z(j));
      z(h + j) = sig(z(h + j));
      z(2 * h + j) = std::tanh(z(2 * h + j));
      z(3 * h + j) = sig(z(3 * h + j));
    }
    Eigen::RowVectorXd c = z.segment(h, h).cwiseProduct(cp) + z.segment(0, h).cwiseProduct(z.segment(2 * h, h));
    Eigen::RowVectorXd hv = z.segment(3 * h, h).cwiseProduct(c.array().tanh().matrix());
    cache->gates.row(t) = z;
    cache->cells.row(t) = c;
    cache->hidden.row(t) = hv;
    hp = hv;
    cp = c;
  }
  Matrix out = cache->hidden;
  return make_op(std::move(out), {X, Wx, Wh, b}, [cache, reverse, n, h](Node& s) {
    const Matrix& x = s.inputs[0]->value;
    const Matrix& wx = s.inputs[1]->value;
    const Matrix& wh = s.inputs[2]->value;
    Matrix dz_all(n, 4 * h);
    Eigen::RowVectorXd dh_next = Eigen::RowVectorXd::Zero(h), dc_next = Eigen::RowVectorXd::Zero(h);
    Matrix dwh = Matrix::Zero(h, 4 * h);
    for (Index k = n - 1; k >= 0; --k) {
      const Index t = reverse ? n - 1 - k : k;
      const Index prev = reverse ? t + 1 : t - 1;
      const bool has_prev = k > 0;
      const auto z = cache->gates.row(t);
      const Eigen::RowVectorXd c = cache->cells.row(t);
      const Eigen::RowVectorXd c_prev = has_prev ? Eigen::RowVectorXd(cache->cells.row(prev))
                                                 : Eigen::RowVectorXd::Zero(h);
      const Eigen::RowVectorXd tc = c.array().tanh().matrix();
      Eigen::RowVectorXd dh = s.grad.row(t) + dh_next;
      Eigen::RowVectorXd dc =
          (dh.array() * z.segment(3 * h, h).array() * (1.0 - tc.array().square())).matrix() + dc_next;
      Eigen::RowVectorXd dz(4 * h);
      for (Index j = 0; j < h; ++j) {
        const double ig = z(j), fg = z(h + j), gg = z(2 * h + j), og = z(3 * h + j);
        dz(j) = dc(j) * gg * ig * (1.0 - ig);
        dz(h + j) = dc(j) * c_prev(j) * fg * (1.0 - fg);
        dz(2 * h + j) = dc(j) * ig * (1.0 - gg * gg);
        dz(3 * h + j) = dh(j) * tc(j) * og * (1.0 - og);
      }
      dz_all.row(t) = dz;
      if (has_prev) dwh += cache->hidden.row(prev).transpose() * dz;
      dh_next = dz * wh.transpose();
      dc_next = dc.cwiseProduct(z.segment(h, h));
    }
    if (detail::wants(s, 0)) detail::push(s, 0, dz_all * wx.transpose());
    if (detail::wants(s, 1)) detail::push(s, 1, x.transpose() * dz_all);
    if (detail::wants(s, 2)) detail::push(s, 2, dwh);
    if (detail::wants(s, 3)) detail::push(s, 3, dz_all.colwise().sum());
  });
}

// ---- parameters ---------------------------------------------------------------

enum class ParamGroup { embedder, shared, head };

// A named trainable leaf. Non-copyable: the node identity is the parameter.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Matrix init, ParamGroup group)
      : name_(std::move(name)), var_(leaf(std::move(init), true)), group_(group) {}
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;
  Parameter(const Parameter&) = delete;
  Parameter& operator=(const Parameter&) = delete;

  const std::string& name() const { return name_; }
  const Var& var() const { return var_; }
  const Matrix& value() const { return var_.value(); }
  Matrix& mutable_value() { return var_.node()->value; }
  Matrix& grad() { return var_.node()->grad; }
  ParamGroup group() const { return group_; }
  bool trainable() const { return var_.node()->requires_grad; }
  void set_trainable(bool t) { var_.node()->requires_grad = t; }
  Index size() const { return var_.value().size(); }
  void zero_grad() { var_.node()->grad.resize(0, 0); }

 private:
  std::string name_;
  Var var_;
  ParamGroup group_ = ParamGroup::shared;
};

inline Matrix uniform_init(Index rows, Index cols, double bound, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

inline Matrix xavier_init(Index rows, Index cols, std::uint64_t seed) {
  return uniform_init(rows, cols, std::sqrt(6.0 / static_cast<double>(rows + cols)), seed);
}

using Snapshot = std::map<std::string, Matrix>;

inline Snapshot snapshot(const std::vector<Parameter*>& params) {
  Snapshot s;
  for (const auto* p : params) s[p->name()] = p->value();
  return s;
}

inline void restore(const std::vector<Parameter*>& params, const Snapshot& s) {
  for (auto* p : params) {
    auto it = s.find(p->name());
    if (it == s.end()) throw Error("snapshot lacks parameter '" + p->name() + "'");
    if (it->second.rows() != p->value().rows() || it->second.cols() != p->value().cols())
      throw Error("snapshot shape mismatch for '" + p->name() + "'");
    p->mutable_value() = it->second;
  }
}

// Flat named-tensor archive: "DMTLCKPT" magic, u64 count, then per tensor
// u64 name length, name bytes, u64 rows, u64 cols, rows*cols little-endian
// doubles in column-major order.
inline void write_archive(const std::string& path, const Snapshot& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path);
  auto put = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  out.write("DMTLCKPT", 8);
  put(tensors.size());
  for (const auto& [name, m] : tensors) {
    put(name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(static_cast<std::uint64_t>(m.rows()));
    put(static_cast<std::uint64_t>(m.cols()));
    for (Index k = 0; k < m.size(); ++k) {
      std::uint64_t bits;
      const double d = m.data()[k];
      std::memcpy(&bits, &d, sizeof bits);
      put(bits);
    }
  }
}

inline Snapshot read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path);
  auto get = [&]() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      const int c = in.get();
      if (c == EOF) throw Error("truncated checkpoint " + path);
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
  };
  char magic[8];
  if (!in.read(magic, 8) || std::string(magic, 8) != "DMTLCKPT") throw Error("not a checkpoint archive: " + path);
  Snapshot s;
  const auto count = get();
  for (std::uint64_t t = 0; t < count; ++t) {
    std::string name(get(), '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) throw Error("truncated checkpoint " + path);
    const auto rows = static_cast<Index>(get());
    const auto cols = static_cast<Index>(get());
    Matrix m(rows, cols);
    for (Index k = 0; k < m.size(); ++k) {
      const std::uint64_t bits = get();
      std::memcpy(m.data() + k, &bits, sizeof bits);
    }
    s.emplace(std::move(name), std::move(m));
  }
  return s;
}

}  // namespace dmtl::ag
