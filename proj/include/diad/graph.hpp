/*
 * Copyright 2026 The diad Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "diad/common.hpp"
#include "diad/entmax.hpp"

namespace diad {

// Reverse-mode autodiff over an arena of dense-matrix nodes.
//
// Nodes are created in topological order (builders only accept existing ids),
// so forward() is a single ascending sweep over the ancestors of the target
// and backward() a descending sweep from a scalar root. Gradients accumulate
// across backward() calls until zero_grads() is invoked. All reductions are
// serial, so results are bit-reproducible for a fixed graph and inputs.
//
// Besides generic dense ops, the engine carries fused ops for the soft
// oblivious-tree forward pass (masked entmax over selection columns, the
// entmoid split gate, leaf tensor expansion, per-tree response matmul) and
// for the training losses. Fusing these keeps the node count per model in the
// tens and makes the hand-derived gradients easy to test against finite
// differences in one place.

enum class Op {
  kInput,
  kParam,
  kConst,
  kOpaque,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kMatmul,
  kHconcat,
  kGatherCols,
  kColSum,
  kRowMean,
  kSum,
  kMean,
  kMaskedEntmaxCols,
  kSplitEntmoid,
  kLeafExpand,
  kTreeResponse,
  kPidMoment,
  kPairwiseHinge,
  kBceWithLogits,
};

class Graph;

struct Node {
  Op op;
  std::vector<int> inputs;
  Matrix value;
  Matrix grad;
  // Op-specific buffers filled during forward for reuse in backward
  // (e.g. the pre-gate arguments of the split, sparsity statistics).
  std::vector<Matrix> aux;

  // Op-specific attributes.
  std::vector<int> idx;  // gather indices
  int trees = 0;         // trees per layer (fused tree ops)
  int leaves = 0;        // leaves per tree = 2^depth
  int depth = 0;
  int resp = 0;          // response dims per tree
  int npos = 0;          // positives leading the score vector
  double alpha = 0.0;
  double delta = 0.0;       // count smoothing
  double keep_prob = 1.0;   // inverted-dropout keep probability
  std::function<void(Graph&, Node&)> fn;  // kOpaque forward
};

class Graph {
 public:
  int input(int rows, int cols) {
    Node n;
    n.op = Op::kInput;
    n.value = Matrix::Zero(rows, cols);
    return push(std::move(n));
  }

  int input(const Matrix& v) {
    Node n;
    n.op = Op::kInput;
    n.value = v;
    return push(std::move(n));
  }

  int param(const Matrix& v) {
    Node n;
    n.op = Op::kParam;
    n.value = v;
    return push(std::move(n));
  }

  int constant(const Matrix& v) {
    Node n;
    n.op = Op::kConst;
    n.value = v;
    return push(std::move(n));
  }

  // Non-differentiable node whose value is produced by a callback. Used for
  // data-dependent wiring (compatibility masks) that must refresh during the
  // forward sweep but never carries gradient.
  int opaque(std::vector<int> ins, std::function<void(Graph&, Node&)> fn) {
    Node n;
    n.op = Op::kOpaque;
    n.inputs = std::move(ins);
    n.fn = std::move(fn);
    check_inputs(n);
    return push(std::move(n));
  }

  int add(int a, int b) { return binary(Op::kAdd, a, b); }
  int sub(int a, int b) { return binary(Op::kSub, a, b); }
  int mul(int a, int b) { return binary(Op::kMul, a, b); }

  int scale(int a, double k) {
    Node n;
    n.op = Op::kScale;
    n.inputs = {a};
    n.alpha = k;
    check_inputs(n);
    return push(std::move(n));
  }

  // value = matrix + scalar (1x1 node) broadcast over all entries.
  int add_scalar(int a, int s) { return binary(Op::kAddScalar, a, s); }

  int matmul(int a, int b) { return binary(Op::kMatmul, a, b); }

  int hconcat(std::vector<int> ins) {
    if (ins.empty()) throw ContractError("hconcat: no inputs");
    Node n;
    n.op = Op::kHconcat;
    n.inputs = std::move(ins);
    check_inputs(n);
    return push(std::move(n));
  }

  int gather_cols(int a, std::vector<int> indices) {
    Node n;
    n.op = Op::kGatherCols;
    n.inputs = {a};
    n.idx = std::move(indices);
    check_inputs(n);
    return push(std::move(n));
  }

  int colsum(int a) { return unary(Op::kColSum, a); }
  int rowmean(int a) { return unary(Op::kRowMean, a); }
  int sum(int a) { return unary(Op::kSum, a); }
  int mean(int a) { return unary(Op::kMean, a); }

  // Column-wise entmax-1.5 over the rows allowed by mask (> 0.5); masked-out
  // rows get exactly zero weight. No gradient flows to temperature or mask.
  int masked_entmax_cols(int logits, int temperature, int mask) {
    Node n;
    n.op = Op::kMaskedEntmaxCols;
    n.inputs = {logits, temperature, mask};
    check_inputs(n);
    return push(std::move(n));
  }

  // H = entmoid((G - b) / (exp(log_s) * T)) with b, log_s broadcast by
  // column. Slopes live in log space so positivity needs no projection.
  int split_entmoid(int g, int b, int log_s, int temperature) {
    Node n;
    n.op = Op::kSplitEntmoid;
    n.inputs = {g, b, log_s, temperature};
    check_inputs(n);
    return push(std::move(n));
  }

  // Expands per-depth gate activations H [B x trees*depth] into leaf
  // memberships e [B x trees*2^depth]. Within a tree, depth 0 is the most
  // significant bit of the leaf index and bit 0 means "gate open" (H side).
  int leaf_expand(int h, int trees, int depth) {
    Node n;
    n.op = Op::kLeafExpand;
    n.inputs = {h};
    n.trees = trees;
    n.depth = depth;
    n.leaves = 1 << depth;
    check_inputs(n);
    return push(std::move(n));
  }

  // Per-tree response: block-diagonal product of leaf memberships with each
  // tree's leaf-weight block. W is [trees*leaves x resp] stacked by tree.
  int tree_response(int e, int w, int trees, int depth, int resp) {
    Node n;
    n.op = Op::kTreeResponse;
    n.inputs = {e, w};
    n.trees = trees;
    n.depth = depth;
    n.leaves = 1 << depth;
    n.resp = resp;
    check_inputs(n);
    return push(std::move(n));
  }

  // Sparsity objective over per-tree leaf counts (data and uniform batches),
  // with additive smoothing delta and per-tree inverted dropout given by
  // drop_mask (entries 0/1, [1 x trees]). Value is the scalar loss
  // -sum_t mask_t / keep * sum_l V_tl^2 / D_tl. Side outputs in aux:
  // volume ratio V, data ratio D, raw sparsity V/D, and min-max normalized
  // sparsity, each [1 x trees*leaves].
  int pid_moment(int counts_data, int counts_unif, int drop_mask, int trees,
                 int depth, double delta, double keep_prob) {
    Node n;
    n.op = Op::kPidMoment;
    n.inputs = {counts_data, counts_unif, drop_mask};
    n.trees = trees;
    n.depth = depth;
    n.leaves = 1 << depth;
    n.delta = delta;
    n.keep_prob = keep_prob;
    check_inputs(n);
    return push(std::move(n));
  }

  // Mean hinge over all positive/negative score pairs; the first npos rows
  // of the [B x 1] score vector are the positives.
  int pairwise_hinge(int scores, int npos) {
    Node n;
    n.op = Op::kPairwiseHinge;
    n.inputs = {scores};
    n.npos = npos;
    check_inputs(n);
    return push(std::move(n));
  }

  // Mean binary cross-entropy on logits against 0/1 labels.
  int bce_with_logits(int scores, int labels) {
    return binary(Op::kBceWithLogits, scores, labels);
  }

  // --- access -------------------------------------------------------------

  void set_value(int id, const Matrix& v) {
    Node& n = node_mut(id);
    if (n.op != Op::kInput) {
      throw ContractError("set_value: only input nodes are assignable");
    }
    n.value = v;
  }

  Matrix& mutable_value(int id) {
    Node& n = node_mut(id);
    if (n.op != Op::kParam) {
      throw ContractError("mutable_value: only parameter nodes are mutable");
    }
    return n.value;
  }

  const Matrix& value(int id) const { return node(id).value; }

  const Matrix& grad(int id) const { return node(id).grad; }

  const Node& node(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size())) {
      throw ContractError("node id out of range");
    }
    return nodes_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return nodes_.size(); }

  // --- execution ----------------------------------------------------------

  void forward(int root) {
    mark_ancestors(root);
    for (int i = 0; i <= root; ++i) {
      if (needed_[static_cast<std::size_t>(i)]) {
        eval(nodes_[static_cast<std::size_t>(i)]);
      }
    }
  }

  void zero_grads() {
    for (Node& n : nodes_) {
      n.grad.resize(n.value.rows(), n.value.cols());
      n.grad.setZero();
    }
  }

  // Accumulates d(root)/d(node) into every leaf ancestor's grad buffer. The
  // root must be scalar. Leaf (input/param/const) gradients accumulate across
  // calls until zero_grads(); interior gradients are per-call scratch.
  void backward(int root) {
    const Node& r = node(root);
    if (r.value.rows() != 1 || r.value.cols() != 1) {
      throw ContractError("backward: root must be a 1x1 scalar");
    }
    mark_ancestors(root);
    for (int i = 0; i <= root; ++i) {
      if (!needed_[static_cast<std::size_t>(i)]) continue;
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (is_leaf(n.op)) {
        ensure_grad(n);
      } else {
        n.grad.resize(n.value.rows(), n.value.cols());
        n.grad.setZero();
      }
    }
    nodes_[static_cast<std::size_t>(root)].grad(0, 0) += 1.0;
    for (int i = root; i >= 0; --i) {
      if (needed_[static_cast<std::size_t>(i)]) {
        backprop(nodes_[static_cast<std::size_t>(i)]);
      }
    }
  }

 private:
  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int unary(Op op, int a) {
    Node n;
    n.op = op;
    n.inputs = {a};
    check_inputs(n);
    return push(std::move(n));
  }

  int binary(Op op, int a, int b) {
    Node n;
    n.op = op;
    n.inputs = {a, b};
    check_inputs(n);
    return push(std::move(n));
  }

  void check_inputs(const Node& n) const {
    for (int id : n.inputs) {
      if (id < 0 || id >= static_cast<int>(nodes_.size())) {
        throw ContractError("node references an id that does not exist yet");
      }
    }
  }

  Node& node_mut(int id) {
    return const_cast<Node&>(static_cast<const Graph*>(this)->node(id));
  }

  void mark_ancestors(int root) {
    node(root);  // range check
    needed_.assign(nodes_.size(), 0);
    std::vector<int> stack = {root};
    while (!stack.empty()) {
      const int id = stack.back();
      stack.pop_back();
      if (needed_[static_cast<std::size_t>(id)]) continue;
      needed_[static_cast<std::size_t>(id)] = 1;
      for (int in : nodes_[static_cast<std::size_t>(id)].inputs) {
        if (!needed_[static_cast<std::size_t>(in)]) stack.push_back(in);
      }
    }
  }

  void ensure_grad(Node& n) {
    if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols()) {
      n.grad.resize(n.value.rows(), n.value.cols());
      n.grad.setZero();
    }
  }

  const Matrix& in_value(const Node& n, int slot) const {
    return nodes_[static_cast<std::size_t>(n.inputs[static_cast<std::size_t>(slot)])].value;
  }

  Matrix& in_grad(Node& n, int slot) {
    return nodes_[static_cast<std::size_t>(n.inputs[static_cast<std::size_t>(slot)])].grad;
  }

  static bool is_leaf(Op op) {
    return op == Op::kInput || op == Op::kParam || op == Op::kConst ||
           op == Op::kOpaque;
  }

  static void require(bool ok, const char* what) {
    if (!ok) throw ContractError(what);
  }

  void eval(Node& n);
  void backprop(Node& n);

  std::vector<Node> nodes_;
  std::vector<char> needed_;
};

// --- forward ---------------------------------------------------------------

inline void Graph::eval(Node& n) {
  switch (n.op) {
    case Op::kInput:
    case Op::kParam:
    case Op::kConst:
      break;
    case Op::kOpaque:
      n.fn(*this, n);
      break;
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      const Matrix& a = in_value(n, 0);
      const Matrix& b = in_value(n, 1);
      require(a.rows() == b.rows() && a.cols() == b.cols(),
              "elementwise op: shape mismatch");
      if (n.op == Op::kAdd) n.value = a + b;
      if (n.op == Op::kSub) n.value = a - b;
      if (n.op == Op::kMul) n.value = a.cwiseProduct(b);
      break;
    }
    case Op::kScale:
      n.value = n.alpha * in_value(n, 0);
      break;
    case Op::kAddScalar: {
      const Matrix& a = in_value(n, 0);
      const Matrix& s = in_value(n, 1);
      require(s.rows() == 1 && s.cols() == 1, "add_scalar: rhs must be 1x1");
      n.value = a.array() + s(0, 0);
      break;
    }
    case Op::kMatmul: {
      const Matrix& a = in_value(n, 0);
      const Matrix& b = in_value(n, 1);
      require(a.cols() == b.rows(), "matmul: inner dimensions differ");
      n.value.noalias() = a * b;
      break;
    }
    case Op::kHconcat: {
      Eigen::Index rows = in_value(n, 0).rows();
      Eigen::Index cols = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const Matrix& v = in_value(n, static_cast<int>(i));
        require(v.rows() == rows, "hconcat: row count mismatch");
        cols += v.cols();
      }
      n.value.resize(rows, cols);
      Eigen::Index at = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const Matrix& v = in_value(n, static_cast<int>(i));
        n.value.middleCols(at, v.cols()) = v;
        at += v.cols();
      }
      break;
    }
    case Op::kGatherCols: {
      const Matrix& a = in_value(n, 0);
      n.value.resize(a.rows(), static_cast<Eigen::Index>(n.idx.size()));
      for (std::size_t j = 0; j < n.idx.size(); ++j) {
        const int src = n.idx[j];
        require(src >= 0 && src < a.cols(), "gather_cols: index out of range");
        n.value.col(static_cast<Eigen::Index>(j)) = a.col(src);
      }
      break;
    }
    case Op::kColSum:
      n.value = in_value(n, 0).colwise().sum();
      break;
    case Op::kRowMean: {
      const Matrix& a = in_value(n, 0);
      require(a.cols() > 0, "rowmean: empty input");
      n.value = a.rowwise().mean();
      break;
    }
    case Op::kSum: {
      n.value.resize(1, 1);
      n.value(0, 0) = in_value(n, 0).sum();
      break;
    }
    case Op::kMean: {
      const Matrix& a = in_value(n, 0);
      require(a.size() > 0, "mean: empty input");
      n.value.resize(1, 1);
      n.value(0, 0) = a.mean();
      break;
    }
    case Op::kMaskedEntmaxCols: {
      const Matrix& logits = in_value(n, 0);
      const Matrix& temp = in_value(n, 1);
      const Matrix& mask = in_value(n, 2);
      require(temp.size() == 1, "masked_entmax: temperature must be 1x1");
      require(mask.rows() == logits.rows() && mask.cols() == logits.cols(),
              "masked_entmax: mask shape mismatch");
      const double t = temp(0, 0);
      n.value.resize(logits.rows(), logits.cols());
      n.value.setZero();
      std::vector<int> rows;
      for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        rows.clear();
        for (Eigen::Index r = 0; r < logits.rows(); ++r) {
          if (mask(r, c) > 0.5) rows.push_back(static_cast<int>(r));
        }
        require(!rows.empty(), "masked_entmax: a column has an empty mask");
        Vector sub(static_cast<Eigen::Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) sub[static_cast<Eigen::Index>(i)] = logits(rows[i], c);
        const Vector p = entmax15(sub, t);
        for (std::size_t i = 0; i < rows.size(); ++i) n.value(rows[i], c) = p[static_cast<Eigen::Index>(i)];
      }
      break;
    }
    case Op::kSplitEntmoid: {
      const Matrix& g = in_value(n, 0);
      const Matrix& b = in_value(n, 1);
      const Matrix& ls = in_value(n, 2);
      const Matrix& temp = in_value(n, 3);
      require(b.rows() == 1 && b.cols() == g.cols(),
              "split_entmoid: thresholds must be 1 x cols");
      require(ls.rows() == 1 && ls.cols() == g.cols(),
              "split_entmoid: log-slopes must be 1 x cols");
      require(temp.size() == 1, "split_entmoid: temperature must be 1x1");
      const double t = temp(0, 0);
      require(t > 0.0, "split_entmoid: temperature must be positive");
      // aux[0] holds the gate argument z for the backward pass.
      if (n.aux.size() < 1) n.aux.resize(1);
      Matrix& z = n.aux[0];
      z.resize(g.rows(), g.cols());
      n.value.resize(g.rows(), g.cols());
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        const double denom = std::exp(ls(0, c)) * t;
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const double zz = (g(r, c) - b(0, c)) / denom;
          z(r, c) = zz;
          n.value(r, c) = entmoid_unit(zz);
        }
      }
      break;
    }
    case Op::kLeafExpand: {
      const Matrix& h = in_value(n, 0);
      const int m = n.trees, c = n.depth, l = n.leaves;
      require(h.cols() == static_cast<Eigen::Index>(m) * c,
              "leaf_expand: gate count mismatch");
      n.value.resize(h.rows(), static_cast<Eigen::Index>(m) * l);
      std::vector<double> e(static_cast<std::size_t>(l));
      for (Eigen::Index row = 0; row < h.rows(); ++row) {
        for (int t = 0; t < m; ++t) {
          e[0] = 1.0;
          int width = 1;
          for (int d = 0; d < c; ++d) {
            const double hv = h(row, static_cast<Eigen::Index>(t) * c + d);
            for (int k = width - 1; k >= 0; --k) {
              const double base = e[static_cast<std::size_t>(k)];
              e[static_cast<std::size_t>(2 * k)] = base * hv;
              e[static_cast<std::size_t>(2 * k + 1)] = base * (1.0 - hv);
            }
            width *= 2;
          }
          for (int k = 0; k < l; ++k) {
            n.value(row, static_cast<Eigen::Index>(t) * l + k) =
                e[static_cast<std::size_t>(k)];
          }
        }
      }
      break;
    }
    case Op::kTreeResponse: {
      const Matrix& e = in_value(n, 0);
      const Matrix& w = in_value(n, 1);
      const int m = n.trees, l = n.leaves, r = n.resp;
      require(e.cols() == static_cast<Eigen::Index>(m) * l,
              "tree_response: membership width mismatch");
      require(w.rows() == static_cast<Eigen::Index>(m) * l && w.cols() == r,
              "tree_response: weight shape mismatch");
      n.value.resize(e.rows(), static_cast<Eigen::Index>(m) * r);
      for (int t = 0; t < m; ++t) {
        n.value.middleCols(static_cast<Eigen::Index>(t) * r, r).noalias() =
            e.middleCols(static_cast<Eigen::Index>(t) * l, l) *
            w.middleRows(static_cast<Eigen::Index>(t) * l, l);
      }
      break;
    }
    case Op::kPidMoment: {
      const Matrix& cd = in_value(n, 0);
      const Matrix& cu = in_value(n, 1);
      const Matrix& dm = in_value(n, 2);
      const int m = n.trees, l = n.leaves;
      require(cd.rows() == 1 && cd.cols() == static_cast<Eigen::Index>(m) * l,
              "pid_moment: data counts shape mismatch");
      require(cu.rows() == 1 && cu.cols() == cd.cols(),
              "pid_moment: uniform counts shape mismatch");
      require(dm.rows() == 1 && dm.cols() == m,
              "pid_moment: drop mask shape mismatch");
      if (n.aux.size() < 4) n.aux.resize(4);
      Matrix& vr = n.aux[0];
      Matrix& dr = n.aux[1];
      Matrix& sraw = n.aux[2];
      Matrix& snorm = n.aux[3];
      vr.resize(1, cd.cols());
      dr.resize(1, cd.cols());
      sraw.resize(1, cd.cols());
      snorm.resize(1, cd.cols());
      double loss = 0.0;
      for (int t = 0; t < m; ++t) {
        double sd = 0.0, su = 0.0;
        for (int k = 0; k < l; ++k) {
          const Eigen::Index j = static_cast<Eigen::Index>(t) * l + k;
          sd += cd(0, j) + n.delta;
          su += cu(0, j) + n.delta;
        }
        if (!(sd > 0.0) || !(su > 0.0)) {
          throw DivisionGuardError(
              "pid_moment: counts sum to zero; raise the smoothing delta");
        }
        double tree_sum = 0.0;
        double smin = 0.0, smax = 0.0;
        for (int k = 0; k < l; ++k) {
          const Eigen::Index j = static_cast<Eigen::Index>(t) * l + k;
          const double d = (cd(0, j) + n.delta) / sd;
          const double v = (cu(0, j) + n.delta) / su;
          if (!(d > 0.0)) {
            throw DivisionGuardError(
                "pid_moment: zero-count leaf with zero smoothing delta");
          }
          dr(0, j) = d;
          vr(0, j) = v;
          const double s = v / d;
          sraw(0, j) = s;
          tree_sum += v * v / d;
          if (k == 0 || s < smin) smin = s;
          if (k == 0 || s > smax) smax = s;
        }
        for (int k = 0; k < l; ++k) {
          const Eigen::Index j = static_cast<Eigen::Index>(t) * l + k;
          snorm(0, j) = smax > smin
                            ? 2.0 * (sraw(0, j) - smin) / (smax - smin) - 1.0
                            : 0.0;
        }
        loss -= dm(0, t) / n.keep_prob * tree_sum;
      }
      n.value.resize(1, 1);
      n.value(0, 0) = loss;
      break;
    }
    case Op::kPairwiseHinge: {
      const Matrix& s = in_value(n, 0);
      require(s.cols() == 1, "pairwise_hinge: scores must be a column");
      const Eigen::Index p = n.npos, total = s.rows();
      require(p >= 1 && total - p >= 1,
              "pairwise_hinge: need at least one positive and one negative");
      double loss = 0.0;
      for (Eigen::Index i = 0; i < p; ++i) {
        for (Eigen::Index j = p; j < total; ++j) {
          const double d = s(j, 0) - s(i, 0);
          if (d > 0.0) loss += d;
        }
      }
      n.value.resize(1, 1);
      n.value(0, 0) = loss / (static_cast<double>(p) *
                              static_cast<double>(total - p));
      break;
    }
    case Op::kBceWithLogits: {
      const Matrix& s = in_value(n, 0);
      const Matrix& y = in_value(n, 1);
      require(s.rows() == y.rows() && s.cols() == 1 && y.cols() == 1,
              "bce: scores and labels must be matching columns");
      require(s.rows() > 0, "bce: empty batch");
      double loss = 0.0;
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const double v = s(i, 0);
        const double softplus = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
        loss += softplus - y(i, 0) * v;
      }
      n.value.resize(1, 1);
      n.value(0, 0) = loss / static_cast<double>(s.rows());
      break;
    }
  }
  if (n.op != Op::kOpaque && !n.value.allFinite()) {
    // Opaque nodes may carry non-numeric payloads (masks are fine, but stay
    // permissive); every numeric op must produce finite values.
    throw ContractError("forward produced a non-finite value");
  }
}

// --- backward ----------------------------------------------------------------

inline void Graph::backprop(Node& n) {
  const Matrix& g = n.grad;
  switch (n.op) {
    case Op::kInput:
    case Op::kParam:
    case Op::kConst:
    case Op::kOpaque:
      break;
    case Op::kAdd:
      in_grad(n, 0) += g;
      in_grad(n, 1) += g;
      break;
    case Op::kSub:
      in_grad(n, 0) += g;
      in_grad(n, 1) -= g;
      break;
    case Op::kMul:
      in_grad(n, 0) += g.cwiseProduct(in_value(n, 1));
      in_grad(n, 1) += g.cwiseProduct(in_value(n, 0));
      break;
    case Op::kScale:
      in_grad(n, 0) += n.alpha * g;
      break;
    case Op::kAddScalar:
      in_grad(n, 0) += g;
      in_grad(n, 1)(0, 0) += g.sum();
      break;
    case Op::kMatmul:
      in_grad(n, 0).noalias() += g * in_value(n, 1).transpose();
      in_grad(n, 1).noalias() += in_value(n, 0).transpose() * g;
      break;
    case Op::kHconcat: {
      Eigen::Index at = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        Matrix& gi = in_grad(n, static_cast<int>(i));
        gi += g.middleCols(at, gi.cols());
        at += gi.cols();
      }
      break;
    }
    case Op::kGatherCols: {
      Matrix& ga = in_grad(n, 0);
      for (std::size_t j = 0; j < n.idx.size(); ++j) {
        ga.col(n.idx[j]) += g.col(static_cast<Eigen::Index>(j));
      }
      break;
    }
    case Op::kColSum: {
      Matrix& ga = in_grad(n, 0);
      ga.rowwise() += g.row(0);
      break;
    }
    case Op::kRowMean: {
      Matrix& ga = in_grad(n, 0);
      const double inv = 1.0 / static_cast<double>(ga.cols());
      ga.colwise() += (g.col(0) * inv).eval();
      break;
    }
    case Op::kSum:
      in_grad(n, 0).array() += g(0, 0);
      break;
    case Op::kMean:
      in_grad(n, 0).array() += g(0, 0) / static_cast<double>(in_value(n, 0).size());
      break;
    case Op::kMaskedEntmaxCols: {
      const Matrix& p = n.value;
      const double t = in_value(n, 1)(0, 0);
      Matrix& gl = in_grad(n, 0);
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        double s_sum = 0.0, q_num = 0.0;
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
          if (p(r, c) > 0.0) {
            const double s = std::sqrt(p(r, c));
            s_sum += s;
            q_num += g(r, c) * s;
          }
        }
        if (s_sum <= 0.0) continue;
        const double q = q_num / s_sum;
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
          if (p(r, c) > 0.0) {
            gl(r, c) += std::sqrt(p(r, c)) * (g(r, c) - q) / t;
          }
        }
      }
      break;
    }
    case Op::kSplitEntmoid: {
      const Matrix& gm = in_value(n, 0);
      const Matrix& b = in_value(n, 1);
      const Matrix& ls = in_value(n, 2);
      const double t = in_value(n, 3)(0, 0);
      const Matrix& z = n.aux[0];
      (void)gm;
      (void)b;
      Matrix& gg = in_grad(n, 0);
      Matrix& gb = in_grad(n, 1);
      Matrix& gls = in_grad(n, 2);
      for (Eigen::Index c = 0; c < z.cols(); ++c) {
        const double denom = std::exp(ls(0, c)) * t;
        double sum_dz = 0.0, sum_dz_z = 0.0;
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
          const double dz = g(r, c) * entmoid_unit_grad(z(r, c));
          gg(r, c) += dz / denom;
          sum_dz += dz;
          sum_dz_z += dz * z(r, c);
        }
        gb(0, c) -= sum_dz / denom;
        // z = (G - b) / (exp(ls) T) gives dz/d(ls) = -z.
        gls(0, c) -= sum_dz_z;
      }
      break;
    }
    case Op::kLeafExpand: {
      const Matrix& h = in_value(n, 0);
      Matrix& gh = in_grad(n, 0);
      const int m = n.trees, c = n.depth, l = n.leaves;
      std::vector<double> factors(static_cast<std::size_t>(c));
      std::vector<double> pre(static_cast<std::size_t>(c) + 1);
      std::vector<double> suf(static_cast<std::size_t>(c) + 1);
      for (Eigen::Index row = 0; row < h.rows(); ++row) {
        for (int t = 0; t < m; ++t) {
          for (int leaf = 0; leaf < l; ++leaf) {
            const double de = g(row, static_cast<Eigen::Index>(t) * l + leaf);
            if (de == 0.0) continue;
            for (int d = 0; d < c; ++d) {
              const int bit = (leaf >> (c - 1 - d)) & 1;
              const double hv = h(row, static_cast<Eigen::Index>(t) * c + d);
              factors[static_cast<std::size_t>(d)] = bit == 0 ? hv : 1.0 - hv;
            }
            pre[0] = 1.0;
            for (int d = 0; d < c; ++d) {
              pre[static_cast<std::size_t>(d + 1)] =
                  pre[static_cast<std::size_t>(d)] * factors[static_cast<std::size_t>(d)];
            }
            suf[static_cast<std::size_t>(c)] = 1.0;
            for (int d = c - 1; d >= 0; --d) {
              suf[static_cast<std::size_t>(d)] =
                  suf[static_cast<std::size_t>(d + 1)] * factors[static_cast<std::size_t>(d)];
            }
            for (int d = 0; d < c; ++d) {
              const int bit = (leaf >> (c - 1 - d)) & 1;
              const double excl = pre[static_cast<std::size_t>(d)] *
                                  suf[static_cast<std::size_t>(d + 1)];
              gh(row, static_cast<Eigen::Index>(t) * c + d) +=
                  de * (bit == 0 ? excl : -excl);
            }
          }
        }
      }
      break;
    }
    case Op::kTreeResponse: {
      const Matrix& e = in_value(n, 0);
      const Matrix& w = in_value(n, 1);
      Matrix& ge = in_grad(n, 0);
      Matrix& gw = in_grad(n, 1);
      const int m = n.trees, l = n.leaves, r = n.resp;
      for (int t = 0; t < m; ++t) {
        const auto gb = g.middleCols(static_cast<Eigen::Index>(t) * r, r);
        ge.middleCols(static_cast<Eigen::Index>(t) * l, l).noalias() +=
            gb * w.middleRows(static_cast<Eigen::Index>(t) * l, l).transpose();
        gw.middleRows(static_cast<Eigen::Index>(t) * l, l).noalias() +=
            e.middleCols(static_cast<Eigen::Index>(t) * l, l).transpose() * gb;
      }
      break;
    }
    case Op::kPidMoment: {
      const Matrix& dm = in_value(n, 2);
      const Matrix& vr = n.aux[0];
      const Matrix& dr = n.aux[1];
      Matrix& gcd = in_grad(n, 0);
      Matrix& gcu = in_grad(n, 1);
      const int m = n.trees, l = n.leaves;
      const double gs = g(0, 0);
      for (int t = 0; t < m; ++t) {
        const double coef = -gs * dm(0, t) / n.keep_prob;
        if (coef == 0.0) continue;
        // Recover the smoothed totals to invert the normalization.
        double sd = 0.0, su = 0.0;
        for (int k = 0; k < l; ++k) {
          const Eigen::Index j = static_cast<Eigen::Index>(t) * l + k;
          sd += in_value(n, 0)(0, j) + n.delta;
          su += in_value(n, 1)(0, j) + n.delta;
        }
        double dv_dot_v = 0.0, dd_dot_d = 0.0;
        std::vector<double> dv(static_cast<std::size_t>(l)), dd(static_cast<std::size_t>(l));
        for (int k = 0; k < l; ++k) {
          const Eigen::Index j = static_cast<Eigen::Index>(t) * l + k;
          const double v = vr(0, j), d = dr(0, j);
          dv[static_cast<std::size_t>(k)] = coef * 2.0 * v / d;
          dd[static_cast<std::size_t>(k)] = -coef * v * v / (d * d);
          dv_dot_v += dv[static_cast<std::size_t>(k)] * v;
          dd_dot_d += dd[static_cast<std::size_t>(k)] * d;
        }
        for (int k = 0; k < l; ++k) {
          const Eigen::Index j = static_cast<Eigen::Index>(t) * l + k;
          gcu(0, j) += (dv[static_cast<std::size_t>(k)] - dv_dot_v) / su;
          gcd(0, j) += (dd[static_cast<std::size_t>(k)] - dd_dot_d) / sd;
        }
      }
      break;
    }
    case Op::kPairwiseHinge: {
      const Matrix& s = in_value(n, 0);
      Matrix& gsM = in_grad(n, 0);
      const Eigen::Index p = n.npos, total = s.rows();
      const double w = g(0, 0) / (static_cast<double>(p) *
                                  static_cast<double>(total - p));
      for (Eigen::Index i = 0; i < p; ++i) {
        for (Eigen::Index j = p; j < total; ++j) {
          // Tie-inclusive subgradient: exactly tied pairs still push apart,
          // so a fresh model with constant scores is not a stationary point.
          if (s(j, 0) - s(i, 0) >= 0.0) {
            gsM(j, 0) += w;
            gsM(i, 0) -= w;
          }
        }
      }
      break;
    }
    case Op::kBceWithLogits: {
      const Matrix& s = in_value(n, 0);
      const Matrix& y = in_value(n, 1);
      Matrix& gsM = in_grad(n, 0);
      const double w = g(0, 0) / static_cast<double>(s.rows());
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const double v = s(i, 0);
        const double sig = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                    : std::exp(v) / (1.0 + std::exp(v));
        gsM(i, 0) += w * (sig - y(i, 0));
      }
      break;
    }
  }
}

}  // namespace diad
