#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "sst/common.hpp"

namespace sst::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Named parameter with a persistent gradient buffer.
struct Tensor {
  std::string name;
  Mat value;
  Mat grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(); }
};

// Owns parameters in creation order; order is the serialization and the
// optimizer-update order, so it must be deterministic.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Mat value, bool trainable = true);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::vector<Tensor*>& all() { return order_; }
  const std::vector<Tensor*>& all() const { return order_; }
  void zero_grad();
  size_t parameter_count() const;

 private:
  std::vector<Tensor*> order_;
  std::unordered_map<std::string, std::unique_ptr<Tensor>> by_name_;
};

// Spans of rows in a matrix that concatenates variable-length sequences.
struct Ragged {
  std::vector<int> offsets;  // size n+1, offsets[0] == 0
  int count() const { return static_cast<int>(offsets.size()) - 1; }
  int begin(int i) const { return offsets[i]; }
  int length(int i) const { return offsets[i + 1] - offsets[i]; }
  int total() const { return offsets.back(); }
  static Ragged of_lengths(const std::vector<int>& lengths);
};

struct Node {
  Mat value;
  Mat grad;
  bool needs_grad = false;
  bool grad_live = false;       // grad allocated and zeroed this backward pass
  Tensor* param = nullptr;      // leaves accumulate into param->grad
  std::function<void(Node&)> backprop;
};

// Dynamic tape: creation order is a topological order; backward walks it in
// reverse. One Graph per forward pass; nodes are owned by the graph.
// Constructing with grads=false skips closure creation for inference.
class Graph {
 public:
  explicit Graph(bool grads = true) : grads_enabled_(grads) {}

  Node* param(Tensor& t);
  Node* frozen_param(Tensor& t);  // value visible, gradients never flow
  Node* input(Mat v);

  Node* matmul(Node* a, Node* b);
  Node* add(Node* a, Node* b);
  Node* sub(Node* a, Node* b);
  Node* add_rowvec(Node* a, Node* row);  // row: 1 x C broadcast over rows
  Node* hadamard(Node* a, Node* b);
  Node* scale(Node* a, double s);
  Node* relu(Node* a);
  Node* transpose(Node* a);

  Node* gather_rows(Node* table, std::vector<int> ids);
  Node* concat_rows(const std::vector<Node*>& parts);
  Node* concat_cols(const std::vector<Node*>& parts);
  Node* slice_rows(Node* a, int start, int count);

  Node* layer_norm(Node* x, Node* gamma, Node* beta, double eps = 1e-5);
  Node* softmax_rows(Node* x);
  Node* log_softmax_rows(Node* x);
  // Sum over rows of -logp[i, targets[i]], optionally weighted per row.
  Node* nll_rows(Node* logp, std::vector<int> targets,
                 std::vector<double> row_weights = {});
  Node* sum_all(Node* a);
  Node* add_scalars(Node* a, Node* b);
  Node* scale_add(Node* a, double sa, Node* b, double sb);  // sa*a + sb*b

  Node* dropout(Node* a, double p, std::mt19937_64& rng);
  Node* im2col(Node* x, int width);    // rows: T-w+1, cols: w*C
  Node* max_over_rows(Node* x);        // 1 x C column-wise max

  // Multi-head scaled-dot-product attention over per-sequence blocks of the
  // concatenated Q and K/V matrices. q_spans and kv_spans must have the same
  // count; causal restricts block row j to columns <= j (square blocks only).
  Node* attention(Node* q, Node* k, Node* v, const Ragged& q_spans,
                  const Ragged& kv_spans, int heads, bool causal);

  // One decode step for a batch of sequences: q is B x C (one row each), and
  // keys/values grow step by step as lists of B x C nodes. Row b attends to
  // steps 0..len[b]-1 of its own stream.
  Node* incremental_attention(Node* q, std::vector<Node*> key_steps,
                              std::vector<Node*> value_steps, int heads,
                              std::vector<int> lengths);

  // Decode-time cross attention: q is B x C with B == kv_spans.count();
  // row b attends to block b of the concatenated key/value matrices.
  Node* cross_attention_rows(Node* q, Node* k, Node* v, const Ragged& kv_spans,
                             int heads);

  void backward(Node* loss);

  size_t size() const { return nodes_.size(); }

 private:
  Node* make(Mat value, bool needs_grad);
  bool grads_enabled_ = true;
  std::deque<Node> nodes_;
};

// Parameter leaves alias the tensor's storage instead of copying it.
inline const Mat& node_value(const Node* n) { return n->param ? n->param->value : n->value; }

// Central-difference gradient of a scalar function with respect to t.value.
Mat finite_difference(Tensor& t, const std::function<double()>& eval, double h = 1e-5);

double grad_check_max_rel_err(ParamStore& params, const std::function<double()>& loss_fn,
                              const std::function<void()>& backward_fn, double h = 1e-5);

}  // namespace sst::nn
