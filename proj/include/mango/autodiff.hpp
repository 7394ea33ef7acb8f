#pragma once
// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// A Tape owns all tensors created through it. Operations record their local
// gradient rules as they run; backward() replays the record in reverse and
// accumulates d(loss)/d(param) into each bound Parameter's grad buffer.
// All reductions run in a fixed left-to-right order, so replaying the same
// tape with the same inputs is bit-identical.
//
// A Tape and its tensors are a single-owner unit: not safe for concurrent
// mutation. Parallelism belongs across independent tapes.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mango::ad {

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Persistent trainable leaf. Lives outside any tape; backward() adds into
// grad, zero_grad() resets it. Moment buffers belong to the AdamW update.
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<double> moment1;
  std::vector<double> moment2;
  int64_t step_count = 0;

  Parameter(std::string name, Shape shape);
  int64_t size() const { return static_cast<int64_t>(value.size()); }
  void zero_grad();
  void reset_optimizer_state();
};

class Tape;

// Lightweight handle to a tape node (shape + values + optional grad).
class Tensor {
 public:
  Tensor() = default;
  bool defined() const { return tape_ != nullptr; }
  const Shape& shape() const;
  int64_t size() const;
  std::span<const double> value() const;
  // Gradient of the last backward() w.r.t. this tensor. Empty if the tensor
  // does not require grad or backward has not run.
  std::span<const double> grad() const;
  double scalar() const;
  bool requires_grad() const;
  bool all_finite() const;

 private:
  friend class Tape;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  size_t size() const { return nodes_.size(); }

  // ---- leaves ----
  Tensor constant(Shape shape, std::vector<double> data);
  Tensor input(Shape shape, std::vector<double> data, bool requires_grad);
  // Copies the parameter's current value onto the tape; repeated calls with
  // the same parameter return the same node so each backward() accumulates
  // into Parameter::grad exactly once.
  Tensor leaf(Parameter& p);

  // ---- elementwise / linear algebra ----
  Tensor add(Tensor a, Tensor b);
  Tensor sub(Tensor a, Tensor b);
  Tensor mul(Tensor a, Tensor b);
  Tensor scale(Tensor a, double c);
  Tensor matmul(Tensor a, Tensor b);
  // x: [..., in], w: [in, out], bias: [out] (optional, pass {}).
  Tensor linear(Tensor x, Tensor w, Tensor bias);
  Tensor gelu(Tensor x);

  // ---- row-structured ops (rows = trailing dimension) ----
  Tensor softmax_rows(Tensor x);
  Tensor layer_norm_rows(Tensor x, Tensor gain, Tensor bias, double eps);
  // Multiplies row r of the flattened [rows, width] view by row_scale[r].
  Tensor scale_rows(Tensor x, std::vector<double> row_scale);
  // Rescales each trailing-dimension vector to L2 norm epsilon. Rows whose
  // norm is already within 1e-12 (relative) of epsilon pass through
  // unchanged, which makes the projection bit-exactly idempotent; zero rows
  // also pass through (degenerate case).
  Tensor project_rows(Tensor x, double epsilon);

  // ---- sequence ops ([batch, seq, width] layout) ----
  // Broadcast-add the first seq rows of a [rows >= seq, width] table over the
  // batch dimension.
  Tensor add_seq(Tensor x, Tensor table);
  Tensor concat_seq(Tensor a, Tensor b);
  Tensor slice_seq(Tensor x, int start, int len);
  Tensor select_seq(Tensor x, int pos);
  Tensor embedding_lookup(Tensor table, const std::vector<int>& ids, int batch,
                          int seq);

  // ---- attention ----
  // q, k: [B, S, D] with D divisible by heads; returns [B, heads, S, S]
  // scaled by 1/sqrt(D/heads).
  Tensor attention_scores(Tensor q, Tensor k, int heads);
  // Adds -1e9 to score columns whose key position is invalid.
  Tensor mask_attention_scores(Tensor scores, const std::vector<double>& key_valid);
  // probs: [B, H, S, S], v: [B, S, D]; returns [B, S, D].
  Tensor attention_context(Tensor probs, Tensor v);

  // ---- reductions / losses ----
  Tensor sum_all(Tensor x);
  Tensor mean_all(Tensor x);
  // Numerically stable mean BCE between sigmoid(logits) and targets in [0,1].
  Tensor bce_with_logits(Tensor logits, Tensor targets);
  // Mean over rows of KL(p||q) + KL(q||p); rows must sum to 1 within 1e-6,
  // entries are clamped at 1e-8 before the logs.
  Tensor symmetric_kl(Tensor p, Tensor q);

  // Populates grad for every requires-grad ancestor of loss (exactly once
  // per call) and adds leaf gradients into their Parameters.
  void backward(Tensor loss);

 private:
  friend class Tensor;
  struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::function<void(Tape&, int)> backprop;
  };

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  Tensor make(Shape shape, std::vector<double> val, bool requires_grad,
              std::function<void(Tape&, int)> backprop);
  int id_of(Tensor t, const char* op) const;

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
};

// Shared projection kernel (also used outside the tape, e.g. by PGD).
void scale_rows_to_norm(std::span<double> data, int width, double epsilon);

// Plain (non-tape) helpers used by tests and evaluation code.
std::vector<double> softmax_row(std::span<const double> logits);

}  // namespace mango::ad
