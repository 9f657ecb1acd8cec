#pragma once

#include "amg/common.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace amg {

struct TensorNode;
using TensorNodePtr = std::shared_ptr<TensorNode>;

// One tape node. `backward_fn` reads this node's grad and accumulates into the
// parents' grads; gradients add at fan-out.
struct TensorNode {
  std::vector<int> shape;
  std::vector<real> value;
  std::vector<real> grad;  // allocated lazily, same size as value
  bool requires_grad = false;  // leaf flag
  bool needs_grad = false;     // reachable from a requires_grad leaf
  std::vector<TensorNodePtr> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::int64_t size() const {
    std::int64_t s = 1;
    for (int d : shape) s *= d;
    return s;
  }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), real(0));
  }
};

// Value-semantics handle over a shared tape node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(TensorNodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, real fill, bool requires_grad = false);
  static Tensor from_values(std::vector<int> shape, std::vector<real> values,
                            bool requires_grad = false);
  static Tensor scalar(real v, bool requires_grad = false);
  // i.i.d. N(0, stddev^2) entries.
  static Tensor randn(std::vector<int> shape, real stddev, std::mt19937_64& rng,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  std::int64_t size() const { return node_->size(); }
  int rows() const { return node_->shape.at(0); }
  int cols() const { return node_->shape.at(1); }

  std::vector<real>& value() { return node_->value; }
  const std::vector<real>& value() const { return node_->value; }
  std::vector<real>& grad() { return node_->grad; }
  const std::vector<real>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }

  real at(int i) const { return node_->value.at(i); }
  real at(int i, int j) const { return node_->value.at(static_cast<size_t>(i) * cols() + j); }

  TensorNodePtr node() const { return node_; }
  void zero_grad() { node_->grad.assign(node_->value.size(), real(0)); }

 private:
  TensorNodePtr node_;
};

// --- primitives (all differentiable) ---

Tensor matmul(const Tensor& a, const Tensor& b);          // [n,k]x[k,m] -> [n,m]
Tensor matmul_bt(const Tensor& a, const Tensor& b);        // [n,k]x[m,k] -> [n,m], b used transposed
Tensor add(const Tensor& a, const Tensor& b);              // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);              // elementwise
Tensor scale(const Tensor& a, real c);
Tensor add_rowvec(const Tensor& m, const Tensor& v);       // [n,d] + [d] broadcast over rows
Tensor transpose(const Tensor& a);                         // 2-d
Tensor reshape(const Tensor& a, std::vector<int> shape);   // same element count
Tensor concat_rows(const std::vector<Tensor>& parts);      // stack along axis 0
Tensor slice_rows(const Tensor& a, int begin, int end);    // half-open row range
Tensor concat_cols(const std::vector<Tensor>& parts);      // stack along axis 1
Tensor slice_cols(const Tensor& a, int begin, int end);    // half-open column range
Tensor softmax_masked(const Tensor& logits, const Tensor& additive_mask);  // row softmax
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, real eps);
Tensor gelu(const Tensor& x);
Tensor tanh_t(const Tensor& x);
Tensor sigmoid_t(const Tensor& x);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
// Mean cross entropy over positions with position_mask != 0. Errors when no
// position is selected.
Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& labels,
                            const std::vector<std::uint8_t>& position_mask);
Tensor sum_all(const Tensor& a);
// Mean of rows [begin,end) -> [d]. Used for span averaging.
Tensor mean_rows(const Tensor& a, int begin, int end);
// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& a, real rate, std::mt19937_64& rng);

// Per position p: row = states[time(p)].row(slot(p)), or null_vec when slot < 0.
// `states` are [slot_n, d] banks, `null_vec` is [d].
struct SlotRef {
  int slot = -1;  // -1 -> null vector
  int time = 0;   // index into states
};
Tensor scatter_slot_memory(const std::vector<Tensor>& states, const Tensor& null_vec,
                           const std::vector<SlotRef>& refs);

// Reverse-mode sweep from a scalar loss; populates .grad on every
// requires_grad leaf reachable from it.
void backward(const Tensor& loss);

// --- finite-difference gradient checker ---

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool ok(double tol) const { return max_rel_err < tol; }
};

// f rebuilds the graph from the given leaves on every call and returns a
// scalar loss. Central differences, rel err = |ga-gf| / max(1e-8, |ga|+|gf|).
GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& params,
                           double eps);

}  // namespace amg
