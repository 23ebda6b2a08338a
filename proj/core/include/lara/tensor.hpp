#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "lara/rng.hpp"

namespace lara {

namespace detail {
struct TensorNode {
  std::vector<int> shape;
  std::vector<float> data;  // row-major
  bool requires_grad = false;
};
}  // namespace detail

// Dense float32 tensor with value semantics over a shared node. Identity
// (node address) is what gradients are keyed by; copies alias the same node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value);
  static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  std::span<const float> data() const { return node_->data; }
  // In-place mutation is reserved for parameter updates between tapes;
  // mutating a tensor referenced by a live tape invalidates its gradients.
  std::span<float> mutable_data() { return node_->data; }

  float item() const;
  float operator()(int i) const { return node_->data[static_cast<size_t>(i)]; }
  float operator()(int i, int j) const {
    return node_->data[static_cast<size_t>(i) * dim(1) + j];
  }
  float operator()(int i, int j, int k) const {
    return node_->data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }

  // Value copy that drops gradient tracking.
  Tensor detach() const;

  const detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;
  friend class Tape;
};

// Reverse-mode tape. Constructing a Tape makes it the active tape for the
// current thread; primitive ops append records while active. Gradients are
// accumulated inside the tape, keyed by node identity, so parameter tensors
// can be shared read-only across concurrent tapes on different threads.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Stops recording onto this tape. Must be called on the thread that
  // constructed the tape if the tape outlives that thread's work (the
  // destructor only releases the active slot when it still owns it).
  void deactivate();

  // Walks the recorded ops in reverse order, seeding d(loss)/d(loss) = 1.
  // The recording order is a topological order by construction.
  void backward(const Tensor& loss);

  bool has_grad(const Tensor& t) const;
  Tensor grad(const Tensor& t) const;  // throws if no gradient reached t
  const std::vector<float>* grad_data(const detail::TensorNode* n) const;

  size_t op_count() const { return ops_.size(); }

  static Tape* active();

  // -- used by primitive ops --
  struct OpRecord {
    std::shared_ptr<detail::TensorNode> out;
    std::function<void(Tape&, const std::vector<float>&)> backward;  // arg: d(loss)/d(out)
  };
  void record(OpRecord rec) { ops_.push_back(std::move(rec)); }
  // Zero-initialized accumulator for a node's gradient.
  std::vector<float>& grad_buffer(const detail::TensorNode* n);

 private:
  std::vector<OpRecord> ops_;
  std::unordered_map<const detail::TensorNode*, std::vector<float>> grads_;
  Tape* prev_ = nullptr;
};

// Boolean attention mask, true = attend. Rectangular so it also serves
// cross-attention (rows = queries, cols = keys).
struct BoolMask {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> allow;

  static BoolMask all(int rows, int cols);
  bool at(int i, int j) const { return allow[static_cast<size_t>(i) * cols + j] != 0; }
  void set(int i, int j, bool v) { allow[static_cast<size_t>(i) * cols + j] = v ? 1 : 0; }
};

// ---- primitive ops ----
// Every op validates shapes, checks outputs for NaN/Inf, and registers an
// analytic backward on the active tape when an input requires gradients.

Tensor matmul(const Tensor& a, const Tensor& b);
// Elementwise add; also [m,n] + [n] row broadcast.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float c);
Tensor sum(const Tensor& a);  // -> scalar
// Row gather; serves both token-embedding lookup and hidden-state selection.
Tensor gather_rows(const Tensor& table, std::span<const int> indices);
Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps = 1e-5f);
Tensor silu(const Tensor& x);
// Scores with trailing dims [R,C] (either [R,C] or [h,R,C]); masked entries
// get probability exactly 0, each row sums to 1. A fully masked row throws.
Tensor masked_softmax(const Tensor& scores, const BoolMask& mask);
// Mean NLL over positions where loss_mask is true; throws if none are.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const uint8_t> loss_mask);
Tensor l1_loss(const Tensor& pred, const Tensor& target);
Tensor mse_loss(const Tensor& pred, const Tensor& target);
Tensor reshape(const Tensor& x, std::vector<int> new_shape);
Tensor transpose(const Tensor& x);  // 2-D
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, int start, int len);
Tensor slice_cols(const Tensor& x, int start, int len);

}  // namespace lara
