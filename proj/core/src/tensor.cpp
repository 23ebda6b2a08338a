#include "lara/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>

namespace lara {

namespace {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

void check_finite(std::span<const float> v, const char* op) {
  for (float x : v) {
    if (!std::isfinite(x)) {
      throw std::runtime_error(std::string(op) + ": non-finite value in output");
    }
  }
}

thread_local Tape* g_active_tape = nullptr;

bool tracing(const Tensor& a) { return g_active_tape != nullptr && a.requires_grad(); }
bool tracing(const Tensor& a, const Tensor& b) {
  return g_active_tape != nullptr && (a.requires_grad() || b.requires_grad());
}

}  // namespace

// ---- Tensor ----

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto node = std::make_shared<detail::TensorNode>();
  node->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (float& x : t.node_->data) x = value;
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("Tensor::from_data: shape " + shape_str(shape) +
                                " does not match data length " + std::to_string(data.size()));
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value) { return from_data({}, {value}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (float& x : t.node_->data) x = stddev * rng.normal();
  return t;
}

float Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(numel()) +
                                " elements");
  }
  return node_->data[0];
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = node_->shape;
  node->data = node_->data;
  node->requires_grad = false;
  return Tensor(std::move(node));
}

// ---- Tape ----

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { deactivate(); }

void Tape::deactivate() {
  if (g_active_tape == this) g_active_tape = prev_;
}

Tape* Tape::active() { return g_active_tape; }

std::vector<float>& Tape::grad_buffer(const detail::TensorNode* n) {
  auto it = grads_.find(n);
  if (it == grads_.end()) {
    it = grads_.emplace(n, std::vector<float>(n->data.size(), 0.0f)).first;
  }
  return it->second;
}

const std::vector<float>* Tape::grad_data(const detail::TensorNode* n) const {
  auto it = grads_.find(n);
  return it == grads_.end() ? nullptr : &it->second;
}

bool Tape::has_grad(const Tensor& t) const { return grads_.count(t.node()) != 0; }

Tensor Tape::grad(const Tensor& t) const {
  const std::vector<float>* g = grad_data(t.node());
  if (!g) throw std::runtime_error("Tape::grad: no gradient reached this tensor");
  return Tensor::from_data(t.shape(), *g);
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("Tape::backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  }
  grad_buffer(loss.node()).assign(1, 1.0f);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    auto found = grads_.find(it->out.get());
    if (found == grads_.end()) continue;  // output did not influence the loss
    it->backward(*this, found->second);
  }
}

// ---- BoolMask ----

BoolMask BoolMask::all(int rows, int cols) {
  BoolMask m;
  m.rows = rows;
  m.cols = cols;
  m.allow.assign(static_cast<size_t>(rows) * cols, 1);
  return m;
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) {
    throw std::invalid_argument("matmul: expected 2-D tensors, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  {
    const float* A = a.data().data();
    const float* B = b.data().data();
    float* C = out.mutable_data().data();
    for (int i = 0; i < m; ++i) {
      float* crow = C + static_cast<size_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        const float av = A[static_cast<size_t>(i) * k + p];
        const float* brow = B + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  check_finite(out.data(), "matmul");

  if (tracing(a, b)) {
    out.set_requires_grad(true);
    auto an = a.node_ptr(), bn = b.node_ptr();
    Tape::active()->record({out.node_ptr(), [an, bn, m, k, n](Tape& t, const std::vector<float>& go) {
      if (an->requires_grad) {
        // dA = dC * B^T
        std::vector<float>& ga = t.grad_buffer(an.get());
        const float* B = bn->data.data();
        for (int i = 0; i < m; ++i) {
          for (int p = 0; p < k; ++p) {
            const float* brow = B + static_cast<size_t>(p) * n;
            const float* grow = go.data() + static_cast<size_t>(i) * n;
            float acc = 0.0f;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[static_cast<size_t>(i) * k + p] += acc;
          }
        }
      }
      if (bn->requires_grad) {
        // dB = A^T * dC
        std::vector<float>& gb = t.grad_buffer(bn.get());
        const float* A = an->data.data();
        for (int i = 0; i < m; ++i) {
          const float* grow = go.data() + static_cast<size_t>(i) * n;
          for (int p = 0; p < k; ++p) {
            const float av = A[static_cast<size_t>(i) * k + p];
            float* gbrow = gb.data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    }});
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool rowcast = a.ndim() == 2 && b.ndim() == 1 && a.dim(1) == b.dim(0);
  if (!rowcast && a.shape() != b.shape()) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape());
  {
    const float* A = a.data().data();
    const float* B = b.data().data();
    float* C = out.mutable_data().data();
    const size_t n = static_cast<size_t>(a.numel());
    if (rowcast) {
      const size_t cols = static_cast<size_t>(a.dim(1));
      for (size_t i = 0; i < n; ++i) C[i] = A[i] + B[i % cols];
    } else {
      for (size_t i = 0; i < n; ++i) C[i] = A[i] + B[i];
    }
  }
  check_finite(out.data(), "add");

  if (tracing(a, b)) {
    out.set_requires_grad(true);
    auto an = a.node_ptr(), bn = b.node_ptr();
    Tape::active()->record({out.node_ptr(), [an, bn, rowcast](Tape& t, const std::vector<float>& go) {
      if (an->requires_grad) {
        std::vector<float>& ga = t.grad_buffer(an.get());
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (bn->requires_grad) {
        std::vector<float>& gb = t.grad_buffer(bn.get());
        if (rowcast) {
          const size_t cols = gb.size();
          for (size_t i = 0; i < go.size(); ++i) gb[i % cols] += go[i];
        } else {
          for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
        }
      }
    }});
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < static_cast<size_t>(a.numel()); ++i) {
    out.mutable_data()[i] = a.data()[i] * b.data()[i];
  }
  check_finite(out.data(), "mul");

  if (tracing(a, b)) {
    out.set_requires_grad(true);
    auto an = a.node_ptr(), bn = b.node_ptr();
    Tape::active()->record({out.node_ptr(), [an, bn](Tape& t, const std::vector<float>& go) {
      if (an->requires_grad) {
        std::vector<float>& ga = t.grad_buffer(an.get());
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        std::vector<float>& gb = t.grad_buffer(bn.get());
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * an->data[i];
      }
    }});
  }
  return out;
}

Tensor scale(const Tensor& a, float c) {
  Tensor out = Tensor::zeros(a.shape());
  for (size_t i = 0; i < static_cast<size_t>(a.numel()); ++i) {
    out.mutable_data()[i] = a.data()[i] * c;
  }
  check_finite(out.data(), "scale");

  if (tracing(a)) {
    out.set_requires_grad(true);
    auto an = a.node_ptr();
    Tape::active()->record({out.node_ptr(), [an, c](Tape& t, const std::vector<float>& go) {
      if (!an->requires_grad) return;
      std::vector<float>& ga = t.grad_buffer(an.get());
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    }});
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float x : a.data()) acc += x;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  check_finite(out.data(), "sum");

  if (tracing(a)) {
    out.set_requires_grad(true);
    auto an = a.node_ptr();
    Tape::active()->record({out.node_ptr(), [an](Tape& t, const std::vector<float>& go) {
      if (!an->requires_grad) return;
      std::vector<float>& ga = t.grad_buffer(an.get());
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[0];
    }});
  }
  return out;
}

Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
  if (table.ndim() != 2) {
    throw std::invalid_argument("gather_rows: table must be 2-D, got " + shape_str(table.shape()));
  }
  const int rows = table.dim(0), cols = table.dim(1);
  for (int idx : indices) {
    if (idx < 0 || idx >= rows) {
      throw std::invalid_argument("gather_rows: index " + std::to_string(idx) +
                                  " out of range [0," + std::to_string(rows) + ")");
    }
  }
  Tensor out = Tensor::zeros({static_cast<int>(indices.size()), cols});
  for (size_t i = 0; i < indices.size(); ++i) {
    const float* src = table.data().data() + static_cast<size_t>(indices[i]) * cols;
    float* dst = out.mutable_data().data() + i * cols;
    for (int j = 0; j < cols; ++j) dst[j] = src[j];
  }
  check_finite(out.data(), "gather_rows");

  if (tracing(table)) {
    out.set_requires_grad(true);
    auto tn = table.node_ptr();
    std::vector<int> idx(indices.begin(), indices.end());
    Tape::active()->record({out.node_ptr(), [tn, idx, cols](Tape& t, const std::vector<float>& go) {
      if (!tn->requires_grad) return;
      std::vector<float>& gt = t.grad_buffer(tn.get());
      for (size_t i = 0; i < idx.size(); ++i) {
        float* dst = gt.data() + static_cast<size_t>(idx[i]) * cols;
        const float* src = go.data() + i * cols;
        for (int j = 0; j < cols; ++j) dst[j] += src[j];
      }
    }});
  }
  return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps) {
  if (x.ndim() < 1 || gain.ndim() != 1 || x.shape().back() != gain.dim(0)) {
    throw std::invalid_argument("rms_norm: gain " + shape_str(gain.shape()) +
                                " incompatible with input " + shape_str(x.shape()));
  }
  const int d = gain.dim(0);
  const size_t rows = static_cast<size_t>(x.numel()) / d;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<float> inv_rms(rows);
  for (size_t r = 0; r < rows; ++r) {
    const float* xr = x.data().data() + r * d;
    double ss = 0.0;
    for (int j = 0; j < d; ++j) ss += static_cast<double>(xr[j]) * xr[j];
    const float inv = 1.0f / std::sqrt(static_cast<float>(ss / d) + eps);
    inv_rms[r] = inv;
    float* yr = out.mutable_data().data() + r * d;
    for (int j = 0; j < d; ++j) yr[j] = xr[j] * inv * gain.data()[j];
  }
  check_finite(out.data(), "rms_norm");

  if (tracing(x, gain)) {
    out.set_requires_grad(true);
    auto xn = x.node_ptr(), gn = gain.node_ptr();
    Tape::active()->record({out.node_ptr(),
                            [xn, gn, inv_rms, d, rows](Tape& t, const std::vector<float>& go) {
      const float* g = gn->data.data();
      if (xn->requires_grad) {
        std::vector<float>& gx = t.grad_buffer(xn.get());
        for (size_t r = 0; r < rows; ++r) {
          const float* xr = xn->data.data() + r * d;
          const float* gor = go.data() + r * d;
          const float inv = inv_rms[r];
          double dot = 0.0;  // sum_i go_i * gain_i * x_i
          for (int j = 0; j < d; ++j) dot += static_cast<double>(gor[j]) * g[j] * xr[j];
          const float c = static_cast<float>(dot) * inv * inv * inv / d;
          float* gxr = gx.data() + r * d;
          for (int j = 0; j < d; ++j) gxr[j] += gor[j] * g[j] * inv - c * xr[j];
        }
      }
      if (gn->requires_grad) {
        std::vector<float>& gg = t.grad_buffer(gn.get());
        for (size_t r = 0; r < rows; ++r) {
          const float* xr = xn->data.data() + r * d;
          const float* gor = go.data() + r * d;
          const float inv = inv_rms[r];
          for (int j = 0; j < d; ++j) gg[j] += gor[j] * xr[j] * inv;
        }
      }
    }});
  }
  return out;
}

Tensor silu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (size_t i = 0; i < static_cast<size_t>(x.numel()); ++i) {
    const float v = x.data()[i];
    out.mutable_data()[i] = v / (1.0f + std::exp(-v));
  }
  check_finite(out.data(), "silu");

  if (tracing(x)) {
    out.set_requires_grad(true);
    auto xn = x.node_ptr();
    Tape::active()->record({out.node_ptr(), [xn](Tape& t, const std::vector<float>& go) {
      if (!xn->requires_grad) return;
      std::vector<float>& gx = t.grad_buffer(xn.get());
      for (size_t i = 0; i < go.size(); ++i) {
        const float v = xn->data[i];
        const float s = 1.0f / (1.0f + std::exp(-v));
        gx[i] += go[i] * s * (1.0f + v * (1.0f - s));
      }
    }});
  }
  return out;
}

Tensor masked_softmax(const Tensor& scores, const BoolMask& mask) {
  if (scores.ndim() < 2) {
    throw std::invalid_argument("masked_softmax: scores must have trailing [rows,cols]");
  }
  const int rows = scores.dim(scores.ndim() - 2);
  const int cols = scores.dim(scores.ndim() - 1);
  if (rows != mask.rows || cols != mask.cols) {
    throw std::invalid_argument("masked_softmax: mask " + std::to_string(mask.rows) + "x" +
                                std::to_string(mask.cols) + " does not match scores " +
                                shape_str(scores.shape()));
  }
  for (int i = 0; i < rows; ++i) {
    bool any = false;
    for (int j = 0; j < cols && !any; ++j) any = mask.at(i, j);
    if (!any) {
      throw std::runtime_error("masked_softmax: fully masked row " + std::to_string(i));
    }
  }
  const size_t planes = static_cast<size_t>(scores.numel()) / (static_cast<size_t>(rows) * cols);
  Tensor out = Tensor::zeros(scores.shape());
  for (size_t p = 0; p < planes; ++p) {
    for (int i = 0; i < rows; ++i) {
      const float* sr = scores.data().data() + (p * rows + i) * cols;
      float* pr = out.mutable_data().data() + (p * rows + i) * cols;
      float mx = -std::numeric_limits<float>::infinity();
      for (int j = 0; j < cols; ++j) {
        if (mask.at(i, j) && sr[j] > mx) mx = sr[j];
      }
      double z = 0.0;
      for (int j = 0; j < cols; ++j) {
        if (mask.at(i, j)) {
          pr[j] = std::exp(sr[j] - mx);
          z += pr[j];
        } else {
          pr[j] = 0.0f;
        }
      }
      const float inv = static_cast<float>(1.0 / z);
      for (int j = 0; j < cols; ++j) pr[j] *= inv;
    }
  }
  check_finite(out.data(), "masked_softmax");

  if (tracing(scores)) {
    out.set_requires_grad(true);
    auto sn = scores.node_ptr();
    auto on = out.node_ptr();
    Tape::active()->record({on, [sn, on, planes, rows, cols](Tape& t, const std::vector<float>& go) {
      if (!sn->requires_grad) return;
      std::vector<float>& gs = t.grad_buffer(sn.get());
      for (size_t p = 0; p < planes; ++p) {
        for (int i = 0; i < rows; ++i) {
          const size_t base = (p * rows + i) * cols;
          const float* pr = on->data.data() + base;
          const float* gr = go.data() + base;
          double dot = 0.0;
          for (int j = 0; j < cols; ++j) dot += static_cast<double>(gr[j]) * pr[j];
          for (int j = 0; j < cols; ++j) {
            gs[base + j] += pr[j] * (gr[j] - static_cast<float>(dot));
          }
        }
      }
    }});
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const uint8_t> loss_mask) {
  if (logits.ndim() != 2) {
    throw std::invalid_argument("cross_entropy: logits must be [T,V], got " +
                                shape_str(logits.shape()));
  }
  const int T = logits.dim(0), V = logits.dim(1);
  if (static_cast<int>(targets.size()) != T || static_cast<int>(loss_mask.size()) != T) {
    throw std::invalid_argument("cross_entropy: targets/mask length must equal T");
  }
  int count = 0;
  for (int i = 0; i < T; ++i) {
    if (!loss_mask[i]) continue;
    ++count;
    if (targets[i] < 0 || targets[i] >= V) {
      throw std::invalid_argument("cross_entropy: target id " + std::to_string(targets[i]) +
                                  " outside vocab of size " + std::to_string(V));
    }
  }
  if (count == 0) throw std::runtime_error("cross_entropy: no supervised positions");

  double total = 0.0;
  for (int i = 0; i < T; ++i) {
    if (!loss_mask[i]) continue;
    const float* row = logits.data().data() + static_cast<size_t>(i) * V;
    float mx = row[0];
    for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < V; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    total += std::log(z) + mx - row[targets[i]];
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / count));
  check_finite(out.data(), "cross_entropy");

  if (tracing(logits)) {
    out.set_requires_grad(true);
    auto ln = logits.node_ptr();
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<uint8_t> msk(loss_mask.begin(), loss_mask.end());
    Tape::active()->record({out.node_ptr(),
                            [ln, tgt, msk, T, V, count](Tape& t, const std::vector<float>& go) {
      if (!ln->requires_grad) return;
      std::vector<float>& gl = t.grad_buffer(ln.get());
      const float upstream = go[0] / count;
      for (int i = 0; i < T; ++i) {
        if (!msk[i]) continue;
        const float* row = ln->data.data() + static_cast<size_t>(i) * V;
        float* grow = gl.data() + static_cast<size_t>(i) * V;
        float mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < V; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        const double inv = 1.0 / z;
        for (int j = 0; j < V; ++j) {
          float p = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) * inv);
          grow[j] += upstream * (p - (j == tgt[i] ? 1.0f : 0.0f));
        }
      }
    }});
  }
  return out;
}

namespace {

Tensor mean_abs_or_sq(const Tensor& pred, const Tensor& target, bool squared, const char* op) {
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(pred.shape()) +
                                " vs " + shape_str(target.shape()));
  }
  if (target.requires_grad()) {
    throw std::invalid_argument(std::string(op) + ": target must not carry gradients");
  }
  const size_t n = static_cast<size_t>(pred.numel());
  if (n == 0) throw std::invalid_argument(std::string(op) + ": empty tensors");
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.data()[i]) - target.data()[i];
    acc += squared ? d * d : std::abs(d);
  }
  Tensor out = Tensor::scalar(static_cast<float>(acc / n));
  check_finite(out.data(), op);

  if (tracing(pred)) {
    out.set_requires_grad(true);
    auto pn = pred.node_ptr(), tn = target.node_ptr();
    Tape::active()->record({out.node_ptr(),
                            [pn, tn, n, squared](Tape& t, const std::vector<float>& go) {
      if (!pn->requires_grad) return;
      std::vector<float>& gp = t.grad_buffer(pn.get());
      const float u = go[0] / n;
      for (size_t i = 0; i < n; ++i) {
        const float d = pn->data[i] - tn->data[i];
        // |x| subgradient at 0 is 0
        gp[i] += squared ? u * 2.0f * d : u * (d > 0 ? 1.0f : (d < 0 ? -1.0f : 0.0f));
      }
    }});
  }
  return out;
}

}  // namespace

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  return mean_abs_or_sq(pred, target, /*squared=*/false, "l1_loss");
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  return mean_abs_or_sq(pred, target, /*squared=*/true, "mse_loss");
}

Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(new_shape));
  }
  Tensor out = Tensor::from_data(std::move(new_shape),
                                 std::vector<float>(x.data().begin(), x.data().end()));
  if (tracing(x)) {
    out.set_requires_grad(true);
    auto xn = x.node_ptr();
    Tape::active()->record({out.node_ptr(), [xn](Tape& t, const std::vector<float>& go) {
      if (!xn->requires_grad) return;
      std::vector<float>& gx = t.grad_buffer(xn.get());
      for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    }});
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.ndim() != 2) {
    throw std::invalid_argument("transpose: expected 2-D tensor, got " + shape_str(x.shape()));
  }
  const int m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros({n, m});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      out.mutable_data()[static_cast<size_t>(j) * m + i] = x.data()[static_cast<size_t>(i) * n + j];
    }
  }
  if (tracing(x)) {
    out.set_requires_grad(true);
    auto xn = x.node_ptr();
    Tape::active()->record({out.node_ptr(), [xn, m, n](Tape& t, const std::vector<float>& go) {
      if (!xn->requires_grad) return;
      std::vector<float>& gx = t.grad_buffer(xn.get());
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          gx[static_cast<size_t>(i) * n + j] += go[static_cast<size_t>(j) * m + i];
        }
      }
    }});
  }
  return out;
}

namespace {

Tensor concat_2d(std::span<const Tensor> parts, bool along_rows, const char* op) {
  if (parts.empty()) throw std::invalid_argument(std::string(op) + ": no parts");
  const int fixed = along_rows ? parts[0].dim(1) : parts[0].dim(0);
  int total = 0;
  bool needs_grad = false;
  for (const Tensor& p : parts) {
    if (p.ndim() != 2 || (along_rows ? p.dim(1) : p.dim(0)) != fixed) {
      throw std::invalid_argument(std::string(op) + ": incompatible part shape " +
                                  shape_str(p.shape()));
    }
    total += along_rows ? p.dim(0) : p.dim(1);
    needs_grad = needs_grad || p.requires_grad();
  }
  Tensor out = along_rows ? Tensor::zeros({total, fixed}) : Tensor::zeros({fixed, total});
  int offset = 0;
  for (const Tensor& p : parts) {
    if (along_rows) {
      const size_t count = static_cast<size_t>(p.numel());
      float* dst = out.mutable_data().data() + static_cast<size_t>(offset) * fixed;
      for (size_t i = 0; i < count; ++i) dst[i] = p.data()[i];
      offset += p.dim(0);
    } else {
      const int cols = p.dim(1);
      for (int r = 0; r < fixed; ++r) {
        float* dst = out.mutable_data().data() + static_cast<size_t>(r) * total + offset;
        const float* src = p.data().data() + static_cast<size_t>(r) * cols;
        for (int j = 0; j < cols; ++j) dst[j] = src[j];
      }
      offset += cols;
    }
  }

  if (Tape::active() && needs_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<detail::TensorNode>> nodes;
    std::vector<int> sizes;
    for (const Tensor& p : parts) {
      nodes.push_back(p.node_ptr());
      sizes.push_back(along_rows ? p.dim(0) : p.dim(1));
    }
    Tape::active()->record({out.node_ptr(),
                            [nodes, sizes, fixed, total, along_rows](Tape& t,
                                                                     const std::vector<float>& go) {
      int offset = 0;
      for (size_t k = 0; k < nodes.size(); ++k) {
        if (nodes[k]->requires_grad) {
          std::vector<float>& gp = t.grad_buffer(nodes[k].get());
          if (along_rows) {
            const float* src = go.data() + static_cast<size_t>(offset) * fixed;
            for (size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
          } else {
            for (int r = 0; r < fixed; ++r) {
              const float* src = go.data() + static_cast<size_t>(r) * total + offset;
              float* dst = gp.data() + static_cast<size_t>(r) * sizes[k];
              for (int j = 0; j < sizes[k]; ++j) dst[j] += src[j];
            }
          }
        }
        offset += sizes[k];
      }
    }});
  }
  return out;
}

Tensor slice_2d(const Tensor& x, int start, int len, bool rows, const char* op) {
  if (x.ndim() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected 2-D tensor");
  }
  const int limit = rows ? x.dim(0) : x.dim(1);
  if (start < 0 || len <= 0 || start + len > limit) {
    throw std::invalid_argument(std::string(op) + ": range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") outside 0.." +
                                std::to_string(limit));
  }
  const int m = x.dim(0), n = x.dim(1);
  Tensor out = rows ? Tensor::zeros({len, n}) : Tensor::zeros({m, len});
  if (rows) {
    const float* src = x.data().data() + static_cast<size_t>(start) * n;
    for (size_t i = 0; i < static_cast<size_t>(len) * n; ++i) out.mutable_data()[i] = src[i];
  } else {
    for (int r = 0; r < m; ++r) {
      const float* src = x.data().data() + static_cast<size_t>(r) * n + start;
      float* dst = out.mutable_data().data() + static_cast<size_t>(r) * len;
      for (int j = 0; j < len; ++j) dst[j] = src[j];
    }
  }

  if (tracing(x)) {
    out.set_requires_grad(true);
    auto xn = x.node_ptr();
    Tape::active()->record({out.node_ptr(),
                            [xn, start, len, m, n, rows](Tape& t, const std::vector<float>& go) {
      if (!xn->requires_grad) return;
      std::vector<float>& gx = t.grad_buffer(xn.get());
      if (rows) {
        float* dst = gx.data() + static_cast<size_t>(start) * n;
        for (size_t i = 0; i < go.size(); ++i) dst[i] += go[i];
      } else {
        for (int r = 0; r < m; ++r) {
          float* dst = gx.data() + static_cast<size_t>(r) * n + start;
          const float* src = go.data() + static_cast<size_t>(r) * len;
          for (int j = 0; j < len; ++j) dst[j] += src[j];
        }
      }
    }});
  }
  return out;
}

}  // namespace

Tensor concat_rows(std::span<const Tensor> parts) { return concat_2d(parts, true, "concat_rows"); }
Tensor concat_cols(std::span<const Tensor> parts) { return concat_2d(parts, false, "concat_cols"); }
Tensor slice_rows(const Tensor& x, int start, int len) {
  return slice_2d(x, start, len, true, "slice_rows");
}
Tensor slice_cols(const Tensor& x, int start, int len) {
  return slice_2d(x, start, len, false, "slice_cols");
}

}  // namespace lara
