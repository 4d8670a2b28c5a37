#pragma once

// Minimal dense 2-D tensor engine with reverse-mode automatic
// differentiation. Everything is double precision and row-major. Vectors are
// [1 x d] matrices; scalars are [1 x 1].
//
// Gradients are recorded on an explicit ComputationTape: each primitive that
// produces a grad-requiring output appends one backward step, so the tape is
// topologically ordered by construction and backward() replays it in reverse.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kala/error.hpp"
#include "kala/rng.hpp"

namespace kala {

struct TensorNode {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same length as data
  bool requires_grad = false;

  std::size_t numel() const { return rows * cols; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return full(rows, cols, 0.0);
  }

  static Tensor ones(std::size_t rows, std::size_t cols) {
    return full(rows, cols, 1.0);
  }

  static Tensor full(std::size_t rows, std::size_t cols, double value) {
    auto n = std::make_shared<TensorNode>();
    n->rows = rows;
    n->cols = cols;
    n->data.assign(rows * cols, value);
    return Tensor(std::move(n));
  }

  static Tensor from_values(std::size_t rows, std::size_t cols,
                            std::vector<double> values) {
    if (values.size() != rows * cols)
      throw ShapeError("from_values: data length does not match shape");
    auto n = std::make_shared<TensorNode>();
    n->rows = rows;
    n->cols = cols;
    n->data = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor randn(std::size_t rows, std::size_t cols, Rng& rng,
                      double stddev = 1.0) {
    auto n = std::make_shared<TensorNode>();
    n->rows = rows;
    n->cols = cols;
    n->data.resize(rows * cols);
    for (double& v : n->data) v = rng.normal(0.0, stddev);
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t numel() const { return node_->numel(); }

  double at(std::size_t r, std::size_t c) const {
    return node_->data[r * node_->cols + c];
  }
  double& at(std::size_t r, std::size_t c) {
    return node_->data[r * node_->cols + c];
  }

  double item() const {
    if (numel() != 1) throw ContractError("item() requires a scalar tensor");
    return node_->data[0];
  }

  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& grad() const { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v = true) {
    node_->requires_grad = v;
    if (v) node_->ensure_grad();
    return *this;
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Ordered record of backward steps. Ops append themselves as they execute, so
// inputs always precede consumers.
class ComputationTape {
 public:
  void record(std::function<void()> backward_step) {
    steps_.push_back(std::move(backward_step));
  }

  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

  // Replays adjoints in reverse topological order.
  void replay_backward() const {
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> steps_;
};

inline ComputationTape*& active_tape() {
  thread_local ComputationTape* tape = nullptr;
  return tape;
}

// RAII scope that makes `tape` record all grad-requiring primitives.
class TapeScope {
 public:
  explicit TapeScope(ComputationTape& tape) : prev_(active_tape()) {
    active_tape() = &tape;
  }
  ~TapeScope() { active_tape() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  ComputationTape* prev_;
};

namespace detail {

inline bool track(const Tensor& t) { return t.requires_grad(); }

inline Tensor make_output(std::size_t rows, std::size_t cols, bool requires_grad) {
  Tensor out = Tensor::zeros(rows, cols);
  if (requires_grad && active_tape() != nullptr) out.set_requires_grad(true);
  return out;
}

inline bool recording(const Tensor& out) {
  return out.requires_grad() && active_tape() != nullptr;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch");
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = detail::make_output(a.rows(), a.cols(),
                                   detail::track(a) || detail::track(b));
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data()[i] = a.data()[i] + b.data()[i];
  if (detail::recording(out)) {
    auto an = a.node(), bn = b.node(), on = out.node();
    active_tape()->record([an, bn, on] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = detail::make_output(a.rows(), a.cols(),
                                   detail::track(a) || detail::track(b));
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data()[i] = a.data()[i] - b.data()[i];
  if (detail::recording(out)) {
    auto an = a.node(), bn = b.node(), on = out.node();
    active_tape()->record([an, bn, on] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
      }
    });
  }
  return out;
}

// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = detail::make_output(a.rows(), a.cols(),
                                   detail::track(a) || detail::track(b));
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::recording(out)) {
    auto an = a.node(), bn = b.node(), on = out.node();
    active_tape()->record([an, bn, on] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = detail::make_output(a.rows(), a.cols(), detail::track(a));
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * c;
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    active_tape()->record([an, on, c] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    });
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = detail::make_output(a.rows(), a.cols(), detail::track(a));
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + c;
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    active_tape()->record([an, on] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

// x [n x d] + b broadcast over rows, b is [1 x d].
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  if (b.rows() != 1 || b.cols() != x.cols())
    throw ShapeError("add_rowvec: bias must be [1 x cols(x)]");
  Tensor out = detail::make_output(x.rows(), x.cols(),
                                   detail::track(x) || detail::track(b));
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c)
      out.at(r, c) = x.at(r, c) + b.at(0, c);
  if (detail::recording(out)) {
    auto xn = x.node(), bn = b.node(), on = out.node();
    active_tape()->record([xn, bn, on] {
      const std::size_t rows = on->rows, cols = on->cols;
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c)
            bn->grad[c] += on->grad[r * cols + c];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix primitives
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner extents do not match (" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + ")");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = detail::make_output(m, n, detail::track(a) || detail::track(b));
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  double* od = out.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bd + p * n;
      double* orow = od + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  if (detail::recording(out)) {
    auto an = a.node(), bn = b.node(), on = out.node();
    active_tape()->record([an, bn, on, m, k, n] {
      const double* g = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        // dA = dOut * B^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* grow = g + i * n;
            const double* brow = bn->data.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            an->grad[i * k + p] += acc;
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // dB = A^T * dOut
        for (std::size_t i = 0; i < m; ++i) {
          const double* arow = an->data.data() + i * k;
          const double* grow = g + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* brow = bn->grad.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  Tensor out = detail::make_output(a.cols(), a.rows(), detail::track(a));
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out.at(c, r) = a.at(r, c);
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    active_tape()->record([an, on] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t r = 0; r < on->rows; ++r)
        for (std::size_t c = 0; c < on->cols; ++c)
          an->grad[c * on->rows + r] += on->grad[r * on->cols + c];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& a) {
  Tensor out = detail::make_output(a.rows(), a.cols(), detail::track(a));
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    active_tape()->record([an, on] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        if (an->data[i] > 0.0) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

inline Tensor leaky_relu(const Tensor& a, double slope = 0.2) {
  Tensor out = detail::make_output(a.rows(), a.cols(), detail::track(a));
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : slope * a.data()[i];
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    active_tape()->record([an, on, slope] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += on->grad[i] * (an->data[i] > 0.0 ? 1.0 : slope);
    });
  }
  return out;
}

// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& a) {
  Tensor out = detail::make_output(a.rows(), a.cols(), detail::track(a));
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double x = a.data()[i];
    out.data()[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    active_tape()->record([an, on] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      constexpr double inv_sqrt2pi = 0.3989422804014326779;
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const double x = an->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        an->grad[i] += on->grad[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

// Row-wise layer normalization followed by the affine gain/bias transform.
// gain and bias are [1 x d].
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  const std::size_t n = x.rows(), d = x.cols();
  if (d < 1) throw ShapeError("layer_norm: d must be >= 1");
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
    throw ShapeError("layer_norm: gain/bias must be [1 x d]");
  Tensor out = detail::make_output(
      n, d, detail::track(x) || detail::track(gain) || detail::track(bias));
  std::vector<double> means(n), inv_stds(n);
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += x.at(r, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double delta = x.at(r, c) - mean;
      var += delta * delta;
    }
    var /= static_cast<double>(d);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    means[r] = mean;
    inv_stds[r] = inv_std;
    for (std::size_t c = 0; c < d; ++c)
      out.at(r, c) = (x.at(r, c) - mean) * inv_std * gain.at(0, c) + bias.at(0, c);
  }
  if (detail::recording(out)) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    active_tape()->record([xn, gn, bn, on, means, inv_stds, n, d] {
      for (std::size_t r = 0; r < n; ++r) {
        const double inv_std = inv_stds[r];
        const double mean = means[r];
        // x_hat = (x - mean) * inv_std
        if (gn->requires_grad || bn->requires_grad) {
          if (gn->requires_grad) gn->ensure_grad();
          if (bn->requires_grad) bn->ensure_grad();
          for (std::size_t c = 0; c < d; ++c) {
            const double go = on->grad[r * d + c];
            const double xhat = (xn->data[r * d + c] - mean) * inv_std;
            if (gn->requires_grad) gn->grad[c] += go * xhat;
            if (bn->requires_grad) bn->grad[c] += go;
          }
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          double sum_gy = 0.0, sum_gy_xhat = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double gy = on->grad[r * d + c] * gn->data[c];
            const double xhat = (xn->data[r * d + c] - mean) * inv_std;
            sum_gy += gy;
            sum_gy_xhat += gy * xhat;
          }
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c) {
            const double gy = on->grad[r * d + c] * gn->data[c];
            const double xhat = (xn->data[r * d + c] - mean) * inv_std;
            xn->grad[r * d + c] +=
                inv_std * (gy - inv_d * sum_gy - xhat * inv_d * sum_gy_xhat);
          }
        }
      }
    });
  }
  return out;
}

// Row-wise softmax. When a mask is supplied (row-major, same shape, nonzero =
// keep), masked entries are exactly 0 and excluded from the denominator. A
// fully masked row is an error.
inline Tensor softmax_rows(const Tensor& x,
                           const std::vector<std::uint8_t>* mask = nullptr) {
  const std::size_t n = x.rows(), k = x.cols();
  if (mask != nullptr && mask->size() != n * k)
    throw ShapeError("softmax_rows: mask shape mismatch");
  Tensor out = detail::make_output(n, k, detail::track(x));
  for (std::size_t r = 0; r < n; ++r) {
    double max_v = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < k; ++c) {
      if (mask != nullptr && (*mask)[r * k + c] == 0) continue;
      any = true;
      max_v = std::max(max_v, x.at(r, c));
    }
    if (!any) throw DegenerateError("softmax_rows: fully masked row " + std::to_string(r));
    double denom = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (mask != nullptr && (*mask)[r * k + c] == 0) continue;
      denom += std::exp(x.at(r, c) - max_v);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (mask != nullptr && (*mask)[r * k + c] == 0) {
        out.at(r, c) = 0.0;
      } else {
        out.at(r, c) = std::exp(x.at(r, c) - max_v) / denom;
      }
    }
  }
  if (detail::recording(out)) {
    auto xn = x.node(), on = out.node();
    std::vector<std::uint8_t> mask_copy;
    if (mask != nullptr) mask_copy = *mask;
    active_tape()->record([xn, on, mask_copy, n, k] {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t r = 0; r < n; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < k; ++c)
          dot += on->grad[r * k + c] * on->data[r * k + c];
        for (std::size_t c = 0; c < k; ++c) {
          if (!mask_copy.empty() && mask_copy[r * k + c] == 0) continue;
          xn->grad[r * k + c] +=
              on->data[r * k + c] * (on->grad[r * k + c] - dot);
        }
      }
    });
  }
  return out;
}

// Row-wise log-softmax; numerically stable companion for cross-entropy.
inline Tensor log_softmax_rows(const Tensor& x) {
  const std::size_t n = x.rows(), k = x.cols();
  Tensor out = detail::make_output(n, k, detail::track(x));
  for (std::size_t r = 0; r < n; ++r) {
    double max_v = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) max_v = std::max(max_v, x.at(r, c));
    double denom = 0.0;
    for (std::size_t c = 0; c < k; ++c) denom += std::exp(x.at(r, c) - max_v);
    const double log_denom = std::log(denom) + max_v;
    for (std::size_t c = 0; c < k; ++c) out.at(r, c) = x.at(r, c) - log_denom;
  }
  if (detail::recording(out)) {
    auto xn = x.node(), on = out.node();
    active_tape()->record([xn, on, n, k] {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t r = 0; r < n; ++r) {
        double sum_g = 0.0;
        for (std::size_t c = 0; c < k; ++c) sum_g += on->grad[r * k + c];
        for (std::size_t c = 0; c < k; ++c)
          xn->grad[r * k + c] +=
              on->grad[r * k + c] - std::exp(on->data[r * k + c]) * sum_g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions, selection, assembly
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  Tensor out = detail::make_output(1, 1, detail::track(a));
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out.data()[0] = acc;
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    active_tape()->record([an, on] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (double& g : an->grad) g += on->grad[0];
    });
  }
  return out;
}

// Sum of the selected (row, col) entries, as a scalar.
inline Tensor pick_sum(const Tensor& a,
                       const std::vector<std::pair<std::size_t, std::size_t>>& idx) {
  for (const auto& [r, c] : idx)
    if (r >= a.rows() || c >= a.cols())
      throw ContractError("pick_sum: index out of range");
  Tensor out = detail::make_output(1, 1, detail::track(a));
  double acc = 0.0;
  for (const auto& [r, c] : idx) acc += a.at(r, c);
  out.data()[0] = acc;
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    auto idx_copy = idx;
    active_tape()->record([an, on, idx_copy] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (const auto& [r, c] : idx_copy)
        an->grad[r * an->cols + c] += on->grad[0];
    });
  }
  return out;
}

// Mean of rows [r0, r1) as a [1 x d] tensor.
inline Tensor mean_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  if (r0 >= r1 || r1 > a.rows()) throw ContractError("mean_rows: bad row range");
  const std::size_t d = a.cols();
  Tensor out = detail::make_output(1, d, detail::track(a));
  const double inv = 1.0 / static_cast<double>(r1 - r0);
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = 0; c < d; ++c) out.at(0, c) += a.at(r, c) * inv;
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    active_tape()->record([an, on, r0, r1, d, inv] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = 0; c < d; ++c)
          an->grad[r * d + c] += on->grad[c] * inv;
    });
  }
  return out;
}

// Gathers rows of `table` by index; backward scatter-adds into the table.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& indices) {
  for (std::size_t i : indices)
    if (i >= table.rows()) throw LookupError("gather_rows: row index out of range");
  const std::size_t d = table.cols();
  Tensor out = detail::make_output(indices.size(), d, detail::track(table));
  for (std::size_t r = 0; r < indices.size(); ++r)
    for (std::size_t c = 0; c < d; ++c) out.at(r, c) = table.at(indices[r], c);
  if (detail::recording(out)) {
    auto tn = table.node(), on = out.node();
    auto idx = indices;
    active_tape()->record([tn, on, idx, d] {
      if (!tn->requires_grad) return;
      tn->ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < d; ++c)
          tn->grad[idx[r] * d + c] += on->grad[r * d + c];
    });
  }
  return out;
}

// Column slice [c0, c1) with gradient, used for multi-head splits.
inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (c0 >= c1 || c1 > a.cols()) throw ShapeError("slice_cols: bad column range");
  const std::size_t n = a.rows(), w = c1 - c0;
  Tensor out = detail::make_output(n, w, detail::track(a));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < w; ++c) out.at(r, c) = a.at(r, c0 + c);
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    active_tape()->record([an, on, c0, w, n] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < w; ++c)
          an->grad[r * an->cols + c0 + c] += on->grad[r * w + c];
    });
  }
  return out;
}

// Horizontal concatenation of same-row-count blocks.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t total = 0;
  bool track = false;
  for (const Tensor& p : parts) {
    if (p.rows() != n) throw ShapeError("concat_cols: row count mismatch");
    total += p.cols();
    track = track || detail::track(p);
  }
  Tensor out = detail::make_output(n, total, track);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) out.at(r, off + c) = p.at(r, c);
    off += p.cols();
  }
  if (detail::recording(out)) {
    std::vector<std::shared_ptr<TensorNode>> pn;
    pn.reserve(parts.size());
    for (const Tensor& p : parts) pn.push_back(p.node());
    auto on = out.node();
    active_tape()->record([pn, on, n, total] {
      std::size_t off = 0;
      for (const auto& p : pn) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < p->cols; ++c)
              p->grad[r * p->cols + c] += on->grad[r * total + off + c];
        }
        off += p->cols;
      }
    });
  }
  return out;
}

// Builds an [n x d] matrix filled with `fill`, with the given [1 x d] rows
// written at the given positions. The same row tensor may back several
// positions; its gradient accumulates across all of them.
inline Tensor compose_rows(std::size_t n, std::size_t d, double fill,
                           const std::vector<std::pair<std::size_t, Tensor>>& entries) {
  bool track = false;
  for (const auto& [pos, row] : entries) {
    if (pos >= n) throw AnnotationError("compose_rows: position out of range");
    if (row.rows() != 1 || row.cols() != d)
      throw ShapeError("compose_rows: entry rows must be [1 x d]");
    track = track || detail::track(row);
  }
  Tensor out = detail::make_output(n, d, track);
  std::fill(out.data().begin(), out.data().end(), fill);
  for (const auto& [pos, row] : entries)
    for (std::size_t c = 0; c < d; ++c) out.at(pos, c) = row.at(0, c);
  if (detail::recording(out)) {
    std::vector<std::pair<std::size_t, std::shared_ptr<TensorNode>>> en;
    en.reserve(entries.size());
    for (const auto& [pos, row] : entries) en.emplace_back(pos, row.node());
    auto on = out.node();
    active_tape()->record([en, on, d] {
      for (const auto& [pos, row] : en) {
        if (!row->requires_grad) continue;
        row->ensure_grad();
        for (std::size_t c = 0; c < d; ++c)
          row->grad[c] += on->grad[pos * d + c];
      }
    });
  }
  return out;
}

// Vertical stack of [1 x d] rows.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ContractError("stack_rows: no inputs");
  const std::size_t d = rows[0].cols();
  std::vector<std::pair<std::size_t, Tensor>> entries;
  entries.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) entries.emplace_back(i, rows[i]);
  return compose_rows(rows.size(), d, 0.0, entries);
}

// Inverted dropout; identity when `training` is false.
inline Tensor dropout(const Tensor& a, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return a;
  if (p >= 1.0) throw ContractError("dropout: p must be < 1");
  Tensor out = detail::make_output(a.rows(), a.cols(), detail::track(a));
  std::vector<double> keep(a.numel());
  const double inv_keep = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    keep[i] = rng.bernoulli(p) ? 0.0 : inv_keep;
    out.data()[i] = a.data()[i] * keep[i];
  }
  if (detail::recording(out)) {
    auto an = a.node(), on = out.node();
    active_tape()->record([an, on, keep] {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += on->grad[i] * keep[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Accumulates adjoints into the grad field of every grad-requiring tensor
// reachable from `loss` through the given tape.
inline void backward(const Tensor& loss, ComputationTape& tape) {
  if (loss.numel() != 1) throw ContractError("backward: loss must be scalar");
  if (!loss.requires_grad())
    throw ContractError("backward: loss does not require grad");
  auto ln = loss.node();
  ln->ensure_grad();
  ln->grad[0] += 1.0;
  tape.replay_backward();
}

}  // namespace kala
