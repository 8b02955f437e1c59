#pragma once

// Dense numeric core: row-major matrices, affine layers with explicit
// backward passes, softmax cross-entropy, Adam and a finite-difference
// gradient estimator used as a test oracle.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__AVX512F__) || defined(__AVX2__)
#include <immintrin.h>
#endif

namespace terrain_pn {

class DimensionError : public std::invalid_argument {
 public:
  DimensionError(const std::string& what, std::size_t expected, std::size_t actual)
      : std::invalid_argument(what + ": expected " + std::to_string(expected) + ", got " +
                              std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}

  std::size_t expected() const noexcept { return expected_; }
  std::size_t actual() const noexcept { return actual_; }

 private:
  std::size_t expected_;
  std::size_t actual_;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

/// Dense row-major matrix of doubles.
class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw DimensionError("Tensor2D data length", rows_ * cols_, data_.size());
  }
  Tensor2D(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("Tensor2D ragged initializer", cols_, r.size());
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  friend bool operator==(const Tensor2D&, const Tensor2D&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// y = x W + b, with W stored in x out.
struct LinearLayer {
  Tensor2D weights;
  std::vector<double> bias;

  LinearLayer() = default;
  LinearLayer(std::size_t in, std::size_t out) : weights(in, out), bias(out, 0.0) {}
  LinearLayer(Tensor2D w, std::vector<double> b) : weights(std::move(w)), bias(std::move(b)) {
    if (bias.size() != weights.cols()) throw DimensionError("LinearLayer bias length", weights.cols(), bias.size());
  }

  std::size_t in() const noexcept { return weights.rows(); }
  std::size_t out() const noexcept { return weights.cols(); }
  std::size_t param_count() const noexcept { return weights.size() + bias.size(); }

  friend bool operator==(const LinearLayer&, const LinearLayer&) = default;
};

namespace kernel {

#if defined(__AVX512F__)
inline constexpr std::size_t kSimdWidth = 8;
inline constexpr std::size_t kBlockRows = 12;
inline constexpr std::size_t kBlockVecs = 2;
#elif defined(__AVX2__) && defined(__FMA__)
inline constexpr std::size_t kSimdWidth = 4;
inline constexpr std::size_t kBlockRows = 6;
inline constexpr std::size_t kBlockVecs = 2;
#else
inline constexpr std::size_t kSimdWidth = 0;
inline constexpr std::size_t kBlockRows = 0;
inline constexpr std::size_t kBlockVecs = 0;
#endif

#if defined(__AVX512F__) || (defined(__AVX2__) && defined(__FMA__))
// Register-blocked tile of kBlockRows x (kBlockVecs * kSimdWidth) outputs.
inline void affine_tile(const double* x, std::size_t in, const double* w, const double* b, std::size_t out,
                        double* y, bool relu) {
#if defined(__AVX512F__)
  using vec = __m512d;
  auto load = [](const double* p) { return _mm512_loadu_pd(p); };
  auto store = [](double* p, vec v) { _mm512_storeu_pd(p, v); };
  auto splat = [](double v) { return _mm512_set1_pd(v); };
  auto fmadd = [](vec a, vec b, vec c) { return _mm512_fmadd_pd(a, b, c); };
  auto vmax = [](vec a, vec b) { return _mm512_max_pd(a, b); };
  const vec zero = _mm512_setzero_pd();
#else
  using vec = __m256d;
  auto load = [](const double* p) { return _mm256_loadu_pd(p); };
  auto store = [](double* p, vec v) { _mm256_storeu_pd(p, v); };
  auto splat = [](double v) { return _mm256_set1_pd(v); };
  auto fmadd = [](vec a, vec b, vec c) { return _mm256_fmadd_pd(a, b, c); };
  auto vmax = [](vec a, vec b) { return _mm256_max_pd(a, b); };
  const vec zero = _mm256_setzero_pd();
#endif
  vec acc[kBlockRows][kBlockVecs];
  for (std::size_t c = 0; c < kBlockVecs; ++c) {
    const vec bias = load(b + c * kSimdWidth);
    for (std::size_t r = 0; r < kBlockRows; ++r) acc[r][c] = bias;
  }
  for (std::size_t k = 0; k < in; ++k) {
    vec wk[kBlockVecs];
    for (std::size_t c = 0; c < kBlockVecs; ++c) wk[c] = load(w + k * out + c * kSimdWidth);
    for (std::size_t r = 0; r < kBlockRows; ++r) {
      const vec a = splat(x[r * in + k]);
      for (std::size_t c = 0; c < kBlockVecs; ++c) acc[r][c] = fmadd(a, wk[c], acc[r][c]);
    }
  }
  for (std::size_t r = 0; r < kBlockRows; ++r)
    for (std::size_t c = 0; c < kBlockVecs; ++c) {
      // max_pd(v, 0) returns 0 for NaN and -0.0, matching the scalar path.
      store(y + r * out + c * kSimdWidth, relu ? vmax(acc[r][c], zero) : acc[r][c]);
    }
}
#endif

// Every output element is computed as the same fused multiply-add chain
//   acc = b[j]; for k ascending: acc = fma(x[k], w[k][j], acc)
// regardless of the row's position, the tile it falls in, or the number of
// rows. Per-point features are therefore bitwise independent of cloud size
// and point order, which the max-pool identities rely on.
inline void affine_rows(const double* x, std::size_t rows, std::size_t in, const double* w,
                        const double* b, std::size_t out, double* y, bool relu) {
  auto finish = [relu](double v) { return relu ? (v > 0.0 ? v : 0.0) : v; };

  auto scalar_block = [&](std::size_t r_begin, std::size_t r_end, std::size_t j_begin) {
    for (std::size_t r = r_begin; r < r_end; ++r) {
      const double* xr = x + r * in;
      double* yr = y + r * out;
      for (std::size_t j = j_begin; j < out; ++j) yr[j] = b[j];
      for (std::size_t k = 0; k < in; ++k) {
        const double a = xr[k];
        const double* wk = w + k * out;
        for (std::size_t j = j_begin; j < out; ++j) yr[j] = std::fma(a, wk[j], yr[j]);
      }
      for (std::size_t j = j_begin; j < out; ++j) yr[j] = finish(yr[j]);
    }
  };

  std::size_t r0 = 0;
#if defined(__AVX512F__) || (defined(__AVX2__) && defined(__FMA__))
  constexpr std::size_t kTileCols = kBlockVecs * kSimdWidth;
  const std::size_t vec_cols = out - out % kTileCols;
  if (vec_cols > 0) {
    for (; r0 + kBlockRows <= rows; r0 += kBlockRows) {
      for (std::size_t j0 = 0; j0 < vec_cols; j0 += kTileCols)
        affine_tile(x + r0 * in, in, w + j0, b + j0, out, y + r0 * out + j0, relu);
      if (vec_cols < out) scalar_block(r0, r0 + kBlockRows, vec_cols);
    }
  }
#endif
  scalar_block(r0, rows, 0);
}

/// grad_in[r] = grad_out[r] W^T
inline void backprop_input(const double* grad_out, std::size_t rows, std::size_t out, const double* w,
                           std::size_t in, double* grad_in) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* g = grad_out + r * out;
    double* gi = grad_in + r * in;
    for (std::size_t k = 0; k < in; ++k) {
      const double* wk = w + k * out;
      double acc = 0.0;
      for (std::size_t j = 0; j < out; ++j) acc = std::fma(g[j], wk[j], acc);
      gi[k] = acc;
    }
  }
}

/// dW += x^T grad_out; db += column sums of grad_out.
inline void accumulate_weight_grad(const double* x, std::size_t rows, std::size_t in,
                                   const double* grad_out, std::size_t out, double* dw, double* db) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * in;
    const double* g = grad_out + r * out;
    for (std::size_t k = 0; k < in; ++k) {
      const double a = xr[k];
      if (a == 0.0) continue;
      double* dwk = dw + k * out;
      for (std::size_t j = 0; j < out; ++j) dwk[j] = std::fma(a, g[j], dwk[j]);
    }
    for (std::size_t j = 0; j < out; ++j) db[j] += g[j];
  }
}

}  // namespace kernel

inline Tensor2D linear_forward(const Tensor2D& x, const LinearLayer& layer) {
  if (x.cols() != layer.in()) throw DimensionError("linear_forward input columns", layer.in(), x.cols());
  Tensor2D y(x.rows(), layer.out());
  kernel::affine_rows(x.data(), x.rows(), x.cols(), layer.weights.data(), layer.bias.data(), layer.out(),
                      y.data(), false);
  return y;
}

/// Gradient buffers with the same shapes as a LinearLayer.
struct LinearGrad {
  Tensor2D weights;
  std::vector<double> bias;

  LinearGrad() = default;
  explicit LinearGrad(const LinearLayer& like) : weights(like.in(), like.out()), bias(like.out(), 0.0) {}
};

/// Accumulates parameter gradients into `grad` and returns dL/dx.
inline Tensor2D linear_backward(const Tensor2D& x, const LinearLayer& layer, const Tensor2D& grad_out,
                                LinearGrad& grad) {
  if (x.cols() != layer.in()) throw DimensionError("linear_backward input columns", layer.in(), x.cols());
  if (grad_out.rows() != x.rows()) throw DimensionError("linear_backward gradient rows", x.rows(), grad_out.rows());
  if (grad_out.cols() != layer.out())
    throw DimensionError("linear_backward gradient columns", layer.out(), grad_out.cols());
  if (grad.weights.rows() != layer.in() || grad.weights.cols() != layer.out())
    throw DimensionError("linear_backward gradient buffer", layer.weights.size(), grad.weights.size());
  kernel::accumulate_weight_grad(x.data(), x.rows(), x.cols(), grad_out.data(), grad_out.cols(),
                                 grad.weights.data(), grad.bias.data());
  Tensor2D grad_in(x.rows(), x.cols());
  kernel::backprop_input(grad_out.data(), grad_out.rows(), grad_out.cols(), layer.weights.data(), layer.in(),
                         grad_in.data());
  return grad_in;
}

inline Tensor2D relu(const Tensor2D& x) {
  Tensor2D y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

/// Passes the upstream gradient where the forward input was strictly positive.
inline Tensor2D relu_backward(const Tensor2D& x, const Tensor2D& grad_out) {
  if (x.rows() != grad_out.rows() || x.cols() != grad_out.cols())
    throw DimensionError("relu_backward shape", x.size(), grad_out.size());
  Tensor2D g(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) g.values()[i] = x.values()[i] > 0.0 ? grad_out.values()[i] : 0.0;
  return g;
}

struct LossAndGrad {
  double loss = 0.0;
  Tensor2D grad;
};

/// Mean cross-entropy of softmax(logits) against class indices, with dL/dlogits.
inline LossAndGrad softmax_cross_entropy(const Tensor2D& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) throw DimensionError("softmax_cross_entropy labels", logits.rows(), labels.size());
  const std::size_t batch = logits.rows();
  const std::size_t k = logits.cols();
  LossAndGrad out{0.0, Tensor2D(batch, k)};
  if (batch == 0) return out;
  const double inv_batch = 1.0 / static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= k)
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                              std::to_string(k) + ")");
    const auto row = logits.row(b);
    const double peak = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double v : row) total += std::exp(v - peak);
    const double log_total = std::log(total);
    out.loss += -(row[static_cast<std::size_t>(label)] - peak - log_total);
    auto g = out.grad.row(b);
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(row[j] - peak - log_total);
      g[j] = (p - (j == static_cast<std::size_t>(label) ? 1.0 : 0.0)) * inv_batch;
    }
  }
  out.loss *= inv_batch;
  return out;
}

struct AdamState {
  std::int64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  AdamState() = default;
  explicit AdamState(std::size_t param_count, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
      : m(param_count, 0.0), v(param_count, 0.0), beta1(b1), beta2(b2), epsilon(eps) {}

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One bias-corrected Adam update. Parameters and state are left untouched
/// when the gradient contains a non-finite entry.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr) {
  if (grads.size() != params.size()) throw DimensionError("adam_step gradient length", params.size(), grads.size());
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw DimensionError("adam_step state length", params.size(), state.m.size());
  if (!all_finite(grads)) throw NonFiniteError("adam_step: non-finite gradient, step rejected");

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.m[i] / correction1;
    const double v_hat = state.v[i] / correction2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

/// Central-difference gradient of a scalar function of a parameter vector.
inline std::vector<double> finite_difference_grad(const std::function<double(std::span<const double>)>& f,
                                                  std::vector<double> params, double h = 1e-5) {
  std::vector<double> grad(params.size(), 0.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = f(params);
    params[i] = saved - h;
    const double down = f(params);
    params[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// max |a - b| / max(|a|, |b|, floor) over all coordinates.
inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
  if (a.size() != b.size()) throw DimensionError("max_relative_error length", a.size(), b.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

}  // namespace terrain_pn
