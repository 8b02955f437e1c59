#pragma once

// Directional PointNet (shared per-point MLP + max pool + classifier MLP) and
// the PointNet baseline with learned input / feature transforms.
//
// Every per-point layer is followed by ReLU, and so is every hidden
// classifier layer; logits and transform outputs are linear. Gradients are
// hand-derived. Because every branch ends in a max pool, only points that win
// at least one pooled dimension receive gradient, so the backward pass
// re-evaluates just those rows.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "terrain_pn/geometry.hpp"
#include "terrain_pn/numcore.hpp"
#include "terrain_pn/rng.hpp"

namespace terrain_pn {

static_assert(sizeof(Point3) == 3 * sizeof(double), "Point3 must be tightly packed");

enum class Variant { Directional, BaselineTNet };

inline constexpr std::string_view variant_name(Variant v) {
  return v == Variant::Directional ? "directional" : "baseline_tnet";
}

struct TNetSpec {
  std::vector<std::size_t> point_widths{64, 128, 1024};
  std::vector<std::size_t> head_widths{512, 256};

  friend bool operator==(const TNetSpec&, const TNetSpec&) = default;
};

class InvalidSpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelSpec {
  std::vector<std::size_t> per_point_widths{64, 64, 256};
  std::vector<std::size_t> classifier_widths{128, 64, 3};
  Variant variant = Variant::Directional;
  // Baseline only.
  TNetSpec input_tnet;
  bool feature_tnet = true;
  std::size_t feature_tnet_after = 2;  // per-point layers evaluated before the feature transform

  static ModelSpec directional(std::size_t global_feature_length = 256) {
    ModelSpec s;
    s.per_point_widths = {64, 64, global_feature_length};
    return s;
  }

  /// Classic PointNet classifier: input 3x3 transform, per-point 64-64-(64x64 transform)-64-128-1024,
  /// classifier 512-256-k.
  static ModelSpec baseline_tnet(bool with_feature_tnet = true) {
    ModelSpec s;
    s.variant = Variant::BaselineTNet;
    s.per_point_widths = {64, 64, 64, 128, 1024};
    s.classifier_widths = {512, 256, 3};
    s.feature_tnet = with_feature_tnet;
    s.feature_tnet_after = 2;
    return s;
  }

  std::size_t global_feature_length() const { return per_point_widths.empty() ? 0 : per_point_widths.back(); }
  std::size_t num_classes() const { return classifier_widths.empty() ? 0 : classifier_widths.back(); }
  bool has_input_tnet() const { return variant == Variant::BaselineTNet; }
  bool has_feature_tnet() const { return variant == Variant::BaselineTNet && feature_tnet; }
  std::size_t split_index() const { return has_feature_tnet() ? feature_tnet_after : 0; }
  std::size_t feature_dim() const { return split_index() == 0 ? 3 : per_point_widths[split_index() - 1]; }

  void validate() const {
    if (per_point_widths.empty()) throw InvalidSpecError("ModelSpec: per_point_widths must not be empty");
    if (classifier_widths.empty()) throw InvalidSpecError("ModelSpec: classifier_widths must not be empty");
    if (classifier_widths.back() != static_cast<std::size_t>(kNumClasses))
      throw InvalidSpecError("ModelSpec: last classifier width must be " + std::to_string(kNumClasses));
    auto positive = [](const std::vector<std::size_t>& w) {
      return std::all_of(w.begin(), w.end(), [](std::size_t v) { return v > 0; });
    };
    if (!positive(per_point_widths) || !positive(classifier_widths))
      throw InvalidSpecError("ModelSpec: layer widths must be positive");
    if (variant == Variant::BaselineTNet) {
      if (input_tnet.point_widths.empty() || !positive(input_tnet.point_widths) || !positive(input_tnet.head_widths))
        throw InvalidSpecError("ModelSpec: invalid transform sub-network widths");
      if (feature_tnet && (feature_tnet_after == 0 || feature_tnet_after >= per_point_widths.size()))
        throw InvalidSpecError("ModelSpec: feature_tnet_after must fall strictly inside the per-point stack");
    }
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline nlohmann::json spec_to_json(const ModelSpec& s) {
  nlohmann::json j{{"variant", std::string(variant_name(s.variant))},
                   {"per_point_widths", s.per_point_widths},
                   {"classifier_widths", s.classifier_widths}};
  if (s.variant == Variant::BaselineTNet) {
    j["input_tnet"] = {{"point_widths", s.input_tnet.point_widths}, {"head_widths", s.input_tnet.head_widths}};
    j["feature_tnet"] = s.feature_tnet;
    j["feature_tnet_after"] = s.feature_tnet_after;
  }
  return j;
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  const auto variant = j.at("variant").get<std::string>();
  if (variant == "directional") {
    s.variant = Variant::Directional;
  } else if (variant == "baseline_tnet") {
    s.variant = Variant::BaselineTNet;
  } else {
    throw InvalidSpecError("unknown model variant '" + variant + "'");
  }
  s.per_point_widths = j.at("per_point_widths").get<std::vector<std::size_t>>();
  s.classifier_widths = j.at("classifier_widths").get<std::vector<std::size_t>>();
  if (s.variant == Variant::BaselineTNet) {
    s.input_tnet.point_widths = j.at("input_tnet").at("point_widths").get<std::vector<std::size_t>>();
    s.input_tnet.head_widths = j.at("input_tnet").at("head_widths").get<std::vector<std::size_t>>();
    s.feature_tnet = j.at("feature_tnet").get<bool>();
    s.feature_tnet_after = j.at("feature_tnet_after").get<std::size_t>();
  }
  s.validate();
  return s;
}

/// Transform sub-network: per-point MLP, max pool, head MLP ending in dim*dim outputs.
struct TNetWeights {
  std::size_t dim = 3;
  std::vector<LinearLayer> point;
  std::vector<LinearLayer> head;

  friend bool operator==(const TNetWeights&, const TNetWeights&) = default;
};

struct ModelWeights {
  ModelSpec spec;
  std::optional<TNetWeights> input_tnet;
  std::vector<LinearLayer> point;
  std::optional<TNetWeights> feature_tnet;
  std::vector<LinearLayer> classifier;

  /// Visits layers in checkpoint order: input transform net, per-point stack,
  /// feature transform net, classifier.
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    if (self.input_tnet) {
      for (auto& l : self.input_tnet->point) fn(l);
      for (auto& l : self.input_tnet->head) fn(l);
    }
    for (auto& l : self.point) fn(l);
    if (self.feature_tnet) {
      for (auto& l : self.feature_tnet->point) fn(l);
      for (auto& l : self.feature_tnet->head) fn(l);
    }
    for (auto& l : self.classifier) fn(l);
  }
  template <typename Fn>
  void for_each_layer(Fn&& fn) {
    visit(*this, std::forward<Fn>(fn));
  }
  template <typename Fn>
  void for_each_layer(Fn&& fn) const {
    visit(*this, std::forward<Fn>(fn));
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for_each_layer([&](const LinearLayer& l) { n += l.param_count(); });
    return n;
  }

  /// Parameters in checkpoint order; each layer contributes weights (row-major) then bias.
  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(param_count());
    for_each_layer([&](const LinearLayer& l) {
      flat.insert(flat.end(), l.weights.values().begin(), l.weights.values().end());
      flat.insert(flat.end(), l.bias.begin(), l.bias.end());
    });
    return flat;
  }

  void assign(std::span<const double> flat) {
    if (flat.size() != param_count()) throw DimensionError("ModelWeights::assign", param_count(), flat.size());
    std::size_t off = 0;
    for_each_layer([&](LinearLayer& l) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), l.weights.size(), l.weights.values().begin());
      off += l.weights.size();
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), l.bias.size(), l.bias.begin());
      off += l.bias.size();
    });
  }

  /// Same shapes, all zeros. Used as a gradient accumulator.
  ModelWeights zeros_like() const {
    ModelWeights z = *this;
    z.for_each_layer([](LinearLayer& l) {
      std::fill(l.weights.values().begin(), l.weights.values().end(), 0.0);
      std::fill(l.bias.begin(), l.bias.end(), 0.0);
    });
    return z;
  }

  void add(const ModelWeights& other) {
    std::vector<const LinearLayer*> src;
    other.for_each_layer([&](const LinearLayer& l) { src.push_back(&l); });
    std::size_t i = 0;
    for_each_layer([&](LinearLayer& l) {
      const LinearLayer& o = *src.at(i++);
      for (std::size_t k = 0; k < l.weights.size(); ++k) l.weights.values()[k] += o.weights.values()[k];
      for (std::size_t k = 0; k < l.bias.size(); ++k) l.bias[k] += o.bias[k];
    });
  }

  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

namespace detail {

inline std::vector<LinearLayer> make_chain(std::size_t in, const std::vector<std::size_t>& widths) {
  std::vector<LinearLayer> layers;
  for (std::size_t w : widths) {
    layers.emplace_back(in, w);
    in = w;
  }
  return layers;
}

inline TNetWeights make_tnet(std::size_t dim, const TNetSpec& spec) {
  TNetWeights t;
  t.dim = dim;
  t.point = make_chain(dim, spec.point_widths);
  auto head_widths = spec.head_widths;
  head_widths.push_back(dim * dim);
  t.head = make_chain(spec.point_widths.back(), head_widths);
  return t;
}

inline ModelWeights make_shapes(const ModelSpec& spec) {
  spec.validate();
  ModelWeights w;
  w.spec = spec;
  if (spec.has_input_tnet()) w.input_tnet = make_tnet(3, spec.input_tnet);
  w.point = make_chain(3, spec.per_point_widths);
  if (spec.has_feature_tnet()) w.feature_tnet = make_tnet(spec.feature_dim(), spec.input_tnet);
  w.classifier = make_chain(spec.global_feature_length(), spec.classifier_widths);
  return w;
}

// He-style uniform initialization, bound sqrt(6 / fan_in), zero bias.
inline void init_uniform(LinearLayer& l, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(l.in()));
  for (double& v : l.weights.values()) v = rng.uniform(-bound, bound);
  std::fill(l.bias.begin(), l.bias.end(), 0.0);
}

inline void init_tnet(TNetWeights& t, Rng& rng) {
  for (auto& l : t.point) init_uniform(l, rng);
  for (auto& l : t.head) init_uniform(l, rng);
  // The last layer starts at zero weights and an identity bias, so the
  // initial transform is exactly the identity matrix.
  auto& out = t.head.back();
  std::fill(out.weights.values().begin(), out.weights.values().end(), 0.0);
  std::fill(out.bias.begin(), out.bias.end(), 0.0);
  for (std::size_t i = 0; i < t.dim; ++i) out.bias[i * t.dim + i] = 1.0;
}

}  // namespace detail

/// Fresh weights for `spec`, deterministic per seed.
inline ModelWeights build_model(const ModelSpec& spec, std::uint64_t seed) {
  ModelWeights w = detail::make_shapes(spec);
  Rng rng(seed);
  if (w.input_tnet) detail::init_tnet(*w.input_tnet, rng);
  for (auto& l : w.point) detail::init_uniform(l, rng);
  if (w.feature_tnet) detail::init_tnet(*w.feature_tnet, rng);
  for (auto& l : w.classifier) detail::init_uniform(l, rng);
  return w;
}

/// Exact number of weights and biases, transform sub-networks included.
inline std::size_t count_params(const ModelSpec& spec) { return detail::make_shapes(spec).param_count(); }

enum class FlopConvention { MAC, FLOP2 };

/// Multiply-accumulates per sample of n points. Per-point layers and the
/// transform applications cost n*in*out; vector MLPs cost in*out. Pooling and
/// activations are not counted. FLOP2 counts each MAC as two operations.
inline std::uint64_t count_flops(const ModelSpec& spec, std::size_t n, FlopConvention convention = FlopConvention::MAC) {
  if (n == 0) throw std::invalid_argument("count_flops: n must be at least 1");
  const ModelWeights shapes = detail::make_shapes(spec);
  std::uint64_t macs = 0;
  auto per_point = [&](const std::vector<LinearLayer>& layers) {
    for (const auto& l : layers) macs += static_cast<std::uint64_t>(n) * l.in() * l.out();
  };
  auto vector_mlp = [&](const std::vector<LinearLayer>& layers) {
    for (const auto& l : layers) macs += static_cast<std::uint64_t>(l.in()) * l.out();
  };
  if (shapes.input_tnet) {
    per_point(shapes.input_tnet->point);
    vector_mlp(shapes.input_tnet->head);
    macs += static_cast<std::uint64_t>(n) * 3 * 3;
  }
  per_point(shapes.point);
  if (shapes.feature_tnet) {
    per_point(shapes.feature_tnet->point);
    vector_mlp(shapes.feature_tnet->head);
    const std::uint64_t d = shapes.feature_tnet->dim;
    macs += static_cast<std::uint64_t>(n) * d * d;
  }
  vector_mlp(shapes.classifier);
  return convention == FlopConvention::MAC ? macs : 2 * macs;
}

// ---------------------------------------------------------------------------
// Forward

struct PoolResult {
  std::vector<double> feature;        // elementwise max over rows
  std::vector<std::uint32_t> argmax;  // lowest row index achieving each max
};

/// Activations of a vector MLP, kept for backward.
struct HeadTrace {
  std::vector<std::vector<double>> activations;  // activations[0] is the input
  const std::vector<double>& output() const { return activations.back(); }
};

struct TNetTrace {
  PoolResult pool;
  HeadTrace head;
  std::vector<double> transform;  // dim x dim, row-major; applied as x * T
};

/// Everything the backward pass needs from one forward evaluation.
struct ForwardTrace {
  std::size_t num_points = 0;
  std::optional<TNetTrace> input_tnet;
  std::vector<double> transformed_input;  // n x 3 (baseline only)
  std::vector<double> features;           // n x feature_dim, output of the layers before the feature transform
  std::optional<TNetTrace> feature_tnet;
  std::vector<double> transformed_features;  // n x feature_dim (feature transform only)
  PoolResult pool;                           // main global feature
  HeadTrace classifier;

  const std::vector<double>& global_feature() const { return pool.feature; }
  const std::vector<double>& logits() const { return classifier.output(); }
};

class RaggedBatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::size_t max_width(const std::vector<LinearLayer>& layers) {
  std::size_t w = 0;
  for (const auto& l : layers) w = std::max({w, l.in(), l.out()});
  return w;
}

inline void run_chain(const std::vector<LinearLayer>& layers, std::size_t first, std::size_t last, const double* input,
                      std::size_t rows, std::vector<double>& a, std::vector<double>& b, bool relu_last,
                      const double*& out) {
  const double* cur = input;
  bool use_a = true;
  for (std::size_t li = first; li < last; ++li) {
    const auto& l = layers[li];
    double* dst = use_a ? a.data() : b.data();
    // Per-layer normalization would be applied to dst here.
    kernel::affine_rows(cur, rows, l.in(), l.weights.data(), l.bias.data(), l.out(), dst, relu_last || li + 1 < last);
    cur = dst;
    use_a = !use_a;
  }
  out = cur;
}

/// Shared per-point MLP followed by a max pool, streamed in row tiles.
inline PoolResult pooled_branch(const std::vector<LinearLayer>& layers, std::size_t first, const double* input,
                                std::size_t rows) {
  constexpr std::size_t kTile = 64;
  const std::size_t width = layers.back().out();
  PoolResult r{std::vector<double>(width, -std::numeric_limits<double>::infinity()),
               std::vector<std::uint32_t>(width, 0)};
  const std::size_t buf = kTile * max_width(layers);
  std::vector<double> a(buf), b(buf);
  const std::size_t in = layers[first].in();
  for (std::size_t t0 = 0; t0 < rows; t0 += kTile) {
    const std::size_t tn = std::min(kTile, rows - t0);
    const double* out = nullptr;
    run_chain(layers, first, layers.size(), input + t0 * in, tn, a, b, true, out);
    for (std::size_t r0 = 0; r0 < tn; ++r0) {
      const double* row = out + r0 * width;
      for (std::size_t j = 0; j < width; ++j) {
        if (row[j] > r.feature[j]) {
          r.feature[j] = row[j];
          r.argmax[j] = static_cast<std::uint32_t>(t0 + r0);
        }
      }
    }
  }
  return r;
}

/// Per-point MLP evaluated on all rows with the full output kept.
inline std::vector<double> dense_branch(const std::vector<LinearLayer>& layers, std::size_t first, std::size_t last,
                                        const double* input, std::size_t rows) {
  if (first == last) return {input, input + rows * layers[first].in()};
  std::size_t width = 0;
  for (std::size_t li = first; li < last; ++li) width = std::max({width, layers[li].in(), layers[li].out()});
  std::vector<double> a(rows * width), b(rows * width);
  const double* out = nullptr;
  run_chain(layers, first, last, input, rows, a, b, true, out);
  return {out, out + rows * layers[last - 1].out()};
}

inline HeadTrace head_forward(const std::vector<LinearLayer>& layers, std::vector<double> input) {
  HeadTrace h;
  h.activations.push_back(std::move(input));
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& l = layers[li];
    std::vector<double> out(l.out());
    kernel::affine_rows(h.activations.back().data(), 1, l.in(), l.weights.data(), l.bias.data(), l.out(), out.data(),
                        li + 1 < layers.size());
    h.activations.push_back(std::move(out));
  }
  return h;
}

inline std::vector<double> apply_transform(const double* x, std::size_t rows, std::size_t dim,
                                           const std::vector<double>& transform) {
  std::vector<double> out(rows * dim);
  const std::vector<double> zero(dim, 0.0);
  kernel::affine_rows(x, rows, dim, transform.data(), zero.data(), dim, out.data(), false);
  return out;
}

inline TNetTrace tnet_forward(const TNetWeights& t, const double* x, std::size_t rows) {
  TNetTrace tr;
  tr.pool = pooled_branch(t.point, 0, x, rows);
  tr.head = head_forward(t.head, tr.pool.feature);
  tr.transform = tr.head.output();
  return tr;
}

}  // namespace detail

inline ForwardTrace forward_trace(const ModelWeights& w, std::span<const Point3> points) {
  if (points.empty()) throw EmptyCloudError("forward: empty cloud");
  const std::size_t n = points.size();
  const double* x = points.front().data();
  ForwardTrace tr;
  tr.num_points = n;
  const double* stage_input = x;
  if (w.input_tnet) {
    tr.input_tnet = detail::tnet_forward(*w.input_tnet, x, n);
    tr.transformed_input = detail::apply_transform(x, n, 3, tr.input_tnet->transform);
    stage_input = tr.transformed_input.data();
  }
  const std::size_t split = w.spec.split_index();
  const double* pooled_input = stage_input;
  if (w.feature_tnet) {
    tr.features = detail::dense_branch(w.point, 0, split, stage_input, n);
    tr.feature_tnet = detail::tnet_forward(*w.feature_tnet, tr.features.data(), n);
    tr.transformed_features =
        detail::apply_transform(tr.features.data(), n, w.feature_tnet->dim, tr.feature_tnet->transform);
    pooled_input = tr.transformed_features.data();
  }
  tr.pool = detail::pooled_branch(w.point, split, pooled_input, n);
  tr.classifier = detail::head_forward(w.classifier, tr.pool.feature);
  return tr;
}

struct ForwardResult {
  std::vector<double> global_feature;
  std::vector<double> logits;
};

inline ForwardResult forward(const ModelWeights& w, const PointCloud& cloud) {
  ForwardTrace tr = forward_trace(w, cloud.points);
  return {std::move(tr.pool.feature), tr.classifier.output()};
}

/// Batched forward: global features [B x N] and logits [B x k]. All clouds must have equal size.
inline std::pair<Tensor2D, Tensor2D> forward(const ModelWeights& w, std::span<const PointCloud> batch) {
  if (batch.empty()) return {};
  const std::size_t n = batch.front().size();
  Tensor2D features(batch.size(), w.spec.global_feature_length());
  Tensor2D logits(batch.size(), w.spec.num_classes());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].size() != n)
      throw RaggedBatchError("forward: cloud " + std::to_string(b) + " has " + std::to_string(batch[b].size()) +
                             " points, expected " + std::to_string(n));
    const auto r = forward(w, batch[b]);
    std::copy(r.global_feature.begin(), r.global_feature.end(), features.row(b).begin());
    std::copy(r.logits.begin(), r.logits.end(), logits.row(b).begin());
  }
  return {std::move(features), std::move(logits)};
}

inline int predict(const ModelWeights& w, const PointCloud& cloud) {
  const auto r = forward(w, cloud);
  return static_cast<int>(std::max_element(r.logits.begin(), r.logits.end()) - r.logits.begin());
}

// ---------------------------------------------------------------------------
// Backward

namespace detail {

/// Backward through a vector MLP; accumulates into `grads` and returns dL/dinput.
inline std::vector<double> head_backward(const std::vector<LinearLayer>& layers, const HeadTrace& tr,
                                         std::vector<double> grad_out, std::vector<LinearLayer>& grads) {
  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& l = layers[li];
    if (li + 1 < layers.size()) {
      const auto& act = tr.activations[li + 1];
      for (std::size_t j = 0; j < grad_out.size(); ++j)
        if (!(act[j] > 0.0)) grad_out[j] = 0.0;
    }
    kernel::accumulate_weight_grad(tr.activations[li].data(), 1, l.in(), grad_out.data(), l.out(),
                                   grads[li].weights.data(), grads[li].bias.data());
    std::vector<double> grad_in(l.in());
    kernel::backprop_input(grad_out.data(), 1, l.out(), l.weights.data(), l.in(), grad_in.data());
    grad_out = std::move(grad_in);
  }
  return grad_out;
}

/// Backward through layers [first, last) of a per-point stack restricted to
/// `rows` (global row ids). `input` holds those rows' inputs, m x in.
/// `grad_top` is m x out(last-1), the gradient w.r.t. the post-ReLU output.
/// Returns dL/dinput for the rows (m x in).
inline std::vector<double> rows_backward(const std::vector<LinearLayer>& layers, std::size_t first, std::size_t last,
                                         const std::vector<double>& input, std::size_t m, std::vector<double> grad_top,
                                         std::vector<LinearLayer>& grads) {
  // Recompute activations for the selected rows; same kernel, same bits as the forward pass.
  std::vector<std::vector<double>> acts;
  acts.push_back(input);
  for (std::size_t li = first; li < last; ++li) {
    const auto& l = layers[li];
    std::vector<double> out(m * l.out());
    kernel::affine_rows(acts.back().data(), m, l.in(), l.weights.data(), l.bias.data(), l.out(), out.data(), true);
    acts.push_back(std::move(out));
  }
  std::vector<double> grad = std::move(grad_top);
  for (std::size_t li = last; li-- > first;) {
    const auto& l = layers[li];
    const auto& out = acts[li - first + 1];
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (!(out[i] > 0.0)) grad[i] = 0.0;
    kernel::accumulate_weight_grad(acts[li - first].data(), m, l.in(), grad.data(), l.out(), grads[li].weights.data(),
                                   grads[li].bias.data());
    std::vector<double> grad_in(m * l.in());
    kernel::backprop_input(grad.data(), m, l.out(), l.weights.data(), l.in(), grad_in.data());
    grad = std::move(grad_in);
  }
  return grad;
}

inline std::vector<std::uint32_t> unique_rows(const std::vector<std::uint32_t>& argmax) {
  std::vector<std::uint32_t> rows = argmax;
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  return rows;
}

inline std::vector<double> gather_rows(const double* src, std::size_t cols, const std::vector<std::uint32_t>& rows) {
  std::vector<double> out(rows.size() * cols);
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(src + static_cast<std::size_t>(rows[r]) * cols, cols, out.data() + r * cols);
  return out;
}

inline std::size_t row_position(const std::vector<std::uint32_t>& rows, std::uint32_t id) {
  return static_cast<std::size_t>(std::lower_bound(rows.begin(), rows.end(), id) - rows.begin());
}

/// Routes a pooled-feature gradient to the argmax rows and backpropagates
/// through the pooled stack. Returns (rows, dL/dinput for those rows).
inline std::pair<std::vector<std::uint32_t>, std::vector<double>> pooled_backward(
    const std::vector<LinearLayer>& layers, std::size_t first, const double* input, const PoolResult& pool,
    const std::vector<double>& grad_feature, std::vector<LinearLayer>& grads) {
  auto rows = unique_rows(pool.argmax);
  const std::size_t width = layers.back().out();
  const std::size_t in = layers[first].in();
  std::vector<double> grad_top(rows.size() * width, 0.0);
  for (std::size_t j = 0; j < width; ++j) grad_top[row_position(rows, pool.argmax[j]) * width + j] = grad_feature[j];
  auto grad_in = rows_backward(layers, first, layers.size(), gather_rows(input, in, rows), rows.size(),
                               std::move(grad_top), grads);
  return {std::move(rows), std::move(grad_in)};
}

/// y = x T over the given rows: dT += x^T dy, returns dy T^T.
inline std::vector<double> transform_backward(const double* x_rows, std::size_t m, std::size_t dim,
                                              const std::vector<double>& transform, const std::vector<double>& grad_y,
                                              std::vector<double>& grad_transform) {
  std::vector<double> unused_bias(dim, 0.0);
  kernel::accumulate_weight_grad(x_rows, m, dim, grad_y.data(), dim, grad_transform.data(), unused_bias.data());
  std::vector<double> grad_x(m * dim);
  kernel::backprop_input(grad_y.data(), m, dim, transform.data(), dim, grad_x.data());
  return grad_x;
}

inline void tnet_backward(const TNetWeights& t, const TNetTrace& tr, const double* input,
                          const std::vector<double>& grad_transform, TNetWeights& grads) {
  const auto grad_feature = head_backward(t.head, tr.head, grad_transform, grads.head);
  pooled_backward(t.point, 0, input, tr.pool, grad_feature, grads.point);
}

}  // namespace detail

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loss of one sample scaled by `scale`, with gradients of the scaled loss added to `grads`.
/// Returns the unscaled cross-entropy.
inline double accumulate_sample_gradient(const ModelWeights& w, std::span<const Point3> points, int label, double scale,
                                         ModelWeights& grads) {
  const ForwardTrace tr = forward_trace(w, points);
  const std::size_t k = w.spec.num_classes();
  const Tensor2D logits(1, k, tr.logits());
  const int labels[] = {label};
  auto ce = softmax_cross_entropy(logits, labels);
  if (!std::isfinite(ce.loss)) throw NonFiniteLossError("non-finite loss");
  std::vector<double> grad_logits(ce.grad.values().begin(), ce.grad.values().end());
  for (double& g : grad_logits) g *= scale;

  const auto grad_global = detail::head_backward(w.classifier, tr.classifier, grad_logits, grads.classifier);

  const double* x = points.front().data();
  const double* stage_input = w.input_tnet ? tr.transformed_input.data() : x;
  const std::size_t split = w.spec.split_index();

  // Gradient w.r.t. the stage input (x, or x*T), sparse over rows.
  std::vector<std::uint32_t> rows;
  std::vector<double> grad_stage;

  if (w.feature_tnet) {
    const std::size_t d = w.feature_tnet->dim;
    auto [main_rows, grad_tf] =
        detail::pooled_backward(w.point, split, tr.transformed_features.data(), tr.pool, grad_global, grads.point);
    std::vector<double> grad_t2(d * d, 0.0);
    const auto f_main = detail::gather_rows(tr.features.data(), d, main_rows);
    auto grad_f_main =
        detail::transform_backward(f_main.data(), main_rows.size(), d, tr.feature_tnet->transform, grad_tf, grad_t2);

    const auto grad_feat_t2 =
        detail::head_backward(w.feature_tnet->head, tr.feature_tnet->head, grad_t2, grads.feature_tnet->head);
    auto [t2_rows, grad_f_t2] = detail::pooled_backward(w.feature_tnet->point, 0, tr.features.data(),
                                                        tr.feature_tnet->pool, grad_feat_t2, grads.feature_tnet->point);

    // Merge both contributions over the union of rows.
    std::vector<std::uint32_t> merged;
    std::set_union(main_rows.begin(), main_rows.end(), t2_rows.begin(), t2_rows.end(), std::back_inserter(merged));
    std::vector<double> grad_f(merged.size() * d, 0.0);
    for (std::size_t r = 0; r < main_rows.size(); ++r) {
      double* dst = grad_f.data() + detail::row_position(merged, main_rows[r]) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += grad_f_main[r * d + c];
    }
    for (std::size_t r = 0; r < t2_rows.size(); ++r) {
      double* dst = grad_f.data() + detail::row_position(merged, t2_rows[r]) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += grad_f_t2[r * d + c];
    }
    grad_stage = detail::rows_backward(w.point, 0, split, detail::gather_rows(stage_input, 3, merged), merged.size(),
                                       std::move(grad_f), grads.point);
    rows = std::move(merged);
  } else {
    auto [main_rows, grad_in] = detail::pooled_backward(w.point, 0, stage_input, tr.pool, grad_global, grads.point);
    rows = std::move(main_rows);
    grad_stage = std::move(grad_in);
  }

  if (w.input_tnet) {
    std::vector<double> grad_t1(9, 0.0);
    const auto x_rows = detail::gather_rows(x, 3, rows);
    detail::transform_backward(x_rows.data(), rows.size(), 3, tr.input_tnet->transform, grad_stage, grad_t1);
    detail::tnet_backward(*w.input_tnet, *tr.input_tnet, x, grad_t1, *grads.input_tnet);
  }
  return ce.loss;
}

struct LossAndGradients {
  double loss = 0.0;
  ModelWeights gradients;
};

/// Mean cross-entropy over the batch and its exact gradient.
inline LossAndGradients backward(const ModelWeights& w, std::span<const PointCloud> batch, std::span<const int> labels) {
  if (batch.size() != labels.size()) throw DimensionError("backward: labels", batch.size(), labels.size());
  if (batch.empty()) throw std::invalid_argument("backward: empty batch");
  const std::size_t n = batch.front().size();
  LossAndGradients out{0.0, w.zeros_like()};
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].size() != n) throw RaggedBatchError("backward: ragged batch");
    out.loss += scale * accumulate_sample_gradient(w, batch[b].points, labels[b], scale, out.gradients);
  }
  if (!std::isfinite(out.loss)) throw NonFiniteLossError("backward: non-finite loss");
  return out;
}

/// Mean loss only; used by finite-difference checks.
inline double batch_loss(const ModelWeights& w, std::span<const PointCloud> batch, std::span<const int> labels) {
  double loss = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto r = forward(w, batch[b]);
    const Tensor2D logits(1, r.logits.size(), r.logits);
    const int label[] = {labels[b]};
    loss += softmax_cross_entropy(logits, label).loss;
  }
  return loss / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Checkpoints: "TPNWGT01" | u32 version | u64 meta length | meta (UTF-8 JSON)
//              | u64 param count | param_count little-endian f64 values

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'T', 'P', 'N', 'W', 'G', 'T', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <typename T>
void put(std::string& buf, T v) {
  v = to_le(v);
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

template <typename T>
T take(const std::string& buf, std::size_t& off) {
  if (off + sizeof(T) > buf.size()) throw std::runtime_error("checkpoint truncated");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return to_le(v);
}

}  // namespace detail

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string serialize_checkpoint(const ModelWeights& w) {
  nlohmann::json meta{{"format", "terrain_pn.weights"},
                      {"version", detail::kCheckpointVersion},
                      {"spec", spec_to_json(w.spec)},
                      {"param_count", w.param_count()}};
  const std::string meta_text = meta.dump();
  std::string buf(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::put<std::uint32_t>(buf, detail::kCheckpointVersion);
  detail::put<std::uint64_t>(buf, meta_text.size());
  buf += meta_text;
  const auto flat = w.flatten();
  detail::put<std::uint64_t>(buf, flat.size());
  for (double v : flat) detail::put<double>(buf, v);
  return buf;
}

inline ModelWeights deserialize_checkpoint(const std::string& buf) {
  try {
    if (buf.size() < sizeof(detail::kCheckpointMagic) ||
        std::memcmp(buf.data(), detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic)) != 0)
      throw CheckpointError("not a terrain_pn checkpoint");
    std::size_t off = sizeof(detail::kCheckpointMagic);
    const auto version = detail::take<std::uint32_t>(buf, off);
    if (version != detail::kCheckpointVersion)
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const auto meta_len = detail::take<std::uint64_t>(buf, off);
    if (off + meta_len > buf.size()) throw CheckpointError("checkpoint truncated");
    const auto meta = nlohmann::json::parse(buf.substr(off, meta_len));
    off += meta_len;
    ModelWeights w = detail::make_shapes(spec_from_json(meta.at("spec")));
    const auto count = detail::take<std::uint64_t>(buf, off);
    if (count != w.param_count()) throw CheckpointError("parameter count does not match spec");
    std::vector<double> flat(count);
    for (auto& v : flat) v = detail::take<double>(buf, off);
    if (off != buf.size()) throw CheckpointError("trailing bytes after parameters");
    w.assign(flat);
    return w;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const ModelWeights& w, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
  const auto buf = serialize_checkpoint(w);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw CheckpointError("write failed: " + path.string());
}

inline ModelWeights load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  const std::string buf{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint(buf);
}

}  // namespace terrain_pn
