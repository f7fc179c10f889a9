#pragma once

// The two-branch network: a shared ReLU hidden layer fed by a sparse
// bag-of-words, a text reconstruction head and a visual regression head.
//
//   z  = ReLU(W1 t_in + b1)
//   t' = ReLU(W2 z + b2)      (text head, optional)
//   v' = ReLU(W3 z + b3)      (visual head)
//
// Parameters are stored in T (float for training, double for gradient
// checks); dot products and loss sums accumulate in double.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "text2vis/binary_io.hpp"
#include "text2vis/error.hpp"
#include "text2vis/matrix.hpp"
#include "text2vis/random.hpp"
#include "text2vis/textvec.hpp"

namespace text2vis {

// y = ReLU(weight * x + bias); weight is [out × in].
template <typename T>
struct Layer {
  Matrix<T> weight;
  std::vector<T> bias;

  Layer() = default;
  Layer(std::size_t out, std::size_t in) : weight(out, in), bias(out, T{0}) {}

  std::size_t out_dim() const noexcept { return weight.rows(); }
  std::size_t in_dim() const noexcept { return weight.cols(); }
  std::size_t param_count() const noexcept { return weight.size() + bias.size(); }

  void set_zero() {
    weight.set_zero();
    std::fill(bias.begin(), bias.end(), T{0});
  }

  friend bool operator==(const Layer&, const Layer&) = default;
};

template <typename T>
struct Model {
  Layer<T> encoder;                   // W1, b1: [hidden × vocab]
  std::optional<Layer<T>> text_head;  // W2, b2: [vocab × hidden]; absent for the visual-only regressor
  Layer<T> visual_head;               // W3, b3: [visual × hidden]

  std::size_t vocab_dim() const noexcept { return encoder.in_dim(); }
  std::size_t hidden_dim() const noexcept { return encoder.out_dim(); }
  std::size_t visual_dim() const noexcept { return visual_head.out_dim(); }
  bool has_text_branch() const noexcept { return text_head.has_value(); }

  template <typename U>
  Model<U> cast() const {
    Model<U> out;
    out.encoder.weight = encoder.weight.template cast<U>();
    out.encoder.bias.assign(encoder.bias.begin(), encoder.bias.end());
    if (text_head) {
      out.text_head.emplace();
      out.text_head->weight = text_head->weight.template cast<U>();
      out.text_head->bias.assign(text_head->bias.begin(), text_head->bias.end());
    }
    out.visual_head.weight = visual_head.weight.template cast<U>();
    out.visual_head.bias.assign(visual_head.bias.begin(), visual_head.bias.end());
    return out;
  }

  friend bool operator==(const Model&, const Model&) = default;
};

template <typename T>
std::size_t param_count(const Model<T>& model) {
  std::size_t n = model.encoder.param_count() + model.visual_head.param_count();
  if (model.text_head) n += model.text_head->param_count();
  return n;
}

// Closed-form count for a model that has not been allocated.
inline std::uint64_t param_count(std::uint64_t vocab_dim, std::uint64_t hidden, std::uint64_t visual_dim,
                                 bool has_text_branch) {
  std::uint64_t n = hidden * vocab_dim + hidden + visual_dim * hidden + visual_dim;
  if (has_text_branch) n += vocab_dim * hidden + vocab_dim;
  return n;
}

template <typename T>
std::vector<T> relu(std::span<const T> x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return out;
}

// (1/n) * sum (x_i - y_i)^2
template <typename T, typename U>
double mse(std::span<const T> x, std::span<const U> y) {
  if (x.size() != y.size()) {
    throw Error("mse: length mismatch (" + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + ")");
  }
  if (x.empty()) throw Error("mse: empty vectors");
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    sum += d * d;
  }
  return sum / static_cast<double>(x.size());
}

// MSE against a binary target given by its active indices, without densifying it.
template <typename T>
double mse_binary_target(std::span<const T> pred, const BowVector& target) {
  if (pred.size() != target.dim) throw Error("mse: length mismatch against bag-of-words target");
  if (pred.empty()) throw Error("mse: empty vectors");
  double sum = 0.0;
  for (T p : pred) sum += static_cast<double>(p) * static_cast<double>(p);
  for (auto i : target.on_indices) sum += 1.0 - 2.0 * static_cast<double>(pred[i]);
  return sum / static_cast<double>(pred.size());
}

namespace detail {

// Standard deviation, in units of the target deviation, of the normal that
// still has the target deviation once truncated to +/- `bound` target
// deviations. Solved by bisection on the truncated-normal variance.
inline double truncated_normal_scale(double bound) {
  auto truncated_sd = [bound](double s) {
    const double a = bound / s;
    const double pdf = std::exp(-0.5 * a * a) / std::sqrt(2.0 * 3.14159265358979323846);
    const double mass = std::erf(a / std::sqrt(2.0));
    return s * std::sqrt(1.0 - 2.0 * a * pdf / mass);
  };
  double lo = 1.0, hi = 64.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (truncated_sd(mid) < 1.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

// Weights are drawn from a zero-mean normal truncated at two standard
// deviations whose standard deviation after truncation is 1/sqrt(fan-in);
// biases start at zero.
template <typename T>
Model<T> init_model(std::size_t vocab_dim, std::size_t hidden, std::size_t visual_dim, bool has_text_branch,
                    std::uint64_t seed) {
  if (vocab_dim == 0 || hidden == 0 || visual_dim == 0) {
    throw Error("init_model: dimensions must be >= 1 (vocab " + std::to_string(vocab_dim) + ", hidden " +
                std::to_string(hidden) + ", visual " + std::to_string(visual_dim) + ")");
  }
  Rng rng(seed);
  constexpr double kBound = 2.0;
  static const double scale = detail::truncated_normal_scale(kBound);
  auto fill = [&rng](Layer<T>& layer) {
    const double sigma = 1.0 / std::sqrt(static_cast<double>(layer.in_dim()));
    for (T& w : layer.weight.flat()) w = static_cast<T>(sigma * scale * rng.truncated_normal(kBound / scale));
  };
  Model<T> model;
  model.encoder = Layer<T>(hidden, vocab_dim);
  fill(model.encoder);
  if (has_text_branch) {
    model.text_head.emplace(vocab_dim, hidden);
    fill(*model.text_head);
  }
  model.visual_head = Layer<T>(visual_dim, hidden);
  fill(model.visual_head);
  return model;
}

template <typename T>
struct ForwardResult {
  std::vector<T> z;
  std::optional<std::vector<T>> t_pred;
  std::vector<T> v_pred;
};

enum class Heads { Both, VisualOnly, TextOnly };

namespace detail {

template <typename T>
void check_input(const Model<T>& model, const BowVector& t_in) {
  if (t_in.dim != model.vocab_dim()) {
    throw Error("input dimension " + std::to_string(t_in.dim) + " does not match model vocabulary " +
                std::to_string(model.vocab_dim()));
  }
  if (!t_in.on_indices.empty() && t_in.on_indices.back() >= t_in.dim) {
    throw Error("bag-of-words index out of range");
  }
}

// out = ReLU(layer.weight * x + layer.bias) for dense x.
template <typename T>
void dense_relu_layer(const Layer<T>& layer, std::span<const T> x, std::vector<T>& out) {
  out.resize(layer.out_dim());
  for (std::size_t r = 0; r < layer.out_dim(); ++r) {
    const auto w = layer.weight.row(r);
    double acc = static_cast<double>(layer.bias[r]);
    for (std::size_t c = 0; c < w.size(); ++c) acc += static_cast<double>(w[c]) * static_cast<double>(x[c]);
    const T a = static_cast<T>(acc);
    out[r] = a > T{0} ? a : T{0};
  }
}

// Hidden layer from a binary sparse input: W1 t_in is the sum of active columns.
template <typename T>
void encode_hidden(const Layer<T>& encoder, const BowVector& t_in, std::vector<T>& z) {
  const std::size_t hidden = encoder.out_dim();
  z.resize(hidden);
  for (std::size_t h = 0; h < hidden; ++h) {
    const auto w = encoder.weight.row(h);
    double acc = static_cast<double>(encoder.bias[h]);
    for (auto j : t_in.on_indices) acc += static_cast<double>(w[j]);
    const T a = static_cast<T>(acc);
    z[h] = a > T{0} ? a : T{0};
  }
}

}  // namespace detail

template <typename T>
ForwardResult<T> forward(const Model<T>& model, const BowVector& t_in, Heads heads = Heads::Both) {
  detail::check_input(model, t_in);
  ForwardResult<T> out;
  detail::encode_hidden(model.encoder, t_in, out.z);
  if (model.text_head && heads != Heads::VisualOnly) {
    out.t_pred.emplace();
    detail::dense_relu_layer<T>(*model.text_head, out.z, *out.t_pred);
  }
  if (heads != Heads::TextOnly) detail::dense_relu_layer<T>(model.visual_head, out.z, out.v_pred);
  return out;
}

// Gradients over the subset of parameters a loss touches. The encoder part is
// always present; heads a loss does not reach stay disengaged.
template <typename T>
struct Gradients {
  Layer<T> encoder;
  std::optional<Layer<T>> text_head;
  std::optional<Layer<T>> visual_head;

  static Gradients zeros_like(const Model<T>& model, bool with_text, bool with_visual) {
    Gradients g;
    g.encoder = Layer<T>(model.hidden_dim(), model.vocab_dim());
    if (with_text) g.text_head.emplace(model.vocab_dim(), model.hidden_dim());
    if (with_visual) g.visual_head.emplace(model.visual_dim(), model.hidden_dim());
    return g;
  }

  void set_zero() {
    encoder.set_zero();
    if (text_head) text_head->set_zero();
    if (visual_head) visual_head->set_zero();
  }
};

struct ExampleLoss {
  std::optional<double> text;
  std::optional<double> visual;
};

// Adds text_weight * dL_t/dθ + visual_weight * dL_v/dθ for one example into
// `acc`. A branch with zero weight is neither evaluated nor accumulated.
// The ReLU derivative at exactly zero is taken as zero.
template <typename T>
ExampleLoss accumulate_example_gradients(const Model<T>& model, const BowVector& t_in, const BowVector* t_out,
                                         std::span<const T> v_target, double text_weight, double visual_weight,
                                         Gradients<T>& acc) {
  detail::check_input(model, t_in);
  const bool use_text = text_weight != 0.0;
  const bool use_visual = visual_weight != 0.0;
  if (use_text && (!model.text_head || !acc.text_head || t_out == nullptr)) {
    throw Error("text branch gradient requested but the model or accumulator has no text head");
  }
  if (use_visual && !acc.visual_head) throw Error("visual gradient requested without a visual accumulator");
  if (use_text && t_out->dim != model.vocab_dim()) throw Error("text target dimension mismatch");
  if (use_visual && v_target.size() != model.visual_dim()) {
    throw Error("visual target dimension " + std::to_string(v_target.size()) + " does not match model " +
                std::to_string(model.visual_dim()));
  }

  const std::size_t hidden = model.hidden_dim();
  std::vector<T> z;
  detail::encode_hidden(model.encoder, t_in, z);
  std::vector<double> dz(hidden, 0.0);
  ExampleLoss loss;

  // Shared step for either head: loss, head gradients and contribution to dL/dz.
  auto head_backward = [&](const Layer<T>& head, Layer<T>& head_acc, double weight, auto&& target_at) {
    std::vector<T> pred;
    detail::dense_relu_layer<T>(head, z, pred);
    const std::size_t n = pred.size();
    double sum_sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(pred[i]) - target_at(i);
      sum_sq += d * d;
      if (pred[i] <= T{0}) continue;
      const double delta = 2.0 * d / static_cast<double>(n);
      const auto w = head.weight.row(i);
      const auto gw = head_acc.weight.row(i);
      const double scaled = weight * delta;
      head_acc.bias[i] += static_cast<T>(scaled);
      for (std::size_t h = 0; h < hidden; ++h) {
        gw[h] += static_cast<T>(scaled * static_cast<double>(z[h]));
        dz[h] += scaled * static_cast<double>(w[h]);
      }
    }
    return sum_sq / static_cast<double>(n);
  };

  if (use_visual) {
    loss.visual = head_backward(model.visual_head, *acc.visual_head, visual_weight,
                                [&](std::size_t i) { return static_cast<double>(v_target[i]); });
  }
  if (use_text) {
    std::vector<double> dense_target(model.vocab_dim(), 0.0);
    for (auto i : t_out->on_indices) dense_target[i] = 1.0;
    loss.text = head_backward(*model.text_head, *acc.text_head, text_weight,
                              [&](std::size_t i) { return dense_target[i]; });
  }

  for (std::size_t h = 0; h < hidden; ++h) {
    if (z[h] <= T{0} || dz[h] == 0.0) continue;
    acc.encoder.bias[h] += static_cast<T>(dz[h]);
    const auto gw = acc.encoder.weight.row(h);
    for (auto j : t_in.on_indices) gw[j] += static_cast<T>(dz[h]);
  }
  return loss;
}

template <typename T>
struct BranchGradient {
  double loss = 0.0;
  Gradients<T> grads;
};

// Loss and gradient of MSE(t_out, t') over {W1, b1, W2, b2}.
template <typename T>
BranchGradient<T> backward_text(const Model<T>& model, const BowVector& t_in, const BowVector& t_out) {
  if (!model.text_head) throw Error("backward_text: model has no text branch");
  BranchGradient<T> out{0.0, Gradients<T>::zeros_like(model, true, false)};
  out.loss = *accumulate_example_gradients<T>(model, t_in, &t_out, {}, 1.0, 0.0, out.grads).text;
  return out;
}

// Loss and gradient of MSE(v, v') over {W1, b1, W3, b3}.
template <typename T>
BranchGradient<T> backward_visual(const Model<T>& model, const BowVector& t_in, std::span<const T> v) {
  BranchGradient<T> out{0.0, Gradients<T>::zeros_like(model, false, true)};
  out.loss = *accumulate_example_gradients<T>(model, t_in, nullptr, v, 0.0, 1.0, out.grads).visual;
  return out;
}

// Checkpoint: "T2VM", version u32, flags u32 (bit 0 = text branch), vocab,
// hidden, visual as u64, then W1, b1, [W2, b2], W3, b3 as row-major f32, all
// little-endian.
inline constexpr std::string_view kCheckpointMagic = "T2VM";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(std::ostream& out, const Model<float>& model) {
  binary::write_magic(out, kCheckpointMagic);
  binary::write_scalar<std::uint32_t>(out, kCheckpointVersion);
  binary::write_scalar<std::uint32_t>(out, model.has_text_branch() ? 1u : 0u);
  binary::write_scalar<std::uint64_t>(out, model.vocab_dim());
  binary::write_scalar<std::uint64_t>(out, model.hidden_dim());
  binary::write_scalar<std::uint64_t>(out, model.visual_dim());
  auto put = [&out](const Layer<float>& layer) {
    binary::write_array<float>(out, layer.weight.flat());
    binary::write_array<float>(out, layer.bias);
  };
  put(model.encoder);
  if (model.text_head) put(*model.text_head);
  put(model.visual_head);
}

inline void save_checkpoint(const std::string& path, const Model<float>& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint: " + path);
  save_checkpoint(out, model);
  if (!out) throw Error("failed writing checkpoint: " + path);
}

inline Model<float> load_checkpoint(std::istream& in) {
  binary::expect_magic(in, kCheckpointMagic);
  const auto version = binary::read_scalar<std::uint32_t>(in, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw Error("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                std::to_string(kCheckpointVersion) + ")");
  }
  const auto flags = binary::read_scalar<std::uint32_t>(in, "checkpoint flags");
  if ((flags & ~1u) != 0) throw Error("unknown checkpoint flags " + std::to_string(flags));
  const bool has_text = (flags & 1u) != 0;
  const auto vocab = binary::read_scalar<std::uint64_t>(in, "vocab dim");
  const auto hidden = binary::read_scalar<std::uint64_t>(in, "hidden dim");
  const auto visual = binary::read_scalar<std::uint64_t>(in, "visual dim");
  if (vocab == 0 || hidden == 0 || visual == 0) throw Error("checkpoint has a zero dimension");
  constexpr std::uint64_t kMaxDim = std::uint64_t{1} << 31;
  if (vocab > kMaxDim || hidden > kMaxDim || visual > kMaxDim) throw Error("checkpoint dimension overflow");
  const std::uint64_t expected_bytes = param_count(vocab, hidden, visual, has_text) * sizeof(float);
  if (binary::remaining_bytes(in) < expected_bytes) throw Error("truncated checkpoint");

  Model<float> model;
  auto get = [&in](Layer<float>& layer, const char* what) {
    binary::read_array<float>(in, layer.weight.flat(), what);
    binary::read_array<float>(in, std::span<float>(layer.bias), what);
  };
  model.encoder = Layer<float>(hidden, vocab);
  get(model.encoder, "W1/b1");
  if (has_text) {
    model.text_head.emplace(vocab, hidden);
    get(*model.text_head, "W2/b2");
  }
  model.visual_head = Layer<float>(visual, hidden);
  get(model.visual_head, "W3/b3");
  return model;
}

inline Model<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path);
  return load_checkpoint(in);
}

}  // namespace text2vis
