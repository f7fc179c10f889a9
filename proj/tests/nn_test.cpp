#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <vector>

#include "text2vis/nn.hpp"
#include "text2vis/random.hpp"

namespace text2vis {
namespace {

// Dense reference forward pass, written independently of the sparse path.
struct DenseForward {
  std::vector<double> a1, z, a2, t, a3, v;
};

DenseForward dense_forward(const Model<double>& m, const std::vector<double>& x) {
  auto affine = [](const Layer<double>& l, const std::vector<double>& in) {
    std::vector<double> out(l.out_dim());
    for (std::size_t r = 0; r < l.out_dim(); ++r) {
      double s = l.bias[r];
      for (std::size_t c = 0; c < l.in_dim(); ++c) s += l.weight(r, c) * in[c];
      out[r] = s;
    }
    return out;
  };
  auto clamp = [](std::vector<double> a) {
    for (double& x : a) x = std::max(0.0, x);
    return a;
  };
  DenseForward f;
  f.a1 = affine(m.encoder, x);
  f.z = clamp(f.a1);
  if (m.text_head) {
    f.a2 = affine(*m.text_head, f.z);
    f.t = clamp(f.a2);
  }
  f.a3 = affine(m.visual_head, f.z);
  f.v = clamp(f.a3);
  return f;
}

double mse_d(const std::vector<double>& x, const std::vector<double>& y) { return mse<double, double>(x, y); }

BowVector random_bow(Rng& rng, std::size_t dim, std::size_t max_on) {
  BowVector b{dim, {}};
  const auto n = 1 + rng.index(max_on);
  for (std::size_t k = 0; k < n; ++k) b.on_indices.push_back(static_cast<std::uint32_t>(rng.index(dim)));
  std::sort(b.on_indices.begin(), b.on_indices.end());
  b.on_indices.erase(std::unique(b.on_indices.begin(), b.on_indices.end()), b.on_indices.end());
  return b;
}

Model<double> random_model(Rng& rng, std::size_t vocab, std::size_t hidden, std::size_t visual, bool text) {
  auto m = init_model<double>(vocab, hidden, visual, text, rng.next_u64());
  auto jitter = [&rng](Layer<double>& l) {
    for (double& b : l.bias) b = rng.normal(0.0, 0.3);
  };
  jitter(m.encoder);
  if (m.text_head) jitter(*m.text_head);
  jitter(m.visual_head);
  return m;
}

TEST(Relu, Definition) {
  const std::vector<double> x{-1.0, 0.0, 2.0};
  EXPECT_EQ(relu<double>(x), (std::vector<double>{0.0, 0.0, 2.0}));
  EXPECT_EQ(relu<double>(std::vector<double>{0.0}), (std::vector<double>{0.0}));
  EXPECT_EQ(relu<float>(std::vector<float>{-3.f, -0.5f, -1e-9f}), (std::vector<float>{0.f, 0.f, 0.f}));
}

TEST(Mse, HandValues) {
  const std::vector<double> x{1, 2, 3}, y{2, 4, 6};
  EXPECT_EQ(mse_d(x, x), 0.0);
  EXPECT_EQ(mse_d(std::vector<double>{0, 0}, std::vector<double>{1, 1}), 1.0);
  EXPECT_NEAR(mse_d(x, y), 14.0 / 3.0, 1e-15);
}

TEST(Mse, Errors) {
  EXPECT_THROW((mse_d(std::vector<double>{1}, std::vector<double>{1, 2})), Error);
  EXPECT_THROW((mse_d(std::vector<double>{}, std::vector<double>{})), Error);
}

TEST(Mse, BinaryTargetMatchesDense) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto target = random_bow(rng, 17, 6);
    std::vector<double> pred(17);
    for (double& p : pred) p = rng.uniform(0, 2);
    EXPECT_NEAR(mse_binary_target<double>(pred, target), mse_d(pred, target.to_dense<double>()), 1e-14);
  }
}

TEST(InitModel, BiasesZeroAndDeterministic) {
  const auto a = init_model<float>(30, 8, 5, true, 42);
  const auto b = init_model<float>(30, 8, 5, true, 42);
  const auto c = init_model<float>(30, 8, 5, true, 43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (const auto* l : {&a.encoder, &*a.text_head, &a.visual_head}) {
    for (float x : l->bias) EXPECT_EQ(x, 0.0f);
  }
}

TEST(InitModel, ShapesAndBranchFlag) {
  const auto m = init_model<float>(30, 8, 5, false, 1);
  EXPECT_FALSE(m.has_text_branch());
  EXPECT_EQ(m.encoder.weight.rows(), 8u);
  EXPECT_EQ(m.encoder.weight.cols(), 30u);
  EXPECT_EQ(m.visual_head.weight.rows(), 5u);
  EXPECT_EQ(m.visual_head.weight.cols(), 8u);
  EXPECT_THROW(init_model<float>(0, 8, 5, true, 1), Error);
  EXPECT_THROW(init_model<float>(3, 0, 5, true, 1), Error);
  EXPECT_THROW(init_model<float>(3, 8, 0, true, 1), Error);
}

TEST(InitModel, FanInStandardDeviationWithinBounds) {
  // W1 with 10,000 columns: 100 × 10,000 = 10^6 draws.
  const auto m = init_model<double>(10000, 100, 1, false, 9);
  const auto w = m.encoder.weight.flat();
  double sum = 0, sum_sq = 0, max_abs = 0;
  for (double x : w) {
    sum += x;
    sum_sq += x * x;
    max_abs = std::max(max_abs, std::abs(x));
  }
  const double n = static_cast<double>(w.size());
  const double mean = sum / n;
  const double sd = std::sqrt(sum_sq / n - mean * mean);
  EXPECT_NEAR(sd, 0.01, 0.01 * 0.05);
  EXPECT_LE(max_abs, 2.0 * 0.01);
  EXPECT_NEAR(mean, 0.0, 1e-4);
}

TEST(ParamCount, MatchesLayerShapes) {
  EXPECT_EQ(param_count(10358, 1024, 4096, true), 25422966u);
  EXPECT_EQ(param_count(3, 2, 2, false), 14u);
  const auto m = init_model<float>(3, 2, 2, false, 0);
  EXPECT_EQ(param_count(m), 14u);
  const auto t = init_model<float>(7, 4, 3, true, 0);
  EXPECT_EQ(param_count(t), param_count(7, 4, 3, true));
}

TEST(Forward, ZeroModelGivesZeroOutputs) {
  Model<double> m;
  m.encoder = Layer<double>(4, 6);
  m.visual_head = Layer<double>(3, 4);
  const auto fr = forward(m, BowVector{6, {0, 3, 5}});
  EXPECT_EQ(fr.z, std::vector<double>(4, 0.0));
  EXPECT_EQ(fr.v_pred, std::vector<double>(3, 0.0));
  EXPECT_FALSE(fr.t_pred.has_value());
}

TEST(Forward, HandComputedTwoDimensionalModel) {
  // vocab 2, hidden 2, text 2, visual 2.
  Model<double> m;
  m.encoder = Layer<double>(2, 2);
  m.encoder.weight(0, 0) = 1.0;
  m.encoder.weight(0, 1) = -2.0;
  m.encoder.weight(1, 0) = 0.5;
  m.encoder.weight(1, 1) = 0.25;
  m.encoder.bias = {0.1, -0.2};
  m.text_head.emplace(2, 2);
  m.text_head->weight(0, 0) = 2.0;
  m.text_head->weight(0, 1) = 1.0;
  m.text_head->weight(1, 0) = -1.0;
  m.text_head->weight(1, 1) = 0.0;
  m.text_head->bias = {0.0, 0.5};
  m.visual_head = Layer<double>(2, 2);
  m.visual_head.weight(0, 0) = 1.0;
  m.visual_head.weight(0, 1) = 1.0;
  m.visual_head.weight(1, 0) = 0.0;
  m.visual_head.weight(1, 1) = -3.0;
  m.visual_head.bias = {0.0, 1.0};
  // t_in = [1, 1]: a1 = [1 - 2 + 0.1, 0.5 + 0.25 - 0.2] = [-0.9, 0.55] -> z = [0, 0.55]
  // t' = ReLU([0.55, 0.5]) ; v' = ReLU([0.55, 1 - 1.65]) = [0.55, 0]
  const auto fr = forward(m, BowVector{2, {0, 1}});
  EXPECT_NEAR(fr.z[0], 0.0, 1e-15);
  EXPECT_NEAR(fr.z[1], 0.55, 1e-15);
  EXPECT_NEAR((*fr.t_pred)[0], 0.55, 1e-15);
  EXPECT_NEAR((*fr.t_pred)[1], 0.5, 1e-15);
  EXPECT_NEAR(fr.v_pred[0], 0.55, 1e-15);
  EXPECT_EQ(fr.v_pred[1], 0.0);
}

TEST(Forward, SparseEqualsDenseAndIsNonNegative) {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = random_model(rng, 1 + rng.index(30), 1 + rng.index(10), 1 + rng.index(10), rng.bernoulli(0.5));
    const auto bow = random_bow(rng, m.vocab_dim(), 8);
    const auto sparse = forward(m, bow);
    const auto dense = dense_forward(m, bow.to_dense<double>());
    for (std::size_t i = 0; i < sparse.z.size(); ++i) EXPECT_NEAR(sparse.z[i], dense.z[i], 1e-12);
    for (std::size_t i = 0; i < sparse.v_pred.size(); ++i) {
      EXPECT_NEAR(sparse.v_pred[i], dense.v[i], 1e-12);
      EXPECT_GE(sparse.v_pred[i], 0.0);
    }
    if (m.text_head) {
      for (std::size_t i = 0; i < sparse.t_pred->size(); ++i) {
        EXPECT_NEAR((*sparse.t_pred)[i], dense.t[i], 1e-12);
        EXPECT_GE((*sparse.t_pred)[i], 0.0);
      }
    }
  }
}

TEST(Forward, DimensionMismatchThrows) {
  const auto m = init_model<float>(5, 3, 2, true, 0);
  EXPECT_THROW(forward(m, BowVector{4, {1}}), Error);
}

// Central finite differences over every parameter of the given layers.
double max_relative_error(Model<double> m, const std::function<double(const Model<double>&)>& loss,
                          const Gradients<double>& g, bool text_branch) {
  constexpr double h = 1e-4;
  double worst = 0.0;
  auto check_layer = [&](Layer<double>& layer, const Layer<double>& grad) {
    auto probe = [&](double& param, double analytic) {
      const double saved = param;
      param = saved + h;
      const double up = loss(m);
      param = saved - h;
      const double down = loss(m);
      param = saved;
      const double numeric = (up - down) / (2 * h);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    };
    for (std::size_t i = 0; i < layer.weight.size(); ++i) probe(layer.weight.flat()[i], grad.weight.flat()[i]);
    for (std::size_t i = 0; i < layer.bias.size(); ++i) probe(layer.bias[i], grad.bias[i]);
  };
  check_layer(m.encoder, g.encoder);
  if (text_branch) {
    check_layer(*m.text_head, *g.text_head);
  } else {
    check_layer(m.visual_head, *g.visual_head);
  }
  return worst;
}

bool away_from_kinks(const Model<double>& m, const BowVector& in) {
  const auto f = dense_forward(m, in.to_dense<double>());
  auto ok = [](const std::vector<double>& a) {
    return std::all_of(a.begin(), a.end(), [](double x) { return std::abs(x) > 1e-3; });
  };
  return ok(f.a1) && ok(f.a2) && ok(f.a3);
}

TEST(Backward, TextAndVisualGradientsMatchFiniteDifferences) {
  Rng rng(123);
  int checked = 0;
  while (checked < 25) {
    auto m = random_model(rng, 2 + rng.index(19), 1 + rng.index(8), 1 + rng.index(8), true);
    const auto in = random_bow(rng, m.vocab_dim(), 5);
    if (!away_from_kinks(m, in)) continue;
    const auto out = random_bow(rng, m.vocab_dim(), 5);
    std::vector<double> v(m.visual_dim());
    for (double& x : v) x = rng.uniform(0, 1);

    const auto bt = backward_text(m, in, out);
    const auto td = out.to_dense<double>();
    EXPECT_NEAR(bt.loss, mse_d(dense_forward(m, in.to_dense<double>()).t, td), 1e-14);
    EXPECT_FALSE(bt.grads.visual_head.has_value());
    EXPECT_LT(max_relative_error(
                  m, [&](const Model<double>& mm) { return mse_d(dense_forward(mm, in.to_dense<double>()).t, td); },
                  bt.grads, true),
              1e-4);

    const auto bv = backward_visual<double>(m, in, v);
    EXPECT_FALSE(bv.grads.text_head.has_value());
    EXPECT_LT(max_relative_error(
                  m, [&](const Model<double>& mm) { return mse_d(dense_forward(mm, in.to_dense<double>()).v, v); },
                  bv.grads, false),
              1e-4);
    ++checked;
  }
}

TEST(Backward, ZeroLossAtExactTargetGivesZeroGradients) {
  Rng rng(8);
  const auto m = random_model(rng, 6, 4, 3, true);
  const BowVector in{6, {1, 4}};
  const auto fr = forward(m, in);
  const auto bv = backward_visual<double>(m, in, fr.v_pred);
  EXPECT_EQ(bv.loss, 0.0);
  for (double g : bv.grads.encoder.weight.flat()) EXPECT_EQ(g, 0.0);
  for (double g : bv.grads.visual_head->weight.flat()) EXPECT_EQ(g, 0.0);

  // A text head whose outputs are exactly the binary target.
  Model<double> tm;
  tm.encoder = Layer<double>(2, 3);
  tm.encoder.bias = {1.0, 0.5};
  tm.text_head.emplace(3, 2);
  tm.text_head->weight(0, 0) = 1.0;  // t'_0 = z_0 = 1
  tm.text_head->bias = {0.0, -1.0, 0.0};  // t'_1 = 0, t'_2 = 0
  tm.visual_head = Layer<double>(1, 2);
  const auto bt = backward_text(tm, BowVector{3, {}}, BowVector{3, {0}});
  EXPECT_EQ(bt.loss, 0.0);
  for (double g : bt.grads.encoder.bias) EXPECT_EQ(g, 0.0);
  for (double g : bt.grads.text_head->weight.flat()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, TextBranchRequiresTextHead) {
  const auto m = init_model<double>(4, 3, 2, false, 0);
  EXPECT_THROW(backward_text(m, BowVector{4, {0}}, BowVector{4, {1}}), Error);
  const std::vector<double> wrong(5, 0.0);
  EXPECT_THROW(backward_visual<double>(m, BowVector{4, {0}}, wrong), Error);
}

TEST(Backward, SmallGradientStepDecreasesVisualLoss) {
  Rng rng(31);
  int checked = 0;
  while (checked < 20) {
    auto m = random_model(rng, 10, 6, 4, false);
    const auto in = random_bow(rng, 10, 4);
    std::vector<double> v(4);
    for (double& x : v) x = rng.uniform(0, 1);
    const auto bv = backward_visual<double>(m, in, v);
    if (bv.loss == 0.0) continue;
    const double step = 1e-3;
    for (std::size_t i = 0; i < m.encoder.weight.size(); ++i)
      m.encoder.weight.flat()[i] -= step * bv.grads.encoder.weight.flat()[i];
    for (std::size_t i = 0; i < m.encoder.bias.size(); ++i) m.encoder.bias[i] -= step * bv.grads.encoder.bias[i];
    for (std::size_t i = 0; i < m.visual_head.weight.size(); ++i)
      m.visual_head.weight.flat()[i] -= step * bv.grads.visual_head->weight.flat()[i];
    for (std::size_t i = 0; i < m.visual_head.bias.size(); ++i)
      m.visual_head.bias[i] -= step * bv.grads.visual_head->bias[i];
    const double after = mse_d(forward(m, in).v_pred, v);
    // Any active unit gives a non-zero gradient, so the loss strictly drops.
    const bool any_gradient =
        std::any_of(bv.grads.visual_head->bias.begin(), bv.grads.visual_head->bias.end(), [](double g) { return g != 0; });
    if (any_gradient) {
      EXPECT_LT(after, bv.loss);
    }
    ++checked;
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  for (bool text : {true, false}) {
    const auto m = init_model<float>(13, 5, 7, text, 77);
    std::stringstream buf;
    save_checkpoint(buf, m);
    const auto back = load_checkpoint(buf);
    EXPECT_EQ(back, m);
  }
}

TEST(Checkpoint, HeaderLayoutAndErrors) {
  const auto m = init_model<float>(3, 2, 2, false, 0);
  std::stringstream buf;
  save_checkpoint(buf, m);
  const std::string bytes = buf.str();
  EXPECT_EQ(bytes.substr(0, 4), "T2VM");
  EXPECT_EQ(bytes.size(), 4 + 4 + 4 + 3 * 8 + 14 * 4);
  EXPECT_EQ(bytes[8], 0);  // flags: no text branch

  std::stringstream bad_magic("XXXX" + bytes.substr(4));
  EXPECT_THROW(load_checkpoint(bad_magic), Error);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint(truncated), Error);
  std::string wrong_version = bytes;
  wrong_version[4] = 9;
  std::stringstream wv(wrong_version);
  EXPECT_THROW(load_checkpoint(wv), Error);
}

}  // namespace
}  // namespace text2vis
