#pragma once

// Training: triple sampling, the Stochastic Loss loop with one Adam instance
// per branch, the aggregated-loss baseline, the visual-only regressor and
// validation-driven early stopping.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "text2vis/adam.hpp"
#include "text2vis/data.hpp"
#include "text2vis/error.hpp"
#include "text2vis/nn.hpp"
#include "text2vis/random.hpp"
#include "text2vis/textvec.hpp"

namespace text2vis {

// An image with its captions already vectorized.
struct EncodedImage {
  ImageId id = 0;
  std::vector<float> feature;
  std::vector<BowVector> captions;
};

inline std::vector<EncodedImage> encode_images(std::span<const CaptionedImage> images, const TextEncoder& encoder) {
  std::vector<EncodedImage> out;
  out.reserve(images.size());
  for (const auto& im : images) {
    EncodedImage e{im.id, im.feature, {}};
    for (const auto& c : im.captions) e.captions.push_back(encoder.encode(c));
    out.push_back(std::move(e));
  }
  return out;
}

struct TrainTriple {
  std::span<const float> v;
  const BowVector* t_in = nullptr;
  const BowVector* t_out = nullptr;
  std::size_t in_caption = 0;
  std::size_t out_caption = 0;
};

// t_in and t_out are drawn independently and uniformly from the image's captions.
inline TrainTriple sample_triple(const EncodedImage& image, Rng& rng) {
  if (image.captions.empty()) throw Error("image " + std::to_string(image.id) + " has no captions");
  const auto n = image.captions.size();
  TrainTriple t;
  t.v = image.feature;
  t.in_caption = static_cast<std::size_t>(rng.index(n));
  t.out_caption = static_cast<std::size_t>(rng.index(n));
  t.t_in = &image.captions[t.in_caption];
  t.t_out = &image.captions[t.out_caption];
  return t;
}

struct HistoryRecord {
  std::size_t iteration = 0;
  std::optional<double> train_loss_t;
  std::optional<double> train_loss_v;
  std::optional<double> val_loss_t;
  std::optional<double> val_loss_v;
};

struct TrainConfig {
  std::size_t batch_size = 100;
  std::size_t max_iterations = 300000;
  std::size_t eval_every = 500;
  std::size_t patience = 10;
  bool early_stopping = true;
  double sl_prob_visual = 0.5;
  std::uint64_t seed = 0;
  AdamHyper adam;
  std::size_t train_eval_limit = 1000;  // training-set images used for train losses
  std::function<void(const HistoryRecord&)> on_record;  // called after each evaluation

  void validate() const {
    if (batch_size == 0) throw Error("batch_size must be >= 1");
    if (eval_every == 0) throw Error("eval_every must be >= 1");
    if (!(sl_prob_visual >= 0.0 && sl_prob_visual <= 1.0)) throw Error("sl_prob_visual must lie in [0, 1]");
    adam.validate();
  }
};

struct TrainHistory {
  std::vector<HistoryRecord> records;

  void write_csv(std::ostream& out) const {
    out << "iteration,train_loss_t,train_loss_v,val_loss_t,val_loss_v\n";
    auto put = [&out](const std::optional<double>& x) {
      if (x) {
        std::ostringstream s;
        s << std::setprecision(17) << *x;
        out << s.str();
      }
    };
    for (const auto& r : records) {
      out << r.iteration << ',';
      put(r.train_loss_t);
      out << ',';
      put(r.train_loss_v);
      out << ',';
      put(r.val_loss_t);
      out << ',';
      put(r.val_loss_v);
      out << '\n';
    }
  }
};

struct EarlyStopDecision {
  bool stop = false;
  std::size_t best_index = 0;  // index into history.records
};

// Stops once val_loss_v has failed to improve on its running minimum for
// `patience` consecutive evaluations (patience 0 behaves like 1).
inline EarlyStopDecision early_stop_check(const TrainHistory& history, std::size_t patience) {
  if (history.records.empty()) throw Error("early_stop_check: empty history");
  EarlyStopDecision d;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t i = 0; i < history.records.size(); ++i) {
    const auto& v = history.records[i].val_loss_v;
    if (v && *v < best) {
      best = *v;
      d.best_index = i;
      since_best = 0;
    } else {
      ++since_best;
    }
  }
  d.stop = since_best > 0 && since_best >= std::max<std::size_t>(patience, 1);
  return d;
}

struct LossEstimate {
  std::optional<double> text;
  double visual = 0.0;
};

// Expected branch losses under uniform triple sampling over `images`: the
// visual loss averages over every caption as input, the text loss over every
// (input, output) caption pair.
inline LossEstimate expected_losses(const Model<float>& model, std::span<const EncodedImage> images) {
  if (images.empty()) throw Error("expected_losses: no images");
  double sum_v = 0.0, sum_t = 0.0;
  for (const auto& im : images) {
    double img_v = 0.0, img_t = 0.0;
    for (const auto& c : im.captions) {
      const auto fr = forward(model, c);
      img_v += mse<float, float>(fr.v_pred, im.feature);
      if (fr.t_pred) {
        double pair_t = 0.0;
        for (const auto& target : im.captions) pair_t += mse_binary_target<float>(*fr.t_pred, target);
        img_t += pair_t / static_cast<double>(im.captions.size());
      }
    }
    sum_v += img_v / static_cast<double>(im.captions.size());
    sum_t += img_t / static_cast<double>(im.captions.size());
  }
  LossEstimate est;
  const auto n = static_cast<double>(images.size());
  est.visual = sum_v / n;
  if (model.has_text_branch()) est.text = sum_t / n;
  return est;
}

enum class Strategy { StochasticLoss, Aggregated, VisualOnly };

struct TrainResult {
  Model<float> model;  // best-validation checkpoint
  TrainHistory history;
  std::size_t best_iteration = 0;
  std::size_t iterations_run = 0;
  bool stopped_early = false;
  std::uint64_t text_optimizer_steps = 0;
  std::uint64_t visual_optimizer_steps = 0;
  std::uint64_t joint_optimizer_steps = 0;
  double update_seconds = 0.0;  // wall time in parameter updates, evaluation excluded

  double seconds_per_iteration() const {
    return iterations_run == 0 ? 0.0 : update_seconds / static_cast<double>(iterations_run);
  }
};

namespace detail {

inline std::vector<std::size_t> tensor_sizes(const std::vector<std::span<float>>& tensors) {
  std::vector<std::size_t> out;
  for (const auto& t : tensors) out.push_back(t.size());
  return out;
}

inline void append_layer(std::vector<std::span<float>>& params, Layer<float>& layer) {
  params.push_back(layer.weight.flat());
  params.push_back(layer.bias);
}

inline void append_layer(std::vector<std::span<const float>>& grads, const Layer<float>& layer) {
  grads.push_back(layer.weight.flat());
  grads.push_back(layer.bias);
}

inline void check_finite(double loss, std::size_t iteration, const char* branch) {
  if (!std::isfinite(loss)) {
    throw Error("training diverged: non-finite " + std::string(branch) + " loss at iteration " +
                std::to_string(iteration));
  }
}

inline TrainResult run_training(std::span<const EncodedImage> train, std::span<const EncodedImage> validation,
                                Model<float> model, const TrainConfig& cfg, Strategy strategy, double lambda) {
  cfg.validate();
  if (train.empty() || validation.empty()) throw Error("training and validation sets must be non-empty");
  if (strategy != Strategy::VisualOnly && !model.has_text_branch()) {
    throw Error("this training strategy needs a model with a text branch");
  }
  if (strategy == Strategy::VisualOnly && model.has_text_branch()) {
    throw Error("the visual-only regressor must not carry a text branch");
  }
  for (const auto* set : {&train, &validation}) {
    for (const auto& im : *set) {
      if (im.feature.size() != model.visual_dim()) {
        throw Error("image " + std::to_string(im.id) + " feature dimension " + std::to_string(im.feature.size()) +
                    " does not match model visual dimension " + std::to_string(model.visual_dim()));
      }
      for (const auto& c : im.captions) {
        if (c.dim != model.vocab_dim()) throw Error("caption encoding does not match model vocabulary");
      }
    }
  }

  Rng rng(cfg.seed);
  TrainResult result;

  // Views into the parameters each optimizer owns.
  std::vector<std::span<float>> text_params, visual_params, joint_params;
  append_layer(visual_params, model.encoder);
  append_layer(visual_params, model.visual_head);
  if (model.text_head) {
    append_layer(text_params, model.encoder);
    append_layer(text_params, *model.text_head);
    append_layer(joint_params, model.encoder);
    append_layer(joint_params, *model.text_head);
    append_layer(joint_params, model.visual_head);
  }

  Adam<float> text_adam, visual_adam, joint_adam;
  if (strategy == Strategy::Aggregated) {
    joint_adam = Adam<float>(tensor_sizes(joint_params), cfg.adam);
  } else {
    visual_adam = Adam<float>(tensor_sizes(visual_params), cfg.adam);
    if (model.text_head) text_adam = Adam<float>(tensor_sizes(text_params), cfg.adam);
  }

  Gradients<float> grads = Gradients<float>::zeros_like(model, model.has_text_branch(), true);

  const auto train_eval = train.first(std::min(train.size(), std::max<std::size_t>(cfg.train_eval_limit, 1)));
  Model<float> best_model = model;
  std::size_t best_index = 0;

  auto evaluate_now = [&](std::size_t iteration) {
    const auto tr = expected_losses(model, train_eval);
    const auto va = expected_losses(model, validation);
    check_finite(va.visual, iteration, "validation visual");
    if (va.text) check_finite(*va.text, iteration, "validation text");
    result.history.records.push_back({iteration, tr.text, tr.visual, va.text, va.visual});
    if (cfg.on_record) cfg.on_record(result.history.records.back());
    const auto decision = early_stop_check(result.history, cfg.patience);
    if (decision.best_index + 1 == result.history.records.size()) best_model = model;
    best_index = decision.best_index;
    return decision.stop;
  };

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  std::size_t cursor = 0;

  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
  bool stop = evaluate_now(0) && cfg.early_stopping;
  std::size_t iteration = 0;
  while (!stop && iteration < cfg.max_iterations) {
    const auto t0 = std::chrono::steady_clock::now();

    bool use_visual = true, use_text = false;
    if (strategy == Strategy::StochasticLoss) {
      use_visual = rng.bernoulli(cfg.sl_prob_visual);
      use_text = !use_visual;
    } else if (strategy == Strategy::Aggregated) {
      use_text = lambda != 0.0;
    }

    grads.set_zero();
    double batch_t = 0.0, batch_v = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      const auto triple = sample_triple(train[order[cursor++]], rng);
      const double text_w = use_text ? (strategy == Strategy::Aggregated ? lambda : 1.0) * inv_batch : 0.0;
      const double visual_w = use_visual ? inv_batch : 0.0;
      const auto loss =
          accumulate_example_gradients<float>(model, *triple.t_in, triple.t_out, triple.v, text_w, visual_w, grads);
      if (loss.text) batch_t += *loss.text;
      if (loss.visual) batch_v += *loss.visual;
    }
    check_finite(batch_t, iteration, "text");
    check_finite(batch_v, iteration, "visual");

    std::vector<std::span<const float>> g;
    if (strategy == Strategy::Aggregated) {
      append_layer(g, grads.encoder);
      append_layer(g, *grads.text_head);
      append_layer(g, *grads.visual_head);
      joint_adam.step(joint_params, g);
    } else if (use_visual) {
      append_layer(g, grads.encoder);
      append_layer(g, *grads.visual_head);
      visual_adam.step(visual_params, g);
    } else {
      append_layer(g, grads.encoder);
      append_layer(g, *grads.text_head);
      text_adam.step(text_params, g);
    }
    ++iteration;
    result.update_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (iteration % cfg.eval_every == 0 || iteration == cfg.max_iterations) {
      stop = evaluate_now(iteration) && cfg.early_stopping;
    }
  }

  result.iterations_run = iteration;
  result.stopped_early = stop;
  result.best_iteration = result.history.records[best_index].iteration;
  result.text_optimizer_steps = text_adam.step_count();
  result.visual_optimizer_steps = visual_adam.step_count();
  result.joint_optimizer_steps = joint_adam.step_count();
  result.model = std::move(best_model);
  return result;
}

}  // namespace detail

// Stochastic Loss: each iteration a coin with P(visual) = sl_prob_visual picks
// one branch; only that branch's parameters and its own Adam move.
inline TrainResult sl_train(std::span<const EncodedImage> train, std::span<const EncodedImage> validation,
                            Model<float> model, const TrainConfig& cfg) {
  return detail::run_training(train, validation, std::move(model), cfg, Strategy::StochasticLoss, 0.0);
}

// L = L_v + lambda * L_t minimized by a single Adam over all parameters.
inline TrainResult aggregated_train(std::span<const EncodedImage> train, std::span<const EncodedImage> validation,
                                    Model<float> model, const TrainConfig& cfg, double lambda) {
  if (!std::isfinite(lambda) || lambda < 0.0) throw Error("lambda must be a finite value >= 0");
  return detail::run_training(train, validation, std::move(model), cfg, Strategy::Aggregated, lambda);
}

// Text-to-visual regressor without the text branch.
inline TrainResult visreg_train(std::span<const EncodedImage> train, std::span<const EncodedImage> validation,
                                Model<float> model, const TrainConfig& cfg) {
  return detail::run_training(train, validation, std::move(model), cfg, Strategy::VisualOnly, 0.0);
}

}  // namespace text2vis
