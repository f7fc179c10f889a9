#pragma once

// Ranking evaluation: ROUGE-L caption relevance, DCG@p, baseline rankers and
// per-method / pairwise reports.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "text2vis/data.hpp"
#include "text2vis/error.hpp"
#include "text2vis/nn.hpp"
#include "text2vis/random.hpp"
#include "text2vis/retrieval.hpp"
#include "text2vis/textvec.hpp"

namespace text2vis {

// Longest common subsequence length, O(|a|·|b|) time and O(|b|) memory.
template <typename T>
std::size_t lcs_length(std::span<const T> a, std::span<const T> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// LCS-based F-measure: R = lcs/|reference|, P = lcs/|candidate|,
// F = (1 + beta^2) R P / (R + beta^2 P). Zero when either side is empty.
inline double rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference,
                      double beta = 1.2) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const auto lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double recall = lcs / static_cast<double>(reference.size());
  const double precision = lcs / static_cast<double>(candidate.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * recall * precision / (recall + b2 * precision);
}

enum class RelevanceAggregation {
  MaxF,   // best F over the references
  MaxPR,  // F of the best precision and best recall taken separately (coco-caption style)
};

struct RougeOptions {
  double beta = 1.2;
  RelevanceAggregation aggregation = RelevanceAggregation::MaxF;
};

// ROUGE-L of the query against a retrieved image's captions.
inline double relevance(std::span<const std::string> query, std::span<const std::vector<std::string>> references,
                        const RougeOptions& opt = {}) {
  if (references.empty()) throw Error("relevance: image has no reference captions");
  if (opt.aggregation == RelevanceAggregation::MaxF) {
    double best = 0.0;
    for (const auto& ref : references) best = std::max(best, rouge_l(query, ref, opt.beta));
    return best;
  }
  double best_p = 0.0, best_r = 0.0;
  for (const auto& ref : references) {
    if (query.empty() || ref.empty()) continue;
    const auto lcs = static_cast<double>(lcs_length<std::string>(query, ref));
    best_p = std::max(best_p, lcs / static_cast<double>(query.size()));
    best_r = std::max(best_r, lcs / static_cast<double>(ref.size()));
  }
  if (best_p == 0.0 || best_r == 0.0) return 0.0;
  const double b2 = opt.beta * opt.beta;
  return (1.0 + b2) * best_p * best_r / (best_r + b2 * best_p);
}

// sum_{i=1}^{min(p, n)} (2^rel_i - 1) / log2(i + 1)
inline double dcg(std::span<const double> rels, std::size_t p) {
  if (p == 0) throw Error("dcg: p must be >= 1");
  const std::size_t n = std::min(p, rels.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sum += (std::exp2(rels[i]) - 1.0) / std::log2(static_cast<double>(i) + 2.0);
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Rankers

// k ids drawn uniformly without replacement (distance reported as rank).
inline RankedList rrank_ranking(std::span<const ImageId> ids, Rng& rng, std::size_t k,
                                std::optional<ImageId> exclude_id = std::nullopt) {
  std::vector<ImageId> pool;
  pool.reserve(ids.size());
  for (auto id : ids) {
    if (!exclude_id || id != *exclude_id) pool.push_back(id);
  }
  if (k > pool.size()) throw Error("rrank: k exceeds the number of candidates");
  // Partial Fisher-Yates: the first k slots become the sample.
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.index(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  RankedList out;
  out.query_id = exclude_id;
  for (std::size_t i = 0; i < k; ++i) out.entries.push_back({pool[i], static_cast<double>(i)});
  return out;
}

// Similarity to the query caption's own image feature.
inline RankedList vissim_ranking(const VisualIndex& index, std::span<const float> query_feature, std::size_t k,
                                 std::optional<ImageId> exclude_id) {
  return index.query(query_feature, k, exclude_id);
}

// Ranking from a predicted visual vector. An all-zero prediction (every ReLU
// unit off) is at distance 1 from every unit row, so the ranking falls back to
// id order.
template <typename T>
RankedList rank_prediction(const VisualIndex& index, std::span<const T> prediction, std::size_t k,
                           std::optional<ImageId> exclude_id) {
  const bool all_zero = std::all_of(prediction.begin(), prediction.end(), [](T x) { return x == T{0}; });
  if (!all_zero) return index.query(prediction, k, exclude_id);
  RankedList out;
  out.query_id = exclude_id;
  for (auto id : index.ids()) {
    if (!exclude_id || id != *exclude_id) out.entries.push_back({id, 1.0});
  }
  std::sort(out.entries.begin(), out.entries.end(), ranks_before);
  out.entries.resize(std::min(k, out.entries.size()));
  return out;
}

// Text-to-visual ranker backed by a trained model.
class ModelRanker {
 public:
  ModelRanker(const Model<float>& model, const Vocabulary& vocab, const VisualIndex& index,
              const Lexicon& lexicon = Lexicon::builtin())
      : model_(&model), encoder_(vocab, lexicon), index_(&index) {
    if (model.vocab_dim() != vocab.size()) {
      throw Error("model vocabulary (" + std::to_string(model.vocab_dim()) + ") does not match vocabulary file (" +
                  std::to_string(vocab.size()) + ")");
    }
    if (model.visual_dim() != index.dim()) {
      throw Error("model visual dimension (" + std::to_string(model.visual_dim()) +
                  ") does not match feature dimension (" + std::to_string(index.dim()) + ")");
    }
  }

  std::vector<float> predict(std::string_view text) const {
    return forward(*model_, encoder_.encode(text), Heads::VisualOnly).v_pred;
  }

  RankedList rank(std::string_view text, std::size_t k, std::optional<ImageId> exclude_id) const {
    const auto v = predict(text);
    return rank_prediction<float>(*index_, v, k, exclude_id);
  }

 private:
  const Model<float>* model_;
  TextEncoder encoder_;
  const VisualIndex* index_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalQuery {
  ImageId query_id = 0;  // identifies the query in reports
  ImageId image_id = 0;  // the image the caption belongs to
  std::string caption;
};

// One query per image, from its first caption, in input order.
inline std::vector<EvalQuery> first_caption_queries(std::span<const CaptionedImage> images) {
  std::vector<EvalQuery> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back({im.id, im.id, im.captions.at(0)});
  return out;
}

using Ranker = std::function<RankedList(const EvalQuery&, std::size_t k, std::optional<ImageId> exclude_id)>;

struct NamedRanker {
  std::string name;
  Ranker rank;
};

struct EvalOptions {
  std::size_t p = 25;
  RougeOptions rouge;
  bool exclude_query_image = true;
};

struct PairwiseComparison {
  std::string method_a;
  std::string method_b;
  double win_rate = 0.0;       // fraction of queries with dcg_a > dcg_b, ties counted half
  std::vector<double> deltas;  // dcg_a - dcg_b per query, sorted ascending

  // (delta, fraction of queries with difference <= delta) at each distinct delta.
  std::vector<std::pair<double, double>> cdf() const {
    std::vector<std::pair<double, double>> out;
    const auto n = static_cast<double>(deltas.size());
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      if (i + 1 < deltas.size() && deltas[i + 1] == deltas[i]) continue;
      out.emplace_back(deltas[i], static_cast<double>(i + 1) / n);
    }
    return out;
  }
};

struct EvalReport {
  std::size_t p = 25;
  std::vector<std::string> methods;
  std::vector<ImageId> query_ids;
  std::vector<std::vector<double>> dcg;  // [method][query]
  std::vector<PairwiseComparison> pairs;

  std::size_t method_index(std::string_view name) const {
    const auto it = std::find(methods.begin(), methods.end(), name);
    if (it == methods.end()) throw Error("no method named " + std::string(name) + " in report");
    return static_cast<std::size_t>(it - methods.begin());
  }

  double mean_dcg(std::string_view name) const {
    const auto& v = dcg[method_index(name)];
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }

  const PairwiseComparison& pair(std::string_view a, std::string_view b) const {
    for (const auto& pc : pairs) {
      if (pc.method_a == a && pc.method_b == b) return pc;
    }
    throw Error("no comparison " + std::string(a) + " vs " + std::string(b) + " in report");
  }

  // Win rate of a over b, in either stored orientation.
  double win_rate(std::string_view a, std::string_view b) const {
    for (const auto& pc : pairs) {
      if (pc.method_a == a && pc.method_b == b) return pc.win_rate;
      if (pc.method_a == b && pc.method_b == a) return 1.0 - pc.win_rate;
    }
    throw Error("no comparison " + std::string(a) + " vs " + std::string(b) + " in report");
  }

  void write_summary_csv(std::ostream& out) const {
    out << "method,mean_dcg,p\n";
    out.precision(17);
    for (const auto& m : methods) out << m << ',' << mean_dcg(m) << ',' << p << '\n';
  }

  void write_per_query_csv(std::ostream& out) const {
    out << "query_id,method,dcg\n";
    out.precision(17);
    for (std::size_t q = 0; q < query_ids.size(); ++q) {
      for (std::size_t m = 0; m < methods.size(); ++m) out << query_ids[q] << ',' << methods[m] << ',' << dcg[m][q] << '\n';
    }
  }

  static void write_cdf_csv(std::ostream& out, const PairwiseComparison& pc) {
    out << "delta,cumulative_fraction\n";
    out.precision(17);
    for (const auto& [delta, frac] : pc.cdf()) out << delta << ',' << frac << '\n';
  }
};

// Relevance lookup: tokenized captions per image id.
class CaptionBank {
 public:
  explicit CaptionBank(std::span<const CaptionedImage> images) {
    for (const auto& im : images) {
      std::vector<std::vector<std::string>> toks;
      for (const auto& c : im.captions) toks.push_back(surfaces(tokenize(c)));
      tokens_.emplace(im.id, std::move(toks));
    }
  }

  const std::vector<std::vector<std::string>>& captions(ImageId id) const {
    const auto it = tokens_.find(id);
    if (it == tokens_.end()) throw Error("no captions for retrieved image " + std::to_string(id));
    return it->second;
  }

 private:
  std::unordered_map<ImageId, std::vector<std::vector<std::string>>> tokens_;
};

inline EvalReport evaluate(std::span<const NamedRanker> methods, std::span<const EvalQuery> queries,
                           const CaptionBank& bank, const EvalOptions& opt = {}) {
  if (methods.empty()) throw Error("evaluate: no methods");
  if (opt.p == 0) throw Error("evaluate: p must be >= 1");
  EvalReport report;
  report.p = opt.p;
  for (const auto& m : methods) report.methods.push_back(m.name);
  report.dcg.assign(methods.size(), {});
  for (const auto& q : queries) {
    report.query_ids.push_back(q.query_id);
    const auto query_tokens = surfaces(tokenize(q.caption));
    const std::optional<ImageId> exclude =
        opt.exclude_query_image ? std::optional<ImageId>(q.image_id) : std::nullopt;
    for (std::size_t m = 0; m < methods.size(); ++m) {
      const RankedList ranking = methods[m].rank(q, opt.p, exclude);
      std::vector<double> rels;
      rels.reserve(ranking.entries.size());
      for (const auto& e : ranking.entries) rels.push_back(relevance(query_tokens, bank.captions(e.image_id), opt.rouge));
      report.dcg[m].push_back(dcg(rels, opt.p));
    }
  }
  for (std::size_t a = 0; a < methods.size(); ++a) {
    for (std::size_t b = a + 1; b < methods.size(); ++b) {
      PairwiseComparison pc{methods[a].name, methods[b].name, 0.0, {}};
      double wins = 0.0;
      for (std::size_t q = 0; q < queries.size(); ++q) {
        const double d = report.dcg[a][q] - report.dcg[b][q];
        pc.deltas.push_back(d);
        wins += d > 0.0 ? 1.0 : (d == 0.0 ? 0.5 : 0.0);
      }
      pc.win_rate = queries.empty() ? 0.5 : wins / static_cast<double>(queries.size());
      std::sort(pc.deltas.begin(), pc.deltas.end());
      report.pairs.push_back(std::move(pc));
    }
  }
  return report;
}

}  // namespace text2vis
