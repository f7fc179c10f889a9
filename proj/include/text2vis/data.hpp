#pragma once

// Dataset plumbing: caption documents, binary feature files, seeded splits
// and a latent-topic generator producing captioned images with features.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "text2vis/binary_io.hpp"
#include "text2vis/error.hpp"
#include "text2vis/matrix.hpp"
#include "text2vis/types.hpp"
#include "text2vis/random.hpp"
#include "text2vis/textvec.hpp"

namespace text2vis {

struct CaptionRecord {
  ImageId id = 0;
  std::vector<std::string> captions;

  friend bool operator==(const CaptionRecord&, const CaptionRecord&) = default;
};

struct CaptionedImage {
  ImageId id = 0;
  std::vector<std::string> captions;
  std::vector<float> feature;
};

// ---------------------------------------------------------------------------
// Caption documents: [{"id": <u64>, "captions": ["...", ...]}, ...]

inline std::vector<CaptionRecord> parse_captions(const nlohmann::json& doc) {
  if (!doc.is_array()) throw Error("captions document: top level must be an array");
  std::vector<CaptionRecord> records;
  records.reserve(doc.size());
  std::unordered_set<ImageId> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& el = doc[i];
    const std::string where = "captions document element " + std::to_string(i);
    if (!el.is_object()) throw Error(where + ": expected an object");
    if (!el.contains("id") || !el["id"].is_number_unsigned()) {
      throw Error(where + ": missing or non-integer \"id\"");
    }
    if (!el.contains("captions") || !el["captions"].is_array()) {
      throw Error(where + ": missing \"captions\" array");
    }
    CaptionRecord rec;
    rec.id = el["id"].get<ImageId>();
    for (const auto& c : el["captions"]) {
      if (!c.is_string()) throw Error(where + ": caption is not a string");
      rec.captions.push_back(c.get<std::string>());
    }
    if (rec.captions.empty()) throw Error(where + ": \"captions\" is empty");
    if (!seen.insert(rec.id).second) throw Error(where + ": duplicate image id " + std::to_string(rec.id));
    records.push_back(std::move(rec));
  }
  return records;
}

inline std::vector<CaptionRecord> load_captions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open captions file: " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("captions file " + path + ": " + e.what());
  }
  return parse_captions(doc);
}

inline nlohmann::json captions_to_json(std::span<const CaptionRecord> records) {
  auto doc = nlohmann::json::array();
  for (const auto& r : records) doc.push_back({{"id", r.id}, {"captions", r.captions}});
  return doc;
}

inline void save_captions(const std::string& path, std::span<const CaptionRecord> records) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write captions file: " + path);
  out << captions_to_json(records).dump(1) << '\n';
  if (!out) throw Error("failed writing captions file: " + path);
}

// ---------------------------------------------------------------------------
// Feature files: "T2VF", version u32, N u64, D u64, N ids as u64, then the
// N × D matrix as row-major f32, little-endian throughout.

inline constexpr std::string_view kFeatureMagic = "T2VF";
inline constexpr std::uint32_t kFeatureVersion = 1;

struct FeatureTable {
  std::vector<ImageId> ids;
  Matrix<float> features;  // one row per id

  friend bool operator==(const FeatureTable&, const FeatureTable&) = default;
};

inline void save_features(std::ostream& out, std::span<const ImageId> ids, const Matrix<float>& features) {
  if (ids.empty() || features.empty()) throw Error("cannot save an empty feature matrix");
  if (features.rows() != ids.size()) {
    throw Error("feature matrix has " + std::to_string(features.rows()) + " rows but " +
                std::to_string(ids.size()) + " ids were given");
  }
  if (std::unordered_set<ImageId>(ids.begin(), ids.end()).size() != ids.size()) {
    throw Error("duplicate image id in feature table");
  }
  binary::write_magic(out, kFeatureMagic);
  binary::write_scalar<std::uint32_t>(out, kFeatureVersion);
  binary::write_scalar<std::uint64_t>(out, features.rows());
  binary::write_scalar<std::uint64_t>(out, features.cols());
  binary::write_array<ImageId>(out, ids);
  binary::write_array<float>(out, features.flat());
}

inline void save_features(const std::string& path, std::span<const ImageId> ids, const Matrix<float>& features) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write feature file: " + path);
  save_features(out, ids, features);
  if (!out) throw Error("failed writing feature file: " + path);
}

inline FeatureTable load_features(std::istream& in) {
  binary::expect_magic(in, kFeatureMagic);
  const auto version = binary::read_scalar<std::uint32_t>(in, "feature version");
  if (version != kFeatureVersion) {
    throw Error("unsupported feature file version " + std::to_string(version) + " (expected " +
                std::to_string(kFeatureVersion) + ")");
  }
  const auto n = binary::read_scalar<std::uint64_t>(in, "row count");
  const auto d = binary::read_scalar<std::uint64_t>(in, "dimension");
  if (n == 0 || d == 0) throw Error("feature file holds an empty matrix");
  constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
  if (n > kMax / d || n * d > kMax / sizeof(float) - n) throw Error("feature file dimension overflow");
  const std::uint64_t payload = n * sizeof(ImageId) + n * d * sizeof(float);
  if (binary::remaining_bytes(in) < payload) throw Error("truncated feature file");

  FeatureTable table;
  table.ids.resize(n);
  binary::read_array<ImageId>(in, table.ids, "image ids");
  table.features = Matrix<float>(n, d);
  binary::read_array<float>(in, table.features.flat(), "feature matrix");
  return table;
}

inline FeatureTable load_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open feature file: " + path);
  return load_features(in);
}

// Joins caption records with their features by id. Every captioned image must
// have a finite, non-zero feature; features without captions are ignored.
inline std::vector<CaptionedImage> assemble_dataset(std::span<const CaptionRecord> records,
                                                    const FeatureTable& table) {
  std::unordered_map<ImageId, std::size_t> row_of;
  for (std::size_t r = 0; r < table.ids.size(); ++r) {
    if (!row_of.try_emplace(table.ids[r], r).second) {
      throw Error("duplicate image id " + std::to_string(table.ids[r]) + " in feature table");
    }
  }
  std::vector<CaptionedImage> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    const auto it = row_of.find(rec.id);
    if (it == row_of.end()) throw Error("image " + std::to_string(rec.id) + " has captions but no feature");
    const auto row = table.features.row(it->second);
    bool nonzero = false;
    for (float x : row) {
      if (!std::isfinite(x)) throw Error("image " + std::to_string(rec.id) + " has a non-finite feature");
      nonzero = nonzero || x != 0.0f;
    }
    if (!nonzero) throw Error("image " + std::to_string(rec.id) + " has an all-zero feature");
    out.push_back(CaptionedImage{rec.id, rec.captions, std::vector<float>(row.begin(), row.end())});
  }
  return out;
}

// ---------------------------------------------------------------------------

struct SplitFractions {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

struct DatasetSplit {
  std::vector<CaptionedImage> train;
  std::vector<CaptionedImage> validation;
  std::vector<CaptionedImage> test;
};

// Seeded shuffle, then consecutive partition. Train and validation sizes are
// rounded to nearest; test receives the remainder.
inline DatasetSplit split_dataset(std::vector<CaptionedImage> images, SplitFractions f, std::uint64_t seed) {
  const double sum = f.train + f.validation + f.test;
  if (f.train < 0 || f.validation < 0 || f.test < 0 || std::abs(sum - 1.0) > 1e-9) {
    throw Error("split fractions must be non-negative and sum to 1");
  }
  std::unordered_set<ImageId> ids;
  for (const auto& im : images) {
    if (!ids.insert(im.id).second) throw Error("duplicate image id " + std::to_string(im.id) + " in dataset");
  }
  Rng rng(seed);
  rng.shuffle(std::span<CaptionedImage>(images));
  const std::size_t n = images.size();
  const auto n_train = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(f.train * n)));
  const auto n_val = std::min<std::size_t>(n - n_train, static_cast<std::size_t>(std::llround(f.validation * n)));
  DatasetSplit split;
  auto move_range = [&](std::size_t from, std::size_t to, std::vector<CaptionedImage>& dst) {
    dst.assign(std::make_move_iterator(images.begin() + static_cast<std::ptrdiff_t>(from)),
               std::make_move_iterator(images.begin() + static_cast<std::ptrdiff_t>(to)));
  };
  move_range(0, n_train, split.train);
  move_range(n_train, n_train + n_val, split.validation);
  move_range(n_train + n_val, n, split.test);
  return split;
}

// ---------------------------------------------------------------------------
// Latent-topic generator.
//
// Each topic owns a slice of content words (nouns, verbs, adjectives drawn
// from the bundled lexicon) and a non-negative visual prototype. An image
// draws 1..3 topics and one nuisance factor; its feature is
// ReLU(mean(topic prototypes) + nuisance_weight * nuisance prototype + noise).
// Nuisance factors never show up in captions, so the raw feature carries
// content that text cannot explain. Captions are phrase templates whose
// content slots are filled from the image's topics.

struct SynthConfig {
  std::size_t num_topics = 10;
  std::size_t vocab_size = 200;  // topic-bearing content words
  std::size_t visual_dim = 64;
  std::size_t num_images = 2000;
  std::size_t captions_per_image = 5;
  std::size_t caption_len_min = 6;
  std::size_t caption_len_max = 12;
  std::size_t topics_per_image_min = 1;
  std::size_t topics_per_image_max = 3;
  double noise_sigma = 0.1;
  std::size_t num_nuisance = 8;
  double nuisance_weight = 0.6;
  double topic_word_leak = 0.1;  // chance a slot takes any word of its tag
  std::uint64_t seed = 7;

  void validate() const {
    auto need = [](bool ok, const char* msg) {
      if (!ok) throw Error(std::string("invalid synthetic config: ") + msg);
    };
    need(num_topics >= 1 && vocab_size >= 1 && visual_dim >= 1 && num_images >= 1 && captions_per_image >= 1,
         "all counts must be >= 1");
    need(vocab_size >= 4 * num_topics, "vocab_size must be at least 4 * num_topics");
    need(caption_len_min >= 2 && caption_len_min <= caption_len_max, "caption length range must satisfy 2 <= min <= max");
    need(topics_per_image_min >= 1 && topics_per_image_min <= topics_per_image_max &&
             topics_per_image_max <= num_topics,
         "topics per image range must satisfy 1 <= min <= max <= num_topics");
    need(noise_sigma >= 0.0 && nuisance_weight >= 0.0, "noise_sigma and nuisance_weight must be >= 0");
    need(topic_word_leak >= 0.0 && topic_word_leak <= 1.0, "topic_word_leak must lie in [0, 1]");
  }
};

struct SyntheticDataset {
  std::vector<CaptionedImage> images;
  std::vector<std::vector<std::size_t>> image_topics;  // sorted, per image
  std::vector<std::size_t> image_nuisance;             // per image; meaningless when num_nuisance == 0
  std::vector<std::vector<std::string>> topic_words;
  Matrix<float> topic_prototypes;

  nlohmann::json ground_truth_json(const SynthConfig& cfg) const {
    nlohmann::json j;
    j["config"] = {{"num_topics", cfg.num_topics},
                   {"vocab_size", cfg.vocab_size},
                   {"visual_dim", cfg.visual_dim},
                   {"num_images", cfg.num_images},
                   {"captions_per_image", cfg.captions_per_image},
                   {"caption_len_min", cfg.caption_len_min},
                   {"caption_len_max", cfg.caption_len_max},
                   {"topics_per_image_min", cfg.topics_per_image_min},
                   {"topics_per_image_max", cfg.topics_per_image_max},
                   {"noise_sigma", cfg.noise_sigma},
                   {"num_nuisance", cfg.num_nuisance},
                   {"nuisance_weight", cfg.nuisance_weight},
                   {"topic_word_leak", cfg.topic_word_leak},
                   {"seed", cfg.seed}};
    j["topic_words"] = topic_words;
    auto imgs = nlohmann::json::array();
    for (std::size_t i = 0; i < images.size(); ++i) {
      imgs.push_back({{"id", images[i].id}, {"topics", image_topics[i]}, {"nuisance", image_nuisance[i]}});
    }
    j["images"] = std::move(imgs);
    return j;
  }
};

namespace detail {

struct Slot {
  std::string literal;       // fixed word, when tag is empty
  std::optional<PosTag> tag;  // content slot
};

inline const std::vector<std::vector<Slot>>& phrase_templates() {
  using enum PosTag;
  static const std::vector<std::vector<Slot>> templates{
      {{"a", {}}, {"", Adj}, {"", Noun}},
      {{"a", {}}, {"", Noun}, {"", Verb}},
      {{"", Num}, {"", Noun}},
      {{"", Verb}, {"", Prt}},
      {{"the", {}}, {"", Noun}, {"", Noun}},
      {{"a", {}}, {"", Noun}, {"is", {}}, {"", Verb}},
      {{"on", {}}, {"the", {}}, {"", Noun}},
      {{"with", {}}, {"", Adj}, {"", Noun}},
      {{"near", {}}, {"a", {}}, {"", Noun}},
  };
  return templates;
}

// Templates allowed to open a caption.
inline constexpr std::size_t kOpeningTemplates = 3;

}  // namespace detail

inline SyntheticDataset generate_synthetic(const SynthConfig& cfg, const Lexicon& lexicon = Lexicon::builtin()) {
  cfg.validate();
  using enum PosTag;
  Rng rng(cfg.seed);

  auto pool = [&lexicon](PosTag tag, std::initializer_list<std::string_view> exclude) {
    auto words = lexicon.words_with(tag);
    std::erase_if(words, [&](const std::string& w) {
      return std::find(exclude.begin(), exclude.end(), w) != exclude.end();
    });
    return words;
  };
  auto nouns = pool(Noun, {});
  auto verbs = pool(Verb, {"is", "are", "has", "have"});
  auto adjs = pool(Adj, {});
  const auto nums = pool(Num, {});
  const auto prts = pool(Prt, {});

  const std::size_t n_noun = cfg.vocab_size / 2;
  const std::size_t n_verb = cfg.vocab_size / 4;
  const std::size_t n_adj = cfg.vocab_size - n_noun - n_verb;
  if (nouns.size() < n_noun || verbs.size() < n_verb || adjs.size() < n_adj || nums.empty() || prts.empty()) {
    throw Error("invalid synthetic config: vocab_size " + std::to_string(cfg.vocab_size) +
                " exceeds what the lexicon can supply");
  }
  rng.shuffle(std::span<std::string>(nouns));
  rng.shuffle(std::span<std::string>(verbs));
  rng.shuffle(std::span<std::string>(adjs));
  nouns.resize(n_noun);
  verbs.resize(n_verb);
  adjs.resize(n_adj);

  // words_by_topic[topic][tag]
  const std::size_t k_topics = cfg.num_topics;
  std::vector<std::map<PosTag, std::vector<std::string>>> words_by_topic(k_topics);
  std::map<PosTag, std::vector<std::string>> all_words{{Noun, nouns}, {Verb, verbs}, {Adj, adjs}};
  SyntheticDataset ds;
  ds.topic_words.resize(k_topics);
  for (auto& [tag, words] : all_words) {
    for (std::size_t i = 0; i < words.size(); ++i) {
      words_by_topic[i % k_topics][tag].push_back(words[i]);
      ds.topic_words[i % k_topics].push_back(words[i]);
    }
  }
  for (auto& tw : ds.topic_words) std::sort(tw.begin(), tw.end());

  // Sparse non-negative prototypes; each has at least one active coordinate.
  auto make_prototypes = [&](std::size_t count) {
    Matrix<float> protos(count, cfg.visual_dim);
    for (std::size_t k = 0; k < count; ++k) {
      auto row = protos.row(k);
      do {
        for (float& x : row) x = rng.bernoulli(0.5) ? static_cast<float>(std::abs(rng.normal())) : 0.0f;
      } while (std::all_of(row.begin(), row.end(), [](float x) { return x == 0.0f; }));
    }
    return protos;
  };
  ds.topic_prototypes = make_prototypes(k_topics);
  const Matrix<float> nuisance = make_prototypes(std::max<std::size_t>(cfg.num_nuisance, 1));

  auto fill_slot = [&](PosTag tag, const std::vector<std::size_t>& topics) -> std::string {
    if (tag == Num) return nums[rng.index(nums.size())];
    if (tag == Prt) return prts[rng.index(prts.size())];
    if (rng.bernoulli(cfg.topic_word_leak)) {
      const auto& any = all_words.at(tag);
      return any[rng.index(any.size())];
    }
    const auto& own = words_by_topic[topics[rng.index(topics.size())]].at(tag);
    return own[rng.index(own.size())];
  };

  const auto& templates = detail::phrase_templates();
  auto make_caption = [&](const std::vector<std::size_t>& topics) {
    const std::size_t target = cfg.caption_len_min + rng.index(cfg.caption_len_max - cfg.caption_len_min + 1);
    std::vector<std::string> words;
    bool first = true;
    while (words.size() < target) {
      std::vector<std::size_t> fitting;
      const std::size_t limit = first ? detail::kOpeningTemplates : templates.size();
      for (std::size_t t = 0; t < limit; ++t) {
        if (words.size() + templates[t].size() <= cfg.caption_len_max) fitting.push_back(t);
      }
      if (fitting.empty()) break;
      for (const auto& slot : templates[fitting[rng.index(fitting.size())]]) {
        words.push_back(slot.tag ? fill_slot(*slot.tag, topics) : slot.literal);
      }
      first = false;
    }
    std::string caption;
    for (const auto& w : words) {
      if (!caption.empty()) caption += ' ';
      caption += w;
    }
    return caption;
  };

  ds.images.reserve(cfg.num_images);
  for (std::size_t i = 0; i < cfg.num_images; ++i) {
    const std::size_t n_topics =
        cfg.topics_per_image_min + rng.index(cfg.topics_per_image_max - cfg.topics_per_image_min + 1);
    std::vector<std::size_t> all(k_topics);
    for (std::size_t k = 0; k < k_topics; ++k) all[k] = k;
    rng.shuffle(std::span<std::size_t>(all));
    std::vector<std::size_t> topics(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_topics));
    std::sort(topics.begin(), topics.end());
    const std::size_t nuis = cfg.num_nuisance > 0 ? rng.index(cfg.num_nuisance) : 0;

    CaptionedImage im;
    im.id = i;
    im.feature.assign(cfg.visual_dim, 0.0f);
    do {
      for (std::size_t d = 0; d < cfg.visual_dim; ++d) {
        double x = 0.0;
        for (auto k : topics) x += ds.topic_prototypes(k, d);
        x /= static_cast<double>(topics.size());
        if (cfg.num_nuisance > 0) x += cfg.nuisance_weight * nuisance(nuis, d);
        if (cfg.noise_sigma > 0) x += cfg.noise_sigma * rng.normal();
        im.feature[d] = static_cast<float>(std::max(0.0, x));
      }
    } while (std::all_of(im.feature.begin(), im.feature.end(), [](float x) { return x == 0.0f; }));
    for (std::size_t c = 0; c < cfg.captions_per_image; ++c) im.captions.push_back(make_caption(topics));

    ds.images.push_back(std::move(im));
    ds.image_topics.push_back(std::move(topics));
    ds.image_nuisance.push_back(nuis);
  }
  return ds;
}

inline std::vector<CaptionRecord> caption_records(std::span<const CaptionedImage> images) {
  std::vector<CaptionRecord> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back({im.id, im.captions});
  return out;
}

inline FeatureTable feature_table(std::span<const CaptionedImage> images) {
  if (images.empty()) throw Error("no images");
  FeatureTable t;
  t.features = Matrix<float>(images.size(), images.front().feature.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].feature.size() != t.features.cols()) throw Error("inconsistent feature dimensions");
    t.ids.push_back(images[i].id);
    std::copy(images[i].feature.begin(), images[i].feature.end(), t.features.row(i).begin());
  }
  return t;
}

}  // namespace text2vis
