#pragma once

// Caption vectorization: tokenizer, lexicon POS tagger, POS-pattern n-grams,
// caption-frequency vocabularies and binary bag-of-words encoding.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "text2vis/error.hpp"

namespace text2vis {

enum class PosTag : std::uint8_t { Noun, Verb, Adj, Prt, Num, Other };

inline std::string_view to_string(PosTag tag) {
  switch (tag) {
    case PosTag::Noun: return "NOUN";
    case PosTag::Verb: return "VERB";
    case PosTag::Adj: return "ADJ";
    case PosTag::Prt: return "PRT";
    case PosTag::Num: return "NUM";
    case PosTag::Other: return "OTHER";
  }
  return "OTHER";
}

inline std::optional<PosTag> parse_pos_tag(std::string_view s) {
  for (PosTag t : {PosTag::Noun, PosTag::Verb, PosTag::Adj, PosTag::Prt, PosTag::Num, PosTag::Other}) {
    if (s == to_string(t)) return t;
  }
  return std::nullopt;
}

struct Token {
  std::string surface;
  PosTag pos = PosTag::Other;

  friend bool operator==(const Token&, const Token&) = default;
};

// Lowercases, turns every non-alphanumeric ASCII byte into a separator and
// splits. Bytes >= 0x80 are kept so UTF-8 words stay whole.
inline std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      tokens.push_back(Token{std::move(current), PosTag::Other});
      current.clear();
    }
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c >= 0x80 || (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z')) {
      current.push_back(ch);
    } else if (c >= 'A' && c <= 'Z') {
      current.push_back(static_cast<char>(c - 'A' + 'a'));
    } else {
      flush();
    }
  }
  flush();
  return tokens;
}

inline std::vector<std::string> surfaces(std::span<const Token> tokens) {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(t.surface);
  return out;
}

// Most-frequent-tag lexicon: word -> coarse tag, OTHER for unknown words.
class Lexicon {
 public:
  Lexicon() = default;

  static Lexicon parse(std::istream& in) {
    Lexicon lex;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line.front() == '#') continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos || tab == 0) {
        throw Error("lexicon line " + std::to_string(line_no) + ": expected word<TAB>TAG");
      }
      const auto tag = parse_pos_tag(std::string_view(line).substr(tab + 1));
      if (!tag) {
        throw Error("lexicon line " + std::to_string(line_no) + ": unknown tag '" + line.substr(tab + 1) + "'");
      }
      lex.entries_.try_emplace(line.substr(0, tab), *tag);
    }
    return lex;
  }

  static Lexicon load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open lexicon file: " + path);
    return parse(in);
  }

  // The lexicon bundled from data/lexicon.tsv at build time.
  static const Lexicon& builtin();

  PosTag lookup(std::string_view word) const {
    const auto it = entries_.find(std::string(word));
    return it == entries_.end() ? PosTag::Other : it->second;
  }

  std::size_t size() const noexcept { return entries_.size(); }

  // Words carrying `tag`, sorted.
  std::vector<std::string> words_with(PosTag tag) const {
    std::vector<std::string> out;
    for (const auto& [w, t] : entries_) {
      if (t == tag) out.push_back(w);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::unordered_map<std::string, PosTag> entries_;
};

}  // namespace text2vis

#include "text2vis/default_lexicon.inc"

namespace text2vis {

inline const Lexicon& Lexicon::builtin() {
  static const Lexicon lex = [] {
    std::istringstream in{std::string(detail::kDefaultLexicon)};
    return Lexicon::parse(in);
  }();
  return lex;
}

inline std::vector<Token> pos_tag(std::vector<Token> tokens, const Lexicon& lexicon = Lexicon::builtin()) {
  for (auto& t : tokens) t.pos = lexicon.lookup(t.surface);
  return tokens;
}

using TagPattern = std::vector<PosTag>;

inline const std::array<TagPattern, 7>& ngram_patterns() {
  using enum PosTag;
  static const std::array<TagPattern, 7> patterns{{
      {Noun, Verb},
      {Noun, Verb, Verb},
      {Adj, Noun},
      {Verb, Prt},
      {Verb, Verb},
      {Num, Noun},
      {Noun, Noun},
  }};
  return patterns;
}

inline constexpr char kNgramJoiner = '_';

// Every contiguous window whose tag sequence equals one of the patterns,
// ordered by start position then pattern order. Windows may overlap.
inline std::vector<std::string> extract_ngrams(std::span<const Token> tagged) {
  std::vector<std::string> out;
  for (std::size_t start = 0; start < tagged.size(); ++start) {
    for (const auto& pattern : ngram_patterns()) {
      if (start + pattern.size() > tagged.size()) continue;
      bool match = true;
      for (std::size_t k = 0; k < pattern.size() && match; ++k) {
        match = tagged[start + k].pos == pattern[k];
      }
      if (!match) continue;
      std::string term = tagged[start].surface;
      for (std::size_t k = 1; k < pattern.size(); ++k) {
        term += kNgramJoiner;
        term += tagged[start + k].surface;
      }
      out.push_back(std::move(term));
    }
  }
  return out;
}

enum class VocabMode { Unigram, UnigramPlusNgram };

inline std::string_view to_string(VocabMode m) {
  return m == VocabMode::Unigram ? "unigram" : "ngram";
}

struct VocabThresholds {
  std::size_t min_caption_freq_unigram = 5;
  std::size_t min_caption_freq_ngram = 10;
};

// All terms a caption contributes under `mode` (with repeats).
inline std::vector<std::string> caption_terms(std::span<const Token> tagged, VocabMode mode) {
  std::vector<std::string> terms = surfaces(tagged);
  if (mode == VocabMode::UnigramPlusNgram) {
    auto ngrams = extract_ngrams(tagged);
    terms.insert(terms.end(), std::make_move_iterator(ngrams.begin()), std::make_move_iterator(ngrams.end()));
  }
  return terms;
}

class Vocabulary {
 public:
  Vocabulary() = default;

  // Terms are kept in the given order; position is the index.
  explicit Vocabulary(std::vector<std::string> terms, VocabMode mode = VocabMode::Unigram,
                      VocabThresholds thresholds = {})
      : terms_(std::move(terms)), mode_(mode), thresholds_(thresholds) {
    index_.reserve(terms_.size());
    for (std::size_t i = 0; i < terms_.size(); ++i) {
      if (terms_[i].empty()) throw Error("vocabulary term " + std::to_string(i) + " is empty");
      if (!index_.try_emplace(terms_[i], i).second) {
        throw Error("duplicate vocabulary term: " + terms_[i]);
      }
    }
  }

  std::size_t size() const noexcept { return terms_.size(); }
  const std::vector<std::string>& terms() const noexcept { return terms_; }
  VocabMode mode() const noexcept { return mode_; }
  const VocabThresholds& thresholds() const noexcept { return thresholds_; }

  std::optional<std::size_t> index_of(std::string_view term) const {
    const auto it = index_.find(std::string(term));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  // One term per line; line number is the index.
  void save(std::ostream& out) const {
    for (const auto& t : terms_) out << t << '\n';
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write vocabulary file: " + path);
    save(out);
    if (!out) throw Error("failed writing vocabulary file: " + path);
  }

  // The mode is inferred: any joined n-gram term means UnigramPlusNgram.
  static Vocabulary load(std::istream& in) {
    std::vector<std::string> terms;
    std::string line;
    bool has_ngrams = false;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.find(kNgramJoiner) != std::string::npos) has_ngrams = true;
      terms.push_back(std::move(line));
    }
    if (terms.empty()) throw Error("vocabulary file is empty");
    return Vocabulary(std::move(terms), has_ngrams ? VocabMode::UnigramPlusNgram : VocabMode::Unigram);
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open vocabulary file: " + path);
    return load(in);
  }

 private:
  std::vector<std::string> terms_;
  std::unordered_map<std::string, std::size_t> index_;
  VocabMode mode_ = VocabMode::Unigram;
  VocabThresholds thresholds_;
};

// Keeps terms whose caption frequency (number of distinct captions containing
// the term) reaches the mode's threshold. In UnigramPlusNgram mode both
// unigrams and n-grams use the n-gram threshold. Terms are sorted.
inline Vocabulary build_vocabulary(std::span<const std::vector<Token>> tagged_corpus, VocabMode mode,
                                   VocabThresholds thresholds = {}) {
  if (tagged_corpus.empty()) throw Error("cannot build a vocabulary from an empty corpus");
  std::map<std::string, std::size_t> caption_freq;
  for (const auto& caption : tagged_corpus) {
    const auto terms = caption_terms(caption, mode);
    const std::set<std::string> distinct(terms.begin(), terms.end());
    for (const auto& t : distinct) ++caption_freq[t];
  }
  const std::size_t min_freq = mode == VocabMode::Unigram ? thresholds.min_caption_freq_unigram
                                                          : thresholds.min_caption_freq_ngram;
  std::vector<std::string> kept;
  for (const auto& [term, freq] : caption_freq) {
    if (freq >= min_freq) kept.push_back(term);
  }
  if (kept.empty()) {
    throw Error("vocabulary is empty after applying minimum caption frequency " + std::to_string(min_freq));
  }
  return Vocabulary(std::move(kept), mode, thresholds);
}

// Binary sparse term vector: positions listed in `on_indices` hold 1.
struct BowVector {
  std::size_t dim = 0;
  std::vector<std::uint32_t> on_indices;  // strictly increasing

  std::size_t nnz() const noexcept { return on_indices.size(); }

  template <typename T>
  std::vector<T> to_dense() const {
    std::vector<T> out(dim, T{0});
    for (auto i : on_indices) out[i] = T{1};
    return out;
  }

  friend bool operator==(const BowVector&, const BowVector&) = default;
};

// Out-of-vocabulary terms are dropped; repeated terms activate once.
inline BowVector encode_bow(std::span<const std::string> terms, const Vocabulary& vocab) {
  BowVector bow{vocab.size(), {}};
  for (const auto& t : terms) {
    if (auto idx = vocab.index_of(t)) bow.on_indices.push_back(static_cast<std::uint32_t>(*idx));
  }
  std::sort(bow.on_indices.begin(), bow.on_indices.end());
  bow.on_indices.erase(std::unique(bow.on_indices.begin(), bow.on_indices.end()), bow.on_indices.end());
  return bow;
}

// Raw caption text to bag-of-words, using the vocabulary's own mode.
class TextEncoder {
 public:
  explicit TextEncoder(const Vocabulary& vocab, const Lexicon& lexicon = Lexicon::builtin())
      : vocab_(&vocab), lexicon_(&lexicon) {}

  BowVector encode(std::string_view text) const {
    const auto tagged = pos_tag(tokenize(text), *lexicon_);
    const auto terms = caption_terms(tagged, vocab_->mode());
    return encode_bow(terms, *vocab_);
  }

  const Vocabulary& vocabulary() const noexcept { return *vocab_; }

 private:
  const Vocabulary* vocab_;
  const Lexicon* lexicon_;
};

}  // namespace text2vis
