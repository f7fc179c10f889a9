// text2vis: build vocabularies, train, evaluate and query text-to-visual models.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "text2vis/data.hpp"
#include "text2vis/eval.hpp"
#include "text2vis/nn.hpp"
#include "text2vis/retrieval.hpp"
#include "text2vis/textvec.hpp"
#include "text2vis/train.hpp"

namespace fs = std::filesystem;
using namespace text2vis;

namespace {

struct SplitOptions {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
  std::uint64_t seed = 0;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--train-fraction", train, "Fraction of images used for training")->capture_default_str();
    cmd.add_option("--val-fraction", validation, "Fraction of images used for validation")->capture_default_str();
    cmd.add_option("--test-fraction", test, "Fraction of images used for testing")->capture_default_str();
    cmd.add_option("--split-seed", seed, "Seed of the train/validation/test shuffle")->capture_default_str();
  }

  DatasetSplit apply(std::vector<CaptionedImage> images) const {
    return split_dataset(std::move(images), {train, validation, test}, seed);
  }
};

Lexicon lexicon_from(const std::string& path) { return path.empty() ? Lexicon::builtin() : Lexicon::load(path); }

std::vector<CaptionedImage> load_dataset(const std::string& captions, const std::string& features) {
  const auto records = load_captions(captions);
  const auto table = load_features(features);
  return assemble_dataset(records, table);
}

void prepare_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory: " + dir);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

// Every resolved option of the subcommand, in the same format --config reads.
void echo_config(const CLI::App& cmd, const std::string& dir) {
  auto out = open_out(fs::path(dir) / "config.ini");
  out << "# effective configuration; rerun with --config " << (fs::path(dir) / "config.ini").string() << '\n';
  out << cmd.config_to_str(true, false);
}

// ---------------------------------------------------------------------------

struct BuildVocabArgs {
  std::string captions, out, lexicon;
  std::string mode = "unigram";
  std::size_t min_unigram = 5, min_ngram = 10;
};

int cmd_build_vocab(const BuildVocabArgs& a) {
  const auto lex = lexicon_from(a.lexicon);
  const auto records = load_captions(a.captions);
  std::vector<std::vector<Token>> corpus;
  for (const auto& r : records)
    for (const auto& c : r.captions) corpus.push_back(pos_tag(tokenize(c), lex));
  const auto mode = a.mode == "ngram" ? VocabMode::UnigramPlusNgram : VocabMode::Unigram;
  const auto vocab = build_vocabulary(corpus, mode, {a.min_unigram, a.min_ngram});
  vocab.save(a.out);
  std::cout << "vocabulary: " << vocab.size() << " terms (" << a.mode << ") -> " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string captions, features, vocab, out, lexicon;
  std::string strategy = "sl";
  double lambda = 1.0;
  double sl_prob_visual = 0.5;
  std::size_t batch_size = 100, max_iters = 300000, eval_every = 500, patience = 10, hidden = 1024;
  std::size_t train_eval_limit = 1000;
  double learning_rate = 0.001;
  bool no_early_stop = false;
  std::uint64_t seed = 0;
  SplitOptions split;
};

int cmd_train(const TrainArgs& a, const CLI::App& cmd) {
  prepare_out_dir(a.out);
  echo_config(cmd, a.out);
  const auto lex = lexicon_from(a.lexicon);
  const auto vocab = Vocabulary::load(a.vocab);
  const TextEncoder encoder(vocab, lex);
  const auto split = a.split.apply(load_dataset(a.captions, a.features));
  if (split.train.empty() || split.validation.empty()) throw Error("split leaves the training or validation set empty");
  const auto train = encode_images(split.train, encoder);
  const auto val = encode_images(split.validation, encoder);

  TrainConfig cfg;
  cfg.batch_size = a.batch_size;
  cfg.max_iterations = a.max_iters;
  cfg.eval_every = a.eval_every;
  cfg.patience = a.patience;
  cfg.early_stopping = !a.no_early_stop;
  cfg.sl_prob_visual = a.sl_prob_visual;
  cfg.seed = a.seed;
  cfg.adam.alpha = a.learning_rate;
  cfg.train_eval_limit = a.train_eval_limit;
  cfg.on_record = [](const HistoryRecord& r) {
    std::cout << "iter " << r.iteration;
    if (r.val_loss_t) std::cout << "  val_loss_t " << *r.val_loss_t;
    std::cout << "  val_loss_v " << *r.val_loss_v << std::endl;
  };

  const bool visreg = a.strategy == "visreg";
  const auto visual_dim = train.front().feature.size();
  auto model = init_model<float>(vocab.size(), a.hidden, visual_dim, !visreg, a.seed);
  std::cout << "training " << a.strategy << ": " << train.size() << " train / " << val.size()
            << " validation images, " << param_count(model) << " parameters" << std::endl;

  TrainResult r;
  if (a.strategy == "sl") {
    r = sl_train(train, val, std::move(model), cfg);
  } else if (a.strategy == "aggregated") {
    r = aggregated_train(train, val, std::move(model), cfg, a.lambda);
  } else {
    r = visreg_train(train, val, std::move(model), cfg);
  }

  save_checkpoint((fs::path(a.out) / "model.t2vm").string(), r.model);
  {
    auto out = open_out(fs::path(a.out) / "history.csv");
    r.history.write_csv(out);
  }
  {
    nlohmann::json s{{"strategy", a.strategy},
                     {"best_iteration", r.best_iteration},
                     {"iterations_run", r.iterations_run},
                     {"stopped_early", r.stopped_early},
                     {"text_optimizer_steps", r.text_optimizer_steps},
                     {"visual_optimizer_steps", r.visual_optimizer_steps},
                     {"joint_optimizer_steps", r.joint_optimizer_steps},
                     {"seconds_per_iteration", r.seconds_per_iteration()}};
    open_out(fs::path(a.out) / "timing.json") << s.dump(2) << '\n';
  }
  std::cout << "best iteration " << r.best_iteration << " of " << r.iterations_run << "; wrote " << a.out
            << "/model.t2vm" << std::endl;
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string captions, features, vocab, checkpoint, visreg_checkpoint, out, lexicon;
  std::string methods;
  std::string aggregation = "maxf";
  std::size_t p = 25;
  double beta = 1.2;
  std::uint64_t seed = 0;
  bool no_exclude_query = false;
  SplitOptions split;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int cmd_eval(const EvalArgs& a, const CLI::App& cmd) {
  prepare_out_dir(a.out);
  echo_config(cmd, a.out);
  std::vector<std::string> methods;
  if (a.methods.empty()) {
    if (!a.checkpoint.empty()) methods.push_back("text2vis");
    if (!a.visreg_checkpoint.empty()) methods.push_back("visreg");
    methods.push_back("vissim");
    methods.push_back("rrank");
  } else {
    methods = split_list(a.methods);
  }
  const bool needs_model = std::count(methods.begin(), methods.end(), "text2vis") +
                               std::count(methods.begin(), methods.end(), "visreg") >
                           0;
  for (const auto& m : methods) {
    if (m == "text2vis" && a.checkpoint.empty()) throw Error("method text2vis requires --checkpoint");
    if (m == "visreg" && a.visreg_checkpoint.empty()) throw Error("method visreg requires --visreg-checkpoint");
    if (m != "text2vis" && m != "visreg" && m != "vissim" && m != "rrank") throw Error("unknown method: " + m);
  }
  if (needs_model && a.vocab.empty()) throw Error("model-based methods require --vocab");

  const auto split = a.split.apply(load_dataset(a.captions, a.features));
  const auto& test = split.test;
  if (test.empty()) throw Error("split leaves the test set empty");
  const auto table = feature_table(test);
  const VisualIndex index(table.ids, table.features);
  std::map<ImageId, std::size_t> row_of;
  for (std::size_t i = 0; i < test.size(); ++i) row_of[test[i].id] = i;

  const auto lex = lexicon_from(a.lexicon);
  std::optional<Vocabulary> vocab;
  if (needs_model) vocab = Vocabulary::load(a.vocab);
  std::optional<Model<float>> t2v, vr;
  std::optional<ModelRanker> t2v_ranker, vr_ranker;
  if (!a.checkpoint.empty() && std::count(methods.begin(), methods.end(), "text2vis")) {
    t2v = load_checkpoint(a.checkpoint);
    t2v_ranker.emplace(*t2v, *vocab, index, lex);
  }
  if (!a.visreg_checkpoint.empty() && std::count(methods.begin(), methods.end(), "visreg")) {
    vr = load_checkpoint(a.visreg_checkpoint);
    vr_ranker.emplace(*vr, *vocab, index, lex);
  }

  Rng rng(a.seed);
  std::vector<NamedRanker> rankers;
  for (const auto& m : methods) {
    if (m == "text2vis") {
      rankers.push_back({m, [&](const EvalQuery& q, std::size_t k, std::optional<ImageId> ex) {
                           return t2v_ranker->rank(q.caption, k, ex);
                         }});
    } else if (m == "visreg") {
      rankers.push_back({m, [&](const EvalQuery& q, std::size_t k, std::optional<ImageId> ex) {
                           return vr_ranker->rank(q.caption, k, ex);
                         }});
    } else if (m == "vissim") {
      rankers.push_back({m, [&](const EvalQuery& q, std::size_t k, std::optional<ImageId> ex) {
                           return vissim_ranking(index, test[row_of.at(q.image_id)].feature, k, ex);
                         }});
    } else {
      rankers.push_back({m, [&](const EvalQuery&, std::size_t k, std::optional<ImageId> ex) {
                           const std::size_t pool = index.size() - (ex ? 1 : 0);
                           return rrank_ranking(index.ids(), rng, std::min(k, pool), ex);
                         }});
    }
  }

  EvalOptions opt;
  opt.p = a.p;
  opt.rouge.beta = a.beta;
  opt.rouge.aggregation = a.aggregation == "maxpr" ? RelevanceAggregation::MaxPR : RelevanceAggregation::MaxF;
  opt.exclude_query_image = !a.no_exclude_query;
  const auto queries = first_caption_queries(test);
  const CaptionBank bank(test);
  const auto report = evaluate(rankers, queries, bank, opt);

  {
    auto out = open_out(fs::path(a.out) / "summary.csv");
    report.write_summary_csv(out);
  }
  {
    auto out = open_out(fs::path(a.out) / "per_query.csv");
    report.write_per_query_csv(out);
  }
  for (const auto& pc : report.pairs) {
    auto out = open_out(fs::path(a.out) / ("cdf_" + pc.method_a + "_vs_" + pc.method_b + ".csv"));
    EvalReport::write_cdf_csv(out, pc);
  }
  std::cout << "queries: " << queries.size() << "  p: " << a.p << '\n';
  for (const auto& m : report.methods) {
    std::cout << std::left << std::setw(10) << m << " mean DCG " << std::fixed << std::setprecision(4)
              << report.mean_dcg(m) << '\n';
  }
  for (const auto& pc : report.pairs) {
    std::cout << pc.method_a << " vs " << pc.method_b << ": win rate " << std::setprecision(3) << pc.win_rate << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct SearchArgs {
  std::string checkpoint, vocab, features, query, lexicon;
  std::size_t k = 10;
};

int cmd_search(const SearchArgs& a) {
  const auto lex = lexicon_from(a.lexicon);
  const auto vocab = Vocabulary::load(a.vocab);
  const auto model = load_checkpoint(a.checkpoint);
  const auto table = load_features(a.features);
  const VisualIndex index(table.ids, table.features);
  const ModelRanker ranker(model, vocab, index, lex);
  const bool oov = TextEncoder(vocab, lex).encode(a.query).nnz() == 0;
  if (oov) {
    std::cerr << "warning: query has no in-vocabulary terms; ranking from the bias-only representation\n";
    std::cout << "# out-of-vocabulary query\n";
  }
  const auto ranking = ranker.rank(a.query, a.k, std::nullopt);
  std::cout << std::setprecision(9);
  for (std::size_t i = 0; i < ranking.entries.size(); ++i) {
    std::cout << (i + 1) << '\t' << ranking.entries[i].image_id << '\t' << ranking.entries[i].distance << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct GenSynthArgs {
  SynthConfig cfg;
  std::string out, lexicon;
};

int cmd_gen_synth(const GenSynthArgs& a, const CLI::App& cmd) {
  prepare_out_dir(a.out);
  echo_config(cmd, a.out);
  const auto ds = generate_synthetic(a.cfg, lexicon_from(a.lexicon));
  const fs::path dir(a.out);
  save_captions((dir / "captions.json").string(), caption_records(ds.images));
  const auto table = feature_table(ds.images);
  save_features((dir / "features.t2vf").string(), table.ids, table.features);
  open_out(dir / "ground_truth.json") << ds.ground_truth_json(a.cfg).dump(1) << '\n';
  std::cout << "generated " << ds.images.size() << " images x " << a.cfg.captions_per_image << " captions -> "
            << a.out << '\n';
  return 0;
}


// CLI11 only reads the root app's config file, so a subcommand's --config is expanded into
// ordinary arguments placed before the command-line ones; with last-value-wins the
// command line overrides the file.
std::vector<std::string> expand_config(const CLI::App& app, int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty()) return args;
  const CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(args.front());
  } catch (const CLI::OptionNotFound&) {
    return args;
  }
  std::vector<std::string> rest{args.front()}, from_file;
  for (std::size_t i = 1; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
      continue;
    }
    if (!fs::is_regular_file(path)) throw CLI::FileError::Missing(path);
    for (const auto& item : CLI::ConfigINI().from_file(path)) {
      if (item.name == "config" || item.name == "++" || item.name == "--") continue;
      if (!item.parents.empty() && !(item.parents.size() == 1 && item.parents[0] == sub->get_name())) continue;
      const CLI::Option* opt = sub->get_option_no_throw("--" + item.name);
      if (opt == nullptr) throw CLI::ConfigError::Extras(item.name);
      if (opt->get_expected_min() == 0) {
        if (!item.inputs.empty() && CLI::detail::to_flag_value(item.inputs.front()) > 0) {
          from_file.push_back("--" + item.name);
        }
        continue;
      }
      if (item.inputs.empty() || (item.inputs.size() == 1 && item.inputs[0].empty())) continue;
      from_file.push_back("--" + item.name);
      from_file.insert(from_file.end(), item.inputs.begin(), item.inputs.end());
    }
  }
  rest.insert(rest.begin() + 1, from_file.begin(), from_file.end());
  return rest;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-to-visual feature regression and retrieval"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  BuildVocabArgs bv;
  auto* build_vocab = app.add_subcommand("build-vocab", "Build a vocabulary file from a captions document");
  build_vocab->set_config("--config");
  build_vocab->add_option("--captions", bv.captions, "Captions JSON")->required();
  build_vocab->add_option("--mode", bv.mode, "Vocabulary terms")
      ->check(CLI::IsMember({"unigram", "ngram"}))
      ->capture_default_str();
  build_vocab->add_option("--min-freq-unigram", bv.min_unigram, "Minimum caption frequency of unigrams")
      ->capture_default_str();
  build_vocab->add_option("--min-freq-ngram", bv.min_ngram, "Minimum caption frequency in ngram mode")
      ->capture_default_str();
  build_vocab->add_option("--lexicon", bv.lexicon, "Part-of-speech lexicon (word<TAB>TAG); bundled one by default");
  build_vocab->add_option("--out", bv.out, "Vocabulary file to write")->required();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train a model and write its best checkpoint and loss history");
  train->set_config("--config");
  train->add_option("--captions", tr.captions, "Captions JSON")->required();
  train->add_option("--features", tr.features, "Visual feature file")->required();
  train->add_option("--vocab", tr.vocab, "Vocabulary file")->required();
  train->add_option("--strategy", tr.strategy, "sl, aggregated or visreg")
      ->check(CLI::IsMember({"sl", "aggregated", "visreg"}))
      ->capture_default_str();
  train->add_option("--lambda", tr.lambda, "Text loss weight for the aggregated strategy")->capture_default_str();
  train->add_option("--sl-prob-visual", tr.sl_prob_visual, "Probability of a visual update")->capture_default_str();
  train->add_option("--batch-size", tr.batch_size)->capture_default_str();
  train->add_option("--max-iters", tr.max_iters)->capture_default_str();
  train->add_option("--eval-every", tr.eval_every, "Iterations between validation passes")->capture_default_str();
  train->add_option("--patience", tr.patience, "Validation passes without improvement before stopping")
      ->capture_default_str();
  train->add_flag("--no-early-stop", tr.no_early_stop, "Run to --max-iters");
  train->add_option("--hidden", tr.hidden, "Hidden units")->capture_default_str();
  train->add_option("--learning-rate", tr.learning_rate, "Adam step size")->capture_default_str();
  train->add_option("--train-eval-limit", tr.train_eval_limit, "Training images used for train losses")
      ->capture_default_str();
  train->add_option("--seed", tr.seed, "Seed for initialization and sampling")->capture_default_str();
  train->add_option("--lexicon", tr.lexicon, "Part-of-speech lexicon; bundled one by default");
  tr.split.add_to(*train);
  train->add_option("--out", tr.out, "Output directory")->required();

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate retrieval rankings with DCG on the test split");
  eval->set_config("--config");
  eval->add_option("--captions", ev.captions, "Captions JSON")->required();
  eval->add_option("--features", ev.features, "Visual feature file")->required();
  eval->add_option("--vocab", ev.vocab, "Vocabulary file");
  eval->add_option("--checkpoint", ev.checkpoint, "Text2Vis checkpoint");
  eval->add_option("--visreg-checkpoint", ev.visreg_checkpoint, "Visual-only regressor checkpoint");
  eval->add_option("--methods", ev.methods,
                   "Comma-separated subset of text2vis,visreg,vissim,rrank (default: all that have inputs)");
  eval->add_option("--p", ev.p, "DCG rank cutoff")->capture_default_str()->check(CLI::PositiveNumber);
  eval->add_option("--beta", ev.beta, "ROUGE-L recall weight")->capture_default_str();
  eval->add_option("--aggregation", ev.aggregation, "Relevance over an image's captions: maxf or maxpr")
      ->check(CLI::IsMember({"maxf", "maxpr"}))
      ->capture_default_str();
  eval->add_option("--seed", ev.seed, "Seed of the random ranking baseline")->capture_default_str();
  eval->add_flag("--no-exclude-query", ev.no_exclude_query, "Keep the query's own image in the candidates");
  eval->add_option("--lexicon", ev.lexicon, "Part-of-speech lexicon; bundled one by default");
  ev.split.add_to(*eval);
  eval->add_option("--out", ev.out, "Output directory")->required();

  SearchArgs se;
  auto* search = app.add_subcommand("search", "Rank images for a text query");
  search->set_config("--config");
  search->add_option("--checkpoint", se.checkpoint, "Model checkpoint")->required();
  search->add_option("--vocab", se.vocab, "Vocabulary file")->required();
  search->add_option("--features", se.features, "Visual feature file of the collection")->required();
  search->add_option("--query", se.query, "Query text")->required();
  search->add_option("--k", se.k, "Results to print")->capture_default_str()->check(CLI::PositiveNumber);
  search->add_option("--lexicon", se.lexicon, "Part-of-speech lexicon; bundled one by default");

  GenSynthArgs gs;
  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic captioned-image dataset");
  gen->set_config("--config");
  gen->add_option("--topics", gs.cfg.num_topics)->capture_default_str();
  gen->add_option("--vocab-size", gs.cfg.vocab_size, "Topic content words")->capture_default_str();
  gen->add_option("--visual-dim", gs.cfg.visual_dim)->capture_default_str();
  gen->add_option("--images", gs.cfg.num_images)->capture_default_str();
  gen->add_option("--captions-per-image", gs.cfg.captions_per_image)->capture_default_str();
  gen->add_option("--caption-len-min", gs.cfg.caption_len_min)->capture_default_str();
  gen->add_option("--caption-len-max", gs.cfg.caption_len_max)->capture_default_str();
  gen->add_option("--topics-per-image-min", gs.cfg.topics_per_image_min)->capture_default_str();
  gen->add_option("--topics-per-image-max", gs.cfg.topics_per_image_max)->capture_default_str();
  gen->add_option("--noise-sigma", gs.cfg.noise_sigma)->capture_default_str();
  gen->add_option("--nuisance", gs.cfg.num_nuisance, "Caption-invisible visual factors")->capture_default_str();
  gen->add_option("--nuisance-weight", gs.cfg.nuisance_weight)->capture_default_str();
  gen->add_option("--word-leak", gs.cfg.topic_word_leak, "Chance a content slot ignores the image topics")
      ->capture_default_str();
  gen->add_option("--seed", gs.cfg.seed)->capture_default_str();
  gen->add_option("--lexicon", gs.lexicon, "Part-of-speech lexicon; bundled one by default");
  gen->add_option("--out", gs.out, "Output directory")->required();

  try {
    auto args = expand_config(app, argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*build_vocab) return cmd_build_vocab(bv);
    if (*train) return cmd_train(tr, *train);
    if (*eval) return cmd_eval(ev, *eval);
    if (*search) return cmd_search(se);
    if (*gen) return cmd_gen_synth(gs, *gen);
  } catch (const std::exception& e) {
    std::cerr << "text2vis: error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
