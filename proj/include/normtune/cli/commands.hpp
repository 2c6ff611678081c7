#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "normtune/cli/config.hpp"
#include "normtune/corpus/sentence.hpp"
#include "normtune/corpus/split.hpp"
#include "normtune/corpus/synthetic.hpp"
#include "normtune/eval/harness.hpp"
#include "normtune/eval/report.hpp"
#include "normtune/lm/training.hpp"
#include "normtune/tune/finetune.hpp"

namespace normtune::cli {

namespace fs = std::filesystem;

// Exclusive ownership of an output directory for one command.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw IoError("output directory is locked by another command: " + path_.string());
    ::close(fd);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline void write_jsonl(const fs::path& path, const std::vector<nlohmann::json>& rows) {
  std::string text;
  for (const auto& r : rows) text += r.dump() + "\n";
  write_text(path, text);
}

inline std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!corpus::trim(line).empty()) rows.push_back(nlohmann::json::parse(line));
  }
  return rows;
}

// Files produced by one command, relative to the output directory.
class ArtifactSet {
 public:
  ArtifactSet(fs::path out_dir, std::string command, const RunConfig& config)
      : out_dir_(std::move(out_dir)), command_(std::move(command)), digest_(config.digest()) {
    write_text(out_dir_ / "configs" / (command_ + ".json"), config.doc().dump(2) + "\n");
    add("configs/" + command_ + ".json");
  }

  void add(const fs::path& relative) { files_.push_back(relative.generic_string()); }

  void add_tree(const fs::path& relative) {
    std::vector<std::string> found;
    for (const auto& e : fs::recursive_directory_iterator(out_dir_ / relative)) {
      if (e.is_regular_file()) found.push_back(fs::relative(e.path(), out_dir_).generic_string());
    }
    std::sort(found.begin(), found.end());
    files_.insert(files_.end(), found.begin(), found.end());
  }

  // Merges this command's files into <out_dir>/manifest.json.
  void commit() const {
    const auto index = out_dir_ / "manifest.json";
    nlohmann::json manifest{{"artifacts", nlohmann::json::object()}};
    if (fs::exists(index)) manifest = nlohmann::json::parse(std::ifstream(index));
    for (const auto& f : files_) {
      manifest["artifacts"][f] = {
          {"sha256", sha256_file(out_dir_ / f)}, {"command", command_}, {"config_sha256", digest_}};
    }
    write_text(index, manifest.dump(2) + "\n");
  }

 private:
  fs::path out_dir_;
  std::string command_;
  std::string digest_;
  std::vector<std::string> files_;
};

inline fs::path require_path(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw IoError(what + " not found: " + path.string());
  return path;
}

inline std::vector<corpus::LabeledSentence> read_split(const fs::path& out, const std::string& name) {
  return corpus::load_corpus(require_path(out / "data" / (name + ".jsonl"), "prepared data"),
                             corpus::CorpusFormat::jsonl);
}

inline std::vector<std::string> texts_of(const std::vector<corpus::LabeledSentence>& sentences) {
  std::vector<std::string> t;
  t.reserve(sentences.size());
  for (const auto& s : sentences) t.push_back(s.text);
  return t;
}

inline std::string normalized(const std::string& text) {
  std::string key;
  for (const auto& w : corpus::split_words(text)) key += w + " ";
  return key;
}

inline std::string checkpoint_name(const std::string& base, const std::string& dimension) {
  return dimension == "alt" ? base + "-alt" : base;
}

inline nlohmann::json provenance(const RunConfig& config) {
  return {{"config_sha256", config.digest()}, {"seed", config.seed()}};
}

// Writes the primary (and alternate-dimension) corpora, their splits, and
// the disjoint fine-tuning / evaluation prompt sets under <out>/data.
inline void cmd_prepare_data(const RunConfig& config, const fs::path& out) {
  config.validate();
  OutputLock lock(out);
  ArtifactSet artifacts(out, "prepare-data", config);
  const auto& data = config.section("data");
  const auto seed = config.seed();

  std::vector<corpus::LabeledSentence> primary;
  std::vector<corpus::LabeledSentence> alt;
  if (data.at("source").get<std::string>() == "synthetic") {
    primary = corpus::generate_synthetic(config.synthetic_spec("primary"), derive_seed(seed, 1));
    alt = corpus::generate_synthetic(config.synthetic_spec("alt"), derive_seed(seed, 2));
  } else {
    const fs::path path = data.at("path").get<std::string>();
    primary = corpus::load_corpus(require_path(path, "corpus"), corpus::format_from_path(path));
    const fs::path alt_path = data.at("alt_path").get<std::string>();
    if (!alt_path.empty()) {
      alt = corpus::load_corpus(require_path(alt_path, "corpus"), corpus::format_from_path(alt_path));
    }
  }

  auto write_splits = [&](const std::string& name, const std::vector<corpus::LabeledSentence>& all,
                          std::uint64_t split_seed) {
    const auto parts = corpus::split(all, config.ratios(), split_seed);
    for (const auto& [suffix, part] : {std::pair{"train", &parts.train}, std::pair{"validation", &parts.validation},
                                       std::pair{"test", &parts.test}}) {
      const auto rel = fs::path("data") / (name + "_" + suffix + ".jsonl");
      corpus::write_corpus(out / rel, *part);
      artifacts.add(rel);
    }
    return parts;
  };
  fs::create_directories(out / "data");
  const auto primary_parts = write_splits("primary", primary, derive_seed(seed, 3));
  if (!alt.empty()) write_splits("alt", alt, derive_seed(seed, 4));

  const auto n_prompts = data.at("finetune_prompts").get<std::size_t>();
  std::vector<corpus::LabeledSentence> tuning(
      primary_parts.train.begin(),
      primary_parts.train.begin() + static_cast<std::ptrdiff_t>(std::min(n_prompts, primary_parts.train.size())));
  std::set<std::string> tuning_keys;
  for (const auto& s : tuning) tuning_keys.insert(normalized(s.text));
  std::vector<corpus::LabeledSentence> held_out;
  for (const auto& s : primary_parts.test) {
    if (!tuning_keys.count(normalized(s.text))) held_out.push_back(s);
  }
  corpus::write_corpus(out / "data/finetune_prompts.jsonl", tuning);
  corpus::write_corpus(out / "data/eval_prompts.jsonl", held_out);
  artifacts.add("data/finetune_prompts.jsonl");
  artifacts.add("data/eval_prompts.jsonl");
  artifacts.commit();
}

inline void cmd_train_lm(const RunConfig& config, const fs::path& out) {
  config.validate();
  const auto train = read_split(out, "primary_train");
  const auto validation = read_split(out, "primary_validation");
  OutputLock lock(out);
  ArtifactSet artifacts(out, "train-lm", config);
  const auto s = config.lm_config();
  const auto spw = config.section("data").at("sentences_per_window").get<std::size_t>();
  const auto train_texts = texts_of(train);
  const auto vocab = corpus::Vocabulary::build(std::span<const std::string>(train_texts), s.max_vocab);
  const auto train_seqs = lm::make_lm_sequences(train_texts, vocab, s.model.context, spw);
  const auto val_seqs = lm::make_lm_sequences(texts_of(validation), vocab, s.model.context, spw);
  const auto result = lm::train_lm(train_seqs, val_seqs, s.model, vocab,
                                   {s.epochs, s.batch_size, s.learning_rate, 1.0, derive_seed(config.seed(), 10), 0});
  result.model.save(out / "lm", provenance(config));
  artifacts.add_tree("lm");
  std::vector<nlohmann::json> rows;
  for (const auto& e : result.epochs) {
    nlohmann::json row{{"epoch", e.epoch}, {"steps", e.steps}, {"train_loss", e.train_loss}};
    if (e.validation_loss) row["validation_loss"] = *e.validation_loss;
    rows.push_back(row);
  }
  write_jsonl(out / "logs/train_lm.jsonl", rows);
  artifacts.add("logs/train_lm.jsonl");
  artifacts.commit();
}

// `dimension` selects the corpus: "primary" or "alt".
inline classifier::AccuracyReport cmd_train_classifier(const RunConfig& config, const fs::path& out,
                                                       const std::string& dimension = "primary") {
  config.validate();
  if (dimension != "primary" && dimension != "alt") throw InvalidArgument("dimension must be primary or alt");
  const auto train = read_split(out, dimension + "_train");
  const auto validation = read_split(out, dimension + "_validation");
  const auto test = read_split(out, dimension + "_test");
  OutputLock lock(out);
  const auto name = checkpoint_name("classifier", dimension);
  ArtifactSet artifacts(out, "train-" + name, config);
  auto s = config.classifier_config();
  s.train.seed = derive_seed(config.seed(), dimension == "alt" ? 12 : 11);
  const auto vocab = corpus::Vocabulary::build(std::span<const corpus::LabeledSentence>(train), s.max_vocab);
  const auto result = classifier::train_classifier(train, vocab, s.model, s.train, validation);
  result.model.save(out / name, provenance(config));
  artifacts.add_tree(name);
  const auto test_report = classifier::evaluate_accuracy(result.model, std::span<const corpus::LabeledSentence>(test));
  std::vector<nlohmann::json> rows;
  for (const auto& e : result.epochs) {
    nlohmann::json row{{"epoch", e.epoch}, {"train_loss", e.train_loss}};
    if (e.heldout_accuracy) row["validation_accuracy"] = *e.heldout_accuracy;
    rows.push_back(row);
  }
  if (rows.empty()) rows.push_back({{"epoch", 0}});
  rows.back()["test_accuracy"] = test_report.accuracy();
  rows.back()["test_confusion"] = test_report.confusion;
  write_jsonl(out / "logs" / ("train_" + name + ".jsonl"), rows);
  artifacts.add(fs::path("logs") / ("train_" + name + ".jsonl"));
  artifacts.commit();
  return test_report;
}

inline std::vector<corpus::TokenSequence> tokenize_all(const std::vector<corpus::LabeledSentence>& sentences,
                                                       const corpus::Vocabulary& vocab, std::size_t limit) {
  std::vector<corpus::TokenSequence> out;
  for (std::size_t i = 0; i < std::min(limit, sentences.size()); ++i) {
    out.push_back(corpus::tokenize(sentences[i].text, vocab));
  }
  return out;
}

// Reward fine-tuning of <out>/lm against the configured classifier; the
// result goes to lm-norm (lm-norm-alt for the alternate classifier).
inline std::vector<tune::IterationStats> cmd_finetune(const RunConfig& config, const fs::path& out) {
  config.validate();
  auto settings = config.finetune_settings();
  const auto classifier_dir = require_path(out / checkpoint_name("classifier", settings.classifier), "classifier checkpoint");
  const auto lm_dir = require_path(out / "lm", "language-model checkpoint");
  const auto prompts = read_split(out, "finetune_prompts");
  OutputLock lock(out);
  const auto name = checkpoint_name("lm-norm", settings.classifier);
  ArtifactSet artifacts(out, "finetune-" + settings.classifier, config);
  const auto baseline = lm::LanguageModel::load(lm_dir);
  const auto judge = classifier::Classifier::load(classifier_dir);
  settings.config.prompts = tokenize_all(prompts, baseline.vocab(), prompts.size());
  const auto result = tune::run_finetune(baseline, judge, settings.config, derive_seed(config.seed(), 20));
  result.model.save(out / name, provenance(config));
  artifacts.add_tree(name);
  std::vector<nlohmann::json> rows;
  for (const auto& st : result.stats) rows.emplace_back(st);
  const auto log = fs::path("logs") / (checkpoint_name("finetune", settings.classifier) + ".jsonl");
  write_jsonl(out / log, rows);
  artifacts.add(log);
  artifacts.commit();
  return result.stats;
}

inline lm::SamplingOptions eval_sampling(const RunConfig& config) {
  const auto& e = config.section("eval");
  return {e.at("temperature").get<double>(), e.at("top_k").get<std::size_t>(), e.at("max_new").get<std::size_t>()};
}

// Samples continuations from a checkpoint for the held-out prompts (or the
// given ones) and writes them, labeled by the primary classifier when one
// exists, to <out>/generations/<model>.jsonl.
inline std::vector<eval::AuditRecord> cmd_generate(const RunConfig& config, const fs::path& out,
                                                   const std::string& model_name,
                                                   const std::vector<std::string>& prompt_texts = {}) {
  config.validate();
  const auto model_dir = require_path(out / model_name, "model checkpoint");
  std::vector<corpus::LabeledSentence> prompt_sentences;
  if (prompt_texts.empty()) {
    prompt_sentences = read_split(out, "eval_prompts");
  } else {
    for (const auto& t : prompt_texts) prompt_sentences.push_back({t, 1});
  }
  OutputLock lock(out);
  ArtifactSet artifacts(out, "generate-" + model_name, config);
  const auto model = lm::LanguageModel::load(model_dir);
  const auto& e = config.section("eval");
  const auto prompts = tokenize_all(prompt_sentences, model.vocab(), e.at("prompts").get<std::size_t>());
  std::optional<classifier::Classifier> judge;
  if (fs::exists(out / "classifier" / "manifest.json")) judge = classifier::Classifier::load(out / "classifier");
  const auto samples = e.at("samples_per_prompt").get<std::size_t>();
  const auto seed = derive_seed(config.seed(), 30);
  std::vector<eval::AuditRecord> records;
  std::vector<nlohmann::json> rows;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    for (std::size_t s = 0; s < samples; ++s) {
      Rng rng(derive_seed(seed, p, s, 0));
      const auto rec = lm::sample_continuation(model, prompts[p], eval_sampling(config), rng);
      eval::AuditRecord a{corpus::detokenize(prompts[p], model.vocab()),
                          corpus::detokenize(rec.continuation, model.vocab()), -1, rec.mean_word_loss()};
      if (judge && !corpus::trim(a.continuation).empty()) a.label = judge->judge(a.continuation).label;
      rows.emplace_back(a);
      records.push_back(std::move(a));
    }
  }
  const auto rel = fs::path("generations") / (model_name + ".jsonl");
  write_jsonl(out / rel, rows);
  artifacts.add(rel);
  artifacts.commit();
  return records;
}

// Compares the baseline with its fine-tuned counterpart on held-out prompts
// and writes reports/eval[-alt].json plus per-sentence audit files.
inline eval::EvalReport cmd_evaluate(const RunConfig& config, const fs::path& out) {
  config.validate();
  const auto& e = config.section("eval");
  const auto dimension = e.at("classifier").get<std::string>();
  if (dimension != "primary" && dimension != "alt") throw InvalidArgument("eval.classifier must be primary or alt");
  const auto baseline_name = e.at("baseline").get<std::string>();
  auto model_name = e.at("model").get<std::string>();
  if (model_name.empty()) model_name = checkpoint_name("lm-norm", dimension);
  const auto classifier_name = checkpoint_name("classifier", dimension);
  const auto baseline_dir = require_path(out / baseline_name, "baseline checkpoint");
  const auto model_dir = require_path(out / model_name, "fine-tuned checkpoint");
  const auto classifier_dir = require_path(out / classifier_name, "classifier checkpoint");
  const auto eval_prompts = read_split(out, "eval_prompts");
  const auto tuning_prompts = read_split(out, "finetune_prompts");
  const auto test = read_split(out, "primary_test");
  OutputLock lock(out);
  ArtifactSet artifacts(out, "evaluate-" + dimension, config);

  const auto baseline = lm::LanguageModel::load(baseline_dir);
  const auto tuned = lm::LanguageModel::load(model_dir);
  if (!(baseline.vocab() == tuned.vocab())) {
    throw VocabularyMismatch(baseline_name + " and " + model_name + " use different vocabularies");
  }
  const auto judge = classifier::Classifier::load(classifier_dir);
  const auto prompts = tokenize_all(eval_prompts, baseline.vocab(), e.at("prompts").get<std::size_t>());
  eval::require_disjoint_prompts(prompts, tokenize_all(tuning_prompts, baseline.vocab(), tuning_prompts.size()));

  const auto samples = e.at("samples_per_prompt").get<std::size_t>();
  const auto seed = derive_seed(config.seed(), 30);
  const auto sampling = eval_sampling(config);
  const auto before = eval::measure_flagged_ratio(baseline, judge, prompts, samples, seed, sampling);
  const auto after = eval::measure_flagged_ratio(tuned, judge, prompts, samples, seed, sampling);

  const auto spw = config.section("data").at("sentences_per_window").get<std::size_t>();
  const auto test_seqs = lm::make_lm_sequences(texts_of(test), baseline.vocab(), baseline.config().context, spw);

  std::optional<eval::QuadrantCounts> quadrants;
  if (fs::exists(out / "classifier/manifest.json") && fs::exists(out / "classifier-alt/manifest.json")) {
    const auto a = classifier::Classifier::load(out / "classifier");
    const auto b = classifier::Classifier::load(out / "classifier-alt");
    std::vector<std::string> sentences;
    for (const auto& r : before.records) sentences.push_back(r.continuation);
    quadrants = eval::quadrant_agreement(a, b, sentences);
  }

  const auto report = eval::build_report({model_name, classifier_name, &before, &after, lm::perplexity(baseline, test_seqs),
                                          lm::perplexity(tuned, test_seqs), quadrants, config.seed(), config.digest()});
  const auto suffix = dimension == "alt" ? std::string("-alt") : std::string();
  const auto report_rel = fs::path("reports") / ("eval" + suffix + ".json");
  write_text(out / report_rel, eval::serialize(report));
  artifacts.add(report_rel);
  for (const auto& [name, m] : {std::pair{baseline_name, &before}, std::pair{model_name, &after}}) {
    std::vector<nlohmann::json> rows(m->records.begin(), m->records.end());
    const auto rel = fs::path("reports") / ("audit-" + name + suffix + ".jsonl");
    write_jsonl(out / rel, rows);
    artifacts.add(rel);
  }
  artifacts.commit();
  return report;
}

}  // namespace normtune::cli
