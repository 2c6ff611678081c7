#pragma once

#include <filesystem>
#include <initializer_list>
#include <map>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "normtune/classifier/classifier.hpp"
#include "normtune/corpus/split.hpp"
#include "normtune/corpus/synthetic.hpp"
#include "normtune/lm/language_model.hpp"
#include "normtune/lm/sampling.hpp"
#include "normtune/tune/finetune.hpp"
#include "normtune/util/sha256.hpp"

namespace normtune::cli {

using nlohmann::json;

template <class Enum>
Enum parse_enum(const json& value, std::initializer_list<std::pair<const char*, Enum>> names, const char* key) {
  const auto text = value.get<std::string>();
  for (const auto& [name, e] : names) {
    if (text == name) return e;
  }
  throw InvalidArgument(std::string(key) + ": unknown value '" + text + "'");
}

inline json default_config() {
  const std::vector<std::string> kind_verbs{"helps", "thanks", "feeds", "protects",
                                            "visits", "comforts", "teaches", "greets"};
  const std::vector<std::string> harm_verbs{"robs", "hits", "insults", "cheats",
                                            "betrays", "mocks", "threatens", "bullies"};
  const std::vector<std::string> warm_tones{"calmly", "gladly", "gently", "warmly", "happily", "cheerfully"};
  const std::vector<std::string> cold_tones{"angrily", "bitterly", "coldly", "rudely", "sadly", "grimly"};
  const std::vector<std::string> subjects{"knight", "farmer", "child",  "teacher", "sailor",
                                          "merchant", "baker", "doctor", "soldier", "pilot"};
  const std::vector<std::string> objects{"king",   "neighbor", "friend", "village", "stranger",
                                         "family", "priest",   "widow",  "captain", "student"};
  auto all = [](std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  return json{
      {"seed", 1},
      {"data",
       {{"source", "synthetic"},
        {"path", ""},
        {"alt_path", ""},
        {"ratios", {0.8, 0.1, 0.1}},
        {"sentences_per_window", 2},
        {"finetune_prompts", 64},
        {"primary",
         {{"benign", kind_verbs},
          {"undesirable", harm_verbs},
          {"templates", {"the {subject} {tone} {marker} the {object} ."}},
          {"slots", {{"subject", subjects}, {"object", objects}, {"tone", all(warm_tones, cold_tones)}}},
          {"count_per_class", 1200}}},
        {"alt",
         {{"benign", warm_tones},
          {"undesirable", cold_tones},
          {"templates", {"the {subject} {marker} {verb} the {object} ."}},
          {"slots", {{"subject", subjects}, {"object", objects}, {"verb", all(kind_verbs, harm_verbs)}}},
          {"count_per_class", 500}}}}},
      {"lm",
       {{"layers", 4},
        {"heads", 4},
        {"width", 128},
        {"context", 64},
        {"dropout", 0.1},
        {"max_vocab", 512},
        {"epochs", 4},
        {"batch_size", 16},
        {"learning_rate", 1e-3}}},
      {"classifier",
       {{"layers", 2},
        {"heads", 4},
        {"width", 128},
        {"context", 64},
        {"pooling", "mean"},
        {"threshold", 0.5},
        {"dropout", 0.1},
        {"max_vocab", 512},
        {"epochs", 4},
        {"batch_size", 16},
        {"learning_rate", 1e-3}}},
      {"finetune",
       {{"classifier", "primary"},
        {"rho", 5.0},
        {"iterations", 10},
        {"beta_decrement", 0.05},
        {"samples_per_prompt", 4},
        {"learning_rate", 3e-4},
        {"batch_size", 16},
        {"clip_norm", 1.0},
        {"freeze", "all-but-one-head"},
        {"freeze_layer", -1},
        {"freeze_head", 0},
        {"resample_short", true},
        {"sign", "reversed"},
        {"temperature", 1.0},
        {"top_k", 40},
        {"max_new", 60}}},
      {"eval",
       {{"classifier", "primary"},
        {"baseline", "lm"},
        {"model", ""},
        {"prompts", 200},
        {"samples_per_prompt", 1},
        {"temperature", 1.0},
        {"top_k", 40},
        {"max_new", 60}}},
  };
}

// Recursively overlays `patch` onto `base`; keys absent from `base` are
// rejected so typos do not pass silently.
inline void merge_into(json& base, const json& patch, const std::string& path = "") {
  for (const auto& [key, value] : patch.items()) {
    const auto full = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw InvalidArgument("unknown config key '" + full + "'");
    if (base[key].is_object() && value.is_object()) {
      merge_into(base[key], value, full);
    } else {
      base[key] = value;
    }
  }
}

// Declarative description of a whole experiment. The digest covers every
// setting that influences artifacts (not where they are written).
class RunConfig {
 public:
  RunConfig() : doc_(default_config()) {}
  explicit RunConfig(const json& overrides) : doc_(default_config()) { merge_into(doc_, overrides); }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw FormatError("config " + path.string() + ": " + e.what());
    }
    return RunConfig(j);
  }

  // `section.key=value`; value is parsed as JSON, falling back to a string.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidArgument("--set expects section.key=value");
    const auto key = assignment.substr(0, eq);
    const auto raw = assignment.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;
    }
    json* node = &doc_;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object() || !node->contains(part)) throw InvalidArgument("unknown config key '" + key + "'");
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    *node = value;
  }

  void set_seed(std::uint64_t seed) { doc_["seed"] = seed; }

  const json& doc() const { return doc_; }
  std::string canonical() const { return doc_.dump(); }
  std::string digest() const { return sha256_hex(canonical()); }

  std::uint64_t seed() const { return doc_.at("seed").get<std::uint64_t>(); }
  const json& section(const std::string& name) const { return doc_.at(name); }

  void validate() const {
    const auto& data = section("data");
    const auto source = data.at("source").get<std::string>();
    if (source != "synthetic" && source != "file") throw InvalidArgument("data.source must be synthetic or file");
    if (source == "file") {
      const auto path = data.at("path").get<std::string>();
      if (path.empty() || !std::filesystem::exists(path)) throw IoError("data.path not found: '" + path + "'");
      const auto alt = data.at("alt_path").get<std::string>();
      if (!alt.empty() && !std::filesystem::exists(alt)) throw IoError("data.alt_path not found: '" + alt + "'");
    }
    const auto ratios = data.at("ratios").get<std::vector<double>>();
    if (ratios.size() != 3) throw InvalidArgument("data.ratios needs three entries");
    lm_config().validate_shape();
    (void)classifier_config();
    (void)finetune_settings();
  }

  corpus::SyntheticSpec synthetic_spec(const std::string& which) const {
    const auto& j = section("data").at(which);
    corpus::SyntheticSpec s;
    s.benign_markers = j.at("benign").get<std::vector<std::string>>();
    s.undesirable_markers = j.at("undesirable").get<std::vector<std::string>>();
    s.templates = j.at("templates").get<std::vector<std::string>>();
    s.slots = j.at("slots").get<std::map<std::string, std::vector<std::string>>>();
    s.count_per_class = j.at("count_per_class").get<std::size_t>();
    return s;
  }

  corpus::SplitRatios ratios() const {
    const auto r = section("data").at("ratios").get<std::vector<double>>();
    return {r.at(0), r.at(1), r.at(2)};
  }

  struct LmSettings {
    lm::LmConfig model;
    std::size_t max_vocab;
    std::size_t epochs;
    std::size_t batch_size;
    double learning_rate;
    void validate_shape() const {
      if (model.heads == 0 || model.width % model.heads != 0) throw InvalidArgument("lm.width must divide by lm.heads");
      if (model.context < 2) throw InvalidArgument("lm.context must be at least 2");
    }
  };

  LmSettings lm_config() const {
    const auto& j = section("lm");
    LmSettings s;
    s.model.layers = j.at("layers").get<std::size_t>();
    s.model.heads = j.at("heads").get<std::size_t>();
    s.model.width = j.at("width").get<std::size_t>();
    s.model.context = j.at("context").get<std::size_t>();
    s.model.dropout = j.at("dropout").get<double>();
    s.max_vocab = j.at("max_vocab").get<std::size_t>();
    s.epochs = j.at("epochs").get<std::size_t>();
    s.batch_size = j.at("batch_size").get<std::size_t>();
    s.learning_rate = j.at("learning_rate").get<double>();
    return s;
  }

  struct ClassifierSettings {
    classifier::ClassifierConfig model;
    std::size_t max_vocab;
    classifier::ClassifierTrainOptions train;
  };

  ClassifierSettings classifier_config() const {
    const auto& j = section("classifier");
    ClassifierSettings s;
    s.model.layers = j.at("layers").get<std::size_t>();
    s.model.heads = j.at("heads").get<std::size_t>();
    s.model.width = j.at("width").get<std::size_t>();
    s.model.context = j.at("context").get<std::size_t>();
    s.model.pooling = parse_enum<classifier::Pooling>(j.at("pooling"),
                                {{"mean", classifier::Pooling::mean}, {"first-token", classifier::Pooling::first_token}},
                                "classifier.pooling");
    s.model.threshold = j.at("threshold").get<double>();
    s.model.dropout = j.at("dropout").get<double>();
    s.max_vocab = j.at("max_vocab").get<std::size_t>();
    s.train.epochs = j.at("epochs").get<std::size_t>();
    s.train.batch_size = j.at("batch_size").get<std::size_t>();
    s.train.learning_rate = j.at("learning_rate").get<double>();
    return s;
  }

  struct FineTuneSettings {
    std::string classifier;
    tune::FineTuneConfig config;  // prompts filled in by the caller
  };

  FineTuneSettings finetune_settings() const {
    const auto& j = section("finetune");
    FineTuneSettings s;
    s.classifier = j.at("classifier").get<std::string>();
    if (s.classifier != "primary" && s.classifier != "alt") {
      throw InvalidArgument("finetune.classifier must be primary or alt");
    }
    auto& c = s.config;
    c.rho = j.at("rho").get<double>();
    c.max_iterations = j.at("iterations").get<std::size_t>();
    c.beta_decrement = j.at("beta_decrement").get<double>();
    c.samples_per_prompt = j.at("samples_per_prompt").get<std::size_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.clip_norm = j.at("clip_norm").get<double>();
    c.freeze = parse_enum<tune::FreezePolicy>(j.at("freeze"),
                          {{"none", tune::FreezePolicy::none},
                           {"all-but-one-head", tune::FreezePolicy::all_but_one_head},
                           {"all-but-last-layer", tune::FreezePolicy::all_but_last_layer}},
                          "finetune.freeze");
    const auto layer = j.at("freeze_layer").get<long long>();
    c.freeze_layer = layer < 0 ? tune::kLastLayer : static_cast<std::size_t>(layer);
    c.freeze_head = j.at("freeze_head").get<std::size_t>();
    c.resample_short = j.at("resample_short").get<bool>();
    c.sign = parse_enum<tune::PunishmentSign>(j.at("sign"),
                        {{"as-published", tune::PunishmentSign::as_published},
                         {"reversed", tune::PunishmentSign::reversed}},
                        "finetune.sign");
    c.sampling = {j.at("temperature").get<double>(), j.at("top_k").get<std::size_t>(),
                  j.at("max_new").get<std::size_t>()};
    return s;
  }

 private:
  json doc_;
};

}  // namespace normtune::cli
