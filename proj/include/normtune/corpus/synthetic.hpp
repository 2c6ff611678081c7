#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "normtune/corpus/sentence.hpp"
#include "normtune/corpus/vocabulary.hpp"
#include "normtune/util/error.hpp"
#include "normtune/util/random.hpp"

namespace normtune::corpus {

// Template grammar for a labeled toy corpus. Each template holds exactly one
// `{marker}` slot, filled from the benign pool for label 1 and from the
// undesirable pool for label 0; any other `{name}` slot draws from `slots`.
struct SyntheticSpec {
  std::vector<std::string> benign_markers;
  std::vector<std::string> undesirable_markers;
  std::vector<std::string> templates{"the {subject} {marker} the {object} ."};
  std::map<std::string, std::vector<std::string>> slots{
      {"subject", {"knight", "farmer", "child", "teacher", "sailor", "merchant"}},
      {"object", {"king", "neighbor", "friend", "village", "stranger", "family"}},
  };
  std::size_t count_per_class = 0;
};

namespace detail {

struct TemplatePart {
  bool is_slot = false;
  std::string text;
};

inline std::vector<TemplatePart> parse_template(const std::string& tmpl) {
  std::vector<TemplatePart> parts;
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    const auto open = tmpl.find('{', pos);
    if (open == std::string::npos) {
      parts.push_back({false, tmpl.substr(pos)});
      break;
    }
    if (open > pos) parts.push_back({false, tmpl.substr(pos, open - pos)});
    const auto close = tmpl.find('}', open);
    if (close == std::string::npos) throw InvalidArgument("unterminated slot in template '" + tmpl + "'");
    parts.push_back({true, tmpl.substr(open + 1, close - open - 1)});
    pos = close + 1;
  }
  return parts;
}

inline std::set<std::string> word_set(const std::vector<std::string>& pool) {
  std::set<std::string> out;
  for (const auto& entry : pool) {
    for (auto& w : split_words(entry)) out.insert(std::move(w));
  }
  return out;
}

}  // namespace detail

inline void validate(const SyntheticSpec& spec) {
  if (spec.templates.empty()) throw InvalidArgument("synthetic spec needs at least one template");
  if (spec.count_per_class > 0 && (spec.benign_markers.empty() || spec.undesirable_markers.empty())) {
    throw InvalidArgument("synthetic spec needs non-empty benign and undesirable marker pools");
  }
  const auto undesirable = detail::word_set(spec.undesirable_markers);
  for (const auto& w : detail::word_set(spec.benign_markers)) {
    if (undesirable.count(w)) throw InvalidArgument("marker pools overlap on '" + w + "'");
  }
  for (const auto& [name, pool] : spec.slots) {
    if (pool.empty()) throw InvalidArgument("slot pool '" + name + "' is empty");
    for (const auto& w : detail::word_set(pool)) {
      if (undesirable.count(w)) {
        throw InvalidArgument("slot pool '" + name + "' contains undesirable marker '" + w + "'");
      }
    }
  }
  for (const auto& tmpl : spec.templates) {
    std::size_t markers = 0;
    for (const auto& part : detail::parse_template(tmpl)) {
      if (!part.is_slot) {
        for (const auto& w : split_words(part.text)) {
          if (undesirable.count(w)) throw InvalidArgument("template literal contains marker '" + w + "'");
        }
        continue;
      }
      if (part.text == "marker") {
        ++markers;
      } else if (!spec.slots.count(part.text)) {
        throw InvalidArgument("template references unknown slot '" + part.text + "'");
      }
    }
    if (markers != 1) throw InvalidArgument("template must contain exactly one {marker}: '" + tmpl + "'");
  }
}

// Deterministic under `seed`; the result is shuffled so classes interleave.
inline std::vector<LabeledSentence> generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  validate(spec);
  std::vector<std::vector<detail::TemplatePart>> templates;
  for (const auto& t : spec.templates) templates.push_back(detail::parse_template(t));

  Rng rng(seed);
  auto pick = [&rng](const std::vector<std::string>& pool) -> const std::string& {
    return pool[rng.below(pool.size())];
  };

  std::vector<LabeledSentence> out;
  out.reserve(2 * spec.count_per_class);
  for (int label : {1, 0}) {
    const auto& markers = label == 1 ? spec.benign_markers : spec.undesirable_markers;
    for (std::size_t k = 0; k < spec.count_per_class; ++k) {
      const auto& parts = templates[rng.below(templates.size())];
      std::string text;
      for (const auto& part : parts) {
        if (!part.is_slot) {
          text += part.text;
        } else if (part.text == "marker") {
          text += pick(markers);
        } else {
          text += pick(spec.slots.at(part.text));
        }
      }
      out.push_back({std::move(text), label});
    }
  }
  rng.shuffle(std::span<LabeledSentence>(out));
  return out;
}

}  // namespace normtune::corpus
