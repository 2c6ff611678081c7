#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "normtune/util/error.hpp"

namespace normtune::corpus {

// Label 0 marks the undesirable class; 1 is acceptable.
struct LabeledSentence {
  std::string text;
  int label = 1;

  friend bool operator==(const LabeledSentence&, const LabeledSentence&) = default;
};

enum class CorpusFormat { jsonl, tsv };

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline LabeledSentence make_sentence(std::string_view text, long long label, std::size_t line) {
  const auto where = "line " + std::to_string(line) + ": ";
  if (label != 0 && label != 1) {
    throw FormatError(where + "label must be 0 or 1, got " + std::to_string(label));
  }
  if (trim(text).empty()) throw FormatError(where + "empty sentence text");
  return {std::string(text), static_cast<int>(label)};
}

inline LabeledSentence parse_jsonl_record(std::string_view line, std::size_t line_no) {
  const auto where = "line " + std::to_string(line_no) + ": ";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(where + "malformed JSON (" + e.what() + ")");
  }
  if (!j.is_object() || !j.contains("text") || !j.contains("label")) {
    throw FormatError(where + "expected an object with \"text\" and \"label\"");
  }
  if (!j["text"].is_string()) throw FormatError(where + "\"text\" must be a string");
  if (!j["label"].is_number_integer()) throw FormatError(where + "\"label\" must be an integer");
  return make_sentence(j["text"].get<std::string>(), j["label"].get<long long>(), line_no);
}

inline LabeledSentence parse_tsv_record(std::string_view line, std::size_t line_no) {
  const auto tab = line.rfind('\t');
  if (tab == std::string_view::npos) {
    throw FormatError("line " + std::to_string(line_no) + ": expected text<TAB>label");
  }
  const auto label_text = trim(line.substr(tab + 1));
  long long label = -1;
  if (label_text == "0") {
    label = 0;
  } else if (label_text == "1") {
    label = 1;
  } else {
    throw FormatError("line " + std::to_string(line_no) + ": label must be 0 or 1, got '" +
                      std::string(label_text) + "'");
  }
  return make_sentence(line.substr(0, tab), label, line_no);
}

// Blank lines are skipped; every other line must hold exactly one record.
inline std::vector<LabeledSentence> load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path.string());
  std::vector<LabeledSentence> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    try {
      out.push_back(format == CorpusFormat::jsonl ? parse_jsonl_record(line, line_no)
                                                  : parse_tsv_record(line, line_no));
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return out;
}

inline CorpusFormat format_from_path(const std::filesystem::path& path) {
  return path.extension() == ".tsv" ? CorpusFormat::tsv : CorpusFormat::jsonl;
}

inline std::string to_jsonl_line(const LabeledSentence& s) {
  return nlohmann::json{{"text", s.text}, {"label", s.label}}.dump();
}

inline void write_corpus(const std::filesystem::path& path, const std::vector<LabeledSentence>& sentences) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& s : sentences) out << to_jsonl_line(s) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace normtune::corpus
