#pragma once

#include <cmath>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "normtune/eval/harness.hpp"

namespace normtune::eval {

// Before/after comparison of flagged-generation rates. Every proportion in
// the serialized form is derived from the integer counts stored alongside.
struct EvalReport {
  std::string model;
  std::string classifier;
  std::size_t n = 0;
  std::size_t flagged = 0;
  std::optional<std::size_t> n_hat;
  std::optional<std::size_t> flagged_hat;
  double ppl_before = 0.0;
  double ppl_after = 0.0;
  std::optional<QuadrantCounts> quadrants;
  std::uint64_t seed = 0;
  std::string config_sha256;

  double p() const { return static_cast<double>(flagged) / static_cast<double>(n); }
  std::optional<double> p_hat() const {
    if (!n_hat) return std::nullopt;
    return static_cast<double>(*flagged_hat) / static_cast<double>(*n_hat);
  }
  std::optional<double> pct_decrease() const {
    const auto ph = p_hat();
    if (!ph || flagged == 0) return std::nullopt;
    return percentage_decrease(p(), *ph);
  }

  void validate() const {
    if (n == 0) throw InvalidArgument("report: zero samples");
    if (flagged > n) throw InvalidArgument("report: more flagged samples than samples");
    if (n_hat.has_value() != flagged_hat.has_value()) throw InvalidArgument("report: incomplete comparison counts");
    if (n_hat && (*n_hat == 0 || *flagged_hat > *n_hat)) throw InvalidArgument("report: inconsistent comparison counts");
    if (quadrants && quadrants->total() == 0) throw InvalidArgument("report: empty quadrant analysis");
  }

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline nlohmann::json quadrant_json(const QuadrantCounts& q) {
  return {{"aa", q.aa}, {"ff", q.ff}, {"af", q.af}, {"fa", q.fa}};
}

inline nlohmann::json to_json_value(const EvalReport& r) {
  r.validate();
  nlohmann::json j{{"model", r.model},
                   {"classifier", r.classifier},
                   {"n", r.n},
                   {"flagged", r.flagged},
                   {"p", r.p()},
                   {"ppl_before", r.ppl_before},
                   {"ppl_after", r.ppl_after},
                   {"seed", r.seed},
                   {"config_sha256", r.config_sha256}};
  if (r.n_hat) {
    j["n_hat"] = *r.n_hat;
    j["flagged_hat"] = *r.flagged_hat;
    j["p_hat"] = *r.p_hat();
    if (const auto d = r.pct_decrease()) j["pct_decrease"] = *d;
  }
  if (r.quadrants) {
    j["quadrants"] = quadrant_json(*r.quadrants);
    const auto p = r.quadrants->proportions();
    j["quadrant_proportions"] = {{"aa", p[0]}, {"ff", p[1]}, {"af", p[2]}, {"fa", p[3]}};
  }
  return j;
}

inline std::string serialize(const EvalReport& r) { return to_json_value(r).dump(2) + "\n"; }

// Parses a report and checks that its derived numbers agree with its counts.
inline EvalReport parse_report(const std::string& text) {
  EvalReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    j.at("model").get_to(r.model);
    j.at("classifier").get_to(r.classifier);
    j.at("n").get_to(r.n);
    j.at("flagged").get_to(r.flagged);
    j.at("ppl_before").get_to(r.ppl_before);
    j.at("ppl_after").get_to(r.ppl_after);
    j.at("seed").get_to(r.seed);
    j.at("config_sha256").get_to(r.config_sha256);
    if (j.contains("n_hat")) {
      r.n_hat = j.at("n_hat").get<std::size_t>();
      r.flagged_hat = j.at("flagged_hat").get<std::size_t>();
    }
    if (j.contains("quadrants")) {
      const auto& q = j.at("quadrants");
      r.quadrants = QuadrantCounts{q.at("aa").get<std::size_t>(), q.at("ff").get<std::size_t>(),
                                   q.at("af").get<std::size_t>(), q.at("fa").get<std::size_t>()};
    }
    r.validate();
    auto mismatch = [](double a, double b) { return std::abs(a - b) > 1e-12; };
    if (mismatch(j.at("p").get<double>(), r.p())) throw FormatError("report: p contradicts its counts");
    if (r.n_hat && mismatch(j.at("p_hat").get<double>(), *r.p_hat())) {
      throw FormatError("report: p_hat contradicts its counts");
    }
    if (const auto d = r.pct_decrease(); d && mismatch(j.at("pct_decrease").get<double>(), *d)) {
      throw FormatError("report: pct_decrease contradicts its counts");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return r;
}

}  // namespace normtune::eval

namespace normtune::eval {

struct ReportInputs {
  std::string model;
  std::string classifier;
  const FlaggedMeasurement* before = nullptr;
  const FlaggedMeasurement* after = nullptr;  // optional
  double ppl_before = 0.0;
  double ppl_after = 0.0;
  std::optional<QuadrantCounts> quadrants;
  std::uint64_t seed = 0;
  std::string config_sha256;
};

inline void check_measurement(const FlaggedMeasurement& m, const char* which) {
  std::size_t flagged = 0;
  for (const auto& r : m.records) flagged += r.label == 0 ? 1 : 0;
  if (m.records.size() != m.total || flagged != m.flagged) {
    throw InvalidArgument(std::string("report: ") + which + " counts disagree with its records");
  }
}

inline EvalReport build_report(const ReportInputs& in) {
  if (!in.before) throw InvalidArgument("report: baseline measurement missing");
  check_measurement(*in.before, "baseline");
  EvalReport r;
  r.model = in.model;
  r.classifier = in.classifier;
  r.n = in.before->total;
  r.flagged = in.before->flagged;
  if (in.after) {
    check_measurement(*in.after, "comparison");
    r.n_hat = in.after->total;
    r.flagged_hat = in.after->flagged;
  }
  r.ppl_before = in.ppl_before;
  r.ppl_after = in.ppl_after;
  if (in.quadrants) {
    if (in.quadrants->total() != in.before->total) {
      throw InvalidArgument("report: quadrant counts do not cover the baseline sample");
    }
    r.quadrants = in.quadrants;
  }
  r.seed = in.seed;
  r.config_sha256 = in.config_sha256;
  r.validate();
  return r;
}

}  // namespace normtune::eval
