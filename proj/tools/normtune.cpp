#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "normtune/cli/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::string out_dir = "out";
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config file (defaults apply when omitted)");
  app->add_option("--out-dir", c.out_dir, "artifact directory");
  app->add_option("--seed", c.seed, "override the config seed");
  app->add_option("--set", c.sets, "section.key=value override (repeatable)");
}

normtune::cli::RunConfig load(const Common& c) {
  auto config = c.config.empty() ? normtune::cli::RunConfig() : normtune::cli::RunConfig::from_file(c.config);
  for (const auto& s : c.sets) config.set(s);
  if (c.seed) config.set_seed(*c.seed);
  return config;
}

std::string one_line(std::string s) {
  for (auto& ch : s) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  namespace cmd = normtune::cli;
  CLI::App app{"normtune: classifier-guided fine-tuning of small language models"};
  app.require_subcommand(1);

  Common common;
  std::string dimension = "primary";
  std::string model;
  std::vector<std::string> prompts;

  auto* prepare = app.add_subcommand("prepare-data", "generate or load corpora and write splits");
  auto* train_lm = app.add_subcommand("train-lm", "train the baseline language model");
  auto* train_cls = app.add_subcommand("train-classifier", "train a sentence classifier");
  auto* finetune = app.add_subcommand("finetune", "fine-tune the baseline against a classifier");
  auto* generate = app.add_subcommand("generate", "sample continuations from a checkpoint");
  auto* evaluate = app.add_subcommand("evaluate", "compare baseline and fine-tuned models");
  for (auto* sub : {prepare, train_lm, train_cls, finetune, generate, evaluate}) add_common(sub, common);
  train_cls->add_option("--dimension", dimension, "primary or alt")->check(CLI::IsMember({"primary", "alt"}));
  generate->add_option("--model", model, "checkpoint directory name under --out-dir")->required();
  generate->add_option("--prompt", prompts, "prompt text (repeatable); defaults to held-out prompts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    const auto config = load(common);
    const std::filesystem::path out = common.out_dir;
    if (*prepare) {
      cmd::cmd_prepare_data(config, out);
    } else if (*train_lm) {
      cmd::cmd_train_lm(config, out);
    } else if (*train_cls) {
      const auto r = cmd::cmd_train_classifier(config, out, dimension);
      std::cout << "test_accuracy " << r.accuracy() << "\n";
    } else if (*finetune) {
      for (const auto& s : cmd::cmd_finetune(config, out)) std::cout << nlohmann::json(s).dump() << "\n";
    } else if (*generate) {
      for (const auto& r : cmd::cmd_generate(config, out, model, prompts)) std::cout << r.continuation << "\n";
    } else if (*evaluate) {
      std::cout << normtune::eval::serialize(cmd::cmd_evaluate(config, out));
    }
  } catch (const normtune::Error& e) {
    std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: format: " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
