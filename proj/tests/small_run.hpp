#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "normtune/util/sha256.hpp"

namespace testutil {

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Overrides that shrink every stage of the default pipeline to seconds.
inline nlohmann::json small_overrides() {
  return {
      {"data",
       {{"finetune_prompts", 8},
        {"primary", {{"count_per_class", 40}}},
        {"alt", {{"count_per_class", 30}}}}},
      {"lm", {{"layers", 1}, {"heads", 2}, {"width", 16}, {"context", 32}, {"epochs", 1}, {"max_vocab", 128}}},
      {"classifier", {{"layers", 1}, {"heads", 2}, {"width", 16}, {"context", 32}, {"epochs", 1}, {"max_vocab", 128}}},
      {"finetune", {{"iterations", 2}, {"samples_per_prompt", 1}, {"max_new", 20}}},
      {"eval", {{"prompts", 10}, {"max_new", 20}}},
  };
}

struct CommandResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

// Runs the normtune executable with `args`, capturing both streams.
inline CommandResult run_cli(const std::string& args, const std::filesystem::path& scratch) {
  const auto out = scratch / "stdout.txt";
  const auto err = scratch / "stderr.txt";
  const std::string cmd = std::string("\"") + NORMTUNE_CLI + "\" " + args + " > \"" + out.string() + "\" 2> \"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  CommandResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto slurp = [](const std::filesystem::path& p) {
    std::string s;
    if (FILE* f = std::fopen(p.c_str(), "rb")) {
      char buf[4096];
      std::size_t n;
      while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) s.append(buf, n);
      std::fclose(f);
    }
    return s;
  };
  r.out = slurp(out);
  r.err = slurp(err);
  std::filesystem::remove(out);
  std::filesystem::remove(err);
  return r;
}

// Relative path -> SHA-256 of every regular file under `root`.
inline std::map<std::string, std::string> tree_digest(const std::filesystem::path& root) {
  std::map<std::string, std::string> d;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) d[std::filesystem::relative(e.path(), root).generic_string()] = normtune::sha256_file(e.path());
  }
  return d;
}

}  // namespace testutil
