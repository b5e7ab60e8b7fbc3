#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cmc/model.hpp"
#include "cmc/vocab.hpp"

namespace cmc::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kRuntimeError = 4 };

// Runs one subcommand. args[0] is the program name.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

// A model directory holds model.ckpt plus the tokenizer files model.vocab
// (and model.merges for merge tokenizers).
struct ModelDir {
  TinyTransformer model;
  Tokenizer tokenizer;
};

ModelDir load_model_dir(const std::filesystem::path& dir);
std::vector<std::filesystem::path> save_model_dir(const std::filesystem::path& dir, const TinyTransformer& model,
                                                  const Tokenizer& tok);

}  // namespace cmc::cli
