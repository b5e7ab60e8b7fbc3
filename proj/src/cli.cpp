#include "cmc/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <regex>
#include <sstream>

#include "CLI11.hpp"
#include "cmc/analysis.hpp"
#include "cmc/compose.hpp"
#include "cmc/data.hpp"
#include "cmc/decode.hpp"
#include "cmc/error.hpp"
#include "cmc/hash.hpp"
#include "cmc/tokenmap.hpp"
#include "cmc/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace cmc::cli {

ModelDir load_model_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail_data("model directory not found: " + dir.string());
  auto model = load_checkpoint(dir / "model.ckpt");
  auto tok = Tokenizer::load(dir / "model");
  if (tok.vocab().size() != model.config().vocab_size) {
    fail_data("model directory " + dir.string() + ": tokenizer and checkpoint disagree on vocabulary size");
  }
  return ModelDir{std::move(model), std::move(tok)};
}

std::vector<fs::path> save_model_dir(const fs::path& dir, const TinyTransformer& model, const Tokenizer& tok) {
  fs::create_directories(dir);
  save_checkpoint(model, dir / "model.ckpt");
  tok.save(dir / "model");
  std::vector<fs::path> files{dir / "model.ckpt", dir / "model.vocab"};
  if (tok.scheme() == TokenizerScheme::merge) files.push_back(dir / "model.merges");
  return files;
}

namespace {

struct ModelOpts {
  std::size_t context_len = 128;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 256;
  std::uint64_t seed = 0;

  ModelConfig config(std::size_t vocab) const { return {vocab, context_len, d_model, n_layers, n_heads, d_ff, seed}; }
};

void add_model_opts(CLI::App* app, ModelOpts& o) {
  app->add_option("--context-len", o.context_len, "Context window in tokens")->capture_default_str();
  app->add_option("--d-model", o.d_model, "Hidden size")->capture_default_str();
  app->add_option("--n-layers", o.n_layers, "Decoder layers")->capture_default_str();
  app->add_option("--n-heads", o.n_heads, "Attention heads")->capture_default_str();
  app->add_option("--d-ff", o.d_ff, "Feed-forward width")->capture_default_str();
  app->add_option("--model-seed", o.seed, "Initialization seed")->capture_default_str();
}

struct TrainOpts {
  double learning_rate = 3e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 1;
  std::string optimizer = "adam";
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  std::string loss_mask = "response";

  TrainConfig config() const {
    TrainConfig c;
    c.learning_rate = learning_rate;
    c.batch_size = batch_size;
    c.epochs = epochs;
    c.optimizer = optimizer == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
    c.grad_clip = grad_clip > 0.0 ? std::optional<double>(grad_clip) : std::nullopt;
    c.seed = seed;
    c.loss_mask = loss_mask == "full" ? LossMask::full_sequence : LossMask::response_only;
    return c;
  }
};

void add_train_opts(CLI::App* app, TrainOpts& o) {
  app->add_option("--lr", o.learning_rate, "Learning rate")->capture_default_str();
  app->add_option("--batch-size", o.batch_size, "Sequences per step")->capture_default_str();
  app->add_option("--epochs", o.epochs, "Passes over the data")->capture_default_str();
  app->add_option("--optimizer", o.optimizer, "adam or sgd")
      ->check(CLI::IsMember({"adam", "sgd"}))
      ->capture_default_str();
  app->add_option("--grad-clip", o.grad_clip, "Global gradient norm limit, <= 0 disables")->capture_default_str();
  app->add_option("--seed", o.seed, "Data order seed")->capture_default_str();
  app->add_option("--loss-mask", o.loss_mask, "response or full")
      ->check(CLI::IsMember({"response", "full"}))
      ->capture_default_str();
}

struct ComposeOpts {
  std::string mode = "cmc";
  double alpha = 1.0;
  bool raw_base = false;
  std::string map;
  std::string strategy = "pm-mined";
};

void add_compose_opts(CLI::App* app, ComposeOpts& o) {
  app->add_option("--mode", o.mode, "cmc, proxy or none")
      ->check(CLI::IsMember({"cmc", "proxy", "none"}))
      ->capture_default_str();
  app->add_option("--alpha", o.alpha, "Strength of the delta logits")->capture_default_str();
  app->add_flag("--raw-base", o.raw_base, "Add the delta to raw user logits instead of log-probabilities");
  app->add_option("--map", o.map, "Token mapping file (user to delta)")->check(CLI::ExistingFile);
  app->add_option("--map-strategy", o.strategy, "Mapping built on the fly when --map is absent")
      ->check(CLI::IsMember({"exact", "mined", "pm-mined"}))
      ->capture_default_str();
}

struct GenOpts {
  std::size_t max_new_tokens = 32;
  bool sample = false;
  double temperature = 1.0;
  std::size_t top_k = 0;
  std::uint64_t seed = 0;
  std::string stop;
  bool incremental = false;

  GenerationSpec spec() const {
    GenerationSpec g;
    g.max_new_tokens = max_new_tokens;
    g.mode = sample ? DecodeMode::sample : DecodeMode::greedy;
    g.temperature = temperature;
    g.top_k = top_k;
    g.seed = seed;
    if (!stop.empty()) g.stop = stop;
    return g;
  }
};

void add_gen_opts(CLI::App* app, GenOpts& o) {
  app->add_option("--max-new-tokens", o.max_new_tokens, "Generation budget")->capture_default_str();
  app->add_flag("--sample", o.sample, "Sample instead of greedy decoding");
  app->add_option("--temperature", o.temperature, "Sampling temperature")->capture_default_str();
  app->add_option("--top-k", o.top_k, "Sample among the k best tokens, 0 for all")->capture_default_str();
  app->add_option("--gen-seed", o.seed, "Sampling seed")->capture_default_str();
  app->add_option("--stop", o.stop, "Stop once the continuation contains this text");
  app->add_flag("--incremental", o.incremental, "Cache the delta-side encoding between steps");
}

// Drops `key=""` and `key=[]` lines of options that were never given, so a
// replayed config does not pass empty paths to existence checks.
std::string without_unset_empty(const std::string& config, const CLI::App& app) {
  std::istringstream in(config);
  std::string out;
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) {
      const std::string value = line.substr(eq + 1);
      if (value == "\"\"" || value == "[]") {
        const CLI::Option* opt = app.get_option_no_throw("--" + line.substr(0, eq));
        if (opt && opt->count() == 0) continue;
      }
    }
    out += line + '\n';
  }
  return out;
}

// Bookkeeping shared by all subcommands: output directory, metrics log and
// the manifest written at the end.
class Run {
 public:
  Run(std::string command, fs::path out_dir, const CLI::App* app, std::vector<std::string> argv)
      : command_(std::move(command)), out_dir_(std::move(out_dir)), argv_(std::move(argv)) {
    fs::create_directories(out_dir_);
    config_ = without_unset_empty(app->config_to_str(true, false), *app);
  }

  const fs::path& dir() const { return out_dir_; }
  fs::path path(const std::string& name) const { return out_dir_ / name; }
  void seed(const std::string& name, std::uint64_t v) { seeds_[name] = v; }
  void artifact(const fs::path& p) { artifacts_.push_back(p); }
  void artifacts(const std::vector<fs::path>& ps) { artifacts_.insert(artifacts_.end(), ps.begin(), ps.end()); }

  void log(const std::string& line) {
    if (!metrics_.is_open()) {
      metrics_.open(path("metrics.log"));
      artifact(path("metrics.log"));
    }
    metrics_ << line << '\n';
    std::cout << line << '\n';
  }

  void finish() {
    if (metrics_.is_open()) metrics_.close();
    {
      std::ofstream cfg(path("config.toml"));
      cfg << config_;
    }
    nlohmann::json m;
    m["command"] = command_;
    m["argv"] = argv_;
    m["config"] = config_;
    m["config_file"] = "config.toml";
    m["seeds"] = seeds_;
    nlohmann::json arts = nlohmann::json::object();
    for (const auto& a : artifacts_) arts[fs::relative(a, out_dir_).generic_string()] = sha256_file(a);
    m["artifacts"] = arts;
    std::ofstream out(path("manifest.json"));
    out << m.dump(2) << '\n';
  }

 private:
  std::string command_;
  fs::path out_dir_;
  std::vector<std::string> argv_;
  std::string config_;
  std::map<std::string, std::uint64_t> seeds_;
  std::vector<fs::path> artifacts_;
  std::ofstream metrics_;
};

std::string format_epoch(const EpochStats& s, bool unlearn) {
  std::ostringstream os;
  os.precision(8);
  os << "epoch " << s.epoch << " loss " << s.loss;
  if (unlearn) os << " forget " << s.forget_loss << " retain " << s.retain_loss;
  return os.str();
}

bool is_qa_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) fail_data("cannot open " + p.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      return nlohmann::json::parse(line).contains("question");
    } catch (const nlohmann::json::exception& e) {
      fail_data(p.string() + ": " + e.what());
    }
  }
  fail_data(p.string() + ": no records");
}

std::vector<SupervisedPair> read_any_pairs(const fs::path& p) {
  if (!is_qa_file(p)) return read_pairs(p);
  const auto qa = read_forget_retain(p);
  auto pairs = as_pairs(qa.forget);
  const auto r = as_pairs(qa.retain);
  pairs.insert(pairs.end(), r.begin(), r.end());
  return pairs;
}

// Every string field of every record, one per line.
std::string jsonl_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) fail_data("cannot open " + p.string());
  std::string out, line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail_data(p.string() + ": " + e.what());
    }
    for (const auto& [k, v] : j.items()) {
      if (v.is_string()) {
        out += v.get<std::string>() + '\n';
      } else if (v.is_array()) {
        for (const auto& e : v) {
          if (e.is_string()) out += e.get<std::string>() + '\n';
        }
      }
    }
  }
  return out;
}

Vocabulary load_vocab_arg(const std::string& arg, const std::string& strip_prefix) {
  const fs::path p(arg);
  if (fs::is_directory(p)) return Tokenizer::load(p / "model").vocab();
  if (p.extension() == ".vocab") return Vocabulary::load(p);
  return load_token_list(p, strip_prefix);
}

CompositionSpec make_spec(const ComposeOpts& o, const Tokenizer& user, const Tokenizer* delta) {
  CompositionSpec spec;
  spec.mode = parse_compose_mode(o.mode);
  spec.alpha = o.alpha;
  spec.logsoftmax_on_base = !o.raw_base;
  if (spec.mode == ComposeMode::none || !delta) return spec;
  if (!o.map.empty()) {
    auto m = TokenMapping::load(o.map);
    m.attach(user.vocab(), delta->vocab());
    spec.mapping = std::move(m);
  } else if (user.vocab().tag() != delta->vocab().tag()) {
    spec.mapping = build_mapping(user.vocab(), delta->vocab(), parse_strategy(o.strategy));
  }
  return spec;
}

std::vector<std::string> read_prompts(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  if (!in) fail_data("cannot open " + p.string());
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '{') {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        fail_data(p.string() + ": " + e.what());
      }
      if (j.contains("prompt")) {
        out.push_back(j["prompt"].get<std::string>());
      } else if (j.contains("question")) {
        out.push_back(j["question"].get<std::string>());
      } else {
        fail_data(p.string() + ": record without prompt or question");
      }
    } else {
      out.push_back(line);
    }
  }
  return out;
}

struct Steering {
  ModelDir user;
  std::optional<ModelDir> delta;
  std::optional<ModelDir> anti;
  CompositionSpec spec;

  SteeredSession session() const {
    return SteeredSession(user.model, user.tokenizer, spec, delta ? &delta->model : nullptr,
                          delta ? &delta->tokenizer : nullptr, anti ? &anti->model : nullptr);
  }
};

Steering load_steering(const std::string& user, const std::string& delta, const std::string& anti,
                       const ComposeOpts& o) {
  Steering s{load_model_dir(user), std::nullopt, std::nullopt, {}};
  if (!delta.empty()) s.delta = load_model_dir(delta);
  if (!anti.empty()) s.anti = load_model_dir(anti);
  if (o.mode != "none" && !s.delta) fail_config("--delta is required unless --mode none");
  if (s.anti && s.delta && s.anti->tokenizer.vocab().tag() != s.delta->tokenizer.vocab().tag()) {
    fail_config("anti-expert and delta must share a tokenizer");
  }
  s.spec = make_spec(o, s.user.tokenizer, s.delta ? &s.delta->tokenizer : nullptr);
  return s;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail_config("bad value '" + item + "' in --alpha-grid");
    }
  }
  if (out.empty()) fail_config("--alpha-grid is empty");
  return out;
}

std::string alpha_label(double a) {
  std::ostringstream os;
  os << a;
  return os.str();
}

// Reads a flat key = value file as if every key belonged to the subcommand
// being run.
class FlatConfig : public CLI::ConfigTOML {
 public:
  explicit FlatConfig(std::string section) : section_(std::move(section)) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    auto items = CLI::ConfigTOML::from_config(input);
    for (auto& item : items) {
      if (item.name != "++" && item.name != "--") item.parents.insert(item.parents.begin(), section_);
    }
    return items;
  }

 private:
  std::string section_;
};

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Cross-model control: train a small delta model once and steer other models with it"};
  app.require_subcommand(1);
  std::string out_dir = ".";

  app.set_config("--config", "", "Flat TOML file of option values; flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.fallthrough();
  if (args.size() > 1) app.config_formatter(std::make_shared<FlatConfig>(args[1]));
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out-dir", out_dir, "Directory for outputs and the manifest")->capture_default_str();
  };

  // gen-data
  auto* gen_data = app.add_subcommand("gen-data", "Write a synthetic dataset");
  add_common(gen_data);
  std::string kind = "instruction-format";
  SyntheticTaskSpec task;
  gen_data->add_option("--kind", kind, "instruction-format, forget-retain-facts or cross-task-control")
      ->check(CLI::IsMember({"instruction-format", "forget-retain-facts", "cross-task-control"}))
      ->capture_default_str();
  gen_data->add_option("--size", task.size, "Records (entities for the facts task)")->capture_default_str();
  gen_data->add_option("--seed", task.seed, "Generator seed")->capture_default_str();
  gen_data->add_option("--format-marker", task.format_marker, "Response template, {} is the answer")
      ->capture_default_str();
  gen_data->add_flag("--heldout", task.heldout, "Draw prompts from the held-out pool");
  gen_data->add_option("--forget-fraction", task.forget_fraction, "Share of entities to forget")
      ->capture_default_str();
  std::string data_name = "data.jsonl";
  gen_data->add_option("--name", data_name, "Output file name inside --out-dir")->capture_default_str();

  // pretrain / finetune
  auto* pretrain = app.add_subcommand("pretrain", "Train a model from scratch");
  add_common(pretrain);
  std::string corpus;
  std::vector<std::string> vocab_corpus;
  std::string tokenizer_kind = "char";
  std::size_t vocab_size = 256;
  std::string tokenizer_from;
  ModelOpts pre_model;
  TrainOpts pre_train;
  pre_train.loss_mask = "full";
  pretrain->add_option("--corpus", corpus, "Training records (JSONL)")->required()->check(CLI::ExistingFile);
  pretrain->add_option("--vocab-corpus", vocab_corpus, "Files whose text the tokenizer is learned from")
      ->check(CLI::ExistingFile);
  pretrain->add_option("--tokenizer", tokenizer_kind, "char or merge")
      ->check(CLI::IsMember({"char", "merge"}))
      ->capture_default_str();
  pretrain->add_option("--vocab-size", vocab_size, "Tokenizer size limit")->capture_default_str();
  pretrain->add_option("--tokenizer-from", tokenizer_from, "Reuse the tokenizer of this model directory")
      ->check(CLI::ExistingDirectory);
  add_model_opts(pretrain, pre_model);
  add_train_opts(pretrain, pre_train);

  auto* finetune_cmd = app.add_subcommand("finetune", "Continue training a model on supervised pairs");
  add_common(finetune_cmd);
  std::string ft_model, ft_data;
  TrainOpts ft_train;
  finetune_cmd->add_option("--model", ft_model, "Model directory")->required()->check(CLI::ExistingDirectory);
  finetune_cmd->add_option("--data", ft_data, "Pairs or QA records (JSONL)")->required()->check(CLI::ExistingFile);
  add_train_opts(finetune_cmd, ft_train);

  // delta training
  auto* train_delta_cmd = app.add_subcommand("train-delta", "Train a delta model against a frozen template");
  add_common(train_delta_cmd);
  std::string td_template, td_data;
  ModelOpts td_model{128, 64, 2, 2, 256, 0};
  TrainOpts td_train;
  bool td_raw_base = false;
  bool td_random_output = false;
  train_delta_cmd->add_option("--template", td_template, "Template model directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  train_delta_cmd->add_option("--data", td_data, "Pairs (JSONL)")->required()->check(CLI::ExistingFile);
  train_delta_cmd->add_flag("--raw-base", td_raw_base, "Compose with raw template logits");
  train_delta_cmd->add_flag("--random-output", td_random_output, "Do not zero the delta output layer at init");
  add_model_opts(train_delta_cmd, td_model);
  add_train_opts(train_delta_cmd, td_train);

  auto* unlearn_cmd = app.add_subcommand("unlearn-delta", "Train a delta model that makes the template forget");
  add_common(unlearn_cmd);
  std::string ul_template, ul_data;
  ModelOpts ul_model{128, 64, 2, 2, 256, 0};
  TrainOpts ul_train;
  bool ul_random_output = false;
  unlearn_cmd->add_option("--template", ul_template, "Template model directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  unlearn_cmd->add_option("--data", ul_data, "Forget/retain QA records (JSONL)")
      ->required()
      ->check(CLI::ExistingFile);
  unlearn_cmd->add_flag("--random-output", ul_random_output, "Do not zero the delta output layer at init");
  add_model_opts(unlearn_cmd, ul_model);
  add_train_opts(unlearn_cmd, ul_train);

  // map-vocab
  auto* map_cmd = app.add_subcommand("map-vocab", "Map a user vocabulary onto a delta vocabulary");
  add_common(map_cmd);
  std::string map_user, map_delta, map_strategy = "pm-mined", strip_prefix;
  std::size_t report_rows = 20;
  map_cmd->add_option("--user", map_user, "Model directory, .vocab file or token list")
      ->required()
      ->check(CLI::ExistingPath);
  map_cmd->add_option("--delta", map_delta, "Model directory, .vocab file or token list")
      ->required()
      ->check(CLI::ExistingPath);
  map_cmd->add_option("--strategy", map_strategy, "exact, mined or pm-mined")
      ->check(CLI::IsMember({"exact", "mined", "pm-mined"}))
      ->capture_default_str();
  map_cmd->add_option("--strip-prefix", strip_prefix, "Prefix removed from token-list entries");
  map_cmd->add_option("--report-rows", report_rows, "Largest-distance matches listed in the report")
      ->capture_default_str();

  // generate
  auto* gen_cmd = app.add_subcommand("generate", "Decode from a user model steered by a delta model");
  add_common(gen_cmd);
  std::string g_user, g_delta, g_anti, g_prompt, g_prompts;
  ComposeOpts g_compose;
  GenOpts g_gen;
  gen_cmd->add_option("--user", g_user, "User model directory")->required()->check(CLI::ExistingDirectory);
  gen_cmd->add_option("--delta", g_delta, "Delta (expert) model directory")->check(CLI::ExistingDirectory);
  gen_cmd->add_option("--anti-expert", g_anti, "Anti-expert model directory for proxy mode")
      ->check(CLI::ExistingDirectory);
  auto* prompt_opt = gen_cmd->add_option("--prompt", g_prompt, "Single prompt");
  auto* prompts_opt = gen_cmd->add_option("--prompts", g_prompts, "Prompt file (JSONL or plain lines)")
                          ->check(CLI::ExistingFile);
  prompt_opt->excludes(prompts_opt);
  add_compose_opts(gen_cmd, g_compose);
  add_gen_opts(gen_cmd, g_gen);

  // analyze-shift
  auto* shift_cmd = app.add_subcommand("analyze-shift", "Compare the fine-tuning shifts of two model pairs");
  add_common(shift_cmd);
  std::string s_v1, s_t1, s_v2, s_t2, s_data, s_map;
  std::size_t s_count = 50, s_k = 20;
  double s_eps = 0.05;
  shift_cmd->add_option("--vanilla1", s_v1, "First model before fine-tuning")->required()->check(CLI::ExistingDirectory);
  shift_cmd->add_option("--tuned1", s_t1, "First model after fine-tuning")->required()->check(CLI::ExistingDirectory);
  shift_cmd->add_option("--vanilla2", s_v2, "Second model before fine-tuning")->required()->check(CLI::ExistingDirectory);
  shift_cmd->add_option("--tuned2", s_t2, "Second model after fine-tuning")->required()->check(CLI::ExistingDirectory);
  shift_cmd->add_option("--data", s_data, "Evaluation pairs (JSONL)")->required()->check(CLI::ExistingFile);
  shift_cmd->add_option("--map", s_map, "Mapping from the first vocabulary to the second")->check(CLI::ExistingFile);
  shift_cmd->add_option("--count", s_count, "Responses to average over")->capture_default_str();
  shift_cmd->add_option("--epsilon", s_eps, "Entropic regularization")->capture_default_str();
  shift_cmd->add_option("--k", s_k, "Heatmap width")->capture_default_str();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Score a (steered) model on QA records or format compliance");
  add_common(eval_cmd);
  std::string e_user, e_delta, e_anti, e_data, e_grid, e_regex = "^A: .+ END$";
  ComposeOpts e_compose;
  GenOpts e_gen;
  eval_cmd->add_option("--user", e_user, "User model directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--delta", e_delta, "Delta model directory")->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--anti-expert", e_anti, "Anti-expert model directory")->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--data", e_data, "QA records or pairs (JSONL)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--alpha-grid", e_grid, "Comma-separated alphas, e.g. 0.5,0.75,1.0,1.5,2.0");
  eval_cmd->add_option("--format-regex", e_regex, "Compliance pattern for pair data")->capture_default_str();
  add_compose_opts(eval_cmd, e_compose);
  add_gen_opts(eval_cmd, e_gen);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    Run run(sub->get_name(), out_dir, sub, args);

    if (sub == gen_data) {
      task.kind = parse_task_kind(kind);
      run.seed("seed", task.seed);
      const auto out = run.path(data_name);
      if (task.kind == TaskKind::forget_retain_facts) {
        write_forget_retain(out, gen_forget_retain(task));
      } else {
        write_pairs(out, gen_instruction_data(task));
      }
      run.artifact(out);
    } else if (sub == pretrain) {
      const auto pairs = read_pairs(corpus);
      std::optional<Tokenizer> tok;
      if (!tokenizer_from.empty()) {
        tok = Tokenizer::load(fs::path(tokenizer_from) / "model");
      } else {
        std::string text;
        if (vocab_corpus.empty()) vocab_corpus.push_back(corpus);
        for (const auto& f : vocab_corpus) text += jsonl_text(f);
        tok = build_vocab(text, parse_scheme(tokenizer_kind), vocab_size);
      }
      auto model = init_model(pre_model.config(tok->vocab().size()));
      run.seed("model_seed", pre_model.seed);
      run.seed("seed", pre_train.seed);
      finetune(model, *tok, pairs, pre_train.config(),
               [&](const EpochStats& s, const TinyTransformer&) { run.log(format_epoch(s, false)); });
      run.artifacts(save_model_dir(run.dir(), model, *tok));
    } else if (sub == finetune_cmd) {
      auto md = load_model_dir(ft_model);
      run.seed("seed", ft_train.seed);
      finetune(md.model, md.tokenizer, read_any_pairs(ft_data), ft_train.config(),
               [&](const EpochStats& s, const TinyTransformer&) { run.log(format_epoch(s, false)); });
      run.artifacts(save_model_dir(run.dir(), md.model, md.tokenizer));
    } else if (sub == train_delta_cmd || sub == unlearn_cmd) {
      const bool unlearn = sub == unlearn_cmd;
      auto templ = load_model_dir(unlearn ? ul_template : td_template);
      templ.model.set_frozen(true);
      const ModelOpts& mo = unlearn ? ul_model : td_model;
      const TrainOpts& to = unlearn ? ul_train : td_train;
      auto delta = init_model(mo.config(templ.tokenizer.vocab().size()), !(unlearn ? ul_random_output : td_random_output));
      run.seed("model_seed", mo.seed);
      run.seed("seed", to.seed);
      auto cb = [&](const EpochStats& s, const TinyTransformer&) { run.log(format_epoch(s, unlearn)); };
      if (unlearn) {
        train_delta_unlearn(templ.model, delta, templ.tokenizer, read_forget_retain(ul_data), to.config(), cb);
      } else {
        train_delta(templ.model, delta, templ.tokenizer, read_pairs(td_data), to.config(), !td_raw_base, cb);
      }
      run.artifacts(save_model_dir(run.dir(), delta, templ.tokenizer));
    } else if (sub == map_cmd) {
      const auto user = load_vocab_arg(map_user, strip_prefix);
      const auto delta = load_vocab_arg(map_delta, strip_prefix);
      const auto m = build_mapping(user, delta, parse_strategy(map_strategy));
      const auto out = run.path("mapping.map");
      m.save(out);
      run.artifact(out);
      nlohmann::json rep;
      rep["strategy"] = std::string(to_string(m.strategy));
      rep["user_size"] = user.size();
      rep["delta_size"] = delta.size();
      rep["special"] = m.stats.special;
      rep["exact"] = m.stats.exact;
      rep["approximate"] = m.stats.approximate;
      rep["unmapped"] = m.stats.unmapped;
      auto& rows = rep["largest_distance"] = nlohmann::json::array();
      for (const auto& r : largest_distance_matches(m, user, delta, report_rows)) {
        rows.push_back({{"user", user.token(r.user_id)}, {"delta", delta.token(r.delta_id)}, {"distance", r.distance}});
      }
      const auto rp = run.path("mapping_report.json");
      std::ofstream(rp) << rep.dump(2) << '\n';
      run.artifact(rp);
      run.log("unmapped " + std::to_string(m.stats.unmapped) + " exact " + std::to_string(m.stats.exact) +
              " approximate " + std::to_string(m.stats.approximate));
    } else if (sub == gen_cmd) {
      if (g_prompt.empty() && g_prompts.empty()) fail_config("one of --prompt or --prompts is required");
      const auto st = load_steering(g_user, g_delta, g_anti, g_compose);
      auto sess = st.session();
      sess.set_incremental(g_gen.incremental);
      const auto prompts = g_prompts.empty() ? std::vector<std::string>{g_prompt} : read_prompts(g_prompts);
      const auto spec = g_gen.spec();
      run.seed("gen_seed", g_gen.seed);
      const auto out = run.path("generations.jsonl");
      std::ofstream os(out);
      for (const auto& p : prompts) {
        const auto r = generate(sess, p, spec);
        os << nlohmann::json{{"prompt", p},
                             {"continuation", r.continuation},
                             {"agreement", r.agreement()},
                             {"steps", r.steps},
                             {"context_full", r.context_full}}
                  .dump()
           << '\n';
        if (prompts.size() == 1) std::cout << r.continuation << '\n';
      }
      os.close();
      run.artifact(out);
    } else if (sub == shift_cmd) {
      const auto v1 = load_model_dir(s_v1), t1 = load_model_dir(s_t1);
      const auto v2 = load_model_dir(s_v2), t2 = load_model_dir(s_t2);
      std::optional<TokenMapping> mapping;
      const bool same_vocab = v1.tokenizer.vocab().tag() == v2.tokenizer.vocab().tag();
      if (!s_map.empty()) {
        mapping = TokenMapping::load(s_map);
        mapping->attach(v1.tokenizer.vocab(), v2.tokenizer.vocab());
      } else if (!same_vocab) {
        mapping = build_mapping(v1.tokenizer.vocab(), v2.tokenizer.vocab(), MapStrategy::pm_mined);
      }
      auto pairs = read_pairs(s_data);
      if (pairs.size() > s_count) pairs.resize(s_count);
      SinkhornOptions opt;
      opt.epsilon = s_eps;
      nlohmann::json rep;
      auto& per = rep["responses"] = nlohmann::json::array();
      double total = 0.0;
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto offs = common_token_starts(v1.tokenizer, v2.tokenizer, pairs[i].response);
        const auto a = logit_shift_at(v1.model, t1.model, pairs[i], v1.tokenizer, offs);
        const auto b = logit_shift_at(v2.model, t2.model, pairs[i], v2.tokenizer, offs);
        const double d = shift_distance(a, b, mapping ? &*mapping : nullptr, opt);
        total += d;
        per.push_back({{"prompt", pairs[i].prompt}, {"positions", offs.size()}, {"distance", d}});
        if (i == 0) {
          const auto map_for_heat = mapping ? *mapping : TokenMapping::identity(v1.tokenizer.vocab());
          const auto h = heatmap(a, b, map_for_heat, std::min(s_k, a.cols));
          write_heatmap(h, v1.tokenizer.vocab(), run.path("heatmap"));
          run.artifacts({run.path("heatmap.primary.tsv"), run.path("heatmap.secondary.tsv"),
                         run.path("heatmap.header.json")});
        }
      }
      rep["mean_distance"] = pairs.empty() ? 0.0 : total / static_cast<double>(pairs.size());
      rep["epsilon"] = s_eps;
      const auto out = run.path("shift.json");
      std::ofstream(out) << rep.dump(2) << '\n';
      run.artifact(out);
      run.log("mean_distance " + std::to_string(rep["mean_distance"].get<double>()));
    } else if (sub == eval_cmd) {
      auto st = load_steering(e_user, e_delta, e_anti, e_compose);
      const auto alphas = e_grid.empty() ? std::vector<double>{e_compose.alpha} : parse_grid(e_grid);
      const auto spec = e_gen.spec();
      const bool qa = is_qa_file(e_data);
      const auto curve_path = run.path("alpha_curve.tsv");
      std::ofstream curve(curve_path);
      if (qa) {
        const auto data = read_forget_retain(e_data);
        curve << "alpha\tforget_rouge_l\tforget_probability\tforget_truth_ratio\tretain_rouge_l\tretain_probability\t"
                 "retain_truth_ratio\n";
        for (double a : alphas) {
          st.spec.alpha = a;
          auto sess = st.session();
          const auto f = evaluate_qa(sess, data.forget, spec);
          const auto r = evaluate_qa(sess, data.retain, spec);
          write_report(f, run.path("forget_alpha" + alpha_label(a) + ".jsonl"));
          write_report(r, run.path("retain_alpha" + alpha_label(a) + ".jsonl"));
          run.artifacts({run.path("forget_alpha" + alpha_label(a) + ".jsonl"),
                         run.path("retain_alpha" + alpha_label(a) + ".jsonl")});
          curve << a << '\t' << f.rouge_l << '\t' << f.probability << '\t' << f.truth_ratio << '\t' << r.rouge_l
                << '\t' << r.probability << '\t' << r.truth_ratio << '\n';
        }
      } else {
        const auto pairs = read_pairs(e_data);
        std::regex re;
        try {
          re = std::regex(e_regex);
        } catch (const std::regex_error& e) {
          fail_config("bad --format-regex: " + std::string(e.what()));
        }
        curve << "alpha\tcompliance\trouge_l\n";
        for (double a : alphas) {
          st.spec.alpha = a;
          auto sess = st.session();
          std::size_t ok = 0;
          double rl = 0.0;
          const auto gp = run.path("generations_alpha" + alpha_label(a) + ".jsonl");
          std::ofstream os(gp);
          for (const auto& p : pairs) {
            const auto g = generate(sess, p.prompt, spec);
            const bool hit = std::regex_match(g.continuation, re);
            ok += hit;
            const double r = rouge_l(g.continuation, p.response);
            rl += r;
            os << nlohmann::json{{"prompt", p.prompt}, {"continuation", g.continuation}, {"compliant", hit},
                                 {"rouge_l", r}}
                      .dump()
               << '\n';
          }
          os.close();
          run.artifact(gp);
          const double n = static_cast<double>(pairs.size());
          curve << a << '\t' << 100.0 * static_cast<double>(ok) / n << '\t' << rl / n << '\n';
        }
      }
      curve.close();
      run.artifact(curve_path);
    }
    run.finish();
  } catch (const Error& e) {
    std::cerr << (e.kind() == ErrorKind::config ? "config error: "
                  : e.kind() == ErrorKind::data ? "data error: "
                                                 : "error: ")
              << e.what() << '\n';
    switch (e.kind()) {
      case ErrorKind::config: return kConfigError;
      case ErrorKind::data: return kDataError;
      case ErrorKind::runtime: return kRuntimeError;
    }
  } catch (const CLI::Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args);
}

}  // namespace cmc::cli
