// Command-line front end: generate synthetic corpora, train, expand seed
// queries, evaluate rankings, run modality ablations, re-rank image
// candidates. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mese/corpus.hpp"
#include "mese/dataset_tools.hpp"
#include "mese/encoder.hpp"
#include "mese/evaluation.hpp"
#include "mese/expansion.hpp"
#include "mese/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace mese;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json synthetic_to_json(const SyntheticSpec& s) {
  json j;
  j["n_classes"] = s.n_classes;
  j["sibling_pairs"] = s.sibling_pairs;
  j["token_overlap"] = s.token_overlap;
  j["entities_per_class"] = s.entities_per_class;
  j["zipf_exponent"] = s.zipf_exponent;
  j["n_polysemes"] = s.n_polysemes;
  j["n_synonym_pairs"] = s.n_synonym_pairs;
  j["n_random_negatives"] = s.n_random_negatives;
  j["image_feature_dim"] = s.image_feature_dim;
  j["class_image_separation"] = s.class_image_separation;
  j["base_contexts"] = s.base_contexts;
  j["sentence_len_min"] = s.sentence_len_min;
  j["sentence_len_max"] = s.sentence_len_max;
  j["patches_per_context"] = s.patches_per_context;
  j["tokens_per_class_pool"] = s.tokens_per_class_pool;
  j["function_words"] = s.function_words;
  j["queries_per_class_per_size"] = s.queries_per_class_per_size;
  return j;
}

SyntheticSpec synthetic_from_json(const json& j) {
  SyntheticSpec s;
  s.n_classes = j.value("n_classes", s.n_classes);
  s.sibling_pairs = j.value("sibling_pairs", s.sibling_pairs);
  s.token_overlap = j.value("token_overlap", s.token_overlap);
  s.entities_per_class = j.value("entities_per_class", s.entities_per_class);
  s.zipf_exponent = j.value("zipf_exponent", s.zipf_exponent);
  s.n_polysemes = j.value("n_polysemes", s.n_polysemes);
  s.n_synonym_pairs = j.value("n_synonym_pairs", s.n_synonym_pairs);
  s.n_random_negatives = j.value("n_random_negatives", s.n_random_negatives);
  s.image_feature_dim = j.value("image_feature_dim", s.image_feature_dim);
  s.class_image_separation = j.value("class_image_separation", s.class_image_separation);
  s.rng_seed = j.value("rng_seed", s.rng_seed);
  s.base_contexts = j.value("base_contexts", s.base_contexts);
  s.sentence_len_min = j.value("sentence_len_min", s.sentence_len_min);
  s.sentence_len_max = j.value("sentence_len_max", s.sentence_len_max);
  s.patches_per_context = j.value("patches_per_context", s.patches_per_context);
  s.tokens_per_class_pool = j.value("tokens_per_class_pool", s.tokens_per_class_pool);
  s.function_words = j.value("function_words", s.function_words);
  s.queries_per_class_per_size = j.value("queries_per_class_per_size", s.queries_per_class_per_size);
  return s;
}

json encoder_to_json(const EncoderConfig& c) {
  json j;
  j["hidden_dim"] = c.hidden_dim;
  j["n_heads"] = c.n_heads;
  j["ffn_dim"] = c.ffn_dim;
  j["text_layers"] = c.text_layers;
  j["image_layers"] = c.image_layers;
  j["fusion_layers"] = c.fusion_layers;
  j["max_text_len"] = c.max_text_len;
  j["patch_count"] = c.patch_count;
  j["image_feature_dim"] = c.image_feature_dim;
  j["contrastive_dim"] = c.contrastive_dim;
  j["cluster_count"] = c.cluster_count;
  return j;
}

EncoderConfig encoder_from_json(const json& j) {
  EncoderConfig c;
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.text_layers = j.value("text_layers", c.text_layers);
  c.image_layers = j.value("image_layers", c.image_layers);
  c.fusion_layers = j.value("fusion_layers", c.fusion_layers);
  c.max_text_len = j.value("max_text_len", c.max_text_len);
  c.patch_count = j.value("patch_count", c.patch_count);
  c.image_feature_dim = j.value("image_feature_dim", c.image_feature_dim);
  c.contrastive_dim = j.value("contrastive_dim", c.contrastive_dim);
  c.cluster_count = j.value("cluster_count", c.cluster_count);
  return c;
}

json train_to_json(const TrainConfig& t) {
  json j;
  j["learning_rate"] = t.learning_rate;
  j["weight_decay"] = t.weight_decay;
  j["batch_size"] = t.batch_size;
  j["pretrain_epochs"] = t.pretrain_epochs;
  j["refine_epochs"] = t.refine_epochs;
  j["rounds"] = t.rounds;
  j["momentum"] = t.momentum;
  json loss;
  loss["eta"] = t.loss.eta;
  loss["tau"] = t.loss.tau;
  loss["beta"] = t.loss.beta;
  loss["temperature"] = t.loss.temperature;
  loss["pair_count"] = t.loss.pair_count;
  j["loss"] = loss;
  json mining;
  mining["k_pos"] = t.mining.k_pos;
  mining["l_neg"] = t.mining.l_neg;
  mining["u_neg"] = t.mining.u_neg;
  mining["rho_pos"] = t.mining.rho_pos;
  j["mining"] = mining;
  return j;
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.pretrain_epochs = j.value("pretrain_epochs", t.pretrain_epochs);
  t.refine_epochs = j.value("refine_epochs", t.refine_epochs);
  t.rounds = j.value("rounds", t.rounds);
  t.momentum = j.value("momentum", t.momentum);
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    t.loss.eta = l.value("eta", t.loss.eta);
    t.loss.tau = l.value("tau", t.loss.tau);
    t.loss.beta = l.value("beta", t.loss.beta);
    t.loss.temperature = l.value("temperature", t.loss.temperature);
    t.loss.pair_count = l.value("pair_count", t.loss.pair_count);
  }
  if (j.contains("mining")) {
    const auto& m = j.at("mining");
    t.mining.k_pos = m.value("k_pos", t.mining.k_pos);
    t.mining.l_neg = m.value("l_neg", t.mining.l_neg);
    t.mining.u_neg = m.value("u_neg", t.mining.u_neg);
    t.mining.rho_pos = m.value("rho_pos", t.mining.rho_pos);
  }
  return t;
}

json expansion_to_json(const ExpansionConfig& e) {
  json j;
  j["target"] = e.target;
  j["window"] = e.window;
  j["gamma"] = e.gamma;
  j["ensemble"] = e.ensemble;
  j["epsilon"] = e.epsilon;
  return j;
}

ExpansionConfig expansion_from_json(const json& j) {
  ExpansionConfig e;
  e.target = j.value("target", e.target);
  e.window = j.value("window", e.window);
  e.gamma = j.value("gamma", e.gamma);
  e.ensemble = j.value("ensemble", e.ensemble);
  e.epsilon = j.value("epsilon", e.epsilon);
  return e;
}

json default_config() {
  json j;
  j["seed"] = 1;
  j["encoder"] = encoder_to_json(EncoderConfig{});
  j["train"] = train_to_json(TrainConfig{});
  j["expansion"] = expansion_to_json(ExpansionConfig{});
  j["synthetic"] = synthetic_to_json(SyntheticSpec{});
  return j;
}

json load_json_file(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("file not found: " + path);
  std::ifstream in(path);
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw UsageError(path + ": " + e.what());
  }
}

void require_exists(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw UsageError(std::string(what) + " not found: " + path);
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const json& config,
                           const json* fallback_section = nullptr,
                           const char* fallback_key = nullptr) {
  if (flag) return *flag;
  if (config.contains("seed")) return config.at("seed").get<std::uint64_t>();
  if (fallback_section && fallback_key && fallback_section->contains(fallback_key))
    return fallback_section->at(fallback_key).get<std::uint64_t>();
  throw UsageError("a seed is required: pass --seed or put \"seed\" in the config");
}

std::vector<int> parse_query_filter(const std::string& filter, std::size_t n_queries) {
  std::vector<int> out;
  if (filter.empty()) {
    for (std::size_t i = 0; i < n_queries; ++i) out.push_back(static_cast<int>(i));
    return out;
  }
  std::istringstream ss(filter);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int qi = 0;
    try {
      qi = std::stoi(item);
    } catch (const std::exception&) {
      throw UsageError("bad query index '" + item + "'");
    }
    if (qi < 0 || qi >= static_cast<int>(n_queries))
      throw UsageError("query index " + item + " out of range (corpus has " +
                       std::to_string(n_queries) + " queries)");
    out.push_back(qi);
  }
  return out;
}

int cmd_generate(const std::string& spec_path, const std::string& out_dir,
                 const std::optional<std::uint64_t>& seed_flag) {
  const json config = load_json_file(spec_path);
  const json spec_json = config.contains("synthetic") ? config.at("synthetic") : config;
  SyntheticSpec spec = synthetic_from_json(spec_json);
  spec.rng_seed = resolve_seed(seed_flag, config, &spec_json, "rng_seed");
  const auto corpus = generate_synthetic(spec);
  save_corpus(corpus, out_dir);
  std::cout << "generated corpus: " << corpus.entity_count() << " entities, "
            << corpus.contexts.size() << " contexts, " << corpus.queries.size() << " queries -> "
            << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& corpus_dir, const std::string& config_path,
              const std::string& out_dir, const std::optional<std::uint64_t>& seed_flag) {
  require_exists(corpus_dir, "corpus directory");
  const json config = config_path.empty() ? default_config() : load_json_file(config_path);
  const std::uint64_t seed = resolve_seed(seed_flag, config);

  const auto corpus = load_corpus(corpus_dir);
  EncoderConfig ecfg = encoder_from_json(config.value("encoder", json::object()));
  ecfg.rng_seed = seed;
  ecfg = EncoderConfig::for_corpus(corpus, ecfg);

  TrainConfig tcfg = train_from_json(config.value("train", json::object()));
  tcfg.expansion = expansion_from_json(config.value("expansion", json::object()));
  tcfg.rng_seed = seed;

  fs::create_directories(out_dir);
  Model model(ecfg);
  const auto result = train_full(
      model, corpus, tcfg, [&](int round, const Model& m, const std::vector<RankedExpansion>&) {
        save_checkpoint(m, (fs::path(out_dir) / ("checkpoint_round_" + std::to_string(round) +
                                                 ".ckpt")).string());
      });
  save_train_log(result.log, (fs::path(out_dir) / "train_log.jsonl").string());
  std::cout << "trained " << result.log.size() << " steps over " << tcfg.rounds + 1
            << " round(s); checkpoints in " << out_dir << "\n";
  return 0;
}

int cmd_expand(const std::string& ckpt_path, const std::string& corpus_dir,
               const std::string& out_file, const std::string& query_filter, bool ensemble,
               const std::string& config_path) {
  require_exists(ckpt_path, "checkpoint");
  require_exists(corpus_dir, "corpus directory");
  const json config = config_path.empty() ? default_config() : load_json_file(config_path);

  const auto corpus = load_corpus(corpus_dir);
  const auto queries = parse_query_filter(query_filter, corpus.queries.size());

  ExpansionConfig ecfg = expansion_from_json(config.value("expansion", json::object()));
  if (ensemble) ecfg.ensemble = true;
  if (ecfg.target + 5 > corpus.entity_count()) ecfg.target = corpus.entity_count() - 5;

  const Model model = load_checkpoint(ckpt_path);
  const auto reps = all_representations(model, corpus);
  std::vector<RankedExpansion> expansions;
  for (int qi : queries) {
    const Query& q = corpus.queries[static_cast<std::size_t>(qi)];
    expansions.push_back(ecfg.ensemble ? rerank(q, qi, reps, reps, ecfg)
                                       : window_search(q, qi, reps, reps, ecfg));
  }
  save_expansions(expansions, out_file);
  std::cout << "expanded " << expansions.size() << " queries -> " << out_file << "\n";
  return 0;
}

int cmd_evaluate(const std::string& expansions_path, const std::string& corpus_dir,
                 const std::string& out_dir) {
  require_exists(expansions_path, "expansions file");
  require_exists(corpus_dir, "corpus directory");
  const auto corpus = load_corpus(corpus_dir);
  const auto expansions = load_expansions(expansions_path);
  const auto report = evaluate(expansions, corpus.queries);
  fs::create_directories(out_dir);
  write_report_csv(report, (fs::path(out_dir) / "per_query.csv").string());
  write_report_json(report, (fs::path(out_dir) / "summary.json").string());
  std::cout << "Avg over {MAP,P}@{10,20,50,100}: " << report.avg << " -> " << out_dir << "\n";
  return 0;
}

int cmd_ablate(const std::string& ckpt_path, const std::string& corpus_dir,
               const std::string& modes_csv, const std::string& out_dir,
               const std::string& config_path) {
  require_exists(ckpt_path, "checkpoint");
  require_exists(corpus_dir, "corpus directory");
  const json config = config_path.empty() ? default_config() : load_json_file(config_path);

  // Parse every mode up front; an unknown mode is a usage error. The
  // baseline always runs first.
  std::vector<AblationMode> modes = {AblationMode::kBaseline};
  std::istringstream ss(modes_csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    AblationMode mode;
    try {
      mode = parse_ablation_mode(item);
    } catch (const ValidationError& e) {
      throw UsageError(e.what());
    }
    if (mode != AblationMode::kBaseline) modes.push_back(mode);
  }

  const auto corpus = load_corpus(corpus_dir);
  ExpansionConfig ecfg = expansion_from_json(config.value("expansion", json::object()));
  if (ecfg.target + 5 > corpus.entity_count()) ecfg.target = corpus.entity_count() - 5;
  const Model model = load_checkpoint(ckpt_path);

  fs::create_directories(out_dir);
  for (AblationMode mode : modes) {
    const auto report = ablate_modality(model, corpus, mode, ecfg);
    const std::string name = ablation_mode_name(mode);
    write_report_csv(report, (fs::path(out_dir) / ("ablation_" + name + ".csv")).string());
    write_report_json(report, (fs::path(out_dir) / ("ablation_" + name + ".json")).string());
    std::cout << "mode " << name << ": Avg = " << report.avg << "\n";
  }
  return 0;
}

int cmd_rerank_images(const std::string& features_path, double alpha,
                      const std::string& out_file) {
  require_exists(features_path, "feature file");
  if (alpha < 0.0 || alpha > 1.0) throw UsageError("--alpha must lie in [0,1]");
  const auto groups = load_rerank_file(features_path);
  std::ofstream out(out_file, std::ios::binary);
  if (!out) throw UsageError("cannot open " + out_file + " for writing");
  for (const auto& g : groups) {
    RerankQuery query = g.query;
    query.alpha = alpha;
    const int best = select_best(g.candidates, query);
    double best_score = 0.0;
    for (const auto& c : g.candidates)
      if (c.id == best) best_score = score_image(c, query);
    json j;
    j["group"] = g.id;
    j["selected"] = best;
    j["score"] = best_score;
    out << j.dump() << '\n';
  }
  std::cout << "selected images for " << groups.size() << " groups -> " << out_file << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-modal entity set expansion toolkit"};
  app.require_subcommand(0, 1);

  bool print_config = false;
  app.add_flag("--print-config", print_config, "print the full default config as JSON and exit");

  std::optional<std::uint64_t> seed_flag;
  std::string config_path, corpus_dir, out_path, spec_path, ckpt_path, expansions_path,
      features_path, query_filter, modes_csv;
  bool ensemble = false;
  double alpha = 0.5;

  auto* generate = app.add_subcommand("generate", "generate a synthetic corpus");
  generate->add_option("--spec", spec_path, "synthetic spec or full config (JSON)")->required();
  generate->add_option("--out", out_path, "output corpus directory")->required();
  generate->add_option("--seed", seed_flag, "rng seed (overrides the config)");

  auto* train = app.add_subcommand("train", "train a model on a corpus");
  train->add_option("--corpus", corpus_dir, "corpus directory")->required();
  train->add_option("--config", config_path, "config JSON (defaults when omitted)");
  train->add_option("--out", out_path, "output directory")->required();
  train->add_option("--seed", seed_flag, "rng seed (overrides the config)");

  auto* expand = app.add_subcommand("expand", "rank candidates for seed queries");
  expand->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  expand->add_option("--corpus", corpus_dir, "corpus directory")->required();
  expand->add_option("--out", out_path, "output JSONL file")->required();
  expand->add_option("--queries", query_filter, "comma-separated query indices (default: all)");
  expand->add_flag("--ensemble", ensemble, "leave-one-out seed re-ranking");
  expand->add_option("--config", config_path, "config JSON for expansion parameters");

  auto* evaluate_cmd = app.add_subcommand("evaluate", "score expansions against ground truth");
  evaluate_cmd->add_option("--expansions", expansions_path, "expansions JSONL")->required();
  evaluate_cmd->add_option("--corpus", corpus_dir, "corpus directory")->required();
  evaluate_cmd->add_option("--out", out_path, "report output directory")->required();

  auto* ablate = app.add_subcommand("ablate", "modality-absence ablations");
  ablate->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
  ablate->add_option("--corpus", corpus_dir, "corpus directory")->required();
  ablate->add_option("--modes", modes_csv, "comma-separated modes from T_s,T_c,V_s,V_c,T,V");
  ablate->add_option("--out", out_path, "report output directory")->required();
  ablate->add_option("--config", config_path, "config JSON for expansion parameters");

  auto* rerank_cmd = app.add_subcommand("rerank-images", "pick the best image per group");
  rerank_cmd->add_option("--features", features_path, "rerank feature file")->required();
  rerank_cmd->add_option("--alpha", alpha, "text-relevance weight in [0,1]");
  rerank_cmd->add_option("--out", out_path, "selections JSONL")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (print_config) {
    std::cout << default_config().dump(2) << "\n";
    return 0;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return 2;
  }

  try {
    if (generate->parsed()) return cmd_generate(spec_path, out_path, seed_flag);
    if (train->parsed()) return cmd_train(corpus_dir, config_path, out_path, seed_flag);
    if (expand->parsed())
      return cmd_expand(ckpt_path, corpus_dir, out_path, query_filter, ensemble, config_path);
    if (evaluate_cmd->parsed()) return cmd_evaluate(expansions_path, corpus_dir, out_path);
    if (ablate->parsed()) return cmd_ablate(ckpt_path, corpus_dir, modes_csv, out_path, config_path);
    if (rerank_cmd->parsed()) return cmd_rerank_images(features_path, alpha, out_path);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
