// nprompt: prompt optimization service and tooling.
//
//   nprompt optimize "a boy on a horse" --seed 3
//   nprompt evaluate --mode stub --n 200 --conditions all
//   nprompt train --preset desk --out runs/desk
//   nprompt serve --config service.json
//   nprompt prepare --in prompts.txt --out prepared.tsv
//   nprompt keywords

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "nprompt/config.hpp"
#include "nprompt/engine.hpp"
#include "nprompt/evaluation.hpp"
#include "nprompt/http_service.hpp"
#include "nprompt/trainer.hpp"
#include "nprompt/workflow.hpp"

namespace fs = std::filesystem;
using namespace nprompt;

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> beam;
  std::optional<double> lambda;
  std::optional<std::string> mode;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "JSON config file");
  cmd->add_option("--seed", o.seed, "Seed for keyword sampling and images");
  cmd->add_option("--beam", o.beam, "Beam size");
  cmd->add_option("--lambda", o.lambda, "Weight of satisfied-clause fraction in beam scores");
  cmd->add_option("--mode", o.mode, "Backends: stub or live")->check(CLI::IsMember({"stub", "live"}));
}

ServiceConfig resolve_config(const CommonOptions& o) {
  ServiceConfig c = load_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (o.beam) c.decode.beam_size = *o.beam;
  if (o.lambda) c.decode.satisfaction_weight = *o.lambda;
  if (o.mode) c.mode = parse_mode(*o.mode);
  c.check();
  return c;
}

// --select style=oil painting;watercolor  --select artist=
ClauseSelection parse_selects(const std::vector<std::string>& selects, const std::vector<std::string>& custom,
                              const std::vector<std::string>& negative) {
  ClauseSelection s;
  auto apply = [&](const std::string& spec, bool is_custom) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ValidationError("expected CATEGORY=kw1;kw2, got '" + spec + "'");
    auto cat = parse_category(trim(spec.substr(0, eq)));
    if (!cat) throw ValidationError("unknown category in '" + spec + "'");
    std::vector<std::string> kws;
    std::stringstream in(spec.substr(eq + 1));
    std::string kw;
    while (std::getline(in, kw, ';'))
      if (!trim(kw).empty()) kws.push_back(trim(kw));
    s[*cat] = CategorySelection::of(std::move(kws), is_custom);
  };
  for (const auto& x : selects) apply(x, false);
  for (const auto& x : custom) apply(x, true);
  s.negative_phrases = negative;
  return s;
}

void write_json_line(std::ostream& out, const json& j) { out << j.dump() << '\n' << std::flush; }

struct TrainOptions {
  std::string preset = "desk";
  std::string out_dir;
  bool skip_ppo = false;
  std::optional<int> sft_steps;
  std::optional<int> episodes;
};

struct EvalModelPaths {
  std::string sft;
  std::string ppo;
};

std::pair<SFTConfig, PPOConfig> presets(const std::string& name, std::uint64_t seed) {
  auto sft = name == "paper" ? SFTConfig::paper() : SFTConfig::desk();
  auto ppo = name == "paper" ? PPOConfig::paper() : PPOConfig::desk();
  ppo.seed = seed;
  return {sft, ppo};
}

int run_optimize(const CommonOptions& common, const std::string& prompt, const std::string& model_path,
                 const std::vector<std::string>& selects, const std::vector<std::string>& custom,
                 const std::vector<std::string>& negative, bool as_json) {
  auto config = resolve_config(common);
  if (!model_path.empty()) config.model_path = model_path;
  auto engine = Engine::from_config(config);
  OptimizeRequest req;
  req.prompt = prompt;
  req.selection = parse_selects(selects, custom, negative);
  auto rec = engine->optimize(req);
  if (as_json) {
    std::cout << engine->optimize_json(rec).dump(2) << '\n';
    return 0;
  }
  std::cout << rec.optimized_prompt << '\n';
  for (const auto& c : rec.clause_status) std::cout << "  " << c.label << ": " << to_string(c.state) << '\n';
  for (const auto& h : rec.highlights)
    std::cout << "  [" << h.char_begin << "," << h.char_end << ") " << h.label << ": " << h.phrase << '\n';
  return 0;
}

int run_evaluate(const CommonOptions& common, std::size_t n, const std::string& conditions,
                 const EvalModelPaths& paths, const std::string& json_out, const std::string& prompts_out) {
  auto config = resolve_config(common);
  const auto taxonomy = load_taxonomy(config.taxonomy_file());
  const auto prompts = evaluation_prompts(read_corpus_file(config.eval_corpus_file()), n);
  if (!prompts_out.empty()) {
    std::ofstream out(prompts_out);
    if (!out) throw ConfigError("cannot write " + prompts_out);
    for (const auto& p : prompts) out << p << '\n';
  }
  const auto backends = make_backends(config, taxonomy);

  EvalModels models;
  if (!paths.sft.empty()) {
    models.sft = load_model_file(paths.sft);
    models.ppo = paths.ppo.empty() ? models.sft : std::shared_ptr<const LanguageModel>(load_model_file(paths.ppo));
  } else {
    std::cerr << "training desk-scale SFT and PPO models...\n";
    const auto corpus = read_corpus_file(config.train_corpus_file());
    auto [sft_cfg, ppo_cfg] = presets("desk", config.seed);
    auto trained = train_models(corpus, taxonomy, sft_cfg, ppo_cfg, backends);
    models.sft = trained.sft;
    models.ppo = trained.ppo;
  }

  EvalOptions opts;
  opts.n = n;
  opts.conditions = parse_conditions(conditions);
  opts.seed = config.seed;
  opts.decode = config.decode;
  opts.mode = std::string(to_string(config.mode));
  const auto report = evaluate(prompts, models, taxonomy, backends, opts);
  std::cout << format_report(report);
  if (!json_out.empty()) {
    std::ofstream out(json_out);
    if (!out) throw ConfigError("cannot write " + json_out);
    out << to_json(report).dump(2) << '\n';
  }
  return 0;
}

int run_train(const CommonOptions& common, const TrainOptions& t) {
  auto config = resolve_config(common);
  if (t.out_dir.empty()) throw ConfigError("--out is required");
  fs::create_directories(t.out_dir);
  auto [sft_cfg, ppo_cfg] = presets(t.preset, config.seed);
  if (t.sft_steps) sft_cfg.steps = *t.sft_steps;
  if (t.episodes) ppo_cfg.episodes = *t.episodes;

  const auto taxonomy = load_taxonomy(config.taxonomy_file());
  const auto corpus = read_corpus_file(config.train_corpus_file());
  const auto heldout = read_corpus_file(config.eval_corpus_file());
  const auto backends = make_backends(config, taxonomy);

  {
    json snap = to_json(config);
    snap["preset"] = t.preset;
    snap["sft"] = {{"steps", sft_cfg.steps},
                   {"learning_rate", sft_cfg.learning_rate},
                   {"batch_size", sft_cfg.batch_size},
                   {"smoothing", sft_cfg.smoothing}};
    snap["ppo"] = t.skip_ppo ? json(nullptr)
                             : json{{"episodes", ppo_cfg.episodes},
                                    {"batch_size", ppo_cfg.batch_size},
                                    {"minibatch_size", ppo_cfg.minibatch_size},
                                    {"ppo_epochs", ppo_cfg.ppo_epochs},
                                    {"learning_rate", ppo_cfg.learning_rate},
                                    {"value_loss_coef", ppo_cfg.value_loss_coef},
                                    {"kl_coef", ppo_cfg.kl_coef},
                                    {"clip_ratio", ppo_cfg.clip_ratio},
                                    {"max_new_tokens", ppo_cfg.max_new_tokens},
                                    {"seed", ppo_cfg.seed}};
    std::ofstream(t.out_dir + "/config.json") << snap.dump(2) << '\n';
  }

  std::ofstream stats(t.out_dir + "/stats.jsonl");
  TrainingCallbacks cb;
  cb.on_sft = [&](const SFTLogEntry& e) {
    json j = {{"phase", "sft"}, {"step", e.step}, {"train_perplexity", e.train_perplexity}};
    if (e.heldout_perplexity) j["heldout_perplexity"] = *e.heldout_perplexity;
    write_json_line(stats, j);
    std::cerr << "sft step " << e.step << " ppl " << e.train_perplexity << '\n';
  };
  cb.on_ppo = [&](const PPOStats& s) {
    write_json_line(stats, {{"phase", "ppo"},
                            {"update", s.update},
                            {"mean_reward", s.mean_reward},
                            {"kl", s.kl},
                            {"clip_fraction", s.clip_fraction},
                            {"policy_loss", s.policy_loss},
                            {"value_loss", s.value_loss}});
    std::cerr << "ppo update " << s.update << " reward " << s.mean_reward << " kl " << s.kl << '\n';
  };
  std::optional<PPOConfig> ppo;
  if (!t.skip_ppo) ppo = ppo_cfg;
  auto trained = train_models(corpus, taxonomy, sft_cfg, ppo, backends, cb, heldout);
  save_model_file(t.out_dir + "/sft.lm", *trained.sft);
  if (trained.ppo) save_model_file(t.out_dir + "/ppo.lm", *trained.ppo);
  std::cout << "wrote " << t.out_dir << '\n';
  return 0;
}

HttpService* g_service = nullptr;

int run_serve(const CommonOptions& common, std::optional<std::string> host, std::optional<int> port,
              const std::string& model_path) {
  auto config = resolve_config(common);
  if (host) config.host = *host;
  if (port) config.port = *port;
  if (!model_path.empty()) config.model_path = model_path;
  auto engine = Engine::from_config(config);
  HttpService service(*engine);
  g_service = &service;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->stop();
  });
  std::cerr << "listening on " << config.host << ":" << config.port << " (" << to_string(config.mode) << ")\n";
  if (!service.listen(config.host, config.port)) throw ConfigError("cannot listen on port " + std::to_string(config.port));
  return 0;
}

int run_prepare(const std::string& in_path, const std::string& out_path, double threshold) {
  const auto corpus = read_corpus_file(in_path);
  std::vector<CorpusRecord> records;
  std::size_t kept = 0;
  for (const auto& p : corpus) {
    records.push_back(prepare_record(p, threshold));
    kept += records.back().kept;
  }
  std::ofstream out(out_path);
  if (!out) throw ConfigError("cannot write " + out_path);
  write_corpus_records(out, records);
  std::cout << kept << "/" << records.size() << " prompts kept\n";
  return 0;
}

int run_keywords(const CommonOptions& common) {
  const auto config = resolve_config(common);
  const auto taxonomy = load_taxonomy(config.taxonomy_file());
  for (Category c : kCategories) {
    std::cout << category_column(c) << " (" << taxonomy.keywords(c).size() << ")\n";
    for (const auto& k : taxonomy.keywords(c)) std::cout << "  " << k << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt optimization with constrained decoding"};
  app.require_subcommand(1);

  CommonOptions common;

  auto* opt = app.add_subcommand("optimize", "Optimize one prompt");
  add_common(opt, common);
  std::string prompt, model_path;
  std::vector<std::string> selects, custom, negative;
  bool as_json = false;
  opt->add_option("prompt", prompt, "Prompt text")->required();
  opt->add_option("--model", model_path, "lmcore-v1 checkpoint");
  opt->add_option("--select", selects, "CATEGORY=kw1;kw2 (empty list drops the category)");
  opt->add_option("--custom", custom, "CATEGORY=kw1;kw2 allowing keywords outside the catalog");
  opt->add_option("--negative", negative, "Phrase that must not appear");
  opt->add_flag("--json", as_json, "Print the API response");

  auto* ev = app.add_subcommand("evaluate", "Score ablation conditions on the evaluation prompts");
  add_common(ev, common);
  std::size_t n = 200;
  std::string conditions = "all", json_out, prompts_out;
  EvalModelPaths paths;
  ev->add_option("--n", n, "Number of prompts");
  ev->add_option("--conditions", conditions, "all or comma list of prefix,human,sft_only,no_ppo,no_neurologic,full");
  ev->add_option("--sft", paths.sft, "SFT checkpoint (trained on the fly when absent)");
  ev->add_option("--ppo", paths.ppo, "PPO checkpoint");
  ev->add_option("--json-out", json_out, "Write the report as JSON");
  ev->add_option("--prompts-out", prompts_out, "Write the evaluated prompt list");

  auto* tr = app.add_subcommand("train", "Run SFT then PPO and write a run directory");
  add_common(tr, common);
  TrainOptions topts;
  tr->add_option("--preset", topts.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  tr->add_option("--out", topts.out_dir, "Run directory")->required();
  tr->add_flag("--skip-ppo", topts.skip_ppo, "Stop after SFT");
  tr->add_option("--sft-steps", topts.sft_steps, "Override SFT steps");
  tr->add_option("--episodes", topts.episodes, "Override PPO episodes");

  auto* sv = app.add_subcommand("serve", "Run the HTTP API");
  add_common(sv, common);
  std::optional<std::string> host;
  std::optional<int> port;
  std::string serve_model;
  sv->add_option("--host", host, "Bind address");
  sv->add_option("--port", port, "Port");
  sv->add_option("--model", serve_model, "lmcore-v1 checkpoint");

  auto* pr = app.add_subcommand("prepare", "Extract prefixes and apply the overlap filter");
  std::string in_path, out_path;
  double threshold = kDefaultOverlapThreshold;
  pr->add_option("--in", in_path, "Prompt corpus, one per line")->required();
  pr->add_option("--out", out_path, "TSV output")->required();
  pr->add_option("--threshold", threshold, "Overlap threshold");

  auto* kw = app.add_subcommand("keywords", "List the keyword catalog");
  add_common(kw, common);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*opt) return run_optimize(common, prompt, model_path, selects, custom, negative, as_json);
    if (*ev) return run_evaluate(common, n, conditions, paths, json_out, prompts_out);
    if (*tr) return run_train(common, topts);
    if (*sv) return run_serve(common, host, port, serve_model);
    if (*pr) return run_prepare(in_path, out_path, threshold);
    if (*kw) return run_keywords(common);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
