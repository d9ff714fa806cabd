#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "unembed/errors.hpp"
#include "unembed/harness.hpp"
#include "unembed/linalg.hpp"
#include "unembed/matio.hpp"
#include "unembed/rng.hpp"
#include "unembed/wire.hpp"

namespace {

using namespace unembed;

TokenSeq parse_tokens(const std::string& csv) {
  TokenSeq out;
  size_t at = 0;
  while (at < csv.size()) {
    size_t comma = csv.find(',', at);
    if (comma == std::string::npos) comma = csv.size();
    out.push_back(static_cast<int32_t>(std::stol(csv.substr(at, comma - at))));
    at = comma + 1;
  }
  return out;
}

std::vector<uint64_t> parse_seeds(const std::string& csv) {
  std::vector<uint64_t> out;
  for (int32_t t : parse_tokens(csv)) out.push_back(static_cast<uint64_t>(t));
  return out;
}

std::vector<double> parse_reals(const std::string& csv) {
  std::vector<double> out;
  size_t at = 0;
  while (at < csv.size()) {
    size_t comma = csv.find(',', at);
    if (comma == std::string::npos) comma = csv.size();
    out.push_back(std::stod(csv.substr(at, comma - at)));
    at = comma + 1;
  }
  return out;
}

WireServer* g_server = nullptr;

void handle_signal(int) {
  if (g_server) g_server->stop();
}

struct CommonOpts {
  std::string victim_config;
  std::string endpoint;
  std::string out_dir = "out";
  std::string mode = "topk";
  int k = 5;
  double bias_bound = 100.0;
  int bias_max_entries = 300;
  std::string emission = "fp64";
  int overhead = 0;
  std::string seeds = "1";
  std::string prompt = "2,3,5,7";
};

ExperimentConfig build_config(const CommonOpts& c) {
  ExperimentConfig cfg;
  if (!c.victim_config.empty()) cfg.victim = VictimSpec::from_config_file(c.victim_config);
  cfg.mode = api_mode_from_string(c.mode, c.k);
  cfg.policy.limits.bias_bound = c.bias_bound;
  cfg.policy.limits.bias_max_entries = c.bias_max_entries;
  cfg.policy.emission = emit_precision_from_string(c.emission);
  cfg.policy.overhead_tokens = c.overhead;
  cfg.seeds = parse_seeds(c.seeds);
  cfg.prompt = parse_tokens(c.prompt);
  cfg.out_dir = c.out_dir;
  if (!c.endpoint.empty()) {
    cfg.over_wire = true;
    cfg.endpoint = c.endpoint;
  }
  return cfg;
}

int cmd_victim_build(const std::string& config_path, const std::string& spectrum_csv) {
  const VictimSpec spec = VictimSpec::from_config_file(config_path);
  const Victim victim = Victim::build(spec);
  const VectorXd s = singular_values(MatrixXd(victim.projection()));
  int rank = 0;
  while (rank < s.size() && s[rank] > s[0] * 1e-10) ++rank;
  std::cout << "victim: l=" << spec.vocab_size << " h=" << spec.hidden_dim
            << " serving_dim=" << victim.serving_dim() << " norm=" << to_string(spec.norm_kind)
            << " precision=" << to_string(spec.precision) << "\n"
            << "projection rank (1e-10 cutoff): " << rank << "\n"
            << "sigma_1=" << s[0] << " sigma_min=" << s[s.size() - 1] << "\n";
  if (victim.is_spoofed())
    std::cout << "spoof argmax agreement: " << victim.spoof_argmax_agreement() << "\n";
  if (!spectrum_csv.empty()) {
    SpectrumReport rep;
    rep.values = s;
    rep.log_gaps = VectorXd::Zero(std::max<Eigen::Index>(0, s.size() - 1));
    for (Eigen::Index i = 0; i + 1 < s.size(); ++i)
      rep.log_gaps[i] = std::log(std::max(s[i], 1e-300)) - std::log(std::max(s[i + 1], 1e-300));
    write_spectrum_csv(spectrum_csv, rep);
    std::cout << "wrote " << spectrum_csv << "\n";
  }
  return 0;
}

int cmd_export_truth(const std::string& config_path, const std::string& out_dir, int n_prompts,
                     uint64_t prompt_seed, int prompt_len) {
  const VictimSpec spec = VictimSpec::from_config_file(config_path);
  const Victim victim = Victim::build(spec);
  std::filesystem::create_directories(out_dir);

  write_matrix(out_dir + "/projection.mat", MatrixXd(victim.projection()));
  write_matrix(out_dir + "/projection_effective.mat", victim.effective_projection());

  Rng rng(hash_mix(prompt_seed, 0x747275746873ull));
  MatrixXd hidden(n_prompts, victim.serving_dim());
  MatrixXd logits(n_prompts, spec.vocab_size);
  std::ofstream prompts(out_dir + "/prompts.txt");
  for (int i = 0; i < n_prompts; ++i) {
    TokenSeq p(prompt_len);
    for (auto& t : p) t = static_cast<int32_t>(rng.below(static_cast<uint32_t>(spec.vocab_size)));
    hidden.row(i) = victim.hidden(p).transpose();
    logits.row(i) = victim.logits(p).transpose();
    for (size_t j = 0; j < p.size(); ++j) prompts << p[j] << (j + 1 < p.size() ? ',' : '\n');
  }
  write_matrix(out_dir + "/hidden.mat", hidden);
  write_matrix(out_dir + "/logits.mat", logits);
  {
    std::ofstream cfg(out_dir + "/victim.cfg");
    cfg << spec.to_config().to_text();
  }
  std::cout << "wrote projection.mat projection_effective.mat hidden.mat logits.mat prompts.txt "
               "victim.cfg to "
            << out_dir << "\n";
  return 0;
}

int cmd_serve(const CommonOpts& c, const std::string& bind, bool xor_flag, bool blocklist) {
  const VictimSpec spec = VictimSpec::from_config_file(c.victim_config);
  const Victim victim = Victim::build(spec);
  ApiPolicy policy;
  policy.limits.bias_bound = c.bias_bound;
  policy.limits.bias_max_entries = c.bias_max_entries;
  policy.emission = emit_precision_from_string(c.emission);
  policy.overhead_tokens = c.overhead;
  policy.bias_xor_logprobs = xor_flag;
  policy.blocklist_mode = blocklist;
  auto server = serve(victim, api_mode_from_string(c.mode, c.k), policy, bind);
  g_server = server.get();
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  std::cout << "serving " << to_string(api_mode_from_string(c.mode, c.k)) << " on "
            << server->endpoint() << " (ctrl-c to stop)\n";
  // WireServer::stop() joins the worker; block by re-joining through stop on signal
  server->stop();
  return 0;
}

int cmd_attack(const CommonOpts& c, const std::string& name, double b, double epsilon, int rounds,
               int batch, double stop_width, bool transcript) {
  ExperimentConfig cfg = build_config(c);
  cfg.attack = name;
  cfg.params.b = b;
  cfg.params.epsilon = epsilon;
  cfg.params.rounds = rounds;
  cfg.params.batch = batch;
  cfg.params.stop_width = stop_width;
  cfg.write_transcript = transcript;
  const Report rep = run_attack_suite(cfg);
  std::cout << rep.csv();
  if (!cfg.out_dir.empty()) std::cout << "wrote report.json report.csv to " << cfg.out_dir << "\n";
  return 0;
}

int cmd_extract(const CommonOpts& c, const std::string& what, int n, int expected,
                int subset_size, const std::string& spectrum_csv) {
  ExperimentConfig cfg = build_config(c);
  VictimSpec vs = cfg.victim;
  vs.seed = cfg.seeds.front();
  const Victim victim = Victim::build(vs);

  std::unique_ptr<WireServer> server;
  std::unique_ptr<QuerySession> session;
  const ApiMode mode{ApiModeKind::AllLogits, 1};
  if (cfg.over_wire && !cfg.endpoint.empty()) {
    session = std::make_unique<RemoteSession>(cfg.endpoint);
  } else {
    session = std::make_unique<ApiSession>(victim, mode, cfg.policy);
  }

  std::filesystem::create_directories(cfg.out_dir);
  if (what == "dim") {
    AutoDimOptions opts;
    if (subset_size > 0) {
      opts.token_subset.resize(subset_size);
      for (int i = 0; i < subset_size; ++i) opts.token_subset[i] = i;
    }
    const AutoDimResult r = extract_hidden_dim_auto(*session, expected, opts);
    std::cout << "extracted dim: " << r.dim << " (n = " << r.n_used << ")\n";
    if (!spectrum_csv.empty()) write_spectrum_csv(spectrum_csv, r.spectrum);
  } else if (what == "layer") {
    const int nn = n > 0 ? n : 2 * victim.vocab_size();
    const QueryMatrix q = collect_query_matrix(*session, nn, cfg.seeds.front() + 17);
    const int dim = expected > 0 ? expected : extract_hidden_dim(q).dim;
    const StolenLayer layer = extract_layer(q, dim);
    write_matrix(cfg.out_dir + "/stolen_layer.mat", layer.w);
    const auto align = align_affine(layer.w, MatrixXd(victim.projection()));
    std::cout << "extracted layer " << layer.w.rows() << "x" << layer.w.cols()
              << ", affine-aligned rms vs truth: " << align.rms << "\n"
              << "wrote " << cfg.out_dir << "/stolen_layer.mat\n";
  } else if (what == "layer-orthogonal") {
    const int h = expected > 0 ? expected : victim.hidden_dim();
    const int nn = n > 0 ? n : h * (h + 1) / 2 + h + 1 + 32;
    const QueryMatrix q = collect_query_matrix(*session, nn, cfg.seeds.front() + 17);
    const StolenLayer layer = extract_layer_orthogonal(q, h);
    write_matrix(cfg.out_dir + "/stolen_layer_orthogonal.mat", layer.w);
    const MatrixXd residual =
        layer.w.completeOrthogonalDecomposition().pseudoInverse() * victim.effective_projection();
    const double orth =
        (residual.transpose() * residual - MatrixXd::Identity(h, h)).norm();
    std::cout << "extracted layer (orthogonal symmetry), ||O^T O - I||_F vs truth: " << orth
              << "\nwrote " << cfg.out_dir << "/stolen_layer_orthogonal.mat\n";
  } else if (what == "norm") {
    const int nn = n > 0 ? n : 2 * victim.hidden_dim() + 64;
    const QueryMatrix q = collect_query_matrix(*session, nn, cfg.seeds.front() + 17, {}, 8,
                                               cfg.policy.emission);
    const NormDetectResult r = detect_norm_layer(q);
    const char* label = r.kind == NormDetect::LayerNorm    ? "layernorm"
                        : r.kind == NormDetect::RMSNorm    ? "rmsnorm"
                                                           : "inconclusive";
    std::cout << "norm fingerprint: " << label << " (dim " << r.dim_raw << " -> "
              << r.dim_centered << " after query-mean subtraction)\n";
  } else {
    throw ConfigError("extract expects dim|layer|layer-orthogonal|norm");
  }
  return 0;
}

int cmd_sweep(const CommonOpts& c, const std::string& name, int rounds, int batch) {
  ExperimentConfig cfg = build_config(c);
  cfg.params.rounds = rounds;
  cfg.params.batch = batch;
  const Report rep = defense_sweep(cfg, defense_from_string(name));
  std::cout << rep.csv();
  for (const auto& [k, v] : rep.notes) std::cout << "# " << k << " = " << v << "\n";
  if (!cfg.out_dir.empty()) std::cout << "wrote report.json report.csv to " << cfg.out_dir << "\n";
  return 0;
}

int cmd_lower_bound(const CommonOpts& c, double b, int n_tokens, const std::string& bits,
                    bool measure) {
  ExperimentConfig cfg = build_config(c);
  const auto rows = lower_bound_report(b, n_tokens, parse_reals(bits), cfg, measure);
  std::cout << "bits,epsilon,bound_per_logit,one_of_n_measured,binary_search_measured,violated\n";
  for (const auto& r : rows)
    std::cout << r.bits << "," << r.epsilon << "," << r.bound_per_logit << ","
              << r.one_of_n_measured << "," << r.binary_search_measured << ","
              << (r.violated ? "true" : "false") << "\n";
  const Report rep = lower_bound_report_as_report(rows, cfg);
  if (!cfg.out_dir.empty()) rep.write(cfg.out_dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unembed: steal the final projection layer of a synthetic LLM through "
               "progressively constrained completion APIs"};
  app.require_subcommand(1);

  CommonOpts c;

  // victim build / export-truth
  auto* victim = app.add_subcommand("victim", "build or export a victim");
  victim->require_subcommand(1);
  std::string spectrum_csv;
  auto* vbuild = victim->add_subcommand("build", "construct a victim and print a summary");
  vbuild->add_option("--config", c.victim_config, "victim config file")->required();
  vbuild->add_option("--spectrum", spectrum_csv, "write the projection spectrum as CSV");
  int n_prompts = 64, prompt_len = 8;
  uint64_t prompt_seed = 7;
  auto* vexport = victim->add_subcommand(
      "export-truth", "dump W and per-prompt hidden states/logits for test oracles");
  vexport->add_option("--config", c.victim_config)->required();
  vexport->add_option("--out-dir", c.out_dir);
  vexport->add_option("--prompts", n_prompts);
  vexport->add_option("--prompt-seed", prompt_seed);
  vexport->add_option("--prompt-len", prompt_len);

  // serve
  std::string bind = "127.0.0.1:8080";
  bool xor_flag = false, blocklist = false;
  auto* srv = app.add_subcommand("serve", "expose a victim over HTTP");
  srv->add_option("--victim-config", c.victim_config)->required();
  srv->add_option("--bind", bind, "host:port");
  srv->add_option("--mode", c.mode, "all-logits|topk|top1-binary|argmax|generation");
  srv->add_option("--k", c.k);
  srv->add_option("--bias-bound", c.bias_bound);
  srv->add_option("--bias-max-entries", c.bias_max_entries);
  srv->add_option("--emission", c.emission, "fp64|fp32|fp16");
  srv->add_option("--overhead", c.overhead);
  srv->add_flag("--bias-xor-logprobs", xor_flag);
  srv->add_flag("--blocklist", blocklist);

  // attack
  std::string attack_name;
  double b = 100.0, epsilon = 0.09765625, stop_width = 0.0;
  int rounds = 1500, batch = 300;
  bool transcript = false;
  auto* atk = app.add_subcommand("attack", "run a logit-recovery attack");
  atk->add_option("name", attack_name,
                  "logprob-4|logprob-k|single-logprob|binarized|binary-search|hyperrectangle|"
                  "one-of-n|lstsq|table4|table3")
      ->required();
  atk->add_option("--victim-config", c.victim_config)->required();
  atk->add_option("--endpoint", c.endpoint, "attack a remote server instead of in-process");
  atk->add_option("--mode", c.mode);
  atk->add_option("--k", c.k);
  atk->add_option("--emission", c.emission);
  atk->add_option("--B", b);
  atk->add_option("--epsilon", epsilon);
  atk->add_option("--rounds", rounds);
  atk->add_option("--batch", batch);
  atk->add_option("--stop-width", stop_width);
  atk->add_option("--seeds", c.seeds);
  atk->add_option("--prompt", c.prompt);
  atk->add_option("--out-dir", c.out_dir);
  atk->add_option("--overhead", c.overhead);
  atk->add_flag("--transcript", transcript);

  // extract
  std::string what;
  int n = 0, expected = 0, subset_size = 0;
  auto* ext = app.add_subcommand("extract", "dimension/layer/norm extraction");
  ext->add_option("what", what, "dim|layer|layer-orthogonal|norm")->required();
  ext->add_option("--victim-config", c.victim_config)->required();
  ext->add_option("--endpoint", c.endpoint);
  ext->add_option("--n", n);
  ext->add_option("--expected", expected);
  ext->add_option("--subset-size", subset_size);
  ext->add_option("--seeds", c.seeds);
  ext->add_option("--out-dir", c.out_dir);
  ext->add_option("--emission", c.emission);
  ext->add_option("--spectrum", spectrum_csv);

  // sweep
  std::string defense;
  auto* swp = app.add_subcommand("sweep", "defense sweeps");
  swp->add_option("name", defense, "noise|quantization|spoofing|bias-xor-logprobs|blocklist")
      ->required();
  swp->add_option("--victim-config", c.victim_config)->required();
  swp->add_option("--seeds", c.seeds);
  swp->add_option("--prompt", c.prompt);
  swp->add_option("--out-dir", c.out_dir);
  swp->add_option("--rounds", rounds);
  swp->add_option("--batch", batch);

  // report lower-bound
  std::string bits = "6,18,23";
  bool measure = false;
  auto* rpt = app.add_subcommand("report", "derived reports");
  rpt->require_subcommand(1);
  auto* lb = rpt->add_subcommand("lower-bound", "query lower bound vs measured logprob-free cost");
  lb->add_option("--B", b);
  lb->add_option("--N", batch);
  lb->add_option("--bits", bits, "comma-separated bit targets");
  lb->add_flag("--measure", measure, "run the attacks to measure actual cost");
  lb->add_option("--victim-config", c.victim_config);
  lb->add_option("--seeds", c.seeds);
  lb->add_option("--prompt", c.prompt);
  lb->add_option("--out-dir", c.out_dir);

  CLI11_PARSE(app, argc, argv);

  try {
    if (vbuild->parsed()) return cmd_victim_build(c.victim_config, spectrum_csv);
    if (vexport->parsed())
      return cmd_export_truth(c.victim_config, c.out_dir, n_prompts, prompt_seed, prompt_len);
    if (srv->parsed()) return cmd_serve(c, bind, xor_flag, blocklist);
    if (atk->parsed())
      return cmd_attack(c, attack_name, b, epsilon, rounds, batch, stop_width, transcript);
    if (ext->parsed()) return cmd_extract(c, what, n, expected, subset_size, spectrum_csv);
    if (swp->parsed()) return cmd_sweep(c, defense, rounds, batch);
    if (lb->parsed()) return cmd_lower_bound(c, b, batch, bits, measure);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
