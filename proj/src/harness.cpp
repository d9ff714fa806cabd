#include "unembed/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>
#include <unordered_set>

#include <json.hpp>

#include "unembed/errors.hpp"
#include "unembed/rng.hpp"
#include "unembed/transcript.hpp"
#include "unembed/wire.hpp"

#ifndef UNEMBED_REVISION
#define UNEMBED_REVISION "unversioned"
#endif

namespace unembed {

using json = nlohmann::json;

namespace {

uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  return median_inplace(v);
}

std::string join_tokens(const TokenSeq& p) {
  std::string s;
  for (size_t i = 0; i < p.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(p[i]);
  }
  return s;
}

}  // namespace

double bits_of_precision(const VectorXd& true_logits, const RecoveredLogits& recovered) {
  if (true_logits.size() != recovered.values.size())
    throw InputError("bits_of_precision: length mismatch");
  std::vector<double> diffs;
  diffs.reserve(static_cast<size_t>(true_logits.size()));
  for (Eigen::Index i = 0; i < true_logits.size(); ++i)
    if (recovered.status[static_cast<size_t>(i)] != EntryStatus::Missing)
      diffs.push_back(recovered.values[i] - true_logits[i]);
  if (diffs.empty()) throw NumericalError("bits_of_precision: every entry is missing");
  std::vector<double> tmp = diffs;
  const double shift = median_inplace(tmp);
  double mean_abs = 0.0;
  for (double d : diffs) mean_abs += std::abs(d - shift);
  mean_abs /= static_cast<double>(diffs.size());
  if (mean_abs < 0x1.0p-52) return 52.0;
  return -std::log2(mean_abs);
}

void ExperimentConfig::validate() const {
  victim.validate();
  auto need = [&](bool ok, const std::string& why) {
    if (!ok) throw ConfigError("attack " + attack + " is incompatible with the api mode: " + why);
  };
  if (attack == "logprob-4") {
    need(mode.kind == ApiModeKind::TopKLogprobsWithBias && mode.k >= 2,
         "needs top-K logprobs with K >= 2");
  } else if (attack == "logprob-k") {
    need(mode.kind == ApiModeKind::TopKLogprobsWithBias, "needs top-K logprobs with bias");
  } else if (attack == "single-logprob") {
    need(mode.kind == ApiModeKind::TopKLogprobsWithBias && mode.k == 1, "needs K = 1 logprobs");
  } else if (attack == "binarized") {
    need(mode.kind == ApiModeKind::Top1BinaryBias, "needs the top-1 binary-bias mode");
  } else if (attack == "binary-search" || attack == "hyperrectangle" || attack == "one-of-n") {
    need(mode.kind == ApiModeKind::ArgmaxOnlyWithBias ||
             mode.kind == ApiModeKind::TopKLogprobsWithBias,
         "needs argmax sampling with bias");
  } else if (attack == "lstsq") {
    need(mode.kind == ApiModeKind::TopKLogprobsWithBias, "needs top-K logprobs with bias");
  } else if (attack == "table4" || attack == "table3") {
    // composite suites pick their own modes
  } else {
    throw ConfigError("unknown attack: " + attack);
  }
  if (seeds.empty()) throw ConfigError("at least one seed required");
}

std::string ExperimentConfig::canonical_text() const {
  KvConfig cfg = victim.to_config();
  cfg.set("attack", attack);
  cfg.set("mode", to_string(mode));
  cfg.set_int("k", mode.k);
  cfg.set("emission", to_string(policy.emission));
  cfg.set_real("bias_bound", policy.limits.bias_bound);
  cfg.set_int("bias_max_entries", policy.limits.bias_max_entries);
  cfg.set_bool("bias_xor_logprobs", policy.bias_xor_logprobs);
  cfg.set_bool("blocklist_mode", policy.blocklist_mode);
  cfg.set_int("overhead", policy.overhead_tokens);
  cfg.set_real("attack_b", params.b);
  cfg.set_real("attack_epsilon", params.epsilon);
  cfg.set_int("attack_rounds", params.rounds);
  cfg.set_int("attack_batch", params.batch);
  cfg.set_real("attack_stop_width", params.stop_width);
  cfg.set("prompt", join_tokens(prompt));
  std::string seeds_s;
  for (uint64_t s : seeds) seeds_s += std::to_string(s) + ",";
  cfg.set("seeds", seeds_s);
  cfg.set_bool("over_wire", over_wire);
  return cfg.to_text();
}

void parallel_over_seeds(const std::vector<uint64_t>& seeds, int workers,
                         const std::function<void(size_t, uint64_t)>& fn) {
  if (workers <= 0) workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  workers = std::min<int>(workers, static_cast<int>(seeds.size()));
  if (workers <= 1) {
    for (size_t i = 0; i < seeds.size(); ++i) fn(i, seeds[i]);
    return;
  }
  std::atomic<size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const size_t i = next.fetch_add(1);
        if (i >= seeds.size()) return;
        try {
          fn(i, seeds[i]);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

namespace {

struct SessionBundle {
  std::unique_ptr<Victim> victim;
  std::unique_ptr<WireServer> server;
  std::unique_ptr<QuerySession> base;
  std::unique_ptr<TranscriptingSession> transcript;

  QuerySession& session() { return transcript ? *transcript : *base; }
};

SessionBundle make_session(const ExperimentConfig& cfg, uint64_t seed, const ApiMode& mode,
                           const ApiPolicy& policy, const std::string& transcript_path) {
  SessionBundle b;
  VictimSpec vs = cfg.victim;
  vs.seed = seed;
  b.victim = std::make_unique<Victim>(Victim::build(vs));
  if (cfg.over_wire) {
    std::string endpoint = cfg.endpoint;
    if (endpoint.empty()) {
      b.server = std::make_unique<WireServer>(*b.victim, mode, policy);
      endpoint = b.server->endpoint();
    }
    b.base = std::make_unique<RemoteSession>(endpoint, "seed-" + std::to_string(seed));
  } else {
    b.base = std::make_unique<ApiSession>(*b.victim, mode, policy);
  }
  if (!transcript_path.empty())
    b.transcript = std::make_unique<TranscriptingSession>(*b.base, transcript_path);
  return b;
}

RecoveredLogits run_attack_once(const std::string& name, QuerySession& s,
                                const TokenSeq& prompt, const AttackParams& p) {
  if (name == "logprob-4") return recover_reference_token(s, prompt, p.b);
  if (name == "logprob-k") return recover_k_logprob(s, prompt, p.b);
  if (name == "single-logprob") return recover_single_logprob(s, prompt, p.b);
  if (name == "binarized") return recover_binarized(s, prompt);
  if (name == "binary-search")
    return recover_binary_search(s, prompt, p.epsilon, p.b).to_logits(s.vocab_size());
  if (name == "hyperrectangle" || name == "one-of-n") {
    HyperrectangleOptions o;
    o.rounds = p.rounds;
    o.batch_size = p.batch;
    o.bias_bound = p.b;
    o.stop_max_width = p.stop_width;
    o.tokens = p.token_subset;
    o.centering = name == "one-of-n" ? Centering::OneOfN : Centering::Midpoint;
    return recover_hyperrectangle(s, prompt, o).to_logits(s.vocab_size());
  }
  if (name == "lstsq") {
    std::vector<LogprobObservation> obs;
    const int32_t l = s.vocab_size();
    for (int32_t t = 1; t < l; ++t) {
      LogitBias bias;
      bias.set(t, p.b);
      const TopKResponse r = s.topk(prompt, bias);
      for (const auto& it : r.items) obs.push_back({bias, it.token, it.logprob});
    }
    return recover_least_squares(obs, l);
  }
  throw ConfigError("unknown attack: " + name);
}

AttackRow score_recovery(const std::string& name, uint64_t seed, const VectorXd& truth,
                         const RecoveredLogits& rec, const LedgerSnapshot& before,
                         const LedgerSnapshot& after, double wall_ms) {
  AttackRow row;
  row.attack = name;
  row.seed = seed;
  row.queries = after.queries - before.queries;
  row.tokens_total = after.total_tokens() - before.total_tokens();
  row.informative = rec.informative_count();
  row.bits = bits_of_precision(truth, rec);
  if (row.informative > 0) {
    row.queries_per_logit = static_cast<double>(row.queries) / row.informative;
    row.tokens_per_logit = static_cast<double>(row.tokens_total) / row.informative;
  }
  // worst-case error after the same optimal shift the bits metric uses
  std::vector<double> diffs;
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    const auto st = rec.status[static_cast<size_t>(i)];
    if (st == EntryStatus::Missing) {
      ++row.missing;
      continue;
    }
    diffs.push_back(rec.values[i] - truth[i]);
  }
  std::vector<double> tmp = diffs;
  const double shift = median_inplace(tmp);
  for (double d : diffs) row.max_abs_err = std::max(row.max_abs_err, std::abs(d - shift));
  for (uint8_t f : rec.low_confidence) row.low_confidence += f;
  row.wall_ms = wall_ms;
  return row;
}

AttackRow run_seeded_attack(const ExperimentConfig& cfg, const std::string& name, uint64_t seed,
                            const ApiMode& mode, const ApiPolicy& policy,
                            const AttackParams& params) {
  std::string transcript_path;
  if (cfg.write_transcript && !cfg.out_dir.empty())
    transcript_path = cfg.out_dir + "/transcript-" + name + "-" + std::to_string(seed) + ".jsonl";
  SessionBundle b = make_session(cfg, seed, mode, policy, transcript_path);
  QuerySession& s = b.session();
  const VectorXd truth = b.victim->true_logits(cfg.prompt);
  const LedgerSnapshot before = s.ledger();
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const RecoveredLogits rec = run_attack_once(name, s, cfg.prompt, params);
    const double wall =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return score_recovery(name, seed, truth, rec, before, s.ledger(), wall);
  } catch (const ApiError& e) {
    AttackRow row;
    row.attack = name;
    row.seed = seed;
    row.status = "rejected:" + e.code();
    const LedgerSnapshot after = s.ledger();
    row.queries = after.queries - before.queries;
    row.tokens_total = after.total_tokens() - before.total_tokens();
    return row;
  }
}

void aggregate_by_attack(Report& rep) {
  std::map<std::string, std::vector<double>> bits, qpl;
  for (const auto& r : rep.rows) {
    if (r.status != "ok") continue;
    bits[r.attack].push_back(r.bits);
    qpl[r.attack].push_back(r.queries_per_logit);
  }
  for (auto& [k, v] : bits) rep.aggregates[k + ".bits_median"] = median_of(v);
  for (auto& [k, v] : qpl) rep.aggregates[k + ".queries_per_logit_median"] = median_of(v);
}

Report make_report(const ExperimentConfig& cfg, std::string kind) {
  Report rep;
  rep.kind = std::move(kind);
  rep.config_hash = fnv1a64(cfg.canonical_text());
  rep.revision = UNEMBED_REVISION;
  return rep;
}

Report run_table4(const ExperimentConfig& cfg) {
  struct RowSpec {
    const char* name;
    ApiMode mode;
    EmitPrecision emission;
    AttackParams params;
  };
  // The logprob rows run against an fp16-emitting API (quantized logprob
  // channel); logprob-k keeps a moderate bias so the shared-normalizer
  // cancellation stays within the conditioning guard.
  AttackParams p4 = cfg.params;
  p4.b = 100.0;
  AttackParams pk = cfg.params;
  pk.b = 10.0;
  AttackParams pb = cfg.params;
  AttackParams pbs = cfg.params;
  pbs.b = 100.0;
  pbs.epsilon = 100.0 / 1024.0;  // 10 queries per token
  AttackParams ph = cfg.params;
  ph.b = 100.0;
  const std::vector<RowSpec> specs = {
      {"logprob-4", {ApiModeKind::TopKLogprobsWithBias, 5}, EmitPrecision::Fp16, p4},
      {"logprob-k", {ApiModeKind::TopKLogprobsWithBias, 5}, EmitPrecision::Fp16, pk},
      {"binarized", {ApiModeKind::Top1BinaryBias, 1}, EmitPrecision::Fp16, pb},
      {"binary-search", {ApiModeKind::ArgmaxOnlyWithBias, 1}, EmitPrecision::Fp64, pbs},
      {"hyperrectangle", {ApiModeKind::ArgmaxOnlyWithBias, 1}, EmitPrecision::Fp64, ph},
      {"one-of-n", {ApiModeKind::ArgmaxOnlyWithBias, 1}, EmitPrecision::Fp64, ph},
  };

  Report rep = make_report(cfg, "table4");
  std::vector<AttackRow> rows(specs.size() * cfg.seeds.size());
  parallel_over_seeds(cfg.seeds, cfg.workers, [&](size_t si, uint64_t seed) {
    for (size_t a = 0; a < specs.size(); ++a) {
      const auto& spec = specs[a];
      ApiPolicy policy = cfg.policy;
      policy.emission = spec.emission;
      rows[si * specs.size() + a] =
          run_seeded_attack(cfg, spec.name, seed, spec.mode, policy, spec.params);
    }
  });
  rep.rows = std::move(rows);
  aggregate_by_attack(rep);
  return rep;
}

Report run_table3(const ExperimentConfig& cfg) {
  struct SpecRow {
    const char* label;
    int32_t l, h, deficit;
    Precision prec;
  };
  const std::vector<SpecRow> victims = {
      {"h8-fp64", 400, 8, 0, Precision::Fp64},
      {"h16-fp64", 1000, 16, 0, Precision::Fp64},
      {"h64-fp64", 1000, 64, 0, Precision::Fp64},
      {"h64-fp16", 256, 64, 0, Precision::Fp16Emulated},
      {"h256-fp64", 1024, 256, 0, Precision::Fp64},
      {"h64-deficit7", 1000, 64, 7, Precision::Fp64},
  };

  Report rep = make_report(cfg, "table3");
  const uint64_t seed = cfg.seeds.front();
  for (const auto& vr : victims) {
    VictimSpec vs;
    vs.vocab_size = vr.l;
    vs.hidden_dim = vr.h;
    vs.seed = seed;
    vs.precision = vr.prec;
    vs.planted_rank_deficit = vr.deficit;
    const Victim victim = Victim::build(vs);
    ApiSession session(victim, {ApiModeKind::AllLogits, 1});

    AttackRow row;
    row.attack = vr.label;
    row.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    const AutoDimResult dim = extract_hidden_dim_auto(session, vr.h);
    row.extracted_dim = dim.dim;
    const int n = 2 * vr.l;
    const QueryMatrix q = collect_query_matrix(session, n, seed + 17);
    const StolenLayer layer = extract_layer(q, dim.dim);
    row.rms = align_affine(layer.w, MatrixXd(victim.projection())).rms;
    const LedgerSnapshot led = session.ledger();
    row.queries = led.queries;
    row.tokens_total = led.total_tokens();
    row.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace

Report run_attack_suite(const ExperimentConfig& config) {
  config.validate();
  Report rep;
  if (config.attack == "table4") {
    rep = run_table4(config);
  } else if (config.attack == "table3") {
    rep = run_table3(config);
  } else {
    rep = make_report(config, "attack");
    std::vector<AttackRow> rows(config.seeds.size());
    parallel_over_seeds(config.seeds, config.workers, [&](size_t si, uint64_t seed) {
      rows[si] = run_seeded_attack(config, config.attack, seed, config.mode, config.policy,
                                   config.params);
    });
    rep.rows = std::move(rows);
    aggregate_by_attack(rep);
  }
  if (!config.out_dir.empty()) rep.write(config.out_dir);
  return rep;
}

Defense defense_from_string(const std::string& name) {
  if (name == "noise") return Defense::Noise;
  if (name == "quantization") return Defense::Quantization;
  if (name == "spoofing") return Defense::Spoofing;
  if (name == "bias-xor-logprobs") return Defense::BiasXorLogprobs;
  if (name == "blocklist") return Defense::BlockList;
  throw ConfigError("unknown defense: " + name);
}

std::string to_string(Defense d) {
  switch (d) {
    case Defense::Noise: return "noise";
    case Defense::Quantization: return "quantization";
    case Defense::Spoofing: return "spoofing";
    case Defense::BiasXorLogprobs: return "bias-xor-logprobs";
    case Defense::BlockList: return "blocklist";
  }
  return "?";
}

namespace {

// Layer-extraction RMS under a given noise level, median across seeds.
double noise_rms_once(const ExperimentConfig& cfg, uint64_t seed, double sigma) {
  VictimSpec vs = cfg.victim;
  vs.seed = seed;
  vs.logit_noise_sigma = sigma;
  const Victim victim = Victim::build(vs);
  ApiSession session(victim, {ApiModeKind::AllLogits, 1});
  const int n = 2 * vs.vocab_size;
  const QueryMatrix q = collect_query_matrix(session, n, seed + 29);
  const StolenLayer layer = extract_layer(q, vs.hidden_dim);
  return align_affine(layer.w, MatrixXd(victim.projection())).rms;
}

Report sweep_noise(const ExperimentConfig& cfg) {
  Report rep = make_report(cfg, "sweep-noise");
  const std::vector<double> sigmas{0.0, 1e-4, 1e-3, 1e-2, 1e-1};
  std::vector<double> medians;
  for (double sigma : sigmas) {
    std::vector<double> rms_by_seed(cfg.seeds.size());
    parallel_over_seeds(cfg.seeds, cfg.workers, [&](size_t si, uint64_t seed) {
      rms_by_seed[si] = noise_rms_once(cfg, seed, sigma);
    });
    for (size_t si = 0; si < cfg.seeds.size(); ++si) {
      AttackRow row;
      row.attack = "extract-layer@sigma=" + std::to_string(sigma);
      row.seed = cfg.seeds[si];
      row.rms = rms_by_seed[si];
      rep.rows.push_back(row);
    }
    medians.push_back(median_of(rms_by_seed));
    rep.aggregates["rms_median@sigma=" + std::to_string(sigma)] = medians.back();
  }
  bool monotone = true;
  for (size_t i = 1; i < medians.size(); ++i)
    if (medians[i] < medians[i - 1]) monotone = false;
  rep.notes["rms_monotone_in_sigma"] = monotone ? "true" : "false";
  return rep;
}

Report sweep_quantization(const ExperimentConfig& cfg) {
  Report rep = make_report(cfg, "sweep-quantization");
  const std::vector<int> bit_levels{0, 8, 4};
  bool unchanged = true;
  for (int bits : bit_levels) {
    for (uint64_t seed : cfg.seeds) {
      VictimSpec vs = cfg.victim;
      vs.seed = seed;
      if (bits == 0) vs.weight_quantization_bits.reset();
      else vs.weight_quantization_bits = bits;
      const Victim victim = Victim::build(vs);
      ApiSession session(victim, {ApiModeKind::AllLogits, 1});
      const AutoDimResult dim = extract_hidden_dim_auto(session, vs.hidden_dim);
      AttackRow row;
      row.attack = bits == 0 ? "extract-dim@full-precision"
                             : "extract-dim@" + std::to_string(bits) + "bit";
      row.seed = seed;
      row.extracted_dim = dim.dim;
      rep.rows.push_back(row);
      if (dim.dim != vs.hidden_dim) unchanged = false;
    }
  }
  rep.notes["dim_unchanged_under_quantization"] = unchanged ? "true" : "false";
  return rep;
}

Report sweep_spoofing(const ExperimentConfig& cfg) {
  Report rep = make_report(cfg, "sweep-spoofing");
  if (!cfg.victim.spoof_target_dim) throw ConfigError("spoofing sweep needs spoof_target_dim");
  const int32_t target = *cfg.victim.spoof_target_dim;
  for (uint64_t seed : cfg.seeds) {
    VictimSpec base = cfg.victim;
    base.seed = seed;
    base.spoof_target_dim.reset();
    const Victim victim = Victim::build(base);
    const Victim spoofed = apply_spoofing(victim, target);

    ApiSession s0(victim, {ApiModeKind::AllLogits, 1});
    ApiSession s1(spoofed, {ApiModeKind::AllLogits, 1});
    AttackRow r0;
    r0.attack = "extract-dim@base";
    r0.seed = seed;
    r0.extracted_dim = extract_hidden_dim_auto(s0, base.hidden_dim).dim;
    AttackRow r1;
    r1.attack = "extract-dim@spoofed";
    r1.seed = seed;
    r1.extracted_dim = extract_hidden_dim_auto(s1, target).dim;
    rep.rows.push_back(r0);
    rep.rows.push_back(r1);
    rep.aggregates["spoof_argmax_agreement@" + std::to_string(seed)] =
        spoofed.spoof_argmax_agreement();
  }
  return rep;
}

Report sweep_bias_xor(const ExperimentConfig& cfg) {
  Report rep = make_report(cfg, "sweep-bias-xor-logprobs");
  const uint64_t seed = cfg.seeds.front();
  VictimSpec vs = cfg.victim;
  vs.seed = seed;
  const Victim victim = Victim::build(vs);
  ApiPolicy policy = cfg.policy;
  policy.bias_xor_logprobs = true;

  // Biased logprob recovery must bounce off the mitigation.
  {
    ApiSession s(victim, {ApiModeKind::TopKLogprobsWithBias, 5}, policy);
    AttackRow row;
    row.attack = "logprob-4";
    row.seed = seed;
    try {
      run_attack_once("logprob-4", s, cfg.prompt, AttackParams{});
      row.status = "ok";
    } catch (const ApiError& e) {
      row.status = "rejected:" + e.code();
    }
    rep.rows.push_back(row);
  }

  // The argmax-only route still works: bias without logprobs is allowed.
  const int32_t h = vs.hidden_dim;
  {
    ApiSession s(victim, {ApiModeKind::TopKLogprobsWithBias, 5}, policy);
    const VectorXd truth = victim.true_logits(cfg.prompt);
    HyperrectangleOptions o;
    o.rounds = cfg.params.rounds;
    o.batch_size = cfg.params.batch;
    o.stop_max_width = cfg.params.stop_width > 0 ? cfg.params.stop_width : 0x1.0p-8;
    const IntervalBounds bounds = recover_hyperrectangle(s, cfg.prompt, o);
    AttackRow row = score_recovery("one-of-n", seed, truth, bounds.to_logits(vs.vocab_size),
                                   LedgerSnapshot{}, s.ledger(), 0.0);
    rep.rows.push_back(row);
  }

  // Dimension extraction through the logprob-free route: recover vectors on a
  // token subset per prompt, vocab-center, and read the gap.
  {
    const int lp = h + 8;
    const int n = h + 16;
    std::vector<int32_t> subset(lp);
    for (int i = 0; i < lp; ++i) subset[i] = i;
    MatrixXd rows(n, lp);
    Rng prng(hash_mix(seed, 0xb1a5));
    for (int i = 0; i < n; ++i) {
      TokenSeq prompt(6);
      for (auto& t : prompt) t = static_cast<int32_t>(prng.below(vs.vocab_size));
      ApiSession s(victim, {ApiModeKind::TopKLogprobsWithBias, 5}, policy);
      const int32_t ref = s.argmax(prompt, {});
      std::vector<int32_t> targets;
      for (int32_t t : subset)
        if (t != ref) targets.push_back(t);
      HyperrectangleOptions o;
      o.rounds = 100000;
      o.batch_size = static_cast<int>(targets.size());
      o.stop_max_width = 0x1.0p-12;
      o.tokens = targets;
      const IntervalBounds b = recover_hyperrectangle(s, prompt, o);
      const RecoveredLogits rec = b.to_logits(vs.vocab_size);
      for (int c = 0; c < lp; ++c) rows(i, c) = rec.values[subset[c]];
    }
    QueryMatrix q;
    q.rows = center_rows_vocab(rows);
    q.token_ids = subset;
    const DimResult dim = extract_hidden_dim(q);
    AttackRow row;
    row.attack = "extract-dim@logprob-free";
    row.seed = seed;
    row.extracted_dim = dim.dim;
    rep.rows.push_back(row);
    rep.notes["dim_via_logprob_free"] = std::to_string(dim.dim);
  }
  return rep;
}

Report sweep_blocklist(const ExperimentConfig& cfg) {
  Report rep = make_report(cfg, "sweep-blocklist");
  const uint64_t seed = cfg.seeds.front();
  VictimSpec vs = cfg.victim;
  vs.seed = seed;
  const Victim victim = Victim::build(vs);

  ApiPolicy blocked = cfg.policy;
  blocked.blocklist_mode = true;
  // prohibit the prompt's natural top token plus a couple of others
  const VectorXd z = victim.true_logits(cfg.prompt);
  const auto top = static_cast<int32_t>(kernels::active_ops().argmax(z.data(), z.size()));
  blocked.blocked_tokens = {top, 1, 2};

  {
    ApiSession s(victim, {ApiModeKind::TopKLogprobsWithBias, 5}, blocked);
    AttackRow row;
    row.attack = "logprob-4";
    row.seed = seed;
    try {
      run_attack_once("logprob-4", s, cfg.prompt, AttackParams{});
      row.status = "ok";
    } catch (const ApiError& e) {
      row.status = "rejected:" + e.code();
    }
    rep.rows.push_back(row);

    // blocked tokens must never surface
    const TopKResponse r = s.topk(cfg.prompt, {});
    bool leaked = false;
    for (const auto& it : r.items)
      for (int32_t b : blocked.blocked_tokens)
        if (it.token == b) leaked = true;
    rep.notes["blocked_tokens_hidden"] = leaked ? "false" : "true";
  }

  // The dimension attack needs no bias: run it on the logit surface over the
  // non-blocked token columns.
  {
    ApiSession s(victim, {ApiModeKind::AllLogits, 1}, blocked);
    std::vector<int32_t> subset;
    for (int32_t t = 0; t < vs.vocab_size; ++t) {
      bool is_blocked = false;
      for (int32_t b : blocked.blocked_tokens) is_blocked |= (t == b);
      if (!is_blocked) subset.push_back(t);
    }
    AutoDimOptions opts;
    opts.token_subset = subset;
    const AutoDimResult dim = extract_hidden_dim_auto(s, vs.hidden_dim, opts);
    AttackRow row;
    row.attack = "extract-dim@blocklist";
    row.seed = seed;
    row.extracted_dim = dim.dim;
    rep.rows.push_back(row);
  }
  return rep;
}

}  // namespace

Report defense_sweep(const ExperimentConfig& config, Defense defense) {
  Report rep;
  switch (defense) {
    case Defense::Noise: rep = sweep_noise(config); break;
    case Defense::Quantization: rep = sweep_quantization(config); break;
    case Defense::Spoofing: rep = sweep_spoofing(config); break;
    case Defense::BiasXorLogprobs: rep = sweep_bias_xor(config); break;
    case Defense::BlockList: rep = sweep_blocklist(config); break;
  }
  if (!config.out_dir.empty()) rep.write(config.out_dir);
  return rep;
}

std::vector<LowerBoundRow> lower_bound_report(double B, int N,
                                              const std::vector<double>& bit_targets,
                                              const ExperimentConfig& measure_config,
                                              bool measure) {
  std::vector<LowerBoundRow> rows;
  rows.reserve(bit_targets.size());
  for (double bits : bit_targets) {
    LowerBoundRow row;
    row.bits = bits;
    row.epsilon = std::pow(2.0, -bits);
    row.bound_per_logit = query_lower_bound_per_logit(B, row.epsilon, N);
    rows.push_back(row);
  }
  if (!measure) return rows;

  double tightest = rows.front().epsilon;
  for (const auto& r : rows) tightest = std::min(tightest, r.epsilon);

  VictimSpec vs = measure_config.victim;
  vs.seed = measure_config.seeds.front();
  const Victim victim = Victim::build(vs);

  // one-of-n on a single N-token batch, recording when each target is met
  {
    ApiSession s(victim, {ApiModeKind::ArgmaxOnlyWithBias, 1}, measure_config.policy);
    const int32_t ref = s.argmax(measure_config.prompt, {});
    std::vector<int32_t> targets;
    for (int32_t t = 0; t < vs.vocab_size && static_cast<int>(targets.size()) < N; ++t)
      if (t != ref) targets.push_back(t);

    std::vector<double> crossing(rows.size(), -1.0);
    HyperrectangleOptions o;
    o.rounds = 1 << 22;
    o.batch_size = N;
    o.bias_bound = B;
    o.tokens = targets;
    o.stop_max_width = tightest;
    o.centering = Centering::OneOfN;
    o.on_round = [&](int round, const IntervalBounds& b) {
      const double w = b.max_width();
      for (size_t i = 0; i < rows.size(); ++i)
        if (crossing[i] < 0 && w <= rows[i].epsilon)
          crossing[i] = static_cast<double>(round) + 1;  // + reference discovery
    };
    recover_hyperrectangle(s, measure_config.prompt, o);
    for (size_t i = 0; i < rows.size(); ++i) {
      if (crossing[i] > 0) rows[i].one_of_n_measured = crossing[i] / N;
    }
  }

  // binary search on a token sample (its cost is per token anyway)
  {
    const int sample = 32;
    for (auto& row : rows) {
      ApiSession s(victim, {ApiModeKind::ArgmaxOnlyWithBias, 1}, measure_config.policy);
      const int32_t ref = s.argmax(measure_config.prompt, {});
      uint64_t q0 = s.ledger().queries;
      int count = 0;
      for (int32_t t = 0; t < vs.vocab_size && count < sample; ++t) {
        if (t == ref) continue;
        ++count;
        double alpha = -B, beta = 0.0;
        while (beta - alpha > row.epsilon) {
          const double mid = 0.5 * (alpha + beta);
          LogitBias bias;
          bias.set(t, -mid);
          if (s.argmax(measure_config.prompt, bias) == t) alpha = mid;
          else beta = mid;
        }
      }
      row.binary_search_measured = static_cast<double>(s.ledger().queries - q0) / count;
    }
  }

  for (auto& row : rows) {
    const double tol = 1e-9;
    if ((row.one_of_n_measured >= 0 && row.one_of_n_measured < row.bound_per_logit - tol) ||
        (row.binary_search_measured >= 0 && row.binary_search_measured < row.bound_per_logit - tol))
      row.violated = true;
  }
  return rows;
}

Report lower_bound_report_as_report(const std::vector<LowerBoundRow>& rows,
                                    const ExperimentConfig& config) {
  Report rep;
  rep.kind = "lower-bound";
  rep.config_hash = fnv1a64(config.canonical_text());
  rep.revision = UNEMBED_REVISION;
  for (const auto& r : rows) {
    AttackRow row;
    row.attack = "bound@" + std::to_string(r.bits) + "bits";
    row.bits = r.bits;
    row.queries_per_logit = r.bound_per_logit;
    row.status = r.violated ? "error:attack-beats-bound" : "ok";
    rep.rows.push_back(row);
    rep.aggregates["bound@" + std::to_string(r.bits)] = r.bound_per_logit;
    if (r.one_of_n_measured >= 0)
      rep.aggregates["one-of-n@" + std::to_string(r.bits)] = r.one_of_n_measured;
    if (r.binary_search_measured >= 0)
      rep.aggregates["binary-search@" + std::to_string(r.bits)] = r.binary_search_measured;
  }
  return rep;
}

PipelineResult full_layer_pipeline(QuerySession& session, int n_prompts, uint64_t prompt_seed,
                                   double bias_b, int dim, int prompt_len) {
  const int32_t l = session.vocab_size();
  PipelineResult out;
  out.recovered_rows.resize(n_prompts, l);
  Rng rng(hash_mix(prompt_seed, 0x7069706531ull));
  std::unordered_set<uint64_t> seen;
  for (int i = 0; i < n_prompts; ++i) {
    TokenSeq p(prompt_len);
    do {
      for (auto& t : p) t = static_cast<int32_t>(rng.below(static_cast<uint32_t>(l)));
    } while (!seen.insert(hash_tokens(0x515, p)).second);
    const RecoveredLogits rec = recover_reference_token(session, p, bias_b);
    out.recovered_rows.row(i) = rec.values.transpose();
  }
  QueryMatrix q;
  q.rows = center_rows_vocab(out.recovered_rows);
  q.token_ids.resize(l);
  for (int32_t t = 0; t < l; ++t) q.token_ids[t] = t;
  out.stolen = extract_layer(q, dim).w;
  out.ledger = session.ledger();
  return out;
}

namespace {

json row_to_json(const AttackRow& r) {
  return json{{"attack", r.attack},
              {"seed", r.seed},
              {"status", r.status},
              {"bits", r.bits},
              {"queries", r.queries},
              {"informative", r.informative},
              {"queries_per_logit", r.queries_per_logit},
              {"tokens_total", r.tokens_total},
              {"tokens_per_logit", r.tokens_per_logit},
              {"rms", r.rms},
              {"extracted_dim", r.extracted_dim},
              {"max_abs_err", r.max_abs_err},
              {"missing", r.missing},
              {"low_confidence", r.low_confidence}};
}

json report_body(const Report& rep) {
  json rows = json::array();
  for (const auto& r : rep.rows) rows.push_back(row_to_json(r));
  return json{{"kind", rep.kind},
              {"revision", rep.revision},
              {"config_hash", rep.config_hash},
              {"rows", rows},
              {"aggregates", rep.aggregates},
              {"notes", rep.notes}};
}

}  // namespace

std::string Report::canonical_json() const { return report_body(*this).dump(2); }

std::string Report::full_json() const {
  json j = report_body(*this);
  json timing = json::array();
  for (const auto& r : rows) timing.push_back(r.wall_ms);
  j["timing_ms"] = timing;
  return j.dump(2);
}

std::string Report::csv() const {
  std::string out =
      "attack,seed,status,bits,queries,informative,queries_per_logit,tokens_total,"
      "tokens_per_logit,rms,extracted_dim,max_abs_err,missing,low_confidence\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf),
                  "%s,%llu,%s,%.17g,%llu,%d,%.17g,%llu,%.17g,%.17g,%d,%.17g,%d,%d\n",
                  r.attack.c_str(), static_cast<unsigned long long>(r.seed), r.status.c_str(),
                  r.bits, static_cast<unsigned long long>(r.queries), r.informative,
                  r.queries_per_logit, static_cast<unsigned long long>(r.tokens_total),
                  r.tokens_per_logit, r.rms, r.extracted_dim, r.max_abs_err, r.missing,
                  r.low_confidence);
    out += buf;
  }
  return out;
}

void Report::write(const std::string& out_dir) const {
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream f(out_dir + "/report.json");
    f << full_json() << "\n";
  }
  {
    std::ofstream f(out_dir + "/report.csv");
    f << csv();
  }
}

}  // namespace unembed
