#pragma once

#include <map>
#include <string>
#include <vector>

#include "unembed/api.hpp"
#include "unembed/extract.hpp"
#include "unembed/recover.hpp"
#include "unembed/victim.hpp"

namespace unembed {

// Attack registry names: logprob-4, logprob-k, single-logprob, binarized,
// binary-search, hyperrectangle, one-of-n, lstsq; plus the composite suites
// table4 (six-row logit-recovery comparison) and table3 (dim + layer RMS
// over a set of victims).

struct AttackParams {
  double b = 100.0;              // bias magnitude used by the attack
  double epsilon = 0.09765625;   // binary-search tolerance (B/1024 with B=100)
  int rounds = 1500;             // hyperrectangle rounds per batch
  int batch = 300;               // biased tokens per hyperrectangle query
  double stop_width = 0.0;       // early-stop width (0 = run all rounds)
  std::vector<int32_t> token_subset;  // restrict interval attacks to these tokens
};

struct ExperimentConfig {
  VictimSpec victim;
  ApiMode mode;
  ApiPolicy policy;
  std::string attack = "logprob-4";
  AttackParams params;
  std::vector<uint64_t> seeds{1};
  TokenSeq prompt{2, 3, 5, 7};
  bool over_wire = false;
  std::string endpoint;  // external server; empty + over_wire = loopback spawn
  std::string out_dir;   // empty = no files written
  bool write_transcript = false;
  int workers = 0;  // 0 = hardware concurrency

  // Throws ConfigError when the attack cannot run against the mode.
  void validate() const;
  std::string canonical_text() const;
};

struct AttackRow {
  std::string attack;
  uint64_t seed = 0;
  std::string status = "ok";  // or "rejected:<code>" / "error:<what>"
  double bits = 0.0;
  uint64_t queries = 0;
  int informative = 0;
  double queries_per_logit = 0.0;
  uint64_t tokens_total = 0;
  double tokens_per_logit = 0.0;
  double rms = -1.0;         // layer-extraction rows only
  int extracted_dim = -1;    // dim rows only
  double max_abs_err = 0.0;  // after the optimal shift
  int missing = 0;
  int low_confidence = 0;
  double wall_ms = 0.0;
};

struct Report {
  std::string kind;
  std::vector<AttackRow> rows;
  std::map<std::string, double> aggregates;
  std::map<std::string, std::string> notes;
  uint64_t config_hash = 0;
  std::string revision;

  // Timing excluded: this is the deterministic payload the fixed-seed
  // reproducibility guarantee covers.
  std::string canonical_json() const;
  std::string full_json() const;
  std::string csv() const;
  void write(const std::string& out_dir) const;  // report.json + report.csv
};

// -log2 of the mean absolute error between recovered and true logits after
// the optimal additive shift (median of the differences); missing entries
// are excluded and counted by the caller. Capped at 52 bits.
double bits_of_precision(const VectorXd& true_logits, const RecoveredLogits& recovered);

Report run_attack_suite(const ExperimentConfig& config);

enum class Defense { Noise, Quantization, Spoofing, BiasXorLogprobs, BlockList };

Defense defense_from_string(const std::string& name);
std::string to_string(Defense d);

Report defense_sweep(const ExperimentConfig& config, Defense defense);

struct LowerBoundRow {
  double bits = 0.0;
  double epsilon = 0.0;
  double bound_per_logit = 0.0;
  double one_of_n_measured = -1.0;
  double binary_search_measured = -1.0;
  bool violated = false;  // an attack under the information-theoretic bound
};

// Tabulates query_lower_bound against measured queries/logit for the
// logprob-free attacks. Measurement runs one-of-n on a single N-token batch
// until every interval width reaches the target, and binary search on a
// token sample.
std::vector<LowerBoundRow> lower_bound_report(double B, int N,
                                              const std::vector<double>& bit_targets,
                                              const ExperimentConfig& measure_config,
                                              bool measure = true);

Report lower_bound_report_as_report(const std::vector<LowerBoundRow>& rows,
                                    const ExperimentConfig& config);

// Full recovery-then-extraction pipeline (reference-token route): recovers
// one logit vector per prompt, vocab-centers the stack, and extracts the
// layer at `dim`. Used for wire-equivalence checks and end-to-end runs.
struct PipelineResult {
  MatrixXd recovered_rows;  // n x l
  MatrixXd stolen;          // l x dim
  LedgerSnapshot ledger;
};

PipelineResult full_layer_pipeline(QuerySession& session, int n_prompts, uint64_t prompt_seed,
                                   double bias_b, int dim, int prompt_len = 6);

// Seed-parallel map with a bounded pool; exceptions surface after the join.
void parallel_over_seeds(const std::vector<uint64_t>& seeds, int workers,
                         const std::function<void(size_t index, uint64_t seed)>& fn);

}  // namespace unembed
