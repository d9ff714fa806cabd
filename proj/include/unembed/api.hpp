#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "unembed/numeric.hpp"
#include "unembed/victim.hpp"

namespace unembed {

enum class ApiModeKind {
  AllLogits,
  TopKLogprobsWithBias,
  Top1BinaryBias,
  ArgmaxOnlyWithBias,
  GenerationLogprobs,
};

struct ApiMode {
  ApiModeKind kind = ApiModeKind::TopKLogprobsWithBias;
  int k = 5;  // logprobs per position for TopK/Generation; forced to 1 for Top1BinaryBias
};

std::string to_string(const ApiMode& mode);
ApiMode api_mode_from_string(const std::string& name, int k);

// Sparse token -> additive bias map. Bounds live in ApiLimits.
struct LogitBias {
  std::map<int32_t, double> entries;

  bool empty() const { return entries.empty(); }
  LogitBias& set(int32_t token, double value) {
    entries[token] = value;
    return *this;
  }
};

struct TopKItem {
  int32_t token;
  double logprob;
};

// The K largest post-bias logits, descending, ties to the lower token index.
// Within one response, logprob differences equal post-bias logit differences.
struct TopKResponse {
  std::vector<TopKItem> items;

  // Logprob for a token id, or nullopt if it did not make the top K.
  std::optional<double> find(int32_t token) const {
    for (const auto& it : items)
      if (it.token == token) return it.logprob;
    return std::nullopt;
  }
};

struct ApiLimits {
  double bias_bound = 100.0;  // |b| <= B
  int bias_max_entries = 300;
};

enum class EmitPrecision { Fp64, Fp32, Fp16 };

std::string to_string(EmitPrecision p);
EmitPrecision emit_precision_from_string(const std::string& s);

double emit_round(double v, EmitPrecision p);

struct ApiPolicy {
  ApiLimits limits;
  EmitPrecision emission = EmitPrecision::Fp64;
  // Mitigations (section-8 style): reject requests that carry both a logit
  // bias and a logprob request; or remove the bias channel entirely and
  // accept only a block-list of prohibited tokens.
  bool bias_xor_logprobs = false;
  bool blocklist_mode = false;
  std::vector<int32_t> blocked_tokens;
  bool charge_rejected = true;  // rejected queries still hit the meter
  int overhead_tokens = 0;      // per-query token overhead (Delta)
};

struct LedgerSnapshot {
  uint64_t queries = 0;
  uint64_t tokens_in = 0;
  uint64_t tokens_out = 0;
  int overhead_per_query = 0;

  uint64_t total_tokens() const {
    return tokens_in + tokens_out + static_cast<uint64_t>(overhead_per_query) * queries;
  }
};

// Monotone counters, atomically updated; one per attack session.
class CostLedger {
 public:
  explicit CostLedger(int overhead = 0) : overhead_(overhead) {}

  void charge(uint64_t tokens_in, uint64_t tokens_out) {
    queries_.fetch_add(1, std::memory_order_relaxed);
    tokens_in_.fetch_add(tokens_in, std::memory_order_relaxed);
    tokens_out_.fetch_add(tokens_out, std::memory_order_relaxed);
  }

  void apply(const LedgerSnapshot& delta) {
    queries_.fetch_add(delta.queries, std::memory_order_relaxed);
    tokens_in_.fetch_add(delta.tokens_in, std::memory_order_relaxed);
    tokens_out_.fetch_add(delta.tokens_out, std::memory_order_relaxed);
  }

  LedgerSnapshot snapshot() const {
    return LedgerSnapshot{queries_.load(), tokens_in_.load(), tokens_out_.load(), overhead_};
  }

 private:
  std::atomic<uint64_t> queries_{0}, tokens_in_{0}, tokens_out_{0};
  int overhead_;
};

// Uniform attacker-facing surface. Attacks are written against this
// interface and run unmodified in-process, over HTTP, or from a transcript.
class QuerySession {
 public:
  virtual ~QuerySession() = default;

  virtual ApiMode mode() const = 0;
  virtual int32_t vocab_size() const = 0;
  virtual LedgerSnapshot ledger() const = 0;

  virtual VectorXd all_logits(const TokenSeq& prompt) = 0;
  virtual TopKResponse topk(const TokenSeq& prompt, const LogitBias& bias) = 0;
  virtual int32_t argmax(const TokenSeq& prompt, const LogitBias& bias) = 0;
  virtual std::vector<TopKResponse> generate(const TokenSeq& prompt, const LogitBias& bias,
                                             int max_tokens) = 0;
};

// In-process session over a Victim (read-only, so concurrent sessions are
// safe). Throws ApiError on rejection; rejected queries are still charged
// unless the policy says otherwise, and leak nothing but the error code.
class ApiSession : public QuerySession {
 public:
  ApiSession(const Victim& victim, ApiMode mode, ApiPolicy policy = {});

  ApiMode mode() const override { return mode_; }
  int32_t vocab_size() const override { return victim_.vocab_size(); }
  LedgerSnapshot ledger() const override { return ledger_.snapshot(); }
  const ApiPolicy& policy() const { return policy_; }

  VectorXd all_logits(const TokenSeq& prompt) override;
  TopKResponse topk(const TokenSeq& prompt, const LogitBias& bias) override;
  int32_t argmax(const TokenSeq& prompt, const LogitBias& bias) override;
  std::vector<TopKResponse> generate(const TokenSeq& prompt, const LogitBias& bias,
                                     int max_tokens) override;

 private:
  VectorXd biased_logits(const TokenSeq& prompt, const LogitBias& bias);
  void check_prompt(const TokenSeq& prompt);
  void check_bias(const TokenSeq& prompt, const LogitBias& bias, bool logprobs_requested);
  [[noreturn]] void reject(const TokenSeq& prompt, const std::string& code,
                           const std::string& msg);
  TopKResponse select_topk(const VectorXd& z, int k) const;

  const Victim& victim_;
  ApiMode mode_;
  ApiPolicy policy_;
  CostLedger ledger_;
};

// Spec operation aliases.
VectorXd query_all_logits(QuerySession& session, const TokenSeq& prompt);
TopKResponse query_topk(QuerySession& session, const TokenSeq& prompt, const LogitBias& bias);
int32_t query_argmax(QuerySession& session, const TokenSeq& prompt, const LogitBias& bias);
std::vector<TopKResponse> query_generation_logprobs(QuerySession& session, const TokenSeq& prompt,
                                                    const LogitBias& bias, int m);

}  // namespace unembed
