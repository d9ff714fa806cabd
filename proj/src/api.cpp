#include "unembed/api.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "unembed/errors.hpp"
#include "unembed/fp16.hpp"

namespace unembed {

std::string to_string(const ApiMode& mode) {
  switch (mode.kind) {
    case ApiModeKind::AllLogits: return "all_logits";
    case ApiModeKind::TopKLogprobsWithBias: return "topk_logprobs_bias";
    case ApiModeKind::Top1BinaryBias: return "top1_binary_bias";
    case ApiModeKind::ArgmaxOnlyWithBias: return "argmax_only_bias";
    case ApiModeKind::GenerationLogprobs: return "generation_logprobs";
  }
  return "?";
}

ApiMode api_mode_from_string(const std::string& name, int k) {
  ApiMode m;
  m.k = k;
  if (name == "all_logits" || name == "all-logits") m.kind = ApiModeKind::AllLogits;
  else if (name == "topk_logprobs_bias" || name == "topk") m.kind = ApiModeKind::TopKLogprobsWithBias;
  else if (name == "top1_binary_bias" || name == "top1-binary") m.kind = ApiModeKind::Top1BinaryBias;
  else if (name == "argmax_only_bias" || name == "argmax") m.kind = ApiModeKind::ArgmaxOnlyWithBias;
  else if (name == "generation_logprobs" || name == "generation") m.kind = ApiModeKind::GenerationLogprobs;
  else throw ConfigError("unknown api mode: " + name);
  if (m.kind == ApiModeKind::Top1BinaryBias) m.k = 1;
  if (m.k < 1) throw ConfigError("k must be >= 1");
  return m;
}

std::string to_string(EmitPrecision p) {
  switch (p) {
    case EmitPrecision::Fp64: return "fp64";
    case EmitPrecision::Fp32: return "fp32";
    case EmitPrecision::Fp16: return "fp16";
  }
  return "?";
}

EmitPrecision emit_precision_from_string(const std::string& s) {
  if (s == "fp64") return EmitPrecision::Fp64;
  if (s == "fp32") return EmitPrecision::Fp32;
  if (s == "fp16") return EmitPrecision::Fp16;
  throw ConfigError("unknown emission precision: " + s);
}

double emit_round(double v, EmitPrecision p) {
  switch (p) {
    case EmitPrecision::Fp64: return v;
    case EmitPrecision::Fp32: return round_to_float(v);
    case EmitPrecision::Fp16: return round_to_half(v);
  }
  return v;
}

ApiSession::ApiSession(const Victim& victim, ApiMode mode, ApiPolicy policy)
    : victim_(victim), mode_(mode), policy_(std::move(policy)),
      ledger_(policy_.overhead_tokens) {
  if (mode_.kind == ApiModeKind::Top1BinaryBias) mode_.k = 1;
  if (mode_.k < 1) throw ConfigError("k must be >= 1");
  for (int32_t t : policy_.blocked_tokens)
    if (t < 0 || t >= victim_.vocab_size()) throw ConfigError("blocked token out of range");
}

void ApiSession::reject(const TokenSeq& prompt, const std::string& code, const std::string& msg) {
  if (policy_.charge_rejected) ledger_.charge(prompt.size(), 0);
  throw ApiError(code, msg);
}

void ApiSession::check_prompt(const TokenSeq& prompt) {
  if (prompt.empty()) reject(prompt, "empty_prompt", "prompt must be non-empty");
  for (int32_t t : prompt)
    if (t < 0 || t >= victim_.vocab_size()) reject(prompt, "bad_token", "token id out of range");
}

void ApiSession::check_bias(const TokenSeq& prompt, const LogitBias& bias,
                            bool logprobs_requested) {
  if (!bias.empty() && policy_.blocklist_mode)
    reject(prompt, "bias_disabled", "logit bias is not available; use the block list");
  if (!bias.empty() && logprobs_requested && policy_.bias_xor_logprobs)
    reject(prompt, "bias_and_logprobs", "requests may use logit bias or logprobs, not both");
  if (static_cast<int>(bias.entries.size()) > policy_.limits.bias_max_entries)
    reject(prompt, "bias_limit", "too many logit_bias entries");
  for (const auto& [t, v] : bias.entries) {
    if (t < 0 || t >= victim_.vocab_size()) reject(prompt, "bad_token", "bias token out of range");
    if (!(std::abs(v) <= policy_.limits.bias_bound))
      reject(prompt, "bias_value", "bias outside [-B, B]");
    if (mode_.kind == ApiModeKind::Top1BinaryBias && v != -1.0 && v != 0.0)
      reject(prompt, "bias_value", "bias restricted to {-1, 0}");
  }
}

VectorXd ApiSession::biased_logits(const TokenSeq& prompt, const LogitBias& bias) {
  VectorXd z = victim_.logits(prompt);
  for (const auto& [t, v] : bias.entries) z[t] += v;
  for (int32_t t : policy_.blocked_tokens) z[t] = -std::numeric_limits<double>::infinity();
  return z;
}

TopKResponse ApiSession::select_topk(const VectorXd& z, int k) const {
  const auto n = static_cast<int32_t>(z.size());
  k = std::min<int>(k, n);
  std::vector<int32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int32_t a, int32_t b) {
    if (z[a] != z[b]) return z[a] > z[b];
    return a < b;
  });
  const LogSoftmax ls = log_softmax_stats(z.data(), static_cast<size_t>(n));
  if (!std::isfinite(ls.max)) throw ApiError("blocked", "no tokens available");
  TopKResponse resp;
  resp.items.reserve(k);
  for (int i = 0; i < k; ++i)
    resp.items.push_back({idx[i], emit_round(ls.logprob(z[idx[i]]), policy_.emission)});
  return resp;
}

VectorXd ApiSession::all_logits(const TokenSeq& prompt) {
  if (mode_.kind != ApiModeKind::AllLogits)
    reject(prompt, "mode_mismatch", "full logits are not exposed in this mode");
  check_prompt(prompt);
  VectorXd z = biased_logits(prompt, {});
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = emit_round(z[i], policy_.emission);
  ledger_.charge(prompt.size(), 1);
  return z;
}

TopKResponse ApiSession::topk(const TokenSeq& prompt, const LogitBias& bias) {
  if (mode_.kind != ApiModeKind::TopKLogprobsWithBias && mode_.kind != ApiModeKind::Top1BinaryBias)
    reject(prompt, "mode_mismatch", "top-k logprobs are not exposed in this mode");
  check_prompt(prompt);
  check_bias(prompt, bias, /*logprobs_requested=*/true);
  const VectorXd z = biased_logits(prompt, bias);
  TopKResponse resp = select_topk(z, mode_.k);
  ledger_.charge(prompt.size(), 1);
  return resp;
}

int32_t ApiSession::argmax(const TokenSeq& prompt, const LogitBias& bias) {
  if (mode_.kind != ApiModeKind::ArgmaxOnlyWithBias && mode_.kind != ApiModeKind::Top1BinaryBias &&
      mode_.kind != ApiModeKind::TopKLogprobsWithBias)
    reject(prompt, "mode_mismatch", "argmax sampling is not exposed in this mode");
  check_prompt(prompt);
  check_bias(prompt, bias, /*logprobs_requested=*/false);
  const VectorXd z = biased_logits(prompt, bias);
  // kernels argmax resolves ties to the lowest index
  const size_t k = kernels::active_ops().argmax(z.data(), static_cast<size_t>(z.size()));
  if (!std::isfinite(z[static_cast<Eigen::Index>(k)]))
    throw ApiError("blocked", "no tokens available");
  ledger_.charge(prompt.size(), 1);
  return static_cast<int32_t>(k);
}

std::vector<TopKResponse> ApiSession::generate(const TokenSeq& prompt, const LogitBias& bias,
                                               int max_tokens) {
  if (mode_.kind != ApiModeKind::GenerationLogprobs)
    reject(prompt, "mode_mismatch", "multi-token generation is not exposed in this mode");
  if (max_tokens < 1) reject(prompt, "bad_request", "max_tokens must be >= 1");
  check_prompt(prompt);
  check_bias(prompt, bias, /*logprobs_requested=*/true);
  // Greedy decoding; the bias applies at every position.
  std::vector<TopKResponse> out;
  out.reserve(max_tokens);
  TokenSeq cur = prompt;
  for (int i = 0; i < max_tokens; ++i) {
    const VectorXd z = biased_logits(cur, bias);
    TopKResponse resp = select_topk(z, mode_.k);
    cur.push_back(resp.items.front().token);
    out.push_back(std::move(resp));
  }
  ledger_.charge(prompt.size(), max_tokens);
  return out;
}

VectorXd query_all_logits(QuerySession& session, const TokenSeq& prompt) {
  return session.all_logits(prompt);
}

TopKResponse query_topk(QuerySession& session, const TokenSeq& prompt, const LogitBias& bias) {
  return session.topk(prompt, bias);
}

int32_t query_argmax(QuerySession& session, const TokenSeq& prompt, const LogitBias& bias) {
  return session.argmax(prompt, bias);
}

std::vector<TopKResponse> query_generation_logprobs(QuerySession& session, const TokenSeq& prompt,
                                                    const LogitBias& bias, int m) {
  return session.generate(prompt, bias, m);
}

}  // namespace unembed
