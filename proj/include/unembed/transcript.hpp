#pragma once

#include <memory>
#include <string>

#include "unembed/api.hpp"

namespace unembed {

// Every request/response pair an attack makes can be mirrored to a
// line-delimited JSON log and replayed later for audit. Rejections are
// recorded too (they cost money) and re-thrown on replay.

class TranscriptingSession : public QuerySession {
 public:
  // Does not own `inner`; the log file is truncated.
  TranscriptingSession(QuerySession& inner, const std::string& path);
  ~TranscriptingSession() override;

  ApiMode mode() const override { return inner_.mode(); }
  int32_t vocab_size() const override { return inner_.vocab_size(); }
  LedgerSnapshot ledger() const override { return inner_.ledger(); }

  VectorXd all_logits(const TokenSeq& prompt) override;
  TopKResponse topk(const TokenSeq& prompt, const LogitBias& bias) override;
  int32_t argmax(const TokenSeq& prompt, const LogitBias& bias) override;
  std::vector<TopKResponse> generate(const TokenSeq& prompt, const LogitBias& bias,
                                     int max_tokens) override;

 private:
  struct Impl;
  QuerySession& inner_;
  std::unique_ptr<Impl> impl_;
};

// Serves a recorded transcript back in order. Each call must match the
// recorded request (op, prompt, bias); mismatches raise InputError.
class ReplaySession : public QuerySession {
 public:
  explicit ReplaySession(const std::string& path);
  ~ReplaySession() override;

  ApiMode mode() const override;
  int32_t vocab_size() const override;
  LedgerSnapshot ledger() const override;

  VectorXd all_logits(const TokenSeq& prompt) override;
  TopKResponse topk(const TokenSeq& prompt, const LogitBias& bias) override;
  int32_t argmax(const TokenSeq& prompt, const LogitBias& bias) override;
  std::vector<TopKResponse> generate(const TokenSeq& prompt, const LogitBias& bias,
                                     int max_tokens) override;

  bool exhausted() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace unembed
