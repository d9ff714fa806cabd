#pragma once

#include <memory>
#include <string>

#include "unembed/api.hpp"
#include "unembed/victim.hpp"

namespace unembed {

// Completions-style JSON protocol over HTTP/1.1.
//
//   POST /v1/completions
//     {"prompt": [1,2,3], "logit_bias": {"5": 100.0}, "logprobs": 5,
//      "max_tokens": 1}
//   -> {"tokens": [17], "top_logprobs": [{"17": -0.03, ...}],
//       "usage": {"queries": 1, "tokens_in": 3, "tokens_out": 1, "overhead": 0}}
//   -> 400 {"error": {"code": "bias_limit", "message": "..."}, "usage": {...}}
//
//   GET /healthz -> {"status": "ok", "mode": "...", "k": 5, "vocab_size": ...,
//                    "bias_bound": 100.0, "bias_max_entries": 300, ...}
//
// Prompts are token ids, not strings: tokenization is out of scope and the
// protocol says so. Floats ride as shortest round-trip decimals, so every
// logprob survives the wire bit-exactly. A request that omits "logprobs"
// gets tokens only. Clients sharing a session pass "x-session-token".

class WireServer {
 public:
  // port 0 binds any free port. The server shares the victim read-only;
  // each session token gets its own ledger.
  WireServer(const Victim& victim, ApiMode mode, ApiPolicy policy,
             const std::string& host = "127.0.0.1", int port = 0);
  ~WireServer();

  WireServer(const WireServer&) = delete;
  WireServer& operator=(const WireServer&) = delete;

  int port() const;
  std::string endpoint() const;  // http://host:port
  void stop();                   // graceful; also runs on destruction

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::unique_ptr<WireServer> serve(const Victim& victim, ApiMode mode, ApiPolicy policy,
                                  const std::string& bind_address);

// QuerySession over the wire: attacks run unmodified. The ledger mirrors the
// server-reported usage (rejections included). Transport failures retry a
// few times and then surface as TransportError with no ledger change; API
// rejections never retry, so the cost accounting matches in-process runs.
class RemoteSession : public QuerySession {
 public:
  explicit RemoteSession(const std::string& endpoint, std::string session_token = "");
  ~RemoteSession() override;

  ApiMode mode() const override;
  int32_t vocab_size() const override;
  LedgerSnapshot ledger() const override;

  VectorXd all_logits(const TokenSeq& prompt) override;
  TopKResponse topk(const TokenSeq& prompt, const LogitBias& bias) override;
  int32_t argmax(const TokenSeq& prompt, const LogitBias& bias) override;
  std::vector<TopKResponse> generate(const TokenSeq& prompt, const LogitBias& bias,
                                     int max_tokens) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace unembed
