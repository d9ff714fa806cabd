#include "unembed/wire.hpp"

#include <chrono>
#include <map>
#include <mutex>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "unembed/errors.hpp"

namespace unembed {

using json = nlohmann::json;

namespace {

json usage_json(const LedgerSnapshot& before, const LedgerSnapshot& after) {
  return json{{"queries", after.queries - before.queries},
              {"tokens_in", after.tokens_in - before.tokens_in},
              {"tokens_out", after.tokens_out - before.tokens_out},
              {"overhead", after.overhead_per_query}};
}

LogitBias bias_from_json(const json& j) {
  LogitBias b;
  if (j.is_null()) return b;
  if (!j.is_object()) throw ApiError("bad_request", "logit_bias must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    int32_t token;
    try {
      token = static_cast<int32_t>(std::stol(it.key()));
    } catch (const std::exception&) {
      throw ApiError("bad_request", "logit_bias keys must be token ids");
    }
    if (!it.value().is_number()) throw ApiError("bad_request", "logit_bias values must be numbers");
    b.entries[token] = it.value().get<double>();
  }
  return b;
}

json items_json(const TopKResponse& r, int limit) {
  json obj = json::object();
  int count = 0;
  for (const auto& it : r.items) {
    if (count++ >= limit) break;
    obj[std::to_string(it.token)] = it.logprob;
  }
  return obj;
}

}  // namespace

struct WireServer::Impl {
  const Victim& victim;
  ApiMode mode;
  ApiPolicy policy;
  httplib::Server svr;
  std::thread worker;
  std::string host;
  int port = 0;

  std::mutex sessions_mu;
  std::map<std::string, std::unique_ptr<ApiSession>> sessions;

  Impl(const Victim& v, ApiMode m, ApiPolicy p) : victim(v), mode(m), policy(std::move(p)) {}

  ApiSession& session_for(const httplib::Request& req) {
    const std::string token = req.get_header_value("x-session-token");
    std::lock_guard<std::mutex> lock(sessions_mu);
    auto it = sessions.find(token);
    if (it == sessions.end())
      it = sessions.emplace(token, std::make_unique<ApiSession>(victim, mode, policy)).first;
    return *it->second;
  }

  void handle_completions(const httplib::Request& req, httplib::Response& res) {
    ApiSession& session = session_for(req);
    const LedgerSnapshot before = session.ledger();
    json out;
    int status = 200;
    try {
      json body = json::parse(req.body);
      if (!body.contains("prompt") || !body["prompt"].is_array())
        throw ApiError("bad_request", "prompt must be an array of token ids");
      const TokenSeq prompt = body["prompt"].get<TokenSeq>();
      const LogitBias bias = bias_from_json(body.value("logit_bias", json()));
      const bool want_logprobs = body.contains("logprobs") && !body["logprobs"].is_null();
      const int k_req = want_logprobs ? body["logprobs"].get<int>() : 0;
      const int max_tokens = body.value("max_tokens", 1);
      if (want_logprobs && (k_req < 1 || k_req > mode.k))
        throw ApiError("bad_request", "logprobs must be in [1, K]");
      if (max_tokens < 1) throw ApiError("bad_request", "max_tokens must be >= 1");

      switch (mode.kind) {
        case ApiModeKind::AllLogits: {
          if (!bias.empty() || want_logprobs)
            throw ApiError("mode_mismatch", "this endpoint serves raw logits only");
          const VectorXd z = session.all_logits(prompt);
          out["logits"] = std::vector<double>(z.data(), z.data() + z.size());
          out["tokens"] = json::array();
          break;
        }
        case ApiModeKind::TopKLogprobsWithBias:
        case ApiModeKind::Top1BinaryBias: {
          if (want_logprobs) {
            const TopKResponse r = session.topk(prompt, bias);
            out["tokens"] = json::array({r.items.front().token});
            out["top_logprobs"] = json::array({items_json(r, k_req)});
          } else {
            out["tokens"] = json::array({session.argmax(prompt, bias)});
          }
          break;
        }
        case ApiModeKind::ArgmaxOnlyWithBias: {
          if (want_logprobs) throw ApiError("mode_mismatch", "logprobs are not exposed");
          out["tokens"] = json::array({session.argmax(prompt, bias)});
          break;
        }
        case ApiModeKind::GenerationLogprobs: {
          const auto rs = session.generate(prompt, bias, max_tokens);
          json tokens = json::array();
          json tl = json::array();
          for (const auto& r : rs) {
            tokens.push_back(r.items.front().token);
            tl.push_back(items_json(r, want_logprobs ? k_req : mode.k));
          }
          out["tokens"] = tokens;
          out["top_logprobs"] = tl;
          break;
        }
      }
    } catch (const ApiError& e) {
      status = 400;
      out = json{{"error", {{"code", e.code()}, {"message", e.what()}}}};
    } catch (const std::exception& e) {
      status = 400;
      out = json{{"error", {{"code", "bad_request"}, {"message", e.what()}}}};
    }
    out["usage"] = usage_json(before, session.ledger());
    res.status = status;
    res.set_content(out.dump(), "application/json");
  }
};

WireServer::WireServer(const Victim& victim, ApiMode mode, ApiPolicy policy,
                       const std::string& host, int port)
    : impl_(std::make_unique<Impl>(victim, mode, std::move(policy))) {
  impl_->host = host;

  impl_->svr.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
    json j{{"status", "ok"},
           {"mode", to_string(impl_->mode)},
           {"k", impl_->mode.k},
           {"vocab_size", impl_->victim.vocab_size()},
           {"bias_bound", impl_->policy.limits.bias_bound},
           {"bias_max_entries", impl_->policy.limits.bias_max_entries},
           {"overhead", impl_->policy.overhead_tokens},
           {"emission", to_string(impl_->policy.emission)}};
    res.set_content(j.dump(), "application/json");
  });
  impl_->svr.Post("/v1/completions", [this](const httplib::Request& req, httplib::Response& res) {
    impl_->handle_completions(req, res);
  });

  if (port == 0) {
    impl_->port = impl_->svr.bind_to_any_port(host);
    if (impl_->port <= 0) throw TransportError("failed to bind " + host);
  } else {
    if (!impl_->svr.bind_to_port(host, port)) {
      throw TransportError("failed to bind " + host + ":" + std::to_string(port));
    }
    impl_->port = port;
  }
  impl_->worker = std::thread([this] { impl_->svr.listen_after_bind(); });
  for (int i = 0; i < 200 && !impl_->svr.is_running(); ++i)
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
}

WireServer::~WireServer() { stop(); }

int WireServer::port() const { return impl_->port; }

std::string WireServer::endpoint() const {
  return "http://" + impl_->host + ":" + std::to_string(impl_->port);
}

void WireServer::stop() {
  if (impl_->worker.joinable()) {
    impl_->svr.stop();
    impl_->worker.join();
  }
}

std::unique_ptr<WireServer> serve(const Victim& victim, ApiMode mode, ApiPolicy policy,
                                  const std::string& bind_address) {
  std::string host = bind_address;
  int port = 0;
  if (const auto colon = bind_address.rfind(':'); colon != std::string::npos) {
    host = bind_address.substr(0, colon);
    port = std::stoi(bind_address.substr(colon + 1));
  }
  if (host.empty()) host = "127.0.0.1";
  return std::make_unique<WireServer>(victim, mode, policy, host, port);
}

struct RemoteSession::Impl {
  std::string host;
  int port = 0;
  std::string token;
  ApiMode mode;
  int32_t vocab = 0;
  int overhead = 0;
  CostLedger ledger{0};

  Impl() : ledger(0) {}

  httplib::Headers headers() const {
    httplib::Headers h;
    if (!token.empty()) h.emplace("x-session-token", token);
    return h;
  }

  // POST with retries on transport failure only. API rejections are applied
  // to the ledger and re-thrown; retrying them would distort cost accounting.
  json post(const json& body) {
    const std::string payload = body.dump();
    httplib::Result res;
    for (int attempt = 0; attempt < 3; ++attempt) {
      httplib::Client cli(host, port);
      cli.set_read_timeout(60, 0);
      cli.set_connection_timeout(5, 0);
      res = cli.Post("/v1/completions", headers(), payload, "application/json");
      if (res) break;
      std::this_thread::sleep_for(std::chrono::milliseconds(20 << attempt));
    }
    if (!res) throw TransportError("no response from " + host + ":" + std::to_string(port));
    json j;
    try {
      j = json::parse(res->body);
    } catch (const std::exception&) {
      throw TransportError("malformed JSON from server");
    }
    if (j.contains("usage")) {
      const auto& u = j["usage"];
      LedgerSnapshot delta;
      delta.queries = u.value("queries", 0ull);
      delta.tokens_in = u.value("tokens_in", 0ull);
      delta.tokens_out = u.value("tokens_out", 0ull);
      ledger.apply(delta);
    }
    if (res->status != 200) {
      if (j.contains("error"))
        throw ApiError(j["error"].value("code", "unknown"), j["error"].value("message", ""));
      throw TransportError("unexpected HTTP status " + std::to_string(res->status));
    }
    return j;
  }

  static json request_body(const TokenSeq& prompt, const LogitBias& bias, int logprobs,
                           int max_tokens) {
    json body{{"prompt", prompt}, {"max_tokens", max_tokens}};
    if (!bias.entries.empty()) {
      json b = json::object();
      for (const auto& [t, v] : bias.entries) b[std::to_string(t)] = v;
      body["logit_bias"] = b;
    }
    if (logprobs > 0) body["logprobs"] = logprobs;
    return body;
  }

  static TopKResponse parse_items(const json& obj) {
    TopKResponse r;
    for (auto it = obj.begin(); it != obj.end(); ++it)
      r.items.push_back({static_cast<int32_t>(std::stol(it.key())), it.value().get<double>()});
    // descending logprob, ties to the lower token id: matches the server's
    // post-bias logit order (shared normalizer within one response)
    std::sort(r.items.begin(), r.items.end(), [](const TopKItem& a, const TopKItem& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      return a.token < b.token;
    });
    return r;
  }
};

RemoteSession::RemoteSession(const std::string& endpoint, std::string session_token)
    : impl_(std::make_unique<Impl>()) {
  std::string ep = endpoint;
  if (ep.rfind("http://", 0) == 0) ep = ep.substr(7);
  const auto colon = ep.rfind(':');
  if (colon == std::string::npos) throw TransportError("endpoint must be host:port");
  impl_->host = ep.substr(0, colon);
  impl_->port = std::stoi(ep.substr(colon + 1));
  impl_->token = std::move(session_token);

  httplib::Result res;
  for (int attempt = 0; attempt < 3 && !res; ++attempt) {
    httplib::Client cli(impl_->host, impl_->port);
    cli.set_connection_timeout(5, 0);
    res = cli.Get("/healthz");
    if (!res) std::this_thread::sleep_for(std::chrono::milliseconds(20 << attempt));
  }
  if (!res) throw TransportError("healthz unreachable at " + endpoint);
  json j;
  try {
    j = json::parse(res->body);
  } catch (const std::exception&) {
    throw TransportError("malformed healthz payload");
  }
  impl_->mode = api_mode_from_string(j.at("mode").get<std::string>(), j.at("k").get<int>());
  impl_->vocab = j.at("vocab_size").get<int32_t>();
  impl_->overhead = j.value("overhead", 0);
}

RemoteSession::~RemoteSession() = default;

ApiMode RemoteSession::mode() const { return impl_->mode; }
int32_t RemoteSession::vocab_size() const { return impl_->vocab; }

LedgerSnapshot RemoteSession::ledger() const {
  LedgerSnapshot s = impl_->ledger.snapshot();
  s.overhead_per_query = impl_->overhead;
  return s;
}

VectorXd RemoteSession::all_logits(const TokenSeq& prompt) {
  const json j = impl_->post(Impl::request_body(prompt, {}, 0, 1));
  const auto vals = j.at("logits").get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

TopKResponse RemoteSession::topk(const TokenSeq& prompt, const LogitBias& bias) {
  const json j = impl_->post(Impl::request_body(prompt, bias, impl_->mode.k, 1));
  return Impl::parse_items(j.at("top_logprobs").at(0));
}

int32_t RemoteSession::argmax(const TokenSeq& prompt, const LogitBias& bias) {
  const json j = impl_->post(Impl::request_body(prompt, bias, 0, 1));
  return j.at("tokens").at(0).get<int32_t>();
}

std::vector<TopKResponse> RemoteSession::generate(const TokenSeq& prompt, const LogitBias& bias,
                                                  int max_tokens) {
  const json j = impl_->post(Impl::request_body(prompt, bias, impl_->mode.k, max_tokens));
  std::vector<TopKResponse> out;
  for (const auto& obj : j.at("top_logprobs")) out.push_back(Impl::parse_items(obj));
  return out;
}

}  // namespace unembed
