#include "unembed/transcript.hpp"

#include <fstream>

#include <json.hpp>

#include "unembed/errors.hpp"

namespace unembed {

using json = nlohmann::json;

namespace {

json bias_to_json(const LogitBias& bias) {
  json j = json::object();
  for (const auto& [t, v] : bias.entries) j[std::to_string(t)] = v;
  return j;
}

LogitBias bias_from_json(const json& j) {
  LogitBias b;
  for (auto it = j.begin(); it != j.end(); ++it)
    b.entries[static_cast<int32_t>(std::stol(it.key()))] = it.value().get<double>();
  return b;
}

json items_to_json(const TopKResponse& r) {
  json j = json::array();
  for (const auto& it : r.items) j.push_back(json::array({it.token, it.logprob}));
  return j;
}

TopKResponse items_from_json(const json& j) {
  TopKResponse r;
  for (const auto& e : j) r.items.push_back({e[0].get<int32_t>(), e[1].get<double>()});
  return r;
}

json ledger_to_json(const LedgerSnapshot& s) {
  return json::array({s.queries, s.tokens_in, s.tokens_out});
}

}  // namespace

struct TranscriptingSession::Impl {
  std::ofstream out;

  void write(json j) {
    out << j.dump() << "\n";
    out.flush();
  }
};

TranscriptingSession::TranscriptingSession(QuerySession& inner, const std::string& path)
    : inner_(inner), impl_(std::make_unique<Impl>()) {
  impl_->out.open(path, std::ios::trunc);
  if (!impl_->out) throw InputError("cannot open transcript for writing: " + path);
  impl_->write(json{{"meta",
                     {{"mode", to_string(inner_.mode())},
                      {"k", inner_.mode().k},
                      {"vocab_size", inner_.vocab_size()},
                      {"overhead", inner_.ledger().overhead_per_query}}}});
}

TranscriptingSession::~TranscriptingSession() = default;

VectorXd TranscriptingSession::all_logits(const TokenSeq& prompt) {
  json rec{{"op", "all_logits"}, {"prompt", prompt}};
  try {
    VectorXd z = inner_.all_logits(prompt);
    rec["logits"] = std::vector<double>(z.data(), z.data() + z.size());
    rec["ledger"] = ledger_to_json(inner_.ledger());
    impl_->write(rec);
    return z;
  } catch (const ApiError& e) {
    rec["error"] = e.code();
    rec["ledger"] = ledger_to_json(inner_.ledger());
    impl_->write(rec);
    throw;
  }
}

TopKResponse TranscriptingSession::topk(const TokenSeq& prompt, const LogitBias& bias) {
  json rec{{"op", "topk"}, {"prompt", prompt}, {"bias", bias_to_json(bias)}};
  try {
    TopKResponse r = inner_.topk(prompt, bias);
    rec["items"] = items_to_json(r);
    rec["ledger"] = ledger_to_json(inner_.ledger());
    impl_->write(rec);
    return r;
  } catch (const ApiError& e) {
    rec["error"] = e.code();
    rec["ledger"] = ledger_to_json(inner_.ledger());
    impl_->write(rec);
    throw;
  }
}

int32_t TranscriptingSession::argmax(const TokenSeq& prompt, const LogitBias& bias) {
  json rec{{"op", "argmax"}, {"prompt", prompt}, {"bias", bias_to_json(bias)}};
  try {
    const int32_t t = inner_.argmax(prompt, bias);
    rec["token"] = t;
    rec["ledger"] = ledger_to_json(inner_.ledger());
    impl_->write(rec);
    return t;
  } catch (const ApiError& e) {
    rec["error"] = e.code();
    rec["ledger"] = ledger_to_json(inner_.ledger());
    impl_->write(rec);
    throw;
  }
}

std::vector<TopKResponse> TranscriptingSession::generate(const TokenSeq& prompt,
                                                         const LogitBias& bias, int max_tokens) {
  json rec{{"op", "generate"},
           {"prompt", prompt},
           {"bias", bias_to_json(bias)},
           {"max_tokens", max_tokens}};
  try {
    auto rs = inner_.generate(prompt, bias, max_tokens);
    json positions = json::array();
    for (const auto& r : rs) positions.push_back(items_to_json(r));
    rec["positions"] = positions;
    rec["ledger"] = ledger_to_json(inner_.ledger());
    impl_->write(rec);
    return rs;
  } catch (const ApiError& e) {
    rec["error"] = e.code();
    rec["ledger"] = ledger_to_json(inner_.ledger());
    impl_->write(rec);
    throw;
  }
}

struct ReplaySession::Impl {
  std::vector<json> records;
  size_t next = 0;
  ApiMode mode;
  int32_t vocab = 0;
  int overhead = 0;
  LedgerSnapshot ledger;

  const json& take(const std::string& op, const TokenSeq& prompt, const LogitBias* bias) {
    if (next >= records.size()) throw InputError("replay transcript exhausted");
    const json& rec = records[next++];
    if (rec.at("op").get<std::string>() != op)
      throw InputError("replay mismatch: expected op " + op);
    if (rec.at("prompt").get<TokenSeq>() != prompt)
      throw InputError("replay mismatch: prompt differs");
    if (bias && bias_to_json(*bias) != rec.value("bias", json::object()))
      throw InputError("replay mismatch: bias differs");
    if (rec.contains("ledger")) {
      const auto& lj = rec["ledger"];
      ledger.queries = lj[0].get<uint64_t>();
      ledger.tokens_in = lj[1].get<uint64_t>();
      ledger.tokens_out = lj[2].get<uint64_t>();
    }
    if (rec.contains("error")) throw ApiError(rec["error"].get<std::string>(), "replayed rejection");
    return rec;
  }
};

ReplaySession::ReplaySession(const std::string& path) : impl_(std::make_unique<Impl>()) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open transcript: " + path);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (first) {
      const auto& meta = j.at("meta");
      impl_->mode = api_mode_from_string(meta.at("mode").get<std::string>(), meta.at("k").get<int>());
      impl_->vocab = meta.at("vocab_size").get<int32_t>();
      impl_->overhead = meta.value("overhead", 0);
      impl_->ledger.overhead_per_query = impl_->overhead;
      first = false;
      continue;
    }
    impl_->records.push_back(std::move(j));
  }
  if (first) throw InputError("transcript missing meta line: " + path);
}

ReplaySession::~ReplaySession() = default;

ApiMode ReplaySession::mode() const { return impl_->mode; }
int32_t ReplaySession::vocab_size() const { return impl_->vocab; }
LedgerSnapshot ReplaySession::ledger() const { return impl_->ledger; }
bool ReplaySession::exhausted() const { return impl_->next >= impl_->records.size(); }

VectorXd ReplaySession::all_logits(const TokenSeq& prompt) {
  const json& rec = impl_->take("all_logits", prompt, nullptr);
  const auto vals = rec.at("logits").get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

TopKResponse ReplaySession::topk(const TokenSeq& prompt, const LogitBias& bias) {
  return items_from_json(impl_->take("topk", prompt, &bias).at("items"));
}

int32_t ReplaySession::argmax(const TokenSeq& prompt, const LogitBias& bias) {
  return impl_->take("argmax", prompt, &bias).at("token").get<int32_t>();
}

std::vector<TopKResponse> ReplaySession::generate(const TokenSeq& prompt, const LogitBias& bias,
                                                  int max_tokens) {
  const json& rec = impl_->take("generate", prompt, &bias);
  if (rec.at("max_tokens").get<int>() != max_tokens)
    throw InputError("replay mismatch: max_tokens differs");
  std::vector<TopKResponse> out;
  for (const auto& p : rec.at("positions")) out.push_back(items_from_json(p));
  return out;
}

}  // namespace unembed
