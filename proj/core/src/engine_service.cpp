#include "moaserve/engine_service.hpp"

#include <algorithm>

#include <httplib.h>

#include "moaserve/errors.hpp"
#include "moaserve/scenario.hpp"

namespace moaserve {

namespace {

using json = nlohmann::ordered_json;

TokenSeq tokens_from(const json& j, const std::string& where) {
  if (!j.is_array()) throw ValidationError(where + ": expected an array of token ids");
  TokenSeq out;
  out.reserve(j.size());
  for (const auto& e : j) {
    if (!e.is_number_integer()) throw ValidationError(where + ": expected an array of token ids");
    out.push_back(e.get<Token>());
  }
  return out;
}

std::string agent_from(const json& body) {
  if (!body.contains("agent") || !body.at("agent").is_string()) {
    throw ValidationError("body.agent: expected an agent id string");
  }
  return body.at("agent").get<std::string>();
}

}  // namespace

EngineService::EngineService(EngineSpec spec, int default_chunk_size)
    : spec_(spec), default_chunk_size_(default_chunk_size) {
  spec_.validate("engine service");
  if (default_chunk_size <= 0) {
    throw ValidationError("engine service: default_chunk_size must be > 0");
  }
}

EngineService::RequestState& EngineService::state_for(const std::string& agent) {
  AgentId::parse(agent);  // rejects malformed ids
  return requests_[agent];
}

json EngineService::prefill_only(const json& body) {
  std::lock_guard<std::mutex> lock(mu_);
  prefill_calls_ += 1;
  std::string agent = agent_from(body);
  RequestState& r = state_for(agent);
  if (r.generated) throw ValidationError("prefill_only after generate for agent " + agent);

  int start = body.value("start", 0);
  TokenSeq tokens =
      body.contains("tokens") ? tokens_from(body.at("tokens"), "body.tokens") : TokenSeq{};
  int scheduled = static_cast<int>(r.prompt.size());
  if (start != scheduled) {
    throw ValidationError("contiguity violation for agent " + agent + ": prefill starts at " +
                          std::to_string(start) + " but " + std::to_string(scheduled) +
                          " tokens are scheduled");
  }

  double submit = body.value("t", r.pe_free_at);
  double t_start = std::max(submit, r.pe_free_at);
  double t_end = t_start;
  if (!tokens.empty()) {
    t_end = t_start + spec_.prefill_startup_overhead +
            static_cast<double>(tokens.size()) / spec_.prefill_rate;
    r.prompt.insert(r.prompt.end(), tokens.begin(), tokens.end());
    r.pe_free_at = t_end;
  }

  json res;
  res["agent"] = agent;
  res["start"] = start;
  res["end"] = static_cast<int>(r.prompt.size());
  res["t_start"] = t_start;
  res["t_end"] = t_end;
  return res;
}

json EngineService::generate(const json& body) {
  std::lock_guard<std::mutex> lock(mu_);
  generate_calls_ += 1;
  std::string agent = agent_from(body);
  RequestState& r = state_for(agent);
  if (r.generated) throw ValidationError("generate submitted twice for agent " + agent);

  if (!body.contains("prompt")) throw ValidationError("body.prompt: required");
  TokenSeq prompt = tokens_from(body.at("prompt"), "body.prompt");
  if (prompt.size() < r.prompt.size() ||
      !std::equal(r.prompt.begin(), r.prompt.end(), prompt.begin())) {
    throw ValidationError("generate prompt for agent " + agent +
                          " does not extend the prefilled prefix");
  }

  TokenSeq output;
  if (body.contains("output")) {
    output = tokens_from(body.at("output"), "body.output");
  } else {
    int n = body.value("output_tokens", 0);
    if (n < 0) throw ValidationError("body.output_tokens: must be >= 0");
    output = synth_tokens(0, "service:" + agent, n);
  }
  int chunk = body.value("chunk_size", default_chunk_size_);
  if (chunk <= 0) throw ValidationError("body.chunk_size: must be > 0");

  int remainder = static_cast<int>(prompt.size() - r.prompt.size());
  double submit = body.value("t", r.pe_free_at);
  double prefill_end = std::max(submit, r.pe_free_at);
  if (remainder > 0) {
    prefill_end += spec_.prefill_startup_overhead +
                   static_cast<double>(remainder) / spec_.prefill_rate;
  }
  double transfer = spec_.kv_transfer_per_block > 0.0
                        ? spec_.kv_transfer_per_block *
                              kv_blocks(static_cast<int>(prompt.size()), spec_.kv_block_tokens)
                        : 0.0;
  double decode_start = prefill_end + transfer;
  double decode_end =
      decode_start + static_cast<double>(output.size()) / spec_.decode_rate;

  r.prompt = std::move(prompt);
  r.pe_free_at = prefill_end;
  r.generated = true;

  json chunks = json::array();
  for (int b = 0; b < static_cast<int>(output.size()); b += chunk) {
    int e = std::min(b + chunk, static_cast<int>(output.size()));
    json cj;
    cj["t"] = decode_start + static_cast<double>(e) / spec_.decode_rate;
    cj["begin"] = b;
    cj["end"] = e;
    cj["tokens"] = TokenSeq(output.begin() + b, output.begin() + e);
    chunks.push_back(std::move(cj));
  }

  json res;
  res["agent"] = agent;
  res["prompt_tokens"] = static_cast<int>(r.prompt.size());
  res["remainder"] = remainder;
  res["prefill_end"] = prefill_end;
  res["transfer_seconds"] = transfer;
  res["decode_start"] = decode_start;
  res["decode_end"] = decode_end;
  res["chunks"] = std::move(chunks);
  return res;
}

json EngineService::reclaim(const json& body) {
  std::lock_guard<std::mutex> lock(mu_);
  std::string agent = agent_from(body);
  RequestState& r = state_for(agent);
  if (r.generated) throw ValidationError("reclaim after generate for agent " + agent);
  int keep = body.value("keep", 0);
  int scheduled = static_cast<int>(r.prompt.size());
  if (keep < 0 || keep > scheduled) {
    throw ValidationError("reclaim point " + std::to_string(keep) +
                          " outside scheduled prompt of " + std::to_string(scheduled) +
                          " tokens");
  }
  r.prompt.resize(static_cast<std::size_t>(keep));

  json res;
  res["agent"] = agent;
  res["scheduled"] = keep;
  return res;
}

namespace {

void reply_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename Fn>
void handle(const httplib::Request& req, httplib::Response& res, Fn&& fn) {
  json body;
  try {
    body = req.body.empty() ? json::object() : json::parse(req.body);
  } catch (const std::exception& e) {
    reply_json(res, 400, {{"error", std::string("invalid JSON body: ") + e.what()}});
    return;
  }
  try {
    reply_json(res, 200, fn(body));
  } catch (const std::exception& e) {
    reply_json(res, 400, {{"error", e.what()}});
  }
}

}  // namespace

void EngineService::attach(httplib::Server& server) {
  attach_without_prefill(server);
  server.Post("/prefill_only", [this](const httplib::Request& req, httplib::Response& res) {
    handle(req, res, [this](const json& body) { return prefill_only(body); });
  });
  server.Post("/reclaim", [this](const httplib::Request& req, httplib::Response& res) {
    handle(req, res, [this](const json& body) { return reclaim(body); });
  });
}

void EngineService::attach_without_prefill(httplib::Server& server) {
  server.Post("/generate", [this](const httplib::Request& req, httplib::Response& res) {
    handle(req, res, [this](const json& body) { return generate(body); });
  });
  server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    reply_json(res, 200, {{"ok", true}});
  });
}

int EngineService::prefill_only_calls() const {
  std::lock_guard<std::mutex> lock(mu_);
  return prefill_calls_;
}

int EngineService::generate_calls() const {
  std::lock_guard<std::mutex> lock(mu_);
  return generate_calls_;
}

// ---------------------------------------------------------------------------

struct HttpEngineBackend::Impl {
  httplib::Client client;
  bool no_prefill_route = false;

  explicit Impl(const std::string& base_url, int timeout_s) : client(base_url) {
    client.set_connection_timeout(timeout_s, 0);
    client.set_read_timeout(timeout_s, 0);
  }
};

HttpEngineBackend::HttpEngineBackend(const std::string& base_url, int timeout_s)
    : impl_(std::make_unique<Impl>(base_url, timeout_s)) {}

HttpEngineBackend::~HttpEngineBackend() = default;

namespace {

json parse_or_raise(const httplib::Result& res, const std::string& route) {
  if (!res) {
    throw RunError("engine backend: transport failure on " + route + " (" +
                   httplib::to_string(res.error()) + ")");
  }
  json body;
  if (!res->body.empty()) {
    try {
      body = json::parse(res->body);
    } catch (const std::exception&) {
      throw RunError("engine backend: non-JSON response on " + route);
    }
  }
  if (res->status != 200) {
    std::string detail = body.is_object() ? body.value("error", "") : "";
    throw RunError("engine backend: " + route + " failed with status " +
                   std::to_string(res->status) + (detail.empty() ? "" : ": " + detail));
  }
  return body;
}

}  // namespace

bool HttpEngineBackend::prefill_only(const AgentId& agent, int start, const TokenSeq& tokens) {
  if (impl_->no_prefill_route) return false;
  json body;
  body["agent"] = agent.str();
  body["start"] = start;
  body["tokens"] = tokens;
  auto res = impl_->client.Post("/prefill_only", body.dump(), "application/json");
  if (res && res->status == 404) {
    impl_->no_prefill_route = true;
    return false;
  }
  parse_or_raise(res, "/prefill_only");
  return true;
}

json HttpEngineBackend::generate(const AgentId& agent, const TokenSeq& prompt) {
  json body;
  body["agent"] = agent.str();
  body["prompt"] = prompt;
  auto res = impl_->client.Post("/generate", body.dump(), "application/json");
  return parse_or_raise(res, "/generate");
}

void HttpEngineBackend::reclaim(const AgentId& agent, int keep) {
  json body;
  body["agent"] = agent.str();
  body["keep"] = keep;
  auto res = impl_->client.Post("/reclaim", body.dump(), "application/json");
  parse_or_raise(res, "/reclaim");
}

// ---------------------------------------------------------------------------

HttpShellRouter::HttpShellRouter(EngineBackend& backend, AgentId self, PromptTemplate tmpl,
                                 bool incremental, int min_tokens_per_call)
    : backend_(backend),
      plan_(self, std::move(tmpl), incremental),
      min_tokens_per_call_(min_tokens_per_call) {
  if (min_tokens_per_call < 0) {
    throw ValidationError("router: min_tokens_per_call must be >= 0");
  }
}

void HttpShellRouter::start() { apply(plan_.start()); }

void HttpShellRouter::on_chunk(const AgentId& producer, const TokenSeq& tokens) {
  apply(plan_.on_chunk(producer, tokens));
}

void HttpShellRouter::on_precursor_done(const AgentId& producer) {
  apply(plan_.on_precursor_done(producer));
}

void HttpShellRouter::on_precursor_cancelled(const AgentId& producer) {
  apply(plan_.on_precursor_cancelled(producer));
}

const nlohmann::ordered_json& HttpShellRouter::generate_response() const {
  if (!done_) throw RunError("router: generate has not been issued yet");
  return generate_response_;
}

void HttpShellRouter::flush_buffer() {
  if (buffer_.empty()) {
    buffer_start_ = -1;
    return;
  }
  if (!degraded_) {
    if (!backend_.prefill_only(plan_.self(), buffer_start_, buffer_)) degraded_ = true;
  }
  buffer_.clear();
  buffer_start_ = -1;
}

void HttpShellRouter::apply(const std::vector<RouteAction>& actions) {
  for (const auto& a : actions) {
    switch (a.kind) {
      case RouteAction::Kind::PrefillOnly: {
        if (degraded_) break;  // increments fold into the terminal generate
        if (min_tokens_per_call_ > 0) {
          if (buffer_.empty()) buffer_start_ = a.start;
          buffer_.insert(buffer_.end(), a.tokens.begin(), a.tokens.end());
          if (static_cast<int>(buffer_.size()) >= min_tokens_per_call_) flush_buffer();
        } else {
          if (!backend_.prefill_only(plan_.self(), a.start, a.tokens)) degraded_ = true;
        }
        break;
      }
      case RouteAction::Kind::Generate: {
        buffer_.clear();  // the full prompt carries any coalesced remainder
        buffer_start_ = -1;
        generate_response_ = backend_.generate(plan_.self(), a.tokens);
        done_ = true;
        break;
      }
      case RouteAction::Kind::Reclaim: {
        flush_buffer();  // restore engine offsets before rolling back
        if (!degraded_) backend_.reclaim(plan_.self(), a.start);
        break;
      }
    }
  }
}

}  // namespace moaserve
