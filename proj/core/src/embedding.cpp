#include "moaserve/embedding.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <mutex>
#include <semaphore>
#include <sstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "moaserve/errors.hpp"
#include "moaserve/rng.hpp"

namespace moaserve {

std::string to_string(ProviderSpec::Kind kind) {
  switch (kind) {
    case ProviderSpec::Kind::DeterministicMock: return "mock";
    case ProviderSpec::Kind::FileBacked: return "file";
    case ProviderSpec::Kind::Remote: return "remote";
  }
  return "mock";
}

ProviderSpec::Kind provider_kind_from_string(const std::string& s) {
  if (s == "mock") return ProviderSpec::Kind::DeterministicMock;
  if (s == "file") return ProviderSpec::Kind::FileBacked;
  if (s == "remote") return ProviderSpec::Kind::Remote;
  throw ValidationError("provider.kind: expected 'mock', 'file' or 'remote', got '" + s + "'");
}

void ProviderSpec::validate() const {
  if (hidden <= 0) throw ValidationError("provider.hidden: must be > 0");
  if (kind == Kind::FileBacked && path.empty()) {
    throw ValidationError("provider.path: required for the file-backed provider");
  }
  if (kind == Kind::Remote) {
    if (endpoint.empty()) throw ValidationError("provider.endpoint: required for remote provider");
    if (max_in_flight <= 0) throw ValidationError("provider.max_in_flight: must be > 0");
  }
}

std::string embedding_key(const TokenSeq& tokens) {
  std::string key;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) key.push_back(',');
    key += std::to_string(tokens[i]);
  }
  return key;
}

namespace {

class MemoMixin {
 public:
  explicit MemoMixin(bool enabled) : enabled_(enabled) {}

 protected:
  bool lookup(const std::string& key, Eigen::MatrixXd* out) {
    if (!enabled_) return false;
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find(key);
    if (it == cache_.end()) return false;
    *out = it->second;
    return true;
  }

  void store(const std::string& key, const Eigen::MatrixXd& value) {
    if (!enabled_) return;
    std::lock_guard<std::mutex> lock(mu_);
    cache_[key] = value;
  }

 private:
  bool enabled_;
  std::mutex mu_;
  std::map<std::string, Eigen::MatrixXd> cache_;
};

// Hash-derived embeddings: row for (token, position) filled from
// mix(seed, token, position, column) mapped into [-1, 1], then shifted to
// zero mean so every row has nonzero variance structure but no offset.
class MockProvider : public EmbeddingProvider, private MemoMixin {
 public:
  MockProvider(std::uint64_t seed, int hidden, bool memoize)
      : MemoMixin(memoize), seed_(seed), hidden_(hidden) {}

  Eigen::MatrixXd embed(const TokenSeq& tokens) override {
    std::string key = embedding_key(tokens);
    Eigen::MatrixXd m;
    if (lookup(key, &m)) return m;
    m.resize(static_cast<Eigen::Index>(tokens.size()), hidden_);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      std::uint64_t row_seed = hash_combine(
          hash_combine(seed_, static_cast<std::uint64_t>(
                                  static_cast<std::int64_t>(tokens[static_cast<std::size_t>(r)]))),
          static_cast<std::uint64_t>(r));
      double mean = 0.0;
      for (Eigen::Index c = 0; c < hidden_; ++c) {
        double u = unit_from_bits(detail::mix64(
            hash_combine(row_seed, static_cast<std::uint64_t>(c))));
        m(r, c) = 2.0 * u - 1.0;
        mean += m(r, c);
      }
      mean /= static_cast<double>(hidden_);
      for (Eigen::Index c = 0; c < hidden_; ++c) m(r, c) -= mean;
    }
    store(key, m);
    return m;
  }

  int hidden_size() const override { return hidden_; }

 private:
  std::uint64_t seed_;
  int hidden_;
};

class MapProvider : public EmbeddingProvider {
 public:
  MapProvider(std::map<std::string, Eigen::MatrixXd> records, int hidden)
      : records_(std::move(records)), hidden_(hidden) {}

  Eigen::MatrixXd embed(const TokenSeq& tokens) override {
    std::string key = embedding_key(tokens);
    auto it = records_.find(key);
    if (it == records_.end()) {
      throw ProviderError(ProviderError::Kind::BadResponse,
                          "embedding store has no record for token sequence '" + key + "'");
    }
    return it->second;
  }

  int hidden_size() const override { return hidden_; }

 private:
  std::map<std::string, Eigen::MatrixXd> records_;
  int hidden_;
};

class RemoteProvider : public EmbeddingProvider, private MemoMixin {
 public:
  explicit RemoteProvider(const ProviderSpec& spec)
      : MemoMixin(spec.memoize),
        spec_(spec),
        gate_(spec.max_in_flight) {
    if (const char* k = std::getenv(spec.api_key_env.c_str()); k && *k) api_key_ = k;
  }

  Eigen::MatrixXd embed(const TokenSeq& tokens) override {
    std::string key = embedding_key(tokens);
    Eigen::MatrixXd cached;
    if (lookup(key, &cached)) return cached;

    gate_.acquire();
    struct Release {
      std::counting_semaphore<>* s;
      ~Release() { s->release(); }
    } release{&gate_};

    httplib::Client client(spec_.endpoint);
    client.set_connection_timeout(spec_.timeout_s, 0);
    client.set_read_timeout(spec_.timeout_s, 0);

    nlohmann::json body;
    body["model"] = spec_.model;
    body["tokens"] = tokens;
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

    auto res = client.Post("/embed", headers, body.dump(), "application/json");
    if (!res) {
      throw ProviderError(ProviderError::Kind::Transport,
                          "embedding endpoint unreachable: " + spec_.endpoint);
    }
    if (res->status == 401 || res->status == 403) {
      throw ProviderError(ProviderError::Kind::MissingCredentials,
                          "embedding endpoint rejected credentials (set " + spec_.api_key_env +
                              "); status " + std::to_string(res->status));
    }
    if (res->status != 200) {
      throw ProviderError(ProviderError::Kind::BadResponse,
                          "embedding endpoint returned status " + std::to_string(res->status));
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(res->body);
    } catch (const std::exception& e) {
      throw ProviderError(ProviderError::Kind::BadResponse,
                          std::string("embedding response is not JSON: ") + e.what());
    }
    if (!j.contains("embedding") || !j["embedding"].is_array()) {
      throw ProviderError(ProviderError::Kind::BadResponse,
                          "embedding response lacks an 'embedding' array");
    }
    const auto& rows = j["embedding"];
    if (rows.size() != tokens.size()) {
      throw ProviderError(ProviderError::Kind::BadResponse,
                          "embedding response has " + std::to_string(rows.size()) +
                              " rows for " + std::to_string(tokens.size()) + " tokens");
    }
    Eigen::MatrixXd m(static_cast<Eigen::Index>(tokens.size()), spec_.hidden);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (!rows[r].is_array() || rows[r].size() != static_cast<std::size_t>(spec_.hidden)) {
        throw ProviderError(ProviderError::Kind::BadResponse,
                            "embedding row " + std::to_string(r) + " does not have width " +
                                std::to_string(spec_.hidden));
      }
      for (std::size_t c = 0; c < rows[r].size(); ++c) {
        m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c].get<double>();
      }
    }
    store(key, m);
    return m;
  }

  int hidden_size() const override { return spec_.hidden; }

 private:
  ProviderSpec spec_;
  std::string api_key_;
  std::counting_semaphore<> gate_;
};

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::unique_ptr<EmbeddingProvider> make_provider(const ProviderSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case ProviderSpec::Kind::DeterministicMock:
      return std::make_unique<MockProvider>(spec.seed, spec.hidden, spec.memoize);
    case ProviderSpec::Kind::FileBacked: {
      int hidden = spec.hidden;
      auto records = read_embedding_store(spec.path, &hidden);
      return std::make_unique<MapProvider>(std::move(records), hidden);
    }
    case ProviderSpec::Kind::Remote:
      return std::make_unique<RemoteProvider>(spec);
  }
  throw ValidationError("provider: unknown kind");
}

std::unique_ptr<EmbeddingProvider> make_map_provider(
    std::map<std::string, Eigen::MatrixXd> records, int hidden) {
  return std::make_unique<MapProvider>(std::move(records), hidden);
}

void write_embedding_store(const std::string& path,
                           const std::map<std::string, Eigen::MatrixXd>& records, int hidden) {
  if (ends_with(path, ".json")) {
    nlohmann::ordered_json j;
    j["hidden"] = hidden;
    nlohmann::ordered_json recs = nlohmann::ordered_json::object();
    for (const auto& [key, m] : records) {
      nlohmann::ordered_json rows = nlohmann::ordered_json::array();
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
      }
      recs[key] = std::move(rows);
    }
    j["records"] = std::move(recs);
    std::ofstream out(path);
    if (!out) throw RunError("cannot write embedding store: " + path);
    out << j.dump(2) << "\n";
    return;
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw RunError("cannot write embedding store: " + path);
  out.write("MOAEMB1\n", 8);
  auto put_u32 = [&out](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  put_u32(static_cast<std::uint32_t>(hidden));
  put_u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& [key, m] : records) {
    put_u32(static_cast<std::uint32_t>(key.size()));
    out.write(key.data(), static_cast<std::streamsize>(key.size()));
    put_u32(static_cast<std::uint32_t>(m.rows()));
    put_u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        double v = m(r, c);
        out.write(reinterpret_cast<const char*>(&v), sizeof(double));
      }
    }
  }
}

std::map<std::string, Eigen::MatrixXd> read_embedding_store(const std::string& path, int* hidden) {
  std::map<std::string, Eigen::MatrixXd> records;
  if (ends_with(path, ".json")) {
    std::ifstream in(path);
    if (!in) throw RunError("cannot read embedding store: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw ValidationError("embedding store " + path + " is not valid JSON: " + e.what());
    }
    if (hidden) *hidden = j.value("hidden", 0);
    if (!j.contains("records") || !j["records"].is_object()) {
      throw ValidationError("embedding store " + path + " lacks a 'records' object");
    }
    for (const auto& [key, rows] : j["records"].items()) {
      if (!rows.is_array() || rows.empty()) {
        throw ValidationError("embedding store record '" + key + "' must be a non-empty array");
      }
      Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                        static_cast<Eigen::Index>(rows[0].size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (!rows[r].is_array() || rows[r].size() != static_cast<std::size_t>(m.cols())) {
          throw ValidationError("embedding store record '" + key + "' has ragged rows");
        }
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
          m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c].get<double>();
        }
      }
      if (hidden && *hidden == 0) *hidden = static_cast<int>(m.cols());
      records[key] = std::move(m);
    }
    return records;
  }

  std::ifstream in(path, std::ios::binary);
  if (!in) throw RunError("cannot read embedding store: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "MOAEMB1\n", 8) != 0) {
    throw ValidationError("embedding store " + path + " has a bad magic header");
  }
  auto get_u32 = [&in, &path]() {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw ValidationError("embedding store " + path + " is truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  };
  std::uint32_t h = get_u32();
  if (hidden) *hidden = static_cast<int>(h);
  std::uint32_t count = get_u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t klen = get_u32();
    std::string key(klen, '\0');
    in.read(key.data(), klen);
    std::uint32_t rows = get_u32();
    std::uint32_t cols = get_u32();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        double v;
        in.read(reinterpret_cast<char*>(&v), sizeof(double));
        m(r, c) = v;
      }
    }
    if (!in) throw ValidationError("embedding store " + path + " is truncated");
    records[std::move(key)] = std::move(m);
  }
  return records;
}

}  // namespace moaserve
