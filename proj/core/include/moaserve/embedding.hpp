#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>

#include <Eigen/Core>

#include "moaserve/prompt.hpp"

namespace moaserve {

struct ProviderSpec {
  enum class Kind { DeterministicMock, FileBacked, Remote };

  Kind kind = Kind::DeterministicMock;
  int hidden = 64;          // embedding width h
  std::uint64_t seed = 0;   // mock only

  std::string path;         // file-backed store

  std::string endpoint;     // remote base URL, e.g. http://host:port
  std::string model;        // remote model name
  std::string api_key_env = "EMBEDDING_API_KEY";
  int max_in_flight = 4;    // remote concurrency cap
  int timeout_s = 30;

  bool memoize = false;     // cache per token-sequence within the process

  void validate() const;
};

std::string to_string(ProviderSpec::Kind kind);
ProviderSpec::Kind provider_kind_from_string(const std::string& s);

// Produces one embedding row per token: an n x h matrix for n tokens.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;

  virtual Eigen::MatrixXd embed(const TokenSeq& tokens) = 0;
  virtual int hidden_size() const = 0;
};

std::unique_ptr<EmbeddingProvider> make_provider(const ProviderSpec& spec);

// In-memory provider over explicit records keyed by embedding_key(); used by
// tests and by offline evaluation when embeddings ship with the input.
std::unique_ptr<EmbeddingProvider> make_map_provider(
    std::map<std::string, Eigen::MatrixXd> records, int hidden);

// Store key for a token sequence: token ids joined with ','.
std::string embedding_key(const TokenSeq& tokens);

// File-backed store, binary layout (little-endian):
//   magic "MOAEMB1\n" | u32 hidden | u32 record count | records...
//   record: u32 key length | key bytes | u32 rows | u32 cols | rows*cols f64
// A ".json" path instead uses {"hidden": h, "records": {key: [[row...]...]}}.
void write_embedding_store(const std::string& path,
                           const std::map<std::string, Eigen::MatrixXd>& records, int hidden);
std::map<std::string, Eigen::MatrixXd> read_embedding_store(const std::string& path, int* hidden);

}  // namespace moaserve
