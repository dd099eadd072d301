#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kgrag/kg_store.hpp"

namespace kgrag {

using Vector = std::vector<float>;

// Row-major float matrix keyed by text. Immutable once shared.
class EmbeddingStore {
 public:
  explicit EmbeddingStore(std::size_t dim = 0) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return ids_.size(); }
  std::span<const std::string> ids() const noexcept { return ids_; }
  std::span<const float> matrix() const noexcept { return matrix_; }

  // Throws ShapeError on dim mismatch, Error on duplicate key.
  void add(std::string key, std::span<const float> vec);

  std::optional<std::span<const float>> find(std::string_view key) const;
  std::span<const float> at(std::string_view key) const;  // MissingKeyError names the key
  std::span<const float> row(std::size_t i) const { return {matrix_.data() + i * dim_, dim_}; }

 private:
  std::size_t dim_;
  std::vector<std::string> ids_;
  std::vector<float> matrix_;
  std::unordered_map<std::string, std::size_t> index_;
};

// "EMBS", version 1, then little-endian u32 dim, u32 count,
// count x (u16 key length + UTF-8 key), count*dim f32 row-major.
void save_store(const EmbeddingStore& store, const std::filesystem::path& path);
EmbeddingStore load_store(const std::filesystem::path& path);
std::string serialize_store(const EmbeddingStore& store);
EmbeddingStore deserialize_store(std::string_view bytes, const std::string& source = "<memory>");

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::vector<Vector> embed(std::span<const std::string> texts) = 0;
};

// Deterministic offline encoder: L2-normalized sum of per-token pseudo-random
// vectors. Tokens are lowercase alphanumeric runs, so texts sharing words
// land close together. A text without tokens hashes as a single token.
class HashEncoder final : public TextEncoder {
 public:
  explicit HashEncoder(std::size_t dim, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {}

  std::size_t dim() const noexcept { return dim_; }
  Vector embed_one(std::string_view text) const;
  std::vector<Vector> embed(std::span<const std::string> texts) override;

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

std::vector<std::string> tokenize(std::string_view text);

struct HttpEncoderOptions {
  std::size_t batch_size = 128;
  std::size_t parallelism = 1;
  int max_attempts = 3;
  std::chrono::milliseconds backoff{100};
  std::chrono::milliseconds timeout{30000};
};

// POST {endpoint}/embed {"texts": [...]} -> {"embeddings": [[...], ...]}.
class HttpEncoder final : public TextEncoder {
 public:
  explicit HttpEncoder(std::string endpoint, HttpEncoderOptions options = {});

  std::vector<Vector> embed(std::span<const std::string> texts) override;
  std::size_t requests_issued() const noexcept { return requests_.load(); }

 private:
  std::vector<Vector> embed_batch(std::span<const std::string> texts);

  std::string endpoint_;
  HttpEncoderOptions options_;
  std::atomic<std::size_t> requests_{0};
};

std::vector<Vector> embed_texts(const std::string& endpoint, std::span<const std::string> texts,
                                const HttpEncoderOptions& options = {});

enum class TripleEmbeddingMode { ComponentMean, WholeTriple };

// Key under which WholeTriple mode looks up a triple's own embedding.
std::string whole_triple_key(const TextTriple& t);

double cosine(std::span<const float> a, std::span<const float> b);

// Structure-free baseline: cosine(z_q, triple vector) per candidate, aligned
// with `candidates`. The triple vector is mean(z_h, z_r, z_t) by default.
std::vector<double> cosine_baseline_scores(const EmbeddingStore& store, std::span<const float> query,
                                           const KnowledgeGraph& kg,
                                           std::span<const TripleId> candidates,
                                           TripleEmbeddingMode mode = TripleEmbeddingMode::ComponentMean);

}  // namespace kgrag
