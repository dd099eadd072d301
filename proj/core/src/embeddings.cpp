#include "kgrag/embeddings.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <future>

#include <nlohmann/json.hpp>

#include "http_client.hpp"
#include "kgrag/error.hpp"
#include "text_util.hpp"

namespace kgrag {

void EmbeddingStore::add(std::string key, std::span<const float> vec) {
  if (vec.size() != dim_)
    throw ShapeError("embedding for \"" + key + "\" has dim " + std::to_string(vec.size()) +
                     ", store dim is " + std::to_string(dim_));
  if (key.size() > 0xFFFF) throw Error("embedding key longer than 65535 bytes");
  auto [it, inserted] = index_.try_emplace(key, ids_.size());
  if (!inserted) throw Error("duplicate embedding key \"" + key + "\"");
  ids_.push_back(std::move(key));
  matrix_.insert(matrix_.end(), vec.begin(), vec.end());
}

std::optional<std::span<const float>> EmbeddingStore::find(std::string_view key) const {
  auto it = index_.find(std::string(key));
  if (it == index_.end()) return std::nullopt;
  return row(it->second);
}

std::span<const float> EmbeddingStore::at(std::string_view key) const {
  auto v = find(key);
  if (!v) throw MissingKeyError("no embedding for \"" + std::string(key) + "\"");
  return *v;
}

namespace {

constexpr char kStoreMagic[4] = {'E', 'M', 'B', 'S'};
constexpr std::uint8_t kStoreVersion = 1;

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  ByteReader(std::string_view bytes, const std::string& source) : bytes_(bytes), source_(source) {}

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw ParseError(source_, 0, std::string("truncated file while reading ") + what);
    std::string_view out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  template <typename T>
  T le(const char* what) {
    std::string_view b = take(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return static_cast<T>(v);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
  const std::string& source_;
};

}  // namespace

std::string serialize_store(const EmbeddingStore& store) {
  std::string out(kStoreMagic, 4);
  out.push_back(static_cast<char>(kStoreVersion));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.dim()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const std::string& id : store.ids()) {
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(id.size()));
    out += id;
  }
  out.reserve(out.size() + store.matrix().size() * 4);
  for (float f : store.matrix()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

EmbeddingStore deserialize_store(std::string_view bytes, const std::string& source) {
  ByteReader in(bytes, source);
  if (in.take(4, "magic") != std::string_view(kStoreMagic, 4))
    throw ParseError(source, 0, "bad magic, not an EMBS embedding store");
  auto version = in.le<std::uint8_t>("version");
  if (version != kStoreVersion)
    throw ParseError(source, 0, "unsupported store version " + std::to_string(version));
  auto dim = in.le<std::uint32_t>("dim");
  auto count = in.le<std::uint32_t>("count");
  std::vector<std::string> keys;
  keys.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto len = in.le<std::uint16_t>("key length");
    keys.emplace_back(in.take(len, "key"));
  }
  EmbeddingStore store(dim);
  std::vector<float> row(dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    for (std::uint32_t j = 0; j < dim; ++j) row[j] = std::bit_cast<float>(in.le<std::uint32_t>("matrix"));
    store.add(std::move(keys[i]), row);
  }
  if (!in.done()) throw ParseError(source, 0, "trailing bytes after matrix");
  return store;
}

void save_store(const EmbeddingStore& store, const std::filesystem::path& path) {
  detail::write_file_atomic(path, serialize_store(store));
}

EmbeddingStore load_store(const std::filesystem::path& path) {
  return deserialize_store(detail::read_file(path), path.string());
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : text) {
    unsigned char u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || u >= 0x80) {
      current.push_back(static_cast<char>(std::tolower(u)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

Vector HashEncoder::embed_one(std::string_view text) const {
  std::vector<std::string> tokens = tokenize(text);
  if (tokens.empty()) tokens.emplace_back(text);
  std::vector<double> acc(dim_, 0.0);
  for (const std::string& tok : tokens) {
    std::uint64_t state = detail::fnv1a64(tok) ^ (seed_ * 0xD1B54A32D192ED03ull);
    for (std::size_t i = 0; i < dim_; ++i) {
      // Uniform in [-1, 1).
      double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
      acc[i] += 2.0 * u - 1.0;
    }
  }
  double norm = 0.0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  Vector out(dim_);
  for (std::size_t i = 0; i < dim_; ++i) out[i] = static_cast<float>(norm > 0 ? acc[i] / norm : 0.0);
  return out;
}

std::vector<Vector> HashEncoder::embed(std::span<const std::string> texts) {
  std::vector<Vector> out;
  out.reserve(texts.size());
  for (const std::string& t : texts) out.push_back(embed_one(t));
  return out;
}

HttpEncoder::HttpEncoder(std::string endpoint, HttpEncoderOptions options)
    : endpoint_(std::move(endpoint)), options_(options) {
  if (options_.batch_size == 0) throw ConfigError("encoder batch size must be positive");
  if (options_.parallelism == 0) options_.parallelism = 1;
}

std::vector<Vector> HttpEncoder::embed_batch(std::span<const std::string> texts) {
  nlohmann::json body = {{"texts", std::vector<std::string>(texts.begin(), texts.end())}};
  detail::RetryPolicy policy{options_.max_attempts, options_.backoff, options_.timeout};
  detail::HttpReply reply;
  try {
    reply = detail::post_json(endpoint_, "/embed", body.dump(), policy);
    requests_ += static_cast<std::size_t>(reply.attempts);
  } catch (const ServiceError& e) {
    requests_ += static_cast<std::size_t>(e.attempts());
    throw;
  }
  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(reply.body);
  } catch (const nlohmann::json::parse_error& e) {
    throw ServiceError(std::string("encoder returned invalid JSON: ") + e.what(), 200, reply.attempts, false);
  }
  if (!parsed.contains("embeddings") || !parsed["embeddings"].is_array() ||
      parsed["embeddings"].size() != texts.size())
    throw ServiceError("encoder response lacks one embedding per input text", 200, reply.attempts, false);
  std::vector<Vector> out;
  out.reserve(texts.size());
  for (const auto& v : parsed["embeddings"]) out.push_back(v.get<Vector>());
  return out;
}

std::vector<Vector> HttpEncoder::embed(std::span<const std::string> texts) {
  const std::size_t batch = options_.batch_size;
  const std::size_t batches = (texts.size() + batch - 1) / batch;
  std::vector<std::vector<Vector>> results(batches);
  for (std::size_t first = 0; first < batches; first += options_.parallelism) {
    std::size_t last = std::min(batches, first + options_.parallelism);
    if (last - first == 1) {
      results[first] = embed_batch(texts.subspan(first * batch, std::min(batch, texts.size() - first * batch)));
      continue;
    }
    std::vector<std::future<std::vector<Vector>>> inflight;
    for (std::size_t b = first; b < last; ++b) {
      auto slice = texts.subspan(b * batch, std::min(batch, texts.size() - b * batch));
      inflight.push_back(std::async(std::launch::async, [this, slice] { return embed_batch(slice); }));
    }
    for (std::size_t b = first; b < last; ++b) results[b] = inflight[b - first].get();
  }

  std::vector<Vector> out;
  out.reserve(texts.size());
  std::optional<std::size_t> dim;
  for (auto& r : results) {
    for (auto& v : r) {
      if (!dim) dim = v.size();
      if (v.size() != *dim)
        throw ShapeError("encoder returned embeddings of inconsistent dimension (" +
                         std::to_string(*dim) + " vs " + std::to_string(v.size()) + ")");
      out.push_back(std::move(v));
    }
  }
  return out;
}

std::vector<Vector> embed_texts(const std::string& endpoint, std::span<const std::string> texts,
                                const HttpEncoderOptions& options) {
  HttpEncoder encoder(endpoint, options);
  return encoder.embed(texts);
}

std::string whole_triple_key(const TextTriple& t) {
  return "(" + t.head + "," + t.relation + "," + t.tail + ")";
}

double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("cosine of vectors with different dimensions");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> cosine_baseline_scores(const EmbeddingStore& store, std::span<const float> query,
                                           const KnowledgeGraph& kg, std::span<const TripleId> candidates,
                                           TripleEmbeddingMode mode) {
  if (query.size() != store.dim()) throw ShapeError("query dimension differs from store dimension");
  std::vector<double> scores;
  scores.reserve(candidates.size());
  Vector mean(store.dim());
  for (TripleId id : candidates) {
    TextTriple t = kg.text_of(id);
    if (mode == TripleEmbeddingMode::WholeTriple) {
      scores.push_back(cosine(query, store.at(whole_triple_key(t))));
      continue;
    }
    auto h = store.at(t.head);
    auto r = store.at(t.relation);
    auto tl = store.at(t.tail);
    for (std::size_t i = 0; i < mean.size(); ++i)
      mean[i] = static_cast<float>((static_cast<double>(h[i]) + r[i] + tl[i]) / 3.0);
    scores.push_back(cosine(query, mean));
  }
  return scores;
}

}  // namespace kgrag
