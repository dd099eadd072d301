#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "kgrag/embeddings.hpp"
#include "kgrag/kg_store.hpp"
#include "kgrag/mlp.hpp"
#include "kgrag/structural_features.hpp"

namespace kgrag {

// Structural channel fed to the scorer alongside the text embeddings.
enum class FeatureVariant { Dde, TopicOnehot, None, DdePpr, GraphSage };

FeatureVariant parse_feature_variant(const std::string& name);
std::string to_string(FeatureVariant v);

struct FeatureLayout {
  std::size_t text_dim = 0;
  FeatureVariant variant = FeatureVariant::Dde;
  std::size_t dde_rounds = 2;

  // Per-entity structural width; the triple gets twice this.
  std::size_t entity_structural_dim() const;
  // [z_q | z_h | z_r | z_t | s_h | s_t]
  std::size_t input_dim() const { return 4 * text_dim + 2 * entity_structural_dim(); }
};

// Source of the semantic vectors for entities and relations.
class SemanticLookup {
 public:
  virtual ~SemanticLookup() = default;
  virtual std::span<const float> entity(EntityId e) const = 0;
  virtual std::span<const float> relation(RelationId r) const = 0;
};

// Looks vectors up in an embedding store by surface text.
class StoreLookup final : public SemanticLookup {
 public:
  StoreLookup(const KnowledgeGraph& kg, const EmbeddingStore& store) : kg_(kg), store_(store) {}
  std::span<const float> entity(EntityId e) const override { return store_.at(kg_.entity_text(e)); }
  std::span<const float> relation(RelationId r) const override { return store_.at(kg_.relation_text(r)); }

 private:
  const KnowledgeGraph& kg_;
  const EmbeddingStore& store_;
};

// Entity vectors replaced by locally computed ones (GraphSAGE output);
// relations fall through to `base`.
class OverrideLookup final : public SemanticLookup {
 public:
  OverrideLookup(const SemanticLookup& base, const std::unordered_map<EntityId, std::vector<float>>& entities)
      : base_(base), entities_(entities) {}
  std::span<const float> entity(EntityId e) const override;
  std::span<const float> relation(RelationId r) const override { return base_.relation(r); }

 private:
  const SemanticLookup& base_;
  const std::unordered_map<EntityId, std::vector<float>>& entities_;
};

// Per-entity structural features for a candidate set under `layout`.
EntityEncodings structural_features(std::span<const Triple> candidates, std::span<const EntityId> topics,
                                    const FeatureLayout& layout, const PprOptions& ppr = {});

// One row per candidate, in candidate order. Missing vectors or encodings
// raise MissingKeyError naming the triple.
Eigen::MatrixXd assemble_features(const KnowledgeGraph& kg, std::span<const TripleId> candidates,
                                  std::span<const float> query, const SemanticLookup& semantic,
                                  const EntityEncodings& structure, const FeatureLayout& layout);

struct ScoredTriple {
  TripleId triple;
  double score = 0.0;
};

struct RetrievalResult {
  std::string sample_id;
  std::vector<ScoredTriple> triples;  // descending score, ties by ascending handle
};

// Probabilities for every row. Rows are scored in fixed 256-row blocks shared
// out to up to `workers` threads, so results are identical for any worker count.
std::vector<double> score_triples(const Mlp& params, const Eigen::MatrixXd& features, std::size_t workers = 1);

// Exact top-k by score, ties broken by ascending triple handle.
std::vector<ScoredTriple> select_top_k(std::span<const double> scores, std::span<const TripleId> handles,
                                       std::size_t k);

RetrievalResult score_and_select(const Mlp& params, const std::string& sample_id,
                                 std::span<const TripleId> candidates, const Eigen::MatrixXd& features,
                                 std::size_t k, std::size_t workers = 1);

inline constexpr std::size_t kDefaultTopK = 100;

// One GraphSAGE layer with edge attributes: the neighbor aggregate of e is
// MEAN{[z_e' | z_r] : (e', r, e) in candidates} (zero when empty), and the new
// z_e = sigma([z_e | aggregate]) with sigma an MLP mapping 2*d_e + d_r -> d_e.
struct SageLayerCache {
  std::vector<EntityId> entities;
  std::unordered_map<EntityId, std::size_t> index;
  Eigen::MatrixXd input;  // entities x (2*d_e + d_r), the sigma input
  ForwardTape tape;
};

std::unordered_map<EntityId, std::vector<float>> graphsage_encode(const KnowledgeGraph& kg,
                                                                  std::span<const TripleId> candidates,
                                                                  const SemanticLookup& semantic,
                                                                  std::span<const Mlp> layers);

// Forward pass keeping per-layer caches for training. Returns the final
// entity matrix (rows ordered like caches.front().entities).
Eigen::MatrixXd graphsage_forward(const KnowledgeGraph& kg, std::span<const TripleId> candidates,
                                  const SemanticLookup& semantic, std::span<const Mlp> layers,
                                  std::vector<SageLayerCache>& caches);

// Backpropagates dLoss/d(final entity matrix) through all layers,
// accumulating into `grads` (one per layer).
void graphsage_backward(const KnowledgeGraph& kg, std::span<const TripleId> candidates,
                        std::span<const Mlp> layers, const std::vector<SageLayerCache>& caches,
                        const Eigen::MatrixXd& d_entities, std::span<Mlp> grads);

struct SageSample {
  std::vector<TripleId> candidates;
  std::vector<EntityId> topics;
  std::vector<float> query;
  std::vector<double> labels;  // aligned with candidates
};

struct SageModel {
  std::vector<Mlp> layers;
  Mlp scorer;
};

// Trains the encoder layers and the scorer jointly, one sample per step.
SageModel train_graphsage(const KnowledgeGraph& kg, std::span<const SageSample> samples,
                          const SemanticLookup& semantic, const FeatureLayout& layout, const TrainConfig& config,
                          std::size_t sage_layers, std::vector<double>* epoch_loss = nullptr);

// Scores one sample's candidates with a GraphSAGE model.
std::vector<double> score_graphsage(const KnowledgeGraph& kg, const SageModel& model,
                                    std::span<const TripleId> candidates, std::span<const EntityId> topics,
                                    std::span<const float> query, const SemanticLookup& semantic,
                                    const FeatureLayout& layout, std::size_t workers = 1);

// Retrieval output: JSON Lines {"id", "triples": [[h, r, t, score], ...]}.
std::string format_retrieval(const KnowledgeGraph& kg, std::span<const RetrievalResult> results);
void write_retrieval(const std::filesystem::path& path, const KnowledgeGraph& kg,
                     std::span<const RetrievalResult> results);

struct RetrievedRecord {
  std::string id;
  std::vector<TextTriple> triples;
  std::vector<double> scores;
};
std::vector<RetrievedRecord> read_retrieval(const std::filesystem::path& path);

}  // namespace kgrag
