#pragma once

#include <cstddef>
#include <span>
#include <unordered_map>
#include <vector>

#include "kgrag/kg_store.hpp"

namespace kgrag {

struct DdeConfig {
  std::size_t rounds = 2;  // propagation rounds per direction

  std::size_t width() const noexcept { return 1 + 2 * rounds; }
};

// Fixed-width per-entity feature rows. Layout for DDE:
// [s0 | s1 .. sL (along edges) | r1 .. rL (against edges)].
class EntityEncodings {
 public:
  explicit EntityEncodings(std::size_t width = 0) : width_(width) {}

  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return entities_.size(); }
  std::span<const EntityId> entities() const noexcept { return entities_; }
  bool contains(EntityId e) const { return index_.contains(e); }

  // Throws MissingKeyError naming the entity.
  std::span<const double> at(EntityId e) const;
  std::span<double> row(std::size_t i) { return {data_.data() + i * width_, width_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * width_, width_}; }

  std::size_t add(EntityId e);  // zero row; returns row index (existing index if present)

  // Concatenates `other`'s columns onto every row; both must cover the same entities.
  EntityEncodings concat(const EntityEncodings& other) const;

 private:
  std::size_t width_;
  std::vector<EntityId> entities_;
  std::unordered_map<EntityId, std::size_t> index_;
  std::vector<double> data_;
};

// Directional Distance Encoding over the candidate subgraph. Each triple is
// one term of the neighbor MEAN; an empty neighborhood averages to 0.
EntityEncodings compute_dde(std::span<const Triple> candidates, std::span<const EntityId> topics,
                            const DdeConfig& config);

// [s_head | s_tail]
std::vector<double> triple_encoding(const EntityEncodings& enc, const Triple& t);
void append_triple_encoding(const EntityEncodings& enc, const Triple& t, std::vector<double>& out);

// Topic membership bit only: compute_dde with zero rounds.
EntityEncodings topic_onehot(std::span<const EntityId> entities, std::span<const EntityId> topics);

struct PprOptions {
  double damping = 0.85;
  std::size_t iterations = 1000;
  double tolerance = 1e-12;
};

// Personalized PageRank on the undirected candidate graph, teleporting
// uniformly to the topics. Dangling mass is returned to the topics.
std::unordered_map<EntityId, double> ppr_scores(std::span<const Triple> candidates,
                                                std::span<const EntityId> topics,
                                                const PprOptions& options = {});

}  // namespace kgrag
