#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kgrag {

// Dense 0-based handle, distinct type per domain concept.
template <typename Tag>
struct Handle {
  std::uint32_t value = 0;

  constexpr Handle() = default;
  constexpr explicit Handle(std::uint32_t v) : value(v) {}
  constexpr auto operator<=>(const Handle&) const = default;
};

using EntityId = Handle<struct EntityTag>;
using RelationId = Handle<struct RelationTag>;
using TripleId = Handle<struct TripleTag>;

struct Triple {
  EntityId head;
  RelationId relation;
  EntityId tail;

  constexpr auto operator<=>(const Triple&) const = default;
};

}  // namespace kgrag

template <typename Tag>
struct std::hash<kgrag::Handle<Tag>> {
  std::size_t operator()(const kgrag::Handle<Tag>& h) const noexcept {
    return std::hash<std::uint32_t>{}(h.value);
  }
};

template <>
struct std::hash<kgrag::Triple> {
  std::size_t operator()(const kgrag::Triple& t) const noexcept {
    std::uint64_t x = (static_cast<std::uint64_t>(t.head.value) << 32) | t.tail.value;
    x ^= static_cast<std::uint64_t>(t.relation.value) * 0x9E3779B97F4A7C15ull;
    x ^= x >> 31;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 29;
    return static_cast<std::size_t>(x);
  }
};

namespace kgrag {

// Surface-text form of a triple, used in files and prompts.
struct TextTriple {
  std::string head;
  std::string relation;
  std::string tail;

  auto operator<=>(const TextTriple&) const = default;
};

// One adjacency entry: the relation, the entity on the other end, and the
// triple the entry came from.
struct Edge {
  RelationId relation;
  EntityId neighbor;
  TripleId triple;
};

// Immutable, deduplicated triple store with CSR forward/reverse indexes.
// Handles are assigned in order of first occurrence.
class KnowledgeGraph {
 public:
  class Builder {
   public:
    EntityId intern_entity(std::string_view text);
    RelationId intern_relation(std::string_view text);
    // Returns false if the triple was already present.
    bool add(std::string_view head, std::string_view relation, std::string_view tail);
    bool add(EntityId head, RelationId relation, EntityId tail);
    KnowledgeGraph build() &&;

   private:
    std::vector<std::string> entities_;
    std::vector<std::string> relations_;
    std::unordered_map<std::string, EntityId> entity_index_;
    std::unordered_map<std::string, RelationId> relation_index_;
    std::vector<Triple> triples_;
    std::unordered_map<Triple, TripleId, std::hash<Triple>> triple_index_;
  };

  KnowledgeGraph() = default;

  std::size_t entity_count() const noexcept { return entities_.size(); }
  std::size_t relation_count() const noexcept { return relations_.size(); }
  std::size_t triple_count() const noexcept { return triples_.size(); }

  const std::string& entity_text(EntityId e) const { return entities_.at(e.value); }
  const std::string& relation_text(RelationId r) const { return relations_.at(r.value); }
  const Triple& triple(TripleId t) const { return triples_.at(t.value); }
  std::span<const Triple> triples() const noexcept { return triples_; }

  std::optional<EntityId> find_entity(std::string_view text) const;
  std::optional<RelationId> find_relation(std::string_view text) const;
  std::optional<TripleId> find_triple(const Triple& t) const;
  std::optional<TripleId> find_triple(const TextTriple& t) const;

  std::span<const Edge> out_edges(EntityId e) const;
  std::span<const Edge> in_edges(EntityId e) const;

  TextTriple text_of(const Triple& t) const;
  TextTriple text_of(TripleId t) const { return text_of(triple(t)); }
  std::vector<Triple> materialize(std::span<const TripleId> ids) const;

 private:
  friend class Builder;

  std::vector<std::string> entities_;
  std::vector<std::string> relations_;
  std::unordered_map<std::string, EntityId> entity_index_;
  std::unordered_map<std::string, RelationId> relation_index_;
  std::vector<Triple> triples_;
  std::unordered_map<Triple, TripleId, std::hash<Triple>> triple_index_;

  std::vector<std::uint32_t> out_offsets_;
  std::vector<Edge> out_edges_;
  std::vector<std::uint32_t> in_offsets_;
  std::vector<Edge> in_edges_;
};

// Reads "head<TAB>relation<TAB>tail" lines. Blank lines are skipped.
KnowledgeGraph parse_triples(std::istream& in, const std::string& source = "<stream>");
KnowledgeGraph load_triples(const std::filesystem::path& path);
void save_triples(const KnowledgeGraph& kg, const std::filesystem::path& path);

struct QuerySample {
  std::string id;
  std::string question;
  std::vector<EntityId> topic_entities;   // sorted, unique
  std::vector<std::string> answers;       // verbatim from the dataset
  std::vector<EntityId> answer_entities;  // answers resolvable in the KG; sorted, unique
};

struct DatasetLoad {
  std::vector<QuerySample> samples;
  std::vector<std::string> warnings;
};

DatasetLoad parse_dataset(std::istream& in, const KnowledgeGraph& kg,
                          const std::string& source = "<stream>");
DatasetLoad load_dataset(const std::filesystem::path& path, const KnowledgeGraph& kg);

inline constexpr std::size_t kUnboundedHops = std::numeric_limits<std::size_t>::max();

// Undirected multi-source BFS distances from `sources`. Unreached entities
// hold kUnreachable.
inline constexpr std::uint32_t kUnreachable = std::numeric_limits<std::uint32_t>::max();
std::vector<std::uint32_t> undirected_distances(const KnowledgeGraph& kg,
                                                std::span<const EntityId> sources,
                                                std::size_t max_hops = kUnboundedHops);

// All triples whose endpoints both lie within `hops` undirected steps of some
// topic entity, in ascending handle order.
std::vector<TripleId> extract_candidate_subgraph(const KnowledgeGraph& kg,
                                                 std::span<const EntityId> topics,
                                                 std::size_t hops);

}  // namespace kgrag
