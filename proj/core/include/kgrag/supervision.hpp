#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kgrag/kg_store.hpp"

namespace kgrag {

// Heuristic surrogate evidence for one sample: every triple on some
// minimum-length undirected path between a topic and an answer entity.
struct WeakLabelSet {
  std::string sample_id;
  std::vector<TripleId> positive_triples;  // sorted, unique
};

// Union over (topic, answer) pairs of all triples on any shortest undirected
// path. When `restrict_to` is given, paths may only use those triples.
std::vector<TripleId> shortest_path_labels(const KnowledgeGraph& kg,
                                           std::span<const EntityId> topics,
                                           std::span<const EntityId> answers,
                                           std::optional<std::span<const TripleId>> restrict_to = std::nullopt);

// JSON Lines: {"id": string, "triples": [[head, relation, tail], ...]}.
struct TripleSetRecord {
  std::string id;
  std::vector<TextTriple> triples;
};

std::vector<TripleSetRecord> read_triple_sets(const std::filesystem::path& path);
std::string format_triple_sets(std::span<const TripleSetRecord> records);
void write_triple_sets(const std::filesystem::path& path, std::span<const TripleSetRecord> records);

struct RelevanceLabels {
  std::map<std::string, std::vector<TripleId>> labels;  // per sample, sorted unique
  std::size_t dropped = 0;                              // triples not resolvable in the KG
};

RelevanceLabels import_relevance_labels(const std::filesystem::path& path, const KnowledgeGraph& kg);

}  // namespace kgrag
