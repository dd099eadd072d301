#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kgrag/kg_store.hpp"

namespace kgrag {

struct SyntheticSpec {
  std::size_t entities = 200;
  double mean_out_degree = 2.0;  // edge draws per entity; self-loops and repeated pairs are skipped
  std::vector<std::string> relations = {"capital", "founder", "spouse",  "mentor",   "employer",
                                        "birthplace", "owner", "author", "director", "member"};
  // Relative weight of 1-, 2-, 3-hop questions.
  std::vector<double> hop_mix = {1.0, 1.0, 1.0};
  std::size_t train_questions = 400;
  std::size_t test_questions = 100;
  std::uint64_t seed = 7;
};

struct SyntheticQuestion {
  std::string id;
  std::string question;
  std::string topic;
  std::string answer;
  std::size_t hops = 0;
  std::vector<TextTriple> path;  // planted evidence, topic to answer
};

struct SyntheticData {
  std::vector<TextTriple> triples;
  std::vector<SyntheticQuestion> train;
  std::vector<SyntheticQuestion> test;
};

// Deterministic in the spec. Each question follows a forward relation chain
// from its topic; it is kept only when that chain is the unique shortest
// undirected path and leads to exactly one entity. Throws ConfigError when a
// requested hop count exceeds the graph diameter.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

// Largest-remainder split of `total` over `weights`.
std::vector<std::size_t> allocate_counts(std::size_t total, const std::vector<double>& weights);

// kg.tsv, train.jsonl, test.jsonl under `dir`.
struct SyntheticFiles {
  std::filesystem::path kg;
  std::filesystem::path train;
  std::filesystem::path test;
};
SyntheticFiles write_synthetic(const SyntheticData& data, const std::filesystem::path& dir);

std::string format_dataset(const std::vector<SyntheticQuestion>& questions);

}  // namespace kgrag
