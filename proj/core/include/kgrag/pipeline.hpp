#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kgrag/kg_store.hpp"
#include "kgrag/mlp.hpp"
#include "kgrag/scorer.hpp"
#include "kgrag/synthetic.hpp"

namespace kgrag {

struct PathsConfig {
  std::filesystem::path work_dir = "work";
  std::filesystem::path kg = "data/kg.tsv";
  std::filesystem::path train = "data/train.jsonl";
  std::filesystem::path test = "data/test.jsonl";
  std::filesystem::path relevance_labels;  // optional external triple labels
};

struct RetrieverConfig {
  std::string kind = "mlp";  // mlp | cosine
  FeatureVariant variant = FeatureVariant::Dde;
  std::size_t hops = 2;
  std::size_t dde_rounds = 2;
  std::size_t top_k = kDefaultTopK;
  std::size_t workers = 1;
  std::string triple_embedding = "component_mean";  // component_mean | whole_triple (cosine only)
  std::string labels = "shortest_path";             // shortest_path | relevance
};

struct TrainingConfig {
  TrainConfig mlp;
  std::size_t sage_layers = 1;
};

struct EncoderConfig {
  std::string kind = "hash";  // hash | http
  std::string endpoint;
  std::size_t dim = 64;
  std::uint64_t seed = 0;
  std::size_t batch_size = 128;
  std::size_t parallelism = 1;
  int max_attempts = 3;
  std::int64_t timeout_ms = 30000;
};

struct LlmConfig {
  std::string endpoint;
  std::string model = "gpt-4o-mini";
  std::size_t parallelism = 1;
  int max_attempts = 3;
  std::int64_t backoff_ms = 200;
  std::int64_t timeout_ms = 120000;
  std::size_t context_triples = 100;  // top triples placed in the prompt
  bool include_icl = true;
  std::vector<std::string> refusal_tokens = {"not available", "none", "no answer", "unknown"};
};

struct EvalConfig {
  std::string split = "test";
  std::vector<std::size_t> recall_at = {5, 10, 20, 50, 100};
};

struct PipelineConfig {
  PathsConfig paths;
  RetrieverConfig retriever;
  TrainingConfig training;
  EncoderConfig encoder;
  LlmConfig llm;
  SyntheticSpec synthetic;
  EvalConfig eval;
};

// One JSON document; missing keys keep their defaults and unknown keys are a
// ConfigError. Each override is "dotted.key=value" where value is JSON or,
// failing that, a plain string. Relative paths resolve against `base_dir`.
PipelineConfig parse_config(std::string_view json_text, std::span<const std::string> overrides = {},
                            const std::filesystem::path& base_dir = {});
PipelineConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides = {});
std::string config_json(const PipelineConfig& config);

enum class Stage { Synth, Ingest, Label, ImportLabels, Embed, Train, Retrieve, Reason, Eval };

Stage parse_stage(std::string_view name);
std::string to_string(Stage stage);

struct StageResult {
  std::vector<std::filesystem::path> artifacts;
  std::string summary;
};

// Runs one stage. Missing or stale upstream artifacts raise PrerequisiteError
// naming the stage to run.
StageResult run_stage(Stage stage, const PipelineConfig& config, std::ostream& log);

// Runs synth (only when `with_synth`), then ingest through eval, skipping reason
// when no LLM endpoint is configured.
void run_all(const PipelineConfig& config, std::ostream& log, bool with_synth = false);

// Mean answer-entity recall of the top-k prefix of each retrieved list, for
// every k in `ks`. Samples without answer entities in the KG are skipped.
std::map<std::size_t, double> answer_recall_at(const KnowledgeGraph& kg, std::span<const QuerySample> samples,
                                               const std::filesystem::path& retrieval_file,
                                               std::span<const std::size_t> ks);

}  // namespace kgrag
