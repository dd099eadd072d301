#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kgrag/kg_store.hpp"
#include "kgrag/reasoner.hpp"

namespace kgrag {

// |retrieved ∩ gold| / |gold|; nullopt when gold is empty.
std::optional<double> triple_recall(std::span<const Triple> retrieved, std::span<const Triple> gold);

// Fraction of answer entities that appear as head or tail of a retrieved
// triple; nullopt when there are no answer entities.
std::optional<double> answer_entity_recall(std::span<const Triple> retrieved, std::span<const EntityId> answers);

// Lowercase, trim, drop one trailing "(...)" qualifier.
std::string normalize_answer(std::string_view answer);

enum class Verdict { Correct, WrongRetrieved, WrongNotRetrieved };

std::string to_string(Verdict v);

struct SampleJudgment {
  std::string sample_id;
  std::vector<std::string> predicted;
  std::vector<std::string> gold;
  bool gold_in_kg = true;
  std::vector<Verdict> verdicts;  // one per predicted answer
  bool refusal = false;
  std::string raw_response;
  std::size_t hops = 0;         // topic-to-answer distance, 0 when unknown
  std::size_t topic_count = 0;
  std::optional<double> triple_recall;
  std::optional<double> answer_recall;
};

// Verdicts from answer matching and from whether each answer names an
// entity of the retrieved triples.
SampleJudgment judge_sample(std::string sample_id, const ReasonerOutput& output, std::vector<std::string> gold,
                            bool gold_in_kg, std::span<const TextTriple> retrieved);

struct F1HitMetrics {
  double macro_f1 = 0.0;
  double micro_f1 = 0.0;
  double hit = 0.0;
  double hit_at_1 = 0.0;
  std::size_t f1_samples = 0;  // samples with nonempty gold
};

// Throws ConfigError on an empty judgment list.
F1HitMetrics f1_hit_metrics(std::span<const SampleJudgment> judgments);

// Per-sample raw score s_i / a_i, in [-1.5, 1].
double sample_hallucination_score(const SampleJudgment& j);

// Mean raw score mapped linearly from [-1.5, 1] onto [0, 100].
double score_h(std::span<const SampleJudgment> judgments);

struct MetricsReport {
  std::size_t samples = 0;
  double macro_f1 = 0.0;
  double micro_f1 = 0.0;
  double hit = 0.0;
  double hit_at_1 = 0.0;
  double score_h = 0.0;
  std::size_t f1_samples = 0;
  std::size_t refusals = 0;
  std::optional<double> triple_recall;  // mean over samples that have one
  std::optional<double> answer_recall;
};

MetricsReport evaluate(std::span<const SampleJudgment> judgments);

enum class Bucketing { HopCount, TopicCount };

// "hops" or "topics"; anything else is a ConfigError.
Bucketing parse_bucketing(std::string_view key);
std::string bucket_label(const SampleJudgment& j, Bucketing by);

std::map<std::string, MetricsReport> breakdown(std::span<const SampleJudgment> judgments, Bucketing by);

struct FullReport {
  MetricsReport overall;
  std::map<std::string, MetricsReport> by_hops;
  std::map<std::string, MetricsReport> by_topics;
};

FullReport full_report(std::span<const SampleJudgment> judgments);
std::string report_json(const FullReport& report);
std::string report_table(const FullReport& report);

std::string judgments_jsonl(std::span<const SampleJudgment> judgments);

}  // namespace kgrag
