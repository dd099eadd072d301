#include "kgrag/evalkit.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "kgrag/error.hpp"
#include "text_util.hpp"

namespace kgrag {

std::optional<double> triple_recall(std::span<const Triple> retrieved, std::span<const Triple> gold) {
  std::set<Triple> g(gold.begin(), gold.end());
  if (g.empty()) return std::nullopt;
  std::set<Triple> r(retrieved.begin(), retrieved.end());
  std::size_t hit = 0;
  for (const Triple& t : g) hit += r.contains(t);
  return static_cast<double>(hit) / static_cast<double>(g.size());
}

std::optional<double> answer_entity_recall(std::span<const Triple> retrieved, std::span<const EntityId> answers) {
  std::set<EntityId> a(answers.begin(), answers.end());
  if (a.empty()) return std::nullopt;
  std::unordered_set<EntityId> seen;
  for (const Triple& t : retrieved) {
    seen.insert(t.head);
    seen.insert(t.tail);
  }
  std::size_t hit = 0;
  for (EntityId e : a) hit += seen.contains(e);
  return static_cast<double>(hit) / static_cast<double>(a.size());
}

std::string normalize_answer(std::string_view answer) {
  std::string_view s = detail::trim(answer);
  if (!s.empty() && s.back() == ')') {
    std::size_t open = s.rfind('(');
    if (open != std::string_view::npos && open > 0) s = detail::trim(s.substr(0, open));
  }
  return detail::to_lower(s);
}

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::Correct: return "correct";
    case Verdict::WrongRetrieved: return "wrong_retrieved";
    case Verdict::WrongNotRetrieved: return "wrong_not_retrieved";
  }
  return "correct";
}

SampleJudgment judge_sample(std::string sample_id, const ReasonerOutput& output, std::vector<std::string> gold,
                            bool gold_in_kg, std::span<const TextTriple> retrieved) {
  SampleJudgment j;
  j.sample_id = std::move(sample_id);
  j.predicted = output.answers;
  j.gold = std::move(gold);
  j.gold_in_kg = gold_in_kg;
  j.refusal = output.refusal;
  j.raw_response = output.raw_text;

  std::unordered_set<std::string> gold_norm;
  for (const std::string& g : j.gold) gold_norm.insert(normalize_answer(g));
  std::unordered_set<std::string> entity_norm;
  for (const TextTriple& t : retrieved) {
    entity_norm.insert(normalize_answer(t.head));
    entity_norm.insert(normalize_answer(t.tail));
  }
  for (const std::string& a : j.predicted) {
    std::string n = normalize_answer(a);
    if (gold_norm.contains(n))
      j.verdicts.push_back(Verdict::Correct);
    else if (entity_norm.contains(n))
      j.verdicts.push_back(Verdict::WrongRetrieved);
    else
      j.verdicts.push_back(Verdict::WrongNotRetrieved);
  }
  return j;
}

namespace {

struct SampleCounts {
  std::size_t predicted = 0;
  std::size_t correct = 0;       // predictions matching some gold
  std::size_t gold = 0;
  std::size_t gold_matched = 0;  // distinct gold answers matched
};

SampleCounts count(const SampleJudgment& j) {
  SampleCounts c;
  std::vector<std::string> gold;
  for (const std::string& g : j.gold) {
    std::string n = normalize_answer(g);
    if (std::find(gold.begin(), gold.end(), n) == gold.end()) gold.push_back(std::move(n));
  }
  c.gold = gold.size();
  c.predicted = j.predicted.size();
  std::vector<bool> matched(gold.size(), false);
  for (const std::string& p : j.predicted) {
    std::string n = normalize_answer(p);
    auto it = std::find(gold.begin(), gold.end(), n);
    if (it == gold.end()) continue;
    ++c.correct;
    matched[static_cast<std::size_t>(it - gold.begin())] = true;
  }
  c.gold_matched = static_cast<std::size_t>(std::count(matched.begin(), matched.end(), true));
  return c;
}

double f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

F1HitMetrics f1_hit_metrics(std::span<const SampleJudgment> judgments) {
  if (judgments.empty()) throw ConfigError("no judgments to evaluate");
  F1HitMetrics m;
  double macro = 0.0;
  std::size_t tp = 0, pred = 0, gold = 0, gold_matched = 0, hits = 0, hits1 = 0;
  for (const SampleJudgment& j : judgments) {
    SampleCounts c = count(j);
    if (c.gold > 0) {
      double p = c.predicted ? static_cast<double>(c.correct) / static_cast<double>(c.predicted) : 0.0;
      double r = static_cast<double>(c.gold_matched) / static_cast<double>(c.gold);
      macro += f1(p, r);
      ++m.f1_samples;
      tp += c.correct;
      pred += c.predicted;
      gold += c.gold;
      gold_matched += c.gold_matched;
    }
    std::string raw = detail::to_lower(j.raw_response);
    bool hit = false;
    for (const std::string& g : j.gold) {
      std::string n = normalize_answer(g);
      if (!n.empty() && raw.find(n) != std::string::npos) {
        hit = true;
        break;
      }
    }
    hits += hit;
    if (!j.predicted.empty()) {
      std::string first = normalize_answer(j.predicted.front());
      hits1 += std::any_of(j.gold.begin(), j.gold.end(),
                           [&](const std::string& g) { return normalize_answer(g) == first; });
    }
  }
  const auto n = static_cast<double>(judgments.size());
  m.macro_f1 = m.f1_samples ? macro / static_cast<double>(m.f1_samples) : 0.0;
  double micro_p = pred ? static_cast<double>(tp) / static_cast<double>(pred) : 0.0;
  double micro_r = gold ? static_cast<double>(gold_matched) / static_cast<double>(gold) : 0.0;
  m.micro_f1 = f1(micro_p, micro_r);
  m.hit = static_cast<double>(hits) / n;
  m.hit_at_1 = static_cast<double>(hits1) / n;
  return m;
}

double sample_hallucination_score(const SampleJudgment& j) {
  if (j.verdicts.size() != j.predicted.size())
    throw ShapeError("sample " + j.sample_id + " has " + std::to_string(j.verdicts.size()) + " verdicts for " +
                     std::to_string(j.predicted.size()) + " answers");
  const double a = static_cast<double>(std::max<std::size_t>(1, j.predicted.size()));
  if (j.refusal || j.predicted.empty()) return j.gold_in_kg ? 0.0 : 1.0;
  double s = 0.0;
  for (Verdict v : j.verdicts) {
    if (j.gold_in_kg)
      s += v == Verdict::Correct ? 1.0 : -1.0;
    else
      s += v == Verdict::WrongNotRetrieved ? -1.5 : -1.0;
  }
  return s / a;
}

double score_h(std::span<const SampleJudgment> judgments) {
  if (judgments.empty()) throw ConfigError("no judgments to evaluate");
  double raw = 0.0;
  for (const SampleJudgment& j : judgments) raw += sample_hallucination_score(j);
  raw /= static_cast<double>(judgments.size());
  return (raw + 1.5) / 2.5 * 100.0;
}

MetricsReport evaluate(std::span<const SampleJudgment> judgments) {
  MetricsReport r;
  r.samples = judgments.size();
  F1HitMetrics m = f1_hit_metrics(judgments);
  r.macro_f1 = m.macro_f1;
  r.micro_f1 = m.micro_f1;
  r.hit = m.hit;
  r.hit_at_1 = m.hit_at_1;
  r.f1_samples = m.f1_samples;
  r.score_h = score_h(judgments);
  double tr = 0.0, ar = 0.0;
  std::size_t tn = 0, an = 0;
  for (const SampleJudgment& j : judgments) {
    r.refusals += j.refusal;
    if (j.triple_recall) tr += *j.triple_recall, ++tn;
    if (j.answer_recall) ar += *j.answer_recall, ++an;
  }
  if (tn) r.triple_recall = tr / static_cast<double>(tn);
  if (an) r.answer_recall = ar / static_cast<double>(an);
  return r;
}

Bucketing parse_bucketing(std::string_view key) {
  if (key == "hops") return Bucketing::HopCount;
  if (key == "topics") return Bucketing::TopicCount;
  throw ConfigError("unknown breakdown key \"" + std::string(key) + "\" (expected hops or topics)");
}

std::string bucket_label(const SampleJudgment& j, Bucketing by) {
  if (by == Bucketing::HopCount) {
    if (j.hops == 0) return "unknown";
    return j.hops >= 3 ? ">=3" : std::to_string(j.hops);
  }
  if (j.topic_count == 0) return "unknown";
  return j.topic_count >= 2 ? ">=2" : "1";
}

std::map<std::string, MetricsReport> breakdown(std::span<const SampleJudgment> judgments, Bucketing by) {
  std::map<std::string, std::vector<SampleJudgment>> groups;
  for (const SampleJudgment& j : judgments) groups[bucket_label(j, by)].push_back(j);
  std::map<std::string, MetricsReport> out;
  for (const auto& [label, group] : groups) out.emplace(label, evaluate(group));
  return out;
}

FullReport full_report(std::span<const SampleJudgment> judgments) {
  return {evaluate(judgments), breakdown(judgments, Bucketing::HopCount), breakdown(judgments, Bucketing::TopicCount)};
}

namespace {

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j = {{"samples", r.samples},   {"macro_f1", r.macro_f1}, {"micro_f1", r.micro_f1},
                      {"hit", r.hit},           {"hit_at_1", r.hit_at_1}, {"score_h", r.score_h},
                      {"f1_samples", r.f1_samples}, {"refusals", r.refusals}};
  j["triple_recall"] = r.triple_recall ? nlohmann::json(*r.triple_recall) : nlohmann::json(nullptr);
  j["answer_recall"] = r.answer_recall ? nlohmann::json(*r.answer_recall) : nlohmann::json(nullptr);
  return j;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : "-"; }

}  // namespace

std::string report_json(const FullReport& report) {
  nlohmann::json j;
  j["overall"] = to_json(report.overall);
  for (const auto& [k, v] : report.by_hops) j["by_hops"][k] = to_json(v);
  for (const auto& [k, v] : report.by_topics) j["by_topics"][k] = to_json(v);
  return j.dump(2) + "\n";
}

std::string report_table(const FullReport& report) {
  std::vector<std::pair<std::string, const MetricsReport*>> rows = {{"overall", &report.overall}};
  for (const auto& [k, v] : report.by_hops) rows.emplace_back("hops " + k, &v);
  for (const auto& [k, v] : report.by_topics) rows.emplace_back("topics " + k, &v);
  char line[256];
  std::string out;
  std::snprintf(line, sizeof line, "%-14s %7s %9s %9s %7s %7s %8s %9s %9s\n", "bucket", "samples", "macro_f1",
                "micro_f1", "hit", "hit@1", "score_h", "t_recall", "a_recall");
  out += line;
  for (const auto& [name, r] : rows) {
    std::snprintf(line, sizeof line, "%-14s %7zu %9s %9s %7s %7s %8.2f %9s %9s\n", name.c_str(), r->samples,
                  fmt(r->macro_f1).c_str(), fmt(r->micro_f1).c_str(), fmt(r->hit).c_str(), fmt(r->hit_at_1).c_str(),
                  r->score_h, fmt(r->triple_recall).c_str(), fmt(r->answer_recall).c_str());
    out += line;
  }
  return out;
}

std::string judgments_jsonl(std::span<const SampleJudgment> judgments) {
  std::string out;
  for (const SampleJudgment& j : judgments) {
    nlohmann::json verdicts = nlohmann::json::array();
    for (Verdict v : j.verdicts) verdicts.push_back(to_string(v));
    nlohmann::json rec = {{"id", j.sample_id},       {"predicted", j.predicted}, {"gold", j.gold},
                          {"gold_in_kg", j.gold_in_kg}, {"verdicts", verdicts},  {"refusal", j.refusal},
                          {"hops", j.hops},           {"topic_count", j.topic_count}};
    out += rec.dump() + "\n";
  }
  return out;
}

}  // namespace kgrag
