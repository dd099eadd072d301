#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "kgrag/error.hpp"
#include "kgrag/evalkit.hpp"

using namespace kgrag;

namespace {

std::vector<TextTriple> kRetrieved = {{"Paris", "capital_of", "France"}, {"Lyon", "city_in", "France"}};

SampleJudgment judge(const std::vector<std::string>& pred, std::vector<std::string> gold, bool gold_in_kg = true) {
  return judge_sample("s", parse_answers(render_answers(pred)), std::move(gold), gold_in_kg, kRetrieved);
}

SampleJudgment with_verdicts(std::vector<Verdict> v, bool gold_in_kg) {
  SampleJudgment j;
  j.sample_id = "x";
  j.gold_in_kg = gold_in_kg;
  if (gold_in_kg) j.gold = {"g"};
  for (std::size_t i = 0; i < v.size(); ++i) j.predicted.push_back("p" + std::to_string(i));
  j.verdicts = std::move(v);
  j.refusal = j.predicted.empty();
  return j;
}

Triple tr(std::uint32_t h, std::uint32_t t) { return {EntityId{h}, RelationId{0}, EntityId{t}}; }

}  // namespace

TEST(Recall, Examples) {
  std::vector<Triple> gold = {tr(0, 1), tr(1, 2)};
  std::vector<Triple> got = {tr(0, 1), tr(3, 4), tr(0, 1)};
  EXPECT_DOUBLE_EQ(*triple_recall(got, gold), 0.5);
  EXPECT_FALSE(triple_recall(got, {}).has_value());
  std::vector<EntityId> answers = {EntityId{4}, EntityId{9}};
  EXPECT_DOUBLE_EQ(*answer_entity_recall(got, answers), 0.5);
  EXPECT_FALSE(answer_entity_recall(got, {}).has_value());
  EXPECT_DOUBLE_EQ(*triple_recall(gold, gold), 1.0);
}

TEST(Recall, MatchesBruteForce) {
  std::mt19937_64 rng(61);
  for (int round = 0; round < 200; ++round) {
    std::vector<Triple> all;
    for (std::uint32_t h = 0; h < 5; ++h)
      for (std::uint32_t t = 0; t < 5; ++t) all.push_back(tr(h, t));
    std::vector<Triple> got, gold;
    for (const Triple& t : all) {
      if (rng() % 3 == 0) got.push_back(t);
      if (rng() % 4 == 0) gold.push_back(t);
    }
    if (gold.empty()) continue;
    std::size_t hit = 0;
    for (const Triple& g : gold) hit += std::find(got.begin(), got.end(), g) != got.end();
    double r = *triple_recall(got, gold);
    EXPECT_DOUBLE_EQ(r, double(hit) / double(gold.size()));
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, 1.0);
    std::vector<Triple> more = got;
    more.push_back(gold.front());
    EXPECT_GE(*triple_recall(more, gold), r);
  }
}

TEST(NormalizeAnswer, Qualifiers) {
  EXPECT_EQ(normalize_answer("  2014 (2014 World Series) "), "2014");
  EXPECT_EQ(normalize_answer("Paris"), "paris");
  EXPECT_EQ(normalize_answer("(only)"), "(only)");
}

TEST(Judge, Verdicts) {
  SampleJudgment j = judge({"Paris", "Lyon", "Berlin"}, {"paris"});
  EXPECT_EQ(j.verdicts,
            (std::vector<Verdict>{Verdict::Correct, Verdict::WrongRetrieved, Verdict::WrongNotRetrieved}));
  EXPECT_FALSE(j.refusal);
  EXPECT_TRUE(judge({}, {"paris"}).refusal);
}

TEST(F1Hit, Examples) {
  std::vector<SampleJudgment> one = {judge({"a", "b"}, {"a", "c"})};
  auto m = f1_hit_metrics(one);
  EXPECT_DOUBLE_EQ(m.macro_f1, 0.5);
  EXPECT_DOUBLE_EQ(m.micro_f1, 0.5);
  EXPECT_EQ(m.hit, 1.0);
  EXPECT_EQ(m.hit_at_1, 1.0);

  std::vector<SampleJudgment> two = {judge({"b", "a"}, {"a"})};
  m = f1_hit_metrics(two);
  EXPECT_EQ(m.hit, 1.0);
  EXPECT_EQ(m.hit_at_1, 0.0);
  EXPECT_DOUBLE_EQ(m.macro_f1, 2.0 * 0.5 * 1.0 / 1.5);

  // Micro pools counts, macro averages per sample.
  std::vector<SampleJudgment> both = {judge({"a"}, {"a"}), judge({"x", "y", "z"}, {"q"})};
  m = f1_hit_metrics(both);
  EXPECT_DOUBLE_EQ(m.macro_f1, 0.5);
  EXPECT_DOUBLE_EQ(m.micro_f1, 2.0 * 0.25 * 0.5 / 0.75);
  EXPECT_THROW(f1_hit_metrics({}), ConfigError);
}

TEST(F1Hit, EmptyGoldExcludedFromF1) {
  std::vector<SampleJudgment> js = {judge({"a"}, {"a"}), judge({}, {}, false)};
  auto m = f1_hit_metrics(js);
  EXPECT_EQ(m.f1_samples, 1u);
  EXPECT_DOUBLE_EQ(m.macro_f1, 1.0);
  EXPECT_DOUBLE_EQ(m.hit, 0.5);
}

TEST(ScoreH, Examples) {
  std::vector<SampleJudgment> correct = {with_verdicts({Verdict::Correct}, true)};
  EXPECT_DOUBLE_EQ(score_h(correct), 100.0);
  std::vector<SampleJudgment> wrong = {with_verdicts({Verdict::WrongRetrieved}, true)};
  EXPECT_DOUBLE_EQ(score_h(wrong), 20.0);
  std::vector<SampleJudgment> refuse_no_gold = {with_verdicts({}, false)};
  EXPECT_DOUBLE_EQ(score_h(refuse_no_gold), 100.0);
  std::vector<SampleJudgment> refuse_gold = {with_verdicts({}, true)};
  EXPECT_DOUBLE_EQ(score_h(refuse_gold), 60.0);
  std::vector<SampleJudgment> invent = {with_verdicts({Verdict::WrongNotRetrieved}, false)};
  EXPECT_DOUBLE_EQ(score_h(invent), 0.0);
  std::vector<SampleJudgment> mixed = {with_verdicts({Verdict::Correct, Verdict::WrongNotRetrieved}, true)};
  EXPECT_DOUBLE_EQ(sample_hallucination_score(mixed[0]), 0.0);
  SampleJudgment bad = with_verdicts({Verdict::Correct}, true);
  bad.verdicts.clear();
  EXPECT_THROW(sample_hallucination_score(bad), ShapeError);
}

TEST(ScoreH, RangeAndBounds) {
  std::mt19937_64 rng(62);
  for (int round = 0; round < 500; ++round) {
    std::vector<SampleJudgment> js;
    for (int s = 0; s < 5; ++s) {
      std::vector<Verdict> v(rng() % 4);
      for (Verdict& x : v) x = static_cast<Verdict>(rng() % 3);
      js.push_back(with_verdicts(v, rng() % 2));
      double raw = sample_hallucination_score(js.back());
      EXPECT_GE(raw, -1.5);
      EXPECT_LE(raw, 1.0);
    }
    double h = score_h(js);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, 100.0);
    auto m = f1_hit_metrics(js);
    EXPECT_GE(m.hit, m.hit_at_1);
  }
}

TEST(Breakdown, BucketsAndWeights) {
  std::vector<SampleJudgment> js;
  std::mt19937_64 rng(63);
  for (int i = 0; i < 40; ++i) {
    SampleJudgment j = judge({i % 3 ? "a" : "b"}, {"a"});
    j.raw_response = j.predicted.front();
    j.hops = 1 + rng() % 4;
    j.topic_count = 1 + rng() % 2;
    js.push_back(j);
  }
  auto all = evaluate(js);
  for (Bucketing by : {Bucketing::HopCount, Bucketing::TopicCount}) {
    auto parts = breakdown(js, by);
    double macro = 0, h = 0;
    std::size_t n = 0;
    for (const auto& [label, r] : parts) {
      macro += r.macro_f1 * double(r.f1_samples);
      h += r.score_h * double(r.samples);
      n += r.samples;
    }
    EXPECT_EQ(n, js.size());
    EXPECT_NEAR(macro / double(all.f1_samples), all.macro_f1, 1e-12);
    EXPECT_NEAR(h / double(n), all.score_h, 1e-9);
  }
  EXPECT_EQ(breakdown(js, Bucketing::HopCount).count(">=3"), 1u);

  for (auto& j : js) j.hops = 2;
  auto single = breakdown(js, Bucketing::HopCount);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_EQ(single.at("2").macro_f1, all.macro_f1);
  EXPECT_EQ(single.at("2").score_h, all.score_h);

  EXPECT_EQ(parse_bucketing("topics"), Bucketing::TopicCount);
  EXPECT_THROW(parse_bucketing("relations"), ConfigError);
}

TEST(Report, JsonShape) {
  std::vector<SampleJudgment> js = {judge({"a"}, {"a"})};
  js[0].hops = 1;
  js[0].topic_count = 1;
  auto rep = nlohmann::json::parse(report_json(full_report(js)));
  EXPECT_EQ(rep["overall"]["samples"], 1);
  EXPECT_DOUBLE_EQ(rep["overall"]["score_h"].get<double>(), 100.0);
  EXPECT_TRUE(rep["by_hops"].contains("1"));
  EXPECT_TRUE(rep["overall"]["triple_recall"].is_null());
  EXPECT_NE(report_table(full_report(js)).find("overall"), std::string::npos);
}
