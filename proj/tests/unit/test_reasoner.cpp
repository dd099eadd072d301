#include <atomic>
#include <set>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "kgrag/error.hpp"
#include "kgrag/reasoner.hpp"
#include "testing.hpp"

// After Eigen: resolv.h, pulled in by httplib, defines _res.
#include <httplib.h>

using namespace kgrag;
using json = nlohmann::json;

namespace {

std::string golden(const std::string& name) {
  return kgrag::testing::read_text(std::filesystem::path(KGRAG_TEST_DATA_DIR) / "golden" / name);
}

LlmOptions fast() {
  LlmOptions o;
  o.backoff = std::chrono::milliseconds(1);
  o.timeout = std::chrono::milliseconds(5000);
  return o;
}

std::string completion(const std::string& text) {
  return json{{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", text}}}}})}}.dump();
}

const std::vector<TextTriple> kExample = {{"e_a", "r_ab", "e_b"}, {"e_c", "r_cd", "e_d"}};

}  // namespace

TEST(Prompts, MatchGoldenFiles) {
  std::vector<TextTriple> t = kExample;
  PromptBundle b = build_qa_prompt("what is the r_cd of e_c?", t);
  ASSERT_EQ(b.messages.size(), 4u);
  EXPECT_EQ(b.messages[0].role, "system");
  EXPECT_EQ(b.messages[0].content, golden("qa_system.txt"));
  EXPECT_EQ(b.messages[1].role, "user");
  EXPECT_EQ(b.messages[1].content, golden("icl_user.txt"));
  EXPECT_EQ(b.messages[2].role, "assistant");
  EXPECT_EQ(b.messages[2].content, golden("icl_assistant.txt"));
  EXPECT_EQ(b.messages[3].role, "user");
  EXPECT_EQ(b.messages[3].content, golden("qa_user_example.txt"));

  PromptBundle lab = build_labeling_prompt("what is the r_cd of e_c?", t);
  ASSERT_EQ(lab.messages.size(), 2u);
  EXPECT_EQ(lab.messages[0].content, golden("labeling_system.txt"));
  EXPECT_EQ(lab.messages[1].content, golden("qa_user_example.txt"));
}

TEST(Prompts, SingleTripleAndEmptyContext) {
  std::vector<TextTriple> one = {{"A", "r", "B"}};
  PromptBundle b = build_qa_prompt("q?", one, {false, false});
  ASSERT_EQ(b.messages.size(), 2u);
  EXPECT_EQ(b.messages[1].content, "Triplets:\n(A,r,B)\n\nQuestion:\nq?");
  EXPECT_THROW(build_qa_prompt("q?", {}), ConfigError);
  PromptBundle empty = build_qa_prompt("q?", {}, {true, true});
  EXPECT_EQ(empty.messages.back().content, "Triplets:\n\nQuestion:\nq?");
}

TEST(Prompts, DistinctInputsGiveDistinctPrompts) {
  std::vector<TextTriple> a = kExample, b = {kExample[1], kExample[0]};
  std::set<std::string> seen;
  seen.insert(build_qa_prompt("q1", a).messages.back().content);
  seen.insert(build_qa_prompt("q2", a).messages.back().content);
  seen.insert(build_qa_prompt("q1", b).messages.back().content);
  EXPECT_EQ(seen.size(), 3u);
}

TEST(ParseAnswers, IclAnswer) {
  ReasonerOutput out = parse_answers(golden("icl_assistant.txt"));
  EXPECT_FALSE(out.refusal);
  EXPECT_EQ(out.answers,
            (std::vector<std::string>{"2014 (2014 World Series)", "2012 (2012 World Series)", "2010 (2010 World Series)"}));
  EXPECT_EQ(out.explanation.rfind("To find the year", 0), 0u);
}

TEST(ParseAnswers, RefusalsAndMissingLines) {
  EXPECT_TRUE(parse_answers("ans: not available").refusal);
  EXPECT_TRUE(parse_answers("ans: Not Available.").answers.empty());
  EXPECT_TRUE(parse_answers("I cannot tell from these triplets.").refusal);
  EXPECT_TRUE(parse_answers("").refusal);
  EXPECT_TRUE(parse_answers("ans:   ").refusal);
}

TEST(ParseAnswers, PrefixCaseAndDedup) {
  ReasonerOutput out = parse_answers("ANS: Paris\n  Ans: Lyon\nans: Paris\nanswer: Nice");
  EXPECT_EQ(out.answers, (std::vector<std::string>{"Paris", "Lyon"}));
  EXPECT_EQ(out.explanation, "answer: Nice");
}

TEST(ParseAnswers, RenderRoundTrip) {
  std::vector<std::string> a = {"Paris", "2012 (2012 World Series)", "x: y"};
  std::string text = render_answers(a);
  EXPECT_EQ(parse_answers(text).answers, a);
  EXPECT_EQ(render_answers(parse_answers(text).answers), text);
}

TEST(ParseEvidence, Lines) {
  auto ev = parse_evidence("Here:\nevidence: (A, r, B)\nEvidence: (C,s.t,D)\nevidence: broken");
  ASSERT_EQ(ev.size(), 2u);
  EXPECT_EQ(ev[0], (TextTriple{"A", "r", "B"}));
  EXPECT_EQ(ev[1], (TextTriple{"C", "s.t", "D"}));
  EXPECT_TRUE(parse_evidence("nothing relevant").empty());
}

TEST(ChatRequest, DeterministicDecoding) {
  std::vector<TextTriple> t = kExample;
  json body = json::parse(chat_request_body(build_qa_prompt("q", t), "m1"));
  EXPECT_EQ(body["model"], "m1");
  EXPECT_EQ(body["temperature"], 0);
  EXPECT_EQ(body["seed"], 0);
  EXPECT_EQ(body["messages"].size(), 4u);
  EXPECT_EQ(body["messages"][3]["role"], "user");
}

TEST(MockLlm, EchoesLastUserMessage) {
  kgrag::testing::MockServer server("/v1/chat/completions", [](const httplib::Request& req, httplib::Response& res) {
    json body = json::parse(req.body);
    res.set_content(completion(body["messages"].back()["content"].get<std::string>()), "application/json");
  });
  std::vector<TextTriple> t = kExample;
  LlmReply r = call_llm(server.endpoint(), build_qa_prompt("q", t), fast());
  EXPECT_EQ(r.text, "Triplets:\n(e_a,r_ab,e_b)\n(e_c,r_cd,e_d)\n\nQuestion:\nq");
  EXPECT_EQ(r.attempts, 1);
}

TEST(MockLlm, RetriesThenSucceeds) {
  std::atomic<int> calls{0};
  kgrag::testing::MockServer server("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    if (++calls < 3) {
      res.status = 503;
      return;
    }
    res.set_content(completion("ans: x"), "application/json");
  });
  std::vector<TextTriple> t = kExample;
  LlmReply r = call_llm(server.endpoint(), build_qa_prompt("q", t), fast());
  EXPECT_EQ(r.attempts, 3);
  EXPECT_EQ(r.text, "ans: x");
}

TEST(MockLlm, ClientErrorAndMalformedReply) {
  kgrag::testing::MockServer bad("/v1/chat/completions", [](const httplib::Request&, httplib::Response& res) {
    res.status = 401;
  });
  std::vector<TextTriple> t = kExample;
  try {
    call_llm(bad.endpoint(), build_qa_prompt("q", t), fast());
    FAIL();
  } catch (const ServiceError& e) {
    EXPECT_EQ(e.status(), 401);
    EXPECT_EQ(e.attempts(), 1);
  }
  kgrag::testing::MockServer junk("/v1/chat/completions", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("{\"choices\":[]}", "application/json");
  });
  EXPECT_THROW(call_llm(junk.endpoint(), build_qa_prompt("q", t), fast()), ServiceError);
}

TEST(MockLlm, BatchPreservesOrder) {
  kgrag::testing::MockServer server("/v1/chat/completions", [](const httplib::Request& req, httplib::Response& res) {
    json body = json::parse(req.body);
    std::string last = body["messages"].back()["content"];
    res.set_content(completion("ans: " + last.substr(last.rfind('\n') + 1)), "application/json");
  });
  std::vector<PromptBundle> bundles;
  std::vector<TextTriple> t = kExample;
  for (int i = 0; i < 20; ++i) bundles.push_back(build_qa_prompt("q" + std::to_string(i), t, {false, false}));
  for (std::size_t par : {1u, 4u}) {
    auto replies = call_llm_batch(server.endpoint(), bundles, fast(), par);
    ASSERT_EQ(replies.size(), 20u);
    for (int i = 0; i < 20; ++i) EXPECT_EQ(replies[i].text, "ans: q" + std::to_string(i));
  }
}
