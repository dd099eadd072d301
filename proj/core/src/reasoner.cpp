#include "kgrag/reasoner.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "http_client.hpp"
#include "kgrag/error.hpp"
#include "text_util.hpp"

namespace kgrag {

const std::string_view kQaSystemPrompt =
    "Based on the triples retrieved from a knowledge graph, please answer the question. "
    "Please return formatted answers as a list, each prefixed with \"ans:\".";

const std::string_view kLabelingSystemPrompt =
    "Based on the triplets retrieved from a knowledge graph, please select relevant triplets for answering "
    "the question. Please return formatted triplets as a list, each prefixed with \"evidence:\".";

namespace {

const TextTriple kIclTriples[] = {
    {"Lou Seal", "sports.mascot.team", "San Francisco Giants"},
    {"San Francisco Giants", "sports.sports_team.championships", "2012 World Series"},
    {"San Francisco Giants", "sports.sports_championship_event.champion", "2014 World Series"},
    {"San Francisco Giants", "time.participant.event", "2014 Major League Baseball season"},
    {"San Francisco Giants", "time.participant.event", "2010 World Series"},
    {"San Francisco Giants", "time.participant.event", "2010 Major League Baseball season"},
    {"San Francisco Giants", "sports.sports_team.championships", "2014 World Series"},
    {"San Francisco Giants", "sports.sports_team.team_mascot", "Crazy Crab"},
    {"San Francisco Giants", "sports.sports_team.championships", "2010 World Series"},
    {"San Francisco Giants", "sports.professional_sports_team.owner_s", "Bill Neukom"},
    {"San Francisco Giants", "time.participant.event", "2012 World Series"},
    {"San Francisco", "sports.sports_team_location.teams", "San Francisco Giants"},
    {"San Francisco Giants", "sports.sports_team.arena_stadium", "AT&T Park"},
    {"AT&T Park", "location.location.events", "2012 World Series"},
};

constexpr std::string_view kIclQuestion = "What year did the team with mascot named Lou Seal win the World Series?";

constexpr std::string_view kIclAnswer =
    "To find the year the team with mascot named Lou Seal won the World Series, we need to find the team with "
    "mascot named Lou Seal and then find the year they won the World Series.\n\n"
    "From the triplets, we can see that Lou Seal is the mascot of the San Francisco Giants.\n\n"
    "Now, we need to find the year the San Francisco Giants won the World Series.\n\n"
    "From the triplets, we can see that San Francisco Giants won the 2010 World Series and 2012 World Series "
    "and 2014 World Series.\n\n"
    "So, the team with mascot named Lou Seal (San Francisco Giants) won the World Series in 2010, 2012, and "
    "2014.\n\n"
    "Therefore, the formatted answers are:\n\n"
    "ans: 2014 (2014 World Series)\n"
    "ans: 2012 (2012 World Series)\n"
    "ans: 2010 (2010 World Series)";

}  // namespace

std::string render_triple(const TextTriple& t) { return "(" + t.head + "," + t.relation + "," + t.tail + ")"; }

std::string render_context(std::string_view question, std::span<const TextTriple> triples) {
  std::string out = "Triplets:\n";
  for (const TextTriple& t : triples) {
    out += render_triple(t);
    out += '\n';
  }
  out += "\nQuestion:\n";
  out += question;
  return out;
}

PromptBundle build_qa_prompt(std::string_view question, std::span<const TextTriple> ranked,
                             const QaPromptOptions& options) {
  if (ranked.empty() && !options.empty_context)
    throw ConfigError("QA prompt needs at least one triple unless empty-context mode is set");
  PromptBundle b;
  b.messages.push_back({"system", std::string(kQaSystemPrompt)});
  if (options.include_icl) {
    b.messages.push_back({"user", render_context(kIclQuestion, kIclTriples)});
    b.messages.push_back({"assistant", std::string(kIclAnswer)});
  }
  b.messages.push_back({"user", render_context(question, ranked)});
  return b;
}

PromptBundle build_labeling_prompt(std::string_view question, std::span<const TextTriple> candidates) {
  PromptBundle b;
  b.messages.push_back({"system", std::string(kLabelingSystemPrompt)});
  b.messages.push_back({"user", render_context(question, candidates)});
  return b;
}

std::string normalize_refusal(std::string_view answer) {
  std::string s = detail::to_lower(detail::trim(answer));
  while (!s.empty() && std::ispunct(static_cast<unsigned char>(s.back()))) s.pop_back();
  return std::string(detail::trim(s));
}

ReasonerOutput parse_answers(std::string_view raw, std::span<const std::string> refusal_tokens) {
  ReasonerOutput out;
  out.raw_text = std::string(raw);
  std::vector<std::string> explanation;
  for (std::string_view line : detail::split_lines(raw)) {
    std::string_view t = detail::trim(line);
    if (!detail::starts_with_icase(t, "ans:")) {
      explanation.emplace_back(line);
      continue;
    }
    std::string answer(detail::trim(t.substr(4)));
    if (answer.empty()) continue;
    std::string norm = normalize_refusal(answer);
    if (std::find(refusal_tokens.begin(), refusal_tokens.end(), norm) != refusal_tokens.end()) continue;
    if (std::find(out.answers.begin(), out.answers.end(), answer) == out.answers.end())
      out.answers.push_back(std::move(answer));
  }
  while (!explanation.empty() && detail::trim(explanation.back()).empty()) explanation.pop_back();
  for (std::size_t i = 0; i < explanation.size(); ++i) {
    if (i) out.explanation += '\n';
    out.explanation += explanation[i];
  }
  out.refusal = out.answers.empty();
  return out;
}

std::string render_answers(std::span<const std::string> answers) {
  std::string out;
  for (const std::string& a : answers) out += "ans: " + a + "\n";
  return out;
}

std::vector<TextTriple> parse_evidence(std::string_view raw) {
  std::vector<TextTriple> out;
  for (std::string_view line : detail::split_lines(raw)) {
    std::string_view t = detail::trim(line);
    if (!detail::starts_with_icase(t, "evidence:")) continue;
    t = detail::trim(t.substr(9));
    if (t.size() < 2 || t.front() != '(' || t.back() != ')') continue;
    t = t.substr(1, t.size() - 2);
    std::size_t first = t.find(',');
    std::size_t last = t.rfind(',');
    if (first == std::string_view::npos || first == last) continue;
    out.push_back({std::string(detail::trim(t.substr(0, first))),
                   std::string(detail::trim(t.substr(first + 1, last - first - 1))),
                   std::string(detail::trim(t.substr(last + 1)))});
  }
  return out;
}

std::string chat_request_body(const PromptBundle& bundle, const std::string& model) {
  nlohmann::json messages = nlohmann::json::array();
  for (const ChatMessage& m : bundle.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
  return nlohmann::json{{"model", model}, {"messages", messages}, {"temperature", 0}, {"seed", 0}}.dump();
}

LlmReply call_llm(const std::string& endpoint, const PromptBundle& bundle, const LlmOptions& options) {
  detail::RetryPolicy policy{options.max_attempts, options.backoff, options.timeout};
  detail::HttpReply reply =
      detail::post_json(endpoint, "/v1/chat/completions", chat_request_body(bundle, options.model), policy);
  try {
    auto j = nlohmann::json::parse(reply.body);
    return {j.at("choices").at(0).at("message").at("content").get<std::string>(), reply.attempts};
  } catch (const nlohmann::json::exception& e) {
    throw ServiceError(std::string("malformed chat completion response: ") + e.what(), 200, reply.attempts,
                       false);
  }
}

std::vector<LlmReply> call_llm_batch(const std::string& endpoint, std::span<const PromptBundle> bundles,
                                     const LlmOptions& options, std::size_t parallelism) {
  std::vector<LlmReply> out(bundles.size());
  parallelism = std::max<std::size_t>(1, std::min(parallelism, bundles.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < bundles.size() && !failed; i = next++) {
      try {
        out[i] = call_llm(endpoint, bundles[i], options);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        failed = true;
      }
    }
  };
  if (parallelism == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < parallelism; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

}  // namespace kgrag
