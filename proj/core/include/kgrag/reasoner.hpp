#pragma once

#include <chrono>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kgrag/kg_store.hpp"

namespace kgrag {

struct ChatMessage {
  std::string role;  // system | user | assistant
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

struct PromptBundle {
  std::vector<ChatMessage> messages;
};

extern const std::string_view kQaSystemPrompt;
extern const std::string_view kLabelingSystemPrompt;

// "(head,relation,tail)"
std::string render_triple(const TextTriple& t);

// "Triplets:\n(h,r,t)\n...\n\nQuestion:\n<question>"
std::string render_context(std::string_view question, std::span<const TextTriple> triples);

struct QaPromptOptions {
  bool include_icl = true;
  // Allows an empty triple list (no-retriever ablation).
  bool empty_context = false;
};

// system, ICL user, ICL assistant, final user. Triples keep the caller's
// (rank) order. Throws ConfigError on an empty list unless empty_context.
PromptBundle build_qa_prompt(std::string_view question, std::span<const TextTriple> ranked,
                             const QaPromptOptions& options = {});

PromptBundle build_labeling_prompt(std::string_view question, std::span<const TextTriple> candidates);

inline const std::vector<std::string> kDefaultRefusalTokens = {"not available", "none", "no answer", "unknown"};

struct ReasonerOutput {
  std::string raw_text;
  std::vector<std::string> answers;
  bool refusal = true;
  std::string explanation;  // the non-"ans:" lines
};

// Lowercase, trim, drop trailing punctuation.
std::string normalize_refusal(std::string_view answer);

ReasonerOutput parse_answers(std::string_view raw,
                             std::span<const std::string> refusal_tokens = kDefaultRefusalTokens);

// One "ans: <answer>" line per answer.
std::string render_answers(std::span<const std::string> answers);

// Triples from "evidence: (h,r,t)" lines; unparseable lines are skipped.
std::vector<TextTriple> parse_evidence(std::string_view raw);

struct LlmOptions {
  std::string model = "gpt-4o-mini";
  int max_attempts = 3;
  std::chrono::milliseconds backoff{200};
  std::chrono::milliseconds timeout{120000};
};

// Chat-completion request JSON: model, messages, temperature 0, seed 0.
std::string chat_request_body(const PromptBundle& bundle, const std::string& model);

struct LlmReply {
  std::string text;
  int attempts = 0;
};

// POST {endpoint}/v1/chat/completions; returns choices[0].message.content
// verbatim. Throws ServiceError / TimeoutError.
LlmReply call_llm(const std::string& endpoint, const PromptBundle& bundle, const LlmOptions& options = {});

// One call per bundle, at most `parallelism` in flight. Output order matches input.
std::vector<LlmReply> call_llm_batch(const std::string& endpoint, std::span<const PromptBundle> bundles,
                                     const LlmOptions& options, std::size_t parallelism);

}  // namespace kgrag
