#pragma once

#include <chrono>
#include <string>

namespace kgrag::detail {

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds backoff{100};  // doubled after each failed attempt
  std::chrono::milliseconds timeout{30000};
};

struct HttpReply {
  std::string body;
  int attempts = 0;
};

// POSTs a JSON body to endpoint + path. Connection failures, 429 and 5xx are
// retried with exponential backoff; other non-200 statuses fail at once.
// Throws ServiceError (carrying status and attempt count) or TimeoutError.
HttpReply post_json(const std::string& endpoint, const std::string& path, const std::string& body,
                    const RetryPolicy& policy);

}  // namespace kgrag::detail
