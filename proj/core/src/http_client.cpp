#include "http_client.hpp"

#include <algorithm>
#include <thread>

#include <httplib.h>

#include "kgrag/error.hpp"

namespace kgrag::detail {

namespace {

struct ParsedEndpoint {
  std::string scheme_host_port;
  std::string path_prefix;
};

ParsedEndpoint parse_endpoint(const std::string& endpoint) {
  std::size_t scheme_end = endpoint.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint lacks a scheme: " + endpoint);
  std::size_t path_start = endpoint.find('/', scheme_end + 3);
  ParsedEndpoint out;
  out.scheme_host_port = endpoint.substr(0, path_start);
  if (path_start != std::string::npos) out.path_prefix = endpoint.substr(path_start);
  while (!out.path_prefix.empty() && out.path_prefix.back() == '/') out.path_prefix.pop_back();
  return out;
}

}  // namespace

HttpReply post_json(const std::string& endpoint, const std::string& path, const std::string& body,
                    const RetryPolicy& policy) {
  ParsedEndpoint ep = parse_endpoint(endpoint);
  httplib::Client client(ep.scheme_host_port);
  auto secs = std::chrono::duration_cast<std::chrono::seconds>(policy.timeout);
  auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(policy.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  const std::string target = ep.path_prefix + path;
  const int max_attempts = std::max(1, policy.max_attempts);
  auto backoff = policy.backoff;
  int last_status = 0;
  std::string last_error;
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    auto started = std::chrono::steady_clock::now();
    auto res = client.Post(target, body, "application/json");
    if (res) {
      last_status = res->status;
      if (res->status == 200) return HttpReply{res->body, attempt};
      last_error = "HTTP " + std::to_string(res->status) + " from " + endpoint + target;
      bool transient = res->status == 429 || res->status >= 500;
      if (!transient) throw ServiceError(last_error, res->status, attempt, false);
    } else {
      auto elapsed = std::chrono::steady_clock::now() - started;
      httplib::Error err = res.error();
      if (err == httplib::Error::ConnectionTimeout ||
          (err == httplib::Error::Read && elapsed >= policy.timeout))
        throw TimeoutError("request to " + endpoint + target + " timed out", attempt);
      last_status = 0;
      last_error = "request to " + endpoint + target + " failed: " + httplib::to_string(err);
    }
    if (attempt < max_attempts) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw ServiceError(last_error + " (after " + std::to_string(max_attempts) + " attempts)", last_status,
                     max_attempts, true);
}

}  // namespace kgrag::detail
