#include "kgrag/supervision.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "kgrag/error.hpp"
#include "text_util.hpp"

namespace kgrag {

namespace {

// Undirected adjacency over a subset of the KG's triples, in local indices.
struct LocalGraph {
  std::unordered_map<EntityId, std::uint32_t> local;
  std::vector<std::vector<std::uint32_t>> adjacency;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> endpoints;  // per listed triple
  std::vector<TripleId> triples;

  std::uint32_t intern(EntityId e) {
    auto [it, inserted] = local.try_emplace(e, static_cast<std::uint32_t>(adjacency.size()));
    if (inserted) adjacency.emplace_back();
    return it->second;
  }

  std::vector<std::uint32_t> bfs(std::uint32_t source) const {
    std::vector<std::uint32_t> dist(adjacency.size(), kUnreachable);
    std::deque<std::uint32_t> frontier{source};
    dist[source] = 0;
    while (!frontier.empty()) {
      std::uint32_t u = frontier.front();
      frontier.pop_front();
      for (std::uint32_t v : adjacency[u]) {
        if (dist[v] == kUnreachable) {
          dist[v] = dist[u] + 1;
          frontier.push_back(v);
        }
      }
    }
    return dist;
  }
};

}  // namespace

std::vector<TripleId> shortest_path_labels(const KnowledgeGraph& kg, std::span<const EntityId> topics,
                                           std::span<const EntityId> answers,
                                           std::optional<std::span<const TripleId>> restrict_to) {
  if (topics.empty() || answers.empty()) return {};

  LocalGraph g;
  auto add_triple = [&](TripleId id) {
    const Triple& t = kg.triple(id);
    std::uint32_t u = g.intern(t.head);
    std::uint32_t v = g.intern(t.tail);
    g.adjacency[u].push_back(v);
    if (u != v) g.adjacency[v].push_back(u);
    g.endpoints.emplace_back(u, v);
    g.triples.push_back(id);
  };
  if (restrict_to) {
    for (TripleId id : *restrict_to) add_triple(id);
  } else {
    for (std::uint32_t i = 0; i < kg.triple_count(); ++i) add_triple(TripleId{i});
  }

  std::vector<bool> selected(g.triples.size(), false);
  std::unordered_map<std::uint32_t, std::vector<std::uint32_t>> answer_dist;
  for (EntityId topic : topics) {
    auto ti = g.local.find(topic);
    if (ti == g.local.end()) continue;
    std::vector<std::uint32_t> from_topic = g.bfs(ti->second);
    for (EntityId answer : answers) {
      auto ai = g.local.find(answer);
      if (ai == g.local.end() || ai->second == ti->second) continue;
      std::uint32_t total = from_topic[ai->second];
      if (total == kUnreachable) continue;
      auto [cached, fresh] = answer_dist.try_emplace(ai->second);
      if (fresh) cached->second = g.bfs(ai->second);
      const std::vector<std::uint32_t>& from_answer = cached->second;
      for (std::size_t i = 0; i < g.endpoints.size(); ++i) {
        auto [u, v] = g.endpoints[i];
        auto on_path = [&](std::uint32_t a, std::uint32_t b) {
          return from_topic[a] != kUnreachable && from_answer[b] != kUnreachable &&
                 from_topic[a] + 1 + from_answer[b] == total;
        };
        if (on_path(u, v) || on_path(v, u)) selected[i] = true;
      }
    }
  }

  std::vector<TripleId> out;
  for (std::size_t i = 0; i < selected.size(); ++i)
    if (selected[i]) out.push_back(g.triples[i]);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

namespace {

TripleSetRecord parse_triple_set(const std::string& line, const std::string& source, std::size_t line_no) {
  nlohmann::json rec;
  try {
    rec = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(source, line_no, std::string("invalid JSON: ") + e.what());
  }
  if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_string())
    throw ParseError(source, line_no, "record without string \"id\"");
  TripleSetRecord out;
  out.id = rec["id"].get<std::string>();
  auto fail = [&](const std::string& what) {
    throw ParseError(source, line_no, "record \"" + out.id + "\": " + what);
  };
  if (!rec.contains("triples") || !rec["triples"].is_array()) fail("missing array \"triples\"");
  for (const auto& t : rec["triples"]) {
    // Extra trailing elements (e.g. a retrieval score) are ignored.
    if (!t.is_array() || t.size() < 3 || !t[0].is_string() || !t[1].is_string() || !t[2].is_string())
      fail("each triple must be an array [head, relation, tail]");
    out.triples.push_back({t[0].get<std::string>(), t[1].get<std::string>(), t[2].get<std::string>()});
  }
  return out;
}

}  // namespace

std::vector<TripleSetRecord> read_triple_sets(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<TripleSetRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    out.push_back(parse_triple_set(line, path.string(), line_no));
  }
  return out;
}

std::string format_triple_sets(std::span<const TripleSetRecord> records) {
  std::string out;
  for (const TripleSetRecord& r : records) {
    nlohmann::json triples = nlohmann::json::array();
    for (const TextTriple& t : r.triples) triples.push_back({t.head, t.relation, t.tail});
    nlohmann::json rec = {{"id", r.id}, {"triples", std::move(triples)}};
    out += rec.dump();
    out += '\n';
  }
  return out;
}

void write_triple_sets(const std::filesystem::path& path, std::span<const TripleSetRecord> records) {
  detail::write_file_atomic(path, format_triple_sets(records));
}

RelevanceLabels import_relevance_labels(const std::filesystem::path& path, const KnowledgeGraph& kg) {
  RelevanceLabels out;
  for (TripleSetRecord& rec : read_triple_sets(path)) {
    std::vector<TripleId>& ids = out.labels[rec.id];
    for (const TextTriple& t : rec.triples) {
      if (auto id = kg.find_triple(t)) {
        ids.push_back(*id);
      } else {
        ++out.dropped;
      }
    }
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  }
  return out;
}

}  // namespace kgrag
