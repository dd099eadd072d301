#include "kgrag/kg_store.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "kgrag/error.hpp"
#include "text_util.hpp"

namespace kgrag {

namespace {

void build_csr(std::size_t entity_count, std::span<const Triple> triples, bool forward,
               std::vector<std::uint32_t>& offsets, std::vector<Edge>& edges) {
  offsets.assign(entity_count + 1, 0);
  for (const Triple& t : triples) ++offsets[(forward ? t.head : t.tail).value + 1];
  for (std::size_t i = 1; i < offsets.size(); ++i) offsets[i] += offsets[i - 1];
  edges.resize(triples.size());
  std::vector<std::uint32_t> cursor(offsets.begin(), offsets.end() - 1);
  for (std::uint32_t i = 0; i < triples.size(); ++i) {
    const Triple& t = triples[i];
    EntityId owner = forward ? t.head : t.tail;
    EntityId other = forward ? t.tail : t.head;
    edges[cursor[owner.value]++] = Edge{t.relation, other, TripleId{i}};
  }
}

}  // namespace

EntityId KnowledgeGraph::Builder::intern_entity(std::string_view text) {
  auto [it, inserted] = entity_index_.try_emplace(std::string(text),
                                                  EntityId{static_cast<std::uint32_t>(entities_.size())});
  if (inserted) entities_.emplace_back(text);
  return it->second;
}

RelationId KnowledgeGraph::Builder::intern_relation(std::string_view text) {
  auto [it, inserted] = relation_index_.try_emplace(
      std::string(text), RelationId{static_cast<std::uint32_t>(relations_.size())});
  if (inserted) relations_.emplace_back(text);
  return it->second;
}

bool KnowledgeGraph::Builder::add(std::string_view head, std::string_view relation,
                                  std::string_view tail) {
  EntityId h = intern_entity(head);
  RelationId r = intern_relation(relation);
  EntityId t = intern_entity(tail);
  return add(h, r, t);
}

bool KnowledgeGraph::Builder::add(EntityId head, RelationId relation, EntityId tail) {
  if (head.value >= entities_.size() || tail.value >= entities_.size() ||
      relation.value >= relations_.size())
    throw MissingKeyError("triple references an entity or relation not interned in the builder");
  Triple t{head, relation, tail};
  auto [it, inserted] =
      triple_index_.try_emplace(t, TripleId{static_cast<std::uint32_t>(triples_.size())});
  if (inserted) triples_.push_back(t);
  return inserted;
}

KnowledgeGraph KnowledgeGraph::Builder::build() && {
  KnowledgeGraph kg;
  kg.entities_ = std::move(entities_);
  kg.relations_ = std::move(relations_);
  kg.entity_index_ = std::move(entity_index_);
  kg.relation_index_ = std::move(relation_index_);
  kg.triples_ = std::move(triples_);
  kg.triple_index_ = std::move(triple_index_);
  build_csr(kg.entities_.size(), kg.triples_, true, kg.out_offsets_, kg.out_edges_);
  build_csr(kg.entities_.size(), kg.triples_, false, kg.in_offsets_, kg.in_edges_);
  return kg;
}

std::optional<EntityId> KnowledgeGraph::find_entity(std::string_view text) const {
  auto it = entity_index_.find(std::string(text));
  if (it == entity_index_.end()) return std::nullopt;
  return it->second;
}

std::optional<RelationId> KnowledgeGraph::find_relation(std::string_view text) const {
  auto it = relation_index_.find(std::string(text));
  if (it == relation_index_.end()) return std::nullopt;
  return it->second;
}

std::optional<TripleId> KnowledgeGraph::find_triple(const Triple& t) const {
  auto it = triple_index_.find(t);
  if (it == triple_index_.end()) return std::nullopt;
  return it->second;
}

std::optional<TripleId> KnowledgeGraph::find_triple(const TextTriple& t) const {
  auto h = find_entity(t.head);
  auto r = find_relation(t.relation);
  auto tl = find_entity(t.tail);
  if (!h || !r || !tl) return std::nullopt;
  return find_triple(Triple{*h, *r, *tl});
}

std::span<const Edge> KnowledgeGraph::out_edges(EntityId e) const {
  if (e.value >= entities_.size()) throw MissingKeyError("unknown entity #" + std::to_string(e.value));
  return std::span<const Edge>(out_edges_).subspan(out_offsets_[e.value],
                                                   out_offsets_[e.value + 1] - out_offsets_[e.value]);
}

std::span<const Edge> KnowledgeGraph::in_edges(EntityId e) const {
  if (e.value >= entities_.size()) throw MissingKeyError("unknown entity #" + std::to_string(e.value));
  return std::span<const Edge>(in_edges_).subspan(in_offsets_[e.value],
                                                  in_offsets_[e.value + 1] - in_offsets_[e.value]);
}

TextTriple KnowledgeGraph::text_of(const Triple& t) const {
  return TextTriple{entity_text(t.head), relation_text(t.relation), entity_text(t.tail)};
}

std::vector<Triple> KnowledgeGraph::materialize(std::span<const TripleId> ids) const {
  std::vector<Triple> out;
  out.reserve(ids.size());
  for (TripleId id : ids) out.push_back(triple(id));
  return out;
}

KnowledgeGraph parse_triples(std::istream& in, const std::string& source) {
  KnowledgeGraph::Builder builder;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    std::size_t a = line.find('\t');
    std::size_t b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (a == std::string::npos || b == std::string::npos || line.find('\t', b + 1) != std::string::npos)
      throw ParseError(source, line_no, "expected 3 TAB-separated fields");
    std::string_view view(line);
    std::string_view head = view.substr(0, a);
    std::string_view rel = view.substr(a + 1, b - a - 1);
    std::string_view tail = view.substr(b + 1);
    if (head.empty() || rel.empty() || tail.empty())
      throw ParseError(source, line_no, "empty field");
    builder.add(head, rel, tail);
  }
  return std::move(builder).build();
}

KnowledgeGraph load_triples(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open triples file " + path.string());
  return parse_triples(in, path.string());
}

void save_triples(const KnowledgeGraph& kg, const std::filesystem::path& path) {
  std::string out;
  for (const Triple& t : kg.triples()) {
    out += kg.entity_text(t.head);
    out += '\t';
    out += kg.relation_text(t.relation);
    out += '\t';
    out += kg.entity_text(t.tail);
    out += '\n';
  }
  detail::write_file_atomic(path, out);
}

namespace {

std::vector<std::string> string_array(const nlohmann::json& rec, const char* key,
                                      const std::string& where) {
  if (!rec.contains(key)) throw ParseError(where, 0, std::string("missing field \"") + key + "\"");
  const auto& arr = rec.at(key);
  if (!arr.is_array()) throw ParseError(where, 0, std::string("field \"") + key + "\" must be an array");
  std::vector<std::string> out;
  for (const auto& v : arr) {
    if (!v.is_string())
      throw ParseError(where, 0, std::string("field \"") + key + "\" must contain strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

}  // namespace

DatasetLoad parse_dataset(std::istream& in, const KnowledgeGraph& kg, const std::string& source) {
  DatasetLoad result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(source, line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!rec.is_object()) throw ParseError(source, line_no, "record is not an object");
    std::string id = rec.contains("id") && rec["id"].is_string() ? rec["id"].get<std::string>() : "";
    std::string where = source + ":" + std::to_string(line_no) + " (record \"" + id + "\")";
    if (id.empty()) throw ParseError(where, 0, "missing field \"id\"");
    if (!rec.contains("question") || !rec["question"].is_string())
      throw ParseError(where, 0, "missing field \"question\"");

    QuerySample s;
    s.id = id;
    s.question = rec["question"].get<std::string>();
    for (const std::string& topic : string_array(rec, "topic_entities", where)) {
      if (auto e = kg.find_entity(topic)) {
        s.topic_entities.push_back(*e);
      } else {
        result.warnings.push_back("sample " + id + ": topic entity \"" + topic +
                                  "\" not in KG, dropped");
      }
    }
    s.answers = string_array(rec, "answers", where);
    for (const std::string& answer : s.answers)
      if (auto e = kg.find_entity(answer)) s.answer_entities.push_back(*e);
    std::sort(s.topic_entities.begin(), s.topic_entities.end());
    s.topic_entities.erase(std::unique(s.topic_entities.begin(), s.topic_entities.end()),
                           s.topic_entities.end());
    std::sort(s.answer_entities.begin(), s.answer_entities.end());
    s.answer_entities.erase(std::unique(s.answer_entities.begin(), s.answer_entities.end()),
                            s.answer_entities.end());
    result.samples.push_back(std::move(s));
  }
  return result;
}

DatasetLoad load_dataset(const std::filesystem::path& path, const KnowledgeGraph& kg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset " + path.string());
  return parse_dataset(in, kg, path.string());
}

std::vector<std::uint32_t> undirected_distances(const KnowledgeGraph& kg,
                                                std::span<const EntityId> sources,
                                                std::size_t max_hops) {
  std::vector<std::uint32_t> dist(kg.entity_count(), kUnreachable);
  std::deque<EntityId> frontier;
  for (EntityId s : sources) {
    if (s.value >= kg.entity_count()) throw MissingKeyError("unknown entity #" + std::to_string(s.value));
    if (dist[s.value] != 0) {
      dist[s.value] = 0;
      frontier.push_back(s);
    }
  }
  while (!frontier.empty()) {
    EntityId u = frontier.front();
    frontier.pop_front();
    std::uint32_t du = dist[u.value];
    if (du >= max_hops) continue;
    auto visit = [&](const Edge& e) {
      if (dist[e.neighbor.value] == kUnreachable) {
        dist[e.neighbor.value] = du + 1;
        frontier.push_back(e.neighbor);
      }
    };
    for (const Edge& e : kg.out_edges(u)) visit(e);
    for (const Edge& e : kg.in_edges(u)) visit(e);
  }
  return dist;
}

std::vector<TripleId> extract_candidate_subgraph(const KnowledgeGraph& kg,
                                                 std::span<const EntityId> topics,
                                                 std::size_t hops) {
  std::vector<TripleId> out;
  if (topics.empty()) return out;
  std::vector<std::uint32_t> dist = undirected_distances(kg, topics, hops);
  for (std::uint32_t e = 0; e < dist.size(); ++e) {
    if (dist[e] == kUnreachable) continue;
    for (const Edge& edge : kg.out_edges(EntityId{e}))
      if (dist[edge.neighbor.value] != kUnreachable) out.push_back(edge.triple);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace kgrag
