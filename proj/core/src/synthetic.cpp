#include "kgrag/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "kgrag/error.hpp"
#include "text_util.hpp"

namespace kgrag {

std::vector<std::size_t> allocate_counts(std::size_t total, const std::vector<double>& weights) {
  double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (weights.empty() || !(sum > 0.0)) throw ConfigError("hop mix must have positive total weight");
  std::vector<std::size_t> out(weights.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] < 0.0) throw ConfigError("hop mix weights must be non-negative");
    double exact = static_cast<double>(total) * weights[i] / sum;
    out[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += out[i];
    remainders.emplace_back(exact - std::floor(exact), i);
  }
  // Ties go to the smaller hop count.
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++out[remainders[k % remainders.size()].second];
  return out;
}

namespace {

struct PathCounts {
  std::vector<std::uint32_t> dist;
  std::vector<std::uint64_t> paths;  // number of shortest paths, saturating
};

PathCounts count_shortest_paths(const KnowledgeGraph& kg, EntityId source) {
  PathCounts pc;
  pc.dist.assign(kg.entity_count(), kUnreachable);
  pc.paths.assign(kg.entity_count(), 0);
  std::deque<EntityId> queue{source};
  pc.dist[source.value] = 0;
  pc.paths[source.value] = 1;
  while (!queue.empty()) {
    EntityId u = queue.front();
    queue.pop_front();
    auto visit = [&](EntityId v) {
      if (pc.dist[v.value] == kUnreachable) {
        pc.dist[v.value] = pc.dist[u.value] + 1;
        queue.push_back(v);
      }
      if (pc.dist[v.value] == pc.dist[u.value] + 1)
        pc.paths[v.value] = std::min<std::uint64_t>(pc.paths[v.value] + pc.paths[u.value], 1u << 30);
    };
    for (const Edge& e : kg.out_edges(u)) visit(e.neighbor);
    for (const Edge& e : kg.in_edges(u)) visit(e.neighbor);
  }
  return pc;
}

std::size_t diameter(const KnowledgeGraph& kg) {
  std::size_t best = 0;
  for (std::uint32_t i = 0; i < kg.entity_count(); ++i) {
    EntityId src{i};
    for (std::uint32_t d : undirected_distances(kg, std::span<const EntityId>(&src, 1)))
      if (d != kUnreachable) best = std::max<std::size_t>(best, d);
  }
  return best;
}

std::string question_text(const std::vector<std::string>& chain, const std::string& topic) {
  std::string q = "what is the";
  for (std::size_t i = chain.size(); i-- > 0;) {
    q += " " + chain[i] + " of";
    if (i > 0) q += " the";
  }
  return q + " " + topic;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  if (spec.entities < 2) throw ConfigError("synthetic KG needs at least 2 entities");
  if (spec.relations.empty()) throw ConfigError("synthetic KG needs a relation vocabulary");
  if (!(spec.mean_out_degree > 0.0)) throw ConfigError("synthetic mean out-degree must be positive");
  std::mt19937_64 rng(spec.seed);

  SyntheticData data;
  KnowledgeGraph::Builder builder;
  std::vector<std::string> names(spec.entities);
  for (std::size_t i = 0; i < spec.entities; ++i) {
    names[i] = "e" + std::to_string(i);
    builder.intern_entity(names[i]);
  }
  for (const std::string& r : spec.relations) builder.intern_relation(r);
  std::set<std::pair<std::size_t, std::size_t>> linked;  // unordered entity pairs
  std::uniform_int_distribution<std::size_t> pick_entity(0, spec.entities - 1);
  std::uniform_int_distribution<std::size_t> pick_relation(0, spec.relations.size() - 1);
  const auto draws = static_cast<std::size_t>(std::llround(spec.mean_out_degree * static_cast<double>(spec.entities)));
  for (std::size_t k = 0; k < draws; ++k) {
    std::size_t h = pick_entity(rng);
    std::size_t t = pick_entity(rng);
    const std::string& r = spec.relations[pick_relation(rng)];
    if (t == h || !linked.emplace(std::min(h, t), std::max(h, t)).second) continue;
    builder.add(names[h], r, names[t]);
    data.triples.push_back({names[h], r, names[t]});
  }
  KnowledgeGraph kg = std::move(builder).build();

  const std::size_t max_hops = spec.hop_mix.size();
  const std::size_t diam = diameter(kg);
  for (std::size_t h = 1; h <= max_hops; ++h)
    if (spec.hop_mix[h - 1] > 0.0 && h > diam)
      throw ConfigError("question template needs " + std::to_string(h) + " hops but the graph diameter is " +
                        std::to_string(diam));

  std::set<std::pair<std::size_t, std::vector<std::uint32_t>>> used;
  auto make_questions = [&](std::size_t total, const std::string& prefix) {
    std::vector<std::size_t> per_hop = allocate_counts(total, spec.hop_mix);
    std::vector<SyntheticQuestion> out;
    for (std::size_t h = 1; h <= max_hops; ++h) {
      std::size_t made = 0;
      const std::size_t budget = 1000 * (per_hop[h - 1] + 1);
      for (std::size_t attempt = 0; made < per_hop[h - 1]; ++attempt) {
        if (attempt >= budget)
          throw ConfigError("could not plant " + std::to_string(per_hop[h - 1]) + " distinct " + std::to_string(h) +
                            "-hop questions; enlarge the graph or relation vocabulary");
        EntityId topic{static_cast<std::uint32_t>(pick_entity(rng))};
        EntityId cur = topic;
        std::vector<std::uint32_t> rels;
        std::vector<TextTriple> path;
        bool ok = true;
        for (std::size_t step = 0; step < h; ++step) {
          auto out_edges = kg.out_edges(cur);
          if (out_edges.empty()) {
            ok = false;
            break;
          }
          const Edge& e = out_edges[std::uniform_int_distribution<std::size_t>(0, out_edges.size() - 1)(rng)];
          rels.push_back(e.relation.value);
          path.push_back(kg.text_of(e.triple));
          cur = e.neighbor;
        }
        if (!ok) continue;
        PathCounts pc = count_shortest_paths(kg, topic);
        if (pc.dist[cur.value] != h || pc.paths[cur.value] != 1) continue;
        // The relation chain must single out the answer.
        std::set<EntityId> frontier{topic};
        for (std::uint32_t r : rels) {
          std::set<EntityId> next;
          for (EntityId u : frontier)
            for (const Edge& e : kg.out_edges(u))
              if (e.relation.value == r) next.insert(e.neighbor);
          frontier = std::move(next);
        }
        if (frontier != std::set<EntityId>{cur}) continue;
        if (!used.emplace(topic.value, rels).second) continue;

        std::vector<std::string> chain;
        for (std::uint32_t r : rels) chain.push_back(kg.relation_text(RelationId{r}));
        SyntheticQuestion q;
        q.topic = kg.entity_text(topic);
        q.answer = kg.entity_text(cur);
        q.hops = h;
        q.question = question_text(chain, q.topic);
        q.path = std::move(path);
        out.push_back(std::move(q));
        ++made;
      }
    }
    std::shuffle(out.begin(), out.end(), rng);
    for (std::size_t i = 0; i < out.size(); ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%s-%04zu", prefix.c_str(), i);
      out[i].id = buf;
    }
    return out;
  };
  data.train = make_questions(spec.train_questions, "train");
  data.test = make_questions(spec.test_questions, "test");
  return data;
}

std::string format_dataset(const std::vector<SyntheticQuestion>& questions) {
  std::string out;
  for (const SyntheticQuestion& q : questions) {
    nlohmann::json rec = {{"id", q.id},
                          {"question", q.question},
                          {"topic_entities", {q.topic}},
                          {"answers", {q.answer}},
                          {"hops", q.hops}};
    out += rec.dump() + "\n";
  }
  return out;
}

SyntheticFiles write_synthetic(const SyntheticData& data, const std::filesystem::path& dir) {
  SyntheticFiles files{dir / "kg.tsv", dir / "train.jsonl", dir / "test.jsonl"};
  std::string kg;
  for (const TextTriple& t : data.triples) kg += t.head + "\t" + t.relation + "\t" + t.tail + "\n";
  detail::write_file_atomic(files.kg, kg);
  detail::write_file_atomic(files.train, format_dataset(data.train));
  detail::write_file_atomic(files.test, format_dataset(data.test));
  return files;
}

}  // namespace kgrag
