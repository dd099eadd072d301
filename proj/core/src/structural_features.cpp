#include "kgrag/structural_features.hpp"

#include <algorithm>
#include <cmath>

#include "kgrag/error.hpp"

namespace kgrag {

std::span<const double> EntityEncodings::at(EntityId e) const {
  auto it = index_.find(e);
  if (it == index_.end())
    throw MissingKeyError("no structural encoding for entity #" + std::to_string(e.value));
  return row(it->second);
}

std::size_t EntityEncodings::add(EntityId e) {
  auto [it, inserted] = index_.try_emplace(e, entities_.size());
  if (inserted) {
    entities_.push_back(e);
    data_.resize(data_.size() + width_, 0.0);
  }
  return it->second;
}

EntityEncodings EntityEncodings::concat(const EntityEncodings& other) const {
  EntityEncodings out(width_ + other.width_);
  for (std::size_t i = 0; i < entities_.size(); ++i) {
    std::size_t r = out.add(entities_[i]);
    auto dst = out.row(r);
    auto left = row(i);
    auto right = other.at(entities_[i]);
    std::copy(left.begin(), left.end(), dst.begin());
    std::copy(right.begin(), right.end(), dst.begin() + static_cast<std::ptrdiff_t>(width_));
  }
  return out;
}

namespace {

// Candidate endpoints and topics in first-seen order, with local edge lists.
struct LocalIndex {
  EntityEncodings* enc;
  std::vector<std::vector<std::size_t>> in_sources;   // per entity: heads of in-edges
  std::vector<std::vector<std::size_t>> out_targets;  // per entity: tails of out-edges

  std::size_t intern(EntityId e) {
    std::size_t i = enc->add(e);
    if (i >= in_sources.size()) {
      in_sources.resize(i + 1);
      out_targets.resize(i + 1);
    }
    return i;
  }
};

}  // namespace

EntityEncodings compute_dde(std::span<const Triple> candidates, std::span<const EntityId> topics,
                            const DdeConfig& config) {
  const std::size_t rounds = config.rounds;
  EntityEncodings enc(config.width());
  LocalIndex idx{&enc, {}, {}};
  for (EntityId t : topics) idx.intern(t);
  for (const Triple& t : candidates) {
    std::size_t h = idx.intern(t.head);
    std::size_t tl = idx.intern(t.tail);
    idx.in_sources[tl].push_back(h);
    idx.out_targets[h].push_back(tl);
  }
  const std::size_t n = enc.size();
  for (EntityId t : topics) enc.row(idx.intern(t))[0] = 1.0;

  // Column of round l along edges is l, against edges is rounds + l;
  // both directions start from column 0.
  auto propagate = [&](const std::vector<std::vector<std::size_t>>& neighbors, std::size_t col_prev,
                       std::size_t col_next) {
    for (std::size_t e = 0; e < n; ++e) {
      const auto& nb = neighbors[e];
      double sum = 0.0;
      for (std::size_t src : nb) sum += enc.row(src)[col_prev];
      enc.row(e)[col_next] = nb.empty() ? 0.0 : sum / static_cast<double>(nb.size());
    }
  };
  for (std::size_t l = 1; l <= rounds; ++l) {
    propagate(idx.in_sources, l - 1, l);
    propagate(idx.out_targets, l == 1 ? 0 : rounds + l - 1, rounds + l);
  }
  return enc;
}

void append_triple_encoding(const EntityEncodings& enc, const Triple& t, std::vector<double>& out) {
  auto h = enc.at(t.head);
  auto tl = enc.at(t.tail);
  out.insert(out.end(), h.begin(), h.end());
  out.insert(out.end(), tl.begin(), tl.end());
}

std::vector<double> triple_encoding(const EntityEncodings& enc, const Triple& t) {
  std::vector<double> out;
  out.reserve(2 * enc.width());
  append_triple_encoding(enc, t, out);
  return out;
}

EntityEncodings topic_onehot(std::span<const EntityId> entities, std::span<const EntityId> topics) {
  EntityEncodings enc(1);
  for (EntityId e : entities) enc.add(e);
  for (EntityId t : topics) enc.row(enc.add(t))[0] = 1.0;
  return enc;
}

std::unordered_map<EntityId, double> ppr_scores(std::span<const Triple> candidates,
                                                std::span<const EntityId> topics,
                                                const PprOptions& options) {
  if (topics.empty()) throw Error("ppr_scores: topic set is empty");
  if (!(options.damping > 0.0 && options.damping < 1.0))
    throw Error("ppr_scores: damping must lie in (0, 1)");

  EntityEncodings ids(0);
  std::vector<std::vector<std::size_t>> adjacency;
  auto intern = [&](EntityId e) {
    std::size_t i = ids.add(e);
    if (i >= adjacency.size()) adjacency.resize(i + 1);
    return i;
  };
  std::vector<EntityId> unique_topics(topics.begin(), topics.end());
  std::sort(unique_topics.begin(), unique_topics.end());
  unique_topics.erase(std::unique(unique_topics.begin(), unique_topics.end()), unique_topics.end());
  for (EntityId t : unique_topics) intern(t);
  for (const Triple& t : candidates) {
    std::size_t h = intern(t.head);
    std::size_t tl = intern(t.tail);
    adjacency[h].push_back(tl);
    if (h != tl) adjacency[tl].push_back(h);
  }
  const std::size_t n = ids.size();
  std::vector<double> teleport(n, 0.0);
  for (EntityId t : unique_topics)
    teleport[intern(t)] = 1.0 / static_cast<double>(unique_topics.size());

  const double d = options.damping;
  std::vector<double> x = teleport;
  std::vector<double> next(n);
  for (std::size_t it = 0; it < options.iterations; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    double dangling = 0.0;
    for (std::size_t u = 0; u < n; ++u) {
      if (adjacency[u].empty()) {
        dangling += x[u];
        continue;
      }
      double share = x[u] / static_cast<double>(adjacency[u].size());
      for (std::size_t v : adjacency[u]) next[v] += share;
    }
    double delta = 0.0;
    for (std::size_t u = 0; u < n; ++u) {
      next[u] = d * next[u] + (d * dangling + (1.0 - d)) * teleport[u];
      delta = std::max(delta, std::abs(next[u] - x[u]));
    }
    x.swap(next);
    if (delta < options.tolerance) break;
  }

  std::unordered_map<EntityId, double> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.emplace(ids.entities()[i], x[i]);
  return out;
}

}  // namespace kgrag
