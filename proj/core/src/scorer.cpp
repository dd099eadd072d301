#include "kgrag/scorer.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <numeric>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "kgrag/error.hpp"
#include "text_util.hpp"

namespace kgrag {

FeatureVariant parse_feature_variant(const std::string& name) {
  std::string n = detail::to_lower(name);
  if (n == "dde") return FeatureVariant::Dde;
  if (n == "topic_onehot" || n == "onehot") return FeatureVariant::TopicOnehot;
  if (n == "none") return FeatureVariant::None;
  if (n == "dde+ppr" || n == "dde_ppr") return FeatureVariant::DdePpr;
  if (n == "graphsage") return FeatureVariant::GraphSage;
  throw ConfigError("unknown feature variant \"" + name + "\"");
}

std::string to_string(FeatureVariant v) {
  switch (v) {
    case FeatureVariant::Dde: return "dde";
    case FeatureVariant::TopicOnehot: return "topic_onehot";
    case FeatureVariant::None: return "none";
    case FeatureVariant::DdePpr: return "dde+ppr";
    case FeatureVariant::GraphSage: return "graphsage";
  }
  return "dde";
}

std::size_t FeatureLayout::entity_structural_dim() const {
  switch (variant) {
    case FeatureVariant::Dde: return 1 + 2 * dde_rounds;
    case FeatureVariant::DdePpr: return 2 + 2 * dde_rounds;
    case FeatureVariant::TopicOnehot: return 1;
    case FeatureVariant::GraphSage: return 1;
    case FeatureVariant::None: return 0;
  }
  return 0;
}

std::span<const float> OverrideLookup::entity(EntityId e) const {
  auto it = entities_.find(e);
  if (it != entities_.end()) return it->second;
  return base_.entity(e);
}

namespace {

std::vector<EntityId> entities_of(std::span<const Triple> triples) {
  std::vector<EntityId> out;
  out.reserve(triples.size() * 2);
  for (const Triple& t : triples) {
    out.push_back(t.head);
    out.push_back(t.tail);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

EntityEncodings structural_features(std::span<const Triple> candidates, std::span<const EntityId> topics,
                                    const FeatureLayout& layout, const PprOptions& ppr) {
  switch (layout.variant) {
    case FeatureVariant::Dde:
      return compute_dde(candidates, topics, DdeConfig{layout.dde_rounds});
    case FeatureVariant::TopicOnehot:
    case FeatureVariant::GraphSage:
      return topic_onehot(entities_of(candidates), topics);
    case FeatureVariant::None: {
      EntityEncodings enc(0);
      for (EntityId e : entities_of(candidates)) enc.add(e);
      return enc;
    }
    case FeatureVariant::DdePpr: {
      EntityEncodings dde = compute_dde(candidates, topics, DdeConfig{layout.dde_rounds});
      EntityEncodings pr(1);
      auto scores = topics.empty() ? std::unordered_map<EntityId, double>{} : ppr_scores(candidates, topics, ppr);
      for (EntityId e : dde.entities()) {
        std::size_t i = pr.add(e);
        auto it = scores.find(e);
        pr.row(i)[0] = it == scores.end() ? 0.0 : it->second;
      }
      return dde.concat(pr);
    }
  }
  throw ConfigError("unhandled feature variant");
}

Eigen::MatrixXd assemble_features(const KnowledgeGraph& kg, std::span<const TripleId> candidates,
                                  std::span<const float> query, const SemanticLookup& semantic,
                                  const EntityEncodings& structure, const FeatureLayout& layout) {
  const std::size_t d = layout.text_dim;
  const std::size_t s = layout.entity_structural_dim();
  if (query.size() != d)
    throw ShapeError("query embedding dim " + std::to_string(query.size()) + " differs from text dim " +
                     std::to_string(d));
  if (structure.width() != s)
    throw ShapeError("structural width " + std::to_string(structure.width()) + " differs from layout width " +
                     std::to_string(s));
  Eigen::MatrixXd x(static_cast<Eigen::Index>(candidates.size()), static_cast<Eigen::Index>(layout.input_dim()));
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Triple& t = kg.triple(candidates[i]);
    auto row = x.row(static_cast<Eigen::Index>(i));
    std::span<const float> blocks[4];
    try {
      blocks[0] = query;
      blocks[1] = semantic.entity(t.head);
      blocks[2] = semantic.relation(t.relation);
      blocks[3] = semantic.entity(t.tail);
    } catch (const MissingKeyError& e) {
      TextTriple tt = kg.text_of(t);
      throw MissingKeyError("triple (" + tt.head + "," + tt.relation + "," + tt.tail + "): " + e.what());
    }
    Eigen::Index col = 0;
    for (const auto& b : blocks) {
      if (b.size() != d) throw ShapeError("embedding dim " + std::to_string(b.size()) + " differs from text dim");
      for (float f : b) row(col++) = f;
    }
    if (s == 0) continue;
    try {
      for (double v : structure.at(t.head)) row(col++) = v;
      for (double v : structure.at(t.tail)) row(col++) = v;
    } catch (const MissingKeyError& e) {
      TextTriple tt = kg.text_of(t);
      throw MissingKeyError("triple (" + tt.head + "," + tt.relation + "," + tt.tail + "): " + e.what());
    }
  }
  return x;
}

namespace {
constexpr Eigen::Index kScoreBlock = 256;
}

std::vector<double> score_triples(const Mlp& params, const Eigen::MatrixXd& features, std::size_t workers) {
  if (params.output_dim() != 1) throw ShapeError("scorer MLP must have a single output");
  if (static_cast<std::size_t>(features.cols()) != params.input_dim())
    throw ShapeError("feature dim " + std::to_string(features.cols()) + " does not match scorer input dim " +
                     std::to_string(params.input_dim()));
  const Eigen::Index rows = features.rows();
  std::vector<double> out(static_cast<std::size_t>(rows));
  const Eigen::Index blocks = (rows + kScoreBlock - 1) / kScoreBlock;
  auto run_block = [&](Eigen::Index b) {
    Eigen::Index begin = b * kScoreBlock;
    Eigen::Index n = std::min(kScoreBlock, rows - begin);
    Eigen::MatrixXd logits = params.forward(features.middleRows(begin, n));
    for (Eigen::Index i = 0; i < n; ++i) {
      double p = stable_sigmoid(logits(i, 0));
      out[static_cast<std::size_t>(begin + i)] =
          std::clamp(p, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
    }
  };
  workers = std::max<std::size_t>(1, std::min<std::size_t>(workers, static_cast<std::size_t>(blocks)));
  if (workers <= 1) {
    for (Eigen::Index b = 0; b < blocks; ++b) run_block(b);
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (auto b = static_cast<Eigen::Index>(w); b < blocks; b += static_cast<Eigen::Index>(workers)) run_block(b);
    });
  for (auto& t : pool) t.join();
  return out;
}

std::vector<ScoredTriple> select_top_k(std::span<const double> scores, std::span<const TripleId> handles,
                                       std::size_t k) {
  if (scores.size() != handles.size()) throw ShapeError("score count differs from handle count");
  std::vector<ScoredTriple> all(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) all[i] = {handles[i], scores[i]};
  auto before = [](const ScoredTriple& a, const ScoredTriple& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.triple < b.triple;
  };
  k = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), before);
  all.resize(k);
  return all;
}

RetrievalResult score_and_select(const Mlp& params, const std::string& sample_id,
                                 std::span<const TripleId> candidates, const Eigen::MatrixXd& features,
                                 std::size_t k, std::size_t workers) {
  std::vector<double> scores = score_triples(params, features, workers);
  return {sample_id, select_top_k(scores, candidates, k)};
}

namespace {

struct SageGraph {
  std::vector<EntityId> entities;
  std::unordered_map<EntityId, std::size_t> index;
  // Incoming (source row, relation) per entity row.
  std::vector<std::vector<std::pair<std::size_t, RelationId>>> incoming;
};

SageGraph build_sage_graph(const KnowledgeGraph& kg, std::span<const TripleId> candidates) {
  SageGraph g;
  std::vector<Triple> triples = kg.materialize(candidates);
  g.entities = entities_of(triples);
  for (std::size_t i = 0; i < g.entities.size(); ++i) g.index.emplace(g.entities[i], i);
  g.incoming.resize(g.entities.size());
  for (const Triple& t : triples) g.incoming[g.index.at(t.tail)].emplace_back(g.index.at(t.head), t.relation);
  return g;
}

std::size_t sage_entity_dim(std::span<const Mlp> layers) {
  if (layers.empty()) throw ConfigError("GraphSAGE encoder has no layers");
  return layers.front().output_dim();
}

}  // namespace

Eigen::MatrixXd graphsage_forward(const KnowledgeGraph& kg, std::span<const TripleId> candidates,
                                  const SemanticLookup& semantic, std::span<const Mlp> layers,
                                  std::vector<SageLayerCache>& caches) {
  const std::size_t de = sage_entity_dim(layers);
  SageGraph g = build_sage_graph(kg, candidates);
  const auto n = static_cast<Eigen::Index>(g.entities.size());
  std::size_t dr = 0;
  for (const auto& in : g.incoming)
    if (!in.empty()) {
      dr = semantic.relation(in.front().second).size();
      break;
    }
  if (dr == 0) dr = layers.front().input_dim() - 2 * de;
  if (layers.front().input_dim() != 2 * de + dr)
    throw ShapeError("GraphSAGE layer input dim does not match 2*entity dim + relation dim");

  Eigen::MatrixXd z(n, static_cast<Eigen::Index>(de));
  for (Eigen::Index i = 0; i < n; ++i) {
    auto v = semantic.entity(g.entities[static_cast<std::size_t>(i)]);
    if (v.size() != de) throw ShapeError("entity embedding dim differs from GraphSAGE dim");
    for (std::size_t c = 0; c < de; ++c) z(i, static_cast<Eigen::Index>(c)) = v[c];
  }
  // Relation vectors do not change across layers.
  Eigen::MatrixXd rel_mean = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(dr));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& in = g.incoming[static_cast<std::size_t>(i)];
    for (const auto& [src, r] : in) {
      auto v = semantic.relation(r);
      for (std::size_t c = 0; c < dr; ++c) rel_mean(i, static_cast<Eigen::Index>(c)) += v[c];
    }
    if (!in.empty()) rel_mean.row(i) /= static_cast<double>(in.size());
  }

  caches.assign(layers.size(), {});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    SageLayerCache& c = caches[l];
    c.entities = g.entities;
    c.index = g.index;
    c.input.resize(n, static_cast<Eigen::Index>(2 * de + dr));
    c.input.leftCols(static_cast<Eigen::Index>(de)) = z;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& in = g.incoming[static_cast<std::size_t>(i)];
      Eigen::RowVectorXd agg = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(de));
      for (const auto& [src, r] : in) agg += z.row(static_cast<Eigen::Index>(src));
      if (!in.empty()) agg /= static_cast<double>(in.size());
      c.input.block(i, static_cast<Eigen::Index>(de), 1, static_cast<Eigen::Index>(de)) = agg;
    }
    c.input.rightCols(static_cast<Eigen::Index>(dr)) = rel_mean;
    z = layers[l].forward(c.input, c.tape);
  }
  return z;
}

void graphsage_backward(const KnowledgeGraph& kg, std::span<const TripleId> candidates,
                        std::span<const Mlp> layers, const std::vector<SageLayerCache>& caches,
                        const Eigen::MatrixXd& d_entities, std::span<Mlp> grads) {
  const std::size_t de = sage_entity_dim(layers);
  const auto dei = static_cast<Eigen::Index>(de);
  SageGraph g = build_sage_graph(kg, candidates);
  Eigen::MatrixXd dz = d_entities;
  for (std::size_t l = layers.size(); l-- > 0;) {
    Eigen::MatrixXd d_in = layers[l].backward(caches[l].tape, dz, grads[l]);
    dz = d_in.leftCols(dei);
    for (std::size_t i = 0; i < g.incoming.size(); ++i) {
      const auto& in = g.incoming[i];
      if (in.empty()) continue;
      Eigen::RowVectorXd share = d_in.block(static_cast<Eigen::Index>(i), dei, 1, dei) / static_cast<double>(in.size());
      for (const auto& [src, r] : in) dz.row(static_cast<Eigen::Index>(src)) += share;
    }
  }
}

std::unordered_map<EntityId, std::vector<float>> graphsage_encode(const KnowledgeGraph& kg,
                                                                  std::span<const TripleId> candidates,
                                                                  const SemanticLookup& semantic,
                                                                  std::span<const Mlp> layers) {
  std::vector<SageLayerCache> caches;
  Eigen::MatrixXd z = graphsage_forward(kg, candidates, semantic, layers, caches);
  std::unordered_map<EntityId, std::vector<float>> out;
  if (caches.empty()) return out;
  const auto& entities = caches.front().entities;
  for (std::size_t i = 0; i < entities.size(); ++i) {
    std::vector<float> v(static_cast<std::size_t>(z.cols()));
    for (Eigen::Index c = 0; c < z.cols(); ++c) v[static_cast<std::size_t>(c)] = static_cast<float>(z(static_cast<Eigen::Index>(i), c));
    out.emplace(entities[i], std::move(v));
  }
  return out;
}

SageModel train_graphsage(const KnowledgeGraph& kg, std::span<const SageSample> samples,
                          const SemanticLookup& semantic, const FeatureLayout& layout, const TrainConfig& config,
                          std::size_t sage_layers, std::vector<double>* epoch_loss) {
  if (samples.empty()) throw TrainingError("no GraphSAGE training samples");
  if (sage_layers == 0) throw ConfigError("GraphSAGE needs at least one layer");
  const std::size_t d = layout.text_dim;
  SageModel model;
  for (std::size_t l = 0; l < sage_layers; ++l) {
    std::vector<std::size_t> hidden = {d};
    model.layers.push_back(Mlp::random(3 * d, hidden, d, config.activation, config.seed + 101 + l));
  }
  model.scorer = Mlp::random(layout.input_dim(), config.hidden, 1, config.activation, config.seed);
  std::vector<AdamState> sage_adam(sage_layers);
  AdamState scorer_adam;
  AdamOptions opt;
  opt.learning_rate = config.learning_rate;

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(config.seed ^ 0x5DEECE66Dull);
  const auto di = static_cast<Eigen::Index>(d);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t rows = 0;
    for (std::size_t si : order) {
      const SageSample& s = samples[si];
      if (s.candidates.empty()) continue;
      std::vector<SageLayerCache> caches;
      Eigen::MatrixXd z = graphsage_forward(kg, s.candidates, semantic, model.layers, caches);
      std::unordered_map<EntityId, std::vector<float>> enc;
      const auto& entities = caches.front().entities;
      for (std::size_t i = 0; i < entities.size(); ++i) {
        std::vector<float> v(d);
        for (std::size_t c = 0; c < d; ++c)
          v[c] = static_cast<float>(z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)));
        enc.emplace(entities[i], std::move(v));
      }
      // Features keep float precision of the stored vectors; the gradient is
      // taken with respect to that rounded copy.
      OverrideLookup lookup(semantic, enc);
      std::vector<Triple> triples = kg.materialize(s.candidates);
      EntityEncodings structure = structural_features(triples, s.topics, layout);
      Eigen::MatrixXd x = assemble_features(kg, s.candidates, s.query, lookup, structure, layout);

      ForwardTape tape;
      Eigen::MatrixXd logits = model.scorer.forward(x, tape);
      const auto n = static_cast<double>(x.rows());
      Eigen::MatrixXd dl(x.rows(), 1);
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double zi = logits(i, 0);
        double y = s.labels[static_cast<std::size_t>(i)];
        double p = stable_sigmoid(zi);
        double sp_neg = std::max(-zi, 0.0) + std::log1p(std::exp(-std::abs(zi)));
        double sp_pos = std::max(zi, 0.0) + std::log1p(std::exp(-std::abs(zi)));
        total += config.positive_weight * y * sp_neg + (1.0 - y) * sp_pos;
        dl(i, 0) = (config.positive_weight * y * (p - 1.0) + (1.0 - y) * p) / n;
      }
      rows += static_cast<std::size_t>(x.rows());
      Mlp scorer_grad = model.scorer.zeros_like();
      Eigen::MatrixXd dx = model.scorer.backward(tape, dl, scorer_grad);

      Eigen::MatrixXd dz = Eigen::MatrixXd::Zero(z.rows(), z.cols());
      const auto& index = caches.front().index;
      for (std::size_t i = 0; i < s.candidates.size(); ++i) {
        const Triple& t = kg.triple(s.candidates[i]);
        auto r = static_cast<Eigen::Index>(i);
        dz.row(static_cast<Eigen::Index>(index.at(t.head))) += dx.block(r, di, 1, di);
        dz.row(static_cast<Eigen::Index>(index.at(t.tail))) += dx.block(r, 3 * di, 1, di);
      }
      std::vector<Mlp> sage_grads;
      for (const Mlp& l : model.layers) sage_grads.push_back(l.zeros_like());
      graphsage_backward(kg, s.candidates, model.layers, caches, dz, sage_grads);

      adam_update(model.scorer, scorer_grad, scorer_adam, opt);
      for (std::size_t l = 0; l < sage_layers; ++l) adam_update(model.layers[l], sage_grads[l], sage_adam[l], opt);
      if (!model.scorer.all_finite()) throw TrainingError("GraphSAGE scorer parameters became non-finite");
    }
    if (!std::isfinite(total)) throw TrainingError("non-finite GraphSAGE loss at epoch " + std::to_string(epoch));
    if (epoch_loss) epoch_loss->push_back(rows ? total / static_cast<double>(rows) : 0.0);
  }
  return model;
}

std::vector<double> score_graphsage(const KnowledgeGraph& kg, const SageModel& model,
                                    std::span<const TripleId> candidates, std::span<const EntityId> topics,
                                    std::span<const float> query, const SemanticLookup& semantic,
                                    const FeatureLayout& layout, std::size_t workers) {
  if (candidates.empty()) return {};
  auto enc = graphsage_encode(kg, candidates, semantic, model.layers);
  OverrideLookup lookup(semantic, enc);
  std::vector<Triple> triples = kg.materialize(candidates);
  EntityEncodings structure = structural_features(triples, topics, layout);
  return score_triples(model.scorer, assemble_features(kg, candidates, query, lookup, structure, layout), workers);
}

std::string format_retrieval(const KnowledgeGraph& kg, std::span<const RetrievalResult> results) {
  std::string out;
  for (const RetrievalResult& r : results) {
    nlohmann::json triples = nlohmann::json::array();
    for (const ScoredTriple& s : r.triples) {
      TextTriple t = kg.text_of(s.triple);
      triples.push_back({t.head, t.relation, t.tail, s.score});
    }
    out += nlohmann::json{{"id", r.sample_id}, {"triples", triples}}.dump();
    out += '\n';
  }
  return out;
}

void write_retrieval(const std::filesystem::path& path, const KnowledgeGraph& kg,
                     std::span<const RetrievalResult> results) {
  detail::write_file_atomic(path, format_retrieval(kg, results));
}

std::vector<RetrievedRecord> read_retrieval(const std::filesystem::path& path) {
  std::string text = detail::read_file(path);
  std::vector<RetrievedRecord> out;
  std::size_t line_no = 0;
  for (std::string_view line : detail::split_lines(text)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    try {
      auto j = nlohmann::json::parse(line.begin(), line.end());
      RetrievedRecord rec;
      rec.id = j.at("id").get<std::string>();
      for (const auto& t : j.at("triples")) {
        if (!t.is_array() || t.size() < 3) throw ParseError(path.string(), line_no, "triple must have 3 elements");
        rec.triples.push_back({t[0].get<std::string>(), t[1].get<std::string>(), t[2].get<std::string>()});
        rec.scores.push_back(t.size() > 3 && t[3].is_number() ? t[3].get<double>() : 0.0);
      }
      out.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string(), line_no, e.what());
    }
  }
  return out;
}

}  // namespace kgrag
