#include "kgrag/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <memory>
#include <ostream>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "kgrag/embeddings.hpp"
#include "kgrag/error.hpp"
#include "kgrag/evalkit.hpp"
#include "kgrag/reasoner.hpp"
#include "kgrag/structural_features.hpp"
#include "kgrag/supervision.hpp"
#include "text_util.hpp"

namespace kgrag {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

namespace {

json to_json(const PipelineConfig& c) {
  const TrainConfig& t = c.training.mlp;
  const SyntheticSpec& s = c.synthetic;
  return {
      {"paths",
       {{"work_dir", c.paths.work_dir.string()},
        {"kg", c.paths.kg.string()},
        {"train", c.paths.train.string()},
        {"test", c.paths.test.string()},
        {"relevance_labels", c.paths.relevance_labels.string()}}},
      {"retriever",
       {{"kind", c.retriever.kind},
        {"variant", to_string(c.retriever.variant)},
        {"hops", c.retriever.hops},
        {"dde_rounds", c.retriever.dde_rounds},
        {"top_k", c.retriever.top_k},
        {"workers", c.retriever.workers},
        {"triple_embedding", c.retriever.triple_embedding},
        {"labels", c.retriever.labels}}},
      {"training",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"learning_rate", t.learning_rate},
        {"seed", t.seed},
        {"positive_weight", t.positive_weight},
        {"hidden", t.hidden},
        {"activation", to_string(t.activation)},
        {"holdout_fraction", t.holdout_fraction},
        {"threads", t.threads},
        {"sage_layers", c.training.sage_layers}}},
      {"encoder",
       {{"kind", c.encoder.kind},
        {"endpoint", c.encoder.endpoint},
        {"dim", c.encoder.dim},
        {"seed", c.encoder.seed},
        {"batch_size", c.encoder.batch_size},
        {"parallelism", c.encoder.parallelism},
        {"max_attempts", c.encoder.max_attempts},
        {"timeout_ms", c.encoder.timeout_ms}}},
      {"llm",
       {{"endpoint", c.llm.endpoint},
        {"model", c.llm.model},
        {"parallelism", c.llm.parallelism},
        {"max_attempts", c.llm.max_attempts},
        {"backoff_ms", c.llm.backoff_ms},
        {"timeout_ms", c.llm.timeout_ms},
        {"context_triples", c.llm.context_triples},
        {"include_icl", c.llm.include_icl},
        {"refusal_tokens", c.llm.refusal_tokens}}},
      {"synthetic",
       {{"entities", s.entities},
        {"mean_out_degree", s.mean_out_degree},
        {"relations", s.relations},
        {"hop_mix", s.hop_mix},
        {"train_questions", s.train_questions},
        {"test_questions", s.test_questions},
        {"seed", s.seed}}},
      {"eval", {{"split", c.eval.split}, {"recall_at", c.eval.recall_at}}},
  };
}

void check_keys(const json& user, const json& defaults, const std::string& prefix) {
  for (const auto& [key, value] : user.items()) {
    std::string name = prefix.empty() ? key : prefix + "." + key;
    if (!defaults.contains(key)) throw ConfigError("unknown config key \"" + name + "\"");
    if (defaults[key].is_object()) {
      if (!value.is_object()) throw ConfigError("config key \"" + name + "\" must be an object");
      check_keys(value, defaults[key], name);
    }
  }
}

void apply_override(json& doc, const std::string& assignment) {
  std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override \"" + assignment + "\" is not key=value");
  std::string key = assignment.substr(0, eq);
  std::string raw = assignment.substr(eq + 1);
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    std::size_t dot = key.find('.', start);
    std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key \"" + key + "\"");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("override \"" + key + "\" names a section, not a value");
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  if (node->is_string() && !value.is_string()) value = raw;
  *node = value;
}

template <typename T>
T get(const json& doc, const char* section, const char* key) {
  try {
    return doc.at(section).at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key \"") + section + "." + key + "\" has the wrong type");
  }
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

PipelineConfig from_json(const json& d, const fs::path& base) {
  PipelineConfig c;
  c.paths.work_dir = resolve(get<std::string>(d, "paths", "work_dir"), base);
  c.paths.kg = resolve(get<std::string>(d, "paths", "kg"), base);
  c.paths.train = resolve(get<std::string>(d, "paths", "train"), base);
  c.paths.test = resolve(get<std::string>(d, "paths", "test"), base);
  c.paths.relevance_labels = resolve(get<std::string>(d, "paths", "relevance_labels"), base);

  c.retriever.kind = get<std::string>(d, "retriever", "kind");
  if (c.retriever.kind != "mlp" && c.retriever.kind != "cosine")
    throw ConfigError("retriever.kind must be mlp or cosine, got \"" + c.retriever.kind + "\"");
  c.retriever.variant = parse_feature_variant(get<std::string>(d, "retriever", "variant"));
  c.retriever.hops = get<std::size_t>(d, "retriever", "hops");
  c.retriever.dde_rounds = get<std::size_t>(d, "retriever", "dde_rounds");
  c.retriever.top_k = get<std::size_t>(d, "retriever", "top_k");
  c.retriever.workers = get<std::size_t>(d, "retriever", "workers");
  c.retriever.triple_embedding = get<std::string>(d, "retriever", "triple_embedding");
  if (c.retriever.triple_embedding != "component_mean" && c.retriever.triple_embedding != "whole_triple")
    throw ConfigError("retriever.triple_embedding must be component_mean or whole_triple");
  c.retriever.labels = get<std::string>(d, "retriever", "labels");
  if (c.retriever.labels != "shortest_path" && c.retriever.labels != "relevance")
    throw ConfigError("retriever.labels must be shortest_path or relevance");

  TrainConfig& t = c.training.mlp;
  t.epochs = get<std::size_t>(d, "training", "epochs");
  t.batch_size = get<std::size_t>(d, "training", "batch_size");
  t.learning_rate = get<double>(d, "training", "learning_rate");
  t.seed = get<std::uint64_t>(d, "training", "seed");
  t.positive_weight = get<double>(d, "training", "positive_weight");
  t.hidden = get<std::vector<std::size_t>>(d, "training", "hidden");
  t.activation = parse_activation(get<std::string>(d, "training", "activation"));
  t.holdout_fraction = get<double>(d, "training", "holdout_fraction");
  t.threads = get<std::size_t>(d, "training", "threads");
  c.training.sage_layers = get<std::size_t>(d, "training", "sage_layers");
  if (t.batch_size == 0) throw ConfigError("training.batch_size must be positive");
  if (!(t.learning_rate > 0.0)) throw ConfigError("training.learning_rate must be positive");
  if (t.holdout_fraction < 0.0 || t.holdout_fraction >= 1.0)
    throw ConfigError("training.holdout_fraction must be in [0, 1)");

  c.encoder.kind = get<std::string>(d, "encoder", "kind");
  if (c.encoder.kind != "hash" && c.encoder.kind != "http")
    throw ConfigError("encoder.kind must be hash or http, got \"" + c.encoder.kind + "\"");
  c.encoder.endpoint = get<std::string>(d, "encoder", "endpoint");
  c.encoder.dim = get<std::size_t>(d, "encoder", "dim");
  c.encoder.seed = get<std::uint64_t>(d, "encoder", "seed");
  c.encoder.batch_size = get<std::size_t>(d, "encoder", "batch_size");
  c.encoder.parallelism = get<std::size_t>(d, "encoder", "parallelism");
  c.encoder.max_attempts = get<int>(d, "encoder", "max_attempts");
  c.encoder.timeout_ms = get<std::int64_t>(d, "encoder", "timeout_ms");
  if (c.encoder.kind == "hash" && c.encoder.dim == 0) throw ConfigError("encoder.dim must be positive");

  c.llm.endpoint = get<std::string>(d, "llm", "endpoint");
  c.llm.model = get<std::string>(d, "llm", "model");
  c.llm.parallelism = get<std::size_t>(d, "llm", "parallelism");
  c.llm.max_attempts = get<int>(d, "llm", "max_attempts");
  c.llm.backoff_ms = get<std::int64_t>(d, "llm", "backoff_ms");
  c.llm.timeout_ms = get<std::int64_t>(d, "llm", "timeout_ms");
  c.llm.context_triples = get<std::size_t>(d, "llm", "context_triples");
  c.llm.include_icl = get<bool>(d, "llm", "include_icl");
  c.llm.refusal_tokens = get<std::vector<std::string>>(d, "llm", "refusal_tokens");

  SyntheticSpec& s = c.synthetic;
  s.entities = get<std::size_t>(d, "synthetic", "entities");
  s.mean_out_degree = get<double>(d, "synthetic", "mean_out_degree");
  s.relations = get<std::vector<std::string>>(d, "synthetic", "relations");
  s.hop_mix = get<std::vector<double>>(d, "synthetic", "hop_mix");
  s.train_questions = get<std::size_t>(d, "synthetic", "train_questions");
  s.test_questions = get<std::size_t>(d, "synthetic", "test_questions");
  s.seed = get<std::uint64_t>(d, "synthetic", "seed");

  c.eval.split = get<std::string>(d, "eval", "split");
  if (c.eval.split != "train" && c.eval.split != "test") throw ConfigError("eval.split must be train or test");
  c.eval.recall_at = get<std::vector<std::size_t>>(d, "eval", "recall_at");
  return c;
}

}  // namespace

PipelineConfig parse_config(std::string_view json_text, std::span<const std::string> overrides,
                            const fs::path& base_dir) {
  json doc = to_json(PipelineConfig{});
  if (!detail::trim(json_text).empty()) {
    json user;
    try {
      user = json::parse(json_text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!user.is_object()) throw ConfigError("config must be a JSON object");
    check_keys(user, doc, "");
    doc.merge_patch(user);
  }
  for (const std::string& o : overrides) apply_override(doc, o);
  return from_json(doc, base_dir);
}

PipelineConfig load_config(const fs::path& path, std::span<const std::string> overrides) {
  std::string text;
  try {
    text = detail::read_file(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text, overrides, path.parent_path());
}

std::string config_json(const PipelineConfig& config) { return to_json(config).dump(2) + "\n"; }

Stage parse_stage(std::string_view name) {
  static const std::pair<std::string_view, Stage> kStages[] = {
      {"synth", Stage::Synth},   {"ingest", Stage::Ingest},     {"label", Stage::Label},
      {"import-labels", Stage::ImportLabels}, {"embed", Stage::Embed}, {"train", Stage::Train},
      {"retrieve", Stage::Retrieve}, {"reason", Stage::Reason}, {"eval", Stage::Eval}};
  for (const auto& [n, s] : kStages)
    if (n == name) return s;
  throw ConfigError("unknown stage \"" + std::string(name) + "\"");
}

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::Synth: return "synth";
    case Stage::Ingest: return "ingest";
    case Stage::Label: return "label";
    case Stage::ImportLabels: return "import-labels";
    case Stage::Embed: return "embed";
    case Stage::Train: return "train";
    case Stage::Retrieve: return "retrieve";
    case Stage::Reason: return "reason";
    case Stage::Eval: return "eval";
  }
  return "?";
}

// ------------------------------------------------------- fingerprints

namespace {

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t file_hash(const fs::path& p) {
  if (!fs::exists(p)) throw ConfigError("input file not found: " + p.string());
  return detail::fnv1a64(detail::read_file(p));
}

std::uint64_t combine(std::initializer_list<std::string> parts) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const std::string& p : parts) {
    h = detail::fnv1a64(p, h);
    h = detail::fnv1a64(std::string_view("\x1f", 1), h);
  }
  return h;
}

const fs::path& split_path(const PipelineConfig& c, const std::string& split) {
  return split == "train" ? c.paths.train : c.paths.test;
}

bool uses_mlp(const PipelineConfig& c) { return c.retriever.kind == "mlp"; }
bool whole_triple(const PipelineConfig& c) {
  return c.retriever.kind == "cosine" && c.retriever.triple_embedding == "whole_triple";
}

std::uint64_t fp_candidates(const PipelineConfig& c, const std::string& split) {
  return combine({"candidates", hex(file_hash(c.paths.kg)), hex(file_hash(split_path(c, split))),
                  std::to_string(c.retriever.hops)});
}

std::uint64_t fp_relevance(const PipelineConfig& c) {
  if (c.paths.relevance_labels.empty()) throw ConfigError("paths.relevance_labels is not set");
  return combine({"relevance", hex(file_hash(c.paths.kg)), hex(file_hash(c.paths.relevance_labels))});
}

std::uint64_t fp_labels(const PipelineConfig& c, const std::string& split) {
  return combine({"labels", hex(fp_candidates(c, split))});
}

std::uint64_t fp_embeddings(const PipelineConfig& c) {
  json enc = {c.encoder.kind, c.encoder.endpoint, c.encoder.dim, c.encoder.seed, whole_triple(c)};
  return combine({"embed", enc.dump(), hex(fp_candidates(c, "train")), hex(fp_candidates(c, "test"))});
}

std::uint64_t fp_train_labels(const PipelineConfig& c) {
  return c.retriever.labels == "relevance" ? fp_relevance(c) : fp_labels(c, "train");
}

std::uint64_t fp_params(const PipelineConfig& c) {
  json cfg = to_json(c);
  json r = {c.retriever.kind, to_string(c.retriever.variant), c.retriever.dde_rounds, c.retriever.labels};
  json t = cfg["training"];
  t.erase("threads");  // reduction order is fixed, so threads do not change results
  return combine({"train", r.dump(), t.dump(), hex(fp_train_labels(c)), hex(fp_embeddings(c)),
                  hex(fp_candidates(c, "train"))});
}

std::uint64_t fp_retrieval(const PipelineConfig& c, const std::string& split) {
  std::string model = uses_mlp(c) ? hex(fp_params(c)) : "cosine:" + c.retriever.triple_embedding;
  return combine({"retrieve", model, std::to_string(c.retriever.top_k), hex(fp_candidates(c, split)),
                  hex(fp_embeddings(c))});
}

std::uint64_t fp_reason(const PipelineConfig& c, const std::string& split) {
  json l = {c.llm.endpoint, c.llm.model, c.llm.context_triples, c.llm.include_icl};
  return combine({"reason", hex(fp_retrieval(c, split)), l.dump()});
}

// ------------------------------------------------------------ manifest

class Manifest {
 public:
  explicit Manifest(fs::path work_dir) : dir_(std::move(work_dir)) {
    fs::path p = dir_ / "manifest.json";
    if (fs::exists(p)) {
      try {
        doc_ = json::parse(detail::read_file(p));
      } catch (const json::exception& e) {
        throw PrerequisiteError("corrupt manifest " + p.string() + ": " + e.what());
      }
    }
    if (!doc_.is_object()) doc_ = json::object();
  }

  fs::path path(const std::string& artifact) const { return dir_ / artifact; }

  // Throws PrerequisiteError unless `artifact` exists and was built with `expected`.
  fs::path require(const std::string& artifact, std::uint64_t expected, Stage consumer, Stage producer) const {
    fs::path p = path(artifact);
    if (!fs::exists(p) || !doc_.contains(artifact))
      throw PrerequisiteError("stage `" + to_string(consumer) + "` needs " + artifact + "; run `" +
                              to_string(producer) + "` first");
    if (doc_[artifact].value("fingerprint", "") != hex(expected))
      throw PrerequisiteError(artifact + " was built from a different configuration or inputs; re-run `" +
                              to_string(producer) + "` before `" + to_string(consumer) + "`");
    return p;
  }

  bool current(const std::string& artifact, std::uint64_t expected) const {
    return fs::exists(path(artifact)) && doc_.contains(artifact) &&
           doc_[artifact].value("fingerprint", "") == hex(expected);
  }

  void record(const std::string& artifact, Stage stage, std::uint64_t fingerprint) {
    doc_[artifact] = {{"stage", to_string(stage)}, {"fingerprint", hex(fingerprint)}};
    detail::write_file_atomic(dir_ / "manifest.json", doc_.dump(2) + "\n");
  }

 private:
  fs::path dir_;
  json doc_ = json::object();
};

// --------------------------------------------------------------- helpers

struct Loaded {
  KnowledgeGraph kg;
  std::vector<QuerySample> samples;
};

KnowledgeGraph load_kg(const PipelineConfig& c) {
  if (!fs::exists(c.paths.kg)) throw ConfigError("KG file not found: " + c.paths.kg.string());
  return load_triples(c.paths.kg);
}

std::vector<QuerySample> load_split(const PipelineConfig& c, const KnowledgeGraph& kg, const std::string& split,
                                    std::ostream* log) {
  const fs::path& p = split_path(c, split);
  if (!fs::exists(p)) throw ConfigError(split + " dataset not found: " + p.string());
  DatasetLoad d = load_dataset(p, kg);
  if (log)
    for (const std::string& w : d.warnings) *log << "[warn] " << w << "\n";
  return std::move(d.samples);
}

std::vector<TripleId> resolve_triples(const KnowledgeGraph& kg, std::span<const TextTriple> triples,
                                      const std::string& what) {
  std::vector<TripleId> out;
  out.reserve(triples.size());
  for (const TextTriple& t : triples) {
    auto id = kg.find_triple(t);
    if (!id) throw PrerequisiteError(what + " names triple " + render_triple(t) + " that is not in the KG");
    out.push_back(*id);
  }
  return out;
}

std::unordered_map<std::string, std::vector<TripleId>> load_sets(const KnowledgeGraph& kg, const fs::path& p) {
  std::unordered_map<std::string, std::vector<TripleId>> out;
  for (const TripleSetRecord& r : read_triple_sets(p))
    out[r.id] = resolve_triples(kg, r.triples, p.filename().string());
  return out;
}

std::unique_ptr<TextEncoder> make_encoder(const PipelineConfig& c) {
  if (c.encoder.kind == "hash") return std::make_unique<HashEncoder>(c.encoder.dim, c.encoder.seed);
  if (c.encoder.endpoint.empty()) throw ConfigError("encoder.endpoint is required for the http encoder");
  HttpEncoderOptions o;
  o.batch_size = c.encoder.batch_size;
  o.parallelism = c.encoder.parallelism;
  o.max_attempts = c.encoder.max_attempts;
  o.timeout = std::chrono::milliseconds(c.encoder.timeout_ms);
  return std::make_unique<HttpEncoder>(c.encoder.endpoint, o);
}

FeatureLayout layout_for(const PipelineConfig& c, std::size_t text_dim) {
  FeatureLayout l;
  l.text_dim = text_dim;
  l.variant = c.retriever.variant;
  l.dde_rounds = c.retriever.dde_rounds;
  return l;
}

std::vector<std::vector<float>> embed_questions(const PipelineConfig& c, std::span<const QuerySample> samples,
                                                std::size_t dim) {
  std::vector<std::string> texts;
  for (const QuerySample& s : samples) texts.push_back(s.question);
  auto encoder = make_encoder(c);
  std::vector<std::vector<float>> out = texts.empty() ? std::vector<std::vector<float>>{} : encoder->embed(texts);
  for (const auto& v : out)
    if (v.size() != dim)
      throw ShapeError("question embedding dim " + std::to_string(v.size()) + " differs from store dim " +
                       std::to_string(dim));
  return out;
}

std::string sage_file(std::size_t l) { return "sage_" + std::to_string(l) + ".mlps"; }

// ---------------------------------------------------------------- stages

StageResult stage_synth(const PipelineConfig& c, std::ostream& log) {
  SyntheticData data = generate_synthetic(c.synthetic);
  std::string kg;
  for (const TextTriple& t : data.triples) kg += t.head + "\t" + t.relation + "\t" + t.tail + "\n";
  detail::write_file_atomic(c.paths.kg, kg);
  detail::write_file_atomic(c.paths.train, format_dataset(data.train));
  detail::write_file_atomic(c.paths.test, format_dataset(data.test));
  log << "[synth] " << data.triples.size() << " triples, " << data.train.size() << " train / "
      << data.test.size() << " test questions\n";
  return {{c.paths.kg, c.paths.train, c.paths.test}, "synthetic KG written"};
}

StageResult stage_ingest(const PipelineConfig& c, std::ostream& log) {
  KnowledgeGraph kg = load_kg(c);
  Manifest m(c.paths.work_dir);
  StageResult r;
  for (const std::string split : {"train", "test"}) {
    std::vector<QuerySample> samples = load_split(c, kg, split, &log);
    std::vector<TripleSetRecord> records;
    std::size_t total = 0;
    for (const QuerySample& s : samples) {
      std::vector<TripleId> ids = extract_candidate_subgraph(kg, s.topic_entities, c.retriever.hops);
      total += ids.size();
      TripleSetRecord rec{s.id, {}};
      for (TripleId id : ids) rec.triples.push_back(kg.text_of(id));
      records.push_back(std::move(rec));
    }
    std::string name = "candidates_" + split + ".jsonl";
    write_triple_sets(m.path(name), records);
    m.record(name, Stage::Ingest, fp_candidates(c, split));
    r.artifacts.push_back(m.path(name));
    log << "[ingest] " << split << ": " << samples.size() << " samples, "
        << (samples.empty() ? 0 : total / samples.size()) << " candidates per sample on average\n";
  }
  r.summary = "candidate subgraphs extracted";
  return r;
}

StageResult stage_label(const PipelineConfig& c, std::ostream& log) {
  KnowledgeGraph kg = load_kg(c);
  Manifest m(c.paths.work_dir);
  StageResult r;
  for (const std::string split : {"train", "test"}) {
    std::string cand_name = "candidates_" + split + ".jsonl";
    auto candidates = load_sets(kg, m.require(cand_name, fp_candidates(c, split), Stage::Label, Stage::Ingest));
    std::vector<QuerySample> samples = load_split(c, kg, split, nullptr);
    std::vector<TripleSetRecord> records;
    std::size_t labelled = 0;
    for (const QuerySample& s : samples) {
      const auto& cand = candidates[s.id];
      std::vector<TripleId> ids =
          shortest_path_labels(kg, s.topic_entities, s.answer_entities, std::span<const TripleId>(cand));
      labelled += !ids.empty();
      TripleSetRecord rec{s.id, {}};
      for (TripleId id : ids) rec.triples.push_back(kg.text_of(id));
      records.push_back(std::move(rec));
    }
    std::string name = "labels_" + split + ".jsonl";
    write_triple_sets(m.path(name), records);
    m.record(name, Stage::Label, fp_labels(c, split));
    r.artifacts.push_back(m.path(name));
    log << "[label] " << split << ": " << labelled << "/" << samples.size() << " samples have a shortest path\n";
  }
  r.summary = "weak labels written";
  return r;
}

StageResult stage_import_labels(const PipelineConfig& c, std::ostream& log) {
  KnowledgeGraph kg = load_kg(c);
  if (c.paths.relevance_labels.empty()) throw ConfigError("paths.relevance_labels is not set");
  RelevanceLabels labels = import_relevance_labels(c.paths.relevance_labels, kg);
  std::vector<TripleSetRecord> records;
  for (const auto& [id, triples] : labels.labels) {
    TripleSetRecord rec{id, {}};
    for (TripleId t : triples) rec.triples.push_back(kg.text_of(t));
    records.push_back(std::move(rec));
  }
  Manifest m(c.paths.work_dir);
  write_triple_sets(m.path("relevance_labels.jsonl"), records);
  m.record("relevance_labels.jsonl", Stage::ImportLabels, fp_relevance(c));
  log << "[import-labels] " << records.size() << " samples, " << labels.dropped
      << " triples not found in the KG were dropped\n";
  return {{m.path("relevance_labels.jsonl")}, "relevance labels imported"};
}

StageResult stage_embed(const PipelineConfig& c, std::ostream& log) {
  KnowledgeGraph kg = load_kg(c);
  Manifest m(c.paths.work_dir);
  std::set<std::string> keys;
  for (const std::string split : {"train", "test"}) {
    std::string name = "candidates_" + split + ".jsonl";
    m.require(name, fp_candidates(c, split), Stage::Embed, Stage::Ingest);
    for (const TripleSetRecord& rec : read_triple_sets(m.path(name))) {
      for (const TextTriple& t : rec.triples) {
        keys.insert(t.head);
        keys.insert(t.relation);
        keys.insert(t.tail);
        if (whole_triple(c)) keys.insert(whole_triple_key(t));
      }
    }
  }
  std::vector<std::string> texts(keys.begin(), keys.end());
  auto encoder = make_encoder(c);
  std::vector<std::vector<float>> vecs = texts.empty() ? std::vector<std::vector<float>>{} : encoder->embed(texts);
  std::size_t dim = vecs.empty() ? c.encoder.dim : vecs.front().size();
  EmbeddingStore store(dim);
  for (std::size_t i = 0; i < texts.size(); ++i) store.add(texts[i], vecs[i]);
  save_store(store, m.path("embeddings.embs"));
  m.record("embeddings.embs", Stage::Embed, fp_embeddings(c));
  log << "[embed] " << store.size() << " texts embedded, dim " << dim << "\n";
  return {{m.path("embeddings.embs")}, "embedding store written"};
}

StageResult stage_train(const PipelineConfig& c, std::ostream& log) {
  Manifest m(c.paths.work_dir);
  if (!uses_mlp(c)) {
    json info = {{"retriever", "cosine"}, {"note", "no trainable parameters"}};
    detail::write_file_atomic(m.path("train_log.json"), info.dump(2) + "\n");
    log << "[train] cosine retriever has no parameters to train\n";
    return {{m.path("train_log.json")}, "nothing to train"};
  }
  KnowledgeGraph kg = load_kg(c);
  auto candidates = load_sets(
      kg, m.require("candidates_train.jsonl", fp_candidates(c, "train"), Stage::Train, Stage::Ingest));
  std::unordered_map<std::string, std::vector<TripleId>> labels;
  if (c.retriever.labels == "relevance")
    labels = load_sets(kg, m.require("relevance_labels.jsonl", fp_relevance(c), Stage::Train, Stage::ImportLabels));
  else
    labels = load_sets(kg, m.require("labels_train.jsonl", fp_labels(c, "train"), Stage::Train, Stage::Label));
  EmbeddingStore store =
      load_store(m.require("embeddings.embs", fp_embeddings(c), Stage::Train, Stage::Embed));
  std::vector<QuerySample> samples = load_split(c, kg, "train", nullptr);
  std::vector<std::vector<float>> queries = embed_questions(c, samples, store.dim());
  FeatureLayout layout = layout_for(c, store.dim());
  StoreLookup lookup(kg, store);

  std::size_t skipped = 0, positives = 0, rows = 0;
  TrainingSet data;
  data.dim = layout.input_dim();
  std::vector<SageSample> sage_samples;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const QuerySample& s = samples[i];
    const auto& cand = candidates[s.id];
    std::unordered_set<TripleId> pos;
    auto it = labels.find(s.id);
    if (it != labels.end()) pos.insert(it->second.begin(), it->second.end());
    std::vector<double> y(cand.size());
    std::size_t n_pos = 0;
    for (std::size_t k = 0; k < cand.size(); ++k) n_pos += (y[k] = pos.contains(cand[k]) ? 1.0 : 0.0) > 0;
    if (n_pos == 0) {
      ++skipped;
      continue;
    }
    positives += n_pos;
    rows += cand.size();
    if (c.retriever.variant == FeatureVariant::GraphSage) {
      sage_samples.push_back({cand, s.topic_entities, queries[i], y});
      continue;
    }
    std::vector<Triple> triples = kg.materialize(cand);
    EntityEncodings structure = structural_features(triples, s.topic_entities, layout);
    data.append(assemble_features(kg, cand, queries[i], lookup, structure, layout), y);
  }
  if (rows == 0) throw TrainingError("no training sample has a positive label");

  json info = {{"variant", to_string(c.retriever.variant)},
               {"samples", samples.size() - skipped},
               {"skipped_without_labels", skipped},
               {"rows", rows},
               {"positives", positives}};
  const std::uint64_t file_fp = params_fingerprint(layout.input_dim(), c.retriever.dde_rounds);
  StageResult r;
  if (c.retriever.variant == FeatureVariant::GraphSage) {
    std::vector<double> losses;
    SageModel model = train_graphsage(kg, sage_samples, lookup, layout, c.training.mlp, c.training.sage_layers,
                                      &losses);
    info["epoch_loss"] = losses;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      save_params(model.layers[l], params_fingerprint(3 * layout.text_dim, 0), m.path(sage_file(l)));
      m.record(sage_file(l), Stage::Train, fp_params(c));
      r.artifacts.push_back(m.path(sage_file(l)));
    }
    save_params(model.scorer, file_fp, m.path("params.mlps"));
  } else {
    TrainResult tr = train(data, c.training.mlp, [&](std::size_t epoch, double loss, std::optional<double> val) {
      log << "[train] epoch " << epoch << " loss " << loss;
      if (val) log << " validation " << *val;
      log << "\n";
    });
    info["epoch_loss"] = tr.epoch_loss;
    info["validation_loss"] = tr.validation_loss;
    info["best_epoch"] = tr.best_epoch;
    save_params(tr.params, file_fp, m.path("params.mlps"));
  }
  m.record("params.mlps", Stage::Train, fp_params(c));
  detail::write_file_atomic(m.path("train_log.json"), info.dump(2) + "\n");
  r.artifacts.push_back(m.path("params.mlps"));
  r.artifacts.push_back(m.path("train_log.json"));
  log << "[train] " << (samples.size() - skipped) << " samples, " << rows << " rows, " << positives
      << " positives\n";
  r.summary = "retriever trained";
  return r;
}

StageResult stage_retrieve(const PipelineConfig& c, std::ostream& log) {
  const std::string split = c.eval.split;
  Manifest m(c.paths.work_dir);
  KnowledgeGraph kg = load_kg(c);
  auto candidates = load_sets(kg, m.require("candidates_" + split + ".jsonl", fp_candidates(c, split),
                                            Stage::Retrieve, Stage::Ingest));
  EmbeddingStore store = load_store(m.require("embeddings.embs", fp_embeddings(c), Stage::Retrieve, Stage::Embed));
  FeatureLayout layout = layout_for(c, store.dim());
  SageModel model;
  if (uses_mlp(c)) {
    fs::path p = m.require("params.mlps", fp_params(c), Stage::Retrieve, Stage::Train);
    LoadedParams lp = load_params(p, c.training.mlp.activation);
    if (lp.fingerprint != params_fingerprint(layout.input_dim(), c.retriever.dde_rounds))
      throw PrerequisiteError("params.mlps was trained for a different feature layout; re-run `train`");
    model.scorer = std::move(lp.params);
    if (c.retriever.variant == FeatureVariant::GraphSage)
      for (std::size_t l = 0; l < c.training.sage_layers; ++l)
        model.layers.push_back(
            load_params(m.require(sage_file(l), fp_params(c), Stage::Retrieve, Stage::Train),
                        c.training.mlp.activation)
                .params);
  }
  std::vector<QuerySample> samples = load_split(c, kg, split, nullptr);
  std::vector<std::vector<float>> queries = embed_questions(c, samples, store.dim());
  StoreLookup lookup(kg, store);
  const TripleEmbeddingMode mode =
      whole_triple(c) ? TripleEmbeddingMode::WholeTriple : TripleEmbeddingMode::ComponentMean;

  std::vector<RetrievalResult> results;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const QuerySample& s = samples[i];
    const auto& cand = candidates[s.id];
    std::vector<double> scores;
    if (!uses_mlp(c)) {
      scores = cosine_baseline_scores(store, queries[i], kg, cand, mode);
    } else if (c.retriever.variant == FeatureVariant::GraphSage) {
      scores = score_graphsage(kg, model, cand, s.topic_entities, queries[i], lookup, layout, c.retriever.workers);
    } else if (!cand.empty()) {
      std::vector<Triple> triples = kg.materialize(cand);
      EntityEncodings structure = structural_features(triples, s.topic_entities, layout);
      scores = score_triples(model.scorer, assemble_features(kg, cand, queries[i], lookup, structure, layout),
                             c.retriever.workers);
    }
    results.push_back({s.id, select_top_k(scores, cand, c.retriever.top_k)});
  }
  std::string name = "retrieval_" + split + ".jsonl";
  write_retrieval(m.path(name), kg, results);
  m.record(name, Stage::Retrieve, fp_retrieval(c, split));
  log << "[retrieve] " << split << ": top-" << c.retriever.top_k << " triples for " << results.size()
      << " samples\n";
  return {{m.path(name)}, "retrieval written"};
}

StageResult stage_reason(const PipelineConfig& c, std::ostream& log) {
  const std::string split = c.eval.split;
  Manifest m(c.paths.work_dir);
  fs::path retrieval =
      m.require("retrieval_" + split + ".jsonl", fp_retrieval(c, split), Stage::Reason, Stage::Retrieve);
  if (c.llm.endpoint.empty()) throw ConfigError("llm.endpoint is required for the reason stage");
  KnowledgeGraph kg = load_kg(c);
  std::vector<QuerySample> samples = load_split(c, kg, split, nullptr);
  std::unordered_map<std::string, RetrievedRecord> by_id;
  for (RetrievedRecord& r : read_retrieval(retrieval)) by_id.emplace(r.id, std::move(r));

  std::vector<PromptBundle> bundles;
  for (const QuerySample& s : samples) {
    std::vector<TextTriple> ctx;
    auto it = by_id.find(s.id);
    if (it != by_id.end()) {
      const auto& t = it->second.triples;
      ctx.assign(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(std::min(t.size(), c.llm.context_triples)));
    }
    QaPromptOptions o;
    o.include_icl = c.llm.include_icl;
    o.empty_context = true;
    bundles.push_back(build_qa_prompt(s.question, ctx, o));
  }
  LlmOptions o;
  o.model = c.llm.model;
  o.max_attempts = c.llm.max_attempts;
  o.backoff = std::chrono::milliseconds(c.llm.backoff_ms);
  o.timeout = std::chrono::milliseconds(c.llm.timeout_ms);
  std::vector<LlmReply> replies = call_llm_batch(c.llm.endpoint, bundles, o, c.llm.parallelism);
  std::string out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    out += json{{"id", samples[i].id}, {"response", replies[i].text}}.dump() + "\n";
  std::string name = "reasoner_" + split + ".jsonl";
  detail::write_file_atomic(m.path(name), out);
  m.record(name, Stage::Reason, fp_reason(c, split));
  log << "[reason] " << split << ": " << samples.size() << " responses\n";
  return {{m.path(name)}, "reasoner responses written"};
}

StageResult stage_eval(const PipelineConfig& c, std::ostream& log) {
  const std::string split = c.eval.split;
  Manifest m(c.paths.work_dir);
  fs::path retrieval =
      m.require("retrieval_" + split + ".jsonl", fp_retrieval(c, split), Stage::Eval, Stage::Retrieve);
  KnowledgeGraph kg = load_kg(c);
  std::vector<QuerySample> samples = load_split(c, kg, split, nullptr);

  std::unordered_map<std::string, std::vector<TripleId>> labels;
  const std::string label_name = "labels_" + split + ".jsonl";
  const bool have_labels = m.current(label_name, fp_labels(c, split));
  if (have_labels) labels = load_sets(kg, m.path(label_name));

  std::unordered_map<std::string, std::vector<Triple>> retrieved;
  std::unordered_map<std::string, std::vector<TextTriple>> retrieved_text;
  for (const RetrievedRecord& r : read_retrieval(retrieval)) {
    auto ids = resolve_triples(kg, r.triples, retrieval.filename().string());
    retrieved[r.id] = kg.materialize(ids);
    retrieved_text[r.id] = r.triples;
  }

  json report;
  json answer_at = json::object(), triple_at = json::object();
  for (std::size_t k : c.eval.recall_at) {
    double ar = 0.0, tr = 0.0;
    std::size_t an = 0, tn = 0;
    for (const QuerySample& s : samples) {
      const auto& all = retrieved[s.id];
      std::span<const Triple> top(all.data(), std::min(all.size(), k));
      if (auto v = answer_entity_recall(top, s.answer_entities)) ar += *v, ++an;
      if (have_labels) {
        std::vector<Triple> gold = kg.materialize(labels[s.id]);
        if (auto v = triple_recall(top, gold)) tr += *v, ++tn;
      }
    }
    answer_at[std::to_string(k)] = an ? ar / static_cast<double>(an) : 0.0;
    if (have_labels) triple_at[std::to_string(k)] = tn ? tr / static_cast<double>(tn) : 0.0;
  }
  report["retrieval"] = {{"samples", samples.size()}, {"answer_recall_at", answer_at}};
  if (have_labels) report["retrieval"]["triple_recall_at"] = triple_at;

  std::string table = "retrieval recall (" + split + ", " + std::to_string(samples.size()) + " samples)\n";
  for (std::size_t k : c.eval.recall_at) {
    char line[128];
    std::snprintf(line, sizeof line, "  K=%-5zu answer %.4f", k, answer_at[std::to_string(k)].get<double>());
    table += line;
    if (have_labels) {
      std::snprintf(line, sizeof line, "  triple %.4f", triple_at[std::to_string(k)].get<double>());
      table += line;
    }
    table += "\n";
  }

  StageResult r;
  const std::string reason_name = "reasoner_" + split + ".jsonl";
  if (m.current(reason_name, fp_reason(c, split))) {
    std::unordered_map<std::string, std::string> responses;
    for (std::string_view line : detail::split_lines(detail::read_file(m.path(reason_name)))) {
      if (detail::trim(line).empty()) continue;
      json j = json::parse(line.begin(), line.end());
      responses[j.at("id").get<std::string>()] = j.at("response").get<std::string>();
    }
    std::vector<SampleJudgment> judgments;
    for (const QuerySample& s : samples) {
      ReasonerOutput out = parse_answers(responses[s.id], c.llm.refusal_tokens);
      const auto& text = retrieved_text[s.id];
      std::span<const TextTriple> ctx(text.data(), std::min(text.size(), c.llm.context_triples));
      SampleJudgment j = judge_sample(s.id, out, s.answers, !s.answer_entities.empty(), ctx);
      j.topic_count = s.topic_entities.size();
      if (!s.topic_entities.empty() && !s.answer_entities.empty()) {
        auto dist = undirected_distances(kg, s.topic_entities, 8);
        std::uint32_t best = kUnreachable;
        for (EntityId a : s.answer_entities) best = std::min(best, dist[a.value]);
        j.hops = best == kUnreachable ? 0 : best;
      }
      const auto& all = retrieved[s.id];
      std::span<const Triple> top(all.data(), std::min(all.size(), c.retriever.top_k));
      j.answer_recall = answer_entity_recall(top, s.answer_entities);
      if (have_labels) {
        std::vector<Triple> gold = kg.materialize(labels[s.id]);
        j.triple_recall = triple_recall(top, gold);
      }
      judgments.push_back(std::move(j));
    }
    if (!judgments.empty()) {
      FullReport full = full_report(judgments);
      report["qa"] = json::parse(report_json(full));
      table += "\n" + report_table(full);
      detail::write_file_atomic(m.path("judgments.jsonl"), judgments_jsonl(judgments));
      r.artifacts.push_back(m.path("judgments.jsonl"));
    }
  } else {
    log << "[eval] no current reasoner output for " << split << "; reporting retrieval metrics only\n";
  }
  detail::write_file_atomic(m.path("report.json"), report.dump(2) + "\n");
  detail::write_file_atomic(m.path("report.txt"), table);
  r.artifacts.push_back(m.path("report.json"));
  r.artifacts.push_back(m.path("report.txt"));
  log << table;
  r.summary = "report written";
  return r;
}

}  // namespace

StageResult run_stage(Stage stage, const PipelineConfig& config, std::ostream& log) {
  if (stage != Stage::Synth) fs::create_directories(config.paths.work_dir);
  switch (stage) {
    case Stage::Synth: return stage_synth(config, log);
    case Stage::Ingest: return stage_ingest(config, log);
    case Stage::Label: return stage_label(config, log);
    case Stage::ImportLabels: return stage_import_labels(config, log);
    case Stage::Embed: return stage_embed(config, log);
    case Stage::Train: return stage_train(config, log);
    case Stage::Retrieve: return stage_retrieve(config, log);
    case Stage::Reason: return stage_reason(config, log);
    case Stage::Eval: return stage_eval(config, log);
  }
  throw ConfigError("unhandled stage");
}

void run_all(const PipelineConfig& config, std::ostream& log, bool with_synth) {
  if (with_synth) run_stage(Stage::Synth, config, log);
  run_stage(Stage::Ingest, config, log);
  run_stage(Stage::Label, config, log);
  if (config.retriever.labels == "relevance") run_stage(Stage::ImportLabels, config, log);
  run_stage(Stage::Embed, config, log);
  run_stage(Stage::Train, config, log);
  run_stage(Stage::Retrieve, config, log);
  if (!config.llm.endpoint.empty()) run_stage(Stage::Reason, config, log);
  run_stage(Stage::Eval, config, log);
}

std::map<std::size_t, double> answer_recall_at(const KnowledgeGraph& kg, std::span<const QuerySample> samples,
                                               const fs::path& retrieval_file, std::span<const std::size_t> ks) {
  std::unordered_map<std::string, std::vector<Triple>> retrieved;
  for (const RetrievedRecord& r : read_retrieval(retrieval_file))
    retrieved[r.id] = kg.materialize(resolve_triples(kg, r.triples, retrieval_file.filename().string()));
  std::map<std::size_t, double> out;
  for (std::size_t k : ks) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const QuerySample& s : samples) {
      const auto& all = retrieved[s.id];
      std::span<const Triple> top(all.data(), std::min(all.size(), k));
      if (auto v = answer_entity_recall(top, s.answer_entities)) sum += *v, ++n;
    }
    out[k] = n ? sum / static_cast<double>(n) : 0.0;
  }
  return out;
}

}  // namespace kgrag
