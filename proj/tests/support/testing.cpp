#include "testing.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>
#include <httplib.h>

namespace kgrag::testing {

namespace fs = std::filesystem;

TempDir::TempDir() {
  static std::atomic<int> counter{0};
  std::random_device rd;
  path_ = fs::temp_directory_path() /
          ("kgrag-test-" + std::to_string(rd()) + "-" + std::to_string(counter.fetch_add(1)));
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

KnowledgeGraph graph_from_edges(std::size_t nodes, std::size_t relations, const EdgeList& edges) {
  KnowledgeGraph::Builder b;
  for (std::size_t i = 0; i < nodes; ++i) b.intern_entity("n" + std::to_string(i));
  for (std::size_t i = 0; i < relations; ++i) b.intern_relation("r" + std::to_string(i));
  for (const auto& [h, r, t] : edges) b.add(EntityId{h}, RelationId{r}, EntityId{t});
  return std::move(b).build();
}

EdgeList random_edges(std::mt19937_64& rng, std::size_t nodes, std::size_t edges, std::size_t relations,
                      bool self_loops) {
  std::uniform_int_distribution<std::uint32_t> node(0, static_cast<std::uint32_t>(nodes - 1));
  std::uniform_int_distribution<std::uint32_t> rel(0, static_cast<std::uint32_t>(relations - 1));
  EdgeList out;
  while (out.size() < edges) {
    std::uint32_t h = node(rng), t = node(rng);
    if (!self_loops && h == t) continue;
    out.push_back({h, rel(rng), t});
  }
  return out;
}

std::vector<EntityId> random_subset(std::mt19937_64& rng, std::size_t nodes, std::size_t max_size) {
  std::size_t k = std::uniform_int_distribution<std::size_t>(1, max_size)(rng);
  std::set<EntityId> s;
  while (s.size() < std::min(k, nodes))
    s.insert(EntityId{std::uniform_int_distribution<std::uint32_t>(0, static_cast<std::uint32_t>(nodes - 1))(rng)});
  return {s.begin(), s.end()};
}

std::map<EntityId, std::vector<double>> dense_dde(const std::vector<Triple>& candidates,
                                                  const std::vector<EntityId>& topics, std::size_t rounds) {
  std::set<EntityId> nodes(topics.begin(), topics.end());
  for (const Triple& t : candidates) {
    nodes.insert(t.head);
    nodes.insert(t.tail);
  }
  std::vector<EntityId> order(nodes.begin(), nodes.end());
  auto pos = [&](EntityId e) {
    return static_cast<Eigen::Index>(std::lower_bound(order.begin(), order.end(), e) - order.begin());
  };
  const auto n = static_cast<Eigen::Index>(order.size());
  // in_adj(v, u): triples u -> v; out_adj(u, v): triples u -> v.
  Eigen::MatrixXd in_adj = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd out_adj = Eigen::MatrixXd::Zero(n, n);
  for (const Triple& t : candidates) {
    in_adj(pos(t.tail), pos(t.head)) += 1.0;
    out_adj(pos(t.head), pos(t.tail)) += 1.0;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    double a = in_adj.row(i).sum(), b = out_adj.row(i).sum();
    if (a > 0) in_adj.row(i) /= a;
    if (b > 0) out_adj.row(i) /= b;
  }
  Eigen::VectorXd s0 = Eigen::VectorXd::Zero(n);
  for (EntityId t : topics) s0(pos(t)) = 1.0;

  Eigen::MatrixXd cols(n, 1 + 2 * rounds);
  cols.col(0) = s0;
  Eigen::VectorXd f = s0, r = s0;
  for (std::size_t l = 1; l <= rounds; ++l) {
    f = in_adj * f;
    r = out_adj * r;
    cols.col(static_cast<Eigen::Index>(l)) = f;
    cols.col(static_cast<Eigen::Index>(rounds + l)) = r;
  }
  std::map<EntityId, std::vector<double>> out;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> row(static_cast<std::size_t>(cols.cols()));
    for (Eigen::Index c = 0; c < cols.cols(); ++c) row[static_cast<std::size_t>(c)] = cols(i, c);
    out[order[static_cast<std::size_t>(i)]] = row;
  }
  return out;
}

std::vector<TripleId> exhaustive_path_labels(const KnowledgeGraph& kg, const std::vector<EntityId>& topics,
                                             const std::vector<EntityId>& answers) {
  const std::size_t n = kg.entity_count();
  // incident[u] = (triple, other endpoint)
  std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> incident(n);
  for (std::uint32_t i = 0; i < kg.triple_count(); ++i) {
    const Triple& t = kg.triple(TripleId{i});
    if (t.head == t.tail) continue;
    incident[t.head.value].push_back({i, t.tail.value});
    incident[t.tail.value].push_back({i, t.head.value});
  }
  std::set<std::uint32_t> result;
  for (EntityId src : topics) {
    for (EntityId dst : answers) {
      if (src == dst) continue;
      std::size_t best = SIZE_MAX;
      std::vector<std::vector<std::uint32_t>> best_paths;
      std::vector<std::uint32_t> path;
      std::vector<bool> on_path(n, false);
      std::function<void(std::uint32_t)> dfs = [&](std::uint32_t u) {
        if (u == dst.value) {
          if (path.size() < best) {
            best = path.size();
            best_paths.clear();
          }
          if (path.size() == best) best_paths.push_back(path);
          return;
        }
        on_path[u] = true;
        for (auto [tid, v] : incident[u]) {
          if (on_path[v]) continue;
          path.push_back(tid);
          dfs(v);
          path.pop_back();
        }
        on_path[u] = false;
      };
      dfs(src.value);
      for (const auto& p : best_paths) result.insert(p.begin(), p.end());
    }
  }
  std::vector<TripleId> out;
  for (std::uint32_t t : result) out.push_back(TripleId{t});
  return out;
}

std::map<EntityId, double> dense_ppr(const std::vector<Triple>& candidates, const std::vector<EntityId>& topics,
                                     double damping, std::size_t iterations) {
  std::set<EntityId> nodes(topics.begin(), topics.end());
  for (const Triple& t : candidates) {
    nodes.insert(t.head);
    nodes.insert(t.tail);
  }
  std::vector<EntityId> order(nodes.begin(), nodes.end());
  auto pos = [&](EntityId e) {
    return static_cast<Eigen::Index>(std::lower_bound(order.begin(), order.end(), e) - order.begin());
  };
  const auto n = static_cast<Eigen::Index>(order.size());
  // Column-stochastic transition over the undirected multigraph; a self-loop counts once.
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
  for (const Triple& t : candidates) {
    Eigen::Index h = pos(t.head), tl = pos(t.tail);
    w(tl, h) += 1.0;
    if (h != tl) w(h, tl) += 1.0;
  }
  Eigen::RowVectorXd deg = w.colwise().sum();
  Eigen::VectorXd tele = Eigen::VectorXd::Zero(n);
  std::set<EntityId> uniq(topics.begin(), topics.end());
  for (EntityId t : uniq) tele(pos(t)) = 1.0 / static_cast<double>(uniq.size());
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index c = 0; c < n; ++c)
    if (deg(c) > 0) p.col(c) = w.col(c) / deg(c);

  Eigen::VectorXd x = tele;
  for (std::size_t it = 0; it < iterations; ++it) {
    double dangling = 0.0;
    for (Eigen::Index c = 0; c < n; ++c)
      if (deg(c) == 0) dangling += x(c);
    x = damping * (p * x) + (damping * dangling + (1.0 - damping)) * tele;
  }
  std::map<EntityId, double> out;
  for (Eigen::Index i = 0; i < n; ++i) out[order[static_cast<std::size_t>(i)]] = x(i);
  return out;
}

double straight_line_logit(const Mlp& params, const std::vector<double>& x) {
  std::vector<double> a = x;
  const auto& layers = params.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const DenseLayer& layer = layers[l];
    std::vector<double> z(static_cast<std::size_t>(layer.weights.rows()));
    for (Eigen::Index i = 0; i < layer.weights.rows(); ++i) {
      double acc = layer.bias(i);
      for (Eigen::Index j = 0; j < layer.weights.cols(); ++j) acc += layer.weights(i, j) * a[static_cast<std::size_t>(j)];
      if (l + 1 < layers.size())
        acc = params.activation() == Activation::Relu ? (acc > 0 ? acc : 0.0) : std::tanh(acc);
      z[static_cast<std::size_t>(i)] = acc;
    }
    a = std::move(z);
  }
  return a.at(0);
}

std::vector<double> numeric_gradient(Mlp& params, const std::function<double()>& f, double step) {
  std::vector<double> g(params.parameter_count());
  for (std::size_t i = 0; i < g.size(); ++i) {
    double& p = params.parameter(i);
    const double saved = p;
    p = saved + step;
    double up = f();
    p = saved - step;
    double down = f();
    p = saved;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

MockServer::MockServer(const std::string& path, Handler handler) : server_(std::make_unique<httplib::Server>()) {
  server_->Post(path, handler);
  port_ = server_->bind_to_any_port("127.0.0.1");
  if (port_ <= 0) throw std::runtime_error("mock server failed to bind");
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

MockServer::~MockServer() {
  server_->stop();
  if (thread_.joinable()) thread_.join();
}

std::string MockServer::endpoint() const { return "http://127.0.0.1:" + std::to_string(port_); }

}  // namespace kgrag::testing
