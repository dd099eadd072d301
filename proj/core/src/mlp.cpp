#include "kgrag/mlp.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "kgrag/error.hpp"
#include "text_util.hpp"

namespace kgrag {

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::Relu;
  if (name == "tanh") return Activation::Tanh;
  throw ConfigError("unknown activation \"" + name + "\" (expected relu or tanh)");
}

std::string to_string(Activation a) { return a == Activation::Relu ? "relu" : "tanh"; }

Mlp::Mlp(std::vector<DenseLayer> layers, Activation activation)
    : layers_(std::move(layers)), activation_(activation) {
  if (layers_.empty()) throw ShapeError("an MLP needs at least one layer");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].bias.size() != layers_[i].weights.rows())
      throw ShapeError("layer " + std::to_string(i) + ": bias size differs from weight rows");
    if (i > 0 && layers_[i].weights.cols() != layers_[i - 1].weights.rows())
      throw ShapeError("layer " + std::to_string(i) + ": input width does not chain from previous layer");
  }
}

namespace {

std::vector<std::size_t> layer_widths(std::size_t input_dim, std::span<const std::size_t> hidden,
                                      std::size_t output_dim) {
  std::vector<std::size_t> widths{input_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(output_dim);
  return widths;
}

}  // namespace

Mlp Mlp::random(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t output_dim,
                Activation activation, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto widths = layer_widths(input_dim, hidden, output_dim);
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const auto in = static_cast<Eigen::Index>(widths[i]);
    const auto out = static_cast<Eigen::Index>(widths[i + 1]);
    double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    DenseLayer layer{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(out)};
    for (Eigen::Index r = 0; r < out; ++r)
      for (Eigen::Index c = 0; c < in; ++c) layer.weights(r, c) = dist(rng);
    layers.push_back(std::move(layer));
  }
  return Mlp(std::move(layers), activation);
}

Mlp Mlp::zeros(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t output_dim,
               Activation activation) {
  auto widths = layer_widths(input_dim, hidden, output_dim);
  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const auto in = static_cast<Eigen::Index>(widths[i]);
    const auto out = static_cast<Eigen::Index>(widths[i + 1]);
    layers.push_back({Eigen::MatrixXd::Zero(out, in), Eigen::VectorXd::Zero(out)});
  }
  return Mlp(std::move(layers), activation);
}

std::size_t Mlp::input_dim() const {
  return layers_.empty() ? 0 : static_cast<std::size_t>(layers_.front().weights.cols());
}

std::size_t Mlp::output_dim() const {
  return layers_.empty() ? 0 : static_cast<std::size_t>(layers_.back().weights.rows());
}

namespace {

void activate(Eigen::MatrixXd& z, Activation a) {
  if (a == Activation::Relu) {
    z = z.cwiseMax(0.0);
  } else {
    z = z.array().tanh().matrix();
  }
}

// Derivative of the activation evaluated at the pre-activation values.
Eigen::MatrixXd activation_grad(const Eigen::MatrixXd& pre, Activation a) {
  if (a == Activation::Relu) return (pre.array() > 0.0).cast<double>().matrix();
  return (1.0 - pre.array().tanh().square()).matrix();
}

}  // namespace

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const {
  if (static_cast<std::size_t>(x.cols()) != input_dim())
    throw ShapeError("feature dim " + std::to_string(x.cols()) + " does not match MLP input dim " +
                     std::to_string(input_dim()));
  Eigen::MatrixXd h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Eigen::MatrixXd z = h * layers_[i].weights.transpose();
    z.rowwise() += layers_[i].bias.transpose();
    if (i + 1 < layers_.size()) activate(z, activation_);
    h = std::move(z);
  }
  return h;
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, ForwardTape& tape) const {
  if (static_cast<std::size_t>(x.cols()) != input_dim())
    throw ShapeError("feature dim " + std::to_string(x.cols()) + " does not match MLP input dim " +
                     std::to_string(input_dim()));
  tape.inputs.clear();
  tape.pre_activation.clear();
  Eigen::MatrixXd h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Eigen::MatrixXd z = h * layers_[i].weights.transpose();
    z.rowwise() += layers_[i].bias.transpose();
    tape.inputs.push_back(std::move(h));
    tape.pre_activation.push_back(z);
    if (i + 1 < layers_.size()) activate(z, activation_);
    h = std::move(z);
  }
  return h;
}

Eigen::MatrixXd Mlp::backward(const ForwardTape& tape, const Eigen::MatrixXd& d_output, Mlp& grad) const {
  Eigen::MatrixXd d = d_output;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    if (k + 1 < layers_.size()) d = d.cwiseProduct(activation_grad(tape.pre_activation[k], activation_));
    grad.layers_[k].weights.noalias() += d.transpose() * tape.inputs[k];
    grad.layers_[k].bias += d.colwise().sum().transpose();
    d = d * layers_[k].weights;
  }
  return d;
}

Mlp Mlp::zeros_like() const {
  std::vector<DenseLayer> layers;
  for (const DenseLayer& l : layers_)
    layers.push_back({Eigen::MatrixXd::Zero(l.weights.rows(), l.weights.cols()),
                      Eigen::VectorXd::Zero(l.bias.size())});
  Mlp out;
  out.layers_ = std::move(layers);
  out.activation_ = activation_;
  return out;
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const DenseLayer& l : layers_) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
  return n;
}

double& Mlp::parameter(std::size_t i) {
  for (DenseLayer& l : layers_) {
    auto w = static_cast<std::size_t>(l.weights.size());
    if (i < w) return l.weights.data()[i];
    i -= w;
    auto b = static_cast<std::size_t>(l.bias.size());
    if (i < b) return l.bias.data()[i];
    i -= b;
  }
  throw std::out_of_range("parameter index out of range");
}

double Mlp::parameter(std::size_t i) const { return const_cast<Mlp*>(this)->parameter(i); }

bool Mlp::all_finite() const {
  for (const DenseLayer& l : layers_)
    if (!l.weights.allFinite() || !l.bias.allFinite()) return false;
  return true;
}

double stable_sigmoid(double logit) {
  if (logit >= 0.0) return 1.0 / (1.0 + std::exp(-logit));
  double e = std::exp(logit);
  return e / (1.0 + e);
}

double mlp_logit(const Mlp& params, std::span<const double> feature) {
  if (params.output_dim() != 1) throw ShapeError("scorer MLP must have a single output");
  Eigen::Map<const Eigen::RowVectorXd> row(feature.data(), static_cast<Eigen::Index>(feature.size()));
  return params.forward(Eigen::MatrixXd(row))(0, 0);
}

double mlp_forward(const Mlp& params, std::span<const double> feature) {
  double p = stable_sigmoid(mlp_logit(params, feature));
  // Keep p strictly inside (0, 1) so log p and log(1-p) stay finite.
  return std::clamp(p, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// Summed (not averaged) loss and gradient over a block of rows.
double accumulate_block(const Mlp& params, const Eigen::MatrixXd& x, std::span<const double> labels,
                        double positive_weight, Mlp& grad) {
  ForwardTape tape;
  Eigen::MatrixXd logits = params.forward(x, tape);
  Eigen::MatrixXd d(logits.rows(), 1);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double z = logits(i, 0);
    double y = labels[static_cast<std::size_t>(i)];
    double p = stable_sigmoid(z);
    loss += positive_weight * y * softplus(-z) + (1.0 - y) * softplus(z);
    d(i, 0) = positive_weight * y * (p - 1.0) + (1.0 - y) * p;
  }
  params.backward(tape, d, grad);
  return loss;
}

void scale(Mlp& m, double factor) {
  for (DenseLayer& l : m.layers()) {
    l.weights *= factor;
    l.bias *= factor;
  }
}

void add_into(Mlp& dst, const Mlp& src) {
  for (std::size_t i = 0; i < dst.layers().size(); ++i) {
    dst.layers()[i].weights += src.layers()[i].weights;
    dst.layers()[i].bias += src.layers()[i].bias;
  }
}

// Splits rows into `threads` contiguous blocks and reduces in block order,
// so the result does not depend on scheduling.
double accumulate_parallel(const Mlp& params, const Eigen::MatrixXd& x, std::span<const double> labels,
                           double positive_weight, Mlp& grad, std::size_t threads) {
  const auto rows = static_cast<std::size_t>(x.rows());
  threads = std::max<std::size_t>(1, std::min(threads, rows));
  if (threads == 1) return accumulate_block(params, x, labels, positive_weight, grad);
  std::vector<Mlp> grads(threads, params.zeros_like());
  std::vector<double> losses(threads, 0.0);
  std::vector<std::thread> pool;
  const std::size_t chunk = (rows + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    std::size_t begin = t * chunk;
    std::size_t end = std::min(rows, begin + chunk);
    if (begin >= end) continue;
    pool.emplace_back([&, t, begin, end] {
      Eigen::MatrixXd block = x.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin));
      losses[t] = accumulate_block(params, block, labels.subspan(begin, end - begin), positive_weight, grads[t]);
    });
  }
  for (auto& th : pool) th.join();
  double loss = 0.0;
  for (std::size_t t = 0; t < threads; ++t) {
    loss += losses[t];
    add_into(grad, grads[t]);
  }
  return loss;
}

}  // namespace

LossAndGrad loss_and_grad(const Mlp& params, const Eigen::MatrixXd& features, std::span<const double> labels,
                          double positive_weight) {
  if (labels.size() != static_cast<std::size_t>(features.rows()))
    throw ShapeError("label count " + std::to_string(labels.size()) + " differs from feature rows " +
                     std::to_string(features.rows()));
  LossAndGrad out{0.0, params.zeros_like()};
  if (labels.empty()) return out;
  out.loss = accumulate_block(params, features, labels, positive_weight, out.grad);
  const double inv = 1.0 / static_cast<double>(labels.size());
  out.loss *= inv;
  scale(out.grad, inv);
  return out;
}

void adam_update(Mlp& params, const Mlp& grad, AdamState& state, const AdamOptions& options) {
  if (state.step == 0 && state.m.layers().empty()) {
    state.m = params.zeros_like();
    state.v = params.zeros_like();
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(options.beta1, t);
  const double correction2 = 1.0 - std::pow(options.beta2, t);
  auto step = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = options.beta1 * m + (1.0 - options.beta1) * g;
    v = options.beta2 * v + (1.0 - options.beta2) * g.cwiseProduct(g);
    auto m_hat = m.array() / correction1;
    auto v_hat = v.array() / correction2;
    param.array() -= options.learning_rate * m_hat / (v_hat.sqrt() + options.epsilon);
  };
  for (std::size_t i = 0; i < params.layers().size(); ++i) {
    step(params.layers()[i].weights, grad.layers()[i].weights, state.m.layers()[i].weights,
         state.v.layers()[i].weights);
    step(params.layers()[i].bias, grad.layers()[i].bias, state.m.layers()[i].bias, state.v.layers()[i].bias);
  }
}

void TrainingSet::append(const Eigen::MatrixXd& sample_features, std::span<const double> sample_labels) {
  if (static_cast<std::size_t>(sample_features.rows()) != sample_labels.size())
    throw ShapeError("sample feature rows differ from label count");
  if (sample_features.rows() > 0) {
    if (labels.empty()) dim = static_cast<std::size_t>(sample_features.cols());
    if (static_cast<std::size_t>(sample_features.cols()) != dim)
      throw ShapeError("sample feature dim differs from training set dim");
    for (Eigen::Index r = 0; r < sample_features.rows(); ++r)
      for (Eigen::Index c = 0; c < sample_features.cols(); ++c) rows.push_back(sample_features(r, c));
  }
  labels.insert(labels.end(), sample_labels.begin(), sample_labels.end());
  sample_offsets.push_back(labels.size());
}

namespace {

double mean_loss(const Mlp& params, const Eigen::MatrixXd& x, std::span<const double> labels, double w) {
  if (labels.empty()) return 0.0;
  Eigen::MatrixXd logits = params.forward(x);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double z = logits(i, 0);
    double y = labels[static_cast<std::size_t>(i)];
    loss += w * y * softplus(-z) + (1.0 - y) * softplus(z);
  }
  return loss / static_cast<double>(labels.size());
}

}  // namespace

TrainResult train(const TrainingSet& data, const TrainConfig& config, const EpochCallback& on_epoch) {
  if (data.sample_count() == 0 || data.labels.empty()) throw TrainingError("training set is empty");
  if (config.batch_size == 0) throw ConfigError("batch size must be positive");

  const std::size_t samples = data.sample_count();
  std::size_t holdout = 0;
  if (config.holdout_fraction > 0.0) {
    holdout = static_cast<std::size_t>(std::ceil(config.holdout_fraction * static_cast<double>(samples)));
    holdout = std::min(holdout, samples - 1);
  }
  const std::size_t train_rows = data.sample_offsets[samples - holdout];
  const std::size_t total_rows = data.labels.size();
  if (train_rows == 0) throw TrainingError("no training rows after the validation hold-out");
  std::span<const double> all_labels(data.labels);

  Eigen::MatrixXd val_x;
  std::span<const double> val_labels;
  if (holdout > 0) {
    val_x = data.features().middleRows(static_cast<Eigen::Index>(train_rows),
                                     static_cast<Eigen::Index>(total_rows - train_rows));
    val_labels = all_labels.subspan(train_rows);
  }

  TrainResult result;
  result.params = Mlp::random(data.dim, config.hidden, 1,
                              config.activation, config.seed);
  Mlp best = result.params;
  double best_val = std::numeric_limits<double>::infinity();

  std::mt19937_64 rng(config.seed ^ 0x5DEECE66Dull);
  std::vector<Eigen::Index> order(train_rows);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  AdamState adam;
  AdamOptions adam_options;
  adam_options.learning_rate = config.learning_rate;
  std::vector<double> batch_labels;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < train_rows; start += config.batch_size) {
      std::size_t end = std::min(train_rows, start + config.batch_size);
      std::vector<Eigen::Index> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(end));
      Eigen::MatrixXd x = data.features()(idx, Eigen::all);
      batch_labels.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) batch_labels[i] = data.labels[static_cast<std::size_t>(idx[i])];
      Mlp grad = result.params.zeros_like();
      double loss = accumulate_parallel(result.params, x, batch_labels, config.positive_weight, grad,
                                        config.threads);
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << ", rows [" << start << ", " << end
            << "); learning rate " << config.learning_rate << ", positive weight " << config.positive_weight;
        throw TrainingError(msg.str());
      }
      epoch_loss += loss;
      scale(grad, 1.0 / static_cast<double>(idx.size()));
      adam_update(result.params, grad, adam, adam_options);
      if (!result.params.all_finite())
        throw TrainingError("parameters became non-finite at epoch " + std::to_string(epoch));
    }
    epoch_loss /= static_cast<double>(train_rows);
    result.epoch_loss.push_back(epoch_loss);
    std::optional<double> val;
    if (holdout > 0) {
      val = mean_loss(result.params, val_x, val_labels, config.positive_weight);
      result.validation_loss.push_back(*val);
      if (*val < best_val) {
        best_val = *val;
        best = result.params;
        result.best_epoch = epoch;
      }
    } else {
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(epoch, epoch_loss, val);
  }
  if (holdout > 0 && result.best_epoch > 0) result.params = std::move(best);
  return result;
}

std::uint64_t params_fingerprint(std::size_t input_dim, std::size_t dde_rounds) {
  return detail::fnv1a64("mlps:input_dim=" + std::to_string(input_dim) +
                         ";dde_rounds=" + std::to_string(dde_rounds));
}

namespace {

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::string_view bytes, std::size_t& pos, const std::string& source) {
  if (bytes.size() - pos < sizeof(T)) throw ParseError(source, 0, "truncated params file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(v);
}

}  // namespace

void save_params(const Mlp& params, std::uint64_t fingerprint, const std::filesystem::path& path) {
  std::string out = "MLPS";
  out.push_back(1);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.layers().size()));
  for (const DenseLayer& l : params.layers()) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.weights.rows()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l.weights.cols()));
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c)
        put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(l.weights(r, c))));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r)
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(l.bias(r))));
  }
  put_le<std::uint64_t>(out, fingerprint);
  detail::write_file_atomic(path, out);
}

LoadedParams load_params(const std::filesystem::path& path, Activation activation) {
  const std::string source = path.string();
  std::string bytes = detail::read_file(path);
  if (bytes.size() < 5 || bytes.compare(0, 4, "MLPS") != 0)
    throw ParseError(source, 0, "bad magic, not an MLPS params file");
  if (bytes[4] != 1) throw ParseError(source, 0, "unsupported params version " + std::to_string(bytes[4]));
  std::size_t pos = 5;
  auto layer_count = get_le<std::uint32_t>(bytes, pos, source);
  std::vector<DenseLayer> layers;
  for (std::uint32_t k = 0; k < layer_count; ++k) {
    auto rows = get_le<std::uint32_t>(bytes, pos, source);
    auto cols = get_le<std::uint32_t>(bytes, pos, source);
    DenseLayer l{Eigen::MatrixXd(rows, cols), Eigen::VectorXd(rows)};
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c)
        l.weights(r, c) = std::bit_cast<float>(get_le<std::uint32_t>(bytes, pos, source));
    for (Eigen::Index r = 0; r < rows; ++r)
      l.bias(r) = std::bit_cast<float>(get_le<std::uint32_t>(bytes, pos, source));
    layers.push_back(std::move(l));
  }
  LoadedParams out;
  out.fingerprint = get_le<std::uint64_t>(bytes, pos, source);
  if (pos != bytes.size()) throw ParseError(source, 0, "trailing bytes after params");
  out.params = Mlp(std::move(layers), activation);
  return out;
}

}  // namespace kgrag
