#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace kgrag {

enum class Activation { Relu, Tanh };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

struct DenseLayer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd bias;     // out
};

// Values cached by a forward pass for the matching backward pass.
struct ForwardTape {
  std::vector<Eigen::MatrixXd> inputs;       // input to each layer, batch x in
  std::vector<Eigen::MatrixXd> pre_activation;
};

// Fully connected network; hidden layers use `activation`, the last layer is
// linear. Rows of an input matrix are independent examples.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::vector<DenseLayer> layers, Activation activation);

  // Glorot-uniform weights, zero biases.
  static Mlp random(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t output_dim,
                    Activation activation, std::uint64_t seed);
  static Mlp zeros(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t output_dim,
                   Activation activation);

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  Activation activation() const noexcept { return activation_; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& layers() noexcept { return layers_; }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, ForwardTape& tape) const;

  // Accumulates parameter gradients into `grad` and returns dLoss/dInput.
  Eigen::MatrixXd backward(const ForwardTape& tape, const Eigen::MatrixXd& d_output, Mlp& grad) const;

  // Same-shape zero network, used as a gradient accumulator.
  Mlp zeros_like() const;

  std::size_t parameter_count() const;
  double& parameter(std::size_t i);
  double parameter(std::size_t i) const;
  bool all_finite() const;

 private:
  std::vector<DenseLayer> layers_;
  Activation activation_ = Activation::Relu;
};

// Scalar scorer p(triple) = sigmoid(logit). Throws ShapeError on dim mismatch.
double mlp_logit(const Mlp& params, std::span<const double> feature);
double mlp_forward(const Mlp& params, std::span<const double> feature);
double stable_sigmoid(double logit);

struct LossAndGrad {
  double loss = 0.0;  // mean weighted negative log-likelihood
  Mlp grad;
};

// Mean over rows of  -w*y*log p - (1-y)*log(1-p), p = sigmoid(logit); with
// w = 1 the row sum is -log of the factorized subgraph likelihood.
LossAndGrad loss_and_grad(const Mlp& params, const Eigen::MatrixXd& features,
                          std::span<const double> labels, double positive_weight = 1.0);

struct AdamState {
  Mlp m;
  Mlp v;
  std::uint64_t step = 0;
};

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

void adam_update(Mlp& params, const Mlp& grad, AdamState& state, const AdamOptions& options);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 1024;  // rows per optimizer step
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double positive_weight = 1.0;
  std::vector<std::size_t> hidden = {1024, 1024};
  Activation activation = Activation::Relu;
  // Fraction of samples (from the end) held out for validation; when > 0 the
  // lowest-validation-loss epoch's params are returned.
  double holdout_fraction = 0.0;
  std::size_t threads = 1;  // >1 splits each minibatch across threads
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Rows of all samples stacked; sample i owns rows [offsets[i], offsets[i+1]).
struct TrainingSet {
  std::size_t dim = 0;
  std::vector<double> rows;  // row-major, labels.size() x dim
  std::vector<double> labels;
  std::vector<std::size_t> sample_offsets = {0};

  void append(const Eigen::MatrixXd& sample_features, std::span<const double> sample_labels);
  std::size_t sample_count() const { return sample_offsets.size() - 1; }
  Eigen::Map<const RowMatrix> features() const {
    return {rows.data(), static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(dim)};
  }
};

struct TrainResult {
  Mlp params;
  std::vector<double> epoch_loss;
  std::vector<double> validation_loss;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch ran
};

using EpochCallback = std::function<void(std::size_t epoch, double loss, std::optional<double> validation)>;

TrainResult train(const TrainingSet& data, const TrainConfig& config, const EpochCallback& on_epoch = {});

// Fingerprint binding a params file to the feature layout it was trained for.
std::uint64_t params_fingerprint(std::size_t input_dim, std::size_t dde_rounds);

// "MLPS", version 1, little-endian: u32 layer count, per layer u32 rows,
// u32 cols, f32 weights row-major, f32 biases; then u64 fingerprint.
void save_params(const Mlp& params, std::uint64_t fingerprint, const std::filesystem::path& path);

struct LoadedParams {
  Mlp params;
  std::uint64_t fingerprint = 0;
};

LoadedParams load_params(const std::filesystem::path& path, Activation activation);

}  // namespace kgrag
