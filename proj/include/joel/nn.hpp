#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "joel/matrix.hpp"

// Dense feed-forward engine: layers, forward recurrence, losses, exact
// backpropagation and optimizers. All arithmetic is in double precision.
namespace joel::nn {

enum class Activation { identity, relu, sigmoid, softmax };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view s);

struct LayerSpec {
  std::size_t width = 0;
  Activation activation = Activation::relu;
  double dropout_rate = 0.0;  // in [0, 1)
  bool batch_norm = false;
};

struct BatchNorm {
  static constexpr double kMomentum = 0.9;
  static constexpr double kEpsilon = 1e-5;

  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = kMomentum;
  double epsilon = kEpsilon;

  friend bool operator==(const BatchNorm&, const BatchNorm&) = default;
};

// f(x) = dropout(act(bn(W x + b))).
struct DenseLayer {
  Matrix W;  // out x in
  std::vector<double> b;
  std::optional<BatchNorm> bn;
  Activation activation = Activation::relu;
  double dropout_rate = 0.0;
  bool frozen = false;

  std::size_t in_dim() const { return W.cols(); }
  std::size_t out_dim() const { return W.rows(); }
  std::size_t parameter_count() const;

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

using Network = std::vector<DenseLayer>;

std::size_t parameter_count(const Network& net);

// Learnable parameter blocks of a layer in a fixed order: W, b, [gamma, beta].
std::vector<std::span<double>> parameter_blocks(DenseLayer& layer);
std::vector<std::span<const double>> parameter_blocks(const DenseLayer& layer);

// Glorot-uniform weights, zero biases; deterministic per seed. Softmax is only
// allowed on the last layer. Throws ValidationError.
Network init_network(std::span<const LayerSpec> specs, std::size_t input_dim, std::uint64_t seed);

// Checks finite parameters and chained shapes. Throws ValidationError.
void validate(const Network& net);

// train: dropout active, batch-norm uses batch statistics.
// eval:  no dropout, running statistics, no trace kept.
// tune:  like eval but keeps the trace so the pass can be backpropagated.
enum class Mode { train, eval, tune };

struct LayerCache {
  Matrix pre;          // post-batch-norm pre-activation
  Matrix normalized;   // x_hat, batch-norm layers only
  std::vector<double> inv_std;
  Matrix activated;    // act(pre), before dropout
  Matrix mask;         // dropout multipliers, train mode with dropout only
  std::vector<double> batch_mean;
  std::vector<double> batch_var;
};

struct ForwardTrace {
  Mode mode = Mode::eval;
  // deltas[0] = x, deltas[i] = output of layer i (after dropout).
  std::vector<Matrix> deltas;
  std::vector<LayerCache> caches;  // empty in eval mode

  const Matrix& output() const { return deltas.back(); }
  // Post-activation of layer i before dropout (falls back to deltas in eval).
  const Matrix& activated(std::size_t layer) const;
};

// Throws ValidationError on NaN/inf input or a width mismatch.
ForwardTrace forward(const Network& net, const Matrix& x, Mode mode,
                     std::uint64_t dropout_seed = 0);

// Output of an eval-mode pass.
Matrix infer(const Network& net, const Matrix& x);

// Folds the batch statistics of a train-mode trace into the running stats.
void update_running_stats(Network& net, const ForwardTrace& trace);

Matrix relu(const Matrix& v);
Matrix sigmoid(const Matrix& v);
Matrix softmax(const Matrix& v);  // row-wise, max-subtracted
double sigmoid(double v);

inline constexpr double kProbClip = 1e-12;

// -sum_i y_i log p_i, batch mean; p clipped to [1e-12, 1].
double cross_entropy(const Matrix& probs, const Matrix& y_onehot);
Matrix cross_entropy_grad(const Matrix& probs, const Matrix& y_onehot);

// -(1/|S|) sum_i [s_i log p_i + (1 - s_i) log(1 - p_i)], batch mean;
// p clipped to [1e-12, 1 - 1e-12].
double binary_cross_entropy(const Matrix& probs, const Matrix& s_multihot);
Matrix binary_cross_entropy_grad(const Matrix& probs, const Matrix& s_multihot);

struct LayerGrads {
  Matrix dW;
  std::vector<double> db;
  std::vector<double> dgamma;
  std::vector<double> dbeta;

  std::vector<std::span<double>> blocks();
  std::vector<std::span<const double>> blocks() const;
};

struct Gradients {
  std::vector<LayerGrads> layers;
  // d_activated[i] = dL/d(delta_i) with delta_0 = x and, for i >= 1, the
  // post-activation of layer i-1 before dropout.
  std::vector<Matrix> d_activated;

  double max_abs() const;
};

// Extra loss gradient entering at the post-activation of `layer`.
struct GradInjection {
  std::size_t layer = 0;
  const Matrix* grad = nullptr;
};

// Backpropagates `grad_output` (dL/d output of the last layer) plus any
// injections. Frozen layers get exactly zero parameter gradients but still
// pass gradients to earlier layers. Throws UsageError on an eval-mode trace.
Gradients backward(const Network& net, const ForwardTrace& trace, const Matrix& grad_output,
                   std::span<const GradInjection> injections = {});

Gradients zero_gradients(const Network& net);

enum class OptimizerKind { sgd, adam };

std::string_view to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(std::string_view s);

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t t = 0;
  // Adam moments, one vector per parameter block (layer-major).
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static OptimizerState sgd(double lr) { return make(OptimizerKind::sgd, lr); }
  static OptimizerState adam(double lr) { return make(OptimizerKind::adam, lr); }
  static OptimizerState make(OptimizerKind kind, double lr) {
    OptimizerState s;
    s.kind = kind;
    s.learning_rate = lr;
    return s;
  }
};

// theta -= lr_scale * eta * grad, skipping frozen layers.
void sgd_step(Network& net, const Gradients& grads, OptimizerState& state, double lr_scale = 1.0);
// Bias-corrected Adam, skipping frozen layers.
void adam_step(Network& net, const Gradients& grads, OptimizerState& state, double lr_scale = 1.0);
// Dispatches on state.kind.
void step(Network& net, const Gradients& grads, OptimizerState& state, double lr_scale = 1.0);

// Throws ValidationError on an out-of-range index.
void set_frozen(Network& net, std::span<const std::size_t> indices, bool frozen);

// Central differences (L(theta + h) - L(theta - h)) / 2h for every parameter,
// including frozen ones. Meant for small networks.
Gradients finite_diff_grad(const Network& net,
                           const std::function<double(const Network&)>& loss_fn, double h);

// Largest |a - b| / max(|a|, |b|, floor) over all parameter entries.
double max_relative_error(const Gradients& a, const Gradients& b, double floor = 1e-6);

}  // namespace joel::nn
