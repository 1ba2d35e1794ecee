#include "joel/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "joel/error.hpp"
#include "joel/kernels.hpp"
#include "joel/rng.hpp"

namespace joel::nn {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity:
      return "identity";
    case Activation::relu:
      return "relu";
    case Activation::sigmoid:
      return "sigmoid";
    case Activation::softmax:
      return "softmax";
  }
  return "identity";
}

Activation activation_from_string(std::string_view s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "softmax") return Activation::softmax;
  throw ValidationError("unknown activation \"" + std::string(s) + "\"");
}

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind optimizer_from_string(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ValidationError("unknown optimizer \"" + std::string(s) + "\"");
}

std::size_t DenseLayer::parameter_count() const {
  return W.size() + b.size() + (bn ? bn->gamma.size() + bn->beta.size() : 0);
}

std::size_t parameter_count(const Network& net) {
  std::size_t n = 0;
  for (const auto& l : net) n += l.parameter_count();
  return n;
}

std::vector<std::span<double>> parameter_blocks(DenseLayer& layer) {
  std::vector<std::span<double>> blocks{layer.W.flat(), std::span<double>(layer.b)};
  if (layer.bn) {
    blocks.emplace_back(layer.bn->gamma);
    blocks.emplace_back(layer.bn->beta);
  }
  return blocks;
}

std::vector<std::span<const double>> parameter_blocks(const DenseLayer& layer) {
  std::vector<std::span<const double>> blocks{layer.W.flat(), std::span<const double>(layer.b)};
  if (layer.bn) {
    blocks.emplace_back(layer.bn->gamma);
    blocks.emplace_back(layer.bn->beta);
  }
  return blocks;
}

std::vector<std::span<double>> LayerGrads::blocks() {
  std::vector<std::span<double>> out{dW.flat(), std::span<double>(db)};
  if (!dgamma.empty() || !dbeta.empty()) {
    out.emplace_back(dgamma);
    out.emplace_back(dbeta);
  }
  return out;
}

std::vector<std::span<const double>> LayerGrads::blocks() const {
  std::vector<std::span<const double>> out{dW.flat(), std::span<const double>(db)};
  if (!dgamma.empty() || !dbeta.empty()) {
    out.emplace_back(dgamma);
    out.emplace_back(dbeta);
  }
  return out;
}

Network init_network(std::span<const LayerSpec> specs, std::size_t input_dim, std::uint64_t seed) {
  if (input_dim == 0) throw ValidationError("input dimension must be positive");
  if (specs.empty()) throw ValidationError("network needs at least one layer");
  Rng rng(seed);
  Network net;
  std::size_t fan_in = input_dim;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    if (s.width == 0) throw ValidationError("layer " + std::to_string(i) + ": zero width");
    if (s.activation == Activation::softmax && i + 1 != specs.size()) {
      throw ValidationError("layer " + std::to_string(i) + ": softmax is only allowed on the output layer");
    }
    if (!(s.dropout_rate >= 0.0 && s.dropout_rate < 1.0)) {
      throw ValidationError("layer " + std::to_string(i) + ": dropout rate must be in [0, 1)");
    }
    DenseLayer layer;
    layer.W = Matrix(s.width, fan_in);
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + s.width));
    for (double& w : layer.W.flat()) w = rng.uniform(-a, a);
    layer.b.assign(s.width, 0.0);
    if (s.batch_norm) {
      BatchNorm bn;
      bn.gamma.assign(s.width, 1.0);
      bn.beta.assign(s.width, 0.0);
      bn.running_mean.assign(s.width, 0.0);
      bn.running_var.assign(s.width, 1.0);
      layer.bn = std::move(bn);
    }
    layer.activation = s.activation;
    layer.dropout_rate = s.dropout_rate;
    net.push_back(std::move(layer));
    fan_in = s.width;
  }
  return net;
}

void validate(const Network& net) {
  for (std::size_t i = 0; i < net.size(); ++i) {
    const DenseLayer& l = net[i];
    const std::string where = "layer " + std::to_string(i) + ": ";
    if (l.b.size() != l.out_dim()) throw ValidationError(where + "bias width mismatch");
    if (i > 0 && l.in_dim() != net[i - 1].out_dim()) {
      throw ValidationError(where + "input width " + std::to_string(l.in_dim()) +
                            " does not match previous layer width " +
                            std::to_string(net[i - 1].out_dim()));
    }
    if (l.activation == Activation::softmax && i + 1 != net.size()) {
      throw ValidationError(where + "softmax is only allowed on the output layer");
    }
    if (l.bn) {
      const auto w = l.out_dim();
      if (l.bn->gamma.size() != w || l.bn->beta.size() != w || l.bn->running_mean.size() != w ||
          l.bn->running_var.size() != w) {
        throw ValidationError(where + "batch-norm width mismatch");
      }
    }
    for (const auto& block : parameter_blocks(l)) {
      for (double v : block) {
        if (!std::isfinite(v)) throw ValidationError(where + "non-finite parameter");
      }
    }
  }
}

double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

Matrix relu(const Matrix& v) {
  Matrix out(v.rows(), v.cols());
  kernels::active().relu(v.flat(), out.flat());
  return out;
}

Matrix sigmoid(const Matrix& v) {
  Matrix out(v.rows(), v.cols());
  auto src = v.flat();
  auto dst = out.flat();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = sigmoid(src[i]);
  return out;
}

Matrix softmax(const Matrix& v) {
  Matrix out(v.rows(), v.cols());
  for (std::size_t r = 0; r < v.rows(); ++r) {
    const auto in = v.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    for (double& x : o) x /= sum;
  }
  return out;
}

namespace {

Matrix activate(Activation a, const Matrix& z) {
  switch (a) {
    case Activation::identity:
      return z;
    case Activation::relu:
      return relu(z);
    case Activation::sigmoid:
      return sigmoid(z);
    case Activation::softmax:
      return softmax(z);
  }
  return z;
}

void check_finite_input(const Matrix& x) {
  for (double v : x.flat()) {
    if (std::isnan(v)) throw ValidationError("NaN in network input");
    if (!std::isfinite(v)) throw ValidationError("non-finite value in network input");
  }
}

}  // namespace

const Matrix& ForwardTrace::activated(std::size_t layer) const {
  if (caches.empty()) return deltas.at(layer + 1);
  return caches.at(layer).activated;
}

ForwardTrace forward(const Network& net, const Matrix& x, Mode mode, std::uint64_t dropout_seed) {
  if (net.empty()) throw ValidationError("empty network");
  if (x.cols() != net.front().in_dim()) {
    throw ValidationError("input width " + std::to_string(x.cols()) + " != network input " +
                          std::to_string(net.front().in_dim()));
  }
  check_finite_input(x);
  const auto& K = kernels::active();
  const std::size_t batch = x.rows();
  const bool keep = mode != Mode::eval;

  ForwardTrace trace;
  trace.mode = mode;
  trace.deltas.reserve(net.size() + 1);
  trace.deltas.push_back(x);
  if (keep) trace.caches.resize(net.size());

  for (std::size_t li = 0; li < net.size(); ++li) {
    const DenseLayer& layer = net[li];
    const Matrix& in = trace.deltas[li];
    const std::size_t out_dim = layer.out_dim();
    Matrix z(batch, out_dim);
    for (std::size_t r = 0; r < batch; ++r) {
      const auto xr = in.row(r);
      for (std::size_t o = 0; o < out_dim; ++o) z(r, o) = K.dot(layer.W.row(o), xr) + layer.b[o];
    }

    LayerCache cache;
    if (layer.bn) {
      const BatchNorm& bn = *layer.bn;
      std::vector<double> mean(out_dim, 0.0);
      std::vector<double> var(out_dim, 0.0);
      if (mode == Mode::train) {
        for (std::size_t r = 0; r < batch; ++r) {
          for (std::size_t o = 0; o < out_dim; ++o) mean[o] += z(r, o);
        }
        for (double& m : mean) m /= static_cast<double>(batch);
        for (std::size_t r = 0; r < batch; ++r) {
          for (std::size_t o = 0; o < out_dim; ++o) {
            const double d = z(r, o) - mean[o];
            var[o] += d * d;
          }
        }
        for (double& v : var) v /= static_cast<double>(batch);
      } else {
        mean = bn.running_mean;
        var = bn.running_var;
      }
      std::vector<double> inv_std(out_dim);
      for (std::size_t o = 0; o < out_dim; ++o) inv_std[o] = 1.0 / std::sqrt(var[o] + bn.epsilon);
      Matrix normalized(batch, out_dim);
      for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t o = 0; o < out_dim; ++o) {
          normalized(r, o) = (z(r, o) - mean[o]) * inv_std[o];
          z(r, o) = bn.gamma[o] * normalized(r, o) + bn.beta[o];
        }
      }
      if (keep) {
        cache.normalized = std::move(normalized);
        cache.inv_std = std::move(inv_std);
        cache.batch_mean = std::move(mean);
        cache.batch_var = std::move(var);
      }
    }

    Matrix a = activate(layer.activation, z);
    Matrix out;
    if (mode == Mode::train && layer.dropout_rate > 0.0) {
      Rng rng(mix_seed(dropout_seed, li));
      const double keep_prob = 1.0 - layer.dropout_rate;
      const double scale = 1.0 / keep_prob;
      Matrix mask(batch, out_dim);
      for (double& m : mask.flat()) m = rng.bernoulli(keep_prob) ? scale : 0.0;
      out = a;
      auto of = out.flat();
      auto mf = mask.flat();
      for (std::size_t i = 0; i < of.size(); ++i) of[i] *= mf[i];
      if (keep) cache.mask = std::move(mask);
    } else {
      out = a;
    }
    if (keep) {
      cache.pre = std::move(z);
      cache.activated = std::move(a);
      trace.caches[li] = std::move(cache);
    }
    trace.deltas.push_back(std::move(out));
  }
  return trace;
}

Matrix infer(const Network& net, const Matrix& x) {
  ForwardTrace t = forward(net, x, Mode::eval);
  return std::move(t.deltas.back());
}

void update_running_stats(Network& net, const ForwardTrace& trace) {
  if (trace.mode != Mode::train) return;
  for (std::size_t li = 0; li < net.size(); ++li) {
    if (!net[li].bn) continue;
    BatchNorm& bn = *net[li].bn;
    const LayerCache& c = trace.caches.at(li);
    for (std::size_t o = 0; o < bn.running_mean.size(); ++o) {
      bn.running_mean[o] = bn.momentum * bn.running_mean[o] + (1.0 - bn.momentum) * c.batch_mean[o];
      bn.running_var[o] = bn.momentum * bn.running_var[o] + (1.0 - bn.momentum) * c.batch_var[o];
    }
  }
}

double cross_entropy(const Matrix& probs, const Matrix& y) {
  if (probs.rows() != y.rows() || probs.cols() != y.cols()) {
    throw ValidationError("cross_entropy: shape mismatch");
  }
  if (probs.rows() == 0) return 0.0;
  double total = 0.0;
  auto p = probs.flat();
  auto t = y.flat();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (t[i] != 0.0) total -= t[i] * std::log(std::clamp(p[i], kProbClip, 1.0));
  }
  return total / static_cast<double>(probs.rows());
}

Matrix cross_entropy_grad(const Matrix& probs, const Matrix& y) {
  Matrix g(probs.rows(), probs.cols());
  if (probs.rows() == 0) return g;
  const double inv_batch = 1.0 / static_cast<double>(probs.rows());
  auto p = probs.flat();
  auto t = y.flat();
  auto out = g.flat();
  for (std::size_t i = 0; i < p.size(); ++i) {
    out[i] = (t[i] != 0.0 && p[i] > kProbClip && p[i] <= 1.0) ? -t[i] / p[i] * inv_batch : 0.0;
  }
  return g;
}

double binary_cross_entropy(const Matrix& probs, const Matrix& s) {
  if (probs.rows() != s.rows() || probs.cols() != s.cols()) {
    throw ValidationError("binary_cross_entropy: shape mismatch");
  }
  if (probs.rows() == 0 || probs.cols() == 0) return 0.0;
  double total = 0.0;
  auto p = probs.flat();
  auto t = s.flat();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbClip, 1.0 - kProbClip);
    if (t[i] != 0.0) total -= t[i] * std::log(q);
    if (t[i] != 1.0) total -= (1.0 - t[i]) * std::log(1.0 - q);
  }
  return total / static_cast<double>(probs.cols()) / static_cast<double>(probs.rows());
}

Matrix binary_cross_entropy_grad(const Matrix& probs, const Matrix& s) {
  Matrix g(probs.rows(), probs.cols());
  if (probs.rows() == 0 || probs.cols() == 0) return g;
  const double scale = 1.0 / static_cast<double>(probs.cols()) / static_cast<double>(probs.rows());
  auto p = probs.flat();
  auto t = s.flat();
  auto out = g.flat();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < kProbClip || p[i] > 1.0 - kProbClip) {
      out[i] = 0.0;  // flat region of the clipped loss
      continue;
    }
    out[i] = (-t[i] / p[i] + (1.0 - t[i]) / (1.0 - p[i])) * scale;
  }
  return g;
}

double Gradients::max_abs() const {
  double m = 0.0;
  for (const auto& l : layers) {
    for (const auto& block : l.blocks()) {
      for (double v : block) m = std::max(m, std::abs(v));
    }
  }
  return m;
}

Gradients zero_gradients(const Network& net) {
  Gradients g;
  g.layers.resize(net.size());
  for (std::size_t i = 0; i < net.size(); ++i) {
    const DenseLayer& l = net[i];
    g.layers[i].dW = Matrix(l.out_dim(), l.in_dim());
    g.layers[i].db.assign(l.out_dim(), 0.0);
    if (l.bn) {
      g.layers[i].dgamma.assign(l.out_dim(), 0.0);
      g.layers[i].dbeta.assign(l.out_dim(), 0.0);
    }
  }
  return g;
}

Gradients backward(const Network& net, const ForwardTrace& trace, const Matrix& grad_output,
                   std::span<const GradInjection> injections) {
  if (trace.mode == Mode::eval || trace.caches.size() != net.size()) {
    throw UsageError("backward needs a train- or tune-mode trace of this network");
  }
  const auto& K = kernels::active();
  const std::size_t batch = trace.deltas.front().rows();
  if (grad_output.rows() != batch || grad_output.cols() != net.back().out_dim()) {
    throw ValidationError("backward: output gradient shape mismatch");
  }

  Gradients grads = zero_gradients(net);
  grads.d_activated.resize(net.size() + 1);

  Matrix g_out = grad_output;  // dL / d deltas[li + 1]
  for (std::size_t li = net.size(); li-- > 0;) {
    const DenseLayer& layer = net[li];
    const LayerCache& cache = trace.caches[li];
    const std::size_t out_dim = layer.out_dim();
    const std::size_t in_dim = layer.in_dim();

    Matrix g_act = std::move(g_out);
    if (!cache.mask.empty()) {
      auto gf = g_act.flat();
      auto mf = cache.mask.flat();
      for (std::size_t i = 0; i < gf.size(); ++i) gf[i] *= mf[i];
    }
    for (const GradInjection& inj : injections) {
      if (inj.layer != li || inj.grad == nullptr) continue;
      if (inj.grad->rows() != batch || inj.grad->cols() != out_dim) {
        throw ValidationError("backward: injected gradient shape mismatch");
      }
      auto gf = g_act.flat();
      K.axpy(1.0, inj.grad->flat(), gf);
    }

    // through the activation
    Matrix g_z = g_act;
    switch (layer.activation) {
      case Activation::identity:
        break;
      case Activation::relu:
        K.relu_mask(cache.pre.flat(), g_z.flat());
        break;
      case Activation::sigmoid: {
        auto a = cache.activated.flat();
        auto gz = g_z.flat();
        for (std::size_t i = 0; i < gz.size(); ++i) gz[i] *= a[i] * (1.0 - a[i]);
        break;
      }
      case Activation::softmax:
        for (std::size_t r = 0; r < batch; ++r) {
          const auto a = cache.activated.row(r);
          auto gz = g_z.row(r);
          const double dot = K.dot(gz, a);
          for (std::size_t c = 0; c < out_dim; ++c) gz[c] = a[c] * (gz[c] - dot);
        }
        break;
    }
    grads.d_activated[li + 1] = std::move(g_act);

    // through batch norm: g_u = dL/d(W x + b)
    Matrix g_u = g_z;
    if (layer.bn) {
      const BatchNorm& bn = *layer.bn;
      LayerGrads& lg = grads.layers[li];
      std::vector<double> sum_g(out_dim, 0.0);
      std::vector<double> sum_g_xhat(out_dim, 0.0);
      for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double gxhat = g_z(r, o) * bn.gamma[o];
          sum_g[o] += gxhat;
          sum_g_xhat[o] += gxhat * cache.normalized(r, o);
          if (!layer.frozen) {
            lg.dgamma[o] += g_z(r, o) * cache.normalized(r, o);
            lg.dbeta[o] += g_z(r, o);
          }
        }
      }
      const double inv_b = 1.0 / static_cast<double>(batch);
      for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double gxhat = g_z(r, o) * bn.gamma[o];
          if (trace.mode == Mode::train) {
            g_u(r, o) = cache.inv_std[o] * (gxhat - inv_b * sum_g[o] -
                                            cache.normalized(r, o) * inv_b * sum_g_xhat[o]);
          } else {
            g_u(r, o) = cache.inv_std[o] * gxhat;
          }
        }
      }
    }

    const Matrix& input = trace.deltas[li];
    if (!layer.frozen) {
      LayerGrads& lg = grads.layers[li];
      for (std::size_t r = 0; r < batch; ++r) {
        const auto xr = input.row(r);
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double g = g_u(r, o);
          if (g != 0.0) K.axpy(g, xr, lg.dW.row(o));
          lg.db[o] += g;
        }
      }
    }
    Matrix g_in(batch, in_dim);
    for (std::size_t r = 0; r < batch; ++r) {
      auto gr = g_in.row(r);
      for (std::size_t o = 0; o < out_dim; ++o) {
        const double g = g_u(r, o);
        if (g != 0.0) K.axpy(g, layer.W.row(o), gr);
      }
    }
    g_out = std::move(g_in);
  }
  grads.d_activated[0] = std::move(g_out);
  return grads;
}

namespace {

void check_shapes(const Network& net, const Gradients& grads) {
  if (grads.layers.size() != net.size()) throw ValidationError("optimizer: layer count mismatch");
  for (std::size_t i = 0; i < net.size(); ++i) {
    const auto p = parameter_blocks(net[i]);
    const auto g = grads.layers[i].blocks();
    if (p.size() != g.size()) throw ValidationError("optimizer: block mismatch in layer " + std::to_string(i));
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (p[k].size() != g[k].size()) {
        throw ValidationError("optimizer: shape mismatch in layer " + std::to_string(i));
      }
    }
  }
}

}  // namespace

void sgd_step(Network& net, const Gradients& grads, OptimizerState& state, double lr_scale) {
  if (state.kind != OptimizerKind::sgd) throw UsageError("sgd_step with a non-SGD state");
  check_shapes(net, grads);
  const auto& K = kernels::active();
  const double lr = state.learning_rate * lr_scale;
  for (std::size_t i = 0; i < net.size(); ++i) {
    if (net[i].frozen) continue;
    auto p = parameter_blocks(net[i]);
    const auto g = grads.layers[i].blocks();
    for (std::size_t k = 0; k < p.size(); ++k) K.axpy(-lr, g[k], p[k]);
  }
  ++state.t;
}

void adam_step(Network& net, const Gradients& grads, OptimizerState& state, double lr_scale) {
  if (state.kind != OptimizerKind::adam) throw UsageError("adam_step with a non-Adam state");
  check_shapes(net, grads);
  // lazily size the moment buffers to mirror the parameters
  std::size_t blocks = 0;
  for (const auto& l : net) blocks += parameter_blocks(l).size();
  if (state.m.size() != blocks) {
    state.m.clear();
    state.v.clear();
    for (const auto& l : net) {
      for (const auto& p : parameter_blocks(l)) {
        state.m.emplace_back(p.size(), 0.0);
        state.v.emplace_back(p.size(), 0.0);
      }
    }
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const kernels::AdamParams params{state.learning_rate * lr_scale, state.beta1, state.beta2,
                                   state.epsilon, 1.0 - std::pow(state.beta1, t),
                                   1.0 - std::pow(state.beta2, t)};
  const auto& K = kernels::active();
  std::size_t slot = 0;
  for (std::size_t i = 0; i < net.size(); ++i) {
    auto p = parameter_blocks(net[i]);
    const auto g = grads.layers[i].blocks();
    for (std::size_t k = 0; k < p.size(); ++k, ++slot) {
      if (net[i].frozen) continue;
      if (state.m[slot].size() != p[k].size()) throw ValidationError("adam: moment shape mismatch");
      K.adam(p[k], g[k], state.m[slot], state.v[slot], params);
    }
  }
}

void step(Network& net, const Gradients& grads, OptimizerState& state, double lr_scale) {
  if (state.kind == OptimizerKind::sgd) {
    sgd_step(net, grads, state, lr_scale);
  } else {
    adam_step(net, grads, state, lr_scale);
  }
}

void set_frozen(Network& net, std::span<const std::size_t> indices, bool frozen) {
  for (std::size_t i : indices) {
    if (i >= net.size()) {
      throw ValidationError("set_frozen: layer index " + std::to_string(i) + " out of range");
    }
  }
  for (std::size_t i : indices) net[i].frozen = frozen;
}

Gradients finite_diff_grad(const Network& net,
                           const std::function<double(const Network&)>& loss_fn, double h) {
  if (!(h > 0.0)) throw ValidationError("finite difference step must be positive");
  Network work = net;
  Gradients g = zero_gradients(net);
  for (std::size_t i = 0; i < work.size(); ++i) {
    auto params = parameter_blocks(work[i]);
    auto out = g.layers[i].blocks();
    for (std::size_t k = 0; k < params.size(); ++k) {
      for (std::size_t j = 0; j < params[k].size(); ++j) {
        const double saved = params[k][j];
        params[k][j] = saved + h;
        const double up = loss_fn(work);
        params[k][j] = saved - h;
        const double down = loss_fn(work);
        params[k][j] = saved;
        out[k][j] = (up - down) / (2.0 * h);
      }
    }
  }
  return g;
}

double max_relative_error(const Gradients& a, const Gradients& b, double floor) {
  if (a.layers.size() != b.layers.size()) throw ValidationError("gradient layer count mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const auto ba = a.layers[i].blocks();
    const auto bb = b.layers[i].blocks();
    if (ba.size() != bb.size()) throw ValidationError("gradient block mismatch");
    for (std::size_t k = 0; k < ba.size(); ++k) {
      for (std::size_t j = 0; j < ba[k].size(); ++j) {
        const double denom = std::max({std::abs(ba[k][j]), std::abs(bb[k][j]), floor});
        worst = std::max(worst, std::abs(ba[k][j] - bb[k][j]) / denom);
      }
    }
  }
  return worst;
}

}  // namespace joel::nn
