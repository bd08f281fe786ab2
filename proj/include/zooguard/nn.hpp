#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "rng.hpp"

namespace zooguard::nn {

enum class Activation { identity, relu, sigmoid };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "identity";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  throw Error(ErrorCode::config_error, "unknown activation '" + s + "'");
}

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::sigmoid:
      if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
      else {
        const double e = std::exp(x);
        return e / (1.0 + e);
      }
  }
  return x;
}

// derivative expressed through the activation output
inline double activate_derivative(Activation a, double pre, double post) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
    case Activation::sigmoid: return post * (1.0 - post);
  }
  return 1.0;
}

/// Affine map followed by an element-wise activation. Weights are row-major
/// (outputs x inputs).
struct DenseLayer {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  Activation activation = Activation::identity;
  std::vector<double> weights;
  std::vector<double> bias;

  DenseLayer() = default;
  DenseLayer(std::size_t in, std::size_t out, Activation act)
      : inputs(in), outputs(out), activation(act), weights(in * out, 0.0), bias(out, 0.0) {}

  double& w(std::size_t o, std::size_t i) { return weights[o * inputs + i]; }
  double w(std::size_t o, std::size_t i) const { return weights[o * inputs + i]; }

  bool operator==(const DenseLayer&) const = default;
};

/// Pre- and post-activation values of every layer for one input; what
/// backprop needs.
struct Trace {
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> post;  // post[0] is the input
};

class Network {
 public:
  Network() = default;

  /// widths = {in, h1, ..., out}; `hidden` applies to every layer but the
  /// last, which uses `output`.
  Network(const std::vector<std::size_t>& widths, Activation hidden, Activation output, Rng& rng) {
    require(widths.size() >= 2, ErrorCode::precondition_violation, "network needs at least one layer");
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const bool last = l + 2 == widths.size();
      DenseLayer layer(widths[l], widths[l + 1], last ? output : hidden);
      // He init for ReLU layers, Glorot otherwise; both uniform
      const double fan_in = static_cast<double>(layer.inputs);
      const double fan_out = static_cast<double>(layer.outputs);
      const double limit = layer.activation == Activation::relu ? std::sqrt(6.0 / fan_in)
                                                                : std::sqrt(6.0 / (fan_in + fan_out));
      for (auto& v : layer.weights) v = rng.uniform(-limit, limit);
      layers_.push_back(std::move(layer));
    }
  }

  explicit Network(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    for (std::size_t l = 1; l < layers_.size(); ++l) {
      require(layers_[l].inputs == layers_[l - 1].outputs, ErrorCode::precondition_violation,
              "incompatible consecutive layer widths");
    }
  }

  std::size_t input_size() const { return layers_.empty() ? 0 : layers_.front().inputs; }
  std::size_t output_size() const { return layers_.empty() ? 0 : layers_.back().outputs; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& layers() noexcept { return layers_; }

  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w;
    if (layers_.empty()) return w;
    w.push_back(layers_.front().inputs);
    for (const auto& l : layers_) w.push_back(l.outputs);
    return w;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weights.size() + l.bias.size();
    return n;
  }

  std::vector<double> forward(std::span<const double> x) const {
    check_arity(x.size(), input_size(), "network input");
    std::vector<double> cur(x.begin(), x.end());
    std::vector<double> next;
    for (const auto& layer : layers_) {
      next.assign(layer.outputs, 0.0);
      for (std::size_t o = 0; o < layer.outputs; ++o) {
        const double* row = &layer.weights[o * layer.inputs];
        double s = layer.bias[o];
        for (std::size_t i = 0; i < layer.inputs; ++i) s += row[i] * cur[i];
        next[o] = activate(layer.activation, s);
      }
      cur.swap(next);
    }
    return cur;
  }

  void forward(std::span<const double> x, Trace& trace) const {
    check_arity(x.size(), input_size(), "network input");
    trace.pre.resize(layers_.size());
    trace.post.resize(layers_.size() + 1);
    trace.post[0].assign(x.begin(), x.end());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      const auto& in = trace.post[l];
      auto& pre = trace.pre[l];
      auto& post = trace.post[l + 1];
      pre.assign(layer.outputs, 0.0);
      post.assign(layer.outputs, 0.0);
      for (std::size_t o = 0; o < layer.outputs; ++o) {
        const double* row = &layer.weights[o * layer.inputs];
        double s = layer.bias[o];
        for (std::size_t i = 0; i < layer.inputs; ++i) s += row[i] * in[i];
        pre[o] = s;
        post[o] = activate(layer.activation, s);
      }
    }
  }

  /// Accumulates dLoss/dParameters into `grad` (flattened in the same order
  /// as flatten()) given dLoss/dOutput. `output_grad_is_preactivation` skips
  /// the last activation's derivative, for softmax + cross-entropy.
  void backward(const Trace& trace, std::span<const double> output_grad, std::span<double> grad,
                bool output_grad_is_preactivation = false) const {
    check_arity(grad.size(), parameter_count(), "gradient buffer");
    std::vector<std::size_t> offsets(layers_.size());
    std::size_t off = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      offsets[l] = off;
      off += layers_[l].weights.size() + layers_[l].bias.size();
    }

    std::vector<double> delta(output_grad.begin(), output_grad.end());
    std::vector<double> prev;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& layer = layers_[l];
      if (!(output_grad_is_preactivation && l + 1 == layers_.size())) {
        for (std::size_t o = 0; o < layer.outputs; ++o) {
          delta[o] *= activate_derivative(layer.activation, trace.pre[l][o], trace.post[l + 1][o]);
        }
      }
      const auto& in = trace.post[l];
      double* gw = &grad[offsets[l]];
      double* gb = gw + layer.weights.size();
      prev.assign(layer.inputs, 0.0);
      for (std::size_t o = 0; o < layer.outputs; ++o) {
        const double dlt = delta[o];
        if (dlt == 0.0) continue;
        const double* row = &layer.weights[o * layer.inputs];
        double* grow = gw + o * layer.inputs;
        for (std::size_t i = 0; i < layer.inputs; ++i) {
          grow[i] += dlt * in[i];
          prev[i] += dlt * row[i];
        }
        gb[o] += dlt;
      }
      delta.swap(prev);
    }
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& l : layers_) {
      out.insert(out.end(), l.weights.begin(), l.weights.end());
      out.insert(out.end(), l.bias.begin(), l.bias.end());
    }
    return out;
  }

  void unflatten(std::span<const double> params) {
    check_arity(params.size(), parameter_count(), "parameter vector");
    std::size_t off = 0;
    for (auto& l : layers_) {
      std::copy_n(params.begin() + static_cast<std::ptrdiff_t>(off), l.weights.size(), l.weights.begin());
      off += l.weights.size();
      std::copy_n(params.begin() + static_cast<std::ptrdiff_t>(off), l.bias.size(), l.bias.begin());
      off += l.bias.size();
    }
  }

  bool all_finite() const {
    for (const auto& l : layers_) {
      for (double v : l.weights) if (!std::isfinite(v)) return false;
      for (double v : l.bias) if (!std::isfinite(v)) return false;
    }
    return true;
  }

  bool operator==(const Network&) const = default;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (const auto& l : layers_) {
      nlohmann::ordered_json j;
      j["inputs"] = l.inputs;
      j["outputs"] = l.outputs;
      j["activation"] = to_string(l.activation);
      j["weights"] = l.weights;
      j["bias"] = l.bias;
      layers.push_back(std::move(j));
    }
    return layers;
  }

  static Network from_json(const nlohmann::json& j) {
    std::vector<DenseLayer> layers;
    for (const auto& jl : j) {
      DenseLayer l(jl.at("inputs").get<std::size_t>(), jl.at("outputs").get<std::size_t>(),
                   activation_from_string(jl.at("activation").get<std::string>()));
      l.weights = jl.at("weights").get<std::vector<double>>();
      l.bias = jl.at("bias").get<std::vector<double>>();
      check_arity(l.weights.size(), l.inputs * l.outputs, "layer weights");
      check_arity(l.bias.size(), l.outputs, "layer bias");
      layers.push_back(std::move(l));
    }
    return Network(std::move(layers));
  }

 private:
  std::vector<DenseLayer> layers_;
};

inline void softmax_inplace(std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (auto& v : z) {
    v = std::exp(v - m);
    s += v;
  }
  for (auto& v : z) v /= s;
}

enum class Optimizer { momentum_sgd, adam };

struct TrainOptions {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  Optimizer optimizer = Optimizer::momentum_sgd;
  std::uint64_t seed = 0;
};

/// Per-sample loss: fills dLoss/dOutput (or dLoss/dPreactivation of the last
/// layer, see Network::backward) and returns the loss value.
template <typename LossFn>
concept SampleLoss = requires(LossFn f, const Trace& t, std::size_t i, std::vector<double>& g) {
  { f(t, i, g) } -> std::convertible_to<double>;
};

/// Mini-batch training loop shared by the classifier and the autoencoder.
/// Returns the mean loss of the final epoch.
template <SampleLoss LossFn>
double train(Network& net, const std::vector<std::vector<double>>& inputs, LossFn&& loss,
             const TrainOptions& opt, bool output_grad_is_preactivation = false) {
  require(!inputs.empty(), ErrorCode::empty_dataset, "no training samples");
  require(opt.batch_size >= 1 && opt.epochs >= 1, ErrorCode::precondition_violation,
          "epochs and batch_size must be >= 1");
  Rng rng(opt.seed);
  std::vector<double> params = net.flatten();
  const std::size_t n_params = params.size();
  std::vector<double> grad(n_params), vel(n_params, 0.0), m(n_params, 0.0), v(n_params, 0.0);
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Trace trace;
  std::vector<double> out_grad;
  double epoch_loss = 0.0;
  std::uint64_t step = 0;
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        net.forward(inputs[i], trace);
        out_grad.assign(net.output_size(), 0.0);
        epoch_loss += loss(trace, i, out_grad);
        net.backward(trace, out_grad, grad, output_grad_is_preactivation);
      }
      const double scale = 1.0 / static_cast<double>(end - start);
      ++step;
      if (opt.optimizer == Optimizer::momentum_sgd) {
        for (std::size_t p = 0; p < n_params; ++p) {
          vel[p] = opt.momentum * vel[p] - opt.learning_rate * grad[p] * scale;
          params[p] += vel[p];
        }
      } else {
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (std::size_t p = 0; p < n_params; ++p) {
          const double g = grad[p] * scale;
          m[p] = beta1 * m[p] + (1.0 - beta1) * g;
          v[p] = beta2 * v[p] + (1.0 - beta2) * g * g;
          params[p] -= opt.learning_rate * (m[p] / c1) / (std::sqrt(v[p] / c2) + eps);
        }
      }
      net.unflatten(params);
    }
    epoch_loss /= static_cast<double>(inputs.size());
    if (!std::isfinite(epoch_loss) || !net.all_finite()) {
      throw Error(ErrorCode::diverged_training, "loss became non-finite in epoch " + std::to_string(epoch));
    }
  }
  return epoch_loss;
}

}  // namespace zooguard::nn
