#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "contrastsurv/error.hpp"
#include "contrastsurv/rng.hpp"

#include <nlohmann/json.hpp>

namespace contrastsurv {

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Dense MLP: sigmoid hidden layers, linear output.
struct MLPArchitecture {
  std::vector<int> layer_widths;  // input, hidden..., output

  int n_layers() const { return static_cast<int>(layer_widths.size()) - 1; }
};

inline void validate_architecture(const MLPArchitecture& arch) {
  if (arch.layer_widths.size() < 3)
    throw ValidationError("architecture needs at least one hidden layer");
  for (const int w : arch.layer_widths)
    if (w < 1) throw ValidationError("layer widths must be positive");
}

struct MLPParams {
  std::vector<Eigen::MatrixXd> weights;  // weights[k]: out_k x in_k
  std::vector<Eigen::VectorXd> biases;

  int n_layers() const { return static_cast<int>(weights.size()); }
  int input_width() const { return static_cast<int>(weights.front().cols()); }
  int output_width() const { return static_cast<int>(weights.back().rows()); }

  MLPArchitecture architecture() const {
    MLPArchitecture arch;
    arch.layer_widths.push_back(input_width());
    for (const auto& w : weights) arch.layer_widths.push_back(static_cast<int>(w.rows()));
    return arch;
  }
};

struct TrainConfig {
  double learning_rate = 0.1;
  double l2_weight = 0.0;
  int batch_size = 32;
  int max_epochs = 100;
  int patience = 10;
  std::uint64_t seed = 0;
};

inline void validate_train_config(const TrainConfig& cfg) {
  if (!(cfg.learning_rate >= 0.0)) throw ValidationError("learning_rate must be >= 0");
  if (cfg.l2_weight < 0.0) throw ValidationError("l2_weight must be >= 0");
  if (cfg.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (cfg.max_epochs < 0) throw ValidationError("max_epochs must be >= 0");
  if (cfg.patience < 1) throw ValidationError("patience must be >= 1");
}

// Glorot-uniform weights, zero biases. Deterministic in the seed.
inline MLPParams init_params(const MLPArchitecture& arch, std::uint64_t seed) {
  validate_architecture(arch);
  Rng rng(seed);
  MLPParams p;
  for (std::size_t k = 0; k + 1 < arch.layer_widths.size(); ++k) {
    const int fan_in = arch.layer_widths[k];
    const int fan_out = arch.layer_widths[k + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Eigen::MatrixXd w(fan_out, fan_in);
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-bound, bound);
    p.weights.push_back(std::move(w));
    p.biases.push_back(Eigen::VectorXd::Zero(fan_out));
  }
  return p;
}

// Batched forward pass. Returns one activation matrix per layer:
// acts[0] is the input (n x d), acts[k] the output of layer k.
inline std::vector<Eigen::MatrixXd> forward_batch(const MLPParams& p, const Eigen::MatrixXd& x) {
  if (x.cols() != p.input_width())
    throw ValidationError("input width " + std::to_string(x.cols()) + " does not match network input " +
                          std::to_string(p.input_width()));
  std::vector<Eigen::MatrixXd> acts;
  acts.reserve(p.weights.size() + 1);
  acts.push_back(x);
  const int n_layers = p.n_layers();
  for (int k = 0; k < n_layers; ++k) {
    Eigen::MatrixXd z =
        (acts.back() * p.weights[static_cast<std::size_t>(k)].transpose()).rowwise() +
        p.biases[static_cast<std::size_t>(k)].transpose();
    if (k + 1 < n_layers) z = z.unaryExpr([](double v) { return sigmoid(v); });
    acts.push_back(std::move(z));
  }
  return acts;
}

inline std::vector<Eigen::VectorXd> forward(const MLPParams& p, const Eigen::VectorXd& x) {
  const auto acts = forward_batch(p, x.transpose());
  std::vector<Eigen::VectorXd> out;
  out.reserve(acts.size());
  for (const auto& a : acts) out.push_back(a.row(0).transpose());
  return out;
}

struct ParamGradients {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
};

// Backpropagation from a gradient taken at the output of layer `tap_layer`
// (1-based; the last layer is the network output). Layers above the tap get
// no data gradient. The l2 penalty gradient l2_weight * theta is added once,
// to every parameter.
inline ParamGradients backward_batch(const MLPParams& p, const std::vector<Eigen::MatrixXd>& acts,
                                     int tap_layer, const Eigen::MatrixXd& upstream_grad,
                                     double l2_weight) {
  const int n_layers = p.n_layers();
  if (tap_layer < 1 || tap_layer > n_layers) throw ValidationError("invalid tap layer");
  const auto& tapped = acts[static_cast<std::size_t>(tap_layer)];
  if (upstream_grad.rows() != tapped.rows() || upstream_grad.cols() != tapped.cols())
    throw ValidationError("upstream gradient shape does not match the tapped layer");

  ParamGradients g;
  g.weights.resize(static_cast<std::size_t>(n_layers));
  g.biases.resize(static_cast<std::size_t>(n_layers));
  for (int k = 0; k < n_layers; ++k) {
    g.weights[static_cast<std::size_t>(k)] =
        l2_weight * p.weights[static_cast<std::size_t>(k)];
    g.biases[static_cast<std::size_t>(k)] = l2_weight * p.biases[static_cast<std::size_t>(k)];
  }

  // delta: gradient w.r.t. pre-activation of the current layer.
  Eigen::MatrixXd delta = upstream_grad;
  if (tap_layer < n_layers) {
    const auto& a = acts[static_cast<std::size_t>(tap_layer)];
    delta = delta.cwiseProduct(a.cwiseProduct((1.0 - a.array()).matrix()));
  }
  for (int k = tap_layer - 1; k >= 0; --k) {
    g.weights[static_cast<std::size_t>(k)].noalias() +=
        delta.transpose() * acts[static_cast<std::size_t>(k)];
    g.biases[static_cast<std::size_t>(k)] += delta.colwise().sum().transpose();
    if (k > 0) {
      Eigen::MatrixXd back = delta * p.weights[static_cast<std::size_t>(k)];
      const auto& a = acts[static_cast<std::size_t>(k)];
      delta = back.cwiseProduct(a.cwiseProduct((1.0 - a.array()).matrix()));
    }
  }
  return g;
}

inline ParamGradients backward(const MLPParams& p, const Eigen::VectorXd& x, int tap_layer,
                               const Eigen::VectorXd& upstream_grad, double l2_weight) {
  const auto acts = forward_batch(p, x.transpose());
  return backward_batch(p, acts, tap_layer, upstream_grad.transpose(), l2_weight);
}

// Loss over one mini-batch, given the tapped activations for the batch rows.
// Returns the scalar loss and its gradient w.r.t. the tapped activations.
using BatchLossFn = std::function<std::pair<double, Eigen::MatrixXd>(
    const std::vector<int>& batch, const Eigen::MatrixXd& tapped)>;

// Mini-batch index sets for a given epoch (callers own shuffling policy).
using BatchProviderFn = std::function<std::vector<std::vector<int>>(int epoch)>;

// Validation score; smaller is better.
using ValidationFn = std::function<double(const MLPParams&)>;

struct TrainResult {
  MLPParams params;  // parameters from the best validation epoch
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  int best_epoch = 0;  // 1-based; 0 means the initial parameters were kept
};

// Plain SGD with l2 regularization and early stopping on the validation
// score. With a null validator the final-epoch parameters are returned.
inline TrainResult train(const MLPParams& initial, const Eigen::MatrixXd& x, int tap_layer,
                         const BatchProviderFn& batch_provider, const BatchLossFn& loss_fn,
                         const TrainConfig& cfg, const ValidationFn& validator) {
  validate_train_config(cfg);
  TrainResult result;
  result.params = initial;
  MLPParams current = initial;
  double best_val = std::numeric_limits<double>::infinity();
  int epochs_without_improvement = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto batches = batch_provider(epoch);
    double epoch_loss = 0.0;
    int n_batches = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      if (batch.empty()) continue;
      Eigen::MatrixXd xb(static_cast<Eigen::Index>(batch.size()), x.cols());
      for (std::size_t r = 0; r < batch.size(); ++r) xb.row(static_cast<Eigen::Index>(r)) = x.row(batch[r]);
      const auto acts = forward_batch(current, xb);
      const auto [loss, grad] = loss_fn(batch, acts[static_cast<std::size_t>(tap_layer)]);
      if (!std::isfinite(loss))
        throw Error("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                    std::to_string(b));
      const ParamGradients g = backward_batch(current, acts, tap_layer, grad, cfg.l2_weight);
      for (int k = 0; k < current.n_layers(); ++k) {
        current.weights[static_cast<std::size_t>(k)] -=
            cfg.learning_rate * g.weights[static_cast<std::size_t>(k)];
        current.biases[static_cast<std::size_t>(k)] -=
            cfg.learning_rate * g.biases[static_cast<std::size_t>(k)];
      }
      epoch_loss += loss;
      ++n_batches;
    }
    result.train_loss.push_back(n_batches > 0 ? epoch_loss / n_batches : 0.0);

    if (validator) {
      const double v = validator(current);
      result.val_loss.push_back(v);
      if (v < best_val) {
        best_val = v;
        result.params = current;
        result.best_epoch = epoch;
        epochs_without_improvement = 0;
      } else {
        ++epochs_without_improvement;
        if (epochs_without_improvement >= cfg.patience) break;
      }
    } else {
      result.params = current;
      result.best_epoch = epoch;
    }
  }
  return result;
}

// --- serialization ---------------------------------------------------------

inline nlohmann::json mlp_to_json(const MLPParams& p) {
  nlohmann::json j;
  j["format"] = "contrastsurv.mlp";
  j["version"] = 1;
  j["layer_widths"] = p.architecture().layer_widths;
  nlohmann::json weights = nlohmann::json::array();
  nlohmann::json biases = nlohmann::json::array();
  for (int k = 0; k < p.n_layers(); ++k) {
    const auto& w = p.weights[static_cast<std::size_t>(k)];
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(w.size()));
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) flat.push_back(w(r, c));
    weights.push_back(flat);
    const auto& b = p.biases[static_cast<std::size_t>(k)];
    biases.push_back(std::vector<double>(b.data(), b.data() + b.size()));
  }
  j["weights"] = std::move(weights);
  j["biases"] = std::move(biases);
  return j;
}

inline MLPParams mlp_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "contrastsurv.mlp")
    throw ValidationError("not an MLP parameter document");
  const auto widths = j.at("layer_widths").get<std::vector<int>>();
  MLPArchitecture arch{widths};
  validate_architecture(arch);
  MLPParams p;
  const auto& weights = j.at("weights");
  const auto& biases = j.at("biases");
  if (weights.size() != widths.size() - 1 || biases.size() != widths.size() - 1)
    throw ValidationError("MLP document has inconsistent layer count");
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    const int in = widths[k], out = widths[k + 1];
    const auto flat = weights[k].get<std::vector<double>>();
    if (flat.size() != static_cast<std::size_t>(in) * static_cast<std::size_t>(out))
      throw ValidationError("MLP weight block has wrong size");
    Eigen::MatrixXd w(out, in);
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) w(r, c) = flat[static_cast<std::size_t>(r) * in + c];
    const auto bv = biases[k].get<std::vector<double>>();
    if (bv.size() != static_cast<std::size_t>(out))
      throw ValidationError("MLP bias block has wrong size");
    p.weights.push_back(std::move(w));
    p.biases.push_back(Eigen::Map<const Eigen::VectorXd>(bv.data(), out));
  }
  return p;
}

}  // namespace contrastsurv
