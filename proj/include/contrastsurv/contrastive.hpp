#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "contrastsurv/error.hpp"
#include "contrastsurv/neural.hpp"
#include "contrastsurv/rng.hpp"

namespace contrastsurv {

struct SupConConfig {
  double temperature = 0.1;
  int target_group_size = 15;
  int batch_size = 32;
  bool normalize_embeddings = true;
};

inline void validate_supcon_config(const SupConConfig& cfg) {
  if (!(cfg.temperature > 0.0)) throw ValidationError("temperature must be positive");
  if (cfg.target_group_size < 1) throw ValidationError("target_group_size must be >= 1");
  if (cfg.batch_size < 2) throw ValidationError("batch_size must be >= 2");
}

struct GroupLabeling {
  std::vector<int> labels;  // group index per sample, original order
  int m = 0;
  std::vector<int> group_sizes;
};

// Splits samples into m = max(2, round(n / target_group_size)) groups of
// near-equal size along the sorted event times. Ties keep their original
// order (stable sort), so tied samples may straddle a group boundary.
inline GroupLabeling assign_pfi_groups(const Eigen::VectorXd& times, int target_group_size) {
  const int n = static_cast<int>(times.size());
  if (n < 2) throw ValidationError("need at least 2 samples to form groups");
  if (target_group_size < 1) throw ValidationError("target_group_size must be >= 1");
  for (Eigen::Index i = 0; i < times.size(); ++i)
    if (!std::isfinite(times(i))) throw ValidationError("non-finite event time");

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return times(a) < times(b); });

  GroupLabeling g;
  g.m = static_cast<int>(std::max<long>(2L, std::lround(static_cast<double>(n) / target_group_size)));
  g.m = std::min(g.m, n);  // never more groups than samples
  const int base = n / g.m;
  const int remainder = n % g.m;
  g.labels.assign(static_cast<std::size_t>(n), 0);
  int pos = 0;
  for (int group = 0; group < g.m; ++group) {
    const int size = base + (group < remainder ? 1 : 0);
    g.group_sizes.push_back(size);
    for (int k = 0; k < size; ++k) {
      g.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(pos++)])] = group;
    }
  }
  return g;
}

struct SupConResult {
  double loss = 0.0;
  Eigen::MatrixXd grad;  // w.r.t. the raw (pre-normalization) embeddings
  int active_anchors = 0;
};

// Supervised contrastive loss over one mini-batch. Anchors whose positive
// set is empty are excluded from the sum; if every anchor is excluded the
// batch is degenerate and an error is raised.
inline SupConResult supcon_loss(const Eigen::MatrixXd& embeddings, const std::vector<int>& labels,
                                const SupConConfig& cfg) {
  const Eigen::Index nb = embeddings.rows();
  const Eigen::Index dim = embeddings.cols();
  if (nb < 2) throw ValidationError("supcon_loss needs a batch of at least 2");
  if (static_cast<Eigen::Index>(labels.size()) != nb)
    throw ValidationError("labels must align with embeddings");
  if (!embeddings.allFinite()) throw ValidationError("non-finite embedding");
  if (!(cfg.temperature > 0.0)) throw ValidationError("temperature must be positive");

  // Optional row-wise L2 normalization; rows with (near-)zero norm pass
  // through unchanged so the gradient stays finite.
  constexpr double kNormFloor = 1e-12;
  Eigen::MatrixXd z = embeddings;
  Eigen::VectorXd norms = Eigen::VectorXd::Ones(nb);
  std::vector<bool> normalized(static_cast<std::size_t>(nb), false);
  if (cfg.normalize_embeddings) {
    for (Eigen::Index i = 0; i < nb; ++i) {
      const double norm = embeddings.row(i).norm();
      if (norm > kNormFloor) {
        z.row(i) /= norm;
        norms(i) = norm;
        normalized[static_cast<std::size_t>(i)] = true;
      }
    }
  }

  const Eigen::MatrixXd sims = (z * z.transpose()) / cfg.temperature;

  SupConResult result;
  Eigen::MatrixXd grad_z = Eigen::MatrixXd::Zero(nb, dim);
  for (Eigen::Index i = 0; i < nb; ++i) {
    std::vector<Eigen::Index> positives;
    for (Eigen::Index a = 0; a < nb; ++a)
      if (a != i && labels[static_cast<std::size_t>(a)] == labels[static_cast<std::size_t>(i)])
        positives.push_back(a);
    if (positives.empty()) continue;
    ++result.active_anchors;

    double max_sim = -std::numeric_limits<double>::infinity();
    for (Eigen::Index a = 0; a < nb; ++a)
      if (a != i) max_sim = std::max(max_sim, sims(i, a));
    double denom = 0.0;
    for (Eigen::Index a = 0; a < nb; ++a)
      if (a != i) denom += std::exp(sims(i, a) - max_sim);
    const double log_denom = max_sim + std::log(denom);

    const double inv_p = 1.0 / static_cast<double>(positives.size());
    for (const Eigen::Index p : positives) result.loss += -(sims(i, p) - log_denom) * inv_p;

    // d loss_i / d sims(i, a) = softmax(i, a) - [a is positive] / |P(i)|
    for (Eigen::Index a = 0; a < nb; ++a) {
      if (a == i) continue;
      const double softmax = std::exp(sims(i, a) - log_denom);
      double coeff = softmax;
      if (labels[static_cast<std::size_t>(a)] == labels[static_cast<std::size_t>(i)])
        coeff -= inv_p;
      coeff /= cfg.temperature;
      grad_z.row(i) += coeff * z.row(a);
      grad_z.row(a) += coeff * z.row(i);
    }
  }
  if (result.active_anchors == 0) throw Error("degenerate batch: every anchor has an empty positive set");

  if (cfg.normalize_embeddings) {
    result.grad.resize(nb, dim);
    for (Eigen::Index i = 0; i < nb; ++i) {
      if (normalized[static_cast<std::size_t>(i)]) {
        // d(z/|z|)/dz = (I - zhat zhat^T) / |z|
        const Eigen::RowVectorXd zi = z.row(i);
        result.grad.row(i) = (grad_z.row(i) - (grad_z.row(i).dot(zi)) * zi) / norms(i);
      } else {
        result.grad.row(i) = grad_z.row(i);
      }
    }
  } else {
    result.grad = std::move(grad_z);
  }
  return result;
}

struct BatchPlan {
  std::vector<std::vector<int>> batches;
  int dropped = 0;  // degenerate batches discarded after one redraw
};

namespace detail {

inline bool all_labels_distinct(const std::vector<int>& indices, const std::vector<int>& labels) {
  for (std::size_t i = 0; i < indices.size(); ++i)
    for (std::size_t j = i + 1; j < indices.size(); ++j)
      if (labels[static_cast<std::size_t>(indices[i])] ==
          labels[static_cast<std::size_t>(indices[j])])
        return false;
  return true;
}

}  // namespace detail

// Seeded shuffle plus sequential slicing. A slice where every anchor would
// have an empty positive set triggers one reshuffle of the remaining tail;
// a slice that is still degenerate is dropped.
inline BatchPlan make_batches(const GroupLabeling& labeling, int batch_size, std::uint64_t seed) {
  if (batch_size < 2) throw ValidationError("batch_size must be >= 2");
  const int n = static_cast<int>(labeling.labels.size());
  Rng rng(seed);
  std::vector<int> order = rng.permutation(n);

  BatchPlan plan;
  std::size_t pos = 0;
  while (pos < order.size()) {
    const std::size_t end = std::min(order.size(), pos + static_cast<std::size_t>(batch_size));
    std::vector<int> batch(order.begin() + static_cast<std::ptrdiff_t>(pos),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
    if (detail::all_labels_distinct(batch, labeling.labels)) {
      std::vector<int> tail(order.begin() + static_cast<std::ptrdiff_t>(pos), order.end());
      rng.shuffle(tail);
      std::copy(tail.begin(), tail.end(), order.begin() + static_cast<std::ptrdiff_t>(pos));
      batch.assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                   order.begin() + static_cast<std::ptrdiff_t>(end));
      if (detail::all_labels_distinct(batch, labeling.labels)) {
        ++plan.dropped;
        pos = end;
        continue;
      }
    }
    plan.batches.push_back(std::move(batch));
    pos = end;
  }
  return plan;
}

struct EmbeddingTap {
  int layer_index = 0;  // 1-based; n_layers() selects the network output
};

inline Eigen::MatrixXd extract_features(const MLPParams& params, const EmbeddingTap& tap,
                                        const Eigen::MatrixXd& x) {
  if (tap.layer_index < 1 || tap.layer_index > params.n_layers())
    throw ValidationError("tap layer " + std::to_string(tap.layer_index) +
                          " is outside 1.." + std::to_string(params.n_layers()));
  const auto acts = forward_batch(params, x);
  return acts[static_cast<std::size_t>(tap.layer_index)];
}

// Contrastive training over a feature matrix. Group labels come from the
// event-time quantiles of all supplied samples; batches are drawn from
// train_indices and the held-out validation rows drive early stopping as a
// single batch. Pass explicit label overrides for pooled training.
inline MLPParams train_cl_indices(const Eigen::MatrixXd& x, const std::vector<int>& group_labels,
                                  const std::vector<int>& train_indices,
                                  const std::vector<int>& val_indices,
                                  const MLPArchitecture& arch, const TrainConfig& train_cfg,
                                  const SupConConfig& supcon_cfg) {
  validate_supcon_config(supcon_cfg);
  if (train_indices.size() < 2) throw ValidationError("need at least 2 training samples");

  GroupLabeling train_labeling;
  train_labeling.labels.reserve(train_indices.size());
  int max_label = 0;
  for (const int idx : train_indices) {
    train_labeling.labels.push_back(group_labels[static_cast<std::size_t>(idx)]);
    max_label = std::max(max_label, group_labels[static_cast<std::size_t>(idx)]);
  }
  train_labeling.m = max_label + 1;

  const auto provider = [&](int epoch) {
    const BatchPlan plan =
        make_batches(train_labeling, supcon_cfg.batch_size,
                     train_cfg.seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(epoch));
    std::vector<std::vector<int>> batches;
    batches.reserve(plan.batches.size());
    for (const auto& positions : plan.batches) {
      std::vector<int> batch;
      batch.reserve(positions.size());
      for (const int p : positions) batch.push_back(train_indices[static_cast<std::size_t>(p)]);
      batches.push_back(std::move(batch));
    }
    return batches;
  };

  const auto loss_fn = [&](const std::vector<int>& batch, const Eigen::MatrixXd& tapped) {
    std::vector<int> labels;
    labels.reserve(batch.size());
    for (const int idx : batch) labels.push_back(group_labels[static_cast<std::size_t>(idx)]);
    SupConResult r = supcon_loss(tapped, labels, supcon_cfg);
    return std::make_pair(r.loss, std::move(r.grad));
  };

  ValidationFn validator;
  if (!val_indices.empty()) {
    Eigen::MatrixXd xv(static_cast<Eigen::Index>(val_indices.size()), x.cols());
    std::vector<int> val_labels;
    val_labels.reserve(val_indices.size());
    for (std::size_t i = 0; i < val_indices.size(); ++i) {
      xv.row(static_cast<Eigen::Index>(i)) = x.row(val_indices[i]);
      val_labels.push_back(group_labels[static_cast<std::size_t>(val_indices[i])]);
    }
    validator = [&, xv = std::move(xv), val_labels = std::move(val_labels)](const MLPParams& p) {
      const auto acts = forward_batch(p, xv);
      try {
        return supcon_loss(acts.back(), val_labels, supcon_cfg).loss;
      } catch (const Error&) {
        return 1e30;  // degenerate validation fold: no usable signal
      }
    };
  }

  const MLPParams initial = init_params(arch, train_cfg.seed);
  const int tap = initial.n_layers();
  return train(initial, x, tap, provider, loss_fn, train_cfg, validator).params;
}

// Convenience wrapper: labels from the provided times, validation carved
// from the data with a seeded permutation.
inline MLPParams train_cl(const Eigen::MatrixXd& x, const Eigen::VectorXd& times,
                          const MLPArchitecture& arch, const TrainConfig& train_cfg,
                          const SupConConfig& supcon_cfg, double validation_fraction = 0.2) {
  const int n = static_cast<int>(x.rows());
  const GroupLabeling labeling = assign_pfi_groups(times, supcon_cfg.target_group_size);
  Rng rng(train_cfg.seed ^ 0xd1b54a32d192ed03ULL);
  const std::vector<int> perm = rng.permutation(n);
  int n_val = static_cast<int>(std::floor(validation_fraction * n));
  n_val = std::clamp(n_val, 0, n - 2);
  std::vector<int> val(perm.begin(), perm.begin() + n_val);
  std::vector<int> train_idx(perm.begin() + n_val, perm.end());
  return train_cl_indices(x, labeling.labels, train_idx, val, arch, train_cfg, supcon_cfg);
}

}  // namespace contrastsurv
