// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "baseroute/routing.hpp"
#include "baseroute/rng.hpp"
#include "baseroute/serialize.hpp"
#include "baseroute/types.hpp"

namespace baseroute {

/// Synthetic clustered token stream: K centroids, per-cluster target
/// correction, and a per-cluster token-id range for specialization analysis.
struct SyntheticTask {
  std::size_t num_clusters = 1;
  Matrix centroids;   // K x D
  Matrix target_map;  // K x D, the correction an ideal expert adds
  std::size_t tokens_per_cluster = 64;
  double noise_scale = 0.1;
  std::size_t ids_per_cluster = 16;  // cluster k owns ids [k*w, (k+1)*w)
  double stay_prob = 0.85;           // Markov cluster persistence in streams

  std::int64_t bos_id() const {
    return static_cast<std::int64_t>(num_clusters * ids_per_cluster);
  }
  void validate(std::size_t num_experts) const;
};

/// Centroid k = separation * e_k, target k = unit vector along axis D-1-k.
/// Requires K <= D so both sets of axes are distinct.
SyntheticTask make_clustered_task(std::size_t num_clusters, std::size_t dim,
                                  double separation = 3.0, double noise_scale = 0.1,
                                  std::size_t tokens_per_cluster = 64);

/// One sampled stream: batch plus the cluster of every token and the
/// target outputs (features + target_map[cluster]).
struct StreamSample {
  TokenBatch batch;
  std::vector<std::size_t> clusters;
  Matrix targets;
};

/// Markov cluster walk; per token the draw order is cluster, id, then D noise
/// normals, so streams are reproducible from the rng alone.
StreamSample sample_stream(const SyntheticTask& task, std::size_t count,
                           std::int32_t worker, Rng& rng);

/// Per-cluster i.i.d. sample (tokens_per_cluster each) used for purity
/// evaluation.
StreamSample sample_eval_set(const SyntheticTask& task, Rng& rng);

struct ClipConfig {
  double threshold = 0.1;
  void validate() const;
};

struct ClipResult {
  std::vector<double> shared;
  std::vector<std::vector<double>> expert;
  double scale_factor = 1.0;
};

/// Gradient rescaling driven by the shared-parameter norm only: with
/// n = l2(shared), every gradient (shared and expert) is multiplied by
/// min(1, threshold/n). Rejects non-finite inputs naming the component.
ClipResult clip_gradients(const std::vector<double>& shared_grads,
                          const std::vector<std::vector<double>>& expert_grads,
                          const ClipConfig& config);

/// Shared linear readout y = W^T out + b (the only shared parameters in the
/// toy model). Initialized to the identity map.
struct SharedReadout {
  Matrix weight;  // D x D, [in][out]
  std::vector<double> bias;

  static SharedReadout identity(std::size_t dim);
};

json to_json(const SharedReadout& r);
SharedReadout readout_from_json(const json& j);
json to_json(const SyntheticTask& t);
SyntheticTask task_from_json(const json& j);

struct TrainOptions {
  std::size_t steps = 500;
  double learning_rate = 0.5;
  ClipConfig clip{};
  std::uint64_t seed = 0;
  std::size_t tokens_per_worker = 16;
  bool shared_readout = true;
  std::optional<AuctionConfig> auction;  // nullopt: per-instance defaults
};

struct StepLog {
  std::size_t step = 0;
  double loss = 0.0;
  double scale_factor = 1.0;
  double purity = 0.0;
  std::int64_t max_greedy_shard = 0;
};

struct TrainResult {
  ExpertSet experts;
  SharedReadout readout;
  std::vector<StepLog> log;
  std::vector<std::int64_t> usage_totals;  // tokens routed per expert, all steps
  double initial_purity = 0.0;             // eval-set purity before training
  double final_purity = 0.0;               // eval-set purity after training
};

/// Plain gradient-descent loop: sample batches, route through the train-mode
/// pipeline, mean-squared-error against target_map-corrected tokens, analytic
/// backward, shared-norm clipping, parameter update. Throws DivergenceError
/// with the step number if the loss goes non-finite.
TrainResult train_toy(const SyntheticTask& task, ExpertSet experts,
                      const TrainOptions& options);

/// Fraction of tokens whose greedy expert matches their cluster's plurality
/// expert (ties to the lowest expert index).
double greedy_purity(const Matrix& features, const std::vector<std::size_t>& clusters,
                     const ExpertSet& experts, std::size_t num_clusters);

}  // namespace baseroute
