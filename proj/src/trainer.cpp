// SPDX-License-Identifier: Apache-2.0
#include "baseroute/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "baseroute/kernels.hpp"
#include "baseroute/layer.hpp"

namespace baseroute {

void SyntheticTask::validate(std::size_t num_experts) const {
  require(num_clusters >= 1, "SyntheticTask: need at least one cluster");
  require(num_clusters <= num_experts,
          "SyntheticTask: K (" + std::to_string(num_clusters) +
              ") must not exceed E (" + std::to_string(num_experts) + ")");
  require(centroids.rows() == num_clusters && target_map.rows() == num_clusters,
          "SyntheticTask: centroid/target rows != K");
  require(centroids.cols() == target_map.cols(), "SyntheticTask: dimension mismatch");
  require(noise_scale > 0.0, "SyntheticTask: noise_scale must be > 0");
  require(tokens_per_cluster >= 1, "SyntheticTask: tokens_per_cluster must be >= 1");
  require(ids_per_cluster >= 1, "SyntheticTask: ids_per_cluster must be >= 1");
  for (std::size_t a = 0; a < num_clusters; ++a)
    for (std::size_t b = a + 1; b < num_clusters; ++b)
      require(!std::equal(centroids.row(a).begin(), centroids.row(a).end(),
                          centroids.row(b).begin()),
              "SyntheticTask: centroids must be mutually distinct");
}

SyntheticTask make_clustered_task(std::size_t num_clusters, std::size_t dim,
                                  double separation, double noise_scale,
                                  std::size_t tokens_per_cluster) {
  require(num_clusters <= dim, "make_clustered_task: K must not exceed D");
  SyntheticTask task;
  task.num_clusters = num_clusters;
  task.centroids = Matrix(num_clusters, dim);
  task.target_map = Matrix(num_clusters, dim);
  for (std::size_t k = 0; k < num_clusters; ++k) {
    task.centroids(k, k) = separation;
    task.target_map(k, dim - 1 - k) = 1.0;
  }
  task.noise_scale = noise_scale;
  task.tokens_per_cluster = tokens_per_cluster;
  return task;
}

StreamSample sample_stream(const SyntheticTask& task, std::size_t count,
                           std::int32_t worker, Rng& rng) {
  const std::size_t dim = task.centroids.cols();
  const std::size_t k_count = task.num_clusters;
  Matrix features(count, dim);
  Matrix targets(count, dim);
  std::vector<std::int64_t> ids(count);
  std::vector<Origin> origin(count);
  std::vector<std::size_t> clusters(count);

  std::size_t cluster = 0;
  for (std::size_t t = 0; t < count; ++t) {
    if (t == 0) {
      cluster = rng.next_below(k_count);
    } else if (k_count > 1 && rng.next_double() >= task.stay_prob) {
      // Switch uniformly among the other clusters.
      std::size_t step = 1 + rng.next_below(k_count - 1);
      cluster = (cluster + step) % k_count;
    }
    clusters[t] = cluster;
    ids[t] = static_cast<std::int64_t>(cluster * task.ids_per_cluster +
                                       rng.next_below(task.ids_per_cluster));
    origin[t] = {worker, static_cast<std::int32_t>(t)};
    for (std::size_t i = 0; i < dim; ++i) {
      double x = task.centroids(cluster, i) + task.noise_scale * rng.normal();
      features(t, i) = x;
      targets(t, i) = x + task.target_map(cluster, i);
    }
  }
  return {TokenBatch(std::move(features), std::move(ids), std::move(origin)),
          std::move(clusters), std::move(targets)};
}

StreamSample sample_eval_set(const SyntheticTask& task, Rng& rng) {
  const std::size_t dim = task.centroids.cols();
  const std::size_t count = task.num_clusters * task.tokens_per_cluster;
  Matrix features(count, dim);
  Matrix targets(count, dim);
  std::vector<std::int64_t> ids(count);
  std::vector<Origin> origin(count);
  std::vector<std::size_t> clusters(count);
  std::size_t t = 0;
  for (std::size_t k = 0; k < task.num_clusters; ++k) {
    for (std::size_t n = 0; n < task.tokens_per_cluster; ++n, ++t) {
      clusters[t] = k;
      ids[t] = static_cast<std::int64_t>(k * task.ids_per_cluster +
                                         rng.next_below(task.ids_per_cluster));
      origin[t] = {0, static_cast<std::int32_t>(t)};
      for (std::size_t i = 0; i < dim; ++i) {
        double x = task.centroids(k, i) + task.noise_scale * rng.normal();
        features(t, i) = x;
        targets(t, i) = x + task.target_map(k, i);
      }
    }
  }
  return {TokenBatch(std::move(features), std::move(ids), std::move(origin)),
          std::move(clusters), std::move(targets)};
}

void ClipConfig::validate() const {
  require(threshold > 0.0, "ClipConfig: threshold must be > 0");
}

ClipResult clip_gradients(const std::vector<double>& shared_grads,
                          const std::vector<std::vector<double>>& expert_grads,
                          const ClipConfig& config) {
  config.validate();
  for (std::size_t i = 0; i < shared_grads.size(); ++i)
    require(std::isfinite(shared_grads[i]),
            "clip_gradients: non-finite value in shared_grads[" + std::to_string(i) + "]");
  for (std::size_t e = 0; e < expert_grads.size(); ++e)
    for (std::size_t i = 0; i < expert_grads[e].size(); ++i)
      require(std::isfinite(expert_grads[e][i]),
              "clip_gradients: non-finite value in expert_grads[" + std::to_string(e) +
                  "][" + std::to_string(i) + "]");

  double sq = 0.0;
  for (double g : shared_grads) sq += g * g;
  double norm = std::sqrt(sq);

  ClipResult result{shared_grads, expert_grads, 1.0};
  if (norm > config.threshold) {
    result.scale_factor = config.threshold / norm;
    for (double& g : result.shared) g *= result.scale_factor;
    for (auto& v : result.expert)
      for (double& g : v) g *= result.scale_factor;
  }
  return result;
}

SharedReadout SharedReadout::identity(std::size_t dim) {
  SharedReadout r{Matrix(dim, dim), std::vector<double>(dim, 0.0)};
  for (std::size_t i = 0; i < dim; ++i) r.weight(i, i) = 1.0;
  return r;
}

json to_json(const SharedReadout& r) {
  return json{{"weight", to_json(r.weight)}, {"bias", r.bias}};
}

SharedReadout readout_from_json(const json& j) {
  return {matrix_from_json(j.at("weight")), j.at("bias").get<std::vector<double>>()};
}

json to_json(const SyntheticTask& t) {
  return json{{"num_clusters", t.num_clusters},
              {"centroids", to_json(t.centroids)},
              {"target_map", to_json(t.target_map)},
              {"tokens_per_cluster", t.tokens_per_cluster},
              {"noise_scale", t.noise_scale},
              {"ids_per_cluster", t.ids_per_cluster},
              {"stay_prob", t.stay_prob}};
}

SyntheticTask task_from_json(const json& j) {
  SyntheticTask t;
  t.num_clusters = j.at("num_clusters").get<std::size_t>();
  t.centroids = matrix_from_json(j.at("centroids"));
  t.target_map = matrix_from_json(j.at("target_map"));
  t.tokens_per_cluster = j.at("tokens_per_cluster").get<std::size_t>();
  t.noise_scale = j.at("noise_scale").get<double>();
  t.ids_per_cluster = j.at("ids_per_cluster").get<std::size_t>();
  t.stay_prob = j.at("stay_prob").get<double>();
  return t;
}

double greedy_purity(const Matrix& features, const std::vector<std::size_t>& clusters,
                     const ExpertSet& experts, std::size_t num_clusters) {
  require(features.rows() == clusters.size(), "greedy_purity: label length mismatch");
  Matrix scores(features.rows(), experts.num_experts());
  scores_kernel(features, experts.embeddings(), scores);
  std::vector<std::int32_t> expert_of = argmax_rows(scores);

  // Plurality expert per cluster, ties to the lowest expert index.
  std::vector<std::vector<std::int64_t>> counts(
      num_clusters, std::vector<std::int64_t>(experts.num_experts(), 0));
  for (std::size_t t = 0; t < clusters.size(); ++t)
    counts[clusters[t]][expert_of[t]]++;
  std::vector<std::int32_t> plurality(num_clusters, 0);
  for (std::size_t k = 0; k < num_clusters; ++k) {
    std::int64_t best = -1;
    for (std::size_t e = 0; e < experts.num_experts(); ++e) {
      if (counts[k][e] > best) {
        best = counts[k][e];
        plurality[k] = static_cast<std::int32_t>(e);
      }
    }
  }
  std::size_t matched = 0;
  for (std::size_t t = 0; t < clusters.size(); ++t)
    if (expert_of[t] == plurality[clusters[t]]) ++matched;
  return static_cast<double>(matched) / static_cast<double>(clusters.size());
}

namespace {

std::vector<double> flatten_expert_grads(const Matrix& d_embeddings,
                                         ExpertNetwork& d_network, std::size_t e) {
  std::vector<double> flat;
  std::span<const double> emb = d_embeddings.row(e);
  flat.insert(flat.end(), emb.begin(), emb.end());
  for (auto view : param_views(d_network)) flat.insert(flat.end(), view.begin(), view.end());
  return flat;
}

void apply_expert_update(Matrix& embeddings, ExpertNetwork& network, std::size_t e,
                         const std::vector<double>& grads, double lr) {
  std::size_t idx = 0;
  std::span<double> emb = embeddings.row(e);
  for (double& v : emb) v -= lr * grads[idx++];
  for (auto view : param_views(network))
    for (double& v : view) v -= lr * grads[idx++];
}

}  // namespace

TrainResult train_toy(const SyntheticTask& task, ExpertSet experts,
                      const TrainOptions& options) {
  const std::size_t workers = experts.num_experts();
  const std::size_t tokens = options.tokens_per_worker;
  const std::size_t dim = experts.dim();
  task.validate(workers);
  options.clip.validate();
  WorkerTopology{workers, tokens}.validate();
  require(task.centroids.cols() == dim, "train_toy: task dimension != expert dimension");

  const std::size_t total = workers * tokens;
  SharedReadout readout = SharedReadout::identity(dim);

  Rng eval_rng = derive_rng(options.seed, streams::kEval);
  StreamSample eval = sample_eval_set(task, eval_rng);

  TrainResult result{std::move(experts), readout, {}, std::vector<std::int64_t>(workers, 0),
                     0.0, 0.0};
  result.initial_purity =
      greedy_purity(eval.batch.features(), eval.clusters, result.experts, task.num_clusters);

  for (std::size_t step = 0; step < options.steps; ++step) {
    // Sample one batch per worker.
    std::vector<TokenBatch> batches;
    std::vector<std::size_t> clusters;
    Matrix targets(total, dim);
    batches.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      Rng rng = derive_rng(options.seed, streams::kBatch, step * workers + w);
      StreamSample s = sample_stream(task, tokens, static_cast<std::int32_t>(w), rng);
      for (std::size_t t = 0; t < tokens; ++t) {
        std::copy(s.targets.row(t).begin(), s.targets.row(t).end(),
                  targets.row(w * tokens + t).begin());
        clusters.push_back(s.clusters[t]);
      }
      batches.push_back(std::move(s.batch));
    }

    auto [outputs, trace] =
        route_and_apply(batches, result.experts, options.auction,
                        derive_seed(options.seed, streams::kRoute, step), RouteMode::train);

    // Readout + mean squared error over all tokens and features.
    const double inv_n = 1.0 / static_cast<double>(total * dim);
    double loss = 0.0;
    Matrix d_y(total, dim);
    Matrix concat_out(total, dim);
    for (std::size_t w = 0; w < workers; ++w) {
      for (std::size_t t = 0; t < tokens; ++t) {
        std::size_t row = w * tokens + t;
        std::span<const double> out = outputs[w].outputs.row(t);
        std::copy(out.begin(), out.end(), concat_out.row(row).begin());
        for (std::size_t i = 0; i < dim; ++i) {
          double y = readout.bias[i];
          if (options.shared_readout) {
            for (std::size_t c = 0; c < dim; ++c) y += out[c] * readout.weight(c, i);
          } else {
            y = out[i];
          }
          double diff = y - targets(row, i);
          loss += diff * diff * inv_n;
          d_y(row, i) = 2.0 * diff * inv_n;
        }
      }
    }
    if (!std::isfinite(loss))
      throw DivergenceError("train_toy: non-finite loss at step " + std::to_string(step),
                            static_cast<long>(step));

    // Backward through the readout into the layer.
    Matrix upstream(total, dim);
    Matrix d_weight(dim, dim);
    std::vector<double> d_bias(dim, 0.0);
    if (options.shared_readout) {
      for (std::size_t row = 0; row < total; ++row) {
        for (std::size_t i = 0; i < dim; ++i) {
          double acc = 0.0;
          for (std::size_t c = 0; c < dim; ++c) {
            acc += readout.weight(i, c) * d_y(row, c);
            d_weight(i, c) += concat_out(row, i) * d_y(row, c);
          }
          upstream(row, i) = acc;
        }
        for (std::size_t c = 0; c < dim; ++c) d_bias[c] += d_y(row, c);
      }
    } else {
      upstream = d_y;
    }

    // Layer backward on the concatenated batch with the pipeline's assignment.
    Matrix concat_features(total, dim);
    std::vector<std::int64_t> concat_ids(total);
    std::vector<Origin> concat_origin(total);
    std::vector<std::int32_t> flat_assign(total);
    for (std::size_t w = 0; w < workers; ++w) {
      for (std::size_t t = 0; t < tokens; ++t) {
        std::size_t row = w * tokens + t;
        std::copy(batches[w].features().row(t).begin(), batches[w].features().row(t).end(),
                  concat_features.row(row).begin());
        concat_ids[row] = batches[w].token_ids()[t];
        concat_origin[row] = batches[w].origin()[t];
        flat_assign[row] = trace.expert_of_origin[w][t];
        result.usage_totals[flat_assign[row]]++;
      }
    }
    TokenBatch concat_batch(std::move(concat_features), std::move(concat_ids),
                            std::move(concat_origin));
    Assignment assignment(flat_assign, AssignMode::greedy, workers);
    LayerGradients grads =
        layer_backward(concat_batch, result.experts, assignment, upstream);

    // Clip on the shared norm, rescale everything.
    std::vector<double> shared_flat;
    if (options.shared_readout) {
      shared_flat.insert(shared_flat.end(), d_weight.data().begin(), d_weight.data().end());
      shared_flat.insert(shared_flat.end(), d_bias.begin(), d_bias.end());
    }
    std::vector<std::vector<double>> expert_flat(workers);
    for (std::size_t e = 0; e < workers; ++e)
      expert_flat[e] = flatten_expert_grads(grads.d_embeddings, grads.d_networks[e], e);
    ClipResult clipped = clip_gradients(shared_flat, expert_flat, options.clip);

    // Plain gradient descent.
    Matrix new_embeddings = result.experts.embeddings();
    std::vector<ExpertNetwork> new_networks = result.experts.networks();
    for (std::size_t e = 0; e < workers; ++e)
      apply_expert_update(new_embeddings, new_networks[e], e, clipped.expert[e],
                          options.learning_rate);
    result.experts = result.experts.with(std::move(new_embeddings), std::move(new_networks));
    if (options.shared_readout) {
      std::size_t idx = 0;
      for (double& v : readout.weight.data()) v -= options.learning_rate * clipped.shared[idx++];
      for (double& v : readout.bias) v -= options.learning_rate * clipped.shared[idx++];
    }

    // Diagnostics on this step's batch with the just-updated parameters.
    double purity =
        greedy_purity(concat_batch.features(), clusters, result.experts, task.num_clusters);
    Matrix step_scores(total, workers);
    scores_kernel(concat_batch.features(), result.experts.embeddings(), step_scores);
    std::vector<std::int32_t> greedy_now = argmax_rows(step_scores);
    std::vector<std::int64_t> shard(workers, 0);
    for (std::int32_t e : greedy_now) shard[e]++;
    std::int64_t max_shard = *std::max_element(shard.begin(), shard.end());

    result.log.push_back({step, loss, clipped.scale_factor, purity, max_shard});
  }

  result.final_purity =
      greedy_purity(eval.batch.features(), eval.clusters, result.experts, task.num_clusters);
  result.readout = readout;
  return result;
}

}  // namespace baseroute
