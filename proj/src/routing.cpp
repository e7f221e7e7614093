// SPDX-License-Identifier: Apache-2.0
#include "baseroute/routing.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "baseroute/kernels.hpp"
#include "baseroute/rng.hpp"

namespace baseroute {

void WorkerTopology::validate() const {
  require(num_workers >= 1, "WorkerTopology: need at least one worker");
  require(tokens_per_worker >= 1, "WorkerTopology: need at least one token per worker");
  require(tokens_per_worker % num_workers == 0,
          "WorkerTopology: worker count (" + std::to_string(num_workers) +
              ") must divide tokens per worker (" + std::to_string(tokens_per_worker) + ")");
}

json to_json(const RoutingTrace& trace) {
  json j;
  j["mode"] = trace.mode == RouteMode::train ? "train" : "test";
  j["shuffle_counts"] = trace.shuffle_counts;
  j["dispatch_counts"] = trace.dispatch_counts;
  j["max_shard_size"] = trace.max_shard_size;
  j["fell_back"] = json::array();
  for (std::uint8_t f : trace.fell_back) j["fell_back"].push_back(f != 0);
  j["iterations_used"] = trace.iterations_used;
  j["expert_of_origin"] = trace.expert_of_origin;
  return j;
}

namespace {

WorkerTopology topology_of(const std::vector<TokenBatch>& batches) {
  require(!batches.empty(), "routing: no worker batches");
  WorkerTopology topo{batches.size(), batches[0].tokens()};
  for (const TokenBatch& b : batches) {
    require(b.tokens() == topo.tokens_per_worker, "routing: batch sizes differ");
    require(b.dim() == batches[0].dim(), "routing: batch dimensions differ");
  }
  topo.validate();
  return topo;
}

TokenBatch gather_rows(const TokenBatch& batch, const std::vector<std::int32_t>& rows) {
  Matrix features(rows.size(), batch.dim());
  std::vector<std::int64_t> ids(rows.size());
  std::vector<Origin> origin(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::span<const double> row = batch.features().row(rows[i]);
    std::copy(row.begin(), row.end(), features.row(i).begin());
    ids[i] = batch.token_ids()[rows[i]];
    origin[i] = batch.origin()[rows[i]];
  }
  return TokenBatch(std::move(features), std::move(ids), std::move(origin));
}

template <typename Fn>
decltype(auto) stage(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const ContractError& e) {
    throw ContractError(std::string("route_and_apply[") + name + "]: " + e.what());
  }
}

// Applies expert `e` to `rows`, writing outputs and gates.
void apply_expert(const ExpertSet& experts, std::size_t e, const Matrix& rows,
                  Matrix& out, std::vector<double>& gates) {
  std::vector<std::int32_t> assign(rows.rows(), static_cast<std::int32_t>(e));
  mix_forward_kernel(rows, experts, assign, out, gates);
}

}  // namespace

std::vector<TokenBatch> shuffle(const std::vector<TokenBatch>& batches,
                                std::uint64_t master_seed, RoutingTrace* trace) {
  const WorkerTopology topo = topology_of(batches);
  const std::size_t workers = topo.num_workers;
  const std::size_t tokens = topo.tokens_per_worker;
  const std::size_t group = tokens / workers;

  std::vector<std::vector<std::int32_t>> perms(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    std::vector<std::int32_t> perm(tokens);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng = derive_rng(master_seed, streams::kShuffle, w);
    rng.shuffle(perm);
    perms[w] = std::move(perm);
  }

  // Destination d receives group d of every source worker, in source order.
  std::vector<TokenBatch> shuffled;
  shuffled.reserve(workers);
  for (std::size_t dest = 0; dest < workers; ++dest) {
    Matrix features(tokens, batches[0].dim());
    std::vector<std::int64_t> ids(tokens);
    std::vector<Origin> origin(tokens);
    for (std::size_t src = 0; src < workers; ++src) {
      for (std::size_t i = 0; i < group; ++i) {
        std::int32_t src_row = perms[src][dest * group + i];
        std::size_t j = src * group + i;
        std::span<const double> row = batches[src].features().row(src_row);
        std::copy(row.begin(), row.end(), features.row(j).begin());
        ids[j] = batches[src].token_ids()[src_row];
        origin[j] = batches[src].origin()[src_row];
      }
    }
    shuffled.emplace_back(std::move(features), std::move(ids), std::move(origin));
  }

  if (trace) {
    trace->shuffle_perm = std::move(perms);
    trace->shuffle_counts.assign(
        workers, std::vector<std::int64_t>(workers, static_cast<std::int64_t>(group)));
  }
  return shuffled;
}

std::pair<TokenBatch, std::vector<std::int32_t>> sort_by_expert(
    const TokenBatch& batch, const Assignment& assignment) {
  require(assignment.mode() == AssignMode::balanced,
          "sort_by_expert: training pipeline requires a balanced assignment");
  require(assignment.tokens() == batch.tokens(),
          "sort_by_expert: assignment length != batch size");

  std::vector<std::int32_t> perm(batch.tokens());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](std::int32_t a, std::int32_t b) {
    return assignment.expert_of()[a] < assignment.expert_of()[b];
  });
  return {gather_rows(batch, perm), perm};
}

std::vector<TokenBatch> all_to_all(const TokenBatch& batch, std::size_t num_shards) {
  require(num_shards >= 1, "all_to_all: need at least one shard");
  require(batch.tokens() % num_shards == 0,
          "all_to_all: shard count (" + std::to_string(num_shards) +
              ") must divide batch size (" + std::to_string(batch.tokens()) + ")");
  const std::size_t block = batch.tokens() / num_shards;

  // Row t goes to shard floor(t * num_shards / tokens), i.e. contiguous blocks.
  std::vector<TokenBatch> shards;
  shards.reserve(num_shards);
  for (std::size_t e = 0; e < num_shards; ++e) {
    std::vector<std::int32_t> rows(block);
    std::iota(rows.begin(), rows.end(), static_cast<std::int32_t>(e * block));
    shards.push_back(gather_rows(batch, rows));
  }
  return shards;
}

std::pair<std::vector<LayerOutput>, RoutingTrace> route_and_apply(
    const std::vector<TokenBatch>& batches, const ExpertSet& experts,
    const std::optional<AuctionConfig>& config, std::uint64_t master_seed,
    RouteMode mode) {
  const WorkerTopology topo = topology_of(batches);
  const std::size_t workers = topo.num_workers;
  const std::size_t tokens = topo.tokens_per_worker;
  const std::size_t group = tokens / workers;
  const std::size_t dim = batches[0].dim();
  require(experts.num_experts() == workers,
          "route_and_apply: one expert per worker required (experts=" +
              std::to_string(experts.num_experts()) +
              ", workers=" + std::to_string(workers) + ")");
  require(experts.dim() == dim, "route_and_apply: dimension mismatch");

  RoutingTrace trace;
  trace.mode = mode;
  trace.dispatch_counts.assign(workers, std::vector<std::int64_t>(workers, 0));
  trace.fell_back.assign(workers, 0);
  trace.iterations_used.assign(workers, 0);
  trace.return_plan.resize(workers);
  trace.expert_of_origin.assign(workers, std::vector<std::int32_t>(tokens, -1));

  const bool train = mode == RouteMode::train;

  // Shuffle (train only): local[d] is worker d's working batch.
  std::vector<TokenBatch> local =
      train ? stage("shuffle", [&] { return shuffle(batches, master_seed, &trace); })
            : batches;

  // Per-worker assignment on the local batch. Iterations are pure and
  // independent, so results do not depend on worker scheduling; the heavy
  // inner loops (scores, expert application) are the parallel kernels.
  std::vector<std::vector<std::int32_t>> assign_of(workers);
  std::vector<std::vector<std::int32_t>> sort_perm(workers);
  std::vector<TokenBatch> sorted;
  sorted.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    ScoreMatrix scores =
        stage("scores", [&] { return compute_scores(local[w], experts); });
    if (train) {
      AssignmentResult res = stage("solve", [&] {
        return solve_balanced(scores, config ? *config : AuctionConfig::defaults_for(scores));
      });
      trace.fell_back[w] = res.fell_back_to_greedy ? 1 : 0;
      trace.iterations_used[w] = res.iterations_used;
      auto [sorted_w, perm] =
          stage("sort", [&] { return sort_by_expert(local[w], res.assignment); });
      sorted.push_back(std::move(sorted_w));
      assign_of[w] = res.assignment.expert_of();
      sort_perm[w] = std::move(perm);
    } else {
      Assignment greedy = stage("greedy", [&] { return assign_greedy(scores); });
      assign_of[w] = greedy.expert_of();
      // Stable grouping by expert plays the role of the sort.
      std::vector<std::int32_t> perm(tokens);
      std::iota(perm.begin(), perm.end(), 0);
      std::stable_sort(perm.begin(), perm.end(), [&](std::int32_t a, std::int32_t b) {
        return assign_of[w][a] < assign_of[w][b];
      });
      sort_perm[w] = std::move(perm);
    }
  }

  // Dispatch. Train mode: all_to_all on each sorted batch; expert e receives
  // the e-th shard of every worker (equal blocks of T/E). Test mode: expert e
  // receives each worker's greedy group for e (variable size).
  std::vector<Matrix> expert_rows(workers);
  for (std::size_t e = 0; e < workers; ++e) {
    std::vector<Origin>& plan = trace.return_plan[e];
    for (std::size_t w = 0; w < workers; ++w) {
      std::int64_t sent = 0;
      for (std::size_t k = 0; k < tokens; ++k) {
        if (assign_of[w][sort_perm[w][k]] != static_cast<std::int32_t>(e)) continue;
        plan.push_back({static_cast<std::int32_t>(w), static_cast<std::int32_t>(k)});
        ++sent;
      }
      trace.dispatch_counts[w][e] = sent;
    }
    trace.max_shard_size =
        std::max(trace.max_shard_size, static_cast<std::int64_t>(plan.size()));
  }

  if (train) {
    // Sanity + the all_to_all contract: sorted rows for expert e are exactly
    // the contiguous block [e*group, (e+1)*group) of every worker.
    std::vector<std::vector<TokenBatch>> shards;
    shards.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
      shards.push_back(stage("all_to_all", [&] { return all_to_all(sorted[w], workers); }));
    for (std::size_t w = 0; w < workers; ++w)
      for (std::size_t e = 0; e < workers; ++e)
        require(trace.dispatch_counts[w][e] == static_cast<std::int64_t>(group),
                "route_and_apply[all_to_all]: dispatch counts must equal T/E");
    for (std::size_t e = 0; e < workers; ++e) {
      expert_rows[e] = Matrix(tokens, dim);
      for (std::size_t w = 0; w < workers; ++w) {
        const Matrix& block = shards[w][e].features();
        for (std::size_t i = 0; i < group; ++i) {
          std::span<const double> row = block.row(i);
          std::copy(row.begin(), row.end(), expert_rows[e].row(w * group + i).begin());
        }
      }
    }
  } else {
    for (std::size_t e = 0; e < workers; ++e) {
      const std::vector<Origin>& plan = trace.return_plan[e];
      expert_rows[e] = Matrix(plan.size(), dim);
      for (std::size_t m = 0; m < plan.size(); ++m) {
        std::size_t w = plan[m].worker;
        std::int32_t src_row = sort_perm[w][plan[m].position];
        std::span<const double> row = local[w].features().row(src_row);
        std::copy(row.begin(), row.end(), expert_rows[e].row(m).begin());
      }
    }
  }

  // Expert application; experts run independently over disjoint shards.
  std::vector<Matrix> expert_out(workers);
  std::vector<std::vector<double>> expert_gates(workers);
  for (std::size_t e = 0; e < workers; ++e) {
    if (expert_rows[e].rows() == 0) continue;
    expert_out[e] = Matrix(expert_rows[e].rows(), dim);
    expert_gates[e].assign(expert_rows[e].rows(), 0.0);
    stage("apply",
          [&] { apply_expert(experts, e, expert_rows[e], expert_out[e], expert_gates[e]); });
  }

  // Inverse all_to_all + unsort, via the recorded return plan: processed row m
  // of expert e goes back to worker w at pre-sort row sort_perm[w][k].
  std::vector<Matrix> local_out(workers, Matrix(tokens, dim));
  std::vector<std::vector<double>> local_gates(workers,
                                               std::vector<double>(tokens, 0.0));
  for (std::size_t e = 0; e < workers; ++e) {
    const std::vector<Origin>& plan = trace.return_plan[e];
    for (std::size_t m = 0; m < plan.size(); ++m) {
      std::size_t w = plan[m].worker;
      std::int32_t row = sort_perm[w][plan[m].position];
      std::span<const double> src = expert_out[e].row(m);
      std::copy(src.begin(), src.end(), local_out[w].row(row).begin());
      local_gates[w][row] = expert_gates[e][m];
    }
  }

  // Unshuffle (train): row j = src*group + i of worker d came from worker
  // src's row shuffle_perm[src][d*group + i]. Test mode: identity.
  std::vector<LayerOutput> outputs;
  outputs.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w)
    outputs.push_back({Matrix(tokens, dim), std::vector<double>(tokens, 0.0)});
  std::vector<std::vector<Origin>> final_origin(workers, std::vector<Origin>(tokens));
  if (train) {
    for (std::size_t d = 0; d < workers; ++d) {
      for (std::size_t j = 0; j < tokens; ++j) {
        std::size_t src = j / group, i = j % group;
        std::int32_t orig_row = trace.shuffle_perm[src][d * group + i];
        std::span<const double> row = local_out[d].row(j);
        std::copy(row.begin(), row.end(), outputs[src].outputs.row(orig_row).begin());
        outputs[src].gate_values[orig_row] = local_gates[d][j];
        final_origin[src][orig_row] = local[d].origin()[j];
        trace.expert_of_origin[src][orig_row] = assign_of[d][j];
      }
    }
  } else {
    for (std::size_t w = 0; w < workers; ++w) {
      outputs[w].outputs = std::move(local_out[w]);
      outputs[w].gate_values = std::move(local_gates[w]);
      final_origin[w] = local[w].origin();
      trace.expert_of_origin[w] = assign_of[w];
    }
  }

  // Inverse-routing verification: the mechanically returned origin metadata
  // must match the input ordering exactly.
  stage("return", [&] {
    for (std::size_t w = 0; w < workers; ++w)
      for (std::size_t p = 0; p < tokens; ++p)
        require(final_origin[w][p] == batches[w].origin()[p],
                "origin metadata does not match input ordering");
  });

  return {std::move(outputs), std::move(trace)};
}

}  // namespace baseroute
