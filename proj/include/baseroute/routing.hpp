// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "baseroute/assignment.hpp"
#include "baseroute/layer.hpp"
#include "baseroute/serialize.hpp"
#include "baseroute/types.hpp"

namespace baseroute {

enum class RouteMode { train, test };

/// One worker per expert; each worker holds T tokens.
struct WorkerTopology {
  std::size_t num_workers = 1;
  std::size_t tokens_per_worker = 1;
  void validate() const;
};

/// Record of one pipeline run: enough to invert every data movement and to
/// audit the exchange counts.
struct RoutingTrace {
  RouteMode mode = RouteMode::train;
  /// Per worker: permutation applied by the shuffle (empty in test mode).
  /// Group g of worker w, perm[g*T/E .. (g+1)*T/E), is sent to worker g.
  std::vector<std::vector<std::int32_t>> shuffle_perm;
  std::vector<std::vector<std::int64_t>> shuffle_counts;   // E x E, tokens moved
  std::vector<std::vector<std::int64_t>> dispatch_counts;  // E x E, tokens dispatched
  /// Per expert worker: (source worker, source row) of each received row,
  /// in receive order. Composing this with the sort and shuffle records is
  /// the identity on origin metadata.
  std::vector<std::vector<Origin>> return_plan;
  std::vector<std::uint8_t> fell_back;          // per worker, train mode
  std::vector<std::int64_t> iterations_used;    // per worker, train mode
  std::int64_t max_shard_size = 0;
  /// Final expert handling each original token: [worker][position].
  std::vector<std::vector<std::int32_t>> expert_of_origin;
};

json to_json(const RoutingTrace& trace);

/// Random equal exchange: every worker sends exactly T/E uniformly chosen
/// tokens to every worker (partition without replacement). Per-worker streams
/// derive from (master_seed, streams::kShuffle, worker).
std::vector<TokenBatch> shuffle(const std::vector<TokenBatch>& batches,
                                std::uint64_t master_seed, RoutingTrace* trace = nullptr);

/// Stable sort by assigned expert. sorted.row(k) == batch.row(perm[k]);
/// scattering row k back to perm[k] inverts the reordering.
std::pair<TokenBatch, std::vector<std::int32_t>> sort_by_expert(const TokenBatch& batch,
                                                                const Assignment& assignment);

/// Splits a batch sorted by expert into E contiguous shards: shard e holds the
/// rows t with floor(t*E/T) == e.
std::vector<TokenBatch> all_to_all(const TokenBatch& batch, std::size_t num_shards);

/// Full pipeline. Train mode: shuffle -> per-worker scores + balanced solve ->
/// sort by expert -> all_to_all -> expert application -> exact inverse of each
/// step. Test mode: greedy assignment, no shuffle, variable shard sizes; the
/// return trip is still performed. Output rows per worker are in the original
/// input order (verified internally against origin metadata).
/// A nullopt config uses AuctionConfig::defaults_for on each worker's scores.
std::pair<std::vector<LayerOutput>, RoutingTrace> route_and_apply(
    const std::vector<TokenBatch>& batches, const ExpertSet& experts,
    const std::optional<AuctionConfig>& config, std::uint64_t master_seed,
    RouteMode mode);

}  // namespace baseroute
