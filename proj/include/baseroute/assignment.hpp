// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "baseroute/types.hpp"

namespace baseroute {

/// Auction solver knobs. epsilon is the bid increment floor (same units as
/// scores); max_iterations counts single bids before the greedy fallback.
struct AuctionConfig {
  double epsilon = 1e-9;
  std::int64_t max_iterations = 1;

  /// epsilon = (max score - min score) / (2T) clamped below by 1e-9;
  /// max_iterations = 200 * T.
  static AuctionConfig defaults_for(const ScoreMatrix& scores);

  void validate() const;
};

struct AssignmentResult {
  Assignment assignment;
  double objective = 0.0;
  std::int64_t iterations_used = 0;
  bool fell_back_to_greedy = false;
};

/// scores[t][e] = dot(tokens.features[t], experts.embeddings[e]).
/// Rejects dimension mismatches, reporting both dimensions.
ScoreMatrix compute_scores(const TokenBatch& tokens, const ExpertSet& experts);

/// Balanced token-to-expert assignment (exactly T/E tokens per expert) via a
/// forward auction over per-expert capacity slots. Each bidding token raises
/// the price of its best expert's cheapest slot by (best net value - second
/// best net value + epsilon), evicting the previous holder. On termination
/// the objective is within T*epsilon of the optimum; after max_iterations
/// bids the remaining tokens are placed by the greedy fallback (descending
/// score, ties by token then expert index), which keeps the balance exact.
AssignmentResult solve_balanced(const ScoreMatrix& scores, const AuctionConfig& config);

/// Exact optimum for testing: replicate each expert column T/E times, solve
/// the square T x T assignment problem exactly, map replicas back.
/// Rejected above kOracleMaxTokens.
AssignmentResult solve_oracle(const ScoreMatrix& scores);
inline constexpr std::size_t kOracleMaxTokens = 128;

/// Test-time assignment: a_t = argmax_e scores[t][e], ties to lowest index.
Assignment assign_greedy(const ScoreMatrix& scores);

/// sum_t scores[t][a_t]. Rejects length mismatch or out-of-range indices.
double objective_of(const ScoreMatrix& scores, const Assignment& assignment);

}  // namespace baseroute
