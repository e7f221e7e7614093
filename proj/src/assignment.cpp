// SPDX-License-Identifier: Apache-2.0
#include "baseroute/assignment.hpp"

#include <algorithm>
#include <deque>
#include <limits>
#include <string>
#include <tuple>

#include "baseroute/kernels.hpp"

namespace baseroute {

AuctionConfig AuctionConfig::defaults_for(const ScoreMatrix& scores) {
  const auto& v = scores.values().data();
  auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  AuctionConfig cfg;
  cfg.epsilon = std::max((*hi - *lo) / (2.0 * static_cast<double>(scores.tokens())), 1e-9);
  cfg.max_iterations = 200 * static_cast<std::int64_t>(scores.tokens());
  return cfg;
}

void AuctionConfig::validate() const {
  require(epsilon > 0.0, "AuctionConfig: epsilon must be > 0");
  require(max_iterations >= 1, "AuctionConfig: max_iterations must be >= 1");
}

ScoreMatrix compute_scores(const TokenBatch& tokens, const ExpertSet& experts) {
  require(tokens.dim() == experts.dim(),
          "compute_scores: token feature dimension (" + std::to_string(tokens.dim()) +
              ") != expert embedding dimension (" + std::to_string(experts.dim()) + ")");
  Matrix out(tokens.tokens(), experts.num_experts());
  scores_kernel(tokens.features(), experts.embeddings(), out);
  return ScoreMatrix(std::move(out));
}

namespace {

// Cheapest and second-cheapest slot of one expert; ties to the lowest slot.
struct SlotMins {
  std::size_t slot = 0;
  double price1 = 0.0;
  double price2 = std::numeric_limits<double>::infinity();
};

SlotMins slot_mins(const std::vector<double>& prices) {
  SlotMins m;
  m.price1 = prices[0];
  for (std::size_t k = 1; k < prices.size(); ++k) {
    if (prices[k] < m.price1) {
      m.price2 = m.price1;
      m.price1 = prices[k];
      m.slot = k;
    } else if (prices[k] < m.price2) {
      m.price2 = prices[k];
    }
  }
  return m;
}

void greedy_fill(const Matrix& s, std::vector<std::int32_t>& expert_of,
                 std::vector<std::size_t>& load, std::size_t capacity) {
  const std::size_t t_count = s.rows(), e_count = s.cols();
  std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
  for (std::size_t t = 0; t < t_count; ++t) {
    if (expert_of[t] >= 0) continue;
    for (std::size_t e = 0; e < e_count; ++e) pairs.emplace_back(s(t, e), t, e);
  }
  // Descending score; ties by (token, expert) ascending.
  std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
    return std::get<2>(a) < std::get<2>(b);
  });
  for (const auto& [score, t, e] : pairs) {
    (void)score;
    if (expert_of[t] >= 0 || load[e] >= capacity) continue;
    expert_of[t] = static_cast<std::int32_t>(e);
    load[e]++;
  }
}

}  // namespace

AssignmentResult solve_balanced(const ScoreMatrix& scores, const AuctionConfig& config) {
  config.validate();
  const std::size_t t_count = scores.tokens();
  const std::size_t e_count = scores.experts();
  require(t_count % e_count == 0,
          "solve_balanced: expert count (" + std::to_string(e_count) +
              ") must divide token count (" + std::to_string(t_count) + ")");
  const std::size_t capacity = t_count / e_count;
  const Matrix& s = scores.values();
  const double inf = std::numeric_limits<double>::infinity();

  // One price per capacity slot; only an expert's cheapest slot can win a bid,
  // so second-best values need each expert's cheapest and the chosen expert's
  // second-cheapest slot.
  std::vector<std::vector<double>> price(e_count, std::vector<double>(capacity, 0.0));
  std::vector<std::vector<std::int64_t>> holder(
      e_count, std::vector<std::int64_t>(capacity, -1));
  std::vector<SlotMins> mins(e_count);

  std::deque<std::int64_t> unassigned;
  for (std::size_t t = 0; t < t_count; ++t)
    unassigned.push_back(static_cast<std::int64_t>(t));

  std::vector<std::int32_t> expert_of(t_count, -1);
  std::vector<std::size_t> slot_of(t_count, 0);

  std::int64_t bids = 0;
  while (!unassigned.empty() && bids < config.max_iterations) {
    const std::int64_t t = unassigned.front();
    unassigned.pop_front();
    ++bids;

    std::size_t best_e = 0;
    double v1 = -inf, v2 = -inf;
    for (std::size_t e = 0; e < e_count; ++e) {
      double net = s(t, e) - mins[e].price1;
      if (net > v1) {
        v2 = v1;
        v1 = net;
        best_e = e;
      } else if (net > v2) {
        v2 = net;
      }
    }
    if (capacity > 1) v2 = std::max(v2, s(t, best_e) - mins[best_e].price2);
    if (v2 == -inf) v2 = v1;  // single slot overall: no competition

    const std::size_t k = mins[best_e].slot;
    const std::int64_t evicted = holder[best_e][k];
    if (evicted >= 0) {
      expert_of[evicted] = -1;
      unassigned.push_back(evicted);
    }
    holder[best_e][k] = t;
    price[best_e][k] = s(t, best_e) - v2 + config.epsilon;
    expert_of[t] = static_cast<std::int32_t>(best_e);
    slot_of[t] = k;
    mins[best_e] = slot_mins(price[best_e]);
  }

  AssignmentResult result{
      Assignment(std::vector<std::int32_t>(t_count, 0), AssignMode::greedy, e_count), 0.0,
      bids, !unassigned.empty()};

  if (result.fell_back_to_greedy) {
    std::vector<std::size_t> load(e_count, 0);
    for (std::size_t t = 0; t < t_count; ++t)
      if (expert_of[t] >= 0) load[expert_of[t]]++;
    greedy_fill(s, expert_of, load, capacity);
  }

  result.assignment = Assignment(expert_of, AssignMode::balanced, e_count);
  result.objective = objective_of(scores, result.assignment);
  return result;
}

namespace {

// Exact min-cost square assignment via shortest augmenting paths with
// potentials (O(n^3)). Returns row -> column.
std::vector<std::size_t> hungarian_min(const Matrix& cost) {
  const std::size_t n = cost.rows();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);

  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      std::size_t i0 = p[j0], j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> row_to_col(n, 0);
  for (std::size_t j = 1; j <= n; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace

AssignmentResult solve_oracle(const ScoreMatrix& scores) {
  const std::size_t t_count = scores.tokens();
  const std::size_t e_count = scores.experts();
  require(t_count % e_count == 0,
          "solve_oracle: expert count must divide token count");
  require(t_count <= kOracleMaxTokens,
          "solve_oracle: instance too large (T=" + std::to_string(t_count) + " > " +
              std::to_string(kOracleMaxTokens) + ")");
  const std::size_t capacity = t_count / e_count;

  Matrix cost(t_count, t_count);
  for (std::size_t t = 0; t < t_count; ++t)
    for (std::size_t j = 0; j < t_count; ++j)
      cost(t, j) = -scores.values()(t, j / capacity);

  std::vector<std::size_t> row_to_col = hungarian_min(cost);
  std::vector<std::int32_t> expert_of(t_count);
  for (std::size_t t = 0; t < t_count; ++t)
    expert_of[t] = static_cast<std::int32_t>(row_to_col[t] / capacity);

  AssignmentResult result{Assignment(expert_of, AssignMode::balanced, e_count), 0.0, 0,
                          false};
  result.objective = objective_of(scores, result.assignment);
  return result;
}

Assignment assign_greedy(const ScoreMatrix& scores) {
  return Assignment(argmax_rows(scores.values()), AssignMode::greedy, scores.experts());
}

double objective_of(const ScoreMatrix& scores, const Assignment& assignment) {
  require(assignment.tokens() == scores.tokens(),
          "objective_of: assignment length != token count");
  double total = 0.0;
  for (std::size_t t = 0; t < assignment.tokens(); ++t) {
    std::int32_t e = assignment.expert_of()[t];
    require(e >= 0 && static_cast<std::size_t>(e) < scores.experts(),
            "objective_of: expert index out of range");
    total += scores.values()(t, static_cast<std::size_t>(e));
  }
  return total;
}

}  // namespace baseroute
