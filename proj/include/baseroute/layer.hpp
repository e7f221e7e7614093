// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "baseroute/types.hpp"

namespace baseroute {

struct LayerOutput {
  Matrix outputs;                  // T x D
  std::vector<double> gate_values;  // sigmoid(h_t . w_{a_t}), strictly in (0,1)
};

struct LayerGradients {
  Matrix d_inputs;                       // T x D
  Matrix d_embeddings;                   // E x D; zero rows for unassigned experts
  std::vector<ExpertNetwork> d_networks;  // shapes mirror the expert parameters
};

/// One expert network applied to a single D-vector.
std::vector<double> expert_forward(const ExpertNetwork& net, std::span<const double> h);

/// out_t = sigmoid(h_t . w_{a_t}) * f_{a_t}(h_t) + h_t.
LayerOutput layer_forward(const TokenBatch& tokens, const ExpertSet& experts,
                          const Assignment& assignment);

/// Exact analytic gradients of sum_t dot(upstream_t, out_t) with respect to
/// inputs, embeddings and all expert network parameters.
LayerGradients layer_backward(const TokenBatch& tokens, const ExpertSet& experts,
                              const Assignment& assignment, const Matrix& upstream);

/// Deterministic initialization: embeddings and projection weights from a
/// seeded normal with stddev 0.02, layer-norm gain 1, all biases 0.
ExpertSet init_experts(std::size_t num_experts, std::size_t dim, std::size_t num_blocks,
                       std::uint64_t seed);

/// Same shapes as `experts`, every parameter zero (identity layer).
std::vector<ExpertNetwork> zero_networks(std::size_t num_experts, std::size_t dim,
                                         std::size_t num_blocks);

}  // namespace baseroute
