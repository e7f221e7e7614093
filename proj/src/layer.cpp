// SPDX-License-Identifier: Apache-2.0
#include "baseroute/layer.hpp"

#include <string>

#include "baseroute/kernels.hpp"
#include "baseroute/rng.hpp"

namespace baseroute {

std::vector<double> expert_forward(const ExpertNetwork& net, std::span<const double> h) {
  require(!net.blocks.empty(), "expert_forward: network needs at least one block");
  require(h.size() == net.dim(), "expert_forward: input dimension mismatch");
  for (double v : h) require(std::isfinite(v), "expert_forward: non-finite input");
  std::vector<double> out(h.size());
  network_forward(net, h, out, nullptr);
  return out;
}

namespace {

void check_layer_args(const TokenBatch& tokens, const ExpertSet& experts,
                      const Assignment& assignment) {
  require(tokens.dim() == experts.dim(),
          "layer: token dimension (" + std::to_string(tokens.dim()) +
              ") != expert dimension (" + std::to_string(experts.dim()) + ")");
  require(assignment.tokens() == tokens.tokens(),
          "layer: assignment length != token count");
  for (std::int32_t e : assignment.expert_of())
    require(e >= 0 && static_cast<std::size_t>(e) < experts.num_experts(),
            "layer: expert index out of range");
}

}  // namespace

LayerOutput layer_forward(const TokenBatch& tokens, const ExpertSet& experts,
                          const Assignment& assignment) {
  check_layer_args(tokens, experts, assignment);
  LayerOutput out{Matrix(tokens.tokens(), tokens.dim()),
                  std::vector<double>(tokens.tokens(), 0.0)};
  mix_forward_kernel(tokens.features(), experts, assignment.expert_of(), out.outputs,
                     out.gate_values);
  return out;
}

LayerGradients layer_backward(const TokenBatch& tokens, const ExpertSet& experts,
                              const Assignment& assignment, const Matrix& upstream) {
  check_layer_args(tokens, experts, assignment);
  require(upstream.rows() == tokens.tokens() && upstream.cols() == tokens.dim(),
          "layer_backward: upstream shape mismatch");
  require(upstream.all_finite(), "layer_backward: non-finite upstream");

  LayerGradients grads{
      Matrix(tokens.tokens(), tokens.dim()),
      Matrix(experts.num_experts(), experts.dim()),
      zero_networks(experts.num_experts(), experts.dim(), experts.blocks_per_expert())};
  mix_backward_kernel(tokens.features(), experts, assignment.expert_of(), upstream,
                      grads.d_inputs, grads.d_embeddings, grads.d_networks);
  return grads;
}

ExpertSet init_experts(std::size_t num_experts, std::size_t dim, std::size_t num_blocks,
                       std::uint64_t seed) {
  Rng rng = derive_rng(seed, streams::kInit);
  Matrix embeddings(num_experts, dim);
  for (double& v : embeddings.data()) v = rng.normal(0.0, 0.02);

  std::vector<ExpertNetwork> networks;
  networks.reserve(num_experts);
  for (std::size_t e = 0; e < num_experts; ++e) {
    ExpertNetwork net = ExpertNetwork::zeros(dim, num_blocks);
    for (ExpertBlock& b : net.blocks) {
      for (double& v : b.ln_gain) v = 1.0;
      for (double& v : b.w_up.data()) v = rng.normal(0.0, 0.02);
      for (double& v : b.w_down.data()) v = rng.normal(0.0, 0.02);
    }
    networks.push_back(std::move(net));
  }
  return ExpertSet(std::move(embeddings), std::move(networks));
}

std::vector<ExpertNetwork> zero_networks(std::size_t num_experts, std::size_t dim,
                                         std::size_t num_blocks) {
  return std::vector<ExpertNetwork>(num_experts, ExpertNetwork::zeros(dim, num_blocks));
}

}  // namespace baseroute
