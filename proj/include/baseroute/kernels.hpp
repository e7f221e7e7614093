// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "baseroute/types.hpp"

namespace baseroute {

/// Layer-norm epsilon inside the variance square root.
inline constexpr double kLayerNormEps = 1e-5;

double dot(std::span<const double> a, std::span<const double> b);
double sigmoid(double x);

/// Per-block intermediates cached by the forward pass for the backward pass.
struct BlockCache {
  std::vector<double> x;     // block input
  std::vector<double> xhat;  // normalized input
  std::vector<double> z;     // layer-norm output (gain * xhat + bias)
  std::vector<double> u;     // up-projection pre-activation (4D)
  std::vector<double> r;     // relu(u)
  double inv_s = 0.0;        // 1 / sqrt(var + eps)
};

/// x_out = x + w_down * relu(w_up * layernorm(x) + b_up) + b_down.
void block_forward(const ExpertBlock& blk, std::span<const double> x,
                   std::span<double> x_out, BlockCache* cache);

/// Accumulates parameter gradients into `grad` (same shapes as blk) and
/// writes the gradient w.r.t. the block input into d_in.
void block_backward(const ExpertBlock& blk, const BlockCache& cache,
                    std::span<const double> d_out, std::span<double> d_in,
                    ExpertBlock& grad);

void network_forward(const ExpertNetwork& net, std::span<const double> x,
                     std::span<double> out, std::vector<BlockCache>* caches);

void network_backward(const ExpertNetwork& net, const std::vector<BlockCache>& caches,
                      std::span<const double> d_out, std::span<double> d_in,
                      ExpertNetwork& grad);

// ---------------------------------------------------------------------------
// Data-parallel kernels. The primary versions use OpenMP; baseroute::ref holds
// serial reference implementations kept for equivalence tests and the
// benchmark. Both orders of arithmetic are identical per row, so results are
// bitwise equal regardless of thread count.
// ---------------------------------------------------------------------------

/// out[t][e] = dot(features row t, embeddings row e). Shapes must agree.
void scores_kernel(const Matrix& features, const Matrix& embeddings, Matrix& out);

/// Row argmax; ties broken by lowest column index.
std::vector<std::int32_t> argmax_rows(const Matrix& scores);

/// out[t] = sigmoid(h_t . w_{a_t}) * f_{a_t}(h_t) + h_t, gates[t] = the sigmoid.
void mix_forward_kernel(const Matrix& features, const ExpertSet& experts,
                        const std::vector<std::int32_t>& assign, Matrix& out,
                        std::vector<double>& gates);

/// Analytic gradients of sum_t dot(upstream_t, out_t). Parallel over experts:
/// each expert accumulates over its own tokens in ascending token order, so
/// the result is bitwise identical to the serial reference.
void mix_backward_kernel(const Matrix& features, const ExpertSet& experts,
                         const std::vector<std::int32_t>& assign, const Matrix& upstream,
                         Matrix& d_inputs, Matrix& d_embeddings,
                         std::vector<ExpertNetwork>& d_networks);

namespace ref {
void scores_kernel(const Matrix& features, const Matrix& embeddings, Matrix& out);
std::vector<std::int32_t> argmax_rows(const Matrix& scores);
void mix_forward_kernel(const Matrix& features, const ExpertSet& experts,
                        const std::vector<std::int32_t>& assign, Matrix& out,
                        std::vector<double>& gates);
void mix_backward_kernel(const Matrix& features, const ExpertSet& experts,
                         const std::vector<std::int32_t>& assign, const Matrix& upstream,
                         Matrix& d_inputs, Matrix& d_embeddings,
                         std::vector<ExpertNetwork>& d_networks);
}  // namespace ref

}  // namespace baseroute
