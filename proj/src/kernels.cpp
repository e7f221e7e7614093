// SPDX-License-Identifier: Apache-2.0
#include "baseroute/kernels.hpp"

#include <cmath>

namespace baseroute {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void block_forward(const ExpertBlock& blk, std::span<const double> x,
                   std::span<double> x_out, BlockCache* cache) {
  const std::size_t d = blk.ln_gain.size();
  const std::size_t h = blk.b_up.size();

  double mean = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  double inv_s = 1.0 / std::sqrt(var + kLayerNormEps);

  std::vector<double> xhat(d), z(d), u(h), r(h);
  for (std::size_t i = 0; i < d; ++i) {
    xhat[i] = (x[i] - mean) * inv_s;
    z[i] = blk.ln_gain[i] * xhat[i] + blk.ln_bias[i];
  }
  for (std::size_t j = 0; j < h; ++j) u[j] = blk.b_up[j];
  for (std::size_t i = 0; i < d; ++i) {
    double zi = z[i];
    std::span<const double> wrow = blk.w_up.row(i);
    for (std::size_t j = 0; j < h; ++j) u[j] += zi * wrow[j];
  }
  for (std::size_t j = 0; j < h; ++j) r[j] = u[j] > 0.0 ? u[j] : 0.0;

  for (std::size_t o = 0; o < d; ++o) x_out[o] = x[o] + blk.b_down[o];
  for (std::size_t j = 0; j < h; ++j) {
    double rj = r[j];
    if (rj == 0.0) continue;
    std::span<const double> wrow = blk.w_down.row(j);
    for (std::size_t o = 0; o < d; ++o) x_out[o] += rj * wrow[o];
  }

  if (cache) {
    cache->x.assign(x.begin(), x.end());
    cache->xhat = std::move(xhat);
    cache->z = std::move(z);
    cache->u = std::move(u);
    cache->r = std::move(r);
    cache->inv_s = inv_s;
  }
}

void block_backward(const ExpertBlock& blk, const BlockCache& cache,
                    std::span<const double> d_out, std::span<double> d_in,
                    ExpertBlock& grad) {
  const std::size_t d = blk.ln_gain.size();
  const std::size_t h = blk.b_up.size();

  // Down projection: y[o] = sum_j r[j] * w_down[j][o] + b_down[o].
  std::vector<double> dr(h, 0.0);
  for (std::size_t o = 0; o < d; ++o) grad.b_down[o] += d_out[o];
  for (std::size_t j = 0; j < h; ++j) {
    double rj = cache.r[j];
    std::span<const double> wrow = blk.w_down.row(j);
    std::span<double> growr = grad.w_down.row(j);
    double acc = 0.0;
    for (std::size_t o = 0; o < d; ++o) {
      acc += wrow[o] * d_out[o];
      growr[o] += rj * d_out[o];
    }
    dr[j] = acc;
  }

  // ReLU: subgradient 0 at u == 0.
  std::vector<double> du(h);
  for (std::size_t j = 0; j < h; ++j) du[j] = cache.u[j] > 0.0 ? dr[j] : 0.0;

  // Up projection: u[j] = sum_i z[i] * w_up[i][j] + b_up[j].
  std::vector<double> dz(d, 0.0);
  for (std::size_t j = 0; j < h; ++j) grad.b_up[j] += du[j];
  for (std::size_t i = 0; i < d; ++i) {
    double zi = cache.z[i];
    std::span<const double> wrow = blk.w_up.row(i);
    std::span<double> growr = grad.w_up.row(i);
    double acc = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      acc += wrow[j] * du[j];
      growr[j] += zi * du[j];
    }
    dz[i] = acc;
  }

  // Layer norm: z = gain * xhat + bias, xhat = (x - mean) / sqrt(var + eps).
  std::vector<double> dxhat(d);
  double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    grad.ln_gain[i] += dz[i] * cache.xhat[i];
    grad.ln_bias[i] += dz[i];
    dxhat[i] = dz[i] * blk.ln_gain[i];
    mean_dxhat += dxhat[i];
    mean_dxhat_xhat += dxhat[i] * cache.xhat[i];
  }
  mean_dxhat /= static_cast<double>(d);
  mean_dxhat_xhat /= static_cast<double>(d);

  // Residual path contributes d_out directly.
  for (std::size_t i = 0; i < d; ++i)
    d_in[i] = d_out[i] +
              cache.inv_s * (dxhat[i] - mean_dxhat - cache.xhat[i] * mean_dxhat_xhat);
}

void network_forward(const ExpertNetwork& net, std::span<const double> x,
                     std::span<double> out, std::vector<BlockCache>* caches) {
  const std::size_t d = net.dim();
  std::vector<double> cur(x.begin(), x.end()), next(d);
  if (caches) caches->resize(net.blocks.size());
  for (std::size_t k = 0; k < net.blocks.size(); ++k) {
    block_forward(net.blocks[k], cur, next, caches ? &(*caches)[k] : nullptr);
    std::swap(cur, next);
  }
  for (std::size_t i = 0; i < d; ++i) out[i] = cur[i];
}

void network_backward(const ExpertNetwork& net, const std::vector<BlockCache>& caches,
                      std::span<const double> d_out, std::span<double> d_in,
                      ExpertNetwork& grad) {
  const std::size_t d = net.dim();
  std::vector<double> cur(d_out.begin(), d_out.end()), prev(d);
  for (std::size_t k = net.blocks.size(); k-- > 0;) {
    block_backward(net.blocks[k], caches[k], cur, prev, grad.blocks[k]);
    std::swap(cur, prev);
  }
  for (std::size_t i = 0; i < d; ++i) d_in[i] = cur[i];
}

namespace {

inline void scores_row(const Matrix& features, const Matrix& embeddings, Matrix& out,
                       std::size_t t) {
  std::span<const double> h = features.row(t);
  for (std::size_t e = 0; e < embeddings.rows(); ++e)
    out(t, e) = dot(h, embeddings.row(e));
}

inline std::int32_t argmax_row(const Matrix& scores, std::size_t t) {
  std::span<const double> row = scores.row(t);
  std::size_t best = 0;
  for (std::size_t e = 1; e < row.size(); ++e)
    if (row[e] > row[best]) best = e;
  return static_cast<std::int32_t>(best);
}

inline void mix_forward_row(const Matrix& features, const ExpertSet& experts,
                            std::int32_t a, Matrix& out, std::vector<double>& gates,
                            std::size_t t) {
  const std::size_t d = features.cols();
  std::span<const double> h = features.row(t);
  std::vector<double> f(d);
  network_forward(experts.networks()[a], h, f, nullptr);
  double gate = sigmoid(dot(h, experts.embeddings().row(a)));
  std::span<double> o = out.row(t);
  for (std::size_t i = 0; i < d; ++i) o[i] = gate * f[i] + h[i];
  gates[t] = gate;
}

// Backward for one token; accumulates into the owning expert's slots only.
inline void mix_backward_row(const Matrix& features, const ExpertSet& experts,
                             std::int32_t a, const Matrix& upstream, Matrix& d_inputs,
                             Matrix& d_embeddings, std::vector<ExpertNetwork>& d_networks,
                             std::size_t t, std::vector<BlockCache>& caches) {
  const std::size_t d = features.cols();
  std::span<const double> h = features.row(t);
  std::span<const double> u = upstream.row(t);
  std::span<const double> w = experts.embeddings().row(a);

  std::vector<double> f(d);
  network_forward(experts.networks()[a], h, f, &caches);
  double s = dot(h, w);
  double gate = sigmoid(s);
  double dgate = gate * (1.0 - gate);
  double u_dot_f = dot(u, f);

  std::span<double> demb = d_embeddings.row(a);
  for (std::size_t i = 0; i < d; ++i) demb[i] += dgate * u_dot_f * h[i];

  std::vector<double> df(d), dh_f(d);
  for (std::size_t i = 0; i < d; ++i) df[i] = gate * u[i];
  network_backward(experts.networks()[a], caches, df, dh_f, d_networks[a]);

  std::span<double> dh = d_inputs.row(t);
  for (std::size_t i = 0; i < d; ++i)
    dh[i] = u[i] + dgate * u_dot_f * w[i] + dh_f[i];
}

}  // namespace

void scores_kernel(const Matrix& features, const Matrix& embeddings, Matrix& out) {
  const std::int64_t t_count = static_cast<std::int64_t>(features.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t t = 0; t < t_count; ++t)
    scores_row(features, embeddings, out, static_cast<std::size_t>(t));
}

std::vector<std::int32_t> argmax_rows(const Matrix& scores) {
  std::vector<std::int32_t> out(scores.rows());
  const std::int64_t t_count = static_cast<std::int64_t>(scores.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t t = 0; t < t_count; ++t)
    out[t] = argmax_row(scores, static_cast<std::size_t>(t));
  return out;
}

void mix_forward_kernel(const Matrix& features, const ExpertSet& experts,
                        const std::vector<std::int32_t>& assign, Matrix& out,
                        std::vector<double>& gates) {
  const std::int64_t t_count = static_cast<std::int64_t>(features.rows());
#pragma omp parallel for schedule(static)
  for (std::int64_t t = 0; t < t_count; ++t)
    mix_forward_row(features, experts, assign[t], out, gates, static_cast<std::size_t>(t));
}

void mix_backward_kernel(const Matrix& features, const ExpertSet& experts,
                         const std::vector<std::int32_t>& assign, const Matrix& upstream,
                         Matrix& d_inputs, Matrix& d_embeddings,
                         std::vector<ExpertNetwork>& d_networks) {
  const std::size_t num_experts = experts.num_experts();
  std::vector<std::vector<std::size_t>> tokens_of(num_experts);
  for (std::size_t t = 0; t < assign.size(); ++t)
    tokens_of[assign[t]].push_back(t);

  const std::int64_t e_count = static_cast<std::int64_t>(num_experts);
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t e = 0; e < e_count; ++e) {
    std::vector<BlockCache> caches;
    for (std::size_t t : tokens_of[static_cast<std::size_t>(e)])
      mix_backward_row(features, experts, static_cast<std::int32_t>(e), upstream,
                       d_inputs, d_embeddings, d_networks, t, caches);
  }
}

namespace ref {

void scores_kernel(const Matrix& features, const Matrix& embeddings, Matrix& out) {
  for (std::size_t t = 0; t < features.rows(); ++t)
    scores_row(features, embeddings, out, t);
}

std::vector<std::int32_t> argmax_rows(const Matrix& scores) {
  std::vector<std::int32_t> out(scores.rows());
  for (std::size_t t = 0; t < scores.rows(); ++t) out[t] = argmax_row(scores, t);
  return out;
}

void mix_forward_kernel(const Matrix& features, const ExpertSet& experts,
                        const std::vector<std::int32_t>& assign, Matrix& out,
                        std::vector<double>& gates) {
  for (std::size_t t = 0; t < features.rows(); ++t)
    mix_forward_row(features, experts, assign[t], out, gates, t);
}

void mix_backward_kernel(const Matrix& features, const ExpertSet& experts,
                         const std::vector<std::int32_t>& assign, const Matrix& upstream,
                         Matrix& d_inputs, Matrix& d_embeddings,
                         std::vector<ExpertNetwork>& d_networks) {
  // Token order within each expert matches the parallel kernel, so the two
  // paths accumulate in the same order.
  std::vector<BlockCache> caches;
  for (std::size_t t = 0; t < features.rows(); ++t)
    mix_backward_row(features, experts, assign[t], upstream, d_inputs, d_embeddings,
                     d_networks, t, caches);
}

}  // namespace ref

}  // namespace baseroute
