// SPDX-License-Identifier: Apache-2.0
#include "baseroute/types.hpp"

#include <algorithm>
#include <string>

namespace baseroute {

TokenBatch::TokenBatch(Matrix features, std::vector<std::int64_t> token_ids,
                       std::vector<Origin> origin)
    : features_(std::move(features)),
      token_ids_(std::move(token_ids)),
      origin_(std::move(origin)) {
  require(features_.rows() > 0, "TokenBatch: T must be > 0");
  require(features_.cols() > 0, "TokenBatch: D must be > 0");
  require(features_.all_finite(), "TokenBatch: features contain non-finite values");
  require(token_ids_.size() == features_.rows(), "TokenBatch: token_ids length != T");
  require(origin_.size() == features_.rows(), "TokenBatch: origin length != T");
  std::vector<Origin> sorted = origin_;
  std::sort(sorted.begin(), sorted.end());
  require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
          "TokenBatch: origin entries must be unique within a batch");
}

TokenBatch TokenBatch::from_features(Matrix features, std::int32_t worker) {
  std::size_t t = features.rows();
  std::vector<std::int64_t> ids(t);
  std::vector<Origin> origin(t);
  for (std::size_t i = 0; i < t; ++i) {
    ids[i] = static_cast<std::int64_t>(i);
    origin[i] = {worker, static_cast<std::int32_t>(i)};
  }
  return TokenBatch(std::move(features), std::move(ids), std::move(origin));
}

ExpertBlock ExpertBlock::zeros(std::size_t dim) {
  ExpertBlock b;
  b.ln_gain.assign(dim, 0.0);
  b.ln_bias.assign(dim, 0.0);
  b.w_up = Matrix(dim, 4 * dim);
  b.b_up.assign(4 * dim, 0.0);
  b.w_down = Matrix(4 * dim, dim);
  b.b_down.assign(dim, 0.0);
  return b;
}

ExpertNetwork ExpertNetwork::zeros(std::size_t dim, std::size_t num_blocks) {
  ExpertNetwork net;
  net.blocks.assign(num_blocks, ExpertBlock::zeros(dim));
  return net;
}

std::vector<std::span<double>> param_views(ExpertNetwork& net) {
  std::vector<std::span<double>> views;
  for (ExpertBlock& b : net.blocks) {
    views.emplace_back(b.ln_gain);
    views.emplace_back(b.ln_bias);
    views.emplace_back(b.w_up.data());
    views.emplace_back(b.b_up);
    views.emplace_back(b.w_down.data());
    views.emplace_back(b.b_down);
  }
  return views;
}

std::vector<std::span<const double>> param_views(const ExpertNetwork& net) {
  std::vector<std::span<const double>> views;
  for (const ExpertBlock& b : net.blocks) {
    views.emplace_back(b.ln_gain);
    views.emplace_back(b.ln_bias);
    views.emplace_back(b.w_up.data());
    views.emplace_back(b.b_up);
    views.emplace_back(b.w_down.data());
    views.emplace_back(b.b_down);
  }
  return views;
}

namespace {

void check_block_shapes(const ExpertBlock& b, std::size_t dim, const std::string& where) {
  require(b.ln_gain.size() == dim && b.ln_bias.size() == dim,
          where + ": layer-norm parameter dimension mismatch");
  require(b.w_up.rows() == dim && b.w_up.cols() == 4 * dim,
          where + ": up-projection must be D x 4D");
  require(b.b_up.size() == 4 * dim, where + ": up bias must have length 4D");
  require(b.w_down.rows() == 4 * dim && b.w_down.cols() == dim,
          where + ": down-projection must be 4D x D");
  require(b.b_down.size() == dim, where + ": down bias must have length D");
}

bool block_finite(const ExpertBlock& b) {
  auto fin = [](const std::vector<double>& v) {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  };
  return fin(b.ln_gain) && fin(b.ln_bias) && b.w_up.all_finite() && fin(b.b_up) &&
         b.w_down.all_finite() && fin(b.b_down);
}

}  // namespace

ExpertSet::ExpertSet(Matrix embeddings, std::vector<ExpertNetwork> networks)
    : embeddings_(std::move(embeddings)), networks_(std::move(networks)) {
  require(embeddings_.rows() > 0, "ExpertSet: E must be > 0");
  require(embeddings_.cols() > 0, "ExpertSet: D must be > 0");
  require(embeddings_.all_finite(), "ExpertSet: embeddings contain non-finite values");
  require(networks_.size() == embeddings_.rows(),
          "ExpertSet: need one network per expert");
  std::size_t dim = embeddings_.cols();
  std::size_t blocks = networks_[0].blocks.size();
  require(blocks >= 1, "ExpertSet: networks need at least one block");
  for (std::size_t e = 0; e < networks_.size(); ++e) {
    const ExpertNetwork& net = networks_[e];
    require(net.blocks.size() == blocks,
            "ExpertSet: networks must share identical layer shapes");
    for (const ExpertBlock& b : net.blocks) {
      check_block_shapes(b, dim, "ExpertSet");
      require(block_finite(b), "ExpertSet: network parameters contain non-finite values");
    }
  }
}

ExpertSet ExpertSet::with(Matrix embeddings, std::vector<ExpertNetwork> networks) const {
  return ExpertSet(std::move(embeddings), std::move(networks));
}

Assignment::Assignment(std::vector<std::int32_t> expert_of, AssignMode mode,
                       std::size_t num_experts)
    : expert_of_(std::move(expert_of)), mode_(mode), num_experts_(num_experts) {
  require(num_experts_ > 0, "Assignment: E must be > 0");
  require(!expert_of_.empty(), "Assignment: T must be > 0");
  for (std::int32_t e : expert_of_)
    require(e >= 0 && static_cast<std::size_t>(e) < num_experts_,
            "Assignment: expert index out of range");
  if (mode_ == AssignMode::balanced) {
    require(expert_of_.size() % num_experts_ == 0,
            "Assignment: balanced mode requires E to divide T");
    std::size_t quota = expert_of_.size() / num_experts_;
    std::vector<std::size_t> counts(num_experts_, 0);
    for (std::int32_t e : expert_of_) counts[static_cast<std::size_t>(e)]++;
    for (std::size_t c : counts)
      require(c == quota, "Assignment: balanced mode requires exactly T/E tokens per expert");
  }
}

ScoreMatrix::ScoreMatrix(Matrix values) : values_(std::move(values)) {
  require(values_.rows() > 0 && values_.cols() > 0, "ScoreMatrix: empty");
  require(values_.all_finite(), "ScoreMatrix: non-finite scores rejected");
}

}  // namespace baseroute
