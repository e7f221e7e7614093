// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "baseroute/matrix.hpp"

namespace baseroute {

/// Where a token row came from: owning worker and position in that worker's
/// batch. Carried through the routing pipeline to verify inverse routing.
struct Origin {
  std::int32_t worker = 0;
  std::int32_t position = 0;

  bool operator==(const Origin&) const = default;
  auto operator<=>(const Origin&) const = default;
};

/// T feature vectors of dimension D plus token ids and origin metadata.
/// Immutable after construction; origin uniqueness is checked here.
class TokenBatch {
 public:
  TokenBatch(Matrix features, std::vector<std::int64_t> token_ids, std::vector<Origin> origin);

  /// Convenience: origins (worker, 0..T-1), ids 0..T-1.
  static TokenBatch from_features(Matrix features, std::int32_t worker = 0);

  const Matrix& features() const { return features_; }
  const std::vector<std::int64_t>& token_ids() const { return token_ids_; }
  const std::vector<Origin>& origin() const { return origin_; }
  std::size_t tokens() const { return features_.rows(); }
  std::size_t dim() const { return features_.cols(); }

 private:
  Matrix features_;
  std::vector<std::int64_t> token_ids_;
  std::vector<Origin> origin_;
};

/// One feedforward block: x + W_down * relu(W_up * layernorm(x) + b_up) + b_down.
/// Weight shapes follow the [in][out] convention: w_up is D x 4D, w_down 4D x D.
struct ExpertBlock {
  std::vector<double> ln_gain;
  std::vector<double> ln_bias;
  Matrix w_up;
  std::vector<double> b_up;
  Matrix w_down;
  std::vector<double> b_down;

  static ExpertBlock zeros(std::size_t dim);
  bool operator==(const ExpertBlock&) const = default;
};

/// Stack of feedforward blocks applied in order. Also reused as the gradient
/// container for its own parameters (shapes mirror exactly).
struct ExpertNetwork {
  std::vector<ExpertBlock> blocks;

  static ExpertNetwork zeros(std::size_t dim, std::size_t num_blocks);
  std::size_t dim() const { return blocks.empty() ? 0 : blocks[0].ln_gain.size(); }
  bool operator==(const ExpertNetwork&) const = default;
};

/// Mutable views over every parameter of a network, in a fixed documented
/// order (per block: ln_gain, ln_bias, w_up, b_up, w_down, b_down). Used by
/// the trainer update, gradient clipping and finite-difference tests.
std::vector<std::span<double>> param_views(ExpertNetwork& net);
std::vector<std::span<const double>> param_views(const ExpertNetwork& net);

/// E expert embeddings plus per-expert feedforward parameters. All networks
/// must share identical layer shapes.
class ExpertSet {
 public:
  ExpertSet(Matrix embeddings, std::vector<ExpertNetwork> networks);

  const Matrix& embeddings() const { return embeddings_; }
  const std::vector<ExpertNetwork>& networks() const { return networks_; }
  std::size_t num_experts() const { return embeddings_.rows(); }
  std::size_t dim() const { return embeddings_.cols(); }
  std::size_t blocks_per_expert() const { return networks_[0].blocks.size(); }

  /// Rebuild with the same shapes but different values (revalidates).
  ExpertSet with(Matrix embeddings, std::vector<ExpertNetwork> networks) const;

 private:
  Matrix embeddings_;
  std::vector<ExpertNetwork> networks_;
};

enum class AssignMode { balanced, greedy };

/// Length-T vector of expert indices. In balanced mode every expert occurs
/// exactly T/E times; greedy mode carries no count constraint.
class Assignment {
 public:
  Assignment(std::vector<std::int32_t> expert_of, AssignMode mode, std::size_t num_experts);

  const std::vector<std::int32_t>& expert_of() const { return expert_of_; }
  AssignMode mode() const { return mode_; }
  std::size_t num_experts() const { return num_experts_; }
  std::size_t tokens() const { return expert_of_.size(); }

 private:
  std::vector<std::int32_t> expert_of_;
  AssignMode mode_;
  std::size_t num_experts_;
};

/// T x E token-expert affinities. Finite by construction.
class ScoreMatrix {
 public:
  explicit ScoreMatrix(Matrix values);

  const Matrix& values() const { return values_; }
  std::size_t tokens() const { return values_.rows(); }
  std::size_t experts() const { return values_.cols(); }

 private:
  Matrix values_;
};

}  // namespace baseroute
