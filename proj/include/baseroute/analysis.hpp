// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "baseroute/routing.hpp"
#include "baseroute/types.hpp"

namespace baseroute {

enum class ReportMode { training, testing };

/// Token fraction routed to each expert, sorted non-increasing; sums to 1.
struct BalanceReport {
  std::vector<double> usage;
  ReportMode mode = ReportMode::training;
};

BalanceReport balance_report(const std::vector<Assignment>& assignments,
                             std::size_t num_experts, ReportMode mode);

struct SpecEntry {
  std::int64_t prev_id = 0;
  std::int64_t count = 0;
};

/// Per expert, the top-k most frequent token ids seen at position t-1 among
/// the tokens it was assigned. Ties by ascending id.
struct SpecializationTable {
  std::size_t top_k = 5;
  std::vector<std::vector<SpecEntry>> per_expert;
};

/// Position 0 of every sequence contributes `bos_id` as its previous token.
SpecializationTable specialization_table(
    const std::vector<std::vector<std::int64_t>>& id_sequences,
    const std::vector<Assignment>& assignments, std::size_t num_experts,
    std::size_t top_k, std::int64_t bos_id);

struct ThroughputSetting {
  std::size_t experts = 2;
  std::size_t tokens_per_worker = 64;
  std::size_t dim = 16;
  std::size_t blocks = 1;
  RouteMode mode = RouteMode::train;
};

struct ThroughputRow {
  ThroughputSetting setting;
  double median_tokens_per_sec = 0.0;
  double min_tokens_per_sec = 0.0;
  double max_tokens_per_sec = 0.0;
};

/// Times route_and_apply end to end; median over `repetitions` (>= 3) runs.
/// Absolute numbers are machine-dependent and carry no acceptance contract.
std::vector<ThroughputRow> throughput_report(const std::vector<ThroughputSetting>& settings,
                                             std::size_t repetitions, std::uint64_t seed);

struct KernelTiming {
  std::string kernel;
  double serial_ms = 0.0;
  double parallel_ms = 0.0;
  bool outputs_match = false;  // parallel vs serial reference, bitwise
};

/// Serial reference vs OpenMP kernels on one synthetic instance.
std::vector<KernelTiming> compare_kernels(std::size_t tokens, std::size_t dim,
                                          std::size_t experts, std::size_t blocks,
                                          std::size_t repetitions, std::uint64_t seed);

json to_json(const BalanceReport& report);
json to_json(const SpecializationTable& table);
json to_json(const std::vector<ThroughputRow>& rows);
json to_json(const std::vector<KernelTiming>& rows);

void write_balance_csv(std::ostream& out, const BalanceReport& report);
/// "index fraction" pairs, one per line, for external plotting.
void write_balance_plot_data(std::ostream& out, const BalanceReport& report);
void write_specialization_csv(std::ostream& out, const SpecializationTable& table);

}  // namespace baseroute
