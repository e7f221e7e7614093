// SPDX-License-Identifier: Apache-2.0
#include "baseroute/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <ostream>

#include "baseroute/kernels.hpp"
#include "baseroute/layer.hpp"
#include "baseroute/rng.hpp"
#include "baseroute/serialize.hpp"

namespace baseroute {

BalanceReport balance_report(const std::vector<Assignment>& assignments,
                             std::size_t num_experts, ReportMode mode) {
  require(!assignments.empty(), "balance_report: no assignments");
  require(num_experts >= 1, "balance_report: E must be >= 1");
  std::vector<std::int64_t> counts(num_experts, 0);
  std::int64_t total = 0;
  for (const Assignment& a : assignments) {
    require(a.num_experts() == num_experts, "balance_report: expert count mismatch");
    for (std::int32_t e : a.expert_of()) counts[e]++;
    total += static_cast<std::int64_t>(a.tokens());
  }
  BalanceReport report;
  report.mode = mode;
  report.usage.reserve(num_experts);
  for (std::int64_t c : counts)
    report.usage.push_back(static_cast<double>(c) / static_cast<double>(total));
  std::sort(report.usage.begin(), report.usage.end(), std::greater<>());
  return report;
}

SpecializationTable specialization_table(
    const std::vector<std::vector<std::int64_t>>& id_sequences,
    const std::vector<Assignment>& assignments, std::size_t num_experts,
    std::size_t top_k, std::int64_t bos_id) {
  require(id_sequences.size() == assignments.size(),
          "specialization_table: sequence/assignment count mismatch");
  require(top_k >= 1, "specialization_table: top_k must be >= 1");

  std::vector<std::map<std::int64_t, std::int64_t>> counts(num_experts);
  for (std::size_t s = 0; s < id_sequences.size(); ++s) {
    const auto& ids = id_sequences[s];
    const auto& expert_of = assignments[s].expert_of();
    require(ids.size() == expert_of.size(),
            "specialization_table: sequence length != assignment length");
    require(assignments[s].num_experts() == num_experts,
            "specialization_table: expert count mismatch");
    for (std::size_t t = 0; t < ids.size(); ++t) {
      std::int64_t prev = t == 0 ? bos_id : ids[t - 1];
      counts[expert_of[t]][prev]++;
    }
  }

  SpecializationTable table;
  table.top_k = top_k;
  table.per_expert.resize(num_experts);
  for (std::size_t e = 0; e < num_experts; ++e) {
    std::vector<SpecEntry> entries;
    entries.reserve(counts[e].size());
    for (auto [id, c] : counts[e]) entries.push_back({id, c});
    // Count descending; ties by ascending id (std::map iteration order makes
    // the stable sort deterministic).
    std::stable_sort(entries.begin(), entries.end(),
                     [](const SpecEntry& a, const SpecEntry& b) { return a.count > b.count; });
    if (entries.size() > top_k) entries.resize(top_k);
    table.per_expert[e] = std::move(entries);
  }
  return table;
}

namespace {

std::vector<TokenBatch> random_batches(std::size_t workers, std::size_t tokens,
                                       std::size_t dim, std::uint64_t seed) {
  std::vector<TokenBatch> batches;
  batches.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    Rng rng = derive_rng(seed, streams::kBatch, w);
    Matrix features(tokens, dim);
    for (double& v : features.data()) v = rng.normal();
    batches.push_back(TokenBatch::from_features(std::move(features),
                                                static_cast<std::int32_t>(w)));
  }
  return batches;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<ThroughputRow> throughput_report(const std::vector<ThroughputSetting>& settings,
                                             std::size_t repetitions, std::uint64_t seed) {
  require(repetitions >= 3, "throughput_report: need at least 3 repetitions");
  using clock = std::chrono::steady_clock;

  std::vector<ThroughputRow> rows;
  rows.reserve(settings.size());
  for (const ThroughputSetting& s : settings) {
    ExpertSet experts = init_experts(s.experts, s.dim, s.blocks, seed);
    std::vector<TokenBatch> batches =
        random_batches(s.experts, s.tokens_per_worker, s.dim, seed);
    const double total_tokens = static_cast<double>(s.experts * s.tokens_per_worker);

    std::vector<double> samples;
    samples.reserve(repetitions);
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
      auto t0 = clock::now();
      auto [outputs, trace] = route_and_apply(batches, experts, std::nullopt, seed, s.mode);
      auto t1 = clock::now();
      (void)outputs;
      (void)trace;
      double seconds = std::chrono::duration<double>(t1 - t0).count();
      samples.push_back(total_tokens / std::max(seconds, 1e-12));
    }
    auto [lo, hi] = std::minmax_element(samples.begin(), samples.end());
    rows.push_back({s, median(samples), *lo, *hi});
  }
  return rows;
}

std::vector<KernelTiming> compare_kernels(std::size_t tokens, std::size_t dim,
                                          std::size_t experts, std::size_t blocks,
                                          std::size_t repetitions, std::uint64_t seed) {
  require(repetitions >= 1, "compare_kernels: need at least 1 repetition");
  using clock = std::chrono::steady_clock;

  ExpertSet eset = init_experts(experts, dim, blocks, seed);
  Rng rng = derive_rng(seed, streams::kBatch);
  Matrix features(tokens, dim);
  for (double& v : features.data()) v = rng.normal();
  Matrix upstream(tokens, dim);
  for (double& v : upstream.data()) v = rng.normal();
  std::vector<std::int32_t> assign(tokens);
  for (std::size_t t = 0; t < tokens; ++t)
    assign[t] = static_cast<std::int32_t>(rng.next_below(experts));

  auto time_ms = [&](auto&& fn) {
    std::vector<double> ms;
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
      auto t0 = clock::now();
      fn();
      auto t1 = clock::now();
      ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return median(ms);
  };

  std::vector<KernelTiming> rows;

  {
    Matrix out_p(tokens, experts), out_s(tokens, experts);
    KernelTiming k{"scores", 0.0, 0.0, false};
    k.parallel_ms = time_ms([&] { scores_kernel(features, eset.embeddings(), out_p); });
    k.serial_ms = time_ms([&] { ref::scores_kernel(features, eset.embeddings(), out_s); });
    k.outputs_match = out_p == out_s;
    rows.push_back(k);
  }
  {
    std::vector<std::int32_t> a_p, a_s;
    Matrix scores(tokens, experts);
    scores_kernel(features, eset.embeddings(), scores);
    KernelTiming k{"argmax", 0.0, 0.0, false};
    k.parallel_ms = time_ms([&] { a_p = argmax_rows(scores); });
    k.serial_ms = time_ms([&] { a_s = ref::argmax_rows(scores); });
    k.outputs_match = a_p == a_s;
    rows.push_back(k);
  }
  {
    Matrix out_p(tokens, dim), out_s(tokens, dim);
    std::vector<double> g_p(tokens), g_s(tokens);
    KernelTiming k{"mix_forward", 0.0, 0.0, false};
    k.parallel_ms = time_ms([&] { mix_forward_kernel(features, eset, assign, out_p, g_p); });
    k.serial_ms = time_ms([&] { ref::mix_forward_kernel(features, eset, assign, out_s, g_s); });
    k.outputs_match = out_p == out_s && g_p == g_s;
    rows.push_back(k);
  }
  {
    KernelTiming k{"mix_backward", 0.0, 0.0, false};
    Matrix di_p, di_s, de_p, de_s;
    std::vector<ExpertNetwork> dn_p, dn_s;
    k.parallel_ms = time_ms([&] {
      di_p = Matrix(tokens, dim);
      de_p = Matrix(experts, dim);
      dn_p = zero_networks(experts, dim, blocks);
      mix_backward_kernel(features, eset, assign, upstream, di_p, de_p, dn_p);
    });
    k.serial_ms = time_ms([&] {
      di_s = Matrix(tokens, dim);
      de_s = Matrix(experts, dim);
      dn_s = zero_networks(experts, dim, blocks);
      ref::mix_backward_kernel(features, eset, assign, upstream, di_s, de_s, dn_s);
    });
    k.outputs_match = di_p == di_s && de_p == de_s && dn_p == dn_s;
    rows.push_back(k);
  }
  return rows;
}

json to_json(const BalanceReport& report) {
  return json{{"mode", report.mode == ReportMode::training ? "training" : "testing"},
              {"usage_sorted", report.usage}};
}

json to_json(const SpecializationTable& table) {
  json experts = json::array();
  for (const auto& entries : table.per_expert) {
    json list = json::array();
    for (const SpecEntry& e : entries) list.push_back({{"prev_id", e.prev_id}, {"count", e.count}});
    experts.push_back(std::move(list));
  }
  return json{{"top_k", table.top_k}, {"per_expert", std::move(experts)}};
}

json to_json(const std::vector<ThroughputRow>& rows) {
  json arr = json::array();
  for (const ThroughputRow& r : rows) {
    arr.push_back({{"experts", r.setting.experts},
                   {"tokens_per_worker", r.setting.tokens_per_worker},
                   {"dim", r.setting.dim},
                   {"blocks", r.setting.blocks},
                   {"mode", r.setting.mode == RouteMode::train ? "train" : "test"},
                   {"median_tokens_per_sec", r.median_tokens_per_sec},
                   {"min_tokens_per_sec", r.min_tokens_per_sec},
                   {"max_tokens_per_sec", r.max_tokens_per_sec}});
  }
  return arr;
}

json to_json(const std::vector<KernelTiming>& rows) {
  json arr = json::array();
  for (const KernelTiming& r : rows) {
    arr.push_back({{"kernel", r.kernel},
                   {"serial_ms", r.serial_ms},
                   {"parallel_ms", r.parallel_ms},
                   {"outputs_match", r.outputs_match}});
  }
  return arr;
}

void write_balance_csv(std::ostream& out, const BalanceReport& report) {
  out << "rank,fraction\n";
  for (std::size_t i = 0; i < report.usage.size(); ++i)
    out << i << ',' << format_double(report.usage[i]) << '\n';
}

void write_balance_plot_data(std::ostream& out, const BalanceReport& report) {
  for (std::size_t i = 0; i < report.usage.size(); ++i)
    out << i << ' ' << format_double(report.usage[i]) << '\n';
}

void write_specialization_csv(std::ostream& out, const SpecializationTable& table) {
  out << "expert,rank,prev_token_id,count\n";
  for (std::size_t e = 0; e < table.per_expert.size(); ++e)
    for (std::size_t r = 0; r < table.per_expert[e].size(); ++r)
      out << e << ',' << r << ',' << table.per_expert[e][r].prev_id << ','
          << table.per_expert[e][r].count << '\n';
}

}  // namespace baseroute
