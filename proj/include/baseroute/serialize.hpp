// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include <json.hpp>

#include "baseroute/types.hpp"

namespace baseroute {

using json = nlohmann::json;

/// On-disk container format, version 1: a JSON document
///   { "schema_version": 1, "kind": "<type name>", "payload": { ... } }
/// Doubles survive the round trip bit-exactly (shortest-representation
/// printing on write, exact binary64 parse on read).
inline constexpr int kSchemaVersion = 1;

json make_container(const std::string& kind, json payload);
void save_container(const std::filesystem::path& path, const std::string& kind, json payload);
/// Throws ParseError on malformed JSON or version/kind mismatch.
json load_container(const std::filesystem::path& path, const std::string& expected_kind);

json to_json(const Matrix& m);
Matrix matrix_from_json(const json& j);

json to_json(const TokenBatch& b);
TokenBatch token_batch_from_json(const json& j);

json to_json(const ExpertBlock& b);
ExpertBlock expert_block_from_json(const json& j);

json to_json(const ExpertNetwork& n);
ExpertNetwork expert_network_from_json(const json& j);

json to_json(const ExpertSet& s);
ExpertSet expert_set_from_json(const json& j);

json to_json(const Assignment& a);
Assignment assignment_from_json(const json& j);

json to_json(const ScoreMatrix& s);
ScoreMatrix score_matrix_from_json(const json& j);

void save_token_batch(const std::filesystem::path& path, const TokenBatch& b);
TokenBatch load_token_batch(const std::filesystem::path& path);
void save_expert_set(const std::filesystem::path& path, const ExpertSet& s);
ExpertSet load_expert_set(const std::filesystem::path& path);

/// CSV matrix exchange format: header row "rows,cols", then one row per line,
/// values printed with 17 significant digits (round-trip exact).
void write_matrix_csv(std::ostream& out, const Matrix& m);
void save_matrix_csv(const std::filesystem::path& path, const Matrix& m);
/// Throws ParseError naming the offending line (1-based).
Matrix read_matrix_csv(std::istream& in);
Matrix load_matrix_csv(const std::filesystem::path& path);

/// Round-trip exact formatting for one double (17 significant digits).
std::string format_double(double v);

}  // namespace baseroute
