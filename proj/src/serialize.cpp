// SPDX-License-Identifier: Apache-2.0
#include "baseroute/serialize.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace baseroute {

json make_container(const std::string& kind, json payload) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["kind"] = kind;
  j["payload"] = std::move(payload);
  return j;
}

void save_container(const std::filesystem::path& path, const std::string& kind, json payload) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open for writing: " + path.string());
  out << make_container(kind, std::move(payload)).dump(2) << '\n';
}

json load_container(const std::filesystem::path& path, const std::string& expected_kind) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!j.contains("schema_version") || !j["schema_version"].is_number_integer())
    throw ParseError(path.string() + ": missing schema_version");
  if (j["schema_version"].get<int>() != kSchemaVersion)
    throw ParseError(path.string() + ": unsupported schema_version");
  if (!j.contains("kind") || j["kind"].get<std::string>() != expected_kind)
    throw ParseError(path.string() + ": expected kind '" + expected_kind + "'");
  if (!j.contains("payload")) throw ParseError(path.string() + ": missing payload");
  return j["payload"];
}

json to_json(const Matrix& m) {
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

Matrix matrix_from_json(const json& j) {
  try {
    std::size_t rows = j.at("rows").get<std::size_t>();
    std::size_t cols = j.at("cols").get<std::size_t>();
    auto data = j.at("data").get<std::vector<double>>();
    if (data.size() != rows * cols) throw ParseError("matrix data size != rows*cols");
    Matrix m(rows, cols);
    m.data() = std::move(data);
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("matrix: ") + e.what());
  }
}

json to_json(const TokenBatch& b) {
  json origins = json::array();
  for (const Origin& o : b.origin()) origins.push_back({o.worker, o.position});
  return json{{"features", to_json(b.features())},
              {"token_ids", b.token_ids()},
              {"origin", std::move(origins)}};
}

TokenBatch token_batch_from_json(const json& j) {
  try {
    Matrix features = matrix_from_json(j.at("features"));
    auto ids = j.at("token_ids").get<std::vector<std::int64_t>>();
    std::vector<Origin> origin;
    for (const auto& o : j.at("origin"))
      origin.push_back({o.at(0).get<std::int32_t>(), o.at(1).get<std::int32_t>()});
    return TokenBatch(std::move(features), std::move(ids), std::move(origin));
  } catch (const json::exception& e) {
    throw ParseError(std::string("token batch: ") + e.what());
  }
}

json to_json(const ExpertBlock& b) {
  return json{{"ln_gain", b.ln_gain},   {"ln_bias", b.ln_bias}, {"w_up", to_json(b.w_up)},
              {"b_up", b.b_up},         {"w_down", to_json(b.w_down)},
              {"b_down", b.b_down}};
}

ExpertBlock expert_block_from_json(const json& j) {
  ExpertBlock b;
  b.ln_gain = j.at("ln_gain").get<std::vector<double>>();
  b.ln_bias = j.at("ln_bias").get<std::vector<double>>();
  b.w_up = matrix_from_json(j.at("w_up"));
  b.b_up = j.at("b_up").get<std::vector<double>>();
  b.w_down = matrix_from_json(j.at("w_down"));
  b.b_down = j.at("b_down").get<std::vector<double>>();
  return b;
}

json to_json(const ExpertNetwork& n) {
  json blocks = json::array();
  for (const ExpertBlock& b : n.blocks) blocks.push_back(to_json(b));
  return json{{"blocks", std::move(blocks)}};
}

ExpertNetwork expert_network_from_json(const json& j) {
  ExpertNetwork n;
  for (const auto& b : j.at("blocks")) n.blocks.push_back(expert_block_from_json(b));
  return n;
}

json to_json(const ExpertSet& s) {
  json nets = json::array();
  for (const ExpertNetwork& n : s.networks()) nets.push_back(to_json(n));
  return json{{"embeddings", to_json(s.embeddings())}, {"networks", std::move(nets)}};
}

ExpertSet expert_set_from_json(const json& j) {
  try {
    Matrix emb = matrix_from_json(j.at("embeddings"));
    std::vector<ExpertNetwork> nets;
    for (const auto& n : j.at("networks")) nets.push_back(expert_network_from_json(n));
    return ExpertSet(std::move(emb), std::move(nets));
  } catch (const json::exception& e) {
    throw ParseError(std::string("expert set: ") + e.what());
  }
}

json to_json(const Assignment& a) {
  return json{{"expert_of", a.expert_of()},
              {"mode", a.mode() == AssignMode::balanced ? "balanced" : "greedy"},
              {"num_experts", a.num_experts()}};
}

Assignment assignment_from_json(const json& j) {
  try {
    auto expert_of = j.at("expert_of").get<std::vector<std::int32_t>>();
    std::string mode = j.at("mode").get<std::string>();
    std::size_t e = j.at("num_experts").get<std::size_t>();
    if (mode != "balanced" && mode != "greedy") throw ParseError("assignment: bad mode");
    return Assignment(std::move(expert_of),
                      mode == "balanced" ? AssignMode::balanced : AssignMode::greedy, e);
  } catch (const json::exception& e) {
    throw ParseError(std::string("assignment: ") + e.what());
  }
}

json to_json(const ScoreMatrix& s) { return json{{"values", to_json(s.values())}}; }

ScoreMatrix score_matrix_from_json(const json& j) {
  return ScoreMatrix(matrix_from_json(j.at("values")));
}

void save_token_batch(const std::filesystem::path& path, const TokenBatch& b) {
  save_container(path, "token_batch", to_json(b));
}

TokenBatch load_token_batch(const std::filesystem::path& path) {
  return token_batch_from_json(load_container(path, "token_batch"));
}

void save_expert_set(const std::filesystem::path& path, const ExpertSet& s) {
  save_container(path, "expert_set", to_json(s));
}

ExpertSet load_expert_set(const std::filesystem::path& path) {
  return expert_set_from_json(load_container(path, "expert_set"));
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_matrix_csv(std::ostream& out, const Matrix& m) {
  out << m.rows() << ',' << m.cols() << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (c) out << ',';
      out << format_double(m(r, c));
    }
    out << '\n';
  }
}

void save_matrix_csv(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open for writing: " + path.string());
  write_matrix_csv(out, m);
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  fields.push_back(cur);
  return fields;
}

double parse_double(const std::string& s, std::size_t line_no) {
  std::size_t pos = 0;
  double v;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ParseError("CSV line " + std::to_string(line_no) + ": not a number: '" + s + "'");
  }
  while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
  if (pos != s.size())
    throw ParseError("CSV line " + std::to_string(line_no) + ": trailing junk in '" + s + "'");
  return v;
}

}  // namespace

Matrix read_matrix_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("CSV line 1: missing dimension header");
  auto header = split_fields(line);
  if (header.size() != 2)
    throw ParseError("CSV line 1: header must be 'rows,cols'");
  std::size_t rows, cols;
  try {
    rows = static_cast<std::size_t>(std::stoull(header[0]));
    cols = static_cast<std::size_t>(std::stoull(header[1]));
  } catch (const std::exception&) {
    throw ParseError("CSV line 1: header must be 'rows,cols'");
  }
  if (rows == 0 || cols == 0) throw ParseError("CSV line 1: dimensions must be positive");
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t line_no = r + 2;
    if (!std::getline(in, line))
      throw ParseError("CSV line " + std::to_string(line_no) + ": unexpected end of file");
    auto fields = split_fields(line);
    if (fields.size() != cols)
      throw ParseError("CSV line " + std::to_string(line_no) + ": expected " +
                       std::to_string(cols) + " fields, got " + std::to_string(fields.size()));
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = parse_double(fields[c], line_no);
  }
  while (std::getline(in, line)) {
    if (!line.empty() && line != "\r")
      throw ParseError("CSV: trailing data after row " + std::to_string(rows));
  }
  return m;
}

Matrix load_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open: " + path.string());
  return read_matrix_csv(in);
}

}  // namespace baseroute
