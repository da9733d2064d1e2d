/*
 * Copyright (c) 2026, The pacset authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <pacset/blockstore.hpp>
#include <pacset/error.hpp>
#include <pacset/inference.hpp>
#include <pacset/layout.hpp>

#include <nlohmann/json.hpp>

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace pacset {

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size() && !s.empty();
}

}  // namespace detail

// Observations as CSV (one row per observation, optional header row) or as
// a JSON array of arrays.
inline std::vector<std::vector<double>> parse_observations(std::string_view text) {
  std::vector<std::vector<double>> rows;
  const auto body = detail::trim(text);
  if (!body.empty() && body.front() == '[') {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(body.begin(), body.end());
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed observations JSON: ") + e.what(), e.byte);
    }
    for (std::size_t i = 0; i < doc.size(); ++i) {
      const auto& row = doc[i];
      if (!row.is_array()) throw ValidationError("observation " + std::to_string(i) + " is not an array");
      std::vector<double> x;
      x.reserve(row.size());
      for (const auto& v : row) {
        if (!v.is_number()) throw ValidationError("observation " + std::to_string(i) + " holds a non-numeric value");
        x.push_back(v.get<double>());
      }
      rows.push_back(std::move(x));
    }
    return rows;
  }

  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    std::vector<double> x;
    bool numeric = true;
    std::string_view rest = line;
    while (true) {
      const auto comma = rest.find(',');
      double v = 0;
      if (!detail::parse_double(rest.substr(0, comma), v)) {
        numeric = false;
        break;
      }
      x.push_back(v);
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (!numeric) {
      if (rows.empty() && line_no == 1) continue;  // header row
      throw ValidationError("line " + std::to_string(line_no) + ": non-numeric field");
    }
    rows.push_back(std::move(x));
  }
  return rows;
}

inline std::vector<std::vector<double>> read_observations(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_observations(ss.str());
}

inline void write_observations_csv(std::ostream& os, const std::vector<std::vector<double>>& rows) {
  os.precision(17);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
    os << '\n';
  }
}

inline nlohmann::json prediction_json(const PackedHeader& h, std::size_t obs, const Prediction& p,
                                      const IoTrace& trace) {
  nlohmann::json j;
  j["obs"] = obs;
  if (h.task == Task::classify) {
    j["label"] = p.label;
    if (h.inlines_leaves()) j["votes"] = p.votes;
    if (h.kind == EnsembleKind::gradient_boosted) j["score"] = p.value;
  } else {
    j["value"] = p.value;
  }
  j["unique_blocks"] = trace.unique_count();
  return j;
}

inline nlohmann::json trace_json(std::size_t obs, const IoTrace& trace) {
  return {{"obs", obs}, {"blocks", trace.fetched}, {"unique", trace.unique_count()}};
}

}  // namespace pacset
