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

// Test-only generators and independent oracles. Nothing here calls into the
// packing or inference code paths it is used to check.

#include <pacset/forest.hpp>
#include <pacset/layout.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace pacset::testing {

using nlohmann::json;

struct RandomForestOptions {
  std::uint32_t num_trees = 4;
  std::uint32_t max_depth = 6;
  std::uint32_t num_features = 8;
  std::uint32_t num_classes = 3;
  std::string task = "classify";
  std::string kind = "rf";
  double split_probability = 0.8;  // chance an eligible node splits
  bool shuffle_ids = true;
  bool with_cardinality = true;
};

inline double grid01(std::mt19937_64& rng) {
  return static_cast<double>(rng() % (1u << 24)) * 0x1.0p-24;
}

inline double grid_value(std::mt19937_64& rng) {
  return (static_cast<double>(rng() % (1u << 19)) - static_cast<double>(1u << 18)) / 65536.0;
}

// Irregular random forest in the interchange schema. Thresholds and leaf
// values sit on power-of-two grids so a 32-bit record holds them exactly.
inline json random_forest_json(std::uint64_t seed, const RandomForestOptions& o) {
  std::mt19937_64 rng(seed);
  json doc;
  doc["task"] = o.task;
  doc["kind"] = o.kind;
  doc["num_features"] = o.num_features;
  const bool labels = o.task == "classify" && o.kind == "rf";
  if (o.task == "classify") doc["num_classes"] = o.kind == "rf" ? o.num_classes : 2;
  if (o.kind == "gbt") doc["base_score"] = grid_value(rng);
  doc["trees"] = json::array();
  for (std::uint32_t t = 0; t < o.num_trees; ++t) {
    // Shape first, as heap-style (parent, depth) records.
    struct Proto {
      int left = -1, right = -1;
      std::uint32_t depth = 0;
    };
    std::vector<Proto> protos{{}};
    for (std::size_t i = 0; i < protos.size(); ++i) {
      if (protos[i].depth >= o.max_depth) continue;
      const double p = static_cast<double>(rng() % 1000) / 1000.0;
      if (p >= o.split_probability) continue;
      const auto d = protos[i].depth + 1;
      protos[i].left = static_cast<int>(protos.size());
      protos.push_back({-1, -1, d});
      protos[i].right = static_cast<int>(protos.size());
      protos.push_back({-1, -1, d});
    }
    std::vector<std::int64_t> ids(protos.size());
    std::iota(ids.begin(), ids.end(), 0);
    if (o.shuffle_ids) {
      std::shuffle(ids.begin(), ids.end(), rng);
      for (auto& id : ids) id = id * 3 + 7;
    }
    json nodes = json::array();
    for (std::size_t i = 0; i < protos.size(); ++i) {
      json n;
      n["id"] = ids[i];
      if (protos[i].left >= 0) {
        n["feature"] = rng() % o.num_features;
        n["threshold"] = grid01(rng);
        n["left"] = ids[static_cast<std::size_t>(protos[i].left)];
        n["right"] = ids[static_cast<std::size_t>(protos[i].right)];
      } else {
        if (labels) {
          n["leaf_class"] = rng() % o.num_classes;
        } else {
          n["leaf_value"] = grid_value(rng);
        }
        // Zero-count leaves show up regularly.
        const auto c = (rng() % 5 == 0) ? 0 : rng() % 1000;
        n["leaf_count"] = c;
        if (o.with_cardinality) n["cardinality"] = c;
      }
      nodes.push_back(std::move(n));
    }
    // Document order differs from structural order.
    std::vector<json> shuffled(nodes.begin(), nodes.end());
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    doc["trees"].push_back({{"nodes", shuffled}, {"root", ids[0]}});
  }
  return doc;
}

inline std::vector<std::vector<double>> random_observations(std::uint64_t seed, std::size_t count,
                                                            std::uint32_t num_features) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> rows(count, std::vector<double>(num_features));
  for (auto& r : rows) {
    for (auto& v : r) v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  }
  return rows;
}

struct ReferencePrediction {
  std::uint32_t label = 0;
  double value = 0.0;
  std::vector<std::uint32_t> votes;
};

// Straight traversal of the interchange document.
inline ReferencePrediction reference_predict(const json& doc, const std::vector<double>& x) {
  const bool classify = doc.at("task") == "classify";
  const bool rf = doc.at("kind") == "rf";
  ReferencePrediction out;
  if (classify && rf) out.votes.assign(doc.at("num_classes").get<std::size_t>(), 0);
  double sum = 0.0;
  for (const auto& tree : doc.at("trees")) {
    std::map<std::int64_t, const json*> by_id;
    for (const auto& n : tree.at("nodes")) by_id[n.at("id").get<std::int64_t>()] = &n;
    const json* n = by_id.at(tree.at("root").get<std::int64_t>());
    while (n->contains("left")) {
      const auto f = n->at("feature").get<std::size_t>();
      const auto t = n->at("threshold").get<double>();
      n = by_id.at((x[f] <= t ? n->at("left") : n->at("right")).get<std::int64_t>());
    }
    if (classify && rf) {
      ++out.votes[n->at("leaf_class").get<std::size_t>()];
    } else {
      sum += n->at("leaf_value").get<double>();
    }
  }
  if (classify && rf) {
    std::uint32_t best = 0;
    for (std::uint32_t c = 1; c < out.votes.size(); ++c) {
      if (out.votes[c] > out.votes[best]) best = c;
    }
    out.label = best;
    out.value = best;
  } else if (rf) {
    out.value = sum / static_cast<double>(doc.at("trees").size());
  } else {
    out.value = doc.value("base_score", 0.0) + sum;
    if (classify) out.label = out.value >= 0.0 ? 1 : 0;
  }
  return out;
}

// Recursive sum of leaf cardinalities under `id`, straight from the document.
inline std::uint64_t subtree_sum(const json& tree, std::int64_t id) {
  for (const auto& n : tree.at("nodes")) {
    if (n.at("id").get<std::int64_t>() != id) continue;
    if (!n.contains("left")) return n.at("cardinality").get<std::uint64_t>();
    return subtree_sum(tree, n.at("left").get<std::int64_t>()) + subtree_sum(tree, n.at("right").get<std::int64_t>());
  }
  throw std::runtime_error("node not found");
}

// subtree_sum for every node of the tree at once.
inline std::map<std::int64_t, std::uint64_t> subtree_sums(const json& tree) {
  std::map<std::int64_t, const json*> by_id;
  for (const auto& n : tree.at("nodes")) by_id[n.at("id").get<std::int64_t>()] = &n;
  std::map<std::int64_t, std::uint64_t> sums;
  std::function<std::uint64_t(std::int64_t)> sum = [&](std::int64_t id) -> std::uint64_t {
    const json& n = *by_id.at(id);
    const auto s = n.contains("left") ? sum(n.at("left").get<std::int64_t>()) + sum(n.at("right").get<std::int64_t>())
                                      : n.at("cardinality").get<std::uint64_t>();
    sums[id] = s;
    return s;
  };
  sum(tree.at("root").get<std::int64_t>());
  return sums;
}

inline std::vector<std::int32_t> bfs_oracle(const Tree& tree) {
  std::vector<std::int32_t> out;
  std::deque<std::int32_t> q{tree.root};
  while (!q.empty()) {
    const auto i = q.front();
    q.pop_front();
    out.push_back(i);
    if (!tree.node(i).is_leaf()) {
      q.push_back(tree.node(i).left);
      q.push_back(tree.node(i).right);
    }
  }
  return out;
}

inline std::vector<std::int32_t> preorder_oracle(const Tree& tree) {
  std::vector<std::int32_t> out;
  std::vector<std::int32_t> st{tree.root};
  while (!st.empty()) {
    const auto i = st.back();
    st.pop_back();
    out.push_back(i);
    if (!tree.node(i).is_leaf()) {
      st.push_back(tree.node(i).right);
      st.push_back(tree.node(i).left);
    }
  }
  return out;
}

inline bool inlined(const Forest& f, const Tree& tree, std::int32_t i) {
  return f.inlines_leaves() && tree.node(i).is_leaf() && i != tree.root;
}

// Blocks an inference must touch, in first-touch order: walk each tree in
// memory and map every stored node's position to its block arithmetically.
inline std::vector<std::uint64_t> path_blocks_oracle(const Forest& f, const Placement& placement,
                                                     const std::vector<double>& x, std::uint64_t nodes_per_block) {
  std::vector<std::uint64_t> order;
  std::set<std::uint64_t> seen;
  for (std::size_t t = 0; t < f.trees.size(); ++t) {
    const auto& tree = f.trees[t];
    auto i = tree.root;
    while (true) {
      if (!inlined(f, tree, i)) {
        const auto block = static_cast<std::uint64_t>(placement.position[t][static_cast<std::size_t>(i)]) / nodes_per_block;
        if (seen.insert(block).second) order.push_back(block);
      }
      const auto& n = tree.node(i);
      if (n.is_leaf()) break;
      // The packed record holds a float threshold; thresholds in the test
      // forests are float-exact, so this is the same comparison.
      i = x[n.feature] <= n.threshold ? n.left : n.right;
    }
  }
  return order;
}

struct ReplayResult {
  std::size_t blocks_checked = 0;
  std::size_t violations = 0;
};

// Re-derives, at every residual block start, the set of nodes whose parent
// was already placed (or lives in a bin) and checks that the block opens
// with a node at least as heavy as all of them.
inline ReplayResult frontier_replay(const Forest& f, const PackedModel& m, const Placement& placement) {
  const auto npb = std::uint64_t{m.header.nodes_per_block()};
  const auto residual_start = std::uint64_t{m.header.residual_region_block} * npb;
  // (position, tree, node, parent position or -1 for bin parents)
  struct Entry {
    std::uint64_t position;
    std::uint64_t card;
    std::int64_t parent_position;  // -1: parent is in a bin
  };
  std::vector<Entry> residual;
  for (std::size_t t = 0; t < f.trees.size(); ++t) {
    const auto& tree = f.trees[t];
    for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
      const auto& n = tree.nodes[i];
      if (n.is_leaf()) continue;
      for (auto c : {n.left, n.right}) {
        const auto pos = placement.position[t][static_cast<std::size_t>(c)];
        if (pos < 0 || static_cast<std::uint64_t>(pos) < residual_start) continue;
        const auto ppos = placement.position[t][i];
        residual.push_back({static_cast<std::uint64_t>(pos), *tree.node(c).cardinality,
                            static_cast<std::uint64_t>(ppos) < residual_start ? -1 : ppos});
      }
    }
  }
  std::sort(residual.begin(), residual.end(), [](const Entry& a, const Entry& b) { return a.position < b.position; });
  ReplayResult r;
  for (std::uint64_t start = residual_start; start < m.nodes.size(); start += npb) {
    std::uint64_t first_card = 0;
    std::uint64_t frontier_max = 0;
    for (const auto& e : residual) {
      if (e.position == start) first_card = e.card;
      const bool available = e.parent_position < 0 || static_cast<std::uint64_t>(e.parent_position) < start;
      if (e.position >= start && available) frontier_max = std::max(frontier_max, e.card);
    }
    ++r.blocks_checked;
    if (first_card < frontier_max) ++r.violations;
  }
  return r;
}

}  // namespace pacset::testing
