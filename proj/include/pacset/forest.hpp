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

#include <pacset/error.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace pacset {

enum class Task : std::uint8_t { classify = 0, regress = 1 };
enum class EnsembleKind : std::uint8_t { random_forest = 0, gradient_boosted = 1 };

inline constexpr std::int32_t kNoChild = -1;

// One node of a decoded tree. Children are indices into Tree::nodes; `id` is
// the identifier from the source document and is kept for tie-breaking.
struct TreeNode {
  std::int64_t id = 0;
  std::uint32_t feature = 0;
  double threshold = 0.0;
  std::int32_t left = kNoChild;
  std::int32_t right = kNoChild;
  std::uint32_t leaf_class = 0;
  double leaf_value = 0.0;
  std::optional<std::uint64_t> leaf_count;
  std::optional<std::uint64_t> cardinality;

  bool is_leaf() const noexcept { return left == kNoChild; }
  bool operator==(const TreeNode&) const = default;
};

struct Tree {
  std::vector<TreeNode> nodes;
  std::int32_t root = 0;

  const TreeNode& node(std::int32_t index) const { return nodes[static_cast<std::size_t>(index)]; }
  bool operator==(const Tree&) const = default;
};

struct Forest {
  std::vector<Tree> trees;
  Task task = Task::classify;
  EnsembleKind kind = EnsembleKind::random_forest;
  std::uint32_t num_classes = 0;
  std::uint32_t num_features = 0;
  double base_score = 0.0;

  // Random-forest classification leaves carry nothing but a label, so the
  // packed encoding folds them into the parent's child reference.
  bool inlines_leaves() const noexcept {
    return task == Task::classify && kind == EnsembleKind::random_forest;
  }
  std::size_t node_count() const noexcept {
    std::size_t n = 0;
    for (const auto& t : trees) n += t.nodes.size();
    return n;
  }
  bool operator==(const Forest&) const = default;
};

inline std::string_view to_string(Task task) {
  return task == Task::classify ? "classify" : "regress";
}

inline std::string_view to_string(EnsembleKind kind) {
  return kind == EnsembleKind::random_forest ? "rf" : "gbt";
}

// Depth of each node (root = 0), indexed like Tree::nodes.
inline std::vector<std::uint32_t> node_depths(const Tree& tree) {
  std::vector<std::uint32_t> depth(tree.nodes.size(), 0);
  std::vector<std::int32_t> stack{tree.root};
  while (!stack.empty()) {
    const auto i = stack.back();
    stack.pop_back();
    const auto& n = tree.node(i);
    if (n.is_leaf()) continue;
    depth[static_cast<std::size_t>(n.left)] = depth[static_cast<std::size_t>(i)] + 1;
    depth[static_cast<std::size_t>(n.right)] = depth[static_cast<std::size_t>(i)] + 1;
    stack.push_back(n.left);
    stack.push_back(n.right);
  }
  return depth;
}

inline std::uint32_t tree_depth(const Tree& tree) {
  std::uint32_t d = 0;
  for (auto v : node_depths(tree)) d = std::max(d, v);
  return d;
}

namespace detail {

using json = nlohmann::json;

inline std::string where(std::size_t tree, std::optional<std::int64_t> node = std::nullopt) {
  std::string s = "tree " + std::to_string(tree);
  if (node) s += ", node " + std::to_string(*node);
  return s;
}

inline std::uint64_t require_uint(const json& obj, const char* key, const std::string& ctx) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(ctx + ": missing field '" + key + "'");
  if (!it->is_number_integer() || (!it->is_number_unsigned() && it->get<std::int64_t>() < 0)) {
    throw ValidationError(ctx + ": field '" + key + "' must be a non-negative integer");
  }
  return it->get<std::uint64_t>();
}

inline std::optional<std::uint64_t> optional_uint(const json& obj, const char* key,
                                                  const std::string& ctx) {
  if (!obj.contains(key) || obj.at(key).is_null()) return std::nullopt;
  return require_uint(obj, key, ctx);
}

inline double require_real(const json& obj, const char* key, const std::string& ctx) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(ctx + ": missing field '" + key + "'");
  if (!it->is_number()) throw ValidationError(ctx + ": field '" + key + "' must be a number");
  const double v = it->get<double>();
  if (!std::isfinite(v)) throw ValidationError(ctx + ": field '" + key + "' must be finite");
  return v;
}

inline bool has(const json& obj, const char* key) {
  return obj.contains(key) && !obj.at(key).is_null();
}

inline std::uint32_t narrow_u32(std::uint64_t v, const char* key, const std::string& ctx) {
  if (v > std::numeric_limits<std::uint32_t>::max()) {
    throw ValidationError(ctx + ": field '" + key + "' exceeds 32 bits");
  }
  return static_cast<std::uint32_t>(v);
}

inline Tree parse_tree(const json& doc, std::size_t tree_index, const Forest& forest) {
  const auto ctx = where(tree_index);
  if (!doc.is_object()) throw ValidationError(ctx + ": tree must be an object");
  if (!doc.contains("nodes") || !doc.at("nodes").is_array()) {
    throw ValidationError(ctx + ": missing array 'nodes'");
  }
  const auto& raw_nodes = doc.at("nodes");
  if (raw_nodes.empty()) throw ValidationError(ctx + ": tree has no nodes");

  Tree tree;
  tree.nodes.reserve(raw_nodes.size());
  std::unordered_map<std::int64_t, std::int32_t> index_of;
  std::vector<std::pair<std::optional<std::int64_t>, std::optional<std::int64_t>>> child_ids;

  for (const auto& raw : raw_nodes) {
    if (!raw.is_object()) throw ValidationError(ctx + ": node must be an object");
    if (!raw.contains("id") || !raw.at("id").is_number_integer()) {
      throw ValidationError(ctx + ": node without integer 'id'");
    }
    TreeNode node;
    node.id = raw.at("id").get<std::int64_t>();
    const auto nctx = where(tree_index, node.id);
    if (!index_of.emplace(node.id, static_cast<std::int32_t>(tree.nodes.size())).second) {
      throw ValidationError(nctx + ": duplicate node id");
    }

    const bool has_left = has(raw, "left");
    const bool has_right = has(raw, "right");
    if (has_left != has_right) throw ValidationError(nctx + ": interior node needs both 'left' and 'right'");

    if (has_left) {
      if (has(raw, "leaf_class") || has(raw, "leaf_value")) {
        throw ValidationError(nctx + ": interior node carries a leaf payload");
      }
      const auto feature = require_uint(raw, "feature", nctx);
      if (feature >= forest.num_features) {
        throw ValidationError(nctx + ": feature " + std::to_string(feature) +
                              " out of range (num_features = " + std::to_string(forest.num_features) + ")");
      }
      node.feature = static_cast<std::uint32_t>(feature);
      node.threshold = require_real(raw, "threshold", nctx);
      if (!raw.at("left").is_number_integer() || !raw.at("right").is_number_integer()) {
        throw ValidationError(nctx + ": child references must be integers");
      }
      child_ids.emplace_back(raw.at("left").get<std::int64_t>(), raw.at("right").get<std::int64_t>());
    } else {
      if (has(raw, "feature") || has(raw, "threshold")) {
        throw ValidationError(nctx + ": leaf carries a split");
      }
      if (forest.inlines_leaves()) {
        const auto label = require_uint(raw, "leaf_class", nctx);
        if (label >= forest.num_classes) {
          throw ValidationError(nctx + ": leaf_class " + std::to_string(label) +
                                " out of range (num_classes = " + std::to_string(forest.num_classes) + ")");
        }
        node.leaf_class = static_cast<std::uint32_t>(label);
      } else {
        if (has(raw, "leaf_class")) throw ValidationError(nctx + ": leaf_class is only valid for rf classification");
        node.leaf_value = require_real(raw, "leaf_value", nctx);
      }
      node.leaf_count = optional_uint(raw, "leaf_count", nctx);
      child_ids.emplace_back(std::nullopt, std::nullopt);
    }
    node.cardinality = optional_uint(raw, "cardinality", nctx);
    tree.nodes.push_back(node);
  }

  const auto root_id = static_cast<std::int64_t>(require_uint(doc, "root", ctx));
  const auto root_it = index_of.find(root_id);
  if (root_it == index_of.end()) throw ValidationError(ctx + ": root " + std::to_string(root_id) + " not found");
  tree.root = root_it->second;

  std::vector<std::uint32_t> parents(tree.nodes.size(), 0);
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    auto& node = tree.nodes[i];
    const auto& [l, r] = child_ids[i];
    if (!l) continue;
    const auto nctx = where(tree_index, node.id);
    const auto resolve = [&](std::int64_t id) {
      const auto it = index_of.find(id);
      if (it == index_of.end()) throw ValidationError(nctx + ": child " + std::to_string(id) + " not found");
      if (it->second == tree.root) throw ValidationError(nctx + ": child " + std::to_string(id) + " is the root");
      if (++parents[static_cast<std::size_t>(it->second)] > 1) {
        throw ValidationError(where(tree_index, id) + ": node has more than one parent");
      }
      return it->second;
    };
    node.left = resolve(*l);
    node.right = resolve(*r);
  }

  // Every non-root node has exactly one parent; reachability rules out cycles
  // detached from the root.
  std::size_t reached = 0;
  std::vector<std::int32_t> stack{tree.root};
  while (!stack.empty()) {
    const auto i = stack.back();
    stack.pop_back();
    ++reached;
    const auto& n = tree.node(i);
    if (!n.is_leaf()) {
      stack.push_back(n.left);
      stack.push_back(n.right);
    }
  }
  if (reached != tree.nodes.size()) {
    throw ValidationError(ctx + ": " + std::to_string(tree.nodes.size() - reached) +
                          " node(s) unreachable from the root");
  }
  return tree;
}

}  // namespace detail

// Parses and validates an interchange document. Leaf cardinalities come from
// the document; interior cardinalities are left as given (normally unset)
// until annotate_cardinalities runs.
inline Forest parse_model(std::string_view document) {
  using detail::json;
  json doc;
  try {
    doc = json::parse(document.begin(), document.end());
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed model JSON: ") + e.what(), e.byte);
  }
  if (!doc.is_object()) throw ValidationError("model document must be a JSON object");

  Forest forest;
  const auto task = doc.value("task", std::string{});
  if (task == "classify") {
    forest.task = Task::classify;
  } else if (task == "regress") {
    forest.task = Task::regress;
  } else {
    throw ValidationError("field 'task' must be \"classify\" or \"regress\"");
  }
  const auto kind = doc.value("kind", std::string{});
  if (kind == "rf") {
    forest.kind = EnsembleKind::random_forest;
  } else if (kind == "gbt") {
    forest.kind = EnsembleKind::gradient_boosted;
  } else {
    throw ValidationError("field 'kind' must be \"rf\" or \"gbt\"");
  }

  forest.num_features = detail::narrow_u32(detail::require_uint(doc, "num_features", "model"), "num_features", "model");
  if (forest.num_features == 0) throw ValidationError("model: num_features must be positive");

  const auto classes = detail::optional_uint(doc, "num_classes", "model");
  if (forest.task == Task::classify) {
    if (forest.kind == EnsembleKind::gradient_boosted) {
      if (classes && *classes != 2) throw ValidationError("model: gbt classification is binary (num_classes must be 2)");
      forest.num_classes = 2;
    } else {
      if (!classes || *classes == 0) throw ValidationError("model: classification needs a positive num_classes");
      if (*classes > (1u << 24)) throw ValidationError("model: num_classes exceeds 2^24");
      forest.num_classes = static_cast<std::uint32_t>(*classes);
    }
  } else if (classes && *classes != 0) {
    throw ValidationError("model: num_classes is only valid for classification");
  }

  if (detail::has(doc, "base_score")) {
    const double base = detail::require_real(doc, "base_score", "model");
    if (forest.kind != EnsembleKind::gradient_boosted && base != 0.0) {
      throw ValidationError("model: base_score is only valid for gbt");
    }
    forest.base_score = base;
  }

  if (!doc.contains("trees") || !doc.at("trees").is_array()) throw ValidationError("model: missing array 'trees'");
  const auto& trees = doc.at("trees");
  if (trees.empty()) throw ValidationError("model: no trees");
  forest.trees.reserve(trees.size());
  for (std::size_t t = 0; t < trees.size(); ++t) forest.trees.push_back(detail::parse_tree(trees[t], t, forest));
  return forest;
}

// Sets every interior node's cardinality to the sum of the leaf
// cardinalities beneath it. Leaves are left untouched.
inline Forest annotate_cardinalities(Forest forest) {
  for (std::size_t t = 0; t < forest.trees.size(); ++t) {
    auto& tree = forest.trees[t];
    // Iterative post-order: children are finished before their parent.
    std::vector<std::pair<std::int32_t, bool>> stack{{tree.root, false}};
    while (!stack.empty()) {
      auto [i, expanded] = stack.back();
      stack.pop_back();
      auto& node = tree.nodes[static_cast<std::size_t>(i)];
      if (node.is_leaf()) {
        if (!node.cardinality) {
          throw ValidationError(detail::where(t, node.id) + ": leaf has no cardinality");
        }
        continue;
      }
      if (!expanded) {
        stack.emplace_back(i, true);
        stack.emplace_back(node.left, false);
        stack.emplace_back(node.right, false);
        continue;
      }
      const auto l = *tree.node(node.left).cardinality;
      const auto r = *tree.node(node.right).cardinality;
      if (l > std::numeric_limits<std::uint64_t>::max() - r) {
        throw CapacityError(detail::where(t, node.id) + ": cardinality overflows 64 bits");
      }
      node.cardinality = l + r;
    }
  }
  return forest;
}

inline bool is_annotated(const Forest& forest) {
  for (const auto& tree : forest.trees) {
    for (const auto& n : tree.nodes) {
      if (!n.cardinality) return false;
    }
  }
  return true;
}

// Serializes a forest back into the interchange schema.
inline nlohmann::json to_json(const Forest& forest) {
  using detail::json;
  json doc;
  doc["task"] = std::string(to_string(forest.task));
  doc["kind"] = std::string(to_string(forest.kind));
  doc["num_features"] = forest.num_features;
  if (forest.task == Task::classify) doc["num_classes"] = forest.num_classes;
  if (forest.kind == EnsembleKind::gradient_boosted) doc["base_score"] = forest.base_score;
  json trees = json::array();
  for (const auto& tree : forest.trees) {
    json nodes = json::array();
    for (const auto& n : tree.nodes) {
      json node;
      node["id"] = n.id;
      if (n.is_leaf()) {
        if (forest.inlines_leaves()) {
          node["leaf_class"] = n.leaf_class;
        } else {
          node["leaf_value"] = n.leaf_value;
        }
        if (n.leaf_count) node["leaf_count"] = *n.leaf_count;
      } else {
        node["feature"] = n.feature;
        node["threshold"] = n.threshold;
        node["left"] = tree.node(n.left).id;
        node["right"] = tree.node(n.right).id;
      }
      if (n.cardinality) node["cardinality"] = *n.cardinality;
      nodes.push_back(std::move(node));
    }
    trees.push_back(json{{"nodes", std::move(nodes)}, {"root", tree.node(tree.root).id}});
  }
  doc["trees"] = std::move(trees);
  return doc;
}

}  // namespace pacset
