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
#include <pacset/forest.hpp>
#include <pacset/record.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

namespace pacset {

enum class Layout : std::uint8_t { bfs = 0, dfs = 1, bin_dfs = 2, bin_wdfs = 3, bin_block_wdfs = 4 };

inline constexpr std::array<Layout, 5> kAllLayouts = {Layout::bfs, Layout::dfs, Layout::bin_dfs, Layout::bin_wdfs,
                                                     Layout::bin_block_wdfs};

inline std::string_view to_string(Layout layout) {
  switch (layout) {
    case Layout::bfs: return "bfs";
    case Layout::dfs: return "dfs";
    case Layout::bin_dfs: return "bin_dfs";
    case Layout::bin_wdfs: return "bin_wdfs";
    case Layout::bin_block_wdfs: return "bin_block_wdfs";
  }
  return "unknown";
}

inline Layout parse_layout(std::string_view name) {
  for (auto l : kAllLayouts) {
    if (to_string(l) == name) return l;
  }
  throw ConfigError("unknown layout '" + std::string(name) + "'");
}

constexpr bool uses_bins(Layout layout) noexcept {
  return layout == Layout::bin_dfs || layout == Layout::bin_wdfs || layout == Layout::bin_block_wdfs;
}

struct LayoutConfig {
  Layout layout = Layout::bin_block_wdfs;
  std::uint32_t block_bytes = 65536;
  std::uint32_t bin_depth = 2;
  std::optional<std::uint32_t> trees_per_bin;  // empty: as many as fit one block

  std::uint32_t nodes_per_block() const noexcept { return block_bytes / kNodeBytes; }
};

// Slots a single tree occupies in a bin of depth `depth`: 2^depth - 1.
inline std::uint64_t bin_slots_per_tree(std::uint32_t depth) {
  if (depth >= 32) return std::numeric_limits<std::uint64_t>::max();
  return (std::uint64_t{1} << depth) - 1;
}

// Position inside a bin region of the k-th node (heap order, left to right)
// at `level` of the tree in `tree_slot`. Levels are striped across all
// trees of the bin: every tree's level-0 node, then every tree's level-1
// nodes, and so on.
constexpr std::uint64_t bin_slot(std::uint32_t level, std::uint32_t tree_slot, std::uint64_t k,
                                 std::uint32_t trees_per_bin) noexcept {
  return std::uint64_t{trees_per_bin} * ((std::uint64_t{1} << level) - 1) + (std::uint64_t{tree_slot} << level) + k;
}

inline void validate(const LayoutConfig& cfg) {
  if (cfg.block_bytes < kNodeBytes || !std::has_single_bit(cfg.block_bytes)) {
    throw ConfigError("block size must be a power of two of at least " + std::to_string(kNodeBytes) +
                      " bytes, got " + std::to_string(cfg.block_bytes));
  }
  if (uses_bins(cfg.layout)) {
    if (cfg.bin_depth == 0) throw ConfigError("bin depth must be positive");
    if (cfg.trees_per_bin && *cfg.trees_per_bin == 0) throw ConfigError("trees per bin must be positive");
  }
}

// Resolves the number of trees per bin. The bin must fit in one block.
inline std::uint32_t resolve_trees_per_bin(const LayoutConfig& cfg, std::size_t num_trees) {
  validate(cfg);
  const auto per_tree = bin_slots_per_tree(cfg.bin_depth);
  const auto npb = std::uint64_t{cfg.nodes_per_block()};
  if (per_tree > npb) {
    throw ConfigError("bin depth " + std::to_string(cfg.bin_depth) + " needs " + std::to_string(per_tree) +
                      " slots per tree but a " + std::to_string(cfg.block_bytes) + "-byte block holds " +
                      std::to_string(npb) + " nodes");
  }
  if (cfg.trees_per_bin) {
    const auto t = std::uint64_t{*cfg.trees_per_bin};
    if (t * per_tree > npb) {
      throw ConfigError("bin of " + std::to_string(t) + " trees at depth " + std::to_string(cfg.bin_depth) + " needs " +
                        std::to_string(t * per_tree * kNodeBytes) + " bytes, exceeding the " +
                        std::to_string(cfg.block_bytes) + "-byte block");
    }
    if (t > std::numeric_limits<std::uint16_t>::max()) throw ConfigError("trees per bin exceeds 65535");
    return static_cast<std::uint32_t>(t);
  }
  const auto fit = std::min<std::uint64_t>({npb / per_tree, std::max<std::size_t>(num_trees, 1),
                                            std::numeric_limits<std::uint16_t>::max()});
  return static_cast<std::uint32_t>(fit);
}

struct BinEntry {
  std::uint32_t first_block = 0;
  std::uint32_t first_tree = 0;
  std::uint32_t tree_count = 0;
  bool operator==(const BinEntry&) const = default;
};

struct PackedHeader {
  Task task = Task::classify;
  EnsembleKind kind = EnsembleKind::random_forest;
  Layout layout = Layout::dfs;
  std::uint32_t block_bytes = 65536;
  std::uint16_t bin_depth = 0;
  std::uint16_t trees_per_bin = 0;
  std::uint32_t num_trees = 0;
  std::uint32_t num_classes = 0;
  std::uint32_t num_features = 0;
  double base_score = 0.0;
  std::uint32_t residual_region_block = 0;
  std::vector<BinEntry> bins;
  std::vector<std::uint32_t> tree_roots;  // entry position of every tree

  std::uint32_t nodes_per_block() const noexcept { return block_bytes / kNodeBytes; }
  std::uint32_t num_bins() const noexcept { return static_cast<std::uint32_t>(bins.size()); }
  bool inlines_leaves() const noexcept {
    return task == Task::classify && kind == EnsembleKind::random_forest;
  }
  bool operator==(const PackedHeader&) const = default;
};

struct PackedModel {
  PackedHeader header;
  // Positional node array. Bin regions keep their full block stride; all-zero
  // records are padding. Trailing padding is trimmed.
  std::vector<NodeRecord> nodes;
  // Positions of the residual subtrees hanging below each tree's bin levels.
  std::vector<std::vector<std::uint32_t>> residual_roots;

  std::uint64_t total_blocks() const noexcept {
    const auto npb = header.nodes_per_block();
    return (nodes.size() + npb - 1) / npb;
  }
  bool operator==(const PackedModel&) const = default;
};

// Where every forest node landed; kInlined for leaves folded into a parent.
struct Placement {
  static constexpr std::int64_t kInlined = -1;
  std::vector<std::vector<std::int64_t>> position;  // [tree][node index]
};

struct Packing {
  PackedModel model;
  Placement placement;
};

// A node of the forest addressed by (tree, index into Tree::nodes).
struct NodeRef {
  std::uint32_t tree = 0;
  std::int32_t node = 0;
  bool operator==(const NodeRef&) const = default;
};

struct BinRegion {
  std::uint32_t first_tree = 0;
  std::uint32_t tree_count = 0;
  std::vector<std::optional<NodeRef>> slots;  // empty slot: sentinel
};

struct BinPlan {
  std::uint32_t bin_depth = 0;
  std::uint32_t trees_per_bin = 0;
  std::vector<BinRegion> regions;
  std::vector<std::vector<std::int32_t>> residual_roots;  // [tree] node indices, left to right
};

namespace detail {

inline void require_annotated(const Forest& forest) {
  for (std::size_t t = 0; t < forest.trees.size(); ++t) {
    for (const auto& n : forest.trees[t].nodes) {
      if (!n.cardinality) {
        throw ValidationError("tree " + std::to_string(t) + ", node " + std::to_string(n.id) +
                              ": cardinality missing; annotate the forest before packing");
      }
    }
  }
}

// Whether the node is stored as a record at all.
inline bool stored(const Forest& forest, const Tree& tree, std::int32_t index) {
  return !(forest.inlines_leaves() && tree.node(index).is_leaf() && index != tree.root);
}

inline std::uint64_t card(const Tree& tree, std::int32_t index) { return *tree.node(index).cardinality; }

// Children of `index` in weighted visit order: higher cardinality first,
// left first on ties.
inline std::array<std::int32_t, 2> weighted_children(const Tree& tree, std::int32_t index) {
  const auto& n = tree.node(index);
  if (card(tree, n.right) > card(tree, n.left)) return {n.right, n.left};
  return {n.left, n.right};
}

// Global ordering for block resets: heaviest first, then (tree, node id).
struct HeavierFirst {
  const Forest* forest;
  bool operator()(const NodeRef& a, const NodeRef& b) const {
    const auto& ta = forest->trees[a.tree];
    const auto& tb = forest->trees[b.tree];
    const auto ca = card(ta, a.node);
    const auto cb = card(tb, b.node);
    if (ca != cb) return ca > cb;
    if (a.tree != b.tree) return a.tree < b.tree;
    return ta.node(a.node).id < tb.node(b.node).id;
  }
};

inline std::uint32_t checked_u32(std::uint64_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) {
    throw CapacityError(std::string(what) + " " + std::to_string(v) + " does not fit 32 bits");
  }
  return static_cast<std::uint32_t>(v);
}

inline std::vector<NodeRef> bfs_order(const Forest& forest) {
  std::vector<NodeRef> out;
  for (std::uint32_t t = 0; t < forest.trees.size(); ++t) {
    const auto& tree = forest.trees[t];
    std::deque<std::int32_t> queue{tree.root};
    while (!queue.empty()) {
      const auto i = queue.front();
      queue.pop_front();
      if (stored(forest, tree, i)) out.push_back({t, i});
      const auto& n = tree.node(i);
      if (!n.is_leaf()) {
        queue.push_back(n.left);
        queue.push_back(n.right);
      }
    }
  }
  return out;
}

// Preorder over every tree, skipping nodes shallower than `skip_depth` in
// the output but still descending through them.
inline std::vector<NodeRef> preorder(const Forest& forest, std::uint32_t skip_depth, bool weighted) {
  std::vector<NodeRef> out;
  for (std::uint32_t t = 0; t < forest.trees.size(); ++t) {
    const auto& tree = forest.trees[t];
    std::vector<std::pair<std::int32_t, std::uint32_t>> stack{{tree.root, 0}};
    while (!stack.empty()) {
      const auto [i, depth] = stack.back();
      stack.pop_back();
      if (depth >= skip_depth && stored(forest, tree, i)) out.push_back({t, i});
      const auto& n = tree.node(i);
      if (n.is_leaf()) continue;
      const auto order = weighted ? weighted_children(tree, i) : std::array{n.left, n.right};
      stack.emplace_back(order[1], depth + 1);
      stack.emplace_back(order[0], depth + 1);
    }
  }
  return out;
}

// Weighted preorder that restarts at every block boundary from the heaviest
// node whose parent is already placed.
inline std::vector<NodeRef> block_aligned_order(const Forest& forest, const BinPlan& plan,
                                                std::uint32_t nodes_per_block) {
  std::set<NodeRef, HeavierFirst> frontier(HeavierFirst{&forest});
  for (std::uint32_t t = 0; t < plan.residual_roots.size(); ++t) {
    for (auto i : plan.residual_roots[t]) frontier.insert({t, i});
  }

  std::vector<NodeRef> out;
  std::uint32_t used = 0;
  while (!frontier.empty()) {
    std::vector<NodeRef> stack{*frontier.begin()};
    frontier.erase(frontier.begin());
    while (!stack.empty()) {
      if (used == nodes_per_block) {
        // Suspend: whatever the run still owed goes back to the frontier.
        frontier.insert(stack.begin(), stack.end());
        stack.clear();
        break;
      }
      const auto ref = stack.back();
      stack.pop_back();
      out.push_back(ref);
      ++used;
      const auto& tree = forest.trees[ref.tree];
      if (tree.node(ref.node).is_leaf()) continue;
      const auto order = weighted_children(tree, ref.node);
      for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (stored(forest, tree, *it)) stack.push_back({ref.tree, *it});
      }
    }
    if (used == nodes_per_block) used = 0;
  }
  return out;
}

inline NodeRecord make_record(const Forest& forest, const Tree& tree, std::int32_t index,
                              const std::vector<std::int64_t>& positions) {
  const auto& n = tree.node(index);
  NodeRecord r;
  r.cardinality = checked_u32(*n.cardinality, "cardinality");
  if (n.is_leaf()) {
    r.flags = kLeafFlag;
    r.left = ref::kNone;
    r.right = ref::kNone;
    r.value = forest.inlines_leaves() ? static_cast<float>(n.leaf_class) : static_cast<float>(n.leaf_value);
    r.leaf_count = checked_u32(n.leaf_count.value_or(0), "leaf count");
    return r;
  }
  r.feature = n.feature;
  r.threshold = static_cast<float>(n.threshold);
  const auto child_ref = [&](std::int32_t c) {
    const auto pos = positions[static_cast<std::size_t>(c)];
    if (pos == Placement::kInlined) {
      const auto label = tree.node(c).leaf_class;
      if (label > ref::kMaxPosition) throw CapacityError("class label " + std::to_string(label) + " exceeds 31 bits");
      return ref::inline_label(label);
    }
    return static_cast<std::uint32_t>(pos);
  };
  r.left = child_ref(n.left);
  r.right = child_ref(n.right);
  return r;
}

inline PackedHeader base_header(const Forest& forest, const LayoutConfig& cfg) {
  PackedHeader h;
  h.task = forest.task;
  h.kind = forest.kind;
  h.layout = cfg.layout;
  h.block_bytes = cfg.block_bytes;
  h.num_trees = checked_u32(forest.trees.size(), "tree count");
  h.num_classes = forest.num_classes;
  h.num_features = forest.num_features;
  h.base_score = forest.base_score;
  return h;
}

// Lays the bins (if any) and the residual sequence out into positions and
// builds the records with resolved child references.
inline Packing assemble(const Forest& forest, PackedHeader header, const BinPlan* bins,
                        const std::vector<NodeRef>& residual) {
  const auto npb = std::uint64_t{header.nodes_per_block()};
  Placement placement;
  placement.position.resize(forest.trees.size());
  for (std::size_t t = 0; t < forest.trees.size(); ++t) {
    placement.position[t].assign(forest.trees[t].nodes.size(), Placement::kInlined);
  }

  const std::uint64_t num_bins = bins ? bins->regions.size() : 0;
  const std::uint64_t residual_start = num_bins * npb;
  const std::uint64_t total = residual_start + residual.size();
  if (total > std::uint64_t{ref::kMaxPosition} + 1) {
    throw CapacityError("packed model needs " + std::to_string(total) + " node positions; the limit is 2^31");
  }

  std::vector<NodeRecord> nodes(total);
  std::vector<bool> is_sentinel(total, false);
  if (bins) {
    for (std::uint64_t b = 0; b < num_bins; ++b) {
      const auto& region = bins->regions[b];
      for (std::uint64_t s = 0; s < region.slots.size(); ++s) {
        const auto pos = b * npb + s;
        if (region.slots[s]) {
          placement.position[region.slots[s]->tree][static_cast<std::size_t>(region.slots[s]->node)] =
              static_cast<std::int64_t>(pos);
        } else {
          is_sentinel[pos] = true;
        }
      }
      header.bins.push_back({checked_u32(b, "bin block"), region.first_tree, region.tree_count});
    }
    header.bin_depth = static_cast<std::uint16_t>(bins->bin_depth);
    header.trees_per_bin = static_cast<std::uint16_t>(bins->trees_per_bin);
  }
  header.residual_region_block = checked_u32(num_bins, "residual block");
  for (std::uint64_t i = 0; i < residual.size(); ++i) {
    placement.position[residual[i].tree][static_cast<std::size_t>(residual[i].node)] =
        static_cast<std::int64_t>(residual_start + i);
  }

  for (std::uint64_t pos = 0; pos < total; ++pos) {
    if (is_sentinel[pos]) nodes[pos] = NodeRecord::sentinel();
  }
  header.tree_roots.reserve(forest.trees.size());
  for (std::uint32_t t = 0; t < forest.trees.size(); ++t) {
    const auto& tree = forest.trees[t];
    const auto& pos = placement.position[t];
    for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
      if (pos[i] == Placement::kInlined) continue;
      nodes[static_cast<std::size_t>(pos[i])] = make_record(forest, tree, static_cast<std::int32_t>(i), pos);
    }
    header.tree_roots.push_back(static_cast<std::uint32_t>(pos[static_cast<std::size_t>(tree.root)]));
  }
  while (!nodes.empty() && nodes.back().is_padding()) nodes.pop_back();

  Packing packing;
  packing.model.header = std::move(header);
  packing.model.nodes = std::move(nodes);
  packing.model.residual_roots.resize(forest.trees.size());
  if (bins) {
    for (std::size_t t = 0; t < forest.trees.size(); ++t) {
      for (auto i : bins->residual_roots[t]) {
        packing.model.residual_roots[t].push_back(
            static_cast<std::uint32_t>(placement.position[t][static_cast<std::size_t>(i)]));
      }
    }
  }
  packing.placement = std::move(placement);
  return packing;
}

}  // namespace detail

// Stripes the top `bin_depth` levels of consecutive groups of trees into
// bin regions and collects the residual subtree roots below them.
inline BinPlan build_bins(const Forest& forest, const LayoutConfig& cfg) {
  detail::require_annotated(forest);
  const auto trees_per_bin = resolve_trees_per_bin(cfg, forest.trees.size());
  const auto depth = cfg.bin_depth;
  const auto slots = std::uint64_t{trees_per_bin} * bin_slots_per_tree(depth);

  BinPlan plan;
  plan.bin_depth = depth;
  plan.trees_per_bin = trees_per_bin;
  plan.residual_roots.resize(forest.trees.size());

  const auto num_trees = static_cast<std::uint32_t>(forest.trees.size());
  for (std::uint32_t first = 0; first < num_trees; first += trees_per_bin) {
    BinRegion region;
    region.first_tree = first;
    region.tree_count = std::min(trees_per_bin, num_trees - first);
    region.slots.assign(slots, std::nullopt);
    for (std::uint32_t slot = 0; slot < region.tree_count; ++slot) {
      const auto t = first + slot;
      const auto& tree = forest.trees[t];
      // (node, level, index within level)
      std::vector<std::tuple<std::int32_t, std::uint32_t, std::uint64_t>> stack{{tree.root, 0, 0}};
      std::vector<std::pair<std::uint64_t, std::int32_t>> residual;
      while (!stack.empty()) {
        const auto [i, level, k] = stack.back();
        stack.pop_back();
        if (level == depth) {
          if (detail::stored(forest, tree, i)) residual.emplace_back(k, i);
          continue;
        }
        if (detail::stored(forest, tree, i)) region.slots[bin_slot(level, slot, k, trees_per_bin)] = NodeRef{t, i};
        const auto& n = tree.node(i);
        if (n.is_leaf()) continue;
        stack.emplace_back(n.left, level + 1, 2 * k);
        stack.emplace_back(n.right, level + 1, 2 * k + 1);
      }
      std::sort(residual.begin(), residual.end());
      for (const auto& [k, i] : residual) plan.residual_roots[t].push_back(i);
    }
    plan.regions.push_back(std::move(region));
  }
  return plan;
}

// Trees one after another, each in level order.
inline Packing pack_bfs(const Forest& forest, const LayoutConfig& cfg) {
  validate(cfg);
  detail::require_annotated(forest);
  auto c = cfg;
  c.layout = Layout::bfs;
  return detail::assemble(forest, detail::base_header(forest, c), nullptr, detail::bfs_order(forest));
}

// Trees one after another, each in preorder (node, left, right).
inline Packing pack_dfs(const Forest& forest, const LayoutConfig& cfg) {
  validate(cfg);
  detail::require_annotated(forest);
  auto c = cfg;
  c.layout = Layout::dfs;
  return detail::assemble(forest, detail::base_header(forest, c), nullptr, detail::preorder(forest, 0, false));
}

// Interleaved bins with residuals in plain preorder.
inline Packing pack_bin_dfs(const Forest& forest, const LayoutConfig& cfg) {
  auto c = cfg;
  c.layout = Layout::bin_dfs;
  const auto plan = build_bins(forest, c);
  return detail::assemble(forest, detail::base_header(forest, c), &plan, detail::preorder(forest, c.bin_depth, false));
}

// Interleaved bins with residuals in cardinality-weighted preorder. Without
// alignment, each tree is walked from its root (through the bin) and the
// residual nodes come out in visit order. With alignment, every block starts
// from the heaviest node whose parent is already placed.
inline Packing pack_wdfs(const Forest& forest, const LayoutConfig& cfg, bool block_aligned) {
  auto c = cfg;
  c.layout = block_aligned ? Layout::bin_block_wdfs : Layout::bin_wdfs;
  const auto plan = build_bins(forest, c);
  const auto order = block_aligned ? detail::block_aligned_order(forest, plan, c.nodes_per_block())
                                   : detail::preorder(forest, c.bin_depth, true);
  return detail::assemble(forest, detail::base_header(forest, c), &plan, order);
}

inline Packing pack_layout(const Forest& forest, const LayoutConfig& cfg) {
  switch (cfg.layout) {
    case Layout::bfs: return pack_bfs(forest, cfg);
    case Layout::dfs: return pack_dfs(forest, cfg);
    case Layout::bin_dfs: return pack_bin_dfs(forest, cfg);
    case Layout::bin_wdfs: return pack_wdfs(forest, cfg, false);
    case Layout::bin_block_wdfs: return pack_wdfs(forest, cfg, true);
  }
  throw ConfigError("unknown layout");
}

inline PackedModel pack(const Forest& forest, const LayoutConfig& cfg) { return pack_layout(forest, cfg).model; }

}  // namespace pacset
