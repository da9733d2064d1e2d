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
#include <pacset/codec.hpp>
#include <pacset/error.hpp>
#include <pacset/forest.hpp>
#include <pacset/inference.hpp>
#include <pacset/layout.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

namespace pacset {

// ---------------------------------------------------------------------------
// Synthetic forests

enum class Skew { uniform, geometric };

inline std::string_view to_string(Skew s) { return s == Skew::uniform ? "uniform" : "geometric"; }

inline Skew parse_skew(std::string_view name) {
  if (name == "uniform") return Skew::uniform;
  if (name == "geometric") return Skew::geometric;
  throw ConfigError("unknown skew '" + std::string(name) + "'");
}

struct SyntheticSpec {
  std::uint64_t seed = 1;
  std::uint32_t num_trees = 128;
  std::uint32_t depth = 12;
  Skew skew = Skew::geometric;
  Task task = Task::classify;
  EnsembleKind kind = EnsembleKind::random_forest;
  std::uint32_t num_features = 32;  // raised to `depth` if smaller
  std::uint32_t num_classes = 10;
  std::uint64_t total_cardinality = std::uint64_t{1} << 20;
  double heavy_fraction = 0.8;  // geometric skew: share routed to the heavier child
};

// Draws observations with independent U[0,1) features. Every split of a
// synthetic tree tests a feature not used higher on its path, with the
// threshold set to the left child's share of the parent's cardinality, so
// these draws reach each leaf with probability card(leaf) / card(root).
class ObservationSampler {
 public:
  explicit ObservationSampler(std::uint32_t num_features = 1) : num_features_(num_features) {}

  std::uint32_t num_features() const noexcept { return num_features_; }

  std::vector<std::vector<double>> sample(std::size_t count, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::vector<std::vector<double>> rows(count, std::vector<double>(num_features_));
    for (auto& row : rows) {
      for (auto& v : row) v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    }
    return rows;
  }

 private:
  std::uint32_t num_features_;
};

struct SyntheticForest {
  Forest forest;  // annotated
  ObservationSampler sampler;
};

namespace detail {

inline std::uint64_t below(std::mt19937_64& rng, std::uint64_t n) { return rng() % n; }

// Multiples of 2^-16 in [-range, range): sums of a few thousand of these are
// exact in double, so aggregation order never changes a result.
inline double grid_value(std::mt19937_64& rng, double range) {
  const auto steps = static_cast<std::uint64_t>(range * 65536.0);
  return (static_cast<double>(below(rng, 2 * steps)) - static_cast<double>(steps)) / 65536.0;
}

// Threshold on a 2^-24 grid so that it is exactly representable as a float.
inline double grid_threshold(double p) {
  constexpr double kStep = 0x1.0p-24;
  const double q = std::round(p / kStep) * kStep;
  return std::clamp(q, kStep, 1.0 - kStep);
}

}  // namespace detail

inline SyntheticForest generate_synthetic_forest(const SyntheticSpec& spec) {
  if (spec.num_trees == 0 || spec.depth == 0) throw ConfigError("synthetic forest needs positive tree count and depth");
  if (spec.depth > 24) throw ConfigError("synthetic depth is limited to 24");
  if (spec.task == Task::classify && spec.kind == EnsembleKind::random_forest && spec.num_classes == 0) {
    throw ConfigError("classification needs at least one class");
  }
  std::mt19937_64 rng(spec.seed);
  Forest f;
  f.task = spec.task;
  f.kind = spec.kind;
  f.num_features = std::max(spec.num_features, spec.depth);
  if (spec.task == Task::classify) f.num_classes = spec.kind == EnsembleKind::random_forest ? spec.num_classes : 2;
  if (spec.kind == EnsembleKind::gradient_boosted) f.base_score = 0.25;

  const std::uint64_t node_count = (std::uint64_t{2} << spec.depth) - 1;
  for (std::uint32_t t = 0; t < spec.num_trees; ++t) {
    Tree tree;
    tree.nodes.resize(node_count);
    tree.root = 0;
    // Heap numbering: children of i are 2i+1 and 2i+2.
    struct Item {
      std::uint64_t index;
      std::uint32_t depth;
      std::uint64_t card;
      std::vector<std::uint32_t> path_features;
    };
    std::vector<Item> stack;
    stack.push_back({0, 0, spec.total_cardinality, {}});
    while (!stack.empty()) {
      auto item = std::move(stack.back());
      stack.pop_back();
      auto& node = tree.nodes[item.index];
      node.id = static_cast<std::int64_t>(item.index);
      node.cardinality = item.card;
      if (item.depth == spec.depth) {
        node.leaf_count = item.card;
        if (f.inlines_leaves()) {
          node.leaf_class = static_cast<std::uint32_t>(detail::below(rng, f.num_classes));
        } else {
          node.leaf_value = detail::grid_value(rng, spec.kind == EnsembleKind::gradient_boosted ? 0.5 : 4.0);
        }
        continue;
      }
      std::uint32_t feature;
      do {
        feature = static_cast<std::uint32_t>(detail::below(rng, f.num_features));
      } while (std::find(item.path_features.begin(), item.path_features.end(), feature) != item.path_features.end());

      std::uint64_t left_card;
      if (spec.skew == Skew::uniform) {
        left_card = item.card / 2;
      } else {
        const auto heavy = static_cast<std::uint64_t>(std::llround(static_cast<double>(item.card) * spec.heavy_fraction));
        left_card = (rng() & 1) ? heavy : item.card - heavy;
      }
      const double share = item.card == 0 ? 0.5 : static_cast<double>(left_card) / static_cast<double>(item.card);
      node.feature = feature;
      node.threshold = detail::grid_threshold(share);
      node.left = static_cast<std::int32_t>(2 * item.index + 1);
      node.right = static_cast<std::int32_t>(2 * item.index + 2);

      auto path = std::move(item.path_features);
      path.push_back(feature);
      stack.push_back({2 * item.index + 2, item.depth + 1, item.card - left_card, path});
      stack.push_back({2 * item.index + 1, item.depth + 1, left_card, std::move(path)});
    }
    f.trees.push_back(std::move(tree));
  }
  return {std::move(f), ObservationSampler(std::max(spec.num_features, spec.depth))};
}

inline SyntheticForest generate_synthetic_forest(std::uint64_t seed, std::uint32_t num_trees, std::uint32_t depth,
                                                 Skew skew, Task task) {
  SyntheticSpec spec;
  spec.seed = seed;
  spec.num_trees = num_trees;
  spec.depth = depth;
  spec.skew = skew;
  spec.task = task;
  return generate_synthetic_forest(spec);
}

// ---------------------------------------------------------------------------
// I/O counting

struct WorkloadSpec {
  std::vector<std::vector<double>> observations;
  std::uint32_t repetitions = 1;
  bool cold_start = true;
};

inline WorkloadSpec synthetic_workload(const ObservationSampler& sampler, std::size_t count, std::uint64_t seed) {
  WorkloadSpec w;
  w.observations = sampler.sample(count, seed);
  return w;
}

struct Distribution {
  std::size_t count = 0;
  double min = 0, mean = 0, median = 0, p95 = 0, max = 0, variance = 0;
};

// Nearest-rank percentiles.
inline Distribution summarize(std::span<const std::uint64_t> values) {
  Distribution d;
  d.count = values.size();
  if (values.empty()) return d;
  std::vector<std::uint64_t> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const auto rank = [&](double q) {
    const auto r = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size())));
    return static_cast<double>(sorted[std::max<std::size_t>(r, 1) - 1]);
  };
  d.min = static_cast<double>(sorted.front());
  d.max = static_cast<double>(sorted.back());
  d.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());
  d.median = rank(0.5);
  d.p95 = rank(0.95);
  double ss = 0;
  for (auto v : sorted) ss += (static_cast<double>(v) - d.mean) * (static_cast<double>(v) - d.mean);
  d.variance = ss / static_cast<double>(sorted.size());
  return d;
}

struct IoReport {
  std::string label;
  Layout layout = Layout::dfs;
  std::uint32_t block_bytes = 0;
  std::uint32_t bin_depth = 0;
  std::uint32_t trees_per_bin = 0;
  std::uint64_t total_blocks = 0;
  std::vector<std::uint64_t> unique_blocks;  // per inference
  Distribution stats;
  std::uint64_t cumulative_unique = 0;
  std::vector<Prediction> predictions;
};

// Runs the workload against the model through a demand-paged store and
// counts the distinct blocks each inference touches.
inline IoReport count_io(const PackedModel& model, const WorkloadSpec& workload) {
  const auto store = open_buffer_store(encode(model));
  IoReport r;
  r.label = std::string(to_string(model.header.layout));
  r.layout = model.header.layout;
  r.block_bytes = model.header.block_bytes;
  r.bin_depth = model.header.bin_depth;
  r.trees_per_bin = model.header.trees_per_bin;
  r.total_blocks = store.total_units();

  InferenceOptions opts;
  opts.cold_start = workload.cold_start;
  std::set<std::uint64_t> all;
  FetchContext ctx;
  for (std::uint32_t rep = 0; rep < std::max(1u, workload.repetitions); ++rep) {
    auto batch = infer_batch(store, workload.observations, BatchMode::sequential, opts);
    for (const auto& t : batch.traces) {
      r.unique_blocks.push_back(t.unique_count());
      all.insert(t.fetched.begin(), t.fetched.end());
    }
    if (rep == 0) r.predictions = std::move(batch.predictions);
  }
  r.stats = summarize(r.unique_blocks);
  r.cumulative_unique = all.size();
  return r;
}

struct LayoutComparison {
  std::vector<IoReport> rows;
  bool predictions_agree = true;
};

// Packs every layout with the same block geometry and counts I/O for each.
inline LayoutComparison compare_layouts(const Forest& forest, const LayoutConfig& base, const WorkloadSpec& workload,
                                        std::span<const Layout> layouts = kAllLayouts) {
  LayoutComparison cmp;
  for (auto layout : layouts) {
    auto cfg = base;
    cfg.layout = layout;
    cmp.rows.push_back(count_io(pack(forest, cfg), workload));
  }
  for (const auto& row : cmp.rows) {
    if (row.predictions != cmp.rows.front().predictions) cmp.predictions_agree = false;
  }
  return cmp;
}

struct BinDepthSweep {
  std::vector<IoReport> rows;
  std::uint32_t min_mean_depth = 0;
  std::uint32_t min_variance_depth = 0;
};

// Repacks at each bin depth, letting the trees per bin shrink so that every
// bin still fits one block.
inline BinDepthSweep sweep_bin_depth(const Forest& forest, std::span<const std::uint32_t> depths,
                                     const WorkloadSpec& workload, LayoutConfig base = {}) {
  if (!uses_bins(base.layout)) base.layout = Layout::bin_block_wdfs;
  BinDepthSweep sweep;
  for (auto d : depths) {
    auto cfg = base;
    cfg.bin_depth = d;
    cfg.trees_per_bin.reset();
    auto row = count_io(pack(forest, cfg), workload);
    row.label = "depth=" + std::to_string(d);
    sweep.rows.push_back(std::move(row));
  }
  if (!sweep.rows.empty()) {
    const auto by = [&](auto key) {
      return std::min_element(sweep.rows.begin(), sweep.rows.end(),
                              [&](const IoReport& a, const IoReport& b) { return key(a) < key(b); })
          ->bin_depth;
    };
    sweep.min_mean_depth = by([](const IoReport& r) { return r.stats.mean; });
    sweep.min_variance_depth = by([](const IoReport& r) { return r.stats.variance; });
  }
  return sweep;
}

struct BucketRow {
  std::uint32_t nodes_per_value = 0;
  bool whole_model = false;
  std::uint64_t total_fetches = 0;
  double mean_fetches = 0;
  std::uint64_t bytes_transferred = 0;
  std::uint64_t nodes_read = 0;
  double useful_fraction = 0;  // nodes read / nodes transferred
};

// Fetch count against bytes moved as the key/value bucket grows. Each
// inference keeps the buckets it already fetched.
inline std::vector<BucketRow> sweep_kv_bucket(const PackedModel& model, std::span<const std::uint32_t> sizes,
                                              const WorkloadSpec& workload) {
  const auto encoded = encode(model);
  std::vector<BucketRow> rows;
  for (auto size : sizes) {
    KvStoreConfig cfg;
    cfg.nodes_per_value = size;
    cfg.per_inference_cache = true;
    const auto store = open_kv_store(encoded, cfg);
    InferenceOptions opts;
    opts.cold_start = true;
    BucketRow row;
    row.nodes_per_value = store.unit_nodes();
    row.whole_model = size == KvStoreConfig::kWholeModel;
    std::size_t inferences = 0;
    for (std::uint32_t rep = 0; rep < std::max(1u, workload.repetitions); ++rep) {
      const auto batch = infer_batch(store, workload.observations, BatchMode::sequential, opts);
      for (const auto& t : batch.traces) {
        row.total_fetches += t.fetched.size();
        row.bytes_transferred += t.bytes_transferred;
        row.nodes_read += t.nodes_read;
        ++inferences;
      }
    }
    row.mean_fetches = inferences ? static_cast<double>(row.total_fetches) / static_cast<double>(inferences) : 0.0;
    const auto moved = row.bytes_transferred / kNodeBytes;
    row.useful_fraction = moved ? static_cast<double>(row.nodes_read) / static_cast<double>(moved) : 0.0;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::json to_json(const Distribution& d) {
  return {{"count", d.count}, {"min", d.min},   {"mean", d.mean},         {"median", d.median},
          {"p95", d.p95},     {"max", d.max},   {"variance", d.variance}};
}

inline nlohmann::json to_json(const IoReport& r) {
  return {{"label", r.label},
          {"layout", std::string(to_string(r.layout))},
          {"block_bytes", r.block_bytes},
          {"bin_depth", r.bin_depth},
          {"trees_per_bin", r.trees_per_bin},
          {"total_blocks", r.total_blocks},
          {"unique_blocks", to_json(r.stats)},
          {"cumulative_unique", r.cumulative_unique}};
}

inline nlohmann::json to_json(const BucketRow& r) {
  return {{"nodes_per_value", r.nodes_per_value}, {"whole_model", r.whole_model},
          {"total_fetches", r.total_fetches},     {"mean_fetches", r.mean_fetches},
          {"bytes_transferred", r.bytes_transferred}, {"nodes_read", r.nodes_read},
          {"useful_fraction", r.useful_fraction}};
}

inline void write_csv(std::ostream& os, std::span<const IoReport> rows) {
  os << "label,layout,block_bytes,bin_depth,trees_per_bin,total_blocks,min,mean,median,p95,max,variance,"
        "cumulative_unique\n";
  for (const auto& r : rows) {
    os << r.label << ',' << to_string(r.layout) << ',' << r.block_bytes << ',' << r.bin_depth << ','
       << r.trees_per_bin << ',' << r.total_blocks << ',' << r.stats.min << ',' << r.stats.mean << ','
       << r.stats.median << ',' << r.stats.p95 << ',' << r.stats.max << ',' << r.stats.variance << ','
       << r.cumulative_unique << '\n';
  }
}

inline void write_csv(std::ostream& os, std::span<const BucketRow> rows) {
  os << "nodes_per_value,whole_model,total_fetches,mean_fetches,bytes_transferred,nodes_read,useful_fraction\n";
  for (const auto& r : rows) {
    os << r.nodes_per_value << ',' << (r.whole_model ? 1 : 0) << ',' << r.total_fetches << ',' << r.mean_fetches
       << ',' << r.bytes_transferred << ',' << r.nodes_read << ',' << r.useful_fraction << '\n';
  }
}

// gnuplot-ready histogram: one block per report, "unique_blocks<TAB>count".
inline void write_histogram_tsv(std::ostream& os, std::span<const IoReport> rows) {
  for (const auto& r : rows) {
    std::map<std::uint64_t, std::size_t> hist;
    for (auto v : r.unique_blocks) ++hist[v];
    os << "# " << r.label << '\n';
    for (const auto& [v, n] : hist) os << v << '\t' << n << '\n';
    os << "\n\n";
  }
}

}  // namespace pacset
