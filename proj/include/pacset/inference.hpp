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
#include <pacset/layout.hpp>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace pacset {

struct Prediction {
  std::uint32_t label = 0;           // classification label
  double value = 0.0;                // regression value, or the raw gbt score
  std::vector<std::uint32_t> votes;  // rf classification only

  bool operator==(const Prediction&) const = default;
};

struct InferenceResult {
  Prediction prediction;
  IoTrace trace;
};

struct BatchResult {
  std::vector<Prediction> predictions;
  std::vector<IoTrace> traces;
};

enum class BatchMode { sequential, per_bin_parallel };

struct InferenceOptions {
  bool cold_start = true;
  bool record_positions = false;
  unsigned threads = 0;  // 0: thread_cap()
};

// Parallelism cap: PACSET_THREADS when set to a positive integer, otherwise
// the hardware concurrency.
inline unsigned thread_cap() {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PACSET_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return hw;
}

// Trees are aggregated in fixed groups so that sequential and per-bin
// parallel evaluation reduce in the same order: one group per bin, or runs
// of kUnbinnedGroupTrees trees for layouts without bins.
inline constexpr std::uint32_t kUnbinnedGroupTrees = 64;

struct TreeGroup {
  std::uint32_t first_tree = 0;
  std::uint32_t tree_count = 0;
};

inline std::vector<TreeGroup> tree_groups(const PackedHeader& h) {
  std::vector<TreeGroup> groups;
  if (!h.bins.empty()) {
    for (const auto& b : h.bins) groups.push_back({b.first_tree, b.tree_count});
    return groups;
  }
  for (std::uint32_t first = 0; first < h.num_trees; first += kUnbinnedGroupTrees) {
    groups.push_back({first, std::min(kUnbinnedGroupTrees, h.num_trees - first)});
  }
  return groups;
}

namespace detail {

struct LeafOutput {
  std::uint32_t label = 0;
  double value = 0.0;
};

// Walks one tree from its entry position: left iff x[feature] <= threshold.
inline LeafOutput walk_tree(const BlockStore& store, FetchContext& ctx, std::uint32_t root,
                            std::span<const double> x) {
  const auto& h = store.header();
  const auto capacity = store.node_capacity();
  std::uint64_t pos = root;
  for (std::uint64_t steps = 0;; ++steps) {
    if (pos >= capacity) throw CorruptionError("dangling reference to position " + std::to_string(pos));
    if (steps > capacity) throw CorruptionError("reference cycle through position " + std::to_string(pos));
    const auto rec = store.read_node(pos, ctx);
    if (rec.is_sentinel()) throw CorruptionError("traversal reached the sentinel at position " + std::to_string(pos));
    if (rec.is_padding()) throw CorruptionError("traversal reached empty slot at position " + std::to_string(pos));
    if (rec.is_leaf()) {
      if (h.inlines_leaves()) {
        const auto label = static_cast<std::uint32_t>(rec.value);
        if (label >= h.num_classes) throw CorruptionError("leaf label out of range at position " + std::to_string(pos));
        return {label, rec.value};
      }
      return {0, static_cast<double>(rec.value)};
    }
    if (rec.feature >= x.size()) throw CorruptionError("feature index out of range at position " + std::to_string(pos));
    const auto next = x[rec.feature] <= static_cast<double>(rec.threshold) ? rec.left : rec.right;
    if (ref::is_none(next)) throw CorruptionError("missing child reference at position " + std::to_string(pos));
    if (ref::is_inline(next)) {
      const auto label = ref::label_of(next);
      if (!h.inlines_leaves() || label >= h.num_classes) {
        throw CorruptionError("invalid inlined label at position " + std::to_string(pos));
      }
      return {label, static_cast<double>(label)};
    }
    pos = next;
  }
}

struct Partial {
  std::vector<std::uint32_t> votes;
  double sum = 0.0;
};

inline Partial eval_group(const BlockStore& store, FetchContext& ctx, const TreeGroup& g, std::span<const double> x) {
  const auto& h = store.header();
  Partial p;
  if (h.inlines_leaves()) p.votes.assign(h.num_classes, 0);
  for (std::uint32_t t = g.first_tree; t < g.first_tree + g.tree_count; ++t) {
    const auto out = walk_tree(store, ctx, h.tree_roots[t], x);
    if (h.inlines_leaves()) {
      ++p.votes[out.label];
    } else {
      p.sum += out.value;
    }
  }
  return p;
}

inline Prediction finish(const PackedHeader& h, const std::vector<Partial>& partials) {
  Prediction pred;
  if (h.inlines_leaves()) {
    pred.votes.assign(h.num_classes, 0);
    for (const auto& p : partials) {
      for (std::size_t c = 0; c < p.votes.size(); ++c) pred.votes[c] += p.votes[c];
    }
    // Majority vote; ties go to the smallest label.
    pred.label = static_cast<std::uint32_t>(std::max_element(pred.votes.begin(), pred.votes.end()) - pred.votes.begin());
    pred.value = pred.label;
    return pred;
  }
  double total = 0.0;
  for (const auto& p : partials) total += p.sum;
  if (h.kind == EnsembleKind::random_forest) {
    pred.value = total / static_cast<double>(h.num_trees);
    return pred;
  }
  pred.value = h.base_score + total;
  if (h.task == Task::classify) pred.label = pred.value >= 0.0 ? 1u : 0u;  // sigmoid(score) >= 0.5
  return pred;
}

inline void check_observation(const PackedHeader& h, std::span<const double> x) {
  if (x.size() != h.num_features) {
    throw ValidationError("observation has " + std::to_string(x.size()) + " features, model expects " +
                          std::to_string(h.num_features));
  }
}

inline Prediction infer_in_context(const BlockStore& store, std::span<const double> x, FetchContext& ctx) {
  const auto groups = tree_groups(store.header());
  std::vector<Partial> partials;
  partials.reserve(groups.size());
  for (const auto& g : groups) partials.push_back(eval_group(store, ctx, g, x));
  return finish(store.header(), partials);
}

// Evaluates the groups concurrently, each in a private context that starts
// from the caller's resident blocks, then merges traces in group order.
inline Prediction infer_per_bin(const BlockStore& store, std::span<const double> x, FetchContext& ctx,
                                unsigned threads) {
  const auto groups = tree_groups(store.header());
  std::vector<Partial> partials(groups.size());
  std::vector<FetchContext> locals;
  locals.reserve(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    locals.emplace_back(ctx.records_positions());
    for (const auto& [id, data] : ctx.resident_blocks()) locals.back().make_resident(id, data);
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto worker = [&] {
    for (std::size_t g; (g = next.fetch_add(1)) < groups.size();) {
      try {
        partials[g] = eval_group(store, locals[g], groups[g], x);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const auto n = std::min<std::size_t>(std::max(1u, threads), groups.size());
    for (std::size_t i = 1; i < n; ++i) pool.emplace_back(worker);
    worker();
  }
  if (failure) std::rethrow_exception(failure);

  auto& trace = ctx.trace();
  std::set<std::uint64_t> seen;
  for (auto& local : locals) {
    const auto& part = local.trace();
    if (store.retains_blocks()) {
      for (auto id : part.fetched) {
        if (!seen.insert(id).second) continue;
        trace.fetched.push_back(id);
        const auto* data = local.resident(id);
        trace.bytes_transferred += data ? (*data)->size() : store.unit_bytes();
        if (data) ctx.make_resident(id, *data);
      }
    } else {
      trace.fetched.insert(trace.fetched.end(), part.fetched.begin(), part.fetched.end());
      trace.bytes_transferred += part.bytes_transferred;
    }
    trace.nodes_read += part.nodes_read;
    trace.positions.insert(trace.positions.end(), part.positions.begin(), part.positions.end());
  }
  return finish(store.header(), partials);
}

}  // namespace detail

// One observation against the store. The trace covers every unit fetched
// while evaluating all trees.
inline InferenceResult infer_one(const BlockStore& store, std::span<const double> x, FetchContext& ctx,
                                 bool cold_start = true) {
  detail::check_observation(store.header(), x);
  ctx.begin_inference(cold_start);
  auto prediction = detail::infer_in_context(store, x, ctx);
  return {std::move(prediction), ctx.take_trace()};
}

inline InferenceResult infer_one(const BlockStore& store, std::span<const double> x) {
  FetchContext ctx;
  return infer_one(store, x, ctx, true);
}

inline BatchResult infer_batch(const BlockStore& store, const std::vector<std::vector<double>>& observations,
                               BatchMode mode = BatchMode::sequential, const InferenceOptions& opts = {}) {
  for (const auto& x : observations) detail::check_observation(store.header(), x);
  const auto threads = opts.threads == 0 ? thread_cap() : opts.threads;
  BatchResult out;
  out.predictions.reserve(observations.size());
  out.traces.reserve(observations.size());
  FetchContext ctx(opts.record_positions);
  for (const auto& x : observations) {
    ctx.begin_inference(opts.cold_start);
    out.predictions.push_back(mode == BatchMode::per_bin_parallel ? detail::infer_per_bin(store, x, ctx, threads)
                                                                  : detail::infer_in_context(store, x, ctx));
    out.traces.push_back(ctx.take_trace());
  }
  return out;
}

}  // namespace pacset
