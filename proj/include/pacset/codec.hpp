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
#include <pacset/layout.hpp>
#include <pacset/record.hpp>

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

// Packed file layout (little-endian):
//
//   header region, padded to a multiple of block_bytes
//     "PACS" | version u16 | task u8 | kind u8 | layout u8 | reserved u8 |
//     node_bytes u16 | block_bytes u32 | bin_depth u16 | trees_per_bin u16 |
//     num_trees u32 | num_classes u32 | num_features u32 | base_score f64 |
//     num_bins u32 | residual_region_block u32 |
//     num_bins x (first_block u32, first_tree u32, tree_count u32) |
//     num_trees x root_position u32
//   body: node records, 32 bytes each, padded to a multiple of block_bytes
//
// Block ids count body blocks only; block 0 is the first bin (or the first
// node block for layouts without bins).

namespace pacset {

inline constexpr std::array<char, 4> kMagic = {'P', 'A', 'C', 'S'};
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::size_t kFixedHeaderBytes = 48;

inline std::uint64_t header_region_bytes(const PackedHeader& h) {
  const std::uint64_t raw = kFixedHeaderBytes + 12ull * h.bins.size() + 4ull * h.tree_roots.size();
  return (raw + h.block_bytes - 1) / h.block_bytes * h.block_bytes;
}

inline std::vector<std::byte> encode(const PackedModel& model) {
  const auto& h = model.header;
  if (model.nodes.size() > std::uint64_t{ref::kMaxPosition} + 1) {
    throw CapacityError("packed model holds " + std::to_string(model.nodes.size()) + " positions; the limit is 2^31");
  }
  if (h.tree_roots.size() != h.num_trees) throw CapacityError("tree root table does not match num_trees");

  std::vector<std::byte> out;
  const auto header_bytes = header_region_bytes(h);
  out.reserve(header_bytes + model.total_blocks() * h.block_bytes);
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  le::put(out, kFormatVersion);
  le::put(out, static_cast<std::uint8_t>(h.task));
  le::put(out, static_cast<std::uint8_t>(h.kind));
  le::put(out, static_cast<std::uint8_t>(h.layout));
  le::put(out, std::uint8_t{0});
  le::put(out, static_cast<std::uint16_t>(kNodeBytes));
  le::put(out, h.block_bytes);
  le::put(out, h.bin_depth);
  le::put(out, h.trees_per_bin);
  le::put(out, h.num_trees);
  le::put(out, h.num_classes);
  le::put(out, h.num_features);
  le::put(out, h.base_score);
  le::put(out, h.num_bins());
  le::put(out, h.residual_region_block);
  for (const auto& b : h.bins) {
    le::put(out, b.first_block);
    le::put(out, b.first_tree);
    le::put(out, b.tree_count);
  }
  for (auto r : h.tree_roots) le::put(out, r);
  out.resize(header_bytes, std::byte{0});

  for (const auto& r : model.nodes) write_record(out, r);
  const auto body_bytes = model.total_blocks() * h.block_bytes;
  out.resize(header_bytes + body_bytes, std::byte{0});
  return out;
}

// Parses and checks the header. Returns it with the size of the header
// region in bytes; `bytes` needs to cover the directory, not the padding.
inline std::pair<PackedHeader, std::uint64_t> read_header(std::span<const std::byte> bytes) {
  if (bytes.size() < kFixedHeaderBytes) throw FormatError("file too short for a packed header");
  for (std::size_t i = 0; i < kMagic.size(); ++i) {
    if (static_cast<char>(bytes[i]) != kMagic[i]) throw FormatError("bad magic: not a packed forest file");
  }
  const auto version = le::get<std::uint16_t>(bytes, 4);
  if (version != kFormatVersion) throw FormatError("unsupported format version " + std::to_string(version));

  PackedHeader h;
  const auto task = le::get<std::uint8_t>(bytes, 6);
  const auto kind = le::get<std::uint8_t>(bytes, 7);
  const auto layout = le::get<std::uint8_t>(bytes, 8);
  if (task > 1 || kind > 1 || layout > 4) throw FormatError("header holds an unknown task, kind or layout code");
  h.task = static_cast<Task>(task);
  h.kind = static_cast<EnsembleKind>(kind);
  h.layout = static_cast<Layout>(layout);
  const auto node_bytes = le::get<std::uint16_t>(bytes, 10);
  if (node_bytes != kNodeBytes) throw FormatError("unsupported node size " + std::to_string(node_bytes));
  h.block_bytes = le::get<std::uint32_t>(bytes, 12);
  if (h.block_bytes < kNodeBytes || !std::has_single_bit(h.block_bytes)) {
    throw FormatError("invalid block size " + std::to_string(h.block_bytes));
  }
  h.bin_depth = le::get<std::uint16_t>(bytes, 16);
  h.trees_per_bin = le::get<std::uint16_t>(bytes, 18);
  h.num_trees = le::get<std::uint32_t>(bytes, 20);
  h.num_classes = le::get<std::uint32_t>(bytes, 24);
  h.num_features = le::get<std::uint32_t>(bytes, 28);
  h.base_score = le::get<double>(bytes, 32);
  const auto num_bins = le::get<std::uint32_t>(bytes, 40);
  h.residual_region_block = le::get<std::uint32_t>(bytes, 44);
  std::size_t offset = kFixedHeaderBytes;
  const std::uint64_t table_bytes = 12ull * num_bins + 4ull * h.num_trees;
  if (offset + table_bytes > bytes.size()) throw FormatError("header directory is truncated");
  h.bins.reserve(num_bins);
  for (std::uint32_t b = 0; b < num_bins; ++b, offset += 12) {
    h.bins.push_back({le::get<std::uint32_t>(bytes, offset), le::get<std::uint32_t>(bytes, offset + 4),
                      le::get<std::uint32_t>(bytes, offset + 8)});
  }
  h.tree_roots.reserve(h.num_trees);
  for (std::uint32_t t = 0; t < h.num_trees; ++t, offset += 4) h.tree_roots.push_back(le::get<std::uint32_t>(bytes, offset));
  const auto header_bytes = header_region_bytes(h);
  return {std::move(h), header_bytes};
}

// Residual subtree roots below each tree's bin, recovered by walking the bin
// levels through their stored child references.
inline std::vector<std::vector<std::uint32_t>> derive_residual_roots(const PackedHeader& h,
                                                                    const std::vector<NodeRecord>& nodes) {
  std::vector<std::vector<std::uint32_t>> roots(h.num_trees);
  if (h.bins.empty()) return roots;
  for (std::uint32_t t = 0; t < h.num_trees; ++t) {
    // (position, level); a left-first stack walk yields level-D nodes in
    // left-to-right order.
    std::vector<std::pair<std::uint32_t, std::uint32_t>> stack{{h.tree_roots[t], 0}};
    while (!stack.empty()) {
      const auto [pos, level] = stack.back();
      stack.pop_back();
      if (level == h.bin_depth) {
        roots[t].push_back(pos);
        continue;
      }
      if (pos >= nodes.size()) throw CorruptionError("bin reference " + std::to_string(pos) + " out of range");
      const auto& r = nodes[pos];
      if (r.is_leaf() || r.is_sentinel()) continue;
      for (auto child : {r.right, r.left}) {
        if (ref::is_position(child)) stack.emplace_back(child, level + 1);
      }
    }
  }
  return roots;
}

inline PackedModel decode(std::span<const std::byte> bytes) {
  auto [header, header_bytes] = read_header(bytes);
  if (header_bytes > bytes.size()) throw FormatError("header region is truncated");
  const auto body = bytes.subspan(header_bytes);
  if (body.size() % header.block_bytes != 0) {
    throw FormatError("body of " + std::to_string(body.size()) + " bytes is not a whole number of " +
                      std::to_string(header.block_bytes) + "-byte blocks");
  }
  PackedModel model;
  model.nodes.reserve(body.size() / kNodeBytes);
  for (std::size_t off = 0; off < body.size(); off += kNodeBytes) model.nodes.push_back(read_record(body, off));
  while (!model.nodes.empty() && model.nodes.back().is_padding()) model.nodes.pop_back();
  for (auto r : header.tree_roots) {
    if (r >= model.nodes.size()) throw CorruptionError("tree root position " + std::to_string(r) + " out of range");
  }
  model.residual_roots = derive_residual_roots(header, model.nodes);
  model.header = std::move(header);
  return model;
}

inline std::vector<std::byte> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open '" + path + "'");
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<std::byte> bytes(size);
  in.seekg(0);
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw IoError("cannot read '" + path + "'");
  }
  return bytes;
}

inline void write_file(const std::string& path, std::span<const std::byte> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write '" + path + "'");
}

// FNV-1a, used to report and compare file fingerprints.
inline std::uint64_t fingerprint(std::span<const std::byte> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= static_cast<std::uint8_t>(b);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace pacset
