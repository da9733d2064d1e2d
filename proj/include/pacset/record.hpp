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

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace pacset {

inline constexpr std::uint32_t kNodeBytes = 32;

// Child reference encoding. Bit 31 clear: node position. Bit 31 set: an
// inlined class label in bits 0..30. All ones: no child.
namespace ref {
inline constexpr std::uint32_t kNone = 0xFFFFFFFFu;
inline constexpr std::uint32_t kInlineBit = 0x80000000u;
inline constexpr std::uint32_t kMaxPosition = 0x7FFFFFFFu;

constexpr bool is_none(std::uint32_t r) noexcept { return r == kNone; }
constexpr bool is_inline(std::uint32_t r) noexcept { return r != kNone && (r & kInlineBit) != 0; }
constexpr bool is_position(std::uint32_t r) noexcept { return (r & kInlineBit) == 0; }
constexpr std::uint32_t label_of(std::uint32_t r) noexcept { return r & ~kInlineBit; }
constexpr std::uint32_t inline_label(std::uint32_t label) noexcept { return label | kInlineBit; }
}  // namespace ref

enum RecordFlags : std::uint32_t {
  kLeafFlag = 1u << 0,
  kSentinelFlag = 1u << 1,
};

// Fixed 32-byte node record. An all-zero record marks unused space: no real
// record has both children at position 0, since position 0 always holds a
// tree root.
struct NodeRecord {
  std::uint32_t feature = 0;
  float threshold = 0.0f;
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  std::uint32_t cardinality = 0;
  float value = 0.0f;
  std::uint32_t flags = 0;
  std::uint32_t leaf_count = 0;

  bool is_leaf() const noexcept { return (flags & kLeafFlag) != 0; }
  bool is_sentinel() const noexcept { return (flags & kSentinelFlag) != 0; }
  bool is_padding() const noexcept {
    return feature == 0 && std::bit_cast<std::uint32_t>(threshold) == 0 && left == 0 && right == 0 &&
           cardinality == 0 && std::bit_cast<std::uint32_t>(value) == 0 && flags == 0 && leaf_count == 0;
  }

  static NodeRecord sentinel() noexcept {
    NodeRecord r;
    r.left = ref::kNone;
    r.right = ref::kNone;
    r.flags = kSentinelFlag;
    return r;
  }

  // Bitwise equality so that NaN payloads and signed zeros compare stably.
  friend bool operator==(const NodeRecord& a, const NodeRecord& b) noexcept {
    return std::memcmp(&a, &b, sizeof(NodeRecord)) == 0;
  }
};
static_assert(sizeof(NodeRecord) == kNodeBytes);

// Little-endian scalar I/O over byte buffers.
namespace le {

template <typename T>
void put(std::vector<std::byte>& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::byte raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(raw[i], raw[sizeof(T) - 1 - i]);
  }
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T get(std::span<const std::byte> in, std::size_t offset) {
  static_assert(std::is_trivially_copyable_v<T>);
  if (offset + sizeof(T) > in.size()) throw FormatError("read past end of buffer at offset " + std::to_string(offset));
  std::byte raw[sizeof(T)];
  std::memcpy(raw, in.data() + offset, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(raw[i], raw[sizeof(T) - 1 - i]);
  }
  T value;
  std::memcpy(&value, raw, sizeof(T));
  return value;
}

}  // namespace le

inline void write_record(std::vector<std::byte>& out, const NodeRecord& r) {
  le::put(out, r.feature);
  le::put(out, r.threshold);
  le::put(out, r.left);
  le::put(out, r.right);
  le::put(out, r.cardinality);
  le::put(out, r.value);
  le::put(out, r.flags);
  le::put(out, r.leaf_count);
}

inline NodeRecord read_record(std::span<const std::byte> in, std::size_t offset) {
  NodeRecord r;
  r.feature = le::get<std::uint32_t>(in, offset + 0);
  r.threshold = le::get<float>(in, offset + 4);
  r.left = le::get<std::uint32_t>(in, offset + 8);
  r.right = le::get<std::uint32_t>(in, offset + 12);
  r.cardinality = le::get<std::uint32_t>(in, offset + 16);
  r.value = le::get<float>(in, offset + 20);
  r.flags = le::get<std::uint32_t>(in, offset + 24);
  r.leaf_count = le::get<std::uint32_t>(in, offset + 28);
  return r;
}

}  // namespace pacset
