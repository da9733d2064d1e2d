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

#include <pacset/codec.hpp>
#include <pacset/error.hpp>
#include <pacset/layout.hpp>
#include <pacset/record.hpp>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

namespace pacset {

// Ordinal of a transfer unit (file block or KV bucket) within the body of a
// packed model.
struct BlockId {
  std::uint64_t index = 0;
  auto operator<=>(const BlockId&) const = default;
};

using BlockData = std::shared_ptr<const std::vector<std::byte>>;

// Block fetches made by one inference.
struct IoTrace {
  std::vector<std::uint64_t> fetched;  // in fetch order
  std::uint64_t bytes_transferred = 0;
  std::uint64_t nodes_read = 0;
  std::vector<std::uint32_t> positions;  // only when the context records them

  std::size_t unique_count() const {
    return std::set<std::uint64_t>(fetched.begin(), fetched.end()).size();
  }
};

// Per-inference state: the trace being recorded plus the resident-block
// cache. Owned by a single inference at a time.
class FetchContext {
 public:
  explicit FetchContext(bool record_positions = false) : record_positions_(record_positions) {}

  // Starts a new trace epoch. A cold start also drops every resident block.
  void begin_inference(bool cold_start) {
    trace_ = IoTrace{};
    if (cold_start) resident_.clear();
  }

  IoTrace& trace() noexcept { return trace_; }
  const IoTrace& trace() const noexcept { return trace_; }
  IoTrace take_trace() { return std::exchange(trace_, IoTrace{}); }
  bool records_positions() const noexcept { return record_positions_; }

  const BlockData* resident(std::uint64_t id) const {
    const auto it = resident_.find(id);
    return it == resident_.end() ? nullptr : &it->second;
  }
  void make_resident(std::uint64_t id, BlockData data) { resident_.insert_or_assign(id, std::move(data)); }
  const std::map<std::uint64_t, BlockData>& resident_blocks() const noexcept { return resident_; }

 private:
  IoTrace trace_;
  std::map<std::uint64_t, BlockData> resident_;
  bool record_positions_ = false;
};

// Read-only, unit-addressed access to a packed model. Implementations are
// safe for concurrent fetches; traces live in the caller's FetchContext.
class BlockStore {
 public:
  virtual ~BlockStore() = default;

  const PackedHeader& header() const noexcept { return header_; }
  // Node records per transfer unit.
  virtual std::uint32_t unit_nodes() const noexcept = 0;
  virtual std::uint64_t total_units() const noexcept = 0;
  std::uint64_t unit_bytes() const noexcept { return std::uint64_t{unit_nodes()} * kNodeBytes; }
  std::uint64_t unit_of(std::uint64_t position) const noexcept { return position / unit_nodes(); }
  std::uint64_t node_capacity() const noexcept { return total_units() * unit_nodes(); }

  // Returns the unit's bytes, recording a transfer in ctx when the unit was
  // not already resident.
  virtual BlockData fetch(BlockId id, FetchContext& ctx) const = 0;

  // Whether a unit stays resident for the rest of the epoch once fetched.
  virtual bool retains_blocks() const noexcept = 0;

  NodeRecord read_node(std::uint64_t position, FetchContext& ctx) const {
    const auto data = fetch(BlockId{unit_of(position)}, ctx);
    const auto offset = (position % unit_nodes()) * kNodeBytes;
    if (offset + kNodeBytes > data->size()) {
      throw CorruptionError("node position " + std::to_string(position) + " lies past the end of its block");
    }
    auto& trace = ctx.trace();
    ++trace.nodes_read;
    if (ctx.records_positions()) trace.positions.push_back(static_cast<std::uint32_t>(position));
    return read_record(*data, offset);
  }

 protected:
  void check_range(BlockId id) const {
    if (id.index >= total_units()) {
      throw RangeError("block " + std::to_string(id.index) + " out of range (" + std::to_string(total_units()) +
                       " blocks)");
    }
  }

  PackedHeader header_;
};

namespace detail {

class ByteSource {
 public:
  virtual ~ByteSource() = default;
  virtual std::uint64_t size() const noexcept = 0;
  virtual std::vector<std::byte> read(std::uint64_t offset, std::uint64_t length) const = 0;
};

class BufferSource final : public ByteSource {
 public:
  explicit BufferSource(std::vector<std::byte> bytes) : bytes_(std::move(bytes)) {}
  std::uint64_t size() const noexcept override { return bytes_.size(); }
  std::vector<std::byte> read(std::uint64_t offset, std::uint64_t length) const override {
    const auto first = bytes_.begin() + static_cast<std::ptrdiff_t>(offset);
    return {first, first + static_cast<std::ptrdiff_t>(length)};
  }

 private:
  std::vector<std::byte> bytes_;
};

class FileDescriptor {
 public:
  explicit FileDescriptor(const std::string& path) : fd_(::open(path.c_str(), O_RDONLY | O_CLOEXEC)) {
    if (fd_ < 0) throw IoError("cannot open '" + path + "'");
  }
  FileDescriptor(const FileDescriptor&) = delete;
  FileDescriptor& operator=(const FileDescriptor&) = delete;
  ~FileDescriptor() {
    if (fd_ >= 0) ::close(fd_);
  }
  int get() const noexcept { return fd_; }
  std::uint64_t size() const {
    struct stat st {};
    if (::fstat(fd_, &st) != 0) throw IoError("cannot stat packed file");
    return static_cast<std::uint64_t>(st.st_size);
  }

 private:
  int fd_;
};

// Positional reads; pread is safe to call from several threads at once.
class PreadSource final : public ByteSource {
 public:
  explicit PreadSource(const std::string& path) : fd_(path), size_(fd_.size()) {}
  std::uint64_t size() const noexcept override { return size_; }
  std::vector<std::byte> read(std::uint64_t offset, std::uint64_t length) const override {
    std::vector<std::byte> out(length);
    std::uint64_t done = 0;
    while (done < length) {
      const auto n = ::pread(fd_.get(), out.data() + done, length - done, static_cast<off_t>(offset + done));
      if (n <= 0) throw IoError("short read at offset " + std::to_string(offset + done));
      done += static_cast<std::uint64_t>(n);
    }
    return out;
  }

 private:
  FileDescriptor fd_;
  std::uint64_t size_;
};

// Maps the file and lets the OS page it in on first touch.
class MappedSource final : public ByteSource {
 public:
  explicit MappedSource(const std::string& path) : fd_(path), size_(fd_.size()) {
    if (size_ == 0) return;
    void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_.get(), 0);
    if (p == MAP_FAILED) throw IoError("cannot map '" + path + "'");
    base_ = static_cast<const std::byte*>(p);
  }
  MappedSource(const MappedSource&) = delete;
  MappedSource& operator=(const MappedSource&) = delete;
  ~MappedSource() override {
    if (base_) ::munmap(const_cast<std::byte*>(base_), size_);
  }
  std::uint64_t size() const noexcept override { return size_; }
  std::vector<std::byte> read(std::uint64_t offset, std::uint64_t length) const override {
    return {base_ + offset, base_ + offset + length};
  }

 private:
  FileDescriptor fd_;
  std::uint64_t size_;
  const std::byte* base_ = nullptr;
};

}  // namespace detail

// Packed file with demand-paging semantics: a block is transferred the first
// time an inference touches it and stays resident until the next cold start.
class FileStore final : public BlockStore {
 public:
  enum class Mode { pread, mapped };

  std::uint32_t unit_nodes() const noexcept override { return header_.nodes_per_block(); }
  std::uint64_t total_units() const noexcept override { return total_blocks_; }
  bool retains_blocks() const noexcept override { return true; }

  BlockData fetch(BlockId id, FetchContext& ctx) const override {
    check_range(id);
    if (const auto* hit = ctx.resident(id.index)) return *hit;
    auto data = std::make_shared<const std::vector<std::byte>>(
        source_->read(header_bytes_ + id.index * header_.block_bytes, header_.block_bytes));
    auto& trace = ctx.trace();
    trace.fetched.push_back(id.index);
    trace.bytes_transferred += header_.block_bytes;
    ctx.make_resident(id.index, data);
    return data;
  }

  std::uint64_t header_bytes() const noexcept { return header_bytes_; }

  FileStore(std::shared_ptr<const detail::ByteSource> source, std::optional<std::uint32_t> expected_block_bytes)
      : source_(std::move(source)) {
    const auto probe = source_->read(0, std::min<std::uint64_t>(source_->size(), kFixedHeaderBytes));
    if (probe.size() < kFixedHeaderBytes) throw FormatError("file too short for a packed header");
    const auto directory = le::get<std::uint32_t>(probe, 40) * 12ull + le::get<std::uint32_t>(probe, 20) * 4ull;
    const auto head = source_->read(0, std::min<std::uint64_t>(source_->size(), kFixedHeaderBytes + directory));
    auto [h, header_bytes] = read_header(head);
    if (expected_block_bytes && *expected_block_bytes != h.block_bytes) {
      throw FormatError("packed file uses " + std::to_string(h.block_bytes) + "-byte blocks, expected " +
                        std::to_string(*expected_block_bytes));
    }
    if (header_bytes > source_->size()) throw FormatError("header region is truncated");
    const auto body = source_->size() - header_bytes;
    if (body % h.block_bytes != 0) throw FormatError("body is not a whole number of blocks");
    header_ = std::move(h);
    header_bytes_ = header_bytes;
    total_blocks_ = body / header_.block_bytes;
    for (auto r : header_.tree_roots) {
      if (r >= node_capacity()) throw CorruptionError("tree root position " + std::to_string(r) + " out of range");
    }
  }

 private:
  std::shared_ptr<const detail::ByteSource> source_;
  std::uint64_t header_bytes_ = 0;
  std::uint64_t total_blocks_ = 0;
};

inline FileStore open_file_store(const std::string& path, std::optional<std::uint32_t> expected_block_bytes = {},
                                 FileStore::Mode mode = FileStore::Mode::pread) {
  std::shared_ptr<const detail::ByteSource> source;
  if (mode == FileStore::Mode::mapped) {
    source = std::make_shared<const detail::MappedSource>(path);
  } else {
    source = std::make_shared<const detail::PreadSource>(path);
  }
  return FileStore(std::move(source), expected_block_bytes);
}

// Same demand-paging semantics over an encoded model held in memory.
inline FileStore open_buffer_store(std::vector<std::byte> encoded,
                                   std::optional<std::uint32_t> expected_block_bytes = {}) {
  return FileStore(std::make_shared<const detail::BufferSource>(std::move(encoded)), expected_block_bytes);
}

// Minimal key/value client surface. The in-process map is the default; a
// networked client can implement the same interface.
class KeyValueBackend {
 public:
  virtual ~KeyValueBackend() = default;
  virtual std::optional<std::vector<std::byte>> get(const std::string& key) const = 0;
};

class InMemoryKv final : public KeyValueBackend {
 public:
  void put(std::string key, std::vector<std::byte> value) { map_.insert_or_assign(std::move(key), std::move(value)); }
  std::optional<std::vector<std::byte>> get(const std::string& key) const override {
    const auto it = map_.find(key);
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t size() const noexcept { return map_.size(); }

 private:
  std::unordered_map<std::string, std::vector<std::byte>> map_;
};

// Synthetic per-get delay: fixed + uniform jitter in [0, jitter].
struct LatencyModel {
  std::chrono::microseconds fixed{0};
  std::chrono::microseconds jitter{0};
  std::uint64_t seed = 0;
};

struct KvStoreConfig {
  static constexpr std::uint32_t kWholeModel = 0;

  std::uint32_t nodes_per_value = 8;  // kWholeModel: one bucket for everything
  bool per_inference_cache = false;
  std::optional<LatencyModel> latency;
};

inline std::string kv_key(std::uint64_t bucket) { return std::to_string(bucket); }

// Node array split into buckets of `nodes_per_value` records, keyed by the
// ASCII decimal bucket ordinal. Every get is a transfer unless the
// per-inference cache is on.
class KvStore final : public BlockStore {
 public:
  KvStore(std::shared_ptr<const KeyValueBackend> backend, PackedHeader header, std::uint32_t nodes_per_value,
          std::uint64_t total_nodes, KvStoreConfig cfg)
      : backend_(std::move(backend)), nodes_per_value_(nodes_per_value), cfg_(std::move(cfg)) {
    if (nodes_per_value_ == 0) throw ConfigError("nodes per value must be positive");
    header_ = std::move(header);
    total_buckets_ = (total_nodes + nodes_per_value_ - 1) / nodes_per_value_;
  }

  std::uint32_t unit_nodes() const noexcept override { return nodes_per_value_; }
  std::uint64_t total_units() const noexcept override { return total_buckets_; }
  bool retains_blocks() const noexcept override { return cfg_.per_inference_cache; }
  const KvStoreConfig& config() const noexcept { return cfg_; }

  BlockData fetch(BlockId id, FetchContext& ctx) const override {
    check_range(id);
    if (cfg_.per_inference_cache) {
      if (const auto* hit = ctx.resident(id.index)) return *hit;
    }
    if (cfg_.latency) delay(*cfg_.latency);
    auto value = backend_->get(kv_key(id.index));
    if (!value) throw CorruptionError("integrity error: key '" + kv_key(id.index) + "' missing from the store");
    auto data = std::make_shared<const std::vector<std::byte>>(std::move(*value));
    auto& trace = ctx.trace();
    trace.fetched.push_back(id.index);
    trace.bytes_transferred += data->size();
    if (cfg_.per_inference_cache) ctx.make_resident(id.index, data);
    return data;
  }

 private:
  static void delay(const LatencyModel& m) {
    auto wait = m.fixed;
    if (m.jitter.count() > 0) {
      thread_local std::mt19937_64 rng(m.seed ^ std::hash<std::thread::id>{}(std::this_thread::get_id()));
      wait += std::chrono::microseconds(static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(m.jitter.count() + 1)));
    }
    if (wait.count() > 0) std::this_thread::sleep_for(wait);
  }

  std::shared_ptr<const KeyValueBackend> backend_;
  std::uint32_t nodes_per_value_;
  std::uint64_t total_buckets_ = 0;
  KvStoreConfig cfg_;
};

// Loads an encoded model into an in-process key/value map.
inline KvStore open_kv_store(std::span<const std::byte> encoded, KvStoreConfig cfg = {}) {
  const auto model = decode(encoded);
  const std::uint64_t total = std::max<std::uint64_t>(model.nodes.size(), 1);
  const auto per_value = cfg.nodes_per_value == KvStoreConfig::kWholeModel ? total : cfg.nodes_per_value;
  if (per_value > std::numeric_limits<std::uint32_t>::max()) throw ConfigError("bucket too large");
  auto kv = std::make_shared<InMemoryKv>();
  for (std::uint64_t first = 0, bucket = 0; first < model.nodes.size(); first += per_value, ++bucket) {
    std::vector<std::byte> value;
    const auto last = std::min<std::uint64_t>(first + per_value, model.nodes.size());
    value.reserve((last - first) * kNodeBytes);
    for (auto p = first; p < last; ++p) write_record(value, model.nodes[p]);
    kv->put(kv_key(bucket), std::move(value));
  }
  return KvStore(std::move(kv), model.header, static_cast<std::uint32_t>(per_value), model.nodes.size(),
                 std::move(cfg));
}

}  // namespace pacset
