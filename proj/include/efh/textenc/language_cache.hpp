#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <utility>

#include "efh/numcore/tnsr.hpp"

namespace efh::textenc {

enum class Role : std::uint8_t { label = 0, prompt = 1 };

struct CacheStats {
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
  std::uint64_t entries = 0;
  std::uint64_t evictions = 0;

  friend bool operator==(const CacheStats&, const CacheStats&) = default;
};

/// Text embeddings keyed by (role, exact string). Keys are not normalized;
/// callers that want case folding or whitespace cleanup do it first.
///
/// Lookups take a shared lock and bump an atomic recency stamp, so readers
/// never block each other. Inserts take the exclusive lock and evict the
/// entry with the oldest stamp once `capacity` is reached.
template <typename T>
class LanguageCache {
 public:
  using Value = std::shared_ptr<const Tensor<T>>;

  explicit LanguageCache(std::size_t capacity = 4096) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("language cache capacity must be positive");
  }

  LanguageCache(const LanguageCache&) = delete;
  LanguageCache& operator=(const LanguageCache&) = delete;

  std::size_t capacity() const { return capacity_; }

  /// Counted lookup: bumps hits or misses.
  Value lookup(Role role, const std::string& key) {
    Value v = peek(role, key);
    (v ? hits_ : misses_).fetch_add(1, std::memory_order_relaxed);
    return v;
  }

  /// Uncounted lookup; still refreshes recency.
  Value peek(Role role, const std::string& key) const {
    std::shared_lock lock(mutex_);
    auto it = map_.find(Key{role, key});
    if (it == map_.end()) return nullptr;
    it->second->stamp.store(clock_.fetch_add(1, std::memory_order_relaxed) + 1,
                            std::memory_order_relaxed);
    return it->second->value;
  }

  void insert(Role role, const std::string& key, Tensor<T> value) {
    auto shared = std::make_shared<const Tensor<T>>(std::move(value));
    std::unique_lock lock(mutex_);
    const std::uint64_t now = clock_.fetch_add(1, std::memory_order_relaxed) + 1;
    auto it = map_.find(Key{role, key});
    if (it != map_.end()) {
      it->second->value = std::move(shared);
      it->second->stamp.store(now, std::memory_order_relaxed);
      return;
    }
    if (map_.size() >= capacity_) evict_oldest();
    auto slot = std::make_unique<Slot>();
    slot->value = std::move(shared);
    slot->stamp.store(now, std::memory_order_relaxed);
    map_.emplace(Key{role, key}, std::move(slot));
  }

  /// Returns the cached value or computes, stores and returns it.
  template <typename Fn>
  Value get_or_compute(Role role, const std::string& key, Fn&& compute) {
    if (Value v = lookup(role, key)) return v;
    Tensor<T> fresh = compute();
    insert(role, key, fresh);
    return std::make_shared<const Tensor<T>>(std::move(fresh));
  }

  bool contains(Role role, const std::string& key) const {
    std::shared_lock lock(mutex_);
    return map_.count(Key{role, key}) != 0;
  }

  CacheStats stats() const {
    std::shared_lock lock(mutex_);
    return CacheStats{hits_.load(), misses_.load(), map_.size(), evictions_.load()};
  }

  void clear() {
    std::unique_lock lock(mutex_);
    map_.clear();
  }

  /// Records of (u8 role, u32 key length, key bytes, TNSR tensor) in key order.
  void dump(std::ostream& os) const {
    std::shared_lock lock(mutex_);
    for (const auto& [k, slot] : map_) {
      const char role = static_cast<char>(k.first);
      io::write_bytes(os, &role, 1);
      io::write_u32(os, static_cast<std::uint32_t>(k.second.size()));
      io::write_bytes(os, k.second.data(), k.second.size());
      write_tnsr(os, *slot->value);
    }
  }

  /// Inserts every record until end of stream; counters are left untouched.
  std::size_t load(std::istream& is) {
    std::size_t n = 0;
    while (is.peek() != std::char_traits<char>::eof()) {
      char role = 0;
      io::read_bytes(is, &role, 1);
      if (role != 0 && role != 1) throw FormatError("bad cache record role " + std::to_string(role));
      const std::uint32_t len = io::read_u32(is);
      if (len > (1u << 20)) throw FormatError("cache key too long");
      std::string key(len, '\0');
      io::read_bytes(is, key.data(), len);
      insert(static_cast<Role>(role), key, read_tnsr_as<T>(is));
      ++n;
    }
    return n;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    dump(os);
  }

  std::size_t restore(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    return load(is);
  }

 private:
  using Key = std::pair<Role, std::string>;
  struct Slot {
    Value value;
    mutable std::atomic<std::uint64_t> stamp{0};
  };

  void evict_oldest() {
    auto victim = map_.begin();
    std::uint64_t oldest = std::numeric_limits<std::uint64_t>::max();
    for (auto it = map_.begin(); it != map_.end(); ++it) {
      const std::uint64_t s = it->second->stamp.load(std::memory_order_relaxed);
      if (s < oldest) {
        oldest = s;
        victim = it;
      }
    }
    map_.erase(victim);
    evictions_.fetch_add(1, std::memory_order_relaxed);
  }

  std::size_t capacity_;
  mutable std::shared_mutex mutex_;
  std::map<Key, std::unique_ptr<Slot>> map_;
  mutable std::atomic<std::uint64_t> clock_{0};
  std::atomic<std::uint64_t> hits_{0};
  std::atomic<std::uint64_t> misses_{0};
  std::atomic<std::uint64_t> evictions_{0};
};

}  // namespace efh::textenc
