#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tpn/networks.hpp"
#include "tpn/propagation.hpp"

namespace tpn {

/// Ordered `key = value` pairs. '#' starts a comment; blank lines are ignored.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

struct TrainConfig {
  std::size_t n_way = 5;
  std::size_t k_train = 1;
  std::size_t k_test = 1;
  std::size_t queries = 75;  // total per episode, split evenly over classes
  double alpha = kDefaultAlpha;
  std::size_t k_graph = kDefaultGraphK;
  double lr0 = 1e-3;
  std::size_t halve_every = 10000;  // 0 disables decay
  std::size_t max_episodes = 20000;
  std::size_t checkpoint_every = 1000;
  LossScope loss_scope = LossScope::kUnion;
  NetworkConfig net;
  std::uint64_t seed = 1;

  /// Throws ConfigError on invalid values.
  void validate() const;

  /// Canonical `key = value` text, one line per field, fixed order.
  std::string to_text() const;
  /// SHA-256 of the fields that determine the training trajectory
  /// (excludes max_episodes and checkpoint_every, so runs can be extended).
  std::array<std::uint8_t, 32> fingerprint() const;

  /// Applies one key; unknown keys raise ConfigError listing valid names.
  void set(const std::string& key, const std::string& value);
  void apply(const KeyValueConfig& kv);
  static TrainConfig from_text(const std::string& text);

  static const std::vector<std::string>& keys();
};

std::string hex(std::span<const std::uint8_t> bytes);
/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace tpn
