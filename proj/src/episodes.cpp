#include "tpn/episodes.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "tpn/errors.hpp"

namespace tpn {

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

std::size_t Dataset::total_examples() const {
  std::size_t n = 0;
  for (const auto& c : classes) n += c.count;
  return n;
}

Dataset Dataset::subset(Split split) const {
  Dataset out;
  out.example_shape = example_shape;
  for (const auto& c : classes)
    if (c.split == split) out.classes.push_back(c);
  return out;
}

void Dataset::validate() const {
  if (example_shape.empty() || example_size() == 0) throw ConfigError("dataset has an empty example shape");
  std::set<std::string> names;
  for (const auto& c : classes) {
    if (c.values.size() != c.count * example_size())
      throw ConfigError("class '" + c.name + "' holds " + std::to_string(c.values.size()) + " values for " +
                        std::to_string(c.count) + " examples of " + shape_str(example_shape));
    if (!names.insert(c.name).second) throw ConfigError("duplicate class name '" + c.name + "'");
  }
}

namespace {

// First `take` entries of a uniform random permutation of `pool`.
std::vector<std::size_t> choose(std::vector<std::size_t> pool, std::size_t take, Rng& rng) {
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + rng.uniform_index(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(take);
  return pool;
}

std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

void check_episode_dims(std::size_t n_way, std::size_t k_shot, std::size_t queries) {
  if (n_way < 2) throw ConfigError("episodes need at least 2 classes, got n_way=" + std::to_string(n_way));
  if (k_shot < 1) throw ConfigError("k_shot must be positive");
  if (queries < n_way || queries % n_way != 0)
    throw ConfigError("query count " + std::to_string(queries) + " must be a positive multiple of n_way=" +
                      std::to_string(n_way));
}

// Fills support/query of `ep` for the chosen classes from per-class pools.
void fill_episode(Episode& ep, const std::vector<std::vector<std::size_t>>& pools, std::size_t k_shot,
                  std::size_t per_class_q, Rng& rng) {
  std::vector<std::vector<std::size_t>> picks;
  for (std::size_t c = 0; c < ep.class_map.size(); ++c)
    picks.push_back(choose(pools[c], k_shot + per_class_q, rng));
  for (std::size_t c = 0; c < picks.size(); ++c)
    for (std::size_t s = 0; s < k_shot; ++s) {
      ep.support.push_back({ep.class_map[c], picks[c][s]});
      ep.support_labels.push_back(static_cast<int>(c));
    }
  for (std::size_t c = 0; c < picks.size(); ++c)
    for (std::size_t q = 0; q < per_class_q; ++q) {
      ep.query.push_back({ep.class_map[c], picks[c][k_shot + q]});
      ep.query_labels.push_back(static_cast<int>(c));
    }
}

}  // namespace

Episode sample_episode(const Dataset& ds, std::size_t n_way, std::size_t k_shot, std::size_t queries, Rng& rng) {
  check_episode_dims(n_way, k_shot, queries);
  if (ds.classes.size() < n_way)
    throw ConfigError("dataset has " + std::to_string(ds.classes.size()) + " classes, episode needs " +
                      std::to_string(n_way));
  const std::size_t per_class_q = queries / n_way;
  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.class_map = choose(iota_vec(ds.classes.size()), n_way, rng);
  std::vector<std::vector<std::size_t>> pools;
  for (auto c : ep.class_map) {
    const auto& rec = ds.classes[c];
    if (rec.count < k_shot + per_class_q)
      throw ConfigError("class '" + rec.name + "' has " + std::to_string(rec.count) + " examples, episode needs " +
                        std::to_string(k_shot + per_class_q));
    pools.push_back(iota_vec(rec.count));
  }
  fill_episode(ep, pools, k_shot, per_class_q, rng);
  return ep;
}

LabeledPartition make_partition(const Dataset& ds, double labeled_ratio, std::uint64_t seed) {
  if (!(labeled_ratio > 0.0 && labeled_ratio < 1.0))
    throw ConfigError("labeled ratio must lie in (0, 1), got " + std::to_string(labeled_ratio));
  LabeledPartition part;
  part.labeled_ratio = labeled_ratio;
  for (std::size_t c = 0; c < ds.classes.size(); ++c) {
    const std::size_t count = ds.classes[c].count;
    Rng rng(seed, Stream::kSplit, c);
    auto perm = choose(iota_vec(count), count, rng);
    // a tiny epsilon keeps e.g. 0.4 * 100 from flooring to 39
    const auto n_lab = static_cast<std::size_t>(labeled_ratio * static_cast<double>(count) + 1e-9);
    part.labeled.emplace_back(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_lab));
    part.unlabeled.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(n_lab), perm.end());
    std::sort(part.labeled.back().begin(), part.labeled.back().end());
    std::sort(part.unlabeled.back().begin(), part.unlabeled.back().end());
  }
  return part;
}

SemiEpisode sample_semi_episode(const Dataset& ds, const LabeledPartition& part, std::size_t n_way,
                                std::size_t k_shot, std::size_t queries, std::size_t pool_size,
                                std::size_t distractor_classes, Rng& rng) {
  check_episode_dims(n_way, k_shot, queries);
  if (part.labeled.size() != ds.classes.size()) throw ConfigError("labeled partition does not match dataset");
  if (ds.classes.size() < n_way + distractor_classes)
    throw ConfigError("dataset has " + std::to_string(ds.classes.size()) + " classes, semi episode needs " +
                      std::to_string(n_way + distractor_classes));
  if (distractor_classes > 0 && pool_size == 0) throw ConfigError("distractor classes requested with an empty pool");
  const std::size_t per_class_q = queries / n_way;

  SemiEpisode se;
  se.distractor = distractor_classes > 0;
  auto& ep = se.episode;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  auto classes = choose(iota_vec(ds.classes.size()), n_way + distractor_classes, rng);
  ep.class_map.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(n_way));
  std::vector<std::vector<std::size_t>> pools;
  for (auto c : ep.class_map) {
    if (part.labeled[c].size() < k_shot + per_class_q)
      throw ConfigError("class '" + ds.classes[c].name + "' has " + std::to_string(part.labeled[c].size()) +
                        " labeled examples, episode needs " + std::to_string(k_shot + per_class_q));
    pools.push_back(part.labeled[c]);
  }
  fill_episode(ep, pools, k_shot, per_class_q, rng);

  if (pool_size == 0) return se;
  std::vector<std::size_t> sources;
  if (se.distractor)
    sources.assign(classes.begin() + static_cast<std::ptrdiff_t>(n_way), classes.end());
  else
    sources = ep.class_map;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const std::size_t take = pool_size / sources.size() + (s < pool_size % sources.size() ? 1 : 0);
    const auto& avail = part.unlabeled[sources[s]];
    if (avail.size() < take)
      throw ConfigError("unlabeled pool exhausted: class '" + ds.classes[sources[s]].name + "' has " +
                        std::to_string(avail.size()) + " unlabeled examples, need " + std::to_string(take));
    for (auto idx : choose(avail, take, rng)) se.unlabeled.push_back({sources[s], idx});
  }
  return se;
}

Tensor gather(const Dataset& ds, std::span<const ExampleRef> refs) {
  if (refs.empty()) throw DimensionError("gather: no examples");
  const std::size_t sz = ds.example_size();
  std::vector<double> values;
  values.reserve(refs.size() * sz);
  for (const auto& r : refs) {
    const auto ex = ds.classes.at(r.cls).example(r.index, sz);
    values.insert(values.end(), ex.begin(), ex.end());
  }
  Shape shape{refs.size()};
  shape.insert(shape.end(), ds.example_shape.begin(), ds.example_shape.end());
  return Tensor::from(std::move(shape), std::move(values));
}

Tensor episode_batch(const Dataset& ds, const Episode& ep) {
  std::vector<ExampleRef> refs = ep.support;
  refs.insert(refs.end(), ep.query.begin(), ep.query.end());
  return gather(ds, refs);
}

}  // namespace tpn
