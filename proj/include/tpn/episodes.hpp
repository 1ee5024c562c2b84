#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tpn/rng.hpp"
#include "tpn/tensor.hpp"

namespace tpn {

enum class Split : std::uint8_t { kTrain, kVal, kTest };

std::string to_string(Split split);
Split parse_split(const std::string& name);

struct ClassRecord {
  std::uint32_t id = 0;
  std::string name;
  Split split = Split::kTrain;
  std::size_t count = 0;
  std::vector<double> values;  // count x example_size, row-major

  std::span<const double> example(std::size_t i, std::size_t example_size) const {
    return std::span<const double>(values).subspan(i * example_size, example_size);
  }
};

/// Fixed-shape labeled examples grouped by class. Immutable once built.
struct Dataset {
  Shape example_shape;
  std::vector<ClassRecord> classes;

  std::size_t example_size() const { return shape_numel(example_shape); }
  std::size_t total_examples() const;
  /// Classes carrying the given split tag.
  Dataset subset(Split split) const;
  /// Throws ConfigError on inconsistent sizes or overlapping split names.
  void validate() const;
};

struct ExampleRef {
  std::size_t cls = 0;    // index into Dataset::classes
  std::size_t index = 0;  // example within that class

  friend bool operator==(const ExampleRef&, const ExampleRef&) = default;
  friend auto operator<=>(const ExampleRef&, const ExampleRef&) = default;
};

struct Episode {
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::vector<ExampleRef> support;  // class-major, k_shot per class
  std::vector<int> support_labels;  // episode labels in [0, n_way)
  std::vector<ExampleRef> query;    // class-major, T / n_way per class
  std::vector<int> query_labels;
  std::vector<std::size_t> class_map;  // episode label -> dataset class index

  std::size_t size() const { return support.size() + query.size(); }
};

struct SemiEpisode {
  Episode episode;
  std::vector<ExampleRef> unlabeled;
  bool distractor = false;
};

/// Per-class labeled/unlabeled division, fixed once per run.
struct LabeledPartition {
  double labeled_ratio = 0.4;
  std::vector<std::vector<std::size_t>> labeled;    // per class
  std::vector<std::vector<std::size_t>> unlabeled;  // per class
};

/// Uniform N classes without replacement, then K + T/N distinct examples per
/// class. T must be divisible by N.
Episode sample_episode(const Dataset& ds, std::size_t n_way, std::size_t k_shot, std::size_t queries, Rng& rng);

/// floor(ratio * count) labeled examples per class, chosen by a seeded shuffle.
LabeledPartition make_partition(const Dataset& ds, double labeled_ratio, std::uint64_t seed);

/// Support and query from labeled portions of N episode classes. The pool of
/// `pool_size` unlabeled examples comes from the episode classes when
/// distractor_classes == 0, otherwise entirely from that many other classes.
SemiEpisode sample_semi_episode(const Dataset& ds, const LabeledPartition& part, std::size_t n_way,
                                std::size_t k_shot, std::size_t queries, std::size_t pool_size,
                                std::size_t distractor_classes, Rng& rng);

/// Stacks the referenced examples into a B x example_shape tensor.
Tensor gather(const Dataset& ds, std::span<const ExampleRef> refs);

/// Support rows followed by query rows.
Tensor episode_batch(const Dataset& ds, const Episode& ep);

// ---- synthetic data -----------------------------------------------------

enum class SyntheticKind { kGaussianBlobs, kConcentricRings, kNoisyArcs };

std::string to_string(SyntheticKind kind);
SyntheticKind parse_synthetic_kind(const std::string& name);

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::kConcentricRings;
  std::size_t classes = 30;
  std::size_t per_class = 60;
  std::size_t dim = 2;
  double noise = 0.05;
  std::uint64_t seed = 0;
  double train_fraction = 0.6;
  double val_fraction = 0.2;
};

/// Deterministic dataset for desk-scale experiments.
///   gaussian-blobs:   isotropic clusters around random centers.
///   concentric-rings: circles centered at the origin with radii evenly
///                     spaced over [1, 2]. In 2-D they share the plane; for
///                     dim > 2 each class lies in its own random plane through
///                     the origin. Class means all sit near the origin.
///   noisy-arcs:       third-of-a-circle arcs with random centers in the
///                     first two coordinates.
/// Noise is added to every coordinate. Classes are assigned to
/// train/val/test by a seeded shuffle.
Dataset gen_synthetic(const SyntheticSpec& spec);

// ---- FSDS on-disk format ------------------------------------------------

/// Writes `<path>` and the sidecar split manifest `<stem>.split`.
void save_fsds(const Dataset& ds, const std::filesystem::path& path);
Dataset load_fsds(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_fsds(const Dataset& ds);
/// Split tags default to train; apply the manifest separately.
Dataset decode_fsds(std::span<const std::uint8_t> bytes);
std::string encode_split_manifest(const Dataset& ds);
void apply_split_manifest(Dataset& ds, const std::string& manifest);
std::filesystem::path manifest_path(const std::filesystem::path& fsds_path);

}  // namespace tpn
