#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "tpn/episodes.hpp"
#include "tpn/errors.hpp"

namespace tpn {

std::string to_string(SyntheticKind kind) {
  switch (kind) {
    case SyntheticKind::kGaussianBlobs: return "gaussian-blobs";
    case SyntheticKind::kConcentricRings: return "concentric-rings";
    case SyntheticKind::kNoisyArcs: return "noisy-arcs";
  }
  return "gaussian-blobs";
}

SyntheticKind parse_synthetic_kind(const std::string& name) {
  if (name == "gaussian-blobs") return SyntheticKind::kGaussianBlobs;
  if (name == "concentric-rings") return SyntheticKind::kConcentricRings;
  if (name == "noisy-arcs") return SyntheticKind::kNoisyArcs;
  throw ConfigError("unknown synthetic kind '" + name + "' (expected gaussian-blobs, concentric-rings or noisy-arcs)");
}

namespace {

constexpr double kRingInner = 1.0;
constexpr double kRingOuter = 2.0;
constexpr double kArcSpan = 2.0 * std::numbers::pi / 3.0;
constexpr double kBlobSpread = 2.0;
constexpr double kArcCenterSpread = 1.5;

// Values are stored as float32 on disk; rounding here keeps in-memory and
// reloaded datasets identical.
double as_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// Orthonormal pair spanning a uniformly random plane through the origin.
void random_plane(Rng& rng, std::vector<double>& u, std::vector<double>& v) {
  const auto normalize = [](std::vector<double>& a) {
    double n = 0.0;
    for (double x : a) n += x * x;
    n = std::sqrt(n);
    for (auto& x : a) x /= n;
  };
  for (auto& x : u) x = rng.normal();
  normalize(u);
  for (auto& x : v) x = rng.normal();
  double dot = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) dot += u[j] * v[j];
  for (std::size_t j = 0; j < u.size(); ++j) v[j] -= dot * u[j];
  normalize(v);
}

}  // namespace

Dataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (spec.per_class < 20) throw ConfigError("synthetic data needs at least 20 examples per class");
  if (spec.dim < 2) throw ConfigError("synthetic data needs dim >= 2");
  if (!(spec.noise >= 0.0)) throw ConfigError("noise must be non-negative");
  if (spec.train_fraction < 0 || spec.val_fraction < 0 || spec.train_fraction + spec.val_fraction > 1.0)
    throw ConfigError("split fractions must be non-negative and sum to at most 1");

  Dataset ds;
  ds.example_shape = {spec.dim};
  const std::size_t d = spec.dim;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    Rng geom(spec.seed, Stream::kNoise, 2 * c);
    Rng pts(spec.seed, Stream::kNoise, 2 * c + 1);
    ClassRecord rec;
    rec.id = static_cast<std::uint32_t>(c);
    char name[64];
    std::snprintf(name, sizeof(name), "%s-%03zu", to_string(spec.kind).c_str(), c);
    rec.name = name;
    rec.count = spec.per_class;
    rec.values.resize(spec.per_class * d);

    std::vector<double> center(d, 0.0);
    std::vector<double> u(d, 0.0), v(d, 0.0);  // plane of the ring or arc
    u[0] = 1.0;
    v[1] = 1.0;
    double radius = 1.0, start = 0.0;
    switch (spec.kind) {
      case SyntheticKind::kGaussianBlobs:
        for (auto& x : center) x = kBlobSpread * geom.normal();
        break;
      case SyntheticKind::kConcentricRings:
        radius = kRingInner + (kRingOuter - kRingInner) * static_cast<double>(c) / static_cast<double>(spec.classes - 1);
        if (d > 2) random_plane(geom, u, v);
        break;
      case SyntheticKind::kNoisyArcs:
        center[0] = kArcCenterSpread * geom.normal();
        center[1] = kArcCenterSpread * geom.normal();
        start = geom.uniform(0.0, 2.0 * std::numbers::pi);
        break;
    }
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      double* x = rec.values.data() + i * d;
      std::copy(center.begin(), center.end(), x);
      if (spec.kind != SyntheticKind::kGaussianBlobs) {
        const double theta = spec.kind == SyntheticKind::kConcentricRings ? pts.uniform(0.0, 2.0 * std::numbers::pi)
                                                                          : start + pts.uniform(0.0, kArcSpan);
        for (std::size_t j = 0; j < d; ++j) x[j] += radius * (std::cos(theta) * u[j] + std::sin(theta) * v[j]);
      }
      for (std::size_t j = 0; j < d; ++j) x[j] = as_f32(x[j] + spec.noise * pts.normal());
    }
    ds.classes.push_back(std::move(rec));
  }

  // seeded class -> split assignment
  std::vector<std::size_t> order(spec.classes);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng(spec.seed, Stream::kSplit, 0xC1A55);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[split_rng.uniform_index(i)]);
  const auto n_train = static_cast<std::size_t>(std::lround(spec.train_fraction * static_cast<double>(spec.classes)));
  const auto n_val = static_cast<std::size_t>(std::lround(spec.val_fraction * static_cast<double>(spec.classes)));
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& rec = ds.classes[order[i]];
    rec.split = i < n_train ? Split::kTrain : (i < n_train + n_val ? Split::kVal : Split::kTest);
  }
  return ds;
}

}  // namespace tpn
