#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "tpn/bench.hpp"
#include "tpn/episodes.hpp"
#include "tpn/errors.hpp"

namespace tpn {
namespace {

Dataset blobs(std::size_t classes, std::size_t per_class, std::uint64_t seed = 1, double noise = 0.1) {
  SyntheticSpec spec;
  spec.kind = SyntheticKind::kGaussianBlobs;
  spec.classes = classes;
  spec.per_class = per_class;
  spec.noise = noise;
  spec.seed = seed;
  spec.train_fraction = 1.0;
  spec.val_fraction = 0.0;
  return gen_synthetic(spec);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("tpn_episodes_" + name);
}

TEST(Episodes, UnionSizes) {
  const auto ds = blobs(10, 30);
  Rng a(1, Stream::kSampling, 0), b(1, Stream::kSampling, 1);
  EXPECT_EQ(sample_episode(ds, 5, 1, 75, a).size(), 80u);
  EXPECT_EQ(sample_episode(ds, 5, 5, 75, b).size(), 100u);
}

TEST(Episodes, SameStreamSameEpisode) {
  const auto ds = blobs(10, 30);
  Rng a(9, Stream::kSampling, 4), b(9, Stream::kSampling, 4), c(9, Stream::kSampling, 5);
  const auto e1 = sample_episode(ds, 5, 1, 75, a);
  const auto e2 = sample_episode(ds, 5, 1, 75, b);
  const auto e3 = sample_episode(ds, 5, 1, 75, c);
  EXPECT_EQ(e1.support, e2.support);
  EXPECT_EQ(e1.query, e2.query);
  EXPECT_EQ(e1.class_map, e2.class_map);
  EXPECT_TRUE(e1.query != e3.query || e1.class_map != e3.class_map);
}

TEST(Episodes, StructureInvariantsOverManyDraws) {
  const auto ds = blobs(12, 25);
  for (std::size_t e = 0; e < 500; ++e) {
    Rng rng(3, Stream::kSampling, e);
    const std::size_t k = 1 + e % 5;
    const auto ep = sample_episode(ds, 4, k, 20, rng);
    ASSERT_EQ(ep.support.size(), 4 * k);
    ASSERT_EQ(ep.query.size(), 20u);
    std::set<ExampleRef> seen(ep.support.begin(), ep.support.end());
    for (const auto& q : ep.query) EXPECT_TRUE(seen.insert(q).second) << "query overlaps support";
    EXPECT_EQ(seen.size(), ep.size());
    std::set<std::size_t> classes(ep.class_map.begin(), ep.class_map.end());
    EXPECT_EQ(classes.size(), 4u);
    std::vector<int> per_class(4, 0);
    for (std::size_t i = 0; i < ep.query.size(); ++i) {
      ++per_class[ep.query_labels[i]];
      EXPECT_EQ(ep.query[i].cls, ep.class_map[ep.query_labels[i]]);
    }
    for (int n : per_class) EXPECT_EQ(n, 5);
    for (std::size_t i = 0; i < ep.support.size(); ++i) EXPECT_EQ(ep.support[i].cls, ep.class_map[ep.support_labels[i]]);
  }
}

TEST(Episodes, EveryClassGetsSampled) {
  const auto ds = blobs(40, 20);
  std::vector<std::size_t> hits(40, 0);
  for (std::size_t e = 0; e < 10000; ++e) {
    Rng rng(5, Stream::kSampling, e);
    for (auto c : sample_episode(ds, 5, 1, 5, rng).class_map) ++hits[c];
  }
  for (std::size_t c = 0; c < 40; ++c) EXPECT_GT(hits[c], 0u) << c;
  // 50000 picks over 40 classes: 1250 expected each
  for (auto h : hits) EXPECT_NEAR(static_cast<double>(h), 1250.0, 200.0);
}

TEST(Episodes, InsufficientDataIsDescriptive) {
  const auto ds = blobs(4, 20);
  Rng rng(1, Stream::kSampling, 0);
  EXPECT_THROW(sample_episode(ds, 5, 1, 5, rng), ConfigError);
  EXPECT_THROW(sample_episode(ds, 2, 15, 12, rng), ConfigError);
  EXPECT_THROW(sample_episode(ds, 3, 1, 10, rng), ConfigError);
  EXPECT_THROW(sample_episode(ds, 3, 0, 9, rng), ConfigError);
}

TEST(Partition, FortySixtyOnHundredExamples) {
  const auto ds = blobs(3, 100);
  const auto part = make_partition(ds, 0.4, 17);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(part.labeled[c].size(), 40u);
    EXPECT_EQ(part.unlabeled[c].size(), 60u);
    std::set<std::size_t> all(part.labeled[c].begin(), part.labeled[c].end());
    all.insert(part.unlabeled[c].begin(), part.unlabeled[c].end());
    EXPECT_EQ(all.size(), 100u);
  }
}

TEST(Partition, StableForOneSeed) {
  const auto ds = blobs(5, 30);
  const auto a = make_partition(ds, 0.4, 99), b = make_partition(ds, 0.4, 99), c = make_partition(ds, 0.4, 100);
  EXPECT_EQ(a.labeled, b.labeled);
  EXPECT_EQ(a.unlabeled, b.unlabeled);
  EXPECT_NE(a.labeled, c.labeled);
  EXPECT_THROW(make_partition(ds, 0.0, 1), ConfigError);
  EXPECT_THROW(make_partition(ds, 1.0, 1), ConfigError);
}

class SemiDraws : public ::testing::TestWithParam<std::size_t> {};

TEST_P(SemiDraws, DisjointAndFromTheRightClasses) {
  const std::size_t distractors = GetParam();
  const auto ds = blobs(12, 50);
  const auto part = make_partition(ds, 0.4, 4);
  for (std::size_t e = 0; e < 1000; ++e) {
    Rng rng(8, Stream::kSampling, e);
    const auto semi = sample_semi_episode(ds, part, 3, 2, 9, 12, distractors, rng);
    const auto& ep = semi.episode;
    EXPECT_EQ(semi.distractor, distractors > 0);
    ASSERT_EQ(semi.unlabeled.size(), 12u);
    std::set<ExampleRef> seen;
    for (const auto& r : ep.support) EXPECT_TRUE(seen.insert(r).second);
    for (const auto& r : ep.query) EXPECT_TRUE(seen.insert(r).second);
    for (const auto& r : semi.unlabeled) EXPECT_TRUE(seen.insert(r).second);
    const std::set<std::size_t> episode_classes(ep.class_map.begin(), ep.class_map.end());
    for (const auto& r : ep.support) {
      const auto& lab = part.labeled[r.cls];
      EXPECT_NE(std::find(lab.begin(), lab.end(), r.index), lab.end());
    }
    for (const auto& r : ep.query) {
      const auto& lab = part.labeled[r.cls];
      EXPECT_NE(std::find(lab.begin(), lab.end(), r.index), lab.end());
    }
    std::set<std::size_t> pool_classes;
    for (const auto& r : semi.unlabeled) {
      const auto& unl = part.unlabeled[r.cls];
      EXPECT_NE(std::find(unl.begin(), unl.end(), r.index), unl.end());
      EXPECT_EQ(episode_classes.count(r.cls), distractors == 0 ? 1u : 0u);
      pool_classes.insert(r.cls);
    }
    if (distractors > 0) EXPECT_LE(pool_classes.size(), distractors);
  }
}

INSTANTIATE_TEST_SUITE_P(Distractors, SemiDraws, ::testing::Values(0u, 3u));

TEST(Partition, PoolExhaustionIsAnError) {
  const auto ds = blobs(6, 20);
  const auto part = make_partition(ds, 0.4, 1);
  Rng rng(1, Stream::kSampling, 0);
  // 12 unlabeled per class, 2 episode classes
  EXPECT_THROW(sample_semi_episode(ds, part, 2, 1, 2, 25, 0, rng), ConfigError);
  EXPECT_THROW(sample_semi_episode(ds, part, 2, 1, 2, 0, 2, rng), ConfigError);
}

TEST(Synthetic, SameSeedBitIdentical) {
  for (auto kind : {SyntheticKind::kGaussianBlobs, SyntheticKind::kConcentricRings, SyntheticKind::kNoisyArcs}) {
    SyntheticSpec spec;
    spec.kind = kind;
    spec.dim = 5;
    spec.seed = 21;
    const auto a = gen_synthetic(spec), b = gen_synthetic(spec);
    EXPECT_EQ(encode_fsds(a), encode_fsds(b)) << to_string(kind);
    EXPECT_EQ(encode_split_manifest(a), encode_split_manifest(b));
    spec.seed = 22;
    EXPECT_NE(encode_fsds(a), encode_fsds(gen_synthetic(spec)));
  }
}

TEST(Synthetic, SplitsAreDisjointAndSized) {
  SyntheticSpec spec;
  spec.classes = 50;
  const auto ds = gen_synthetic(spec);
  const auto train = ds.subset(Split::kTrain), val = ds.subset(Split::kVal), test = ds.subset(Split::kTest);
  EXPECT_EQ(train.classes.size(), 30u);
  EXPECT_EQ(val.classes.size(), 10u);
  EXPECT_EQ(test.classes.size(), 10u);
  std::set<std::string> names;
  for (const auto* part : {&train, &val, &test})
    for (const auto& c : part->classes) EXPECT_TRUE(names.insert(c.name).second);
}

TEST(Synthetic, RingsHaveRequestedRadiiIn2D) {
  SyntheticSpec spec;
  spec.classes = 2;
  spec.noise = 0.0;
  const auto ds = gen_synthetic(spec);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < ds.classes[c].count; ++i) {
      const auto x = ds.classes[c].example(i, 2);
      EXPECT_NEAR(std::hypot(x[0], x[1]), c == 0 ? 1.0 : 2.0, 1e-6);
    }
}

TEST(Synthetic, RejectsBadParameters) {
  SyntheticSpec spec;
  spec.classes = 1;
  EXPECT_THROW(gen_synthetic(spec), ConfigError);
  spec.classes = 3;
  spec.per_class = 10;
  EXPECT_THROW(gen_synthetic(spec), ConfigError);
  spec.per_class = 20;
  spec.dim = 1;
  EXPECT_THROW(gen_synthetic(spec), ConfigError);
  EXPECT_THROW(parse_synthetic_kind("spirals"), ConfigError);
}

TEST(Synthetic, SeparableBlobsPrototypeIsPerfect) {
  const auto ds = blobs(2, 40, 3, 1e-6);
  BaselineOptions opt;
  opt.eval.n_way = 2;
  opt.eval.queries = 20;
  opt.eval.episodes = 100;
  const auto r = eval_baseline(BaselineKind::kPrototype, nullptr, ds, opt);
  EXPECT_EQ(r.report.mean_acc, 1.0);
}

// Two rings around a shared center: class means coincide, but the rings stay
// connected under a short length scale.
TEST(Synthetic, TwoRingsDefeatPrototypesButNotPropagation) {
  SyntheticSpec spec;
  spec.classes = 2;
  spec.per_class = 200;
  spec.train_fraction = 1.0;
  spec.val_fraction = 0.0;
  spec.seed = 5;
  const auto ds = gen_synthetic(spec);
  BaselineOptions opt;
  opt.eval.n_way = 2;
  opt.eval.queries = 160;
  opt.eval.episodes = 600;
  opt.eval.k_graph = 10;
  const auto proto = eval_baseline(BaselineKind::kPrototype, nullptr, ds, opt).report;
  opt.sigma = 0.2;
  const auto lp = eval_baseline(BaselineKind::kFixedSigmaLp, nullptr, ds, opt).report;
  EXPECT_NEAR(proto.mean_acc, 0.5, 0.15);
  EXPECT_GT(lp.mean_acc, proto.mean_acc + 2 * (lp.ci95 + proto.ci95));
}

TEST(Fsds, RoundTripIsByteExact) {
  SyntheticSpec spec;
  spec.kind = SyntheticKind::kNoisyArcs;
  spec.dim = 4;
  const auto ds = gen_synthetic(spec);
  const auto path = temp_path("rt.fsds");
  save_fsds(ds, path);
  const auto loaded = load_fsds(path);
  EXPECT_EQ(encode_fsds(loaded), encode_fsds(ds));
  EXPECT_EQ(encode_split_manifest(loaded), encode_split_manifest(ds));
  ASSERT_EQ(loaded.classes.size(), ds.classes.size());
  // generated values are already f32-representable
  for (std::size_t c = 0; c < ds.classes.size(); ++c) EXPECT_EQ(loaded.classes[c].values, ds.classes[c].values);
  std::filesystem::remove(path);
  std::filesystem::remove(manifest_path(path));
}

TEST(Fsds, BadMagicAtOffsetZero) {
  auto bytes = encode_fsds(blobs(2, 20));
  bytes[0] = 'X';
  try {
    decode_fsds(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Fsds, TruncationAndCorruptionDetected) {
  const auto bytes = encode_fsds(blobs(2, 20));
  for (std::size_t cut : {3ul, 11ul, 40ul, bytes.size() - 1})
    EXPECT_THROW(decode_fsds(std::span(bytes).first(cut)), FormatError) << cut;
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_fsds(flipped), FormatError);
  auto version = bytes;
  version[4] = 2;
  try {
    decode_fsds(version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(Fsds, FileSizeArithmetic) {
  SyntheticSpec spec;
  spec.classes = 3;
  spec.per_class = 30;
  const auto ds = gen_synthetic(spec);
  const auto path = temp_path("size.fsds");
  save_fsds(ds, path);
  const std::size_t header = 4 + 2 + 2 + 4;
  std::size_t class_headers = 0, manifest = 0;
  for (const auto& c : ds.classes) {
    class_headers += 2 + c.name.size() + 4 + 1 + 4;
    manifest += c.name.size() + 1 + to_string(c.split).size() + 1;
  }
  EXPECT_EQ(std::filesystem::file_size(path), header + class_headers + 3 * 30 * 2 * 4 + 4);
  EXPECT_EQ(std::filesystem::file_size(manifest_path(path)), manifest);
  std::filesystem::remove(path);
  std::filesystem::remove(manifest_path(path));
}

TEST(Fsds, MissingOrBadManifest) {
  const auto ds = blobs(2, 20);
  const auto path = temp_path("manifest.fsds");
  save_fsds(ds, path);
  {
    std::ofstream(manifest_path(path)) << "no-such-class\ttrain\n";
  }
  EXPECT_THROW(load_fsds(path), FormatError);
  {
    std::ofstream(manifest_path(path)) << ds.classes[0].name << "\tholdout\n";
  }
  EXPECT_THROW(load_fsds(path), FormatError);
  std::filesystem::remove(manifest_path(path));
  EXPECT_THROW(load_fsds(path), FormatError);
  std::filesystem::remove(path);
}

TEST(Dataset, ValidateCatchesInconsistencies) {
  auto ds = blobs(3, 20);
  EXPECT_NO_THROW(ds.validate());
  ds.classes[1].name = ds.classes[0].name;
  EXPECT_THROW(ds.validate(), ConfigError);
  ds = blobs(3, 20);
  ds.classes[2].values.pop_back();
  EXPECT_THROW(ds.validate(), ConfigError);
}

TEST(Dataset, GatherStacksExamples) {
  const auto ds = blobs(3, 20);
  const std::vector<ExampleRef> refs{{2, 5}, {0, 1}};
  const auto t = gather(ds, refs);
  EXPECT_EQ(t.shape(), (Shape{2, 2}));
  EXPECT_EQ(t.at(0, 1), ds.classes[2].example(5, 2)[1]);
  EXPECT_EQ(t.at(1, 0), ds.classes[0].example(1, 2)[0]);
}

}  // namespace
}  // namespace tpn
