#include <gtest/gtest.h>

#include <map>
#include <numeric>

#include "darl/common.hpp"

using namespace darl;

TEST(Rng, EngineMatchesStandardCheckValue) {
  // The standard fixes the 10000th output of a default-seeded mt19937_64.
  Rng r(5489u);
  std::uint64_t v = 0;
  for (int i = 0; i < 10000; ++i) v = r.next_u64();
  EXPECT_EQ(v, 9981545732273789042ULL);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const double x = a.normal();
    ASSERT_EQ(x, b.normal());
    differs |= x != c.normal();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformAndIndexRanges) {
  Rng r(1);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const auto k = r.index(7);
    ASSERT_LT(k, 7u);
    ++counts[k];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
  EXPECT_THROW(r.index(0), std::invalid_argument);
}

TEST(Rng, NormalMoments) {
  Rng r(2);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(3);
  std::vector<int> v(100);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  r.shuffle(w);
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

TEST(Hashing, KnownValues) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  const std::string s = "123456789";
  EXPECT_EQ(crc32_of({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}), 0xCBF43926u);
  EXPECT_EQ(hex64(0), "0000000000000000");
  EXPECT_EQ(hex64(0xdeadbeefULL), "00000000deadbeef");
}

TEST(DeriveSeed, DistinctStreams) {
  std::map<std::uint64_t, int> seen;
  for (std::uint64_t seed : {0, 1, 7})
    for (const char* p : {"split", "init", "batch"})
      for (std::uint64_t i = 0; i < 4; ++i) ++seen[derive_seed(seed, p, i)];
  EXPECT_EQ(seen.size(), 36u);
  EXPECT_EQ(derive_seed(7, "init", 2), derive_seed(7, "init", 2));
}

TEST(Bytes, LittleEndianRoundTrip) {
  std::vector<std::uint8_t> out;
  bytes::put_le<std::uint32_t>(out, 0x01020304u);
  bytes::put_le<double>(out, -2.5);
  ASSERT_EQ(out.size(), 12u);
  EXPECT_EQ(out[0], 0x04);
  EXPECT_EQ(out[3], 0x01);
  EXPECT_EQ(bytes::get_le<std::uint32_t>(out.data()), 0x01020304u);
  EXPECT_EQ(bytes::get_le<double>(out.data() + 4), -2.5);
}

TEST(Errors, KindsAndMessages) {
  EXPECT_EQ(UsageError("x").exit_code(), 1);
  EXPECT_EQ(DataError("x").exit_code(), 2);
  EXPECT_EQ(NumericalError("x").exit_code(), 3);
  const ConfigError c("plan.lp.lr", "must be positive");
  EXPECT_EQ(c.field, "plan.lp.lr");
  EXPECT_EQ(c.kind(), ErrorKind::usage);
  const MissingArtifactError m("thresholds.json", "fit-ood");
  EXPECT_STREQ(m.what(), "missing artifact 'thresholds.json' (run 'fit-ood' first)");
  EXPECT_EQ(m.exit_code(), 1);
}
