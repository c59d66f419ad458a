// Licensed under the Apache License, Version 2.0

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>
#include <set>
#include <tuple>

#include <unistd.h>

#include "oracles.hpp"
#include "sbs/weight_store.hpp"

namespace {

using namespace sbs;

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("sbs_ws_" + std::to_string(::getpid()) + "_" + name);
}

WeightBundle one_layer(std::size_t f, std::size_t c, std::size_t k) {
  WeightBundle b;
  KernelTensor t(f, c, k, k);
  for (std::size_t i = 0; i < t.values.size(); ++i) t.values[i] = static_cast<float>(i) * 0.5f - 1.0f;
  b.layers.push_back(t);
  return b;
}

TEST(BundleFormat, SaveLoadRoundTripIsBitExact) {
  std::mt19937_64 rng(11);
  const auto b = oracle::random_bundle(rng);
  const auto p = temp_path("rt.sbsw");
  save_bundle(b, p);
  const auto back = load_bundle(p);
  EXPECT_EQ(back, b);
  ASSERT_EQ(back.layers.size(), b.layers.size());
  for (std::size_t l = 0; l < b.layers.size(); ++l)
    EXPECT_EQ(std::memcmp(back.layers[l].values.data(), b.layers[l].values.data(), b.layers[l].values.size() * 4), 0);
  std::filesystem::remove(p);
}

TEST(BundleFormat, AlteredMagicIsFormatError) {
  auto bytes = encode_bundle(one_layer(2, 1, 3));
  bytes[1] = 'X';
  EXPECT_THROW(decode_bundle(bytes), FormatError);
}

TEST(BundleFormat, WrongVersionIsFormatError) {
  auto bytes = encode_bundle(one_layer(2, 1, 3));
  bytes[4] = 2;
  EXPECT_THROW(decode_bundle(bytes), FormatError);
}

TEST(BundleFormat, TruncatedPayloadIsCorruption) {
  auto bytes = encode_bundle(one_layer(2, 1, 3));
  bytes.resize(bytes.size() - 7);
  EXPECT_THROW(decode_bundle(bytes), CorruptionError);
}

TEST(BundleFormat, TrailingBytesAreCorruption) {
  auto bytes = encode_bundle(one_layer(2, 1, 3));
  bytes.push_back(0);
  EXPECT_THROW(decode_bundle(bytes), CorruptionError);
}

TEST(BundleFormat, NonFiniteEntryIsValidationError) {
  auto b = one_layer(1, 1, 1);
  auto bytes = encode_bundle(b);
  // The single payload float follows the 8-byte file header and 6-byte layer header.
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(bytes.data() + 4 + 2 + 2 + 6, &nan, 4);
  EXPECT_THROW(decode_bundle(bytes), ValidationError);
  b.layers[0].values[0] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(encode_bundle(b), ValidationError);
}

TEST(BundleFormat, OneLayerTwoByOneThreeByThreeReadsEighteenFloats) {
  const auto b = one_layer(2, 1, 3);
  const auto bytes = encode_bundle(b);
  // magic 4 + version 2 + count 2 + header 6 + 18 floats + blob count 4
  EXPECT_EQ(bytes.size(), 4u + 2 + 2 + 6 + 18 * 4 + 4);
  EXPECT_EQ(decode_bundle(bytes).layers[0].values.size(), 18u);
}

TEST(BundleFormat, LayoutIsLittleEndianAndHeadersFirst) {
  WeightBundle b = one_layer(2, 3, 1);
  b.layers.push_back(KernelTensor(1, 2, 3, 3, 0.25f));
  b.residual_blobs = {{1, 2, 3}};
  const auto bytes = encode_bundle(b);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SBSW");
  EXPECT_EQ(bytes[4] | (bytes[5] << 8), 1);
  EXPECT_EQ(bytes[6] | (bytes[7] << 8), 2);  // layer count
  const std::vector<std::uint8_t> headers{2, 0, 3, 0, 1, 1, 1, 0, 2, 0, 3, 3};
  EXPECT_EQ(std::vector<std::uint8_t>(bytes.begin() + 8, bytes.begin() + 20), headers);
  float first = 0.0f;
  std::memcpy(&first, bytes.data() + 20, 4);
  EXPECT_EQ(first, b.layers[0].values[0]);
  const std::size_t blob_at = 20 + (6 + 18) * 4;
  EXPECT_EQ(bytes[blob_at], 1);      // blob count
  EXPECT_EQ(bytes[blob_at + 4], 3);  // blob length
  EXPECT_EQ(bytes.back(), 3);
}

TEST(BundleFormat, SameBundleSavedTwiceGivesIdenticalBytes) {
  std::mt19937_64 rng(3);
  const auto b = oracle::random_bundle(rng);
  EXPECT_EQ(encode_bundle(b), encode_bundle(b));
  const auto p1 = temp_path("a.sbsw"), p2 = temp_path("b.sbsw");
  save_bundle(b, p1);
  save_bundle(b, p2);
  EXPECT_EQ(io::read_file(p1), io::read_file(p2));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST(BundleFormat, EmptyLayerListIsValidationError) {
  EXPECT_THROW(encode_bundle(WeightBundle{}), ValidationError);
}

TEST(BundleFormat, InvalidShapesRejected) {
  WeightBundle b;
  b.layers.push_back(KernelTensor(1, 1, 2, 2));
  EXPECT_THROW(validate(b), ValidationError);
  b.layers[0] = KernelTensor(1, 1, 3, 1);
  EXPECT_THROW(validate(b), ValidationError);
  b.layers[0] = KernelTensor(0, 1, 3, 3);
  EXPECT_THROW(validate(b), ValidationError);
  b.layers[0] = KernelTensor(1, 1, 3, 3);
  b.layers[0].values.pop_back();
  EXPECT_THROW(validate(b), ValidationError);
}

TEST(BundleFormat, UnwritablePathIsIoError) {
  EXPECT_THROW(save_bundle(one_layer(1, 1, 1), "/nonexistent-dir/x/y.sbsw"), IoError);
  EXPECT_THROW(load_bundle("/nonexistent-dir/x/y.sbsw"), IoError);
}

TEST(BundleFormat, TwoLayerHeaderCount) {
  WeightBundle b = one_layer(1, 1, 1);
  b.layers.push_back(b.layers[0]);
  const auto bytes = encode_bundle(b);
  EXPECT_EQ(bytes[6], 2);
  EXPECT_EQ(bytes[7], 0);
}

TEST(BundleFormat, ParamCountIsSumOfShapes) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20; ++i) {
    const auto b = oracle::random_bundle(rng);
    std::size_t expect = 0;
    for (const auto& l : b.layers) expect += l.filters * l.channels * l.kh * l.kw;
    EXPECT_EQ(b.param_count(), expect);
  }
}

TEST(KernelAt, ZeroFirstKernel) {
  WeightBundle b = one_layer(2, 2, 3);
  std::fill(b.layers[0].values.begin(), b.layers[0].values.begin() + 9, 0.0f);
  const auto k = kernel_at(b, {0, 0, 0});
  ASSERT_EQ(k.size(), 9u);
  for (float v : k) EXPECT_EQ(v, 0.0f);
}

TEST(KernelAt, OutOfRangeIsIndexError) {
  const auto b = one_layer(2, 3, 3);
  EXPECT_THROW(kernel_at(b, {0, 2, 0}), IndexError);
  EXPECT_THROW(kernel_at(b, {0, 0, 3}), IndexError);
  EXPECT_THROW(kernel_at(b, {1, 0, 0}), IndexError);
}

TEST(KernelAt, ReturnsViewIntoBundle) {
  const auto b = one_layer(2, 3, 3);
  const auto k = kernel_at(b, {0, 1, 2});
  EXPECT_EQ(k.data(), b.layers[0].values.data() + (1 * 3 + 2) * 9);
}

TEST(KernelAt, PermutationMovesSlotZeroToSlotThree) {
  const auto b = one_layer(2, 2, 3);
  PermutationTable t;
  t.layers.push_back(LayerPermutation::from_perm({3, 0, 1, 2}));
  const auto p = apply_permutation(b, t);
  const auto moved = kernel_at(p, {0, 1, 1});
  const auto orig = kernel_at(b, {0, 0, 0});
  EXPECT_TRUE(std::equal(moved.begin(), moved.end(), orig.begin()));
}

TEST(CoordinateGrid, EnumerationOrder) {
  const auto g = coordinate_grid(one_layer(2, 2, 1));
  const std::vector<KernelCoord> expect{{0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {0, 1, 1}};
  EXPECT_EQ(g, expect);
}

TEST(CoordinateGrid, Lengths) {
  WeightBundle b = one_layer(1, 1, 1);
  b.layers.push_back(b.layers[0]);
  EXPECT_EQ(coordinate_grid(b).size(), 2u);
  WeightBundle toy;
  for (int i = 0; i < 3; ++i) toy.layers.push_back(KernelTensor(4, 4, 3, 3));
  EXPECT_EQ(coordinate_grid(toy).size(), 48u);
}

TEST(CoordinateGrid, NoDuplicatesAndMatchesSlotCount) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 50; ++i) {
    const auto b = oracle::random_bundle(rng);
    const auto g = coordinate_grid(b);
    EXPECT_EQ(g.size(), b.slot_count());
    std::set<std::tuple<std::size_t, std::size_t, std::size_t>> seen;
    for (const auto& c : g) seen.insert({c.layer, c.filter, c.channel});
    EXPECT_EQ(seen.size(), g.size());
  }
}

TEST(Permutation, IdentityLeavesBundleUnchanged) {
  std::mt19937_64 rng(2);
  const auto b = oracle::random_bundle(rng);
  EXPECT_EQ(apply_permutation(b, PermutationTable::identity(b)), b);
}

TEST(Permutation, SwapExchangesKernels) {
  const auto b = one_layer(2, 1, 3);
  PermutationTable t;
  t.layers.push_back(LayerPermutation::from_perm({1, 0}));
  const auto p = apply_permutation(b, t);
  EXPECT_TRUE(std::equal(p.layers[0].kernel(0).begin(), p.layers[0].kernel(0).end(), b.layers[0].kernel(1).begin()));
  EXPECT_TRUE(std::equal(p.layers[0].kernel(1).begin(), p.layers[0].kernel(1).end(), b.layers[0].kernel(0).begin()));
}

TEST(Permutation, OutputSlotTakesInputAtInverse) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const auto b = oracle::random_bundle(rng);
    const auto t = oracle::random_table(b, rng);
    const auto p = apply_permutation(b, t);
    for (std::size_t l = 0; l < b.layers.size(); ++l)
      for (std::size_t i = 0; i < b.layers[l].slot_count(); ++i) {
        const auto out = p.layers[l].kernel(i);
        const auto in = b.layers[l].kernel(t.layers[l].inv[i]);
        EXPECT_TRUE(std::equal(out.begin(), out.end(), in.begin()));
      }
  }
}

TEST(Permutation, ApplyThenInverseRestores) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto b = oracle::random_bundle(rng);
    const auto t = oracle::random_table(b, rng);
    EXPECT_EQ(apply_permutation(apply_permutation(b, t), invert_permutation(t)), b);
  }
}

TEST(Permutation, InvertIsInvolutionAndIdentityFixed) {
  std::mt19937_64 rng(6);
  const auto b = oracle::random_bundle(rng);
  const auto id = PermutationTable::identity(b);
  EXPECT_EQ(invert_permutation(id), id);
  const auto t = oracle::random_table(b, rng);
  EXPECT_EQ(invert_permutation(invert_permutation(t)), t);
  const auto inv = invert_permutation(t);
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    EXPECT_EQ(inv.layers[l].perm, t.layers[l].inv);
    EXPECT_EQ(inv.layers[l].inv, t.layers[l].perm);
  }
}

TEST(Permutation, KnownInverse) {
  PermutationTable t;
  t.layers.push_back(LayerPermutation::from_perm({2, 0, 1}));
  const auto inv = invert_permutation(t);
  EXPECT_EQ(inv.layers[0].perm, (std::vector<std::uint32_t>{1, 2, 0}));
  for (std::uint32_t i = 0; i < 3; ++i) EXPECT_EQ(t.layers[0].inv[t.layers[0].perm[i]], i);
}

TEST(Permutation, NonBijectionRejected) {
  EXPECT_THROW(LayerPermutation::from_perm({0, 0, 1}), ValidationError);
  EXPECT_THROW(LayerPermutation::from_perm({0, 3, 1}), ValidationError);
  PermutationTable broken;
  broken.layers.push_back({{0, 0}, {0, 1}});
  EXPECT_THROW(invert_permutation(broken), ValidationError);
}

TEST(Permutation, ShapeMismatchRejected) {
  const auto b = one_layer(2, 2, 3);
  PermutationTable t;
  t.layers.push_back(LayerPermutation::identity(3));
  EXPECT_THROW(apply_permutation(b, t), ValidationError);
  EXPECT_THROW(apply_permutation(b, PermutationTable{}), ValidationError);
}

TEST(Permutation, FromOrderPlacesVisitedSlotsInSequence) {
  const std::vector<std::size_t> order{2, 0, 1};
  const auto p = LayerPermutation::from_order(order);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(p.inv[k], order[k]);
}

TEST(TableFormat, RoundTripAndLayout) {
  std::mt19937_64 rng(9);
  const auto b = oracle::random_bundle(rng);
  const auto t = oracle::random_table(b, rng);
  const auto p = temp_path("t.sbsp");
  save_table(t, p);
  EXPECT_EQ(load_table(p), t);
  std::filesystem::remove(p);
  const auto bytes = encode_table(t);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SBSP");
  std::size_t expect = 4 + 2 + 2;
  for (const auto& l : t.layers) expect += 4 + 4 * l.size();
  EXPECT_EQ(bytes.size(), expect);
}

TEST(TableFormat, CorruptTablesRejected) {
  PermutationTable t;
  t.layers.push_back(LayerPermutation::from_perm({1, 0, 2}));
  auto bytes = encode_table(t);
  auto bad_magic = bytes;
  bad_magic[0] = 'Z';
  EXPECT_THROW(decode_table(bad_magic), FormatError);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_table(truncated), CorruptionError);
  auto dup = bytes;
  dup[bytes.size() - 4] = 0;  // last index 2 -> 0, duplicate
  EXPECT_THROW(decode_table(dup), ValidationError);
}

TEST(TableFormat, OverheadIsTableBytesOverBundleBytes) {
  const auto b = one_layer(4, 4, 3);
  const auto t = PermutationTable::identity(b);
  const double expect = static_cast<double>(8 + 4 + 16 * 4) / static_cast<double>(8 + 6 + 16 * 9 * 4 + 4);
  EXPECT_DOUBLE_EQ(table_overhead(t, b), expect);
}

}  // namespace
