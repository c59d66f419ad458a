// Licensed under the Apache License, Version 2.0

#include <gtest/gtest.h>

#include <cstring>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "sbs/cnn.hpp"
#include "sbs/fixture.hpp"

namespace {

using namespace sbs;

Tensor3<double> random_tensor(std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Tensor3<double> t(c, h, w);
  for (auto& v : t.values) v = normal(rng);
  return t;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// 1 x 2 x 2 input, one conv layer, gap, linear(1 -> 2).
struct HandNet {
  NetSpec spec;
  WeightBundle bundle;
};

HandNet hand_net(std::size_t k, std::size_t pad, std::vector<float> kernel) {
  HandNet n;
  n.spec.input_channels = 1;
  n.spec.input_height = n.spec.input_width = 2;
  n.spec.layers = {ConvLayer{{1, 1, k, 1, pad}, 0}, ReluLayer{}, GlobalAvgPool{}, LinearLayer{1, 2, 0}};
  KernelTensor t(1, 1, k, k);
  t.values = std::move(kernel);
  n.bundle.layers.push_back(t);
  const std::vector<float> w{1.0f, -1.0f}, b{0.5f, 0.0f};
  n.bundle.residual_blobs = {encode_linear_blob(w, b)};
  return n;
}

Tensor3<double> image_1234() {
  Tensor3<double> img(1, 2, 2);
  img.values = {1, 2, 3, 4};
  return img;
}

TEST(Conv2d, IdentityOneByOne) {
  std::mt19937_64 rng(1);
  const auto in = random_tensor(3, 5, 4, rng);
  std::vector<double> k(9, 0.0);
  for (std::size_t c = 0; c < 3; ++c) k[c * 3 + c] = 1.0;
  const auto out = conv2d_forward<double>(in, k, ConvShape{3, 3, 1, 1, 0});
  EXPECT_EQ(out, in);
}

TEST(Conv2d, OnesKernelOnConstantInput) {
  Tensor3<double> in(1, 6, 6, 2.5);
  const std::vector<double> k(9, 1.0);
  const auto out = conv2d_forward<double>(in, k, ConvShape{1, 1, 3, 1, 0});
  EXPECT_EQ(out.height, 4u);
  for (double v : out.values) EXPECT_EQ(v, 9 * 2.5);
  const auto padded = conv2d_forward<double>(in, k, ConvShape{1, 1, 3, 1, 1});
  EXPECT_EQ(padded.at(0, 2, 2), 9 * 2.5);
  EXPECT_EQ(padded.at(0, 0, 0), 4 * 2.5);
}

TEST(Conv2d, ZeroKernelsGiveZeros) {
  std::mt19937_64 rng(2);
  const auto in = random_tensor(2, 5, 5, rng);
  const std::vector<double> k(4 * 2 * 9, 0.0);
  const auto out = conv2d_forward<double>(in, k, ConvShape{4, 2, 3, 2, 1});
  for (double v : out.values) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, BitEqualToPaddedLoopOracle) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> ch(1, 4), fl(1, 4), ext(3, 9), pick(0, 1), pad(0, 1);
  int checked = 0;
  for (int trial = 0; trial < 200 && checked < 100; ++trial) {
    const std::size_t k = pick(rng) ? 3 : 1, stride = pick(rng) ? 2 : 1, p = k == 3 ? pad(rng) : 0;
    const std::size_t c = ch(rng), f = fl(rng), h = ext(rng), w = ext(rng);
    const ConvShape s{f, c, k, stride, p};
    if ((h + 2 * p - k) % stride != 0 || (w + 2 * p - k) % stride != 0) continue;
    const auto in = random_tensor(c, h, w, rng);
    std::vector<double> kern(f * c * k * k);
    std::normal_distribution<double> normal;
    for (auto& v : kern) v = normal(rng);
    const auto got = conv2d_forward<double>(in, kern, s);
    const auto want = oracle::conv_quad_loop(in, kern, f, k, stride, p);
    ASSERT_EQ(got.height, want.height);
    ASSERT_EQ(got.width, want.width);
    EXPECT_TRUE(bit_equal(got.values, want.values)) << "trial " << trial;
    ++checked;
  }
  EXPECT_EQ(checked, 100);
}

TEST(Conv2d, NonIntegralOutputRejected) {
  const Tensor3<double> in(1, 4, 4);
  const std::vector<double> k(9, 1.0);
  EXPECT_THROW(conv2d_forward<double>(in, k, ConvShape{1, 1, 3, 2, 0}), ValidationError);
  EXPECT_THROW(conv2d_forward<double>(Tensor3<double>(1, 2, 2), k, ConvShape{1, 1, 3, 1, 0}), ValidationError);
}

TEST(Conv2d, KernelCountMismatchRejected) {
  const Tensor3<double> in(2, 4, 4);
  const std::vector<double> k(9, 1.0);
  EXPECT_THROW(conv2d_forward<double>(in, k, ConvShape{1, 2, 3, 1, 0}), ValidationError);
}

TEST(ForwardNet, HandComputedOneByOne) {
  const auto n = hand_net(1, 0, {2.0f});
  const auto logits = forward_net(n.spec, n.bundle, image_1234());
  // conv: 2,4,6,8 -> mean 5 -> [5 + 0.5, -5]
  ASSERT_EQ(logits.size(), 2u);
  EXPECT_DOUBLE_EQ(logits[0], 5.5);
  EXPECT_DOUBLE_EQ(logits[1], -5.0);
}

TEST(ForwardNet, HandComputedPaddedThreeByThree) {
  auto n = hand_net(3, 1, std::vector<float>(9, 1.0f));
  // each padded window covers the whole 2x2 image: every output is 10
  const auto logits = forward_net(n.spec, n.bundle, image_1234());
  EXPECT_DOUBLE_EQ(logits[0], 10.5);
  EXPECT_DOUBLE_EQ(logits[1], -10.0);
  n.bundle.layers[0].values.assign(9, -1.0f);  // ReLU clips everything
  const auto clipped = forward_net(n.spec, n.bundle, image_1234());
  EXPECT_DOUBLE_EQ(clipped[0], 0.5);
  EXPECT_DOUBLE_EQ(clipped[1], 0.0);
}

TEST(ForwardNet, ZeroImageZeroBiasesGiveZeroLogits) {
  auto fx = make_tiny_fixture();
  std::vector<float> w(16, 0.7f), b(2, 0.0f);
  fx.bundle.residual_blobs = {encode_linear_blob(w, b)};
  const auto logits = forward_net(fx.spec, fx.bundle, Tensor3<double>(3, 12, 12));
  for (double v : logits) EXPECT_EQ(v, 0.0);
}

TEST(ForwardNet, IdenticalImagesIdenticalLogits) {
  const auto fx = make_tiny_fixture();
  const auto img = fx.test.image(3);
  EXPECT_EQ(forward_net(fx.spec, fx.bundle, img), forward_net(fx.spec, fx.bundle, img));
}

TEST(ForwardNet, BindingMismatchRejected) {
  auto fx = make_tiny_fixture();
  auto wrong = fx.bundle;
  wrong.layers.pop_back();
  EXPECT_THROW(forward_net(fx.spec, wrong, fx.test.image(0)), ValidationError);
  auto twice = fx.spec;
  std::get<ConvLayer>(twice.layers[4]).bundle_layer = 1;
  EXPECT_THROW(bind(twice, fx.bundle), ValidationError);
  auto no_blob = fx.bundle;
  no_blob.residual_blobs.clear();
  EXPECT_THROW(bind(fx.spec, no_blob), ValidationError);
  EXPECT_THROW(forward_net(fx.spec, fx.bundle, Tensor3<double>(3, 10, 10)), ValidationError);
}

TEST(Accuracy, SingleCorrectSample) {
  const auto n = hand_net(1, 0, {2.0f});
  LabeledDataset d;
  d.channels = 1;
  d.height = d.width = 2;
  d.classes = 2;
  d.pixels = {1, 2, 3, 4};
  d.labels = {0};
  EXPECT_EQ(evaluate_accuracy(n.spec, n.bundle, d), 1.0);
  d.labels = {1};
  EXPECT_EQ(evaluate_accuracy(n.spec, n.bundle, d), 0.0);
}

TEST(Accuracy, TiesGoToLowestClass) {
  const std::vector<double> tied{1.0, 3.0, 3.0};
  EXPECT_EQ(argmax(tied), 1u);
}

TEST(Accuracy, RandomHeadIsNearChance) {
  auto fx = make_tiny_fixture();
  std::mt19937_64 rng(99);
  std::normal_distribution<float> normal;
  std::vector<float> w(16), b(2, 0.0f);
  for (auto& v : w) v = normal(rng);
  fx.bundle.residual_blobs = {encode_linear_blob(w, b)};
  const auto data = make_blob_dataset(1000, 4242);
  const double acc = evaluate_accuracy(fx.spec, fx.bundle, data);
  EXPECT_GE(acc, 0.45);
  EXPECT_LE(acc, 0.55);
}

TEST(Accuracy, FixtureHeadIsAccurate) {
  const auto fx = make_tiny_fixture();
  ASSERT_TRUE(fx.bundle.source_accuracy.has_value());
  EXPECT_GT(*fx.bundle.source_accuracy, 0.9);
}

TEST(Accuracy, PermutationRoundTripInvariant) {
  const auto fx = make_tiny_fixture();
  std::mt19937_64 rng(5);
  const auto t = oracle::random_table(fx.bundle, rng);
  const auto back = apply_permutation(apply_permutation(fx.bundle, t), invert_permutation(t));
  EXPECT_EQ(evaluate_accuracy(fx.spec, back, fx.test), evaluate_accuracy(fx.spec, fx.bundle, fx.test));
}

TEST(Accuracy, PositiveHeadScalingKeepsArgmax) {
  auto fx = make_tiny_fixture();
  auto scaled = fx.bundle;
  io::ByteReader r(fx.bundle.residual_blobs[0]);
  auto w = r.f32s(16);
  auto b = r.f32s(2);
  for (auto& v : w) v *= 2.0f;
  for (auto& v : b) v *= 2.0f;
  scaled.residual_blobs = {encode_linear_blob(w, b)};
  for (std::size_t i = 0; i < 50; ++i) {
    const auto img = fx.test.image(i);
    EXPECT_EQ(argmax(forward_net(fx.spec, scaled, img)), argmax(forward_net(fx.spec, fx.bundle, img)));
  }
}

TEST(Accuracy, ClassCountMismatchRejected) {
  const auto fx = make_tiny_fixture();
  auto data = fx.test;
  data.classes = 3;
  EXPECT_THROW(evaluate_accuracy(fx.spec, fx.bundle, data), ValidationError);
}

TEST(NetSpecText, RoundTrip) {
  const auto fx = make_tiny_fixture();
  const auto text = format_netspec(fx.spec);
  std::istringstream in(text);
  EXPECT_EQ(format_netspec(parse_netspec(in)), text);
}

TEST(NetSpecText, MalformedRejected) {
  for (const char* bad : {"conv 8 3 3 1 1 layer=0\n", "input 3 12 12\nconv 8 3 3 1\n", "input 3 12 12\npool\n",
                          "input 3 12 12\nlinear 8 2 layer=0\n"}) {
    std::istringstream in(bad);
    EXPECT_THROW(parse_netspec(in), ValidationError) << bad;
  }
}

TEST(DatasetFormat, RoundTripAndErrors) {
  const auto d = make_blob_dataset(6, 3);
  EXPECT_EQ(decode_dataset(encode_dataset(d)), d);
  auto bytes = encode_dataset(d);
  auto bad = bytes;
  bad[3] = 'X';
  EXPECT_THROW(decode_dataset(bad), FormatError);
  bytes.pop_back();
  EXPECT_THROW(decode_dataset(bytes), CorruptionError);
  auto nan = d;
  nan.pixels[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(encode_dataset(nan), ValidationError);
  auto label = d;
  label.labels[0] = 2;
  EXPECT_THROW(encode_dataset(label), ValidationError);
}

TEST(DatasetFormat, BlobDatasetIsBalancedAndDeterministic) {
  const auto d = make_blob_dataset(100, 8);
  EXPECT_EQ(d, make_blob_dataset(100, 8));
  std::size_t ones = 0;
  for (auto l : d.labels) ones += l;
  EXPECT_EQ(ones, 50u);
}

}  // namespace
