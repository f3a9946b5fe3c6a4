#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "golden_values.hpp"
#include "memattn/attention.hpp"
#include "memattn/errors.hpp"
#include "test_util.hpp"

using namespace memattn;
using memattn::testing::bitwise_equal;
using memattn::testing::random_tensor;

namespace {

// Scalar multi-head attention in double, written from the definition.
std::vector<double> reference_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                        std::size_t heads) {
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols(), hd = d / heads;
  std::vector<double> out(n * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(m);
      for (std::size_t j = 0; j < m; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < hd; ++c) dot += double(q.at(i, h * hd + c)) * k.at(j, h * hd + c);
        logits[j] = dot / std::sqrt(double(hd));
      }
      const double peak = *std::max_element(logits.begin(), logits.end());
      double total = 0.0;
      for (double& l : logits) total += (l = std::exp(l - peak));
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t c = 0; c < hd; ++c)
          out[i * d + h * hd + c] += logits[j] / total * v.at(j, h * hd + c);
    }
  }
  return out;
}

AttentionParams identity_params(std::size_t d) {
  return {Tensor::identity(d), Tensor::identity(d), Tensor::identity(d), Tensor::identity(d), 1};
}

}  // namespace

TEST(ProjectQkvTest, IdentityProjectionsCopyInput) {
  std::mt19937_64 rng(10);
  const Tensor x = random_tensor({5, 4}, rng);
  const auto [q, k, v] = project_qkv(x, identity_params(4));
  EXPECT_EQ(q, x);
  EXPECT_EQ(k, x);
  EXPECT_EQ(v, x);
}

TEST(ProjectQkvTest, ZeroInputGivesZeroProjections) {
  Prng prng(1);
  const BlockParams p = BlockParams::init(8, 16, 2, prng);
  const auto [q, k, v] = project_qkv(Tensor({3, 8}), p.attn);
  for (const Tensor* t : {&q, &k, &v})
    for (float x : t->data()) EXPECT_EQ(x, 0.0F);
}

TEST(ProjectQkvTest, MatchesMatmulOracleAndRejectsWidth) {
  std::mt19937_64 rng(11);
  Prng prng(2);
  const BlockParams p = BlockParams::init(6, 12, 3, prng);
  const Tensor x = random_tensor({4, 6}, rng);
  const auto [q, k, v] = project_qkv(x, p.attn);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      double ref = 0.0;
      for (std::size_t c = 0; c < 6; ++c) ref += double(x.at(i, c)) * p.attn.w_k.at(c, j);
      EXPECT_NEAR(k.at(i, j), ref, 1e-6);
    }
  }
  EXPECT_THROW(project_qkv(Tensor({4, 5}), p.attn), DimensionError);
}

TEST(DenseAttentionTest, SingleTokenReturnsItsValue) {
  std::mt19937_64 rng(12);
  const Tensor q = random_tensor({1, 8}, rng), k = random_tensor({1, 8}, rng),
               v = random_tensor({1, 8}, rng);
  EXPECT_EQ(dense_attention(q, k, v, 2), v);
}

TEST(DenseAttentionTest, EqualValueRowsAreReproduced) {
  std::mt19937_64 rng(13);
  const Tensor q = random_tensor({5, 8}, rng), k = random_tensor({5, 8}, rng);
  Tensor v({5, 8});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) v.at(i, j) = 0.1F * static_cast<float>(j) - 0.3F;
  const Tensor out = dense_attention(q, k, v, 4);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out.at(i, j), v.at(0, j), 1e-6);
}

TEST(DenseAttentionTest, MatchesScalarReference) {
  std::mt19937_64 rng(14);
  const Tensor q = random_tensor({3, 4}, rng), k = random_tensor({3, 4}, rng),
               v = random_tensor({3, 4}, rng);
  const Tensor out = dense_attention(q, k, v, 1);
  const auto ref = reference_attention(q, k, v, 1);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.data()[i], ref[i], 1e-5);

  const Tensor q2 = random_tensor({6, 12}, rng), k2 = random_tensor({9, 12}, rng),
               v2 = random_tensor({9, 12}, rng);
  const Tensor out2 = dense_attention(q2, k2, v2, 3);
  const auto ref2 = reference_attention(q2, k2, v2, 3);
  for (std::size_t i = 0; i < ref2.size(); ++i) EXPECT_NEAR(out2.data()[i], ref2[i], 1e-5);
}

TEST(DenseAttentionTest, RejectsBadShapesAndHeads) {
  EXPECT_THROW(dense_attention(Tensor({2, 4}), Tensor({2, 5}), Tensor({2, 5}), 1),
               DimensionError);
  EXPECT_THROW(dense_attention(Tensor({2, 4}), Tensor({3, 4}), Tensor({2, 4}), 1),
               DimensionError);
  EXPECT_THROW(dense_attention(Tensor({2, 6}), Tensor({2, 6}), Tensor({2, 6}), 4),
               DimensionError);
}

TEST(DenseAttentionTest, OutputsStayInValueRange) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor q = random_tensor({7, 8}, rng, -4, 4), k = random_tensor({7, 8}, rng, -4, 4);
    const Tensor v = random_tensor({7, 8}, rng, -0.5F, 2.0F);
    const auto [lo, hi] = std::minmax_element(v.data().begin(), v.data().end());
    const Tensor out = dense_attention(q, k, v, 2);
    for (float o : out.data()) {
      EXPECT_GE(o, *lo - 1e-6F);
      EXPECT_LE(o, *hi + 1e-6F);
    }
  }
}

TEST(DenseAttentionTest, PermutationEquivariant) {
  std::mt19937_64 rng(16);
  const std::size_t n = 6;
  const Tensor q = random_tensor({n, 8}, rng), k = random_tensor({n, 8}, rng),
               v = random_tensor({n, 8}, rng);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor qp({n, 8}), kp({n, 8}), vp({n, 8});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(q.row(perm[i]).begin(), 8, qp.row(i).begin());
    std::copy_n(k.row(perm[i]).begin(), 8, kp.row(i).begin());
    std::copy_n(v.row(perm[i]).begin(), 8, vp.row(i).begin());
  }
  const Tensor out = dense_attention(q, k, v, 2);
  const Tensor outp = dense_attention(qp, kp, vp, 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(outp.at(i, j), out.at(perm[i], j), 1e-6);
}

TEST(TransformerBlockTest, ZeroWeightsPassInputThrough) {
  std::mt19937_64 rng(17);
  const Tensor x = random_tensor({5, 8}, rng);
  const BlockActivations act = transformer_block(x, BlockParams::zeros(8, 32, 2));
  EXPECT_TRUE(bitwise_equal(act.block_output, x));
}

TEST(TransformerBlockTest, ShapeAndActivationsForAnyTokenCount) {
  Prng prng(3);
  const BlockParams p = BlockParams::init(16, 32, 4, prng);
  std::mt19937_64 rng(18);
  for (std::size_t n : {1, 2, 7, 33}) {
    const BlockActivations act = transformer_block(random_tensor({n, 16}, rng), p);
    EXPECT_EQ(act.block_output.shape(), (Shape{n, 16}));
    EXPECT_EQ(act.keys.shape(), (Shape{n, 16}));
    EXPECT_EQ(act.values.shape(), (Shape{n, 16}));
    EXPECT_TRUE(act.block_output.all_finite());
  }
  EXPECT_THROW(transformer_block(Tensor({3, 15}), p), DimensionError);
}

TEST(TransformerBlockTest, MatchesGoldenFromIndependentImplementation) {
  Prng prng(7);
  const Tensor x = init_gaussian({4, 8}, prng, 1.0);
  const BlockParams p = BlockParams::init(8, 32, 2, prng);
  const Tensor out = transformer_block(x, p).block_output;
  ASSERT_EQ(out.size(), std::size(golden::kBlockOutput));
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_NEAR(out.data()[i], golden::kBlockOutput[i], 1e-5) << "element " << i;
  }
}

TEST(CountParamsTest, HandCountForTinyBlock) {
  Prng prng(4);
  EXPECT_EQ(count_params(BlockParams::init(8, 32, 2, prng)), 800U);
}

TEST(CountParamsTest, FormulaAndDoublingFfn) {
  Prng prng(5);
  for (std::size_t d : {4, 8, 12, 64}) {
    for (std::size_t ff : {8, 32, 100}) {
      const auto base = count_params(BlockParams::zeros(d, ff, 2));
      EXPECT_EQ(base, 4 * d * d + 2 * d * ff + 4 * d);
      EXPECT_EQ(count_params(BlockParams::init(d, 2 * ff, 2, prng)), base + 2 * d * ff);
    }
  }
}
