#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace memattn {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

/**
 * Dense row-major f32 array with an explicit shape.
 *
 * Element (i, j) of a 2-D tensor lives at data()[i * cols() + j]. Bank and
 * encoder files serialize data() verbatim, so the layout is part of the file
 * formats.
 */
class Tensor {
 public:
  Tensor() = default;

  // Zero-filled. Every dimension must be positive.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // 2-D accessors; callers must hold a rank-2 tensor.
  std::size_t rows() const noexcept { return shape_[0]; }
  std::size_t cols() const noexcept { return shape_[1]; }

  float& at(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  float at(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }

  std::span<float> row(std::size_t i) noexcept {
    return {data_.data() + i * shape_[1], shape_[1]};
  }
  std::span<const float> row(std::size_t i) const noexcept {
    return {data_.data() + i * shape_[1], shape_[1]};
  }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/**
 * Counter-based SplitMix64 generator.
 *
 * The n-th output (n starting at 1) is mix64(seed + n * 0x9E3779B97F4A7C15)
 * with the standard SplitMix64 finalizer, so a sequence is fully determined by
 * (seed, counter) on every platform. Gaussians use Box-Muller on pairs of
 * 53-bit uniforms: u1 = ((a >> 11) + 1) * 2^-53, u2 = (b >> 11) * 2^-53,
 * z0 = sqrt(-2 ln u1) cos(2 pi u2), z1 = sqrt(-2 ln u1) sin(2 pi u2).
 */
class Prng {
 public:
  explicit Prng(std::uint64_t seed) noexcept : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  // Uniform in [0, 1).
  double next_uniform() noexcept;
  // Standard normal pair from one Box-Muller draw.
  std::pair<double, double> next_gaussian_pair() noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

// Standard matrix product of [m x p] and [p x n].
Tensor matmul(const Tensor& a, const Tensor& b);

// a * b^T for a [m x p], b [n x p]; avoids materializing the transpose.
Tensor matmul_transposed(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& x);

// Euclidean distance, accumulated in double in index order.
double l2_distance(std::span<const float> a, std::span<const float> b);

/**
 * Fills a tensor with N(0, stddev^2) samples drawn from @p prng.
 *
 * Elements are filled in row-major order, two per Box-Muller draw; an odd
 * trailing element consumes a full draw and keeps z0.
 */
Tensor init_gaussian(const Shape& shape, Prng& prng, double stddev);

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
// Copies columns [begin, begin + count) of a 2-D tensor.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
// Writes src into dst's columns starting at begin.
void assign_cols(Tensor& dst, const Tensor& src, std::size_t begin);

// Throws DimensionError unless t is rank 2.
void require_matrix(const Tensor& t, const char* what);

}  // namespace memattn
