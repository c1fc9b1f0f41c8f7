#pragma once

// Numeric kernels over decoded tensor values.
//
// Working precision is double. Reductions are blocked with a fixed block size
// and combined in block order, so every kernel returns bit-identical results
// for any OpenMP thread count. aoe::kernels::serial holds the single-threaded
// reference versions of the same algorithms; the tests pin the two together.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "aoe/dtype.hpp"

namespace aoe::kernels {

/// Elements per reduction block. Part of the determinism contract.
inline constexpr std::size_t kReduceBlock = 4096;

/// Elementwise loops shorter than this stay single-threaded.
inline constexpr std::size_t kParallelThreshold = 1 << 15;

// Scalar conversions between double and the 16-bit float formats.
// Encoding rounds to nearest, ties to even; overflow goes to +-inf.
double bf16_to_double(std::uint16_t bits) noexcept;
double f16_to_double(std::uint16_t bits) noexcept;
std::uint16_t double_to_bf16(double v) noexcept;
std::uint16_t double_to_f16(double v) noexcept;

/// Decodes little-endian raw bytes of `dtype` into `out` (size = raw/width).
void decode(std::span<const std::byte> raw, DType dtype, std::span<double> out);
std::vector<double> decode(std::span<const std::byte> raw, DType dtype);

/// Encodes to little-endian bytes. Integer targets round half-to-even and
/// saturate; NaN becomes 0. BOOL stores 1 for any value that rounds nonzero.
void encode(std::span<const double> values, DType dtype, std::span<std::byte> out);
std::vector<std::byte> encode(std::span<const double> values, DType dtype);

/// sqrt(sum((a-b)^2) / numel): the root-mean-square elementwise difference.
double normalized_frobenius_diff(std::span<const double> a, std::span<const double> b);

/// out[j] = sum_i lambdas[i] * inputs[i][j], summed in ascending i. Terms
/// with a zero weight are skipped entirely, so a one-hot weight vector
/// returns its input bit-exactly (signed zeros included).
void linear_combination(std::span<const std::span<const double>> inputs,
                        std::span<const double> lambdas, std::span<double> out);
std::vector<double> linear_combination(std::span<const std::span<const double>> inputs,
                                       std::span<const double> lambdas);

/// Number of NaN/Inf entries.
std::size_t count_non_finite(std::span<const double> values);

namespace serial {

void decode(std::span<const std::byte> raw, DType dtype, std::span<double> out);
void encode(std::span<const double> values, DType dtype, std::span<std::byte> out);
double normalized_frobenius_diff(std::span<const double> a, std::span<const double> b);
void linear_combination(std::span<const std::span<const double>> inputs,
                        std::span<const double> lambdas, std::span<double> out);

}  // namespace serial

}  // namespace aoe::kernels
