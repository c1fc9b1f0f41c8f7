#pragma once

// Element-level helpers shared by the OpenMP kernels and the serial reference.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>

#include "aoe/dtype.hpp"
#include "aoe/kernels.hpp"

namespace aoe::kernels::detail {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

template <typename T>
inline T load(const std::byte* p) noexcept {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
inline void store(std::byte* p, T v) noexcept {
  std::memcpy(p, &v, sizeof(T));
}

template <typename Int>
inline Int saturate(double v) noexcept {
  if (std::isnan(v)) return 0;
  const double r = std::nearbyint(v);
  constexpr auto lo = std::numeric_limits<Int>::min();
  constexpr auto hi = std::numeric_limits<Int>::max();
  if (r <= static_cast<double>(lo)) return lo;
  // 2^63 is the first double above INT64_MAX.
  if (r >= static_cast<double>(hi)) return hi;
  return static_cast<Int>(r);
}

inline double decode_one(const std::byte* p, DType t) noexcept {
  switch (t) {
    case DType::F64: return load<double>(p);
    case DType::F32: return static_cast<double>(load<float>(p));
    case DType::F16: return f16_to_double(load<std::uint16_t>(p));
    case DType::BF16: return bf16_to_double(load<std::uint16_t>(p));
    case DType::I64: return static_cast<double>(load<std::int64_t>(p));
    case DType::I32: return static_cast<double>(load<std::int32_t>(p));
    case DType::I8: return static_cast<double>(load<std::int8_t>(p));
    case DType::U8: return static_cast<double>(load<std::uint8_t>(p));
    case DType::BOOL: return load<std::uint8_t>(p) != 0 ? 1.0 : 0.0;
  }
  return 0.0;
}

inline void encode_one(double v, DType t, std::byte* p) noexcept {
  switch (t) {
    case DType::F64: store(p, v); return;
    case DType::F32: store(p, static_cast<float>(v)); return;
    case DType::F16: store(p, double_to_f16(v)); return;
    case DType::BF16: store(p, double_to_bf16(v)); return;
    case DType::I64: store(p, saturate<std::int64_t>(v)); return;
    case DType::I32: store(p, saturate<std::int32_t>(v)); return;
    case DType::I8: store(p, saturate<std::int8_t>(v)); return;
    case DType::U8: store(p, saturate<std::uint8_t>(v)); return;
    case DType::BOOL: store(p, static_cast<std::uint8_t>(saturate<std::int8_t>(v) != 0 ? 1 : 0)); return;
  }
}

/// Sum of squared differences over one block, 8 interleaved lanes.
inline double block_sq_diff(const double* a, const double* b, std::size_t n) noexcept {
  double lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    for (std::size_t k = 0; k < 8; ++k) {
      const double d = a[j + k] - b[j + k];
      lane[k] += d * d;
    }
  }
  for (std::size_t k = 0; j < n; ++j, ++k) {
    const double d = a[j] - b[j];
    lane[k] += d * d;
  }
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
}

/// Neumaier-compensated sum in index order.
inline double compensated_sum(std::span<const double> xs) noexcept {
  double sum = 0.0;
  double c = 0.0;
  for (double x : xs) {
    const double t = sum + x;
    if (std::fabs(sum) >= std::fabs(x)) {
      c += (sum - t) + x;
    } else {
      c += (x - t) + sum;
    }
    sum = t;
  }
  // The compensation term turns inf into NaN; the plain sum is right there.
  if (!std::isfinite(sum)) return sum;
  return sum + c;
}

void check_decode_args(std::span<const std::byte> raw, DType dtype, std::span<double> out);
void check_encode_args(std::span<const double> values, DType dtype, std::span<std::byte> out);
void check_diff_args(std::span<const double> a, std::span<const double> b);
void check_combination_args(std::span<const std::span<const double>> inputs,
                            std::span<const double> lambdas, std::span<double> out);

}  // namespace aoe::kernels::detail
