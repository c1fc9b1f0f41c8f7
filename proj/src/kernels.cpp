#include "aoe/kernels.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>

#include "kernels_detail.hpp"

namespace aoe::kernels {

namespace {

// Rounds a double to a binary float format with ExpBits exponent bits and
// ManBits explicit mantissa bits. Round to nearest, ties to even.
template <int ExpBits, int ManBits>
std::uint16_t narrow_float(double v) noexcept {
  constexpr int kBias = (1 << (ExpBits - 1)) - 1;
  constexpr std::uint32_t kExpMax = (1u << ExpBits) - 1;
  constexpr std::uint32_t kManMask = (1u << ManBits) - 1;

  const auto bits = std::bit_cast<std::uint64_t>(v);
  const std::uint32_t sign = static_cast<std::uint32_t>(bits >> 63) << (ExpBits + ManBits);
  const int exp_field = static_cast<int>((bits >> 52) & 0x7FF);
  const std::uint64_t man = bits & ((std::uint64_t{1} << 52) - 1);

  if (exp_field == 0x7FF) {
    if (man == 0) return static_cast<std::uint16_t>(sign | (kExpMax << ManBits));
    // Keep the top payload bits; force the quiet bit so the result stays NaN.
    const auto payload = static_cast<std::uint32_t>(man >> (52 - ManBits)) | (1u << (ManBits - 1));
    return static_cast<std::uint16_t>(sign | (kExpMax << ManBits) | (payload & kManMask));
  }
  // Double subnormals and zero are far below the smallest target subnormal.
  if (exp_field == 0) return static_cast<std::uint16_t>(sign);

  const int e = exp_field - 1023;
  const std::uint64_t sig = man | (std::uint64_t{1} << 52);
  const bool normal = e >= 1 - kBias;
  const int shift = normal ? 52 - ManBits : 52 - ManBits + (1 - kBias - e);
  if (shift > 63) return static_cast<std::uint16_t>(sign);

  std::uint64_t q = sig >> shift;
  const std::uint64_t rem = sig & ((std::uint64_t{1} << shift) - 1);
  const std::uint64_t half = std::uint64_t{1} << (shift - 1);
  if (rem > half || (rem == half && (q & 1) != 0)) ++q;

  if (!normal) {
    // q == 1 << ManBits lands exactly on the smallest normal encoding.
    return static_cast<std::uint16_t>(sign | static_cast<std::uint32_t>(q));
  }
  int biased = e + kBias;
  if (q == (std::uint64_t{1} << (ManBits + 1))) {
    q >>= 1;
    ++biased;
  }
  if (biased >= static_cast<int>(kExpMax)) return static_cast<std::uint16_t>(sign | (kExpMax << ManBits));
  return static_cast<std::uint16_t>(sign | (static_cast<std::uint32_t>(biased) << ManBits) |
                                    (static_cast<std::uint32_t>(q) & kManMask));
}

template <int ExpBits, int ManBits>
double widen_float(std::uint16_t h) noexcept {
  constexpr int kBias = (1 << (ExpBits - 1)) - 1;
  constexpr std::uint32_t kExpMax = (1u << ExpBits) - 1;
  const bool neg = (h >> (ExpBits + ManBits)) & 1;
  const std::uint32_t exp = (h >> ManBits) & kExpMax;
  const std::uint32_t man = h & ((1u << ManBits) - 1);
  double mag;
  if (exp == kExpMax) {
    if (man == 0) {
      mag = INFINITY;
    } else {
      const auto nan_bits = (std::uint64_t{0x7FF} << 52) | (std::uint64_t{man} << (52 - ManBits));
      mag = std::bit_cast<double>(nan_bits);
    }
  } else if (exp == 0) {
    mag = std::ldexp(static_cast<double>(man), 1 - kBias - ManBits);
  } else {
    mag = std::ldexp(static_cast<double>(man | (1u << ManBits)), static_cast<int>(exp) - kBias - ManBits);
  }
  return neg ? -mag : mag;
}

}  // namespace

double bf16_to_double(std::uint16_t bits) noexcept { return widen_float<8, 7>(bits); }
double f16_to_double(std::uint16_t bits) noexcept { return widen_float<5, 10>(bits); }
std::uint16_t double_to_bf16(double v) noexcept { return narrow_float<8, 7>(v); }
std::uint16_t double_to_f16(double v) noexcept { return narrow_float<5, 10>(v); }

void decode(std::span<const std::byte> raw, DType dtype, std::span<double> out) {
  detail::check_decode_args(raw, dtype, out);
  const auto w = byte_width(dtype);
  const auto n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static) if (out.size() >= kParallelThreshold)
  for (std::ptrdiff_t j = 0; j < n; ++j) out[j] = detail::decode_one(raw.data() + j * w, dtype);
}

std::vector<double> decode(std::span<const std::byte> raw, DType dtype) {
  std::vector<double> out(raw.size() / byte_width(dtype));
  decode(raw, dtype, out);
  return out;
}

void encode(std::span<const double> values, DType dtype, std::span<std::byte> out) {
  detail::check_encode_args(values, dtype, out);
  const auto w = byte_width(dtype);
  const auto n = static_cast<std::ptrdiff_t>(values.size());
#pragma omp parallel for schedule(static) if (values.size() >= kParallelThreshold)
  for (std::ptrdiff_t j = 0; j < n; ++j) detail::encode_one(values[j], dtype, out.data() + j * w);
}

std::vector<std::byte> encode(std::span<const double> values, DType dtype) {
  std::vector<std::byte> out(values.size() * byte_width(dtype));
  encode(values, dtype, out);
  return out;
}

double normalized_frobenius_diff(std::span<const double> a, std::span<const double> b) {
  detail::check_diff_args(a, b);
  const std::size_t n = a.size();
  std::vector<double> partial((n + kReduceBlock - 1) / kReduceBlock);
  const auto blocks = static_cast<std::ptrdiff_t>(partial.size());
#pragma omp parallel for schedule(static) if (n >= kParallelThreshold)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t lo = static_cast<std::size_t>(blk) * kReduceBlock;
    partial[blk] = detail::block_sq_diff(a.data() + lo, b.data() + lo, std::min(kReduceBlock, n - lo));
  }
  return std::sqrt(detail::compensated_sum(partial) / static_cast<double>(n));
}

void linear_combination(std::span<const std::span<const double>> inputs,
                        std::span<const double> lambdas, std::span<double> out) {
  detail::check_combination_args(inputs, lambdas, out);
  const std::size_t n = out.size();
  const auto chunks = static_cast<std::ptrdiff_t>((n + kReduceBlock - 1) / kReduceBlock);
#pragma omp parallel for schedule(static) if (n >= kParallelThreshold)
  for (std::ptrdiff_t c = 0; c < chunks; ++c) {
    const std::size_t lo = static_cast<std::size_t>(c) * kReduceBlock;
    const std::size_t hi = std::min(n, lo + kReduceBlock);
    bool first = true;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const double w = lambdas[i];
      if (w == 0.0) continue;
      const double* src = inputs[i].data();
      if (first) {
        for (std::size_t j = lo; j < hi; ++j) out[j] = w * src[j];
      } else {
        for (std::size_t j = lo; j < hi; ++j) out[j] += w * src[j];
      }
      first = false;
    }
    if (first) std::fill(out.begin() + lo, out.begin() + hi, 0.0);
  }
}

std::vector<double> linear_combination(std::span<const std::span<const double>> inputs,
                                       std::span<const double> lambdas) {
  std::vector<double> out(inputs.empty() ? 0 : inputs.front().size());
  linear_combination(inputs, lambdas, out);
  return out;
}

std::size_t count_non_finite(std::span<const double> values) {
  std::size_t count = 0;
  const auto n = static_cast<std::ptrdiff_t>(values.size());
#pragma omp parallel for reduction(+ : count) schedule(static) if (values.size() >= kParallelThreshold)
  for (std::ptrdiff_t j = 0; j < n; ++j) count += std::isfinite(values[j]) ? 0 : 1;
  return count;
}

}  // namespace aoe::kernels
