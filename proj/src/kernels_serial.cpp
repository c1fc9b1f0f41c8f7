#include <vector>

#include <fmt/format.h>

#include "aoe/error.hpp"
#include "aoe/kernels.hpp"
#include "kernels_detail.hpp"

namespace aoe::kernels {

namespace detail {

void check_decode_args(std::span<const std::byte> raw, DType dtype, std::span<double> out) {
  const auto w = byte_width(dtype);
  if (raw.size() % w != 0) {
    throw Error(fmt::format("decode: {} bytes is not a multiple of {} ({})", raw.size(), w,
                            to_string(dtype)));
  }
  if (out.size() != raw.size() / w) {
    throw Error(fmt::format("decode: output holds {} elements, need {}", out.size(), raw.size() / w));
  }
}

void check_encode_args(std::span<const double> values, DType dtype, std::span<std::byte> out) {
  if (out.size() != values.size() * byte_width(dtype)) {
    throw Error(fmt::format("encode: output holds {} bytes, need {}", out.size(),
                            values.size() * byte_width(dtype)));
  }
}

void check_diff_args(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(fmt::format("normalized_frobenius_diff: length mismatch {} vs {}", a.size(), b.size()));
  }
  if (a.empty()) throw Error("normalized_frobenius_diff: empty tensors");
}

void check_combination_args(std::span<const std::span<const double>> inputs,
                            std::span<const double> lambdas, std::span<double> out) {
  if (inputs.empty()) throw Error("linear_combination: no input tensors");
  if (inputs.size() != lambdas.size()) {
    throw Error(fmt::format("linear_combination: {} tensors but {} weights", inputs.size(), lambdas.size()));
  }
  for (const auto& t : inputs) {
    if (t.size() != out.size()) {
      throw Error(fmt::format("linear_combination: length mismatch {} vs {}", t.size(), out.size()));
    }
  }
}

}  // namespace detail

namespace serial {

void decode(std::span<const std::byte> raw, DType dtype, std::span<double> out) {
  detail::check_decode_args(raw, dtype, out);
  const auto w = byte_width(dtype);
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = detail::decode_one(raw.data() + j * w, dtype);
}

void encode(std::span<const double> values, DType dtype, std::span<std::byte> out) {
  detail::check_encode_args(values, dtype, out);
  const auto w = byte_width(dtype);
  for (std::size_t j = 0; j < values.size(); ++j) detail::encode_one(values[j], dtype, out.data() + j * w);
}

double normalized_frobenius_diff(std::span<const double> a, std::span<const double> b) {
  detail::check_diff_args(a, b);
  const std::size_t n = a.size();
  std::vector<double> partial((n + kReduceBlock - 1) / kReduceBlock);
  for (std::size_t blk = 0; blk < partial.size(); ++blk) {
    const std::size_t lo = blk * kReduceBlock;
    partial[blk] = detail::block_sq_diff(a.data() + lo, b.data() + lo, std::min(kReduceBlock, n - lo));
  }
  return std::sqrt(detail::compensated_sum(partial) / static_cast<double>(n));
}

void linear_combination(std::span<const std::span<const double>> inputs,
                        std::span<const double> lambdas, std::span<double> out) {
  detail::check_combination_args(inputs, lambdas, out);
  for (std::size_t j = 0; j < out.size(); ++j) {
    double acc = 0.0;
    bool first = true;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (lambdas[i] == 0.0) continue;
      const double term = lambdas[i] * inputs[i][j];
      acc = first ? term : acc + term;
      first = false;
    }
    out[j] = acc;
  }
}

}  // namespace serial

}  // namespace aoe::kernels
