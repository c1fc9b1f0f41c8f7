#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace aoe {

enum class DType : std::uint8_t { F64, F32, F16, BF16, I64, I32, I8, U8, BOOL };

constexpr std::size_t byte_width(DType t) noexcept {
  switch (t) {
    case DType::F64:
    case DType::I64:
      return 8;
    case DType::F32:
    case DType::I32:
      return 4;
    case DType::F16:
    case DType::BF16:
      return 2;
    case DType::I8:
    case DType::U8:
    case DType::BOOL:
      return 1;
  }
  return 0;
}

constexpr bool is_floating(DType t) noexcept {
  return t == DType::F64 || t == DType::F32 || t == DType::F16 || t == DType::BF16;
}

std::string_view to_string(DType t) noexcept;

/// Parses a safetensors dtype tag. Throws FormatError for unknown tags and
/// for recognized-but-unsupported ones (F8_*, U16, ...).
DType parse_dtype(std::string_view tag);

}  // namespace aoe
