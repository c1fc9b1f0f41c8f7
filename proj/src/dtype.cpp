#include "aoe/dtype.hpp"

#include <array>
#include <utility>

#include <fmt/format.h>

#include "aoe/error.hpp"

namespace aoe {

namespace {

constexpr std::array<std::pair<std::string_view, DType>, 9> kTags{{
    {"F64", DType::F64},
    {"F32", DType::F32},
    {"F16", DType::F16},
    {"BF16", DType::BF16},
    {"I64", DType::I64},
    {"I32", DType::I32},
    {"I8", DType::I8},
    {"U8", DType::U8},
    {"BOOL", DType::BOOL},
}};

// Valid safetensors tags this tool refuses to touch.
constexpr std::array<std::string_view, 10> kUnsupported{
    "F8_E4M3", "F8_E5M2", "F8_E8M0", "F6_E2M3", "F6_E3M2", "F4", "U16", "I16", "U32", "U64"};

}  // namespace

std::string_view to_string(DType t) noexcept {
  for (const auto& [tag, dt] : kTags) {
    if (dt == t) return tag;
  }
  return "?";
}

DType parse_dtype(std::string_view tag) {
  for (const auto& [name, dt] : kTags) {
    if (name == tag) return dt;
  }
  for (auto name : kUnsupported) {
    if (name == tag) throw FormatError(fmt::format("unsupported dtype '{}'", tag));
  }
  throw FormatError(fmt::format("unknown dtype '{}'", tag));
}

}  // namespace aoe
