#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "aoe/safetensors.hpp"

namespace aoe::detail {

/// parse_header for a buffer holding only the prefix and the JSON.
ParsedHeader parse_header_with_data_size(std::span<const std::byte> head, std::uint64_t data_size,
                                         HeaderCheck check);

/// Builds an index from an explicit, ordered shard list.
CheckpointIndex open_shards(const std::filesystem::path& root, const std::vector<std::filesystem::path>& files,
                            HeaderCheck check);

}  // namespace aoe::detail
