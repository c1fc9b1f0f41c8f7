#pragma once

// safetensors checkpoints: header parsing, sharded indexes, byte-range reads
// and deterministic writing.
//
// File layout: [u64 LE header length N][N bytes UTF-8 JSON][tensor data].
// data_offsets in the header are relative to the first byte after the JSON.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "aoe/dtype.hpp"

namespace aoe {

using Metadata = std::map<std::string, std::string>;

struct TensorInfo {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint64_t> shape;
  std::uint64_t begin = 0;  // [begin, end) within the shard's data region
  std::uint64_t end = 0;
  std::size_t shard = 0;

  std::uint64_t numel() const noexcept;
  std::uint64_t nbytes() const noexcept { return end - begin; }
  std::uint64_t expected_nbytes() const noexcept { return numel() * byte_width(dtype); }
  bool operator==(const TensorInfo&) const = default;
};

struct ShardInfo {
  std::filesystem::path path;
  std::uint64_t header_bytes = 0;  // N, excluding the 8-byte prefix
  std::uint64_t data_size = 0;     // file size - 8 - N
  std::string header_sha256;       // over the prefix and the JSON bytes
};

class CheckpointIndex {
 public:
  std::filesystem::path root;
  std::vector<ShardInfo> shards;
  /// Ordered by shard, then by data offset.
  std::vector<TensorInfo> tensors;
  /// The first shard's "__metadata__" block.
  Metadata metadata;
  /// Weight-map index filename when the checkpoint had one.
  std::string index_file;

  /// Rebuilds the name lookup; throws FormatError on duplicate names.
  void reindex();
  const TensorInfo* find(std::string_view name) const;
  const TensorInfo& at(std::string_view name) const;
  std::size_t size() const noexcept { return tensors.size(); }
  /// Digest over every shard's header digest, in shard order.
  std::string fingerprint() const;

 private:
  std::unordered_map<std::string, std::size_t> by_name_;
};

enum class HeaderCheck {
  Strict,   // reject size mismatches, overlaps and out-of-range offsets
  Lenient,  // keep such entries so validate_checkpoint can report them
};

struct ParsedHeader {
  std::uint64_t header_bytes = 0;
  std::uint64_t data_size = 0;
  std::vector<TensorInfo> tensors;  // sorted by data offset; shard = 0
  Metadata metadata;
  std::string header_sha256;
};

/// Parses a complete in-memory safetensors file image (or at least its
/// prefix, header and `data_size` trailing bytes, when given explicitly).
ParsedHeader parse_header(std::span<const std::byte> file_bytes, HeaderCheck check = HeaderCheck::Strict);
ParsedHeader read_header(const std::filesystem::path& file, HeaderCheck check = HeaderCheck::Strict);

/// Opens a single .safetensors file, a directory with a
/// "*.safetensors.index.json" weight map, or a directory of shards.
CheckpointIndex open_checkpoint(const std::filesystem::path& path, HeaderCheck check = HeaderCheck::Strict);

struct TensorData {
  TensorInfo info;
  std::vector<double> values;
  std::vector<std::byte> raw;
};

/// Reads only the tensor's byte range. Safe to call concurrently.
std::vector<std::byte> read_raw(const CheckpointIndex& index, std::string_view name);
TensorData read_tensor(const CheckpointIndex& index, std::string_view name);

struct Violation {
  std::string kind;  // "size mismatch", "overlap", "gap", "out of range", "dangling shard"
  std::string shard;
  std::string tensor;
  std::string detail;
};

/// Structural problems of an index. Empty iff the checkpoint is well formed.
std::vector<Violation> validate_checkpoint(const CheckpointIndex& index);

// ---------------------------------------------------------------- writing

struct OutputPolicy {
  enum class Mode { MirrorSource, Sequential };
  Mode mode = Mode::MirrorSource;
  std::uint64_t max_shard_bytes = std::uint64_t{5} << 30;
  /// "{index}" and "{count}" expand to 5-digit, 1-based shard numbers.
  std::string name_template = "model-{index}-of-{count}.safetensors";
  bool operator==(const OutputPolicy&) const = default;
};

struct PlannedTensor {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint64_t> shape;
  std::uint64_t nbytes() const noexcept;
};

struct ShardLayout {
  std::string filename;
  std::vector<PlannedTensor> tensors;
};

struct OutputLayout {
  std::vector<ShardLayout> shards;
  std::string index_file;  // empty: no weight-map file

  std::size_t tensor_count() const noexcept;
};

/// Same shard files, shard assignment and tensor order as `base`.
OutputLayout mirror_layout(const CheckpointIndex& base);
/// Packs tensors in stream order, starting a new shard when the next tensor
/// would overflow max_shard_bytes.
OutputLayout sequential_layout(std::span<const PlannedTensor> tensors, const OutputPolicy& policy);

/// Streams tensors into shard files. append() must follow layout order.
class CheckpointWriter {
 public:
  CheckpointWriter(std::filesystem::path dir, OutputLayout layout, Metadata metadata);
  ~CheckpointWriter();
  CheckpointWriter(const CheckpointWriter&) = delete;
  CheckpointWriter& operator=(const CheckpointWriter&) = delete;

  void append(std::string_view name, std::span<const std::byte> bytes);
  CheckpointIndex finish();

 private:
  void open_shard();
  void close_shard();

  std::filesystem::path dir_;
  OutputLayout layout_;
  Metadata metadata_;
  std::size_t shard_ = 0;
  std::size_t pos_ = 0;
  struct File;
  std::unique_ptr<File> file_;
  bool finished_ = false;
};

struct TensorBlob {
  PlannedTensor tensor;
  std::vector<std::byte> bytes;
};

/// Writes a whole checkpoint. Mirror mode requires `base`.
CheckpointIndex write_checkpoint(const std::filesystem::path& dir, std::span<const TensorBlob> tensors,
                                 const OutputPolicy& policy, const Metadata& metadata,
                                 const CheckpointIndex* base = nullptr);

/// Serialized header JSON for one shard, space-padded to 8-byte alignment.
std::string serialize_header(const ShardLayout& shard, const Metadata& metadata);

}  // namespace aoe
