#include "aoe/safetensors.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "aoe/error.hpp"
#include "aoe/hash.hpp"
#include "aoe/kernels.hpp"
#include "safetensors_internal.hpp"

namespace aoe {

using nlohmann::json;
namespace fs = std::filesystem;

std::uint64_t TensorInfo::numel() const noexcept {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void CheckpointIndex::reindex() {
  by_name_.clear();
  by_name_.reserve(tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto [it, inserted] = by_name_.emplace(tensors[i].name, i);
    if (!inserted) {
      const auto& first = tensors[it->second];
      throw FormatError(fmt::format("tensor '{}' appears in shard '{}' and shard '{}'", tensors[i].name,
                                    first.shard < shards.size() ? shards[first.shard].path.filename().string() : "?",
                                    tensors[i].shard < shards.size() ? shards[tensors[i].shard].path.filename().string() : "?"));
    }
  }
}

const TensorInfo* CheckpointIndex::find(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  return it == by_name_.end() ? nullptr : &tensors[it->second];
}

const TensorInfo& CheckpointIndex::at(std::string_view name) const {
  if (const auto* t = find(name)) return *t;
  throw Error(fmt::format("tensor '{}' not found in checkpoint '{}'", name, root.string()));
}

std::string CheckpointIndex::fingerprint() const {
  Sha256 h;
  for (const auto& s : shards) {
    h.update(s.header_sha256);
    h.update(std::string_view("\n"));
  }
  return h.digest();
}

namespace {

bool checked_mul(std::uint64_t a, std::uint64_t b, std::uint64_t& out) {
  return !__builtin_mul_overflow(a, b, &out);
}

std::uint64_t read_u64_le(const std::byte* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | std::to_integer<std::uint64_t>(p[i]);
  return v;
}

// Rejects duplicate keys at any nesting level; nlohmann would keep the last.
json parse_json_unique(std::string_view text) {
  std::vector<std::set<std::string>> keys;
  std::string duplicate;
  json::parser_callback_t cb = [&](int, json::parse_event_t event, json& parsed) {
    switch (event) {
      case json::parse_event_t::object_start:
        keys.emplace_back();
        break;
      case json::parse_event_t::object_end:
        if (!keys.empty()) keys.pop_back();
        break;
      case json::parse_event_t::key:
        if (!keys.empty() && !keys.back().insert(parsed.get<std::string>()).second && duplicate.empty()) {
          duplicate = parsed.get<std::string>();
        }
        break;
      default:
        break;
    }
    return true;
  };
  json j;
  try {
    j = json::parse(text.begin(), text.end(), cb);
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("malformed header JSON: {}", e.what()));
  }
  if (!duplicate.empty()) throw FormatError(fmt::format("duplicate key '{}' in header", duplicate));
  return j;
}

std::uint64_t as_u64(const json& v, std::string_view what, std::string_view name) {
  if (!v.is_number_unsigned()) {
    throw FormatError(fmt::format("tensor '{}': {} must be a non-negative integer", name, what));
  }
  return v.get<std::uint64_t>();
}

TensorInfo parse_entry(const std::string& name, const json& v) {
  if (name.empty()) throw FormatError("empty tensor name in header");
  if (!v.is_object()) throw FormatError(fmt::format("tensor '{}': entry is not an object", name));
  for (const auto& [key, _] : v.items()) {
    if (key != "dtype" && key != "shape" && key != "data_offsets") {
      throw FormatError(fmt::format("tensor '{}': unexpected field '{}'", name, key));
    }
  }
  if (!v.contains("dtype") || !v.contains("shape") || !v.contains("data_offsets")) {
    throw FormatError(fmt::format("tensor '{}': entry needs dtype, shape and data_offsets", name));
  }
  const auto& dt = v.at("dtype");
  if (!dt.is_string()) throw FormatError(fmt::format("tensor '{}': dtype must be a string", name));

  TensorInfo info;
  info.name = name;
  info.dtype = parse_dtype(dt.get<std::string>());

  const auto& shape = v.at("shape");
  if (!shape.is_array()) throw FormatError(fmt::format("tensor '{}': shape must be an array", name));
  for (const auto& d : shape) info.shape.push_back(as_u64(d, "shape entry", name));

  const auto& off = v.at("data_offsets");
  if (!off.is_array() || off.size() != 2) {
    throw FormatError(fmt::format("tensor '{}': data_offsets must be [begin, end]", name));
  }
  info.begin = as_u64(off[0], "data_offsets", name);
  info.end = as_u64(off[1], "data_offsets", name);
  if (info.begin > info.end) {
    throw FormatError(fmt::format("tensor '{}': data_offsets begin {} > end {}", name, info.begin, info.end));
  }
  std::uint64_t expected = byte_width(info.dtype);
  for (auto d : info.shape) {
    if (!checked_mul(expected, d, expected)) {
      throw FormatError(fmt::format("tensor '{}': shape overflows 64-bit byte count", name));
    }
  }
  return info;
}

}  // namespace

namespace {

void enforce_strict(const ParsedHeader& h) {
  std::uint64_t prev_end = 0;
  const TensorInfo* prev = nullptr;
  for (const auto& t : h.tensors) {
    if (t.nbytes() != t.expected_nbytes()) {
      throw FormatError(fmt::format("size mismatch for tensor '{}': {} x{} needs {} bytes, offsets give {}",
                                    t.name, to_string(t.dtype), t.numel(), t.expected_nbytes(), t.nbytes()));
    }
    if (t.end > h.data_size) {
      throw FormatError(fmt::format("truncated file: tensor '{}' ends at {} but data region has {} bytes", t.name,
                                    t.end, h.data_size));
    }
    if (prev != nullptr && t.begin < prev_end) {
      throw FormatError(fmt::format("tensor '{}' overlaps tensor '{}'", t.name, prev->name));
    }
    prev_end = std::max(prev_end, t.end);
    prev = &t;
  }
}

}  // namespace

ParsedHeader parse_header(std::span<const std::byte> file_bytes, HeaderCheck check) {
  if (file_bytes.size() < 8) throw FormatError("truncated file: missing 8-byte header length");
  const std::uint64_t n = read_u64_le(file_bytes.data());
  if (n > file_bytes.size() - 8) {
    throw FormatError(fmt::format("header length {} exceeds file size {}", n, file_bytes.size()));
  }
  return detail::parse_header_with_data_size(file_bytes.first(8 + n), file_bytes.size() - 8 - n, check);
}

ParsedHeader read_header(const fs::path& file, HeaderCheck check) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open '{}'", file.string()));
  std::error_code ec;
  const auto size = fs::file_size(file, ec);
  if (ec) throw Error(fmt::format("cannot stat '{}': {}", file.string(), ec.message()));
  if (size < 8) throw FormatError(fmt::format("truncated file '{}': missing 8-byte header length", file.string()));

  std::byte prefix[8];
  in.read(reinterpret_cast<char*>(prefix), 8);
  const std::uint64_t n = read_u64_le(prefix);
  if (n > size - 8) {
    throw FormatError(fmt::format("'{}': header length {} exceeds file size {}", file.string(), n, size));
  }
  // parse_header wants the data size too; hand it the header and account for
  // the data region separately to avoid reading tensor bytes.
  std::vector<std::byte> head(8 + n);
  std::memcpy(head.data(), prefix, 8);
  in.read(reinterpret_cast<char*>(head.data() + 8), static_cast<std::streamsize>(n));
  if (!in) throw Error(fmt::format("I/O failure reading header of '{}'", file.string()));
  try {
    return detail::parse_header_with_data_size(head, size - 8 - n, check);
  } catch (const FormatError& e) {
    throw FormatError(fmt::format("'{}': {}", file.string(), e.what()));
  }
}

namespace detail {

ParsedHeader parse_header_with_data_size(std::span<const std::byte> head, std::uint64_t data_size,
                                         HeaderCheck check) {
  if (head.size() < 8) throw FormatError("truncated file: missing 8-byte header length");
  const std::uint64_t n = read_u64_le(head.data());
  if (n != head.size() - 8) throw FormatError("header length does not match header buffer");
  ParsedHeader out;
  out.header_bytes = n;
  out.data_size = data_size;
  out.header_sha256 = sha256_hex(head);

  const std::string_view text(reinterpret_cast<const char*>(head.data() + 8), n);
  const json j = parse_json_unique(text);
  if (!j.is_object()) throw FormatError("malformed header JSON: top level is not an object");

  for (const auto& [key, value] : j.items()) {
    if (key == "__metadata__") {
      if (!value.is_object()) throw FormatError("__metadata__ must be an object");
      for (const auto& [mk, mv] : value.items()) {
        if (!mv.is_string()) throw FormatError(fmt::format("__metadata__ value for '{}' is not a string", mk));
        out.metadata.emplace(mk, mv.get<std::string>());
      }
      continue;
    }
    out.tensors.push_back(parse_entry(key, value));
  }

  std::stable_sort(out.tensors.begin(), out.tensors.end(), [](const TensorInfo& a, const TensorInfo& b) {
    return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
  });
  if (check == HeaderCheck::Strict) enforce_strict(out);
  return out;
}

CheckpointIndex open_shards(const fs::path& root, const std::vector<fs::path>& files, HeaderCheck check) {
  CheckpointIndex index;
  index.root = root;
  for (std::size_t s = 0; s < files.size(); ++s) {
    ParsedHeader h = read_header(files[s], check);
    if (s == 0) index.metadata = h.metadata;
    index.shards.push_back({files[s], h.header_bytes, h.data_size, h.header_sha256});
    for (auto& t : h.tensors) {
      t.shard = s;
      index.tensors.push_back(std::move(t));
    }
  }
  if (index.tensors.empty()) throw FormatError(fmt::format("empty checkpoint '{}'", root.string()));
  index.reindex();
  return index;
}

}  // namespace detail

CheckpointIndex open_checkpoint(const fs::path& path, HeaderCheck check) {
  std::error_code ec;
  if (fs::is_regular_file(path, ec)) return detail::open_shards(path, {path}, check);
  if (!fs::is_directory(path, ec)) throw Error(fmt::format("checkpoint '{}' does not exist", path.string()));

  std::vector<fs::path> index_files;
  std::vector<fs::path> shard_files;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (!entry.is_regular_file()) continue;
    const auto fname = entry.path().filename().string();
    if (fname.ends_with(".safetensors.index.json")) {
      index_files.push_back(entry.path());
    } else if (fname.ends_with(".safetensors")) {
      shard_files.push_back(entry.path());
    }
  }
  if (index_files.size() > 1) {
    throw FormatError(fmt::format("'{}' contains {} weight-map index files", path.string(), index_files.size()));
  }
  if (index_files.empty()) {
    if (shard_files.empty()) throw FormatError(fmt::format("empty checkpoint '{}'", path.string()));
    std::sort(shard_files.begin(), shard_files.end());
    return detail::open_shards(path, shard_files, check);
  }

  json j;
  {
    std::ifstream in(index_files.front());
    if (!in) throw Error(fmt::format("cannot open '{}'", index_files.front().string()));
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw FormatError(fmt::format("malformed index '{}': {}", index_files.front().string(), e.what()));
    }
  }
  if (!j.is_object() || !j.contains("weight_map") || !j.at("weight_map").is_object()) {
    throw FormatError(fmt::format("index '{}' has no weight_map object", index_files.front().string()));
  }
  std::map<std::string, std::string> weight_map;
  std::set<std::string> names;
  for (const auto& [tensor, file] : j.at("weight_map").items()) {
    if (!file.is_string()) throw FormatError(fmt::format("weight_map entry '{}' is not a string", tensor));
    weight_map.emplace(tensor, file.get<std::string>());
    names.insert(file.get<std::string>());
  }
  std::vector<fs::path> files;
  for (const auto& name : names) {
    auto p = path / name;
    if (!fs::is_regular_file(p, ec)) {
      throw FormatError(fmt::format("missing shard '{}' referenced by '{}'", name, index_files.front().filename().string()));
    }
    files.push_back(p);
  }
  CheckpointIndex index = detail::open_shards(path, files, check);
  index.index_file = index_files.front().filename().string();
  for (const auto& t : index.tensors) {
    auto it = weight_map.find(t.name);
    const auto fname = index.shards[t.shard].path.filename().string();
    if (it == weight_map.end()) {
      throw FormatError(fmt::format("tensor '{}' in shard '{}' is missing from the weight map", t.name, fname));
    }
    if (it->second != fname) {
      throw FormatError(fmt::format("tensor '{}' is mapped to '{}' but stored in '{}'", t.name, it->second, fname));
    }
  }
  if (weight_map.size() != index.tensors.size()) {
    for (const auto& [tensor, file] : weight_map) {
      if (index.find(tensor) == nullptr) {
        throw FormatError(fmt::format("weight map names tensor '{}' but shard '{}' does not contain it", tensor, file));
      }
    }
  }
  return index;
}

std::vector<std::byte> read_raw(const CheckpointIndex& index, std::string_view name) {
  const TensorInfo& t = index.at(name);
  if (t.shard >= index.shards.size()) throw Error(fmt::format("tensor '{}' refers to an unknown shard", name));
  const auto& shard = index.shards[t.shard];
  if (t.end > shard.data_size) {
    throw Error(fmt::format("tensor '{}': byte range [{}, {}) past end of shard '{}'", name, t.begin, t.end,
                            shard.path.string()));
  }
  std::vector<std::byte> raw(t.nbytes());
  std::ifstream in(shard.path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open shard '{}' for tensor '{}'", shard.path.string(), name));
  in.seekg(static_cast<std::streamoff>(8 + shard.header_bytes + t.begin));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in || static_cast<std::uint64_t>(in.gcount()) != raw.size()) {
    throw Error(fmt::format("I/O failure reading tensor '{}' from '{}'", name, shard.path.string()));
  }
  return raw;
}

TensorData read_tensor(const CheckpointIndex& index, std::string_view name) {
  TensorData out;
  out.info = index.at(name);
  if (out.info.nbytes() != out.info.expected_nbytes()) {
    throw FormatError(fmt::format("size mismatch for tensor '{}'", name));
  }
  out.raw = read_raw(index, name);
  out.values = kernels::decode(out.raw, out.info.dtype);
  return out;
}

std::vector<Violation> validate_checkpoint(const CheckpointIndex& index) {
  std::vector<Violation> out;
  std::vector<std::vector<const TensorInfo*>> per_shard(index.shards.size());
  for (const auto& t : index.tensors) {
    if (t.shard >= index.shards.size()) {
      out.push_back({"dangling shard", fmt::format("#{}", t.shard), t.name, "tensor refers to an unlisted shard"});
      continue;
    }
    const auto shard_name = index.shards[t.shard].path.filename().string();
    if (t.nbytes() != t.expected_nbytes()) {
      out.push_back({"size mismatch", shard_name, t.name,
                     fmt::format("{} x{} needs {} bytes, offsets give {}", to_string(t.dtype), t.numel(),
                                 t.expected_nbytes(), t.nbytes())});
    }
    per_shard[t.shard].push_back(&t);
  }
  for (std::size_t s = 0; s < per_shard.size(); ++s) {
    auto& list = per_shard[s];
    const auto& shard = index.shards[s];
    const auto shard_name = shard.path.filename().string();
    std::sort(list.begin(), list.end(), [](auto* a, auto* b) { return a->begin < b->begin; });
    // Coverage uses each tensor's declared size, so a bad end offset is
    // reported once, as a size mismatch.
    std::uint64_t cursor = 0;
    const TensorInfo* prev = nullptr;
    for (const auto* t : list) {
      const std::uint64_t end = t->begin + t->expected_nbytes();
      if (end > shard.data_size) {
        out.push_back({"out of range", shard_name, t->name,
                       fmt::format("ends at {} but data region has {} bytes", end, shard.data_size)});
      }
      if (t->begin < cursor) {
        out.push_back({"overlap", shard_name, t->name, fmt::format("overlaps '{}'", prev ? prev->name : "?")});
      } else if (t->begin > cursor) {
        out.push_back({"gap", shard_name, t->name, fmt::format("{} unused bytes before it", t->begin - cursor)});
      }
      cursor = std::max(cursor, end);
      prev = t;
    }
    if (cursor < shard.data_size) {
      out.push_back({"gap", shard_name, "", fmt::format("{} trailing unused bytes", shard.data_size - cursor)});
    }
  }
  return out;
}

}  // namespace aoe
