#include <fstream>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "aoe/error.hpp"
#include "aoe/safetensors.hpp"
#include "safetensors_internal.hpp"

namespace aoe {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::uint64_t PlannedTensor::nbytes() const noexcept {
  std::uint64_t n = byte_width(dtype);
  for (auto d : shape) n *= d;
  return n;
}

std::size_t OutputLayout::tensor_count() const noexcept {
  std::size_t n = 0;
  for (const auto& s : shards) n += s.tensors.size();
  return n;
}

namespace {

void check_unique(const OutputLayout& layout) {
  std::set<std::string_view> seen;
  for (const auto& s : layout.shards) {
    for (const auto& t : s.tensors) {
      if (!seen.insert(t.name).second) throw Error(fmt::format("duplicate tensor '{}' in output stream", t.name));
    }
  }
}

std::string expand_template(std::string_view tmpl, std::size_t index, std::size_t count) {
  std::string out(tmpl);
  auto replace = [&out](std::string_view key, std::string_view value) {
    for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + value.size())) {
      out.replace(pos, key.size(), value);
    }
  };
  replace("{index}", fmt::format("{:05d}", index));
  replace("{count}", fmt::format("{:05d}", count));
  return out;
}

void write_u64_le(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf, 8);
}

}  // namespace

OutputLayout mirror_layout(const CheckpointIndex& base) {
  OutputLayout layout;
  layout.index_file = base.index_file;
  layout.shards.resize(base.shards.size());
  for (std::size_t s = 0; s < base.shards.size(); ++s) {
    layout.shards[s].filename = base.shards[s].path.filename().string();
  }
  for (const auto& t : base.tensors) {
    layout.shards.at(t.shard).tensors.push_back({t.name, t.dtype, t.shape});
  }
  return layout;
}

OutputLayout sequential_layout(std::span<const PlannedTensor> tensors, const OutputPolicy& policy) {
  std::vector<std::vector<PlannedTensor>> groups;
  std::uint64_t used = 0;
  for (const auto& t : tensors) {
    const auto bytes = t.nbytes();
    if (bytes > policy.max_shard_bytes) {
      throw Error(fmt::format("tensor '{}' ({} bytes) exceeds max shard size {}", t.name, bytes, policy.max_shard_bytes));
    }
    if (groups.empty() || used + bytes > policy.max_shard_bytes) {
      groups.emplace_back();
      used = 0;
    }
    groups.back().push_back(t);
    used += bytes;
  }
  OutputLayout layout;
  if (groups.size() <= 1) {
    layout.shards.push_back({"model.safetensors", groups.empty() ? std::vector<PlannedTensor>{} : groups.front()});
  } else {
    for (std::size_t i = 0; i < groups.size(); ++i) {
      layout.shards.push_back({expand_template(policy.name_template, i + 1, groups.size()), std::move(groups[i])});
    }
    layout.index_file = "model.safetensors.index.json";
  }
  check_unique(layout);
  return layout;
}

std::string serialize_header(const ShardLayout& shard, const Metadata& metadata) {
  ordered_json j = ordered_json::object();
  if (!metadata.empty()) {
    ordered_json meta = ordered_json::object();
    for (const auto& [k, v] : metadata) meta[k] = v;
    j["__metadata__"] = std::move(meta);
  }
  std::uint64_t offset = 0;
  for (const auto& t : shard.tensors) {
    const auto bytes = t.nbytes();
    j[t.name] = {{"dtype", std::string(to_string(t.dtype))}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string text = j.dump();
  text.append((8 - text.size() % 8) % 8, ' ');
  return text;
}

struct CheckpointWriter::File {
  std::ofstream out;
  fs::path path;
};

CheckpointWriter::CheckpointWriter(fs::path dir, OutputLayout layout, Metadata metadata)
    : dir_(std::move(dir)), layout_(std::move(layout)), metadata_(std::move(metadata)) {
  check_unique(layout_);
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw Error(fmt::format("cannot create '{}': {}", dir_.string(), ec.message()));
  if (!layout_.shards.empty()) open_shard();
}

CheckpointWriter::~CheckpointWriter() = default;

void CheckpointWriter::open_shard() {
  const auto& shard = layout_.shards[shard_];
  file_ = std::make_unique<File>();
  file_->path = dir_ / shard.filename;
  file_->out.open(file_->path, std::ios::binary | std::ios::trunc);
  if (!file_->out) throw Error(fmt::format("cannot create '{}'", file_->path.string()));
  const std::string header = serialize_header(shard, metadata_);
  write_u64_le(file_->out, header.size());
  file_->out.write(header.data(), static_cast<std::streamsize>(header.size()));
  pos_ = 0;
}

void CheckpointWriter::close_shard() {
  file_->out.close();
  if (!file_->out) throw Error(fmt::format("I/O failure writing '{}'", file_->path.string()));
}

void CheckpointWriter::append(std::string_view name, std::span<const std::byte> bytes) {
  if (finished_) throw Error("append after finish");
  // Skip over shards that hold no tensors.
  while (shard_ < layout_.shards.size() && pos_ == layout_.shards[shard_].tensors.size()) {
    close_shard();
    if (++shard_ == layout_.shards.size()) break;
    open_shard();
  }
  if (shard_ >= layout_.shards.size()) throw Error(fmt::format("unexpected tensor '{}': layout is complete", name));
  const auto& slot = layout_.shards[shard_].tensors[pos_];
  if (slot.name != name) {
    throw Error(fmt::format("out-of-order tensor '{}': expected '{}'", name, slot.name));
  }
  if (bytes.size() != slot.nbytes()) {
    throw Error(fmt::format("tensor '{}': {} bytes given, layout needs {}", name, bytes.size(), slot.nbytes()));
  }
  file_->out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!file_->out) throw Error(fmt::format("I/O failure writing '{}'", file_->path.string()));
  ++pos_;
}

CheckpointIndex CheckpointWriter::finish() {
  if (finished_) throw Error("finish called twice");
  while (shard_ < layout_.shards.size()) {
    if (pos_ != layout_.shards[shard_].tensors.size()) {
      throw Error(fmt::format("checkpoint incomplete: shard '{}' got {} of {} tensors", layout_.shards[shard_].filename,
                              pos_, layout_.shards[shard_].tensors.size()));
    }
    close_shard();
    if (++shard_ < layout_.shards.size()) open_shard();
  }
  finished_ = true;

  std::vector<fs::path> files;
  for (const auto& s : layout_.shards) files.push_back(dir_ / s.filename);
  if (!layout_.index_file.empty()) {
    json weight_map = json::object();
    std::uint64_t total = 0;
    for (const auto& s : layout_.shards) {
      for (const auto& t : s.tensors) {
        weight_map[t.name] = s.filename;
        total += t.nbytes();
      }
    }
    json index = {{"metadata", {{"total_size", total}}}, {"weight_map", std::move(weight_map)}};
    const auto path = dir_ / layout_.index_file;
    std::ofstream out(path, std::ios::trunc);
    out << index.dump(2) << '\n';
    if (!out) throw Error(fmt::format("I/O failure writing '{}'", path.string()));
  }
  CheckpointIndex result = detail::open_shards(files.size() == 1 && layout_.index_file.empty() ? files.front() : dir_,
                                               files, HeaderCheck::Strict);
  result.index_file = layout_.index_file;
  return result;
}

CheckpointIndex write_checkpoint(const fs::path& dir, std::span<const TensorBlob> tensors, const OutputPolicy& policy,
                                 const Metadata& metadata, const CheckpointIndex* base) {
  OutputLayout layout;
  if (policy.mode == OutputPolicy::Mode::MirrorSource) {
    if (base == nullptr) throw Error("mirror-source output needs a base checkpoint");
    layout = mirror_layout(*base);
  } else {
    std::vector<PlannedTensor> planned;
    planned.reserve(tensors.size());
    for (const auto& t : tensors) planned.push_back(t.tensor);
    layout = sequential_layout(planned, policy);
  }
  std::map<std::string_view, const TensorBlob*> by_name;
  for (const auto& t : tensors) {
    if (!by_name.emplace(t.tensor.name, &t).second) {
      throw Error(fmt::format("duplicate tensor '{}' in output stream", t.tensor.name));
    }
  }
  if (by_name.size() != layout.tensor_count()) {
    throw Error(fmt::format("output stream has {} tensors, layout expects {}", by_name.size(), layout.tensor_count()));
  }
  CheckpointWriter writer(dir, layout, metadata);
  for (const auto& s : layout.shards) {
    for (const auto& t : s.tensors) {
      auto it = by_name.find(t.name);
      if (it == by_name.end()) throw Error(fmt::format("output stream lacks tensor '{}'", t.name));
      if (it->second->tensor.dtype != t.dtype || it->second->tensor.shape != t.shape) {
        throw Error(fmt::format("tensor '{}' does not match the mirrored layout", t.name));
      }
      writer.append(t.name, it->second->bytes);
    }
  }
  return writer.finish();
}

}  // namespace aoe
