#pragma once

// Tensor archive: 8-byte little-endian header length, a JSON header mapping
// each name to {"shape", "offset"} (byte offset into the payload), then the
// raw little-endian float32 payload. The reserved "__metadata__" key carries
// free-form JSON.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "json.hpp"
#include "maskflow/tape.hpp"

namespace maskflow {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Archive {
  std::map<std::string, Tensor> tensors;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

// Writes to a sibling temporary file and renames over the target.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

inline std::string encode_archive(const Archive& archive) {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    if (name == "__metadata__") throw std::invalid_argument("reserved tensor name __metadata__");
    header[name] = {{"shape", t.shape()}, {"offset", offset}};
    offset += static_cast<std::uint64_t>(t.numel()) * sizeof(float);
  }
  header["__metadata__"] = nlohmann::ordered_json::parse(archive.metadata.dump());
  const std::string head = header.dump();
  std::string bytes(8, '\0');
  const std::uint64_t len = head.size();
  std::memcpy(bytes.data(), &len, 8);
  bytes += head;
  for (const auto& [_, t] : archive.tensors)
    bytes.append(reinterpret_cast<const char*>(t.ptr()), static_cast<std::size_t>(t.numel()) * sizeof(float));
  return bytes;
}

inline Archive decode_archive(const std::string& bytes, const std::string& origin = "<memory>") {
  if (bytes.size() < 8) throw IoError(origin + ": truncated archive header");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), 8);
  if (len > bytes.size() - 8) throw IoError(origin + ": header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(origin + ": malformed archive header: " + e.what());
  }
  const std::size_t payload = 8 + len;
  Archive out;
  for (auto it = header.begin(); it != header.end(); ++it) {
    if (it.key() == "__metadata__") {
      out.metadata = it.value();
      continue;
    }
    const Shape shape = it.value().at("shape").get<Shape>();
    const auto off = it.value().at("offset").get<std::uint64_t>();
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    if (payload + off + n * sizeof(float) > bytes.size()) throw IoError(origin + ": tensor " + it.key() + " overruns payload");
    std::vector<float> data(n);
    std::memcpy(data.data(), bytes.data() + payload + off, n * sizeof(float));
    out.tensors.emplace(it.key(), Tensor(shape, std::move(data)));
  }
  return out;
}

inline void save_archive(const std::filesystem::path& path, const Archive& archive) {
  detail::atomic_write(path, encode_archive(archive));
}

inline Archive load_archive(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such checkpoint: " + path.string());
  return decode_archive(detail::read_file(path), path.string());
}

// Copies store values into the archive under `prefix`.
inline void export_params(const ParamStore& store, Archive& archive, const std::string& prefix = "") {
  for (const auto& [name, p] : store) archive.tensors[prefix + name] = p.value;
}

// Loads every store parameter from the archive; shapes must match.
inline void import_params(ParamStore& store, const Archive& archive, const std::string& prefix = "") {
  for (auto& [name, p] : store) {
    auto it = archive.tensors.find(prefix + name);
    if (it == archive.tensors.end()) throw IoError("checkpoint missing parameter " + prefix + name);
    if (it->second.shape() != p.value.shape()) shape_mismatch(("load " + prefix + name).c_str(), it->second.shape(), p.value.shape());
    p.value = it->second;
  }
}

}  // namespace maskflow
