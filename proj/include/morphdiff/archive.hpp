// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

// Single-file container for named numeric arrays plus JSON metadata.
// Byte layout (see docs/archive.md):
//   8 bytes  magic "MDARCH01"
//   8 bytes  manifest length L, unsigned little-endian
//   L bytes  manifest, UTF-8 JSON: {"meta": {...}, "arrays": [{"name", "dtype", "shape", "offset", "nbytes"}]}
//   data     raw little-endian array payloads; offsets are relative to the start of this region

#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "morphdiff/tensor.hpp"

namespace morphdiff {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

class Archive {
 public:
  nlohmann::json meta = nlohmann::json::object();

  template <typename T>
  void put(const std::string& name, const Shape& shape, std::span<const T> values) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double> || std::is_same_v<T, std::int32_t>);
    if (static_cast<Index>(values.size()) != numel(shape)) {
      throw ConfigError("archive array '" + name + "' size does not match shape " + shape_str(shape));
    }
    Entry e;
    e.dtype = dtype_name<T>();
    e.shape = shape;
    e.bytes.resize(values.size_bytes());
    std::memcpy(e.bytes.data(), values.data(), values.size_bytes());
    entries_[name] = std::move(e);
    if (std::find(order_.begin(), order_.end(), name) == order_.end()) order_.push_back(name);
  }

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    put<T>(name, t.shape, t.span());
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const std::vector<std::string>& names() const { return order_; }

  const Shape& shape(const std::string& name) const { return entry(name).shape; }
  const std::string& dtype(const std::string& name) const { return entry(name).dtype; }

  /// Reads an array, converting between floating-point widths when needed.
  template <typename T>
  Tensor<T> get(const std::string& name) const {
    const Entry& e = entry(name);
    Tensor<T> out(e.shape);
    auto convert = [&](auto tag) {
      using S = decltype(tag);
      std::vector<S> raw(static_cast<std::size_t>(out.size()));
      std::memcpy(raw.data(), e.bytes.data(), e.bytes.size());
      std::transform(raw.begin(), raw.end(), out.data.begin(), [](S v) { return static_cast<T>(v); });
    };
    if (e.dtype == "f32") {
      convert(float{});
    } else if (e.dtype == "f64") {
      convert(double{});
    } else {
      convert(std::int32_t{});
    }
    return out;
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json manifest;
    manifest["meta"] = meta;
    manifest["arrays"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& name : order_) {
      const Entry& e = entries_.at(name);
      manifest["arrays"].push_back(
          {{"name", name}, {"dtype", e.dtype}, {"shape", e.shape}, {"offset", offset}, {"nbytes", e.bytes.size()}});
      offset += e.bytes.size();
    }
    const std::string text = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RuntimeFault("cannot write archive " + path.string());
    out.write(kMagic, 8);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& name : order_) {
      const Entry& e = entries_.at(name);
      out.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    }
    if (!out) throw RuntimeFault("failed writing archive " + path.string());
  }

  static Archive load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open archive " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) throw ConfigError("not an archive: " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 8);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw ConfigError("truncated archive manifest: " + path.string());
    Archive a;
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("corrupt archive manifest in " + path.string() + ": " + e.what());
    }
    a.meta = manifest.value("meta", nlohmann::json::object());
    const auto data_start = in.tellg();
    for (const auto& item : manifest.at("arrays")) {
      Entry e;
      e.dtype = item.at("dtype").get<std::string>();
      e.shape = item.at("shape").get<Shape>();
      const auto nbytes = item.at("nbytes").get<std::uint64_t>();
      const auto offset = item.at("offset").get<std::uint64_t>();
      const std::size_t elem = e.dtype == "f64" ? 8 : 4;
      if (e.dtype != "f32" && e.dtype != "f64" && e.dtype != "i32") throw ConfigError("unknown dtype " + e.dtype);
      if (nbytes != static_cast<std::uint64_t>(numel(e.shape)) * elem) {
        throw ConfigError("archive array size mismatch for " + item.at("name").get<std::string>());
      }
      e.bytes.resize(nbytes);
      in.seekg(data_start + static_cast<std::streamoff>(offset));
      in.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(nbytes));
      if (!in) throw ConfigError("truncated archive payload: " + path.string());
      const auto name = item.at("name").get<std::string>();
      a.entries_[name] = std::move(e);
      a.order_.push_back(name);
    }
    return a;
  }

 private:
  static constexpr const char* kMagic = "MDARCH01";

  struct Entry {
    std::string dtype;
    Shape shape;
    std::vector<std::uint8_t> bytes;
  };

  template <typename T>
  static std::string dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    if constexpr (std::is_same_v<T, double>) return "f64";
    return "i32";
  }

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("archive has no array named '" + name + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
};

}  // namespace morphdiff
