#pragma once

// Named-array container file:
//   [u64 little-endian header length][UTF-8 JSON header][raw payload bytes]
// The header lists entries with name, dtype (f32|u8|u32|bool), shape, byte
// offset into the payload region, byte length, and crc32 of the payload.
// Every reader error is categorized: version, truncation, checksum, lookup.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "horec/core.hpp"
#include "horec/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "container format assumes a little-endian host");

namespace horec::container {

inline constexpr int kFormatVersion = 1;

struct Entry {
  std::string name;
  std::string dtype;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint32_t crc = 0;
};

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "u32") return 4;
  if (dtype == "u8" || dtype == "bool") return 1;
  fail("dtype", "unknown dtype '" + dtype + "'");
}

inline std::uint32_t crc32_bytes(const void* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      ::crc32(0, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

class Writer {
 public:
  void add_raw(const std::string& name, const std::string& dtype, Shape shape,
               const void* data, std::size_t bytes) {
    require(bytes == static_cast<std::size_t>(shape_numel(shape)) * dtype_size(dtype),
            "invalid-argument", "payload size mismatch for entry '" + name + "'");
    for (const auto& e : entries_)
      require(e.name != name, "invalid-argument", "duplicate entry '" + name + "'");
    Entry e;
    e.name = name;
    e.dtype = dtype;
    e.shape = std::move(shape);
    e.offset = payload_.size();
    e.length = bytes;
    e.crc = crc32_bytes(data, bytes);
    const auto* p = static_cast<const unsigned char*>(data);
    payload_.insert(payload_.end(), p, p + bytes);
    entries_.push_back(std::move(e));
  }

  void add(const std::string& name, const Tensor<float>& t) {
    add_raw(name, "f32", t.shape(), t.data(), sizeof(float) * t.numel());
  }
  void add(const std::string& name, const Tensor<std::uint32_t>& t) {
    add_raw(name, "u32", t.shape(), t.data(), sizeof(std::uint32_t) * t.numel());
  }
  void add(const std::string& name, const Tensor<std::uint8_t>& t,
           bool as_bool = false) {
    add_raw(name, as_bool ? "bool" : "u8", t.shape(), t.data(),
            static_cast<std::size_t>(t.numel()));
  }
  void add_text(const std::string& name, const std::string& text) {
    add_raw(name, "u8", {static_cast<std::int64_t>(text.size())}, text.data(),
            text.size());
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["format_version"] = kFormatVersion;
    auto& list = header["entries"] = nlohmann::json::array();
    for (const auto& e : entries_) {
      list.push_back({{"name", e.name},
                      {"dtype", e.dtype},
                      {"shape", e.shape},
                      {"offset", e.offset},
                      {"length", e.length},
                      {"crc32", e.crc}});
    }
    std::string hdr = header.dump();
    std::uint64_t hlen = hdr.size();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), "io", "cannot open '" + path.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    if (!payload_.empty())
      f.write(reinterpret_cast<const char*>(payload_.data()),
              static_cast<std::streamsize>(payload_.size()));
    f.flush();
    require(f.good(), "io", "short write to '" + path.string() + "'");
  }

 private:
  std::vector<Entry> entries_;
  std::vector<unsigned char> payload_;
};

class Archive {
 public:
  static Archive load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "io", "cannot open '" + path.string() + "'");
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    require(f.gcount() == sizeof(hlen), "truncated",
            "'" + path.string() + "' is truncated (missing header length)");
    require(hlen > 0 && hlen < (1ull << 30), "truncated",
            "'" + path.string() + "' has an implausible header length");
    std::string hdr(hlen, '\0');
    f.read(hdr.data(), static_cast<std::streamsize>(hlen));
    require(static_cast<std::uint64_t>(f.gcount()) == hlen, "truncated",
            "'" + path.string() + "' is truncated (incomplete header)");

    nlohmann::json header;
    try {
      header = nlohmann::json::parse(hdr);
    } catch (const std::exception& e) {
      fail("format", "'" + path.string() + "' header is not valid JSON: " + e.what());
    }
    int ver = header.value("format_version", -1);
    require(ver == kFormatVersion, "version",
            "'" + path.string() + "' has format_version " + std::to_string(ver) +
                ", expected " + std::to_string(kFormatVersion));

    Archive a;
    a.path_ = path.string();
    std::uint64_t payload_len = 0;
    for (const auto& j : header.at("entries")) {
      Entry e;
      e.name = j.at("name").get<std::string>();
      e.dtype = j.at("dtype").get<std::string>();
      e.shape = j.at("shape").get<Shape>();
      e.offset = j.at("offset").get<std::uint64_t>();
      e.length = j.at("length").get<std::uint64_t>();
      e.crc = j.at("crc32").get<std::uint32_t>();
      require(e.length == static_cast<std::uint64_t>(shape_numel(e.shape)) *
                              dtype_size(e.dtype),
              "format", "entry '" + e.name + "' length does not match its shape");
      payload_len = std::max(payload_len, e.offset + e.length);
      a.entries_.push_back(std::move(e));
    }

    a.payload_.resize(payload_len);
    if (payload_len > 0) {
      f.read(reinterpret_cast<char*>(a.payload_.data()),
             static_cast<std::streamsize>(payload_len));
      require(static_cast<std::uint64_t>(f.gcount()) == payload_len, "truncated",
              "'" + path.string() + "' is truncated (payload shorter than header claims)");
    }

    for (const auto& e : a.entries_) {
      std::uint32_t got = crc32_bytes(a.payload_.data() + e.offset,
                                      static_cast<std::size_t>(e.length));
      require(got == e.crc, "crc",
              "checksum mismatch in entry '" + e.name + "' of '" + path.string() + "'");
    }
    return a;
  }

  bool has(const std::string& name) const { return find(name) != nullptr; }

  const std::vector<Entry>& entries() const { return entries_; }

  const Entry& entry(const std::string& name) const {
    const Entry* e = find(name);
    require(e != nullptr, "missing-entry",
            "entry '" + name + "' not found in '" + path_ + "'");
    return *e;
  }

  Tensor<float> f32(const std::string& name) const {
    return typed<float>(name, "f32");
  }
  Tensor<std::uint32_t> u32(const std::string& name) const {
    return typed<std::uint32_t>(name, "u32");
  }
  Tensor<std::uint8_t> u8(const std::string& name) const {
    const Entry& e = entry(name);
    require(e.dtype == "u8" || e.dtype == "bool", "dtype",
            "entry '" + name + "' has dtype " + e.dtype + ", expected u8/bool");
    Tensor<std::uint8_t> t(e.shape);
    std::memcpy(t.data(), payload_.data() + e.offset,
                static_cast<std::size_t>(e.length));
    return t;
  }
  std::string text(const std::string& name) const {
    const Entry& e = entry(name);
    require(e.dtype == "u8", "dtype", "entry '" + name + "' is not text");
    return std::string(reinterpret_cast<const char*>(payload_.data() + e.offset),
                       static_cast<std::size_t>(e.length));
  }

 private:
  template <class T>
  Tensor<T> typed(const std::string& name, const char* dtype) const {
    const Entry& e = entry(name);
    require(e.dtype == dtype, "dtype",
            "entry '" + name + "' has dtype " + e.dtype + ", expected " + dtype);
    Tensor<T> t(e.shape);
    std::memcpy(t.data(), payload_.data() + e.offset,
                static_cast<std::size_t>(e.length));
    return t;
  }

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::string path_;
  std::vector<Entry> entries_;
  std::vector<unsigned char> payload_;
};

}  // namespace horec::container
