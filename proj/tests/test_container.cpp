#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "horec/container.hpp"

namespace fs = std::filesystem;
using horec::Tensor;
namespace cont = horec::container;

namespace {

fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "horec_container_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

void spit(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("round trip preserves shapes, dtypes and bytes") {
  Tensor<float> a({2, 3}, {0.5f, -1.0f, 3.25f, 0.0f, 7.5f, -0.125f});
  Tensor<std::uint32_t> b({4}, {0u, 1u, 4294967295u, 42u});
  Tensor<std::uint8_t> m({2, 2}, {1, 0, 0, 1});

  cont::Writer w;
  w.add("verts", a);
  w.add("faces", b);
  w.add("mask", m, /*as_bool=*/true);
  w.add_text("note", "hello");
  auto path = temp_file("roundtrip.bin");
  w.save(path);

  auto arc = cont::Archive::load(path);
  REQUIRE(arc.entries().size() == 4);
  auto a2 = arc.f32("verts");
  REQUIRE(a2.shape() == horec::Shape{2, 3});
  for (int i = 0; i < 6; ++i) REQUIRE(a2[i] == a[i]);
  auto b2 = arc.u32("faces");
  REQUIRE(b2.shape() == horec::Shape{4});
  for (int i = 0; i < 4; ++i) REQUIRE(b2[i] == b[i]);
  auto m2 = arc.u8("mask");
  REQUIRE(arc.entry("mask").dtype == "bool");
  for (int i = 0; i < 4; ++i) REQUIRE(m2[i] == m[i]);
  REQUIRE(arc.text("note") == "hello");
}

TEST_CASE("writing the same content twice produces identical bytes") {
  auto build = [](const fs::path& p) {
    cont::Writer w;
    Tensor<float> t({3}, {1.0f, 2.0f, 3.0f});
    w.add("x", t);
    w.save(p);
  };
  auto p1 = temp_file("det1.bin");
  auto p2 = temp_file("det2.bin");
  build(p1);
  build(p2);
  REQUIRE(slurp(p1) == slurp(p2));
}

TEST_CASE("a corrupted payload byte is reported with the entry name") {
  cont::Writer w;
  Tensor<float> t({4}, {1.0f, 2.0f, 3.0f, 4.0f});
  w.add("sample_000042", t);
  auto path = temp_file("corrupt.bin");
  w.save(path);

  auto bytes = slurp(path);
  bytes.back() = static_cast<char>(bytes.back() ^ 0x40);
  spit(path, bytes);

  try {
    cont::Archive::load(path);
    FAIL("expected a checksum error");
  } catch (const horec::Error& e) {
    REQUIRE(e.category() == "crc");
    REQUIRE(std::string(e.what()).find("sample_000042") != std::string::npos);
  }
}

TEST_CASE("truncated files are rejected with a truncation error") {
  cont::Writer w;
  Tensor<float> t({64}, 1.5f);
  w.add("x", t);
  auto path = temp_file("trunc.bin");
  w.save(path);

  auto bytes = slurp(path);
  SECTION("payload cut short") {
    bytes.resize(bytes.size() - 32);
  }
  SECTION("header cut short") {
    bytes.resize(12);
  }
  spit(path, bytes);
  try {
    cont::Archive::load(path);
    FAIL("expected a truncation error");
  } catch (const horec::Error& e) {
    REQUIRE(e.category() == "truncated");
  }
}

TEST_CASE("format version mismatches are rejected as version errors") {
  cont::Writer w;
  Tensor<float> t({1}, 0.0f);
  w.add("x", t);
  auto path = temp_file("version.bin");
  w.save(path);

  auto bytes = slurp(path);
  std::string s(bytes.begin(), bytes.end());
  auto pos = s.find("\"format_version\":1");
  REQUIRE(pos != std::string::npos);
  s.replace(pos, 18, "\"format_version\":9");
  spit(path, std::vector<char>(s.begin(), s.end()));

  try {
    cont::Archive::load(path);
    FAIL("expected a version error");
  } catch (const horec::Error& e) {
    REQUIRE(e.category() == "version");
  }
}

TEST_CASE("missing entries and dtype mismatches are distinct lookup errors") {
  cont::Writer w;
  Tensor<float> t({2}, {1.0f, 2.0f});
  w.add("x", t);
  auto path = temp_file("lookup.bin");
  w.save(path);
  auto arc = cont::Archive::load(path);

  try {
    arc.f32("y");
    FAIL("expected missing-entry");
  } catch (const horec::Error& e) {
    REQUIRE(e.category() == "missing-entry");
  }
  try {
    arc.u32("x");
    FAIL("expected dtype error");
  } catch (const horec::Error& e) {
    REQUIRE(e.category() == "dtype");
  }
}

TEST_CASE("duplicate entry names are rejected at write time") {
  cont::Writer w;
  Tensor<float> t({1}, 0.0f);
  w.add("x", t);
  REQUIRE_THROWS_AS(w.add("x", t), horec::Error);
}
