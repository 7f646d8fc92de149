#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tsrq/container.hpp"
#include "tsrq/errors.hpp"
#include "tsrq/pack.hpp"
#include "tsrq/quant.hpp"
#include "tsrq/rng.hpp"

using namespace tsrq;

namespace {

std::filesystem::path temp_file(const std::string& tag) {
  return std::filesystem::temp_directory_path() /
         ("tsrq_test_" + tag + "_" + std::to_string(::getpid()) + ".bin");
}

struct FileGuard {
  std::filesystem::path p;
  explicit FileGuard(std::filesystem::path path) : p(std::move(path)) {}
  ~FileGuard() { std::filesystem::remove(p); }
};

Tensor randn(Rng& rng, Shape shape) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.span()) v = static_cast<float>(rng.normal());
  return t;
}

}  // namespace

TEST_CASE("two-bit packing matches the worked byte") {
  const std::vector<uint8_t> codes = {0, 1, 2, 3};
  const auto bytes = pack_codes(codes, 2);
  REQUIRE(bytes.size() == 1);
  CHECK(bytes[0] == 0xE4);
  CHECK(unpack_codes(bytes, 2, 4) == codes);
}

TEST_CASE("packing pads to a byte boundary with zero bits") {
  const std::vector<uint8_t> codes = {3, 3, 3};
  const auto bytes = pack_codes(codes, 2);
  REQUIRE(bytes.size() == 1);
  CHECK(bytes[0] == 0x3F);
  CHECK(packed_size_bytes(3, 2) == 1);
  CHECK(packed_size_bytes(5, 2) == 2);
  CHECK(packed_size_bytes(3, 3) == 2);
  CHECK(packed_size_bytes(0, 8) == 0);
}

TEST_CASE("pack and unpack are inverse for every bit width") {
  for (int bits = 2; bits <= 8; ++bits) {
    Rng rng(static_cast<uint64_t>(bits));
    std::vector<uint8_t> codes(57);
    for (auto& c : codes) {
      c = static_cast<uint8_t>(rng.uniform_int(int64_t{1} << bits));
    }
    const auto bytes = pack_codes(codes, bits);
    CHECK(static_cast<int64_t>(bytes.size()) ==
          packed_size_bytes(57, bits));
    CHECK(unpack_codes(bytes, bits, 57) == codes);
  }
}

TEST_CASE("rows pack independently and start byte-aligned") {
  // 3 codes of 2 bits per row: one byte per row, second row recognizable
  const std::vector<uint8_t> codes = {1, 2, 3, 3, 2, 1};
  const auto bytes = pack_rows(codes, 2, 3, 2);
  REQUIRE(bytes.size() == 2);
  CHECK(bytes[0] == (1 | (2 << 2) | (3 << 4)));
  CHECK(bytes[1] == (3 | (2 << 2) | (1 << 4)));
  CHECK(unpack_rows(bytes, 2, 3, 2) == codes);
}

TEST_CASE("out-of-range codes are rejected") {
  const std::vector<uint8_t> codes = {4};
  CHECK_THROWS_AS(pack_codes(codes, 2), DataError);
}

TEST_CASE("container round trip preserves tensors, order, and metadata") {
  Rng rng(42);
  Container c;
  c.meta_json = "{\"note\":\"round trip\"}";
  c.add("alpha", randn(rng, {3, 5}));
  c.add("gamma", randn(rng, {2, 2}));

  QuantSpec spec;
  spec.bits = 3;
  spec.granularity = Granularity::kPerGroup;
  spec.group_size = 4;
  Tensor w = randn(rng, {4, 8});
  QuantizedTensor q = quantize_rtn(w, spec);
  q.dst_logits = std::vector<float>(
      static_cast<size_t>(q.params.group_count()), 0.25f);
  c.add("beta", q);

  QuantizedTensor plain = quantize_rtn(randn(rng, {2, 8}), QuantSpec{});
  c.add("delta", plain);

  FileGuard fg(temp_file("roundtrip"));
  save_container(fg.p.string(), c);
  Container d = load_container(fg.p.string());

  CHECK(d.meta_json == c.meta_json);
  REQUIRE(d.entries.size() == 4);
  CHECK(d.entries[0].first == "alpha");
  CHECK(d.entries[1].first == "gamma");
  CHECK(d.entries[2].first == "beta");
  CHECK(d.entries[3].first == "delta");

  const Tensor& a0 = c.entries[0].second.tensor();
  const Tensor& a1 = d.entries[0].second.tensor();
  REQUIRE(a1.shape() == a0.shape());
  for (int64_t i = 0; i < a0.numel(); ++i) CHECK(a1.at(i) == a0.at(i));

  const QuantizedTensor& qb = d.at("beta").quant();
  CHECK(qb.spec.bits == 3);
  CHECK(qb.spec.granularity == Granularity::kPerGroup);
  CHECK(qb.spec.group_size == 4);
  CHECK(qb.shape == q.shape);
  CHECK(qb.packed == q.packed);
  CHECK(qb.params.scales == q.params.scales);
  CHECK(qb.params.zeros == q.params.zeros);
  REQUIRE(qb.dst_logits.has_value());
  CHECK(*qb.dst_logits == *q.dst_logits);

  CHECK_FALSE(d.at("delta").quant().dst_logits.has_value());
}

TEST_CASE("duplicate names are rejected") {
  Container c;
  c.add("x", Tensor::zeros({1, 1}));
  CHECK_THROWS_AS(c.add("x", Tensor::zeros({1, 1})), ArgumentError);
  CHECK_THROWS_AS(c.at("missing"), ArgumentError);
}

TEST_CASE("bad magic is rejected") {
  FileGuard fg(temp_file("badmagic"));
  {
    std::ofstream f(fg.p, std::ios::binary);
    f << "XSRQ1" << std::string(64, '\0');
  }
  CHECK_THROWS_AS(load_container(fg.p.string()), DataError);
}

TEST_CASE("trailing bytes are rejected") {
  Container c;
  c.add("x", Tensor::full({1, 2}, 1.5f));
  FileGuard fg(temp_file("trailing"));
  save_container(fg.p.string(), c);
  {
    std::ofstream f(fg.p, std::ios::binary | std::ios::app);
    f << "zz";
  }
  CHECK_THROWS_AS(load_container(fg.p.string()), DataError);
}

TEST_CASE("truncated files are rejected") {
  Container c;
  Rng rng(7);
  c.add("x", randn(rng, {8, 8}));
  FileGuard fg(temp_file("trunc"));
  save_container(fg.p.string(), c);
  const auto full = std::filesystem::file_size(fg.p);
  std::filesystem::resize_file(fg.p, full - 17);
  CHECK_THROWS(load_container(fg.p.string()));
}

TEST_CASE("missing file raises an io error") {
  CHECK_THROWS_AS(load_container("/nonexistent/dir/x.tsrq"), IoError);
}
