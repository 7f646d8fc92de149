#include "tsrq/pack.hpp"

#include <string>

#include "tsrq/errors.hpp"

namespace tsrq {

namespace {

void check_bits(int bits) {
  if (bits < 1 || bits > 8) {
    throw ArgumentError("pack: bits must be in [1,8], got " +
                        std::to_string(bits));
  }
}

}  // namespace

int64_t packed_size_bytes(int64_t count, int bits) {
  check_bits(bits);
  return (count * bits + 7) / 8;
}

std::vector<uint8_t> pack_codes(std::span<const uint8_t> codes, int bits) {
  check_bits(bits);
  const uint32_t limit = 1u << bits;
  std::vector<uint8_t> out(static_cast<size_t>(
      packed_size_bytes(static_cast<int64_t>(codes.size()), bits)));
  int64_t bitpos = 0;
  for (uint8_t code : codes) {
    if (code >= limit) {
      throw DataError("pack_codes: code " + std::to_string(code) +
                      " does not fit in " + std::to_string(bits) + " bits");
    }
    const int64_t byte = bitpos >> 3;
    const int shift = static_cast<int>(bitpos & 7);
    out[static_cast<size_t>(byte)] |= static_cast<uint8_t>(code << shift);
    if (shift + bits > 8) {
      out[static_cast<size_t>(byte + 1)] |=
          static_cast<uint8_t>(code >> (8 - shift));
    }
    bitpos += bits;
  }
  return out;
}

std::vector<uint8_t> unpack_codes(std::span<const uint8_t> bytes, int bits,
                                  int64_t count) {
  check_bits(bits);
  if (static_cast<int64_t>(bytes.size()) < packed_size_bytes(count, bits)) {
    throw DataError("unpack_codes: buffer too small for " +
                    std::to_string(count) + " codes");
  }
  std::vector<uint8_t> out(static_cast<size_t>(count));
  const uint32_t mask = (1u << bits) - 1;
  int64_t bitpos = 0;
  for (int64_t i = 0; i < count; ++i) {
    const int64_t byte = bitpos >> 3;
    const int shift = static_cast<int>(bitpos & 7);
    uint32_t v = bytes[static_cast<size_t>(byte)] >> shift;
    if (shift + bits > 8) {
      v |= static_cast<uint32_t>(bytes[static_cast<size_t>(byte + 1)])
           << (8 - shift);
    }
    out[static_cast<size_t>(i)] = static_cast<uint8_t>(v & mask);
    bitpos += bits;
  }
  return out;
}

std::vector<uint8_t> pack_rows(std::span<const uint8_t> codes, int64_t rows,
                               int64_t cols, int bits) {
  if (static_cast<int64_t>(codes.size()) != rows * cols) {
    throw DimensionError("pack_rows: code count does not match rows*cols");
  }
  const int64_t row_bytes = packed_size_bytes(cols, bits);
  std::vector<uint8_t> out;
  out.reserve(static_cast<size_t>(row_bytes * rows));
  for (int64_t r = 0; r < rows; ++r) {
    auto packed = pack_codes(codes.subspan(static_cast<size_t>(r * cols),
                                           static_cast<size_t>(cols)),
                             bits);
    out.insert(out.end(), packed.begin(), packed.end());
  }
  return out;
}

std::vector<uint8_t> unpack_rows(std::span<const uint8_t> bytes, int64_t rows,
                                 int64_t cols, int bits) {
  const int64_t row_bytes = packed_size_bytes(cols, bits);
  if (static_cast<int64_t>(bytes.size()) < row_bytes * rows) {
    throw DataError("unpack_rows: buffer too small");
  }
  std::vector<uint8_t> out;
  out.reserve(static_cast<size_t>(rows * cols));
  for (int64_t r = 0; r < rows; ++r) {
    auto row = unpack_codes(bytes.subspan(static_cast<size_t>(r * row_bytes),
                                          static_cast<size_t>(row_bytes)),
                            bits, cols);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

}  // namespace tsrq
