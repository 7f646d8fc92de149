#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace tsrq {

// Bit-packing for quantized codes. Codes are written little-endian,
// LSB-first: the first code occupies the lowest bits of the first byte.
// Example for bits=2: codes [0,1,2,3] pack into the single byte 0xE4
// (0b11100100). Output is padded with zero bits up to a byte boundary.

int64_t packed_size_bytes(int64_t count, int bits);

// throws DataError if any code is outside [0, 2^bits)
std::vector<uint8_t> pack_codes(std::span<const uint8_t> codes, int bits);

std::vector<uint8_t> unpack_codes(std::span<const uint8_t> bytes, int bits,
                                  int64_t count);

// Row-major matrix layout: each row is packed independently and padded to a
// byte boundary, so rows start byte-aligned.
std::vector<uint8_t> pack_rows(std::span<const uint8_t> codes, int64_t rows,
                               int64_t cols, int bits);
std::vector<uint8_t> unpack_rows(std::span<const uint8_t> bytes, int64_t rows,
                                 int64_t cols, int bits);

}  // namespace tsrq
