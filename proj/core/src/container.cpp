#include "tsrq/container.hpp"

#include <cstdio>
#include <cstring>
#include <memory>

#include "tsrq/errors.hpp"
#include "tsrq/pack.hpp"

namespace tsrq {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_bytes(std::FILE* f, const void* p, size_t n, const char* what) {
  if (std::fwrite(p, 1, n, f) != n) {
    throw IoError(std::string("container: short write (") + what + ")");
  }
}

void read_bytes(std::FILE* f, void* p, size_t n, const char* what) {
  if (std::fread(p, 1, n, f) != n) {
    throw IoError(std::string("container: short read (") + what + ")");
  }
}

// Fixed-width little-endian scalar IO. The byte swap is a no-op on the
// platforms we build for but keeps files portable.
template <typename T>
void write_le(std::FILE* f, T v, const char* what) {
  static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (sizeof(T) > 1) {
    uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof(T));
    for (size_t i = 0; i < sizeof(T); ++i) {
      buf[i] = static_cast<unsigned char>(bits >> (8 * i));
    }
  }
  write_bytes(f, buf, sizeof(T), what);
}

template <typename T>
T read_le(std::FILE* f, const char* what) {
  unsigned char buf[sizeof(T)];
  read_bytes(f, buf, sizeof(T), what);
  uint64_t bits = 0;
  for (size_t i = 0; i < sizeof(T); ++i) {
    bits |= static_cast<uint64_t>(buf[i]) << (8 * i);
  }
  T v;
  std::memcpy(&v, &bits, sizeof(T));
  return v;
}

template <>
void write_le<float>(std::FILE* f, float v, const char* what) {
  uint32_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  write_le<uint32_t>(f, bits, what);
}

template <>
float read_le<float>(std::FILE* f, const char* what) {
  const uint32_t bits = read_le<uint32_t>(f, what);
  float v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

void write_string(std::FILE* f, const std::string& s, const char* what) {
  write_le<uint32_t>(f, static_cast<uint32_t>(s.size()), what);
  write_bytes(f, s.data(), s.size(), what);
}

std::string read_string(std::FILE* f, const char* what) {
  const uint32_t n = read_le<uint32_t>(f, what);
  if (n > (1u << 28)) throw DataError("container: implausible string length");
  std::string s(n, '\0');
  read_bytes(f, s.data(), n, what);
  return s;
}

void write_f32_vec(std::FILE* f, const std::vector<float>& v,
                   const char* what) {
  write_le<uint64_t>(f, v.size(), what);
  for (float x : v) write_le<float>(f, x, what);
}

std::vector<float> read_f32_vec(std::FILE* f, const char* what) {
  const uint64_t n = read_le<uint64_t>(f, what);
  if (n > (uint64_t{1} << 33)) {
    throw DataError("container: implausible tensor length");
  }
  std::vector<float> v(n);
  for (auto& x : v) x = read_le<float>(f, what);
  return v;
}

constexpr uint8_t kDtypeF32 = 0;
constexpr uint8_t kDtypeQuant = 1;

void write_shape(std::FILE* f, const Shape& shape) {
  write_le<uint32_t>(f, static_cast<uint32_t>(shape.size()), "ndim");
  for (int64_t d : shape) write_le<int64_t>(f, d, "dim");
}

Shape read_shape(std::FILE* f) {
  const uint32_t ndim = read_le<uint32_t>(f, "ndim");
  if (ndim > 8) throw DataError("container: implausible rank");
  Shape shape(ndim);
  for (auto& d : shape) {
    d = read_le<int64_t>(f, "dim");
    if (d <= 0) throw DataError("container: non-positive dimension");
  }
  return shape;
}

void write_quant(std::FILE* f, const QuantizedTensor& q) {
  write_shape(f, q.shape);
  write_le<uint8_t>(f, static_cast<uint8_t>(q.spec.bits), "bits");
  write_le<uint8_t>(f, static_cast<uint8_t>(q.spec.granularity), "gran");
  write_le<int64_t>(f, q.spec.group_size, "group_size");
  write_le<float>(f, q.spec.gamma, "gamma");
  write_le<float>(f, q.spec.beta, "beta");
  write_le<uint8_t>(f, static_cast<uint8_t>(q.spec.rounding), "rounding");
  write_le<int64_t>(f, q.params.groups_per_row, "groups_per_row");
  write_le<int64_t>(f, q.params.group_len, "group_len");
  write_f32_vec(f, q.params.scales, "scales");
  write_le<uint64_t>(f, q.params.zeros.size(), "zeros");
  write_bytes(f, q.params.zeros.data(), q.params.zeros.size(), "zeros");
  write_le<uint8_t>(f, q.dst_logits ? 1 : 0, "has_dst");
  if (q.dst_logits) write_f32_vec(f, *q.dst_logits, "dst");
  write_le<uint64_t>(f, q.packed.size(), "packed");
  write_bytes(f, q.packed.data(), q.packed.size(), "packed");
}

QuantizedTensor read_quant(std::FILE* f) {
  QuantizedTensor q;
  q.shape = read_shape(f);
  if (q.shape.size() != 2) throw DataError("container: quant tensor not 2-d");
  q.spec.bits = read_le<uint8_t>(f, "bits");
  const uint8_t gran = read_le<uint8_t>(f, "gran");
  if (gran > static_cast<uint8_t>(Granularity::kPerToken)) {
    throw DataError("container: bad granularity tag");
  }
  q.spec.granularity = static_cast<Granularity>(gran);
  q.spec.group_size = read_le<int64_t>(f, "group_size");
  q.spec.gamma = read_le<float>(f, "gamma");
  q.spec.beta = read_le<float>(f, "beta");
  const uint8_t rr = read_le<uint8_t>(f, "rounding");
  if (rr != static_cast<uint8_t>(RoundingRule::kHalfAwayFromZero)) {
    throw DataError("container: bad rounding tag");
  }
  q.spec.rounding = static_cast<RoundingRule>(rr);
  q.params.groups_per_row = read_le<int64_t>(f, "groups_per_row");
  q.params.group_len = read_le<int64_t>(f, "group_len");
  q.params.scales = read_f32_vec(f, "scales");
  const uint64_t nz = read_le<uint64_t>(f, "zeros");
  if (nz != q.params.scales.size()) {
    throw DataError("container: zeros/scales length mismatch");
  }
  q.params.zeros.resize(nz);
  read_bytes(f, q.params.zeros.data(), nz, "zeros");
  if (read_le<uint8_t>(f, "has_dst") != 0) {
    q.dst_logits = read_f32_vec(f, "dst");
    if (q.dst_logits->size() != q.params.scales.size()) {
      throw DataError("container: dst/scales length mismatch");
    }
  }
  const uint64_t np = read_le<uint64_t>(f, "packed");
  const uint64_t expect =
      static_cast<uint64_t>(q.rows()) *
      packed_size_bytes(q.cols(), q.spec.bits);
  if (np != expect) throw DataError("container: packed size mismatch");
  q.packed.resize(np);
  read_bytes(f, q.packed.data(), np, "packed");
  if (q.params.group_count() !=
      q.rows() * q.params.groups_per_row) {
    throw DataError("container: group count mismatch");
  }
  if (q.params.group_len * q.params.groups_per_row != q.cols()) {
    throw DataError("container: group layout does not cover row");
  }
  return q;
}

}  // namespace

void Container::add(const std::string& name, Tensor t) {
  if (has(name)) throw ArgumentError("container: duplicate tensor " + name);
  entries.emplace_back(name, ContainerEntry{std::move(t)});
}

void Container::add(const std::string& name, QuantizedTensor q) {
  if (has(name)) throw ArgumentError("container: duplicate tensor " + name);
  entries.emplace_back(name, ContainerEntry{std::move(q)});
}

bool Container::has(const std::string& name) const {
  for (const auto& [n, e] : entries) {
    if (n == name) return true;
  }
  return false;
}

const ContainerEntry& Container::at(const std::string& name) const {
  for (const auto& [n, e] : entries) {
    if (n == name) return e;
  }
  throw ArgumentError("container: no tensor named " + name);
}

void save_container(const std::string& path, const Container& c) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("container: cannot open " + path + " for writing");
  write_bytes(f.get(), kContainerMagic, sizeof(kContainerMagic), "magic");
  write_string(f.get(), c.meta_json, "meta");
  write_le<uint32_t>(f.get(), static_cast<uint32_t>(c.entries.size()),
                     "count");
  for (const auto& [name, entry] : c.entries) {
    write_string(f.get(), name, "name");
    if (entry.is_quant()) {
      write_le<uint8_t>(f.get(), kDtypeQuant, "dtype");
      write_quant(f.get(), entry.quant());
    } else {
      write_le<uint8_t>(f.get(), kDtypeF32, "dtype");
      const Tensor& t = entry.tensor();
      write_shape(f.get(), t.shape());
      write_le<uint64_t>(f.get(), static_cast<uint64_t>(t.numel()), "data");
      for (float x : t.cspan()) write_le<float>(f.get(), x, "data");
    }
  }
  if (std::fflush(f.get()) != 0) throw IoError("container: flush failed");
}

Container load_container(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("container: cannot open " + path);
  char magic[sizeof(kContainerMagic)];
  read_bytes(f.get(), magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kContainerMagic, sizeof(magic)) != 0) {
    throw DataError("container: bad magic in " + path);
  }
  Container c;
  c.meta_json = read_string(f.get(), "meta");
  const uint32_t count = read_le<uint32_t>(f.get(), "count");
  if (count > (1u << 20)) throw DataError("container: implausible entry count");
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = read_string(f.get(), "name");
    const uint8_t dtype = read_le<uint8_t>(f.get(), "dtype");
    if (dtype == kDtypeQuant) {
      c.add(name, read_quant(f.get()));
    } else if (dtype == kDtypeF32) {
      Shape shape = read_shape(f.get());
      const uint64_t n = read_le<uint64_t>(f.get(), "data");
      if (n != static_cast<uint64_t>(shape_numel(shape))) {
        throw DataError("container: data length does not match shape");
      }
      Tensor t = Tensor::zeros(shape);
      for (float& x : t.span()) x = read_le<float>(f.get(), "data");
      c.add(name, std::move(t));
    } else {
      throw DataError("container: unknown dtype tag");
    }
  }
  // trailing garbage means a corrupt or truncated-then-padded file
  unsigned char probe;
  if (std::fread(&probe, 1, 1, f.get()) == 1) {
    throw DataError("container: trailing bytes after last tensor");
  }
  return c;
}

}  // namespace tsrq
