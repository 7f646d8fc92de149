#pragma once

// Binary container for model checkpoints. A file holds a JSON metadata
// blob plus a list of named tensors, each stored either as raw f32 or as
// a quantized record (packed codes + per-group scales/zeros and the
// optional per-group dequant factor logits). All integers little-endian.

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "tsrq/quant.hpp"
#include "tsrq/tensor.hpp"

namespace tsrq {

inline constexpr char kContainerMagic[5] = {'T', 'S', 'R', 'Q', '1'};

struct ContainerEntry {
  std::variant<Tensor, QuantizedTensor> value;

  bool is_quant() const {
    return std::holds_alternative<QuantizedTensor>(value);
  }
  const Tensor& tensor() const { return std::get<Tensor>(value); }
  const QuantizedTensor& quant() const {
    return std::get<QuantizedTensor>(value);
  }
};

struct Container {
  std::string meta_json;  // free-form metadata (model config, run info)
  // insertion order preserved; names must be unique
  std::vector<std::pair<std::string, ContainerEntry>> entries;

  void add(const std::string& name, Tensor t);
  void add(const std::string& name, QuantizedTensor q);
  bool has(const std::string& name) const;
  const ContainerEntry& at(const std::string& name) const;
};

void save_container(const std::string& path, const Container& c);
Container load_container(const std::string& path);

}  // namespace tsrq
