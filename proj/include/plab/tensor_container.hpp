#pragma once

// Generic tensor container: 4-byte magic, u16 version, u32 header length,
// JSON header carrying a tensor directory (name, shape, dtype, byte offset
// relative to the data section), then raw little-endian tensor data.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace plab {

enum class DType : std::uint8_t { F32, F64 };

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  DType dtype = DType::F32;
  std::vector<double> values;  // row-major

  std::size_t element_count() const;
};

struct TensorFile {
  nlohmann::json header = nlohmann::json::object();  // everything except the directory
  std::vector<NamedTensor> tensors;

  const NamedTensor& at(const std::string& name) const;
};

void write_tensor_file(const TensorFile& file, const char (&magic)[5], std::ostream& out);
TensorFile read_tensor_file(std::istream& in, const char (&magic)[5]);

}  // namespace plab
