#include "plab/tensor_container.hpp"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>

#include "plab/binary_io.hpp"

namespace plab {

using nlohmann::json;

namespace {
constexpr std::uint16_t kContainerVersion = 1;

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }
const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }
}  // namespace

std::size_t NamedTensor::element_count() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

const NamedTensor& TensorFile::at(const std::string& name) const {
  auto it = std::find_if(tensors.begin(), tensors.end(), [&](const auto& t) { return t.name == name; });
  if (it == tensors.end()) throw FormatError("missing tensor '" + name + "'");
  return *it;
}

void write_tensor_file(const TensorFile& file, const char (&magic)[5], std::ostream& out) {
  json header = file.header;
  json dir = json::array();
  std::size_t offset = 0;
  for (const auto& t : file.tensors) {
    if (t.values.size() != t.element_count()) {
      throw std::invalid_argument("tensor '" + t.name + "' shape does not match its data");
    }
    dir.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", dtype_name(t.dtype)}, {"offset", offset}});
    offset += t.values.size() * dtype_size(t.dtype);
  }
  header["tensors"] = dir;
  const std::string text = header.dump();

  out.write(magic, 4);
  le::put<std::uint16_t>(out, kContainerVersion);
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  le::put_bytes(out, text);
  for (const auto& t : file.tensors) {
    if (t.dtype == DType::F32) {
      for (double v : t.values) le::put<float>(out, static_cast<float>(v));
    } else {
      for (double v : t.values) le::put<double>(out, v);
    }
  }
  if (!out) throw std::runtime_error("failed writing tensor container");
}

TensorFile read_tensor_file(std::istream& in, const char (&magic)[5]) {
  char got[4] = {};
  in.read(got, 4);
  if (in.gcount() != 4 || !std::equal(got, got + 4, magic)) {
    throw FormatError(std::string("bad magic, expected ") + magic);
  }
  const auto version = le::get<std::uint16_t>(in, "version");
  if (version != kContainerVersion) throw FormatError("unsupported container version " + std::to_string(version));
  const auto len = le::get<std::uint32_t>(in, "header length");
  const std::string text = le::get_bytes(in, len, "header");

  TensorFile file;
  json dir;
  try {
    file.header = json::parse(text);
    dir = file.header.at("tensors");
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad container header: ") + e.what());
  }
  file.header.erase("tensors");

  std::size_t expected_offset = 0;
  for (const auto& entry : dir) {
    NamedTensor t;
    try {
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto dtype = entry.value("dtype", std::string("f32"));
      if (dtype == "f32") t.dtype = DType::F32;
      else if (dtype == "f64") t.dtype = DType::F64;
      else throw FormatError("unknown dtype " + dtype);
      if (entry.at("offset").get<std::size_t>() != expected_offset) {
        throw FormatError("tensor '" + t.name + "' offset is not contiguous");
      }
    } catch (const json::exception& e) {
      throw FormatError(std::string("bad tensor directory: ") + e.what());
    }
    t.values.resize(t.element_count());
    for (auto& v : t.values) {
      v = t.dtype == DType::F32 ? static_cast<double>(le::get<float>(in, "tensor data"))
                                : le::get<double>(in, "tensor data");
    }
    expected_offset += t.values.size() * dtype_size(t.dtype);
    file.tensors.push_back(std::move(t));
  }
  return file;
}

}  // namespace plab
