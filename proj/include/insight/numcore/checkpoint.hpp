#pragma once

// Checkpoint file layout (all integers little-endian u32):
//   "IMCK" | count | count x { name_len | name bytes | rows | cols | rows*cols f64 }

#include <string>
#include <vector>

#include "insight/binary_io.hpp"
#include "insight/numcore/tensor.hpp"

namespace insight {

struct NamedTensor {
  std::string name;
  Tensor2 value;

  friend bool operator==(const NamedTensor& a, const NamedTensor& b) {
    return a.name == b.name && a.value.rows() == b.value.rows() && a.value.cols() == b.value.cols() &&
           a.value == b.value;
  }
};

inline std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out = "IMCK";
  binio::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    binio::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    binio::put_u32(out, static_cast<std::uint32_t>(t.value.rows()));
    binio::put_u32(out, static_cast<std::uint32_t>(t.value.cols()));
    for (Eigen::Index k = 0; k < t.value.size(); ++k) binio::put_f64(out, t.value.data()[k]);
  }
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(std::string_view bytes, const std::string& context = "checkpoint") {
  binio::Reader rd(bytes, context);
  if (rd.take(4, "magic") != "IMCK") throw ParseError(context + ": bad magic, expected IMCK", 0);
  const auto count = rd.u32("tensor count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = rd.u32("name length");
    t.name = std::string(rd.take(len, "name"));
    const auto rows = rd.u32("rows");
    const auto cols = rd.u32("cols");
    t.value.resize(rows, cols);
    for (Eigen::Index k = 0; k < t.value.size(); ++k) t.value.data()[k] = rd.f64("tensor data");
    out.push_back(std::move(t));
  }
  if (!rd.at_end()) throw ParseError(context + ": trailing bytes after last tensor", rd.offset());
  return out;
}

inline void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  binio::write_file(path, encode_checkpoint(tensors));
}

inline std::vector<NamedTensor> read_checkpoint(const std::string& path) {
  return decode_checkpoint(binio::read_file(path), path);
}

}  // namespace insight
