#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace phieat {

// One named 2D array in a tensor file. dtype: 0 = float32, 1 = float64,
// 2 = uint8, 3 = int64. Data is row-count x col-count, column-major,
// little-endian raw bytes.
struct NamedArray {
  std::string name;
  int dtype = 0;
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<unsigned char> bytes;
};

// Container format shared by checkpoints and feature archives: a JSON metadata
// string plus named arrays. Round-trips bit-exactly.
struct TensorFile {
  std::string meta_json;
  std::vector<NamedArray> arrays;

  const NamedArray& find(const std::string& name) const;  // io error when absent
  bool has(const std::string& name) const;
};

void write_tensor_file(const std::string& path, const TensorFile& tf);
TensorFile read_tensor_file(const std::string& path);

NamedArray pack_f32(const std::string& name, const std::vector<float>& v, int64_t rows,
                    int64_t cols);
NamedArray pack_f64(const std::string& name, const std::vector<double>& v, int64_t rows,
                    int64_t cols);
NamedArray pack_i64(const std::string& name, const std::vector<int64_t>& v, int64_t rows,
                    int64_t cols);
std::vector<float> unpack_f32(const NamedArray& a);
std::vector<double> unpack_f64(const NamedArray& a);
std::vector<int64_t> unpack_i64(const NamedArray& a);

}  // namespace phieat
