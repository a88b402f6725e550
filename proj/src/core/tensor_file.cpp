#include "phieat/core/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "phieat/core/errors.hpp"

namespace phieat {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts are unsupported");

namespace {

constexpr char kMagic[8] = {'P', 'H', 'I', 'E', 'A', 'T', 'T', 'F'};
constexpr uint32_t kVersion = 1;

size_t dtype_size(int dtype) {
  switch (dtype) {
    case 0: return 4;
    case 1: return 8;
    case 2: return 1;
    case 3: return 8;
  }
  fail(ErrorKind::io, "unknown tensor dtype " + std::to_string(dtype));
}

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

const NamedArray& TensorFile::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  fail(ErrorKind::io, "tensor file has no array named '" + name + "'");
}

bool TensorFile::has(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return true;
  return false;
}

void write_tensor_file(const std::string& path, const TensorFile& tf) {
  std::ofstream out(path, std::ios::binary);
  require(bool(out), ErrorKind::io, "cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic));
  put<uint32_t>(out, kVersion);
  put<uint32_t>(out, 0);
  put<uint64_t>(out, tf.meta_json.size());
  out.write(tf.meta_json.data(), std::streamsize(tf.meta_json.size()));
  put<uint32_t>(out, uint32_t(tf.arrays.size()));
  for (const auto& a : tf.arrays) {
    require(a.bytes.size() == size_t(a.rows) * size_t(a.cols) * dtype_size(a.dtype),
            ErrorKind::shape, "array '" + a.name + "' byte count disagrees with its shape");
    put<uint16_t>(out, uint16_t(a.name.size()));
    out.write(a.name.data(), std::streamsize(a.name.size()));
    put<uint8_t>(out, uint8_t(a.dtype));
    put<uint8_t>(out, 0);
    put<int64_t>(out, a.rows);
    put<int64_t>(out, a.cols);
    out.write(reinterpret_cast<const char*>(a.bytes.data()), std::streamsize(a.bytes.size()));
  }
  require(bool(out), ErrorKind::io, "short write to " + path);
}

TensorFile read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorKind::io, "cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  require(bool(in) && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0, ErrorKind::io,
          path + " is not a tensor file");
  uint32_t version = take<uint32_t>(in);
  require(version == kVersion, ErrorKind::io,
          path + " has unsupported format version " + std::to_string(version));
  take<uint32_t>(in);

  TensorFile tf;
  uint64_t meta_len = take<uint64_t>(in);
  tf.meta_json.resize(meta_len);
  in.read(tf.meta_json.data(), std::streamsize(meta_len));
  uint32_t count = take<uint32_t>(in);
  for (uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    uint16_t name_len = take<uint16_t>(in);
    a.name.resize(name_len);
    in.read(a.name.data(), name_len);
    a.dtype = take<uint8_t>(in);
    take<uint8_t>(in);
    a.rows = take<int64_t>(in);
    a.cols = take<int64_t>(in);
    require(a.rows >= 0 && a.cols >= 0, ErrorKind::io, path + " has a negative array shape");
    a.bytes.resize(size_t(a.rows) * size_t(a.cols) * dtype_size(a.dtype));
    in.read(reinterpret_cast<char*>(a.bytes.data()), std::streamsize(a.bytes.size()));
    require(bool(in), ErrorKind::io, path + " ends mid-array");
    tf.arrays.push_back(std::move(a));
  }
  return tf;
}

namespace {

template <typename T>
NamedArray pack(const std::string& name, int dtype, const std::vector<T>& v, int64_t rows,
                int64_t cols) {
  require(v.size() == size_t(rows) * size_t(cols), ErrorKind::shape,
          "pack '" + name + "': element count disagrees with shape");
  NamedArray a;
  a.name = name;
  a.dtype = dtype;
  a.rows = rows;
  a.cols = cols;
  a.bytes.resize(v.size() * sizeof(T));
  std::memcpy(a.bytes.data(), v.data(), a.bytes.size());
  return a;
}

template <typename T>
std::vector<T> unpack(const NamedArray& a, int dtype) {
  require(a.dtype == dtype, ErrorKind::io, "array '" + a.name + "' has unexpected dtype");
  std::vector<T> v(size_t(a.rows) * size_t(a.cols));
  std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
  return v;
}

}  // namespace

NamedArray pack_f32(const std::string& name, const std::vector<float>& v, int64_t rows,
                    int64_t cols) {
  return pack(name, 0, v, rows, cols);
}
NamedArray pack_f64(const std::string& name, const std::vector<double>& v, int64_t rows,
                    int64_t cols) {
  return pack(name, 1, v, rows, cols);
}
NamedArray pack_i64(const std::string& name, const std::vector<int64_t>& v, int64_t rows,
                    int64_t cols) {
  return pack(name, 3, v, rows, cols);
}
std::vector<float> unpack_f32(const NamedArray& a) { return unpack<float>(a, 0); }
std::vector<double> unpack_f64(const NamedArray& a) { return unpack<double>(a, 1); }
std::vector<int64_t> unpack_i64(const NamedArray& a) { return unpack<int64_t>(a, 3); }

}  // namespace phieat
