#include "picnn/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "picnn/error.hpp"

namespace picnn {

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor files are written with native little-endian stores");

template <class T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <class T>
T take(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw IoError("tensor file truncated");
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype) {
  std::vector<std::uint8_t> out{'P', 'T', 'N', 'S'};
  put<std::uint32_t>(out, kTensorFileVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(dtype));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
  for (std::size_t d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) {
    if (dtype == DType::f64) {
      put<double>(out, v);
    } else {
      put<float>(out, static_cast<float>(v));
    }
  }
  return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "PTNS", 4) != 0) {
    throw IoError("not a tensor file (bad magic)");
  }
  std::size_t pos = 4;
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kTensorFileVersion) {
    throw IoError("unsupported tensor file version " + std::to_string(version));
  }
  const auto dtype = static_cast<DType>(take<std::uint32_t>(bytes, pos));
  if (dtype != DType::f64 && dtype != DType::f32) throw IoError("unknown dtype tag");
  const auto ndim = take<std::uint32_t>(bytes, pos);
  Shape shape(ndim);
  for (auto& d : shape) d = take<std::uint32_t>(bytes, pos);
  std::vector<double> data(numel(shape));
  for (double& v : data) {
    v = dtype == DType::f64 ? take<double>(bytes, pos) : static_cast<double>(take<float>(bytes, pos));
  }
  if (pos != bytes.size()) throw IoError("trailing bytes after tensor payload");
  return Tensor::from(std::move(shape), std::move(data));
}

void write_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  const auto bytes = encode_tensor(t, dtype);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return decode_tensor(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace picnn
