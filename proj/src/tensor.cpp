#include "hvp/tensor.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace hvp {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dims must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
}

Tensor Tensor::zeros(std::vector<int> shape) {
  int64_t n = shape_numel(shape);
  Tensor t;
  t.shape = std::move(shape);
  t.data.assign(static_cast<size_t>(n), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t = zeros(std::move(shape));
  t.fill(v);
  return t;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

void Tensor::fill(double v) {
  for (double& x : data) x = v;
}

bool Tensor::all_finite() const {
  for (double x : data) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void round_to_f32(std::vector<double>& data) {
  for (double& x : data) x = static_cast<double>(static_cast<float>(x));
}

namespace {

constexpr char kMagic[4] = {'H', 'V', 'P', 'T'};
constexpr uint8_t kVersion = 1;

void put_u32_le(std::ostream& out, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

uint32_t get_u32_le(std::istream& in, const char* what) {
  unsigned char b[4];
  std::streampos at = in.tellg();
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw FormatError(std::string("truncated tensor stream while reading ") + what + " at offset " +
                      std::to_string(static_cast<long long>(at)));
  }
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void write_hvpt(std::ostream& out, const Tensor& t) {
  if (t.rank() > 255) throw std::invalid_argument("tensor rank exceeds format limit");
  out.write(kMagic, 4);
  char ver = static_cast<char>(kVersion);
  out.write(&ver, 1);
  char rank = static_cast<char>(t.rank());
  out.write(&rank, 1);
  for (int d : t.shape) put_u32_le(out, static_cast<uint32_t>(d));
  for (double x : t.data) put_u32_le(out, std::bit_cast<uint32_t>(static_cast<float>(x)));
  if (!out) throw FormatError("tensor write failed");
}

Tensor read_hvpt(std::istream& in) {
  std::streampos start = in.tellg();
  char magic[4];
  if (!in.read(magic, 4)) {
    throw FormatError("truncated tensor stream while reading magic at offset " +
                      std::to_string(static_cast<long long>(start)));
  }
  if (magic[0] != 'H' || magic[1] != 'V' || magic[2] != 'P' || magic[3] != 'T') {
    throw FormatError("bad tensor magic at offset " + std::to_string(static_cast<long long>(start)));
  }
  char ver = 0, rank = 0;
  if (!in.read(&ver, 1) || !in.read(&rank, 1)) {
    throw FormatError("truncated tensor header at offset " + std::to_string(static_cast<long long>(start)));
  }
  if (static_cast<uint8_t>(ver) != kVersion) {
    throw FormatError("unsupported tensor version " + std::to_string(static_cast<int>(ver)) +
                      " at offset " + std::to_string(static_cast<long long>(start)));
  }
  std::vector<int> shape(static_cast<size_t>(static_cast<uint8_t>(rank)));
  for (int& d : shape) d = static_cast<int>(get_u32_le(in, "dims"));
  int64_t n = shape_numel(shape);
  Tensor t = Tensor::zeros(shape);
  for (int64_t i = 0; i < n; ++i) {
    uint32_t bits = get_u32_le(in, "data");
    t.data[static_cast<size_t>(i)] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return t;
}

void save_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  write_hvpt(out, t);
}

Tensor load_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return read_hvpt(in);
}

}  // namespace hvp
