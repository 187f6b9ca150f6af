#ifndef HVP_TENSOR_HPP
#define HVP_TENSOR_HPP

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace hvp {

// File / stream content that does not match an expected format.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A structurally valid request that the current configuration cannot satisfy.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Precision { f32, f64 };

// Dense row-major n-dimensional array of reals. Values are stored as doubles;
// in f32 mode the graph rounds every freshly produced tensor through float so
// that 32-bit runs are reproducible bit for bit.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double v);
  static Tensor scalar(double v);

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  void fill(double v);
  bool all_finite() const;
};

int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

void round_to_f32(std::vector<double>& data);
inline double round_to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// Binary tensor format used by corpora and checkpoints:
// magic "HVPT", version byte 1, u8 rank, rank x u32 little-endian dims,
// then product(dims) little-endian 32-bit floats.
void write_hvpt(std::ostream& out, const Tensor& t);
Tensor read_hvpt(std::istream& in);

void save_tensor_file(const std::string& path, const Tensor& t);
Tensor load_tensor_file(const std::string& path);

}  // namespace hvp

#endif
