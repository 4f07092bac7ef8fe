#include "iekd/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace iekd {

static_assert(std::endian::native == std::endian::little,
              "serialized tensor layout assumes a little-endian host");

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

static void validate_shape(const Shape& s) {
  require(!s.empty(), ErrorKind::ShapeMismatch, "rank must be >= 1");
  for (auto e : s)
    require(e > 0, ErrorKind::ShapeMismatch, "zero or negative extent in shape " + shape_str(s));
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  validate_shape(shape);
  require(static_cast<std::int64_t>(data.size()) == shape_numel(shape), ErrorKind::ShapeMismatch,
          "data length does not match shape " + shape_str(shape));
}

Tensor Tensor::zeros(Shape s) {
  validate_shape(s);
  const auto n = static_cast<std::size_t>(shape_numel(s));
  return Tensor(std::move(s), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape s, double value) {
  validate_shape(s);
  const auto n = static_cast<std::size_t>(shape_numel(s));
  return Tensor(std::move(s), std::vector<double>(n, value));
}

Tensor Tensor::randn(Shape s, Rng& rng, double stddev) {
  Tensor t = zeros(std::move(s));
  for (auto& v : t.data) v = stddev * rng.normal();
  return t;
}

Tensor Tensor::kaiming_uniform(Shape s, std::int64_t fan_in, Rng& rng, double a) {
  const double gain = std::sqrt(2.0 / (1.0 + a * a));
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  Tensor t = zeros(std::move(s));
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

double Tensor::scalar_value() const {
  require(is_scalar(), ErrorKind::ShapeMismatch, "expected scalar, got " + shape_str(shape));
  return data[0];
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

Tensor Tensor::reshaped(Shape s) const {
  require(shape_numel(s) == numel(), ErrorKind::ShapeMismatch,
          "reshape " + shape_str(shape) + " -> " + shape_str(s) + " changes element count");
  return Tensor(std::move(s), data);
}

namespace {

constexpr char kMagic[4] = {'I', 'E', 'K', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  require(static_cast<bool>(in), ErrorKind::MalformedFile, "truncated tensor stream");
  return v;
}

}  // namespace

void save_tensor(std::ostream& out, const Tensor& t) {
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape) write_pod(out, e);
  out.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  require(static_cast<bool>(out), ErrorKind::IoError, "tensor write failed");
}

Tensor load_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  require(static_cast<bool>(in) && std::memcmp(magic, kMagic, 4) == 0, ErrorKind::MalformedFile,
          "bad tensor magic");
  const auto version = read_pod<std::uint32_t>(in);
  require(version == kVersion, ErrorKind::MalformedFile, "unsupported tensor version");
  const auto rank = read_pod<std::uint32_t>(in);
  require(rank >= 1 && rank <= 8, ErrorKind::MalformedFile, "implausible tensor rank");
  Shape shape(rank);
  for (auto& e : shape) {
    e = read_pod<std::int64_t>(in);
    require(e > 0, ErrorKind::MalformedFile, "non-positive extent");
  }
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<double> data(n);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
  require(static_cast<bool>(in), ErrorKind::MalformedFile, "truncated tensor payload");
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor_file(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  require(out.is_open(), ErrorKind::IoError, "cannot open " + path + " for writing");
  save_tensor(out, t);
}

Tensor load_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.is_open(), ErrorKind::IoError, "cannot open " + path);
  return load_tensor(in);
}

}  // namespace iekd
