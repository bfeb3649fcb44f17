#include "motionssm/errors.hpp"
#include "motionssm/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

namespace motionssm {

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kFixedHeader = 12;

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(std::string_view in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t(static_cast<unsigned char>(in[pos + std::size_t(i)])) << (8 * i);
  return v;
}

template <typename T>
T load(const unsigned char* p) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

template <typename T>
void store(unsigned char* p, T v) {
  std::memcpy(p, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(p, p + sizeof(T));
}

Tensor make(Dtype dtype, std::vector<std::uint64_t> dims) {
  Tensor t;
  t.dtype = dtype;
  t.dims = std::move(dims);
  t.payload.resize(t.count() * dtype_size(dtype));
  return t;
}

void set(Tensor& t, std::size_t i, double v) {
  unsigned char* p = t.payload.data() + i * dtype_size(t.dtype);
  switch (t.dtype) {
    case Dtype::F32: store(p, static_cast<float>(v)); break;
    case Dtype::F64: store(p, v); break;
    case Dtype::U8: *p = static_cast<unsigned char>(v); break;
  }
}

void require_float(const Tensor& t, const char* what) {
  if (t.dtype == Dtype::U8) throw ParseError(std::string("MSEQ: ") + what + " must be float32 or float64");
}

void require_dims(const Tensor& t, std::size_t ndim, const char* what) {
  if (t.dims.size() != ndim) {
    throw DimensionError(std::string("MSEQ: ") + what + " needs " + std::to_string(ndim) + " dimensions, got " +
                         std::to_string(t.dims.size()));
  }
}

}  // namespace

std::size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::F32: return 4;
    case Dtype::F64: return 8;
    case Dtype::U8: return 1;
  }
  throw ParseError("MSEQ: unknown dtype");
}

std::size_t Tensor::count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= static_cast<std::size_t>(d);
  return n;
}

double Tensor::at(std::size_t i) const {
  const unsigned char* p = payload.data() + i * dtype_size(dtype);
  switch (dtype) {
    case Dtype::F32: return load<float>(p);
    case Dtype::F64: return load<double>(p);
    case Dtype::U8: return *p;
  }
  return 0;
}

std::string encode_mseq(const Tensor& t) {
  if (t.dims.size() > 255) throw DimensionError("MSEQ: at most 255 dimensions");
  if (t.payload.size() != t.count() * dtype_size(t.dtype)) throw DimensionError("MSEQ: payload size does not match dims");
  std::string out = "MSEQ";
  put_le(out, kVersion, 4);
  put_le(out, static_cast<std::uint8_t>(t.dtype), 1);
  put_le(out, t.dims.size(), 1);
  put_le(out, 0, 2);
  for (auto d : t.dims) put_le(out, d, 8);
  out.append(reinterpret_cast<const char*>(t.payload.data()), t.payload.size());
  return out;
}

Tensor decode_mseq(std::string_view bytes, const std::string& source) {
  const std::string where = "MSEQ " + source + ": ";
  if (bytes.size() < kFixedHeader) throw ParseError(where + "truncated header");
  if (bytes.substr(0, 4) != "MSEQ") throw ParseError(where + "bad magic bytes (not an MSEQ file)");
  if (const auto v = get_le(bytes, 4, 4); v != kVersion) throw ParseError(where + "unsupported version " + std::to_string(v));
  const auto code = get_le(bytes, 8, 1);
  if (code < 1 || code > 3) throw ParseError(where + "unknown dtype code " + std::to_string(code));
  const auto ndim = static_cast<std::size_t>(get_le(bytes, 9, 1));
  if (get_le(bytes, 10, 2) != 0) throw ParseError(where + "reserved field is not zero");
  if (bytes.size() < kFixedHeader + 8 * ndim) throw ParseError(where + "truncated dims");
  Tensor t;
  t.dtype = static_cast<Dtype>(code);
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::uint64_t d = get_le(bytes, kFixedHeader + 8 * i, 8);
    if (d != 0 && count > std::numeric_limits<std::size_t>::max() / d) throw ParseError(where + "dims overflow");
    count *= static_cast<std::size_t>(d);
    t.dims.push_back(d);
  }
  const std::size_t offset = kFixedHeader + 8 * ndim;
  const std::size_t elem = dtype_size(t.dtype);
  if (count > (std::numeric_limits<std::size_t>::max() - offset) / elem || bytes.size() - offset != count * elem) {
    throw ParseError(where + "payload is " + std::to_string(bytes.size() - offset) + " bytes, dims need " +
                     std::to_string(count) + " x " + std::to_string(elem));
  }
  t.payload.assign(bytes.begin() + std::ptrdiff_t(offset), bytes.end());
  return t;
}

void write_mseq(const std::string& path, const Tensor& t) {
  const std::string bytes = encode_mseq(t);
  std::ofstream os(path, std::ios::binary);
  os.write(bytes.data(), std::streamsize(bytes.size()));
  if (!os) throw ParseError("cannot write " + path);
}

Tensor read_mseq(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("MSEQ " + path + ": cannot open file");
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_mseq(bytes, path);
}

Tensor to_tensor(const Eigen::MatrixXd& m, Dtype dtype) {
  Tensor t = make(dtype, {std::uint64_t(m.rows()), std::uint64_t(m.cols())});
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) set(t, k++, m(i, j));
  return t;
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
  require_dims(t, 2, "matrix");
  require_float(t, "matrix");
  Eigen::MatrixXd m(Eigen::Index(t.dims[0]), Eigen::Index(t.dims[1]));
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = t.at(k++);
  return m;
}

Tensor to_tensor(const Image& img, Dtype dtype) {
  Tensor t = make(dtype, {std::uint64_t(img.rows()), std::uint64_t(img.cols())});
  for (Eigen::Index i = 0; i < img.size(); ++i) set(t, std::size_t(i), img.data()[i]);
  return t;
}

Image to_image(const Tensor& t) {
  require_dims(t, 2, "image");
  require_float(t, "image");
  Image img(Eigen::Index(t.dims[0]), Eigen::Index(t.dims[1]));
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = t.at(std::size_t(i));
  return img;
}

Tensor to_tensor(const LabelImage& labels) {
  Tensor t = make(Dtype::U8, {std::uint64_t(labels.rows()), std::uint64_t(labels.cols())});
  std::memcpy(t.payload.data(), labels.data(), t.payload.size());
  return t;
}

LabelImage to_labels(const Tensor& t) {
  require_dims(t, 2, "label image");
  if (t.dtype != Dtype::U8) throw ParseError("MSEQ: label image must be uint8");
  LabelImage l(Eigen::Index(t.dims[0]), Eigen::Index(t.dims[1]));
  std::memcpy(l.data(), t.payload.data(), t.payload.size());
  return l;
}

Tensor to_tensor(const VectorField& f, Dtype dtype) {
  Tensor t = make(dtype, {2, std::uint64_t(f.rows()), std::uint64_t(f.cols())});
  const std::size_t n = std::size_t(f.x.size());
  for (std::size_t i = 0; i < n; ++i) {
    set(t, i, f.x.data()[i]);
    set(t, n + i, f.y.data()[i]);
  }
  return t;
}

VectorField to_field(const Tensor& t) {
  require_dims(t, 3, "vector field");
  require_float(t, "vector field");
  if (t.dims[0] != 2) throw DimensionError("MSEQ: vector field must have shape (2, H, W)");
  VectorField f = VectorField::zero(Eigen::Index(t.dims[1]), Eigen::Index(t.dims[2]));
  const std::size_t n = std::size_t(f.x.size());
  for (std::size_t i = 0; i < n; ++i) {
    f.x.data()[i] = t.at(i);
    f.y.data()[i] = t.at(n + i);
  }
  return f;
}

}  // namespace motionssm
