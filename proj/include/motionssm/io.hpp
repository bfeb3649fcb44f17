#pragma once

/// @file io.hpp MSEQ tensor files, lgssm-params text files, CSV reports
///
/// MSEQ layout (all little-endian):
///   "MSEQ" | u32 version = 1 | u8 dtype (1 f32, 2 f64, 3 u8) | u8 ndim |
///   u16 reserved = 0 | ndim x u64 dims | row-major payload

#include "motionssm/lgssm.hpp"
#include "motionssm/svf.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace motionssm {

enum class Dtype : std::uint8_t { F32 = 1, F64 = 2, U8 = 3 };

std::size_t dtype_size(Dtype d);

struct Tensor {
  Dtype dtype = Dtype::F64;
  std::vector<std::uint64_t> dims;
  std::vector<unsigned char> payload;  ///< little-endian, row-major

  std::size_t count() const;
  /// Element i converted to double.
  double at(std::size_t i) const;
  bool operator==(const Tensor&) const = default;
};

std::string encode_mseq(const Tensor& t);
/// `source` names the input in error messages.
Tensor decode_mseq(std::string_view bytes, const std::string& source = "input");
void write_mseq(const std::string& path, const Tensor& t);
Tensor read_mseq(const std::string& path);

/// 2-D tensor <-> matrix. Reading accepts f32 and f64.
Tensor to_tensor(const Eigen::MatrixXd& m, Dtype dtype = Dtype::F64);
Eigen::MatrixXd to_matrix(const Tensor& t);

Tensor to_tensor(const Image& img, Dtype dtype = Dtype::F64);
Image to_image(const Tensor& t);
Tensor to_tensor(const LabelImage& labels);
LabelImage to_labels(const Tensor& t);

/// Vector fields are stored as (2, H, W): the x plane, then the y plane.
Tensor to_tensor(const VectorField& f, Dtype dtype = Dtype::F64);
VectorField to_field(const Tensor& t);

/// "lgssm-params v1" text format, 17 significant digits.
void write_params(std::ostream& os, const LgssmParams<double>& p);
LgssmParams<double> read_params(std::istream& is, const std::string& source = "input");
void write_params(const std::string& path, const LgssmParams<double>& p);
LgssmParams<double> read_params(const std::string& path);

/// Shortest text that parses back to the same double ("%.17g").
std::string format_double(double v);

/// Comma-separated file with a header row.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  /// Cells are written as given; numbers should go through format_double.
  void row(const std::vector<std::string>& cells);

 private:
  struct Impl;
  Impl* impl_;
  std::size_t width_;
};

/// Parsed CSV: header plus string cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
};
CsvTable read_csv(const std::string& path);

}  // namespace motionssm
