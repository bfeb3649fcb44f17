#include "motionssm/errors.hpp"
#include "motionssm/io.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace motionssm {

namespace {

constexpr const char* kHeader = "lgssm-params v1";
constexpr std::array<const char*, 6> kKeys = {"A", "Q", "C", "R", "mu0", "Sigma0"};

std::string strip_comment(const std::string& line) {
  std::string s = line.substr(0, line.find('#'));
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

double parse_double(const std::string& tok, const std::string& where) {
  double v = 0;
  const char* end = tok.data() + tok.size();
  const auto res = std::from_chars(tok.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) throw ParseError(where + ": '" + tok + "' is not a number");
  if (!std::isfinite(v)) throw ParseError(where + ": non-finite value '" + tok + "'");
  return v;
}

long parse_dim(const std::string& tok, const std::string& where) {
  long v = 0;
  const char* end = tok.data() + tok.size();
  const auto res = std::from_chars(tok.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end || v < 0) throw ParseError(where + ": bad dimension '" + tok + "'");
  return v;
}

void write_block(std::ostream& os, const char* key, const Eigen::MatrixXd& m) {
  os << key << '\n' << m.rows() << ' ' << m.cols() << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? " " : "") << format_double(m(i, j));
    os << '\n';
  }
}

std::string csv_escape(const std::string& cell) {
  if (cell.find_first_of(",\"\n") == std::string::npos) return cell;
  std::string out = "\"";
  for (char c : cell) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_params(std::ostream& os, const LgssmParams<double>& p) {
  p.check_dimensions();
  os << kHeader << '\n';
  write_block(os, "A", p.A);
  write_block(os, "Q", p.Q);
  write_block(os, "C", p.C);
  write_block(os, "R", p.R);
  write_block(os, "mu0", p.mu0);
  write_block(os, "Sigma0", p.Sigma0);
}

LgssmParams<double> read_params(std::istream& is, const std::string& source) {
  // meaningful lines only, with their line numbers
  std::vector<std::pair<int, std::string>> lines;
  int number = 0;
  for (std::string line; std::getline(is, line);) {
    ++number;
    std::string s = strip_comment(line);
    if (!s.empty()) lines.emplace_back(number, std::move(s));
  }
  auto where = [&](std::size_t k) {
    return source + ":" + std::to_string(k < lines.size() ? lines[k].first : number);
  };
  if (lines.empty() || lines[0].second != kHeader) {
    throw ParseError(source + ": missing header line '" + std::string(kHeader) + "'");
  }
  std::map<std::string, Eigen::MatrixXd> blocks;
  std::size_t k = 1;
  while (k < lines.size()) {
    const std::string key = lines[k].second;
    bool known = false;
    for (const char* name : kKeys) known = known || key == name;
    if (!known) throw ParseError(where(k) + ": unknown key '" + key + "'");
    if (blocks.count(key)) throw ParseError(where(k) + ": duplicate key '" + key + "'");
    ++k;
    if (k >= lines.size()) throw ParseError(where(k) + ": block '" + key + "' has no dimension line");
    const auto dims = split_ws(lines[k].second);
    if (dims.size() != 2) throw ParseError(where(k) + ": expected 'rows cols' for block '" + key + "'");
    const long rows = parse_dim(dims[0], where(k)), cols = parse_dim(dims[1], where(k));
    ++k;
    Eigen::MatrixXd m(rows, cols);
    for (long i = 0; i < rows; ++i, ++k) {
      if (k >= lines.size()) throw ParseError(where(k) + ": block '" + key + "' ends after " + std::to_string(i) + " rows");
      const auto toks = split_ws(lines[k].second);
      if (long(toks.size()) != cols) {
        throw ParseError(where(k) + ": block '" + key + "' row has " + std::to_string(toks.size()) + " values, expected " +
                         std::to_string(cols));
      }
      for (long j = 0; j < cols; ++j) m(i, j) = parse_double(toks[std::size_t(j)], where(k));
    }
    blocks.emplace(key, std::move(m));
  }
  for (const char* name : kKeys)
    if (!blocks.count(name)) throw ParseError(source + ": missing block '" + std::string(name) + "'");
  const Eigen::MatrixXd& mu0 = blocks["mu0"];
  if (mu0.cols() != 1) throw ParseError(source + ": mu0 must be a column (rows x 1)");
  LgssmParams<double> p{blocks["A"], blocks["Q"], blocks["C"], blocks["R"], mu0.col(0), blocks["Sigma0"]};
  try {
    p.check_dimensions();
  } catch (const DimensionError& e) {
    throw ParseError(source + ": " + e.what());
  }
  return p;
}

void write_params(const std::string& path, const LgssmParams<double>& p) {
  std::ofstream os(path);
  write_params(os, p);
  if (!os) throw ParseError("cannot write " + path);
}

LgssmParams<double> read_params(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError(path + ": cannot open parameter file");
  return read_params(is, path);
}

struct CsvWriter::Impl {
  std::ofstream os;
  std::string path;
};

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : impl_(new Impl{std::ofstream(path), path}), width_(header.size()) {
  if (!impl_->os) {
    delete impl_;
    throw ParseError("cannot write " + path);
  }
  row(header);
}

CsvWriter::~CsvWriter() { delete impl_; }

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != width_) throw DimensionError("csv: row width differs from header in " + impl_->path);
  for (std::size_t i = 0; i < cells.size(); ++i) impl_->os << (i ? "," : "") << csv_escape(cells[i]);
  impl_->os << '\n';
  if (!impl_->os) throw ParseError("cannot write " + impl_->path);
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  throw ParseError("csv: no column '" + name + "'");
}

CsvTable read_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError(path + ": cannot open CSV file");
  CsvTable t;
  bool first = true;
  for (std::string line; std::getline(is, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> cells;
    std::string cell;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          cell += '"';
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          cell += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        cells.push_back(std::move(cell));
        cell.clear();
      } else {
        cell += c;
      }
    }
    cells.push_back(std::move(cell));
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      if (cells.size() != t.header.size()) throw ParseError(path + ": row width differs from header");
      t.rows.push_back(std::move(cells));
    }
  }
  return t;
}

}  // namespace motionssm
