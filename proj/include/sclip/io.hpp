#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sclip/error.hpp"
#include "sclip/matrix.hpp"

namespace sclip {

// All binary formats are little-endian with u32 headers. Encoding goes via
// explicit byte shifts so files are identical regardless of host endianness.

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    buf_.append(c, n);
  }
  void magic(std::string_view m) { buf_.append(m); }
  void u32(std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    buf_.append(b, 4);
  }
  void u64(std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    buf_.append(b, 8);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  void matrix(const Matrix& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    for (double v : m.storage()) f64(v);
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  void expect_magic(std::string_view m) {
    if (data_.size() - pos_ < m.size() || data_.substr(pos_, m.size()) != m) {
      throw Error(Errc::bad_magic, "expected magic '" + std::string(m) + "'");
    }
    pos_ += m.size();
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  Matrix matrix() {
    const std::uint32_t rows = u32();
    const std::uint32_t cols = u32();
    need(static_cast<std::size_t>(rows) * cols * 8);
    Matrix m(rows, cols);
    for (double& v : m.storage()) v = f64();
    return m;
  }
  bool at_end() const { return pos_ == data_.size(); }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) {
    if (data_.size() - pos_ < n) {
      throw Error(Errc::parse_error,
                  "truncated input at offset " + std::to_string(pos_), pos_);
    }
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(Errc::io_error, "cannot open '" + path + "' for reading");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

/// Write through a temp file in the same directory, then rename into place.
inline void atomic_write_file(const std::string& path, std::string_view contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw Error(Errc::io_error, "cannot open '" + tmp + "' for writing");
    }
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) {
      throw Error(Errc::io_error, "write failed for '" + tmp + "'");
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw Error(Errc::io_error, "rename failed for '" + path + "'");
  }
}

// ---- CSV matrices (no header, rectangular) ----

inline Matrix parse_csv_matrix(std::string_view text) {
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    ++line_no;
    if (!line.empty()) {
      std::vector<double> row;
      std::size_t field_start = 0;
      while (field_start <= line.size()) {
        std::size_t comma = line.find(',', field_start);
        if (comma == std::string_view::npos) comma = line.size();
        const std::string field(line.substr(field_start, comma - field_start));
        try {
          std::size_t used = 0;
          row.push_back(std::stod(field, &used));
          while (used < field.size() && std::isspace(static_cast<unsigned char>(field[used]))) {
            ++used;
          }
          if (used != field.size()) throw std::invalid_argument(field);
        } catch (const std::exception&) {
          throw Error(Errc::parse_error,
                      "line " + std::to_string(line_no) + ": bad number '" + field + "'",
                      line_no);
        }
        field_start = comma + 1;
        if (comma == line.size()) break;
      }
      if (!rows.empty() && row.size() != rows.front().size()) {
        throw Error(Errc::parse_error,
                    "line " + std::to_string(line_no) + ": expected " +
                        std::to_string(rows.front().size()) + " fields, got " +
                        std::to_string(row.size()),
                    line_no);
      }
      rows.push_back(std::move(row));
    }
    start = end + 1;
    if (end == text.size()) break;
  }
  if (rows.empty()) {
    throw Error(Errc::parse_error, "empty CSV input", 0);
  }
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

inline std::string format_csv_matrix(const Matrix& m) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << m(i, j);
    }
    out << '\n';
  }
  return std::move(out).str();
}

// ---- SCMX1: f64 matrix container (costs, transport plans) ----

inline constexpr std::string_view kMatrixMagic = "SCMX1";

inline std::string encode_matrix_scmx(const Matrix& m) {
  ByteWriter w;
  w.magic(kMatrixMagic);
  w.matrix(m);
  return w.buffer();
}

inline Matrix decode_matrix_scmx(std::string_view data) {
  ByteReader r(data);
  r.expect_magic(kMatrixMagic);
  Matrix m = r.matrix();
  if (!r.at_end()) {
    throw Error(Errc::parse_error, "trailing bytes after SCMX1 payload", r.position());
  }
  return m;
}

// ---- SCLB1: f32 embedding container for external encoders ----

inline constexpr std::string_view kEmbeddingMagic = "SCLB1";

inline std::string encode_embeddings_sclb(const Matrix& m) {
  ByteWriter w;
  w.magic(kEmbeddingMagic);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (double v : m.storage()) w.f32(static_cast<float>(v));
  return w.buffer();
}

inline Matrix decode_embeddings_sclb(std::string_view data) {
  ByteReader r(data);
  r.expect_magic(kEmbeddingMagic);
  const std::uint32_t rows = r.u32();
  const std::uint32_t dim = r.u32();
  Matrix m(rows, dim);
  for (double& v : m.storage()) v = static_cast<double>(r.f32());
  if (!r.at_end()) {
    throw Error(Errc::parse_error, "trailing bytes after SCLB1 payload", r.position());
  }
  return m;
}

}  // namespace sclip
