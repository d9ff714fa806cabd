#include "unembed/matio.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "unembed/errors.hpp"

namespace unembed {

namespace {
constexpr char kMagic[8] = {'U', 'E', 'M', 'B', 'M', 'T', 'R', 'X'};
}

void write_matrix(const std::string& path, const Eigen::MatrixXd& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open for writing: " + path);
  f.write(kMagic, 8);
  const uint32_t rows = static_cast<uint32_t>(m.rows());
  const uint32_t cols = static_cast<uint32_t>(m.cols());
  f.write(reinterpret_cast<const char*>(&rows), 4);
  f.write(reinterpret_cast<const char*>(&cols), 4);
  std::vector<double> row(cols);
  for (uint32_t r = 0; r < rows; ++r) {
    for (uint32_t c = 0; c < cols; ++c) row[c] = m(r, c);
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(cols) * 8);
  }
  if (!f) throw InputError("short write: " + path);
}

Eigen::MatrixXd read_matrix(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0) throw InputError("bad matrix magic: " + path);
  uint32_t rows = 0, cols = 0;
  f.read(reinterpret_cast<char*>(&rows), 4);
  f.read(reinterpret_cast<char*>(&cols), 4);
  if (!f) throw InputError("truncated matrix header: " + path);
  Eigen::MatrixXd m(rows, cols);
  std::vector<double> row(cols);
  for (uint32_t r = 0; r < rows; ++r) {
    f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(cols) * 8);
    if (!f) throw InputError("truncated matrix body: " + path);
    for (uint32_t c = 0; c < cols; ++c) m(r, c) = row[c];
  }
  return m;
}

}  // namespace unembed
