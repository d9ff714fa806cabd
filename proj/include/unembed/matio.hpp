#pragma once

#include <Eigen/Dense>
#include <string>

namespace unembed {

// Binary matrix file: 16-byte header (8-byte magic "UEMBMTRX", uint32 rows,
// uint32 cols, little-endian) followed by rows*cols float64 values, row-major,
// little-endian. Used by `victim export-truth` and the test oracles.

void write_matrix(const std::string& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix(const std::string& path);

}  // namespace unembed
