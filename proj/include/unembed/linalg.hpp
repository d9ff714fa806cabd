#pragma once

#include <Eigen/Dense>

namespace unembed {

// Dense SVD entry points, LAPACK (dgesdd) when built against it, Eigen BDCSVD
// otherwise. Values are descending in both cases.

Eigen::VectorXd singular_values(const Eigen::MatrixXd& a);

struct ThinSvd {
  Eigen::MatrixXd u;   // m x k
  Eigen::VectorXd s;   // k
  Eigen::MatrixXd vt;  // k x n
};

ThinSvd thin_svd(const Eigen::MatrixXd& a);

// Least squares min ||a x - b||_2 per column of b, via column-pivoted QR.
Eigen::MatrixXd solve_lstsq(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

}  // namespace unembed
