#include "unembed/linalg.hpp"

#include <algorithm>

#include "unembed/errors.hpp"

#if defined(UNEMBED_HAVE_LAPACKE)
#include <lapacke.h>
#endif

namespace unembed {

#if defined(UNEMBED_HAVE_LAPACKE)

Eigen::VectorXd singular_values(const Eigen::MatrixXd& a) {
  Eigen::MatrixXd work = a;  // dgesdd destroys its input
  const lapack_int m = static_cast<lapack_int>(a.rows());
  const lapack_int n = static_cast<lapack_int>(a.cols());
  const lapack_int k = std::min(m, n);
  Eigen::VectorXd s(k);
  const lapack_int info = LAPACKE_dgesdd(LAPACK_COL_MAJOR, 'N', m, n, work.data(), m, s.data(),
                                         nullptr, m, nullptr, k);
  if (info != 0) throw NumericalError("SVD (values) failed to converge");
  return s;
}

ThinSvd thin_svd(const Eigen::MatrixXd& a) {
  Eigen::MatrixXd work = a;
  const lapack_int m = static_cast<lapack_int>(a.rows());
  const lapack_int n = static_cast<lapack_int>(a.cols());
  const lapack_int k = std::min(m, n);
  ThinSvd out;
  out.u.resize(m, k);
  out.s.resize(k);
  out.vt.resize(k, n);
  const lapack_int info = LAPACKE_dgesdd(LAPACK_COL_MAJOR, 'S', m, n, work.data(), m,
                                         out.s.data(), out.u.data(), m, out.vt.data(), k);
  if (info != 0) throw NumericalError("SVD failed to converge");
  return out;
}

#else

Eigen::VectorXd singular_values(const Eigen::MatrixXd& a) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a);
  return svd.singularValues();
}

ThinSvd thin_svd(const Eigen::MatrixXd& a) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return ThinSvd{svd.matrixU(), svd.singularValues(), svd.matrixV().transpose()};
}

#endif

Eigen::MatrixXd solve_lstsq(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  if (qr.rank() < a.cols()) throw NumericalError("least-squares system is rank deficient");
  return qr.solve(b);
}

}  // namespace unembed
