#include "osrm/linalg.hpp"

#include "osrm/error.hpp"
#include "osrm/kernels.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>

#include <cmath>
#include <string>

namespace osrm::linalg {

namespace {

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw ValidationError(std::string(what) + ": non-finite entries");
}

}  // namespace

SymEig sym_eig(const Matrix& s) {
  if (s.rows() != s.cols()) throw ValidationError("sym_eig: matrix is not square");
  require_finite(s, "sym_eig");
  const double scale = std::max(1.0, s.cwiseAbs().maxCoeff());
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale) {
    throw ValidationError("sym_eig: matrix is not symmetric");
  }
  SymEig out;
  if (s.rows() == 0) return out;

  const Eigen::MatrixXd sym = 0.5 * (s + s.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym, Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) {
    throw ConvergenceError("sym_eig: eigen solver did not converge");
  }
  out.values = solver.eigenvalues();
  out.vectors = solver.eigenvectors();
  for (Eigen::Index j = 0; j < out.vectors.cols(); ++j) {
    Eigen::Index arg = 0;
    out.vectors.col(j).cwiseAbs().maxCoeff(&arg);
    if (out.vectors(arg, j) < 0) out.vectors.col(j) *= -1.0;
  }
  return out;
}

Matrix gram(const Matrix& h) {
  if (h.rows() == 0 || h.cols() == 0) throw ValidationError("gram: empty matrix");
  return kernels::gram(h);
}

ProcrustesDistance procrustes_distance(const Matrix& a_ft, const Matrix& a_init) {
  if (a_ft.rows() != a_init.rows() || a_ft.cols() != a_init.cols()) {
    throw ValidationError("procrustes_distance: shape mismatch");
  }
  const double init_norm = a_init.norm();
  if (init_norm == 0.0) throw ValidationError("procrustes_distance: A_init is all zero");

  // A_init·A_ftᵀ = U Σ Vᵀ  =>  Ω = U Vᵀ.
  const Eigen::MatrixXd cross = a_init * a_ft.transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  ProcrustesDistance out;
  out.rotation = svd.matrixU() * svd.matrixV().transpose();
  // Evaluating the residual directly avoids the cancellation in
  // ‖A_ft‖² + ‖A_init‖² − 2 tr Σ when the distance is tiny.
  out.distance = (out.rotation * a_ft - a_init).norm();
  out.normalized = out.distance / init_norm;
  return out;
}

Vector singular_values(const Matrix& m) {
  if (m.size() == 0) return Vector();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
  return svd.singularValues();
}

int rank_of(const Matrix& h, double tol) {
  if (h.rows() == 0 || h.cols() == 0) throw ValidationError("rank_of: empty matrix");
  if (!(tol > 0.0)) throw ValidationError("rank_of: tol must be positive");
  const Vector sv = singular_values(h);
  const double top = sv.size() ? sv.maxCoeff() : 0.0;
  if (top == 0.0) return 0;
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv[i] > tol * top;
  return rank;
}

Matrix sym_pinv(const Matrix& s, double rel_tol) {
  const SymEig eig = sym_eig(s);
  const double top = eig.values.cwiseAbs().maxCoeff();
  Vector inv = Vector::Zero(eig.values.size());
  for (Eigen::Index i = 0; i < inv.size(); ++i) {
    if (eig.values[i] > rel_tol * top) inv[i] = 1.0 / eig.values[i];
  }
  return eig.vectors * inv.asDiagonal() * eig.vectors.transpose();
}

Matrix orthonormalize_rows(const Matrix& m) {
  if (m.rows() > m.cols()) throw ValidationError("orthonormalize_rows: more rows than columns");
  const Eigen::MatrixXd mt = m.transpose();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(mt);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(mt.rows(), mt.cols());
  const Eigen::MatrixXd r = qr.matrixQR().topRows(mt.cols()).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0) q.col(j) *= -1.0;
  }
  return q.transpose();
}

}  // namespace osrm::linalg
