#pragma once

#include "osrm/types.hpp"

namespace osrm::linalg {

/// Eigenpairs of a symmetric matrix, values ascending. Column j of `vectors`
/// pairs with values[j]; each column's largest-magnitude entry is positive.
struct SymEig {
  Vector values;
  Matrix vectors;
};

SymEig sym_eig(const Matrix& s);

/// Unnormalized Hᵀ H. Callers apply any 1/(k-1) covariance factor themselves.
Matrix gram(const Matrix& h);

struct ProcrustesDistance {
  double distance = 0.0;
  double normalized = 0.0;  // distance / ‖A_init‖_F
  Matrix rotation;          // the minimizing orthogonal Ω
};

/// min over orthogonal Ω of ‖Ω·A_ft − A_init‖_F.
ProcrustesDistance procrustes_distance(const Matrix& a_ft, const Matrix& a_init);

/// Singular values above tol times the largest.
int rank_of(const Matrix& h, double tol);

Vector singular_values(const Matrix& m);

/// Moore-Penrose inverse of a symmetric PSD matrix, dropping eigenvalues at
/// or below rel_tol times the largest.
Matrix sym_pinv(const Matrix& s, double rel_tol = 1e-10);

/// Q factor of a thin QR with positive diagonal R; rows of the result span
/// the rows of `m` (m is r x n, r <= n).
Matrix orthonormalize_rows(const Matrix& m);

}  // namespace osrm::linalg
