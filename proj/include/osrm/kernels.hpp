#pragma once

// Data-parallel inner loops used by linalg and the mergers.
//
// Every kernel exists twice: osrm::kernels::* is the OpenMP build used by the
// library, osrm::kernels::reference::* is a plain serial loop kept as the
// test oracle and benchmark baseline. Both must agree bit-for-bit except
// where noted.
//
// Flat spans are row-major views of one layer's tensor.

#include "osrm/types.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace osrm::kernels {

using ConstSpans = std::vector<std::span<const double>>;

/// G = Hᵀ H for H of shape k x n.
Matrix gram(const Matrix& h);

/// out = base + lambda * sum_t deltas[t]
void task_arithmetic(std::span<const double> base, const ConstSpans& deltas, double lambda,
                     std::span<double> out);

/// Number of entries TIES keeps out of `count` for a given keep fraction.
std::size_t ties_keep_count(std::size_t count, double keep_fraction);

/// Zero all but the top ties_keep_count() entries by magnitude. Ties at the
/// threshold keep the lower flat index.
void ties_trim(std::span<const double> tau, double keep_fraction, std::span<double> out);

/// Sign election + disjoint mean over already-trimmed task vectors.
void ties_disjoint_merge(const ConstSpans& trimmed, std::span<double> out);

/// out = sum_t max(F_t, floor) * theta_t / sum_t max(F_t, floor).
/// An empty `fishers` list means uniform weights.
void fisher_weighted_mean(const ConstSpans& models, const ConstSpans& fishers, double floor,
                          std::span<double> out);

/// tau_uni[i] = sign(sum_t tau_t[i]) * max{|tau_t[i]| : sign(tau_t[i]) agrees}.
void emr_unify(const ConstSpans& deltas, std::span<double> tau_uni);

namespace reference {

Matrix gram(const Matrix& h);
void task_arithmetic(std::span<const double> base, const ConstSpans& deltas, double lambda,
                     std::span<double> out);
void ties_trim(std::span<const double> tau, double keep_fraction, std::span<double> out);
void ties_disjoint_merge(const ConstSpans& trimmed, std::span<double> out);
void fisher_weighted_mean(const ConstSpans& models, const ConstSpans& fishers, double floor,
                          std::span<double> out);
void emr_unify(const ConstSpans& deltas, std::span<double> tau_uni);

}  // namespace reference

inline int sign(double v) {
  return (v > 0.0) - (v < 0.0);
}

}  // namespace osrm::kernels
