#include "osrm/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace osrm::kernels {

Matrix gram(const Matrix& h) {
  const auto k = h.rows();
  const auto n = h.cols();
  // Column-contiguous copy so each (i, j) is a unit-stride dot product.
  const Matrix ht = h.transpose();
  Matrix g(n, n);
  const double* base = ht.data();

#pragma omp parallel for schedule(dynamic, 4)
  for (Eigen::Index i = 0; i < n; ++i) {
    const double* ci = base + i * k;
    for (Eigen::Index j = i; j < n; ++j) {
      const double* cj = base + j * k;
      double s = 0.0;
      for (Eigen::Index r = 0; r < k; ++r) s += ci[r] * cj[r];
      g(i, j) = s;
      g(j, i) = s;
    }
  }
  return g;
}

void task_arithmetic(std::span<const double> base, const ConstSpans& deltas, double lambda,
                     std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(base.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (const auto& d : deltas) s += d[i];
    out[i] = base[i] + lambda * s;
  }
}

void ties_trim(std::span<const double> tau, double keep_fraction, std::span<double> out) {
  const std::size_t keep = ties_keep_count(tau.size(), keep_fraction);
  std::fill(out.begin(), out.end(), 0.0);
  if (keep == 0) return;
  std::vector<std::size_t> order(tau.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto before = [&](std::size_t a, std::size_t b) {
    const double ma = std::abs(tau[a]), mb = std::abs(tau[b]);
    return ma > mb || (ma == mb && a < b);
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep - 1),
                   order.end(), before);
  const auto last = static_cast<std::ptrdiff_t>(keep);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t j = 0; j < last; ++j) out[order[j]] = tau[order[j]];
}

void ties_disjoint_merge(const ConstSpans& trimmed, std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (const auto& t : trimmed) total += t[i];
    const int elected = sign(total);
    double sum = 0.0;
    int count = 0;
    if (elected != 0) {
      for (const auto& t : trimmed) {
        if (sign(t[i]) == elected) {
          sum += t[i];
          ++count;
        }
      }
    }
    out[i] = count ? sum / count : 0.0;
  }
}

void fisher_weighted_mean(const ConstSpans& models, const ConstSpans& fishers, double floor,
                          std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(out.size());
  const bool uniform = fishers.empty();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double num = 0.0, den = 0.0;
    for (std::size_t t = 0; t < models.size(); ++t) {
      const double w = uniform ? 1.0 : std::max(fishers[t][i], floor);
      num += w * models[t][i];
      den += w;
    }
    out[i] = num / den;
  }
}

void emr_unify(const ConstSpans& deltas, std::span<double> tau_uni) {
  const auto n = static_cast<std::ptrdiff_t>(tau_uni.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (const auto& d : deltas) total += d[i];
    const int elected = sign(total);
    double mag = 0.0;
    if (elected != 0) {
      for (const auto& d : deltas) {
        if (sign(d[i]) == elected) mag = std::max(mag, std::abs(d[i]));
      }
    }
    tau_uni[i] = elected * mag;
  }
}

}  // namespace osrm::kernels
