#include "osrm/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace osrm::kernels {

std::size_t ties_keep_count(std::size_t count, double keep_fraction) {
  // The small slack keeps e.g. (2/3)*3 from rounding up to 3.
  const double raw = keep_fraction * static_cast<double>(count);
  const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::min(k, count);
}

namespace reference {

Matrix gram(const Matrix& h) {
  const auto k = h.rows();
  const auto n = h.cols();
  Matrix g(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      double s = 0.0;
      for (Eigen::Index r = 0; r < k; ++r) s += h(r, i) * h(r, j);
      g(i, j) = s;
    }
  }
  return g;
}

void task_arithmetic(std::span<const double> base, const ConstSpans& deltas, double lambda,
                     std::span<double> out) {
  for (std::size_t i = 0; i < base.size(); ++i) {
    double s = 0.0;
    for (const auto& d : deltas) s += d[i];
    out[i] = base[i] + lambda * s;
  }
}

void ties_trim(std::span<const double> tau, double keep_fraction, std::span<double> out) {
  const std::size_t keep = ties_keep_count(tau.size(), keep_fraction);
  std::vector<std::size_t> order(tau.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(tau[a]) > std::abs(tau[b]);
  });
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t j = 0; j < keep; ++j) out[order[j]] = tau[order[j]];
}

void ties_disjoint_merge(const ConstSpans& trimmed, std::span<double> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
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
  for (std::size_t i = 0; i < out.size(); ++i) {
    double num = 0.0, den = 0.0;
    for (std::size_t t = 0; t < models.size(); ++t) {
      const double w = fishers.empty() ? 1.0 : std::max(fishers[t][i], floor);
      num += w * models[t][i];
      den += w;
    }
    out[i] = num / den;
  }
}

void emr_unify(const ConstSpans& deltas, std::span<double> tau_uni) {
  for (std::size_t i = 0; i < tau_uni.size(); ++i) {
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

}  // namespace reference
}  // namespace osrm::kernels
