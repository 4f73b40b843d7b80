#pragma once

// Out-of-task feature assembly and the orthogonal-subspace initialization of
// LoRA's A matrix: rows of A are the eigenvectors of HᵀH with the smallest
// eigenvalues, which minimizes ‖A·Hᵀ‖_F² subject to A·Aᵀ = I.

#include "osrm/tensor_io.hpp"
#include "osrm/types.hpp"

#include <optional>
#include <span>
#include <string>

namespace osrm::subspace {

enum class FeatureMode { full, averaged };

std::string_view to_string(FeatureMode m);
FeatureMode mode_from_string(std::string_view s);

/// Latent inputs of each layer for one task. Rows are samples.
struct FeatureBank {
  std::string task;
  LayerMap layers;
  int k = 0;  // samples captured (kept as the original count after averaging)
  FeatureMode mode = FeatureMode::full;

  int width(const std::string& layer) const;
};

void validate(const FeatureBank& bank);

/// Rows of every other task's H stacked in the order the banks are given.
LayerMap build_excluded_features(std::span<const FeatureBank> banks,
                                 const std::string& target_task);

/// Collapses each layer's rows to their mean row.
FeatureBank average_features(const FeatureBank& bank);

struct InitResult {
  Matrix a_tilde;    // r x n, orthonormal rows
  double objective;  // ‖Ã·Hᵀ‖_F²
  // objective / (k-1), the trace of Ã S Ãᵀ with S the sample covariance;
  // absent when k < 2.
  std::optional<double> covariance_objective;
  // Sum of the r smallest eigenvalues of HᵀH; equals objective at the optimum.
  double eigen_bound;
};

InitResult osrm_init(const Matrix& h_excl, int r, int sample_count_for_diag = 0);

struct SubspaceInit {
  LayerMap a_tilde;
  std::map<std::string, double> objective;
  int r = 0;
  std::string excluded_task;
};

/// Runs osrm_init on every layer of the excluded-feature matrices for `target_task`.
SubspaceInit osrm_init_layers(std::span<const FeatureBank> banks, const std::string& target_task,
                              int r);

/// ‖scale·B·A·Hᵀ‖_F.
double interference_norm(const Matrix& b, const Matrix& a, const Matrix& h, double scale);

io::Checkpoint to_checkpoint(const FeatureBank& bank);
FeatureBank bank_from_checkpoint(const io::Checkpoint& ckpt);

}  // namespace osrm::subspace
