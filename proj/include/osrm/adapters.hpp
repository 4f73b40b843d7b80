#pragma once

#include "osrm/tensor_io.hpp"
#include "osrm/types.hpp"

#include <map>
#include <string>

namespace osrm::adapters {

struct LoraLayer {
  Matrix b;  // m x r
  Matrix a;  // r x n
};

/// Low-rank update ΔW = (alpha / r) · B · A per layer.
struct LoraAdapter {
  std::string task;
  int r = 8;
  double alpha = 16.0;
  std::map<std::string, LoraLayer> layers;

  double scale() const { return alpha / static_cast<double>(r); }
};

void validate(const LoraAdapter& adapter);

/// Full-rank difference between fine-tuned and base weights.
struct TaskVector {
  std::string task;
  LayerMap delta;
};

/// Adapter with the given A per layer and B = 0 of height out_dims[layer].
LoraAdapter zero_b_adapter(const std::string& task, const LayerMap& a,
                           const std::map<std::string, Eigen::Index>& out_dims, double alpha);

TaskVector lora_delta(const LoraAdapter& adapter);

/// W0·h + s·B·(A·h) without forming B·A.
Vector apply_adapter(const Matrix& w0, const LoraLayer& layer, double scale, const Vector& h);

struct PosthocResult {
  LoraAdapter adapter;                       // scale 1, B̂ = ΔW·Ãᵀ
  std::map<std::string, double> residual;    // ‖ΔW − B̂Ã‖_F / ‖ΔW‖_F (0 when ΔW = 0)
};

/// Least-squares projection of each ΔW onto the row space of an orthonormal Ã.
PosthocResult posthoc_decompose(const TaskVector& delta, const LayerMap& a_tilde);

io::Checkpoint to_checkpoint(const LoraAdapter& adapter,
                             std::map<std::string, std::string> extra_metadata = {});
LoraAdapter adapter_from_checkpoint(const io::Checkpoint& ckpt);

io::Checkpoint to_checkpoint(const TaskVector& tv);
TaskVector task_vector_from_checkpoint(const io::Checkpoint& ckpt);

/// Adapter checkpoints are materialized through lora_delta; task_vector
/// checkpoints are read as-is.
TaskVector delta_from_checkpoint(const io::Checkpoint& ckpt);

/// Shared "%.17g" formatting for real-valued metadata.
std::string format_real(double v);

}  // namespace osrm::adapters
