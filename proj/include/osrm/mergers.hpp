#pragma once

// Model-merging methods over dense per-layer weights. Every merger consumes
// materialized task vectors (or full weights), so LoRA, full fine-tuning and
// post-hoc adapters all merge the same way.

#include "osrm/adapters.hpp"
#include "osrm/subspace.hpp"
#include "osrm/tensor_io.hpp"
#include "osrm/types.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace osrm::mergers {

using adapters::TaskVector;

enum class Method { ta, ties, fisher, regmean, emr };

std::string_view to_string(Method m);
Method method_from_string(std::string_view s);

struct MergeConfig {
  Method method = Method::ta;
  double lambda = 0.3;
  double keep_fraction = 0.2;
  double gamma = 0.9;
  double fisher_floor = 1e-12;
};

/// Defaults: TA λ=0.3, TIES λ=1 with 20% kept, RegMean γ=0.9.
MergeConfig default_config(Method m);
void validate(const MergeConfig& cfg);

/// W₀ + λ·Σ_t ΔW_t
LayerMap merge_ta(const LayerMap& base, std::span<const TaskVector> deltas, double lambda);

/// Trim to the top keep_fraction by magnitude per task and layer, elect the
/// per-entry sign of the trimmed sum, average the agreeing entries.
LayerMap merge_ties(const LayerMap& base, std::span<const TaskVector> deltas, double lambda,
                    double keep_fraction);

/// Per-entry Fisher-weighted mean of full weights. Empty `fishers` means
/// uniform weights.
LayerMap merge_fisher(const LayerMap& base, std::span<const LayerMap> models,
                      std::span<const LayerMap> fishers, double floor);

/// (Σ_t W_t·Ĝ_t)(Σ_t Ĝ_t)⁺ with Ĝ_t the Gram matrix whose off-diagonal
/// entries are scaled by gamma.
LayerMap merge_regmean(const LayerMap& base, std::span<const LayerMap> models,
                       std::span<const LayerMap> grams, double gamma);

struct EmrBundle {
  std::vector<std::string> tasks;
  LayerMap tau_uni;
  std::vector<LayerMap> masks;  // per task, entries in {0, 1}
  // One rescaler per task, or per task and layer when computed per layer.
  std::vector<std::map<std::string, double>> rescalers;
  bool per_layer = false;

  double rescaler(std::size_t task, const std::string& layer) const;
};

EmrBundle merge_emr(const LayerMap& base, std::span<const TaskVector> deltas,
                    bool per_layer_rescalers = false);

/// W₀ + λ_t·(M_t ⊙ τ_uni)
LayerMap emr_task_weights(const LayerMap& base, const EmrBundle& bundle, std::size_t task);

/// Per-layer HᵀH of a full-mode bank.
LayerMap compute_gram(const subspace::FeatureBank& bank);

/// Gradient of the per-sample loss w.r.t. every parameter, flattened.
using GradientFn = std::function<Vector(const Vector& x, const Vector& y)>;

/// Empirical diagonal Fisher: mean over samples of squared gradients.
/// Rows of xs / ys are samples.
Vector compute_fisher_diag(const GradientFn& grad, const Matrix& xs, const Matrix& ys);

/// Task vector θ_t − θ₀.
TaskVector delta_between(const LayerMap& base, const LayerMap& model, const std::string& task);

io::Checkpoint merged_checkpoint(const LayerMap& weights, const MergeConfig& cfg);
io::Checkpoint to_checkpoint(const EmrBundle& bundle);
EmrBundle emr_from_checkpoint(const io::Checkpoint& ckpt);

}  // namespace osrm::mergers
