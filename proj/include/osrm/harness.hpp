#pragma once

// Desk-scale synthetic study: a small frozen MLP (1-2 square linear layers,
// tanh in between, LoRA on every layer), tasks living in random input
// subspaces, gradient-descent fine-tuning, merging and interference metrics.

#include "osrm/adapters.hpp"
#include "osrm/mergers.hpp"
#include "osrm/subspace.hpp"
#include "osrm/tensor_io.hpp"
#include "osrm/types.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace osrm::harness {

using adapters::LoraAdapter;
using Rng = std::mt19937_64;

/// Independent stream seed for (seed, tag); stable across platforms.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

std::string layer_name(int index);

// ---------------------------------------------------------------- model ---

/// Output of the model for each row of x. Layer inputs are appended to
/// `layer_inputs` when given.
Matrix forward(const LayerMap& weights, const Matrix& x, const LoraAdapter* adapter = nullptr,
               std::vector<Matrix>* layer_inputs = nullptr);

/// Mean over rows of the summed squared error.
double mse_loss(const LayerMap& weights, const LoraAdapter* adapter, const Matrix& x,
                const Matrix& y);

struct LoraGradients {
  double loss = 0.0;
  std::map<std::string, adapters::LoraLayer> grads;  // dB in .b, dA in .a
};

LoraGradients lora_gradients(const LayerMap& weights, const LoraAdapter& adapter, const Matrix& x,
                             const Matrix& y);

/// Gradient of one sample's loss with respect to every W, flattened in layer
/// order then row-major.
Vector weight_gradient(const LayerMap& weights, const Vector& x, const Vector& y);

LayerMap unflatten_like(const LayerMap& like, const Vector& flat);

// ---------------------------------------------------------------- tasks ---

struct SyntheticTask {
  std::string name;
  Matrix basis;        // n x d, orthonormal columns
  Vector mean_offset;  // d; latent mean of z
  LayerMap teacher;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  int width() const { return static_cast<int>(basis.rows()); }
};

struct TaskSpec {
  int num_tasks = 3;
  int width = 16;
  int subspace_dim = 4;
  double sigma = 0.05;
  int layers = 1;
  // Norm of each task's latent mean. 0 gives zero-mean inputs x = U·z + σ·ε.
  double mean_shift = 0.0;
  double teacher_scale = 1.0;
  std::uint64_t seed = 0;
};

void validate(const TaskSpec& spec);

LayerMap make_base_model(int width, int layers, std::uint64_t seed);

/// Tasks named T1..TN with teachers W₀ + scale·G·Pᵀ per layer.
std::vector<SyntheticTask> make_tasks(const LayerMap& base, const TaskSpec& spec);

struct Batch {
  Matrix x;
  Matrix y;
};

/// x = U·(μ + z) + σ·ε with z, ε standard normal; y = teacher(x).
Batch sample_batch(const SyntheticTask& task, int count, Rng& rng);
Batch sample_batch(const SyntheticTask& task, int count, std::uint64_t seed);

/// Full-mode bank holding each layer's inputs on k fresh samples.
subspace::FeatureBank collect_features(const SyntheticTask& task, const LayerMap& model, int k,
                                       std::uint64_t seed, const LoraAdapter* adapter = nullptr);

/// (k, rank of a fresh k x n first-layer H at tolerance 1e-8) for each k.
std::vector<std::pair<int, int>> rank_table(const SyntheticTask& task, const LayerMap& model,
                                            const std::vector<int>& ks, std::uint64_t seed);

io::Checkpoint to_checkpoint(const SyntheticTask& task);
SyntheticTask task_from_checkpoint(const io::Checkpoint& ckpt);

// ------------------------------------------------------------- training ---

struct TrainConfig {
  int steps = 2000;
  int batch = 32;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  bool freeze_A = false;
  int eval_samples = 1000;
};

void validate(const TrainConfig& cfg);

struct TrainResult {
  LoraAdapter adapter;
  double initial_loss = 0.0;  // eval loss before the first step
  double final_loss = 0.0;    // eval loss after the last step
};

/// Squared-loss momentum SGD on B (and A unless frozen). Throws
/// TrainingDivergedError when a mini-batch loss stops being finite.
TrainResult finetune(const SyntheticTask& task, const LayerMap& base, LoraAdapter init,
                     const TrainConfig& cfg);

/// A ~ N(0, 1/n) entrywise, B = 0.
LoraAdapter gaussian_init(const std::string& task, const LayerMap& base, int r, double alpha,
                          std::uint64_t seed);

/// Eval-set loss of `weights` (+ adapter) on a task; the eval set depends
/// only on the task seed and count.
double task_loss(const SyntheticTask& task, const LayerMap& weights, const LoraAdapter* adapter,
                 int samples);

/// Normalized Procrustes distance between initial and fine-tuned A per layer.
std::map<std::string, double> change_of_A_report(const LoraAdapter& init,
                                                 const LoraAdapter& finetuned);

// ------------------------------------------------------------- pipeline ---

struct PipelineConfig {
  TaskSpec tasks;
  int k = 100;
  int r = 2;
  double alpha = 4.0;
  std::vector<mergers::Method> methods{mergers::Method::ta, mergers::Method::ties,
                                       mergers::Method::fisher, mergers::Method::regmean,
                                       mergers::Method::emr};
  std::vector<std::uint64_t> seeds{0};
  bool osrm = true;
  subspace::FeatureMode init_mode = subspace::FeatureMode::averaged;
  subspace::FeatureMode interference_mode = subspace::FeatureMode::averaged;
  TrainConfig train;
  int fisher_samples = 256;
  std::vector<int> rank_ks;  // empty -> {2, 8, n, 4n}
};

struct SeedReport {
  std::uint64_t seed = 0;
  std::map<std::string, double> base_loss;
  std::map<std::string, double> initial_loss;
  std::map<std::string, double> single_task_loss;
  std::map<std::string, double> init_objective;        // Σ over layers
  std::map<std::string, double> interference;          // "Ts->Tt": Σ_l ‖s·B_s A_s H_tᵀ‖_F
  double total_interference = 0.0;
  std::map<std::string, std::map<std::string, double>> merged_loss;  // method -> task -> loss
  std::map<std::string, double> mean_merged_loss;                    // method -> mean
  std::map<std::string, std::map<std::string, double>> change_of_A;  // task -> layer -> D/‖A‖
  std::vector<std::pair<int, int>> rank_table;
};

struct RunReport {
  PipelineConfig config;
  std::vector<SeedReport> runs;
};

/// The N=3, n=16, d=4, k=100, r=2 study over seeds 0..9: tasks with a latent
/// mean of norm 2 and teacher deltas scaled by 0.1, 2000 steps at lr 0.01.
PipelineConfig default_study();

RunReport run_pipeline(const PipelineConfig& cfg);

/// Deterministic JSON (sorted keys).
std::string report_json(const RunReport& report);
/// One row per (seed, method, task) with single-task and merged losses.
std::string report_csv(const RunReport& report);

}  // namespace osrm::harness
