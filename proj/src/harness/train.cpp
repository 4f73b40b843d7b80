#include "osrm/error.hpp"
#include "osrm/harness.hpp"
#include "osrm/linalg.hpp"

#include <cmath>

namespace osrm::harness {

void validate(const TrainConfig& cfg) {
  if (cfg.steps < 0) throw ValidationError("train: steps must be >= 0");
  if (cfg.batch < 1) throw ValidationError("train: batch must be >= 1");
  if (!(cfg.lr > 0.0)) throw ValidationError("train: lr must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) {
    throw ValidationError("train: momentum must lie in [0, 1)");
  }
  if (cfg.eval_samples < 1) throw ValidationError("train: eval_samples must be >= 1");
}

double task_loss(const SyntheticTask& task, const LayerMap& weights, const LoraAdapter* adapter,
                 int samples) {
  const Batch eval = sample_batch(task, samples, derive_seed(task.seed, "eval:" + std::to_string(samples)));
  return mse_loss(weights, adapter, eval.x, eval.y);
}

LoraAdapter gaussian_init(const std::string& task, const LayerMap& base, int r, double alpha,
                          std::uint64_t seed) {
  if (r < 1) throw ValidationError("gaussian_init: r must be >= 1");
  Rng rng(derive_seed(seed, "gaussian-init:" + task));
  LoraAdapter out;
  out.task = task;
  out.r = r;
  out.alpha = alpha;
  for (const auto& [name, w] : base) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(double(w.cols())));
    Matrix a(r, w.cols());
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = dist(rng);
    out.layers[name] = {Matrix::Zero(w.rows(), r), std::move(a)};
  }
  return out;
}

TrainResult finetune(const SyntheticTask& task, const LayerMap& base, LoraAdapter init,
                     const TrainConfig& cfg) {
  validate(cfg);
  adapters::validate(init);
  for (const auto& [name, l] : init.layers) {
    auto it = base.find(name);
    if (it == base.end()) throw ValidationError("finetune: adapter layer '" + name + "' not in base");
    if (l.a.cols() != it->second.cols() || l.b.rows() != it->second.rows()) {
      throw ValidationError("finetune: adapter shape mismatch on layer '" + name + "'");
    }
  }

  TrainResult res;
  res.initial_loss = task_loss(task, base, &init, cfg.eval_samples);

  std::map<std::string, adapters::LoraLayer> velocity;
  for (const auto& [name, l] : init.layers) {
    velocity[name] = {Matrix::Zero(l.b.rows(), l.b.cols()), Matrix::Zero(l.a.rows(), l.a.cols())};
  }

  Rng rng(derive_seed(cfg.seed, "train:" + task.name));
  for (int step = 0; step < cfg.steps; ++step) {
    const Batch batch = sample_batch(task, cfg.batch, rng);
    const LoraGradients g = lora_gradients(base, init, batch.x, batch.y);
    if (!std::isfinite(g.loss)) {
      throw TrainingDivergedError(static_cast<std::size_t>(step),
                                  "training diverged at step " + std::to_string(step));
    }
    for (auto& [name, l] : init.layers) {
      auto& v = velocity[name];
      const auto& grad = g.grads.at(name);
      v.b = cfg.momentum * v.b + grad.b;
      l.b -= cfg.lr * v.b;
      if (!cfg.freeze_A) {
        v.a = cfg.momentum * v.a + grad.a;
        l.a -= cfg.lr * v.a;
      }
    }
  }

  res.final_loss = task_loss(task, base, &init, cfg.eval_samples);
  if (!std::isfinite(res.final_loss)) {
    throw TrainingDivergedError(static_cast<std::size_t>(cfg.steps), "training diverged");
  }
  res.adapter = std::move(init);
  return res;
}

std::map<std::string, double> change_of_A_report(const LoraAdapter& init,
                                                 const LoraAdapter& finetuned) {
  if (init.layers.size() != finetuned.layers.size()) {
    throw ValidationError("change_of_A: layer sets differ");
  }
  std::map<std::string, double> out;
  for (const auto& [name, l0] : init.layers) {
    auto it = finetuned.layers.find(name);
    if (it == finetuned.layers.end()) throw ValidationError("change_of_A: missing layer '" + name + "'");
    out[name] = linalg::procrustes_distance(it->second.a, l0.a).normalized;
  }
  return out;
}

}  // namespace osrm::harness
