#include "osrm/error.hpp"
#include "osrm/harness.hpp"
#include "osrm/linalg.hpp"

#include <cmath>

namespace osrm::harness {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

// n x d with orthonormal columns.
Matrix random_basis(int n, int d, Rng& rng) {
  return linalg::orthonormalize_rows(gaussian(d, n, rng)).transpose();
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(seed) ^ h);
}

void validate(const TaskSpec& spec) {
  if (spec.num_tasks < 2) throw ValidationError("make_tasks: need at least 2 tasks");
  if (spec.width < 1) throw ValidationError("make_tasks: width must be positive");
  if (spec.subspace_dim < 1 || spec.subspace_dim >= spec.width) {
    throw ValidationError("make_tasks: subspace dimension must satisfy 1 <= d < n");
  }
  if (spec.layers < 1 || spec.layers > 2) throw ValidationError("make_tasks: 1 or 2 layers supported");
  if (!(spec.sigma >= 0.0) || !(spec.mean_shift >= 0.0)) {
    throw ValidationError("make_tasks: sigma and mean_shift must be non-negative");
  }
}

LayerMap make_base_model(int width, int layers, std::uint64_t seed) {
  if (width < 1 || layers < 1) throw ValidationError("make_base_model: bad dimensions");
  Rng rng(derive_seed(seed, "base"));
  LayerMap w;
  for (int i = 0; i < layers; ++i) {
    w.emplace(layer_name(i), gaussian(width, width, rng, 1.0 / std::sqrt(double(width))));
  }
  return w;
}

std::vector<SyntheticTask> make_tasks(const LayerMap& base, const TaskSpec& spec) {
  validate(spec);
  if (static_cast<int>(base.size()) != spec.layers) {
    throw ValidationError("make_tasks: base model has a different layer count");
  }
  std::vector<SyntheticTask> tasks;
  const int n = spec.width, d = spec.subspace_dim;
  for (int t = 0; t < spec.num_tasks; ++t) {
    SyntheticTask task;
    task.name = "T" + std::to_string(t + 1);
    task.seed = derive_seed(spec.seed, "task:" + task.name);
    task.noise_sigma = spec.sigma;
    Rng rng(task.seed);
    task.basis = random_basis(n, d, rng);
    task.mean_offset = Vector::Zero(d);
    if (spec.mean_shift > 0.0) {
      const Matrix dir = gaussian(d, 1, rng);
      task.mean_offset = spec.mean_shift * dir.col(0).normalized();
    }
    for (int i = 0; i < spec.layers; ++i) {
      const std::string name = layer_name(i);
      const Matrix& w0 = base.at(name);
      if (w0.rows() != n || w0.cols() != n) throw ValidationError("make_tasks: base width mismatch");
      const Matrix proj = i == 0 ? task.basis : random_basis(n, d, rng);
      const Matrix g = gaussian(n, d, rng, 1.0 / std::sqrt(double(d)));
      task.teacher.emplace(name, w0 + spec.teacher_scale * g * proj.transpose());
    }
    tasks.push_back(std::move(task));
  }
  return tasks;
}

Batch sample_batch(const SyntheticTask& task, int count, Rng& rng) {
  if (count < 1) throw ValidationError("sample_batch: count must be >= 1");
  const auto d = task.basis.cols();
  Matrix z = gaussian(count, d, rng);
  z.rowwise() += task.mean_offset.transpose();
  Matrix x = z * task.basis.transpose();
  if (task.noise_sigma > 0.0) x += gaussian(count, task.basis.rows(), rng, task.noise_sigma);
  Batch b;
  b.y = forward(task.teacher, x);
  b.x = std::move(x);
  return b;
}

Batch sample_batch(const SyntheticTask& task, int count, std::uint64_t seed) {
  Rng rng(seed);
  return sample_batch(task, count, rng);
}

subspace::FeatureBank collect_features(const SyntheticTask& task, const LayerMap& model, int k,
                                       std::uint64_t seed, const LoraAdapter* adapter) {
  if (k < 1) throw ValidationError("collect_features: k must be >= 1");
  const Batch b = sample_batch(task, k, seed);
  std::vector<Matrix> inputs;
  forward(model, b.x, adapter, &inputs);
  subspace::FeatureBank bank;
  bank.task = task.name;
  bank.k = k;
  bank.mode = subspace::FeatureMode::full;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    bank.layers.emplace(layer_name(static_cast<int>(i)), std::move(inputs[i]));
  }
  return bank;
}

std::vector<std::pair<int, int>> rank_table(const SyntheticTask& task, const LayerMap& model,
                                            const std::vector<int>& ks, std::uint64_t seed) {
  if (ks.empty()) throw ValidationError("rank_table: no sample counts given");
  std::vector<std::pair<int, int>> out;
  for (int k : ks) {
    const auto bank = collect_features(task, model, k, derive_seed(seed, "rank:" + std::to_string(k)));
    out.emplace_back(k, linalg::rank_of(bank.layers.at(layer_name(0)), 1e-8));
  }
  return out;
}

io::Checkpoint to_checkpoint(const SyntheticTask& task) {
  io::Checkpoint c;
  c.role = io::Role::base;
  c.metadata = {{"kind", "task"},
                {"task", task.name},
                {"sigma", adapters::format_real(task.noise_sigma)},
                {"seed", std::to_string(task.seed)}};
  c.add_matrix("basis.U", task.basis);
  c.add_matrix("basis.mu", task.mean_offset.transpose());
  for (const auto& [name, w] : task.teacher) c.add_matrix(name + ".W", w);
  return c;
}

SyntheticTask task_from_checkpoint(const io::Checkpoint& ckpt) {
  if (ckpt.meta("kind") != "task") throw ValidationError("checkpoint is not a synthetic task");
  SyntheticTask t;
  t.name = ckpt.require_meta("task");
  t.noise_sigma = std::stod(ckpt.require_meta("sigma"));
  t.seed = std::stoull(ckpt.require_meta("seed"));
  t.basis = ckpt.matrix("basis.U");
  t.mean_offset = ckpt.matrix("basis.mu").row(0).transpose();
  t.teacher = io::weights_of(ckpt);
  return t;
}

}  // namespace osrm::harness
