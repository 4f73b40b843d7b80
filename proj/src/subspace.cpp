#include "osrm/subspace.hpp"

#include "osrm/error.hpp"
#include "osrm/linalg.hpp"

#include <string>

namespace osrm::subspace {

std::string_view to_string(FeatureMode m) {
  return m == FeatureMode::full ? "full" : "averaged";
}

FeatureMode mode_from_string(std::string_view s) {
  if (s == "full") return FeatureMode::full;
  if (s == "averaged") return FeatureMode::averaged;
  throw ValidationError("unknown feature mode '" + std::string(s) + "'");
}

int FeatureBank::width(const std::string& layer) const {
  auto it = layers.find(layer);
  if (it == layers.end()) throw ValidationError("bank '" + task + "' has no layer '" + layer + "'");
  return static_cast<int>(it->second.cols());
}

void validate(const FeatureBank& bank) {
  if (bank.layers.empty()) throw ValidationError("feature bank '" + bank.task + "' is empty");
  if (bank.k < 1) throw ValidationError("feature bank '" + bank.task + "' has k < 1");
  for (const auto& [name, h] : bank.layers) {
    const Eigen::Index want = bank.mode == FeatureMode::averaged ? 1 : bank.k;
    if (h.rows() != want) {
      throw ValidationError("feature bank '" + bank.task + "', layer '" + name + "': expected " +
                            std::to_string(want) + " rows, got " + std::to_string(h.rows()));
    }
  }
}

LayerMap build_excluded_features(std::span<const FeatureBank> banks,
                                 const std::string& target_task) {
  std::vector<const FeatureBank*> others;
  for (const auto& b : banks) {
    if (b.task != target_task) others.push_back(&b);
  }
  if (others.empty()) {
    throw ValidationError("no feature banks besides target task '" + target_task + "'");
  }
  const FeatureBank& first = *others.front();
  for (const auto* b : others) {
    if (b->mode != first.mode) throw ValidationError("feature banks mix full and averaged mode");
    if (b->layers.size() != first.layers.size()) {
      throw ValidationError("feature bank '" + b->task + "' has a different layer set");
    }
  }

  LayerMap out;
  for (const auto& [layer, h0] : first.layers) {
    Eigen::Index rows = 0;
    for (const auto* b : others) {
      auto it = b->layers.find(layer);
      if (it == b->layers.end()) {
        throw ValidationError("feature bank '" + b->task + "' lacks layer '" + layer + "'");
      }
      if (it->second.cols() != h0.cols()) {
        throw ValidationError("feature bank '" + b->task + "', layer '" + layer +
                              "': width mismatch");
      }
      rows += it->second.rows();
    }
    Matrix stacked(rows, h0.cols());
    Eigen::Index at = 0;
    for (const auto* b : others) {
      const Matrix& h = b->layers.at(layer);
      stacked.middleRows(at, h.rows()) = h;
      at += h.rows();
    }
    out.emplace(layer, std::move(stacked));
  }
  return out;
}

FeatureBank average_features(const FeatureBank& bank) {
  if (bank.mode != FeatureMode::full) throw ValidationError("average_features: bank already averaged");
  if (bank.layers.empty() || bank.k < 1) throw ValidationError("average_features: empty bank");
  FeatureBank out;
  out.task = bank.task;
  out.k = bank.k;
  out.mode = FeatureMode::averaged;
  for (const auto& [layer, h] : bank.layers) {
    if (h.rows() == 0) throw ValidationError("average_features: layer '" + layer + "' is empty");
    out.layers.emplace(layer, h.colwise().mean());
  }
  return out;
}

InitResult osrm_init(const Matrix& h_excl, int r, int sample_count_for_diag) {
  const auto n = h_excl.cols();
  if (h_excl.rows() == 0 || n == 0) throw ValidationError("osrm_init: empty feature matrix");
  if (r < 1 || r > n) {
    throw ValidationError("osrm_init: rank " + std::to_string(r) + " outside [1, " +
                          std::to_string(n) + "]");
  }
  if (!h_excl.allFinite()) throw ValidationError("osrm_init: non-finite features");

  const linalg::SymEig eig = linalg::sym_eig(linalg::gram(h_excl));
  // Ascending storage: the first r columns belong to the r smallest eigenvalues.
  InitResult out;
  out.a_tilde = eig.vectors.leftCols(r).transpose();
  out.objective = (out.a_tilde * h_excl.transpose()).squaredNorm();
  out.eigen_bound = eig.values.head(r).sum();
  if (sample_count_for_diag >= 2) {
    out.covariance_objective = out.objective / static_cast<double>(sample_count_for_diag - 1);
  }
  return out;
}

SubspaceInit osrm_init_layers(std::span<const FeatureBank> banks, const std::string& target_task,
                              int r) {
  const LayerMap excluded = build_excluded_features(banks, target_task);
  SubspaceInit out;
  out.r = r;
  out.excluded_task = target_task;
  for (const auto& [layer, h] : excluded) {
    InitResult res = osrm_init(h, r, static_cast<int>(h.rows()));
    out.objective[layer] = res.objective;
    out.a_tilde.emplace(layer, std::move(res.a_tilde));
  }
  return out;
}

double interference_norm(const Matrix& b, const Matrix& a, const Matrix& h, double scale) {
  if (b.cols() != a.rows() || a.cols() != h.cols()) {
    throw ValidationError("interference_norm: shape mismatch");
  }
  return scale * (b * (a * h.transpose())).norm();
}

io::Checkpoint to_checkpoint(const FeatureBank& bank) {
  validate(bank);
  io::Checkpoint c;
  c.role = io::Role::features;
  c.metadata = {{"task", bank.task},
                {"k", std::to_string(bank.k)},
                {"mode", std::string(to_string(bank.mode))}};
  for (const auto& [layer, h] : bank.layers) c.add_matrix(layer + ".H", h);
  return c;
}

FeatureBank bank_from_checkpoint(const io::Checkpoint& ckpt) {
  if (ckpt.role != io::Role::features) throw ValidationError("checkpoint is not a feature bank");
  FeatureBank bank;
  bank.task = ckpt.require_meta("task");
  bank.k = std::stoi(ckpt.require_meta("k"));
  bank.mode = mode_from_string(ckpt.require_meta("mode"));
  for (const auto& layer : io::layers_with_suffix(ckpt, "H")) {
    bank.layers.emplace(layer, ckpt.matrix(layer + ".H"));
  }
  validate(bank);
  return bank;
}

}  // namespace osrm::subspace
