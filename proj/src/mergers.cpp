#include "osrm/mergers.hpp"

#include "osrm/error.hpp"
#include "osrm/kernels.hpp"
#include "osrm/linalg.hpp"

#include <cmath>
#include <set>

namespace osrm::mergers {

namespace {

std::span<const double> flat(const Matrix& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

std::span<double> flat(Matrix& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

void require_nonempty(std::size_t n, const char* what) {
  if (n == 0) throw ValidationError(std::string(what) + ": no inputs to merge");
}

// Every input must carry exactly the base's layers at the base's shapes.
void check_conform(const LayerMap& base, const LayerMap& other, const std::string& label) {
  if (other.size() != base.size()) {
    throw ValidationError(label + ": layer set differs from the base model");
  }
  for (const auto& [name, w] : base) {
    auto it = other.find(name);
    if (it == other.end()) throw ValidationError(label + ": missing layer '" + name + "'");
    if (it->second.rows() != w.rows() || it->second.cols() != w.cols()) {
      throw ValidationError(label + ": shape mismatch on layer '" + name + "'");
    }
  }
}

void check_deltas(const LayerMap& base, std::span<const TaskVector> deltas, const char* what) {
  require_nonempty(deltas.size(), what);
  for (std::size_t t = 0; t < deltas.size(); ++t) {
    check_conform(base, deltas[t].delta,
                  std::string(what) + " delta " + std::to_string(t) + " ('" + deltas[t].task + "')");
  }
}

kernels::ConstSpans layer_spans(std::span<const TaskVector> deltas, const std::string& layer) {
  kernels::ConstSpans out;
  out.reserve(deltas.size());
  for (const auto& d : deltas) out.push_back(flat(d.delta.at(layer)));
  return out;
}

kernels::ConstSpans layer_spans(std::span<const LayerMap> maps, const std::string& layer) {
  kernels::ConstSpans out;
  out.reserve(maps.size());
  for (const auto& m : maps) out.push_back(flat(m.at(layer)));
  return out;
}

std::string task_label(const TaskVector& tv, std::size_t index) {
  return tv.task.empty() ? "T" + std::to_string(index + 1) : tv.task;
}

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::ta: return "ta";
    case Method::ties: return "ties";
    case Method::fisher: return "fisher";
    case Method::regmean: return "regmean";
    case Method::emr: return "emr";
  }
  return "ta";
}

Method method_from_string(std::string_view s) {
  for (Method m : {Method::ta, Method::ties, Method::fisher, Method::regmean, Method::emr}) {
    if (to_string(m) == s) return m;
  }
  throw ValidationError("unknown merge method '" + std::string(s) + "'");
}

MergeConfig default_config(Method m) {
  MergeConfig cfg;
  cfg.method = m;
  cfg.lambda = m == Method::ta ? 0.3 : 1.0;
  return cfg;
}

void validate(const MergeConfig& cfg) {
  if (!std::isfinite(cfg.lambda)) throw ValidationError("lambda must be finite");
  if (!(cfg.keep_fraction > 0.0 && cfg.keep_fraction <= 1.0)) {
    throw ValidationError("keep_fraction must lie in (0, 1]");
  }
  if (!(cfg.gamma >= 0.0 && cfg.gamma <= 1.0)) throw ValidationError("gamma must lie in [0, 1]");
  if (!(cfg.fisher_floor > 0.0)) throw ValidationError("fisher floor must be positive");
}

LayerMap merge_ta(const LayerMap& base, std::span<const TaskVector> deltas, double lambda) {
  check_deltas(base, deltas, "merge_ta");
  LayerMap out;
  for (const auto& [name, w0] : base) {
    Matrix w(w0.rows(), w0.cols());
    kernels::task_arithmetic(flat(w0), layer_spans(deltas, name), lambda, flat(w));
    out.emplace(name, std::move(w));
  }
  return out;
}

LayerMap merge_ties(const LayerMap& base, std::span<const TaskVector> deltas, double lambda,
                    double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ValidationError("merge_ties: keep_fraction must lie in (0, 1]");
  }
  check_deltas(base, deltas, "merge_ties");
  LayerMap out;
  for (const auto& [name, w0] : base) {
    std::vector<Matrix> trimmed(deltas.size(), Matrix(w0.rows(), w0.cols()));
    kernels::ConstSpans views;
    for (std::size_t t = 0; t < deltas.size(); ++t) {
      kernels::ties_trim(flat(deltas[t].delta.at(name)), keep_fraction, flat(trimmed[t]));
      views.push_back(flat(trimmed[t]));
    }
    Matrix merged(w0.rows(), w0.cols());
    kernels::ties_disjoint_merge(views, flat(merged));
    out.emplace(name, w0 + lambda * merged);
  }
  return out;
}

LayerMap merge_fisher(const LayerMap& base, std::span<const LayerMap> models,
                      std::span<const LayerMap> fishers, double floor) {
  require_nonempty(models.size(), "merge_fisher");
  if (!(floor > 0.0)) throw ValidationError("merge_fisher: floor must be positive");
  if (!fishers.empty() && fishers.size() != models.size()) {
    throw ValidationError("merge_fisher: need one Fisher per model");
  }
  for (std::size_t t = 0; t < models.size(); ++t) {
    check_conform(base, models[t], "merge_fisher model " + std::to_string(t));
  }
  for (std::size_t t = 0; t < fishers.size(); ++t) {
    check_conform(base, fishers[t], "merge_fisher fisher " + std::to_string(t));
    for (const auto& [name, f] : fishers[t]) {
      if ((f.array() < 0.0).any() || !f.allFinite()) {
        throw ValidationError("merge_fisher: Fisher weights of layer '" + name +
                              "' must be finite and non-negative");
      }
    }
  }
  LayerMap out;
  for (const auto& [name, w0] : base) {
    Matrix w(w0.rows(), w0.cols());
    kernels::fisher_weighted_mean(layer_spans(models, name), layer_spans(fishers, name), floor,
                                  flat(w));
    out.emplace(name, std::move(w));
  }
  return out;
}

LayerMap merge_regmean(const LayerMap& base, std::span<const LayerMap> models,
                       std::span<const LayerMap> grams, double gamma) {
  require_nonempty(models.size(), "merge_regmean");
  if (grams.size() != models.size()) throw ValidationError("merge_regmean: need one Gram per model");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValidationError("merge_regmean: gamma outside [0, 1]");
  for (std::size_t t = 0; t < models.size(); ++t) {
    check_conform(base, models[t], "merge_regmean model " + std::to_string(t));
  }

  LayerMap out;
  for (const auto& [name, w0] : base) {
    const auto n = w0.cols();
    Matrix num = Matrix::Zero(w0.rows(), n);
    Matrix den = Matrix::Zero(n, n);
    for (std::size_t t = 0; t < models.size(); ++t) {
      auto it = grams[t].find(name);
      if (it == grams[t].end()) {
        throw ValidationError("merge_regmean: Gram " + std::to_string(t) + " lacks layer '" + name + "'");
      }
      const Matrix& g = it->second;
      if (g.rows() != n || g.cols() != n) {
        throw ValidationError("merge_regmean: Gram shape mismatch on layer '" + name + "'");
      }
      const linalg::SymEig eig = linalg::sym_eig(g);  // rejects asymmetric input
      const double gnorm = g.norm();
      if (eig.values.size() && eig.values.minCoeff() < -1e-9 * std::max(1.0, gnorm)) {
        throw ValidationError("merge_regmean: Gram of layer '" + name + "' is not PSD");
      }
      Matrix damped = gamma * g;
      damped.diagonal() = g.diagonal();
      num += models[t].at(name) * damped;
      den += damped;
    }
    out.emplace(name, num * linalg::sym_pinv(den, 1e-10));
  }
  return out;
}

double EmrBundle::rescaler(std::size_t task, const std::string& layer) const {
  const auto& r = rescalers.at(task);
  if (per_layer) return r.at(layer);
  return r.at("");
}

EmrBundle merge_emr(const LayerMap& base, std::span<const TaskVector> deltas,
                    bool per_layer_rescalers) {
  check_deltas(base, deltas, "merge_emr");
  EmrBundle b;
  b.per_layer = per_layer_rescalers;
  std::set<std::string> seen;
  for (std::size_t t = 0; t < deltas.size(); ++t) {
    b.tasks.push_back(task_label(deltas[t], t));
    if (!seen.insert(b.tasks.back()).second) {
      throw ValidationError("merge_emr: duplicate task name '" + b.tasks.back() + "'");
    }
  }
  b.masks.resize(deltas.size());
  b.rescalers.resize(deltas.size());

  std::vector<double> num(deltas.size(), 0.0), den(deltas.size(), 0.0);
  for (const auto& [name, w0] : base) {
    Matrix uni(w0.rows(), w0.cols());
    kernels::emr_unify(layer_spans(deltas, name), flat(uni));
    for (std::size_t t = 0; t < deltas.size(); ++t) {
      const Matrix& tau = deltas[t].delta.at(name);
      Matrix mask = ((tau.array() * uni.array()) > 0.0).cast<double>().matrix();
      const double n_t = tau.cwiseAbs().sum();
      const double d_t = (mask.array() * uni.array()).abs().sum();
      if (per_layer_rescalers) {
        b.rescalers[t][name] = d_t > 0.0 ? n_t / d_t : 1.0;
      } else {
        num[t] += n_t;
        den[t] += d_t;
      }
      b.masks[t].emplace(name, std::move(mask));
    }
    b.tau_uni.emplace(name, std::move(uni));
  }
  if (!per_layer_rescalers) {
    for (std::size_t t = 0; t < deltas.size(); ++t) {
      b.rescalers[t][""] = den[t] > 0.0 ? num[t] / den[t] : 1.0;
    }
  }
  return b;
}

LayerMap emr_task_weights(const LayerMap& base, const EmrBundle& bundle, std::size_t task) {
  if (task >= bundle.masks.size()) throw ValidationError("emr: task index out of range");
  LayerMap out;
  for (const auto& [name, w0] : base) {
    const Matrix& uni = bundle.tau_uni.at(name);
    const Matrix& mask = bundle.masks[task].at(name);
    if (uni.rows() != w0.rows() || uni.cols() != w0.cols()) {
      throw ValidationError("emr: shape mismatch on layer '" + name + "'");
    }
    out.emplace(name, w0 + bundle.rescaler(task, name) * mask.cwiseProduct(uni));
  }
  return out;
}

LayerMap compute_gram(const subspace::FeatureBank& bank) {
  if (bank.mode != subspace::FeatureMode::full) {
    throw ValidationError("compute_gram: averaged feature banks cannot form a Gram matrix");
  }
  LayerMap out;
  for (const auto& [name, h] : bank.layers) out.emplace(name, linalg::gram(h));
  return out;
}

Vector compute_fisher_diag(const GradientFn& grad, const Matrix& xs, const Matrix& ys) {
  if (xs.rows() == 0) throw ValidationError("compute_fisher_diag: empty batch");
  if (ys.rows() != xs.rows()) throw ValidationError("compute_fisher_diag: inputs and targets differ in count");
  Vector acc;
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    const Vector g = grad(xs.row(i).transpose(), ys.row(i).transpose());
    if (acc.size() == 0) acc = Vector::Zero(g.size());
    if (g.size() != acc.size()) throw ValidationError("compute_fisher_diag: gradient size changed");
    acc += g.cwiseAbs2();
  }
  return acc / static_cast<double>(xs.rows());
}

TaskVector delta_between(const LayerMap& base, const LayerMap& model, const std::string& task) {
  check_conform(base, model, "task vector '" + task + "'");
  TaskVector tv;
  tv.task = task;
  for (const auto& [name, w0] : base) tv.delta.emplace(name, model.at(name) - w0);
  return tv;
}

io::Checkpoint merged_checkpoint(const LayerMap& weights, const MergeConfig& cfg) {
  std::map<std::string, std::string> meta{{"method", std::string(to_string(cfg.method))}};
  switch (cfg.method) {
    case Method::ta:
      meta["lambda"] = adapters::format_real(cfg.lambda);
      break;
    case Method::ties:
      meta["lambda"] = adapters::format_real(cfg.lambda);
      meta["keep_fraction"] = adapters::format_real(cfg.keep_fraction);
      break;
    case Method::fisher:
      meta["fisher_floor"] = adapters::format_real(cfg.fisher_floor);
      break;
    case Method::regmean:
      meta["gamma"] = adapters::format_real(cfg.gamma);
      break;
    case Method::emr:
      break;
  }
  return io::weights_checkpoint(weights, io::Role::merged, std::move(meta));
}

io::Checkpoint to_checkpoint(const EmrBundle& bundle) {
  io::Checkpoint c;
  c.role = io::Role::merged;
  c.metadata["method"] = "emr";
  c.metadata["tasks"] = std::to_string(bundle.tasks.size());
  c.metadata["per_layer_rescalers"] = bundle.per_layer ? "1" : "0";
  for (std::size_t t = 0; t < bundle.tasks.size(); ++t) {
    const std::string& task = bundle.tasks[t];
    c.metadata["task." + std::to_string(t)] = task;
    for (const auto& [layer, v] : bundle.rescalers[t]) {
      const std::string key = layer.empty() ? "rescaler." + task : "rescaler." + task + "." + layer;
      c.metadata[key] = adapters::format_real(v);
    }
  }
  for (const auto& [layer, uni] : bundle.tau_uni) {
    c.add_matrix(layer + ".tau_uni", uni);
    for (std::size_t t = 0; t < bundle.tasks.size(); ++t) {
      c.add_matrix(layer + ".mask." + bundle.tasks[t], bundle.masks[t].at(layer), io::DType::f32);
    }
  }
  return c;
}

EmrBundle emr_from_checkpoint(const io::Checkpoint& ckpt) {
  if (ckpt.meta("method") != "emr") throw ValidationError("checkpoint is not an EMR bundle");
  EmrBundle b;
  b.per_layer = ckpt.require_meta("per_layer_rescalers") == "1";
  const int n = std::stoi(ckpt.require_meta("tasks"));
  for (int t = 0; t < n; ++t) b.tasks.push_back(ckpt.require_meta("task." + std::to_string(t)));
  b.masks.resize(b.tasks.size());
  b.rescalers.resize(b.tasks.size());
  for (const auto& layer : io::layers_with_suffix(ckpt, "tau_uni")) {
    b.tau_uni.emplace(layer, ckpt.matrix(layer + ".tau_uni"));
    for (std::size_t t = 0; t < b.tasks.size(); ++t) {
      b.masks[t].emplace(layer, ckpt.matrix(layer + ".mask." + b.tasks[t]));
      if (b.per_layer) {
        b.rescalers[t][layer] = std::stod(ckpt.require_meta("rescaler." + b.tasks[t] + "." + layer));
      }
    }
  }
  if (!b.per_layer) {
    for (std::size_t t = 0; t < b.tasks.size(); ++t) {
      b.rescalers[t][""] = std::stod(ckpt.require_meta("rescaler." + b.tasks[t]));
    }
  }
  return b;
}

}  // namespace osrm::mergers
