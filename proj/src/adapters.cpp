#include "osrm/adapters.hpp"

#include "osrm/error.hpp"

#include <cstdio>

namespace osrm::adapters {

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void validate(const LoraAdapter& adapter) {
  if (adapter.r < 1) throw ValidationError("adapter '" + adapter.task + "': rank must be >= 1");
  for (const auto& [name, l] : adapter.layers) {
    if (l.b.cols() != adapter.r || l.a.rows() != adapter.r) {
      throw ValidationError("adapter '" + adapter.task + "', layer '" + name +
                            "': B/A inner dimension does not equal r");
    }
  }
}

LoraAdapter zero_b_adapter(const std::string& task, const LayerMap& a,
                           const std::map<std::string, Eigen::Index>& out_dims, double alpha) {
  LoraAdapter out;
  out.task = task;
  out.alpha = alpha;
  out.r = a.empty() ? 0 : static_cast<int>(a.begin()->second.rows());
  for (const auto& [layer, am] : a) {
    auto it = out_dims.find(layer);
    if (it == out_dims.end()) throw ValidationError("no output width for layer '" + layer + "'");
    out.layers[layer] = {Matrix::Zero(it->second, am.rows()), am};
  }
  validate(out);
  return out;
}

TaskVector lora_delta(const LoraAdapter& adapter) {
  validate(adapter);
  TaskVector tv;
  tv.task = adapter.task;
  const double s = adapter.scale();
  for (const auto& [name, l] : adapter.layers) tv.delta.emplace(name, s * (l.b * l.a));
  return tv;
}

Vector apply_adapter(const Matrix& w0, const LoraLayer& layer, double scale, const Vector& h) {
  if (w0.cols() != h.size() || layer.a.cols() != h.size() || layer.b.rows() != w0.rows() ||
      layer.b.cols() != layer.a.rows()) {
    throw ValidationError("apply_adapter: shape mismatch");
  }
  const Vector low = layer.a * h;
  return w0 * h + scale * (layer.b * low);
}

PosthocResult posthoc_decompose(const TaskVector& delta, const LayerMap& a_tilde) {
  PosthocResult out;
  out.adapter.task = delta.task;
  int r = -1;
  for (const auto& [name, dw] : delta.delta) {
    auto it = a_tilde.find(name);
    if (it == a_tilde.end()) throw ValidationError("posthoc: no Ã for layer '" + name + "'");
    const Matrix& a = it->second;
    if (a.cols() != dw.cols()) throw ValidationError("posthoc: width mismatch on layer '" + name + "'");
    if (r >= 0 && a.rows() != r) throw ValidationError("posthoc: Ã ranks differ across layers");
    r = static_cast<int>(a.rows());
    const Matrix gram = a * a.transpose();
    if ((gram - Matrix::Identity(r, r)).norm() > 1e-6) {
      throw ValidationError("posthoc: Ã rows of layer '" + name + "' are not orthonormal");
    }
    Matrix b_hat = dw * a.transpose();
    const double dw_norm = dw.norm();
    out.residual[name] = dw_norm > 0.0 ? (dw - b_hat * a).norm() / dw_norm : 0.0;
    out.adapter.layers[name] = {std::move(b_hat), a};
  }
  if (r < 1) throw ValidationError("posthoc: empty task vector");
  out.adapter.r = r;
  out.adapter.alpha = r;  // scale 1; ΔW already carries any original scale
  return out;
}

io::Checkpoint to_checkpoint(const LoraAdapter& adapter,
                             std::map<std::string, std::string> extra_metadata) {
  validate(adapter);
  io::Checkpoint c;
  c.role = io::Role::adapter;
  c.metadata = std::move(extra_metadata);
  c.metadata["task"] = adapter.task;
  c.metadata["r"] = std::to_string(adapter.r);
  c.metadata["alpha"] = format_real(adapter.alpha);
  for (const auto& [name, l] : adapter.layers) {
    c.add_matrix(name + ".A", l.a);
    c.add_matrix(name + ".B", l.b);
  }
  return c;
}

LoraAdapter adapter_from_checkpoint(const io::Checkpoint& ckpt) {
  if (ckpt.role != io::Role::adapter) throw ValidationError("checkpoint is not an adapter");
  LoraAdapter a;
  a.task = ckpt.meta("task").value_or("");
  a.r = std::stoi(ckpt.require_meta("r"));
  a.alpha = std::stod(ckpt.require_meta("alpha"));
  for (const auto& layer : io::layers_with_suffix(ckpt, "A")) {
    a.layers[layer] = {ckpt.matrix(layer + ".B"), ckpt.matrix(layer + ".A")};
  }
  validate(a);
  return a;
}

io::Checkpoint to_checkpoint(const TaskVector& tv) {
  io::Checkpoint c;
  c.role = io::Role::task_vector;
  c.metadata["task"] = tv.task;
  for (const auto& [name, d] : tv.delta) c.add_matrix(name + ".W", d);
  return c;
}

TaskVector task_vector_from_checkpoint(const io::Checkpoint& ckpt) {
  if (ckpt.role != io::Role::task_vector) throw ValidationError("checkpoint is not a task vector");
  return {ckpt.meta("task").value_or(""), io::weights_of(ckpt)};
}

TaskVector delta_from_checkpoint(const io::Checkpoint& ckpt) {
  if (ckpt.role == io::Role::adapter) return lora_delta(adapter_from_checkpoint(ckpt));
  return task_vector_from_checkpoint(ckpt);
}

}  // namespace osrm::adapters
