#include "osrm/error.hpp"
#include "osrm/harness.hpp"

namespace osrm::harness {

namespace {

const adapters::LoraLayer* adapter_layer(const LoraAdapter* adapter, const std::string& name) {
  if (!adapter) return nullptr;
  auto it = adapter->layers.find(name);
  return it == adapter->layers.end() ? nullptr : &it->second;
}

int layer_count(const LayerMap& weights) {
  const int n = static_cast<int>(weights.size());
  for (int i = 0; i < n; ++i) {
    if (!weights.count(layer_name(i))) {
      throw ValidationError("model layers must be named layer0..layer" + std::to_string(n - 1));
    }
  }
  return n;
}

}  // namespace

std::string layer_name(int index) {
  return "layer" + std::to_string(index);
}

Matrix forward(const LayerMap& weights, const Matrix& x, const LoraAdapter* adapter,
               std::vector<Matrix>* layer_inputs) {
  const int layers = layer_count(weights);
  const double s = adapter ? adapter->scale() : 0.0;
  Matrix h = x;
  for (int i = 0; i < layers; ++i) {
    const std::string name = layer_name(i);
    const Matrix& w = weights.at(name);
    if (h.cols() != w.cols()) throw ValidationError("forward: input width mismatch at " + name);
    if (layer_inputs) layer_inputs->push_back(h);
    Matrix pre = h * w.transpose();
    if (const auto* l = adapter_layer(adapter, name)) {
      pre.noalias() += s * ((h * l->a.transpose()) * l->b.transpose());
    }
    h = i + 1 < layers ? Matrix(pre.array().tanh().matrix()) : std::move(pre);
  }
  return h;
}

double mse_loss(const LayerMap& weights, const LoraAdapter* adapter, const Matrix& x,
                const Matrix& y) {
  const Matrix out = forward(weights, x, adapter);
  if (out.rows() != y.rows() || out.cols() != y.cols()) {
    throw ValidationError("mse_loss: target shape mismatch");
  }
  return (out - y).squaredNorm() / static_cast<double>(x.rows());
}

LoraGradients lora_gradients(const LayerMap& weights, const LoraAdapter& adapter, const Matrix& x,
                             const Matrix& y) {
  std::vector<Matrix> inputs;
  const Matrix out = forward(weights, x, &adapter, &inputs);
  const double inv_b = 1.0 / static_cast<double>(x.rows());
  const double s = adapter.scale();

  LoraGradients res;
  const Matrix err = out - y;
  res.loss = err.squaredNorm() * inv_b;
  Matrix g = (2.0 * inv_b) * err;  // dL/d(pre-activation) of the current layer

  for (int i = static_cast<int>(inputs.size()) - 1; i >= 0; --i) {
    const std::string name = layer_name(i);
    const Matrix& h = inputs[i];
    const Matrix& w = weights.at(name);
    Matrix dh = g * w;
    if (const auto* l = adapter_layer(&adapter, name)) {
      const Matrix u = h * l->a.transpose();
      const Matrix gb = g * l->b;
      res.grads[name] = {s * (g.transpose() * u), s * (gb.transpose() * h)};
      dh.noalias() += s * (gb * l->a);
    }
    if (i > 0) g = dh.cwiseProduct((1.0 - h.array().square()).matrix());
  }
  return res;
}

Vector weight_gradient(const LayerMap& weights, const Vector& x, const Vector& y) {
  std::vector<Matrix> inputs;
  const Matrix out = forward(weights, x.transpose(), nullptr, &inputs);
  Matrix g = 2.0 * (out - y.transpose());

  std::vector<Matrix> grads(inputs.size());
  for (int i = static_cast<int>(inputs.size()) - 1; i >= 0; --i) {
    const Matrix& h = inputs[i];
    const Matrix& w = weights.at(layer_name(i));
    grads[i] = g.transpose() * h;
    if (i > 0) g = (g * w).cwiseProduct((1.0 - h.array().square()).matrix());
  }
  Eigen::Index total = 0;
  for (const auto& gm : grads) total += gm.size();
  Vector flat(total);
  Eigen::Index at = 0;
  for (const auto& gm : grads) {
    flat.segment(at, gm.size()) = Eigen::Map<const Vector>(gm.data(), gm.size());
    at += gm.size();
  }
  return flat;
}

LayerMap unflatten_like(const LayerMap& like, const Vector& flat) {
  const int layers = layer_count(like);
  LayerMap out;
  Eigen::Index at = 0;
  for (int i = 0; i < layers; ++i) {
    const std::string name = layer_name(i);
    const Matrix& ref = like.at(name);
    if (at + ref.size() > flat.size()) throw ValidationError("unflatten_like: vector too short");
    out.emplace(name, Eigen::Map<const Matrix>(flat.data() + at, ref.rows(), ref.cols()));
    at += ref.size();
  }
  if (at != flat.size()) throw ValidationError("unflatten_like: vector too long");
  return out;
}

}  // namespace osrm::harness
