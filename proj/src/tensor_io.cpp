#include "osrm/tensor_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace osrm::io {

using json = nlohmann::json;

namespace {

constexpr std::size_t kHeaderSize = 8 + 4 + 8;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

[[noreturn]] void fail(ErrorKind kind, const std::string& msg) {
  throw CheckpointError(kind, msg);
}

}  // namespace

std::string_view to_string(DType d) {
  return d == DType::f32 ? "f32" : "f64";
}

std::string_view to_string(Role r) {
  switch (r) {
    case Role::base: return "base";
    case Role::adapter: return "adapter";
    case Role::task_vector: return "task_vector";
    case Role::merged: return "merged";
    case Role::features: return "features";
  }
  return "base";
}

DType dtype_from_string(std::string_view s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  fail(ErrorKind::unknown_dtype, "unknown dtype '" + std::string(s) + "'");
}

Role role_from_string(std::string_view s) {
  for (Role r : {Role::base, Role::adapter, Role::task_vector, Role::merged, Role::features}) {
    if (to_string(r) == s) return r;
  }
  fail(ErrorKind::malformed_manifest, "unknown role '" + std::string(s) + "'");
}

std::size_t dtype_size(DType d) {
  return d == DType::f32 ? 4 : 8;
}

std::uint64_t TensorEntry::numel() const {
  std::uint64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

bool Checkpoint::has(std::string_view name) const {
  return std::any_of(tensors.begin(), tensors.end(),
                     [&](const TensorEntry& e) { return e.name == name; });
}

const TensorEntry& Checkpoint::entry(std::string_view name) const {
  for (const auto& e : tensors) {
    if (e.name == name) return e;
  }
  throw ValidationError("checkpoint has no tensor '" + std::string(name) + "'");
}

void Checkpoint::add_matrix(const std::string& name, const Matrix& m, DType dtype) {
  if (has(name)) throw ValidationError("duplicate tensor name '" + name + "'");
  TensorEntry e;
  e.name = name;
  e.dtype = dtype;
  e.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  e.offset = blob.size();
  e.nbytes = e.numel() * dtype_size(dtype);
  blob.resize(blob.size() + e.nbytes);
  std::uint8_t* dst = blob.data() + e.offset;
  const double* src = m.data();
  const auto count = static_cast<std::size_t>(m.size());
  if (dtype == DType::f64) {
    if (count) std::memcpy(dst, src, count * sizeof(double));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const float f = static_cast<float>(src[i]);
      std::memcpy(dst + i * sizeof(float), &f, sizeof(float));
    }
  }
  tensors.push_back(std::move(e));
}

Matrix Checkpoint::matrix(std::string_view name) const {
  const TensorEntry& e = entry(name);
  Eigen::Index rows = 1, cols = 1;
  if (e.shape.size() == 1) {
    cols = static_cast<Eigen::Index>(e.shape[0]);
  } else if (e.shape.size() == 2) {
    rows = static_cast<Eigen::Index>(e.shape[0]);
    cols = static_cast<Eigen::Index>(e.shape[1]);
  } else if (!e.shape.empty()) {
    throw ValidationError("tensor '" + e.name + "' has rank " +
                          std::to_string(e.shape.size()) + ", expected 1 or 2");
  }
  if (e.offset + e.nbytes > blob.size()) {
    fail(ErrorKind::truncated_blob, "tensor '" + e.name + "' extends past the blob");
  }
  Matrix m(rows, cols);
  const std::uint8_t* src = blob.data() + e.offset;
  const auto count = static_cast<std::size_t>(m.size());
  if (e.dtype == DType::f64) {
    if (count) std::memcpy(m.data(), src, count * sizeof(double));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      float f;
      std::memcpy(&f, src + i * sizeof(float), sizeof(float));
      m.data()[i] = f;
    }
  }
  return m;
}

std::optional<std::string> Checkpoint::meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) return std::nullopt;
  return it->second;
}

const std::string& Checkpoint::require_meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw ValidationError("checkpoint metadata lacks '" + key + "'");
  return it->second;
}

void validate(const Checkpoint& ckpt) {
  if (ckpt.format_version != kFormatVersion) {
    fail(ErrorKind::unsupported_version,
         "unsupported format version " + std::to_string(ckpt.format_version));
  }
  std::set<std::string> names;
  std::uint64_t expected_offset = 0;
  for (const auto& e : ckpt.tensors) {
    if (e.name.empty()) fail(ErrorKind::invalid_checkpoint, "tensor with empty name");
    if (!names.insert(e.name).second) {
      fail(ErrorKind::invalid_checkpoint, "duplicate tensor name '" + e.name + "'");
    }
    if (e.nbytes != e.numel() * dtype_size(e.dtype)) {
      fail(ErrorKind::invalid_checkpoint,
           "tensor '" + e.name + "': nbytes does not match shape and dtype");
    }
    if (e.offset < expected_offset) {
      fail(ErrorKind::overlapping_entries, "tensor '" + e.name + "' overlaps its predecessor");
    }
    if (e.offset != expected_offset) {
      fail(ErrorKind::invalid_checkpoint, "tensor '" + e.name + "' leaves a gap in the blob");
    }
    if (e.offset + e.nbytes > ckpt.blob.size()) {
      fail(ErrorKind::truncated_blob, "tensor '" + e.name + "' extends past the blob");
    }
    expected_offset = e.offset + e.nbytes;
  }
  if (expected_offset != ckpt.blob.size()) {
    fail(ErrorKind::invalid_checkpoint, "blob has trailing bytes not owned by any tensor");
  }

  if (ckpt.role == Role::adapter) {
    for (const auto& layer : layers_with_suffix(ckpt, "A")) {
      const std::string b = layer + ".B";
      if (!ckpt.has(b)) fail(ErrorKind::invalid_checkpoint, "adapter layer '" + layer + "' lacks B");
      const auto& ea = ckpt.entry(layer + ".A");
      const auto& eb = ckpt.entry(b);
      if (ea.shape.size() != 2 || eb.shape.size() != 2 || ea.shape[0] != eb.shape[1]) {
        fail(ErrorKind::invalid_checkpoint,
             "adapter layer '" + layer + "': inner dimension of B and A disagree");
      }
    }
    for (const auto& layer : layers_with_suffix(ckpt, "B")) {
      if (!ckpt.has(layer + ".A")) {
        fail(ErrorKind::invalid_checkpoint, "adapter layer '" + layer + "' lacks A");
      }
    }
  }
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  validate(ckpt);
  json tensors = json::array();
  for (const auto& e : ckpt.tensors) {
    tensors.push_back({{"name", e.name},
                       {"dtype", to_string(e.dtype)},
                       {"shape", e.shape},
                       {"offset", e.offset},
                       {"nbytes", e.nbytes}});
  }
  json manifest = {{"role", to_string(ckpt.role)},
                   {"metadata", ckpt.metadata},
                   {"tensors", tensors}};
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + text.size() + ckpt.blob.size());
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put_le<std::uint32_t>(out, ckpt.format_version);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), ckpt.blob.begin(), ckpt.blob.end());
  return out;
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kMagic.size() ||
      !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    fail(ErrorKind::bad_magic, "bad magic: not an OSRM checkpoint");
  }
  if (bytes.size() < kHeaderSize) fail(ErrorKind::truncated_blob, "truncated header");

  Checkpoint ckpt;
  ckpt.format_version = get_le<std::uint32_t>(bytes.data() + 8);
  if (ckpt.format_version != kFormatVersion) {
    fail(ErrorKind::unsupported_version,
         "unsupported format version " + std::to_string(ckpt.format_version));
  }
  const auto manifest_len = get_le<std::uint64_t>(bytes.data() + 12);
  if (manifest_len > bytes.size() - kHeaderSize) {
    fail(ErrorKind::truncated_blob, "manifest length exceeds file size");
  }
  const auto* mbegin = reinterpret_cast<const char*>(bytes.data() + kHeaderSize);

  json manifest;
  try {
    manifest = json::parse(mbegin, mbegin + manifest_len);
    ckpt.role = role_from_string(manifest.at("role").get<std::string>());
    ckpt.metadata = manifest.at("metadata").get<std::map<std::string, std::string>>();
    for (const auto& t : manifest.at("tensors")) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      e.dtype = dtype_from_string(t.at("dtype").get<std::string>());
      e.shape = t.at("shape").get<std::vector<std::uint64_t>>();
      e.offset = t.at("offset").get<std::uint64_t>();
      e.nbytes = t.at("nbytes").get<std::uint64_t>();
      ckpt.tensors.push_back(std::move(e));
    }
  } catch (const json::exception& ex) {
    fail(ErrorKind::malformed_manifest, std::string("malformed manifest: ") + ex.what());
  }

  ckpt.blob.assign(bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderSize + manifest_len),
                   bytes.end());
  validate(ckpt);
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("failed reading '" + path.string() + "'");
  return deserialize(bytes);
}

std::vector<std::string> layers_with_suffix(const Checkpoint& ckpt, std::string_view suffix) {
  std::vector<std::string> out;
  for (const auto& e : ckpt.tensors) {
    const auto dot = e.name.rfind('.');
    if (dot == std::string::npos) continue;
    if (std::string_view(e.name).substr(dot + 1) == suffix) out.push_back(e.name.substr(0, dot));
  }
  std::sort(out.begin(), out.end());
  return out;
}

LayerMap weights_of(const Checkpoint& ckpt) {
  LayerMap w;
  for (const auto& layer : layers_with_suffix(ckpt, "W")) w[layer] = ckpt.matrix(layer + ".W");
  if (w.empty()) throw ValidationError("checkpoint holds no '<layer>.W' tensors");
  return w;
}

Checkpoint weights_checkpoint(const LayerMap& weights, Role role,
                              std::map<std::string, std::string> metadata) {
  Checkpoint c;
  c.role = role;
  c.metadata = std::move(metadata);
  for (const auto& [layer, w] : weights) c.add_matrix(layer + ".W", w);
  return c;
}

}  // namespace osrm::io
