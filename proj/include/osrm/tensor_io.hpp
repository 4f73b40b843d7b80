#pragma once

// Binary checkpoint container shared by every CLI stage.
//
// Layout (all integers little-endian):
//   8 bytes  magic "OSRMCKPT"
//   u32      format version
//   u64      manifest byte length
//   ...      UTF-8 JSON manifest (sorted keys, compact)
//   ...      raw tensor blob, row-major IEEE-754

#include "osrm/error.hpp"
#include "osrm/types.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace osrm::io {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::string_view kMagic = "OSRMCKPT";

enum class DType { f32, f64 };
enum class Role { base, adapter, task_vector, merged, features };

std::string_view to_string(DType d);
std::string_view to_string(Role r);
DType dtype_from_string(std::string_view s);
Role role_from_string(std::string_view s);
std::size_t dtype_size(DType d);

enum class ErrorKind {
  bad_magic,
  unsupported_version,
  truncated_blob,
  overlapping_entries,
  unknown_dtype,
  malformed_manifest,
  invalid_checkpoint,
};

class CheckpointError : public ValidationError {
 public:
  CheckpointError(ErrorKind kind, const std::string& what)
      : ValidationError(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct TensorEntry {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::uint64_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;

  std::uint64_t numel() const;
  bool operator==(const TensorEntry&) const = default;
};

struct Checkpoint {
  std::uint32_t format_version = kFormatVersion;
  Role role = Role::base;
  std::map<std::string, std::string> metadata;
  std::vector<TensorEntry> tensors;
  std::vector<std::uint8_t> blob;

  bool operator==(const Checkpoint&) const = default;

  bool has(std::string_view name) const;
  const TensorEntry& entry(std::string_view name) const;

  /// Appends a 2-D tensor at the end of the blob. Values are narrowed when
  /// dtype is f32.
  void add_matrix(const std::string& name, const Matrix& m, DType dtype = DType::f64);

  /// Reads a rank-1 or rank-2 tensor back as an f64 matrix. A rank-1 tensor
  /// of length n becomes 1 x n.
  Matrix matrix(std::string_view name) const;

  std::optional<std::string> meta(const std::string& key) const;
  const std::string& require_meta(const std::string& key) const;
};

/// Throws CheckpointError naming the offending entry.
void validate(const Checkpoint& ckpt);

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Layer names (prefix before the last '.') of tensors with the given suffix,
/// e.g. suffix "W" on {"layer0.W", "layer1.W"} -> {"layer0", "layer1"}.
std::vector<std::string> layers_with_suffix(const Checkpoint& ckpt, std::string_view suffix);

/// Model weights stored as "<layer>.W".
LayerMap weights_of(const Checkpoint& ckpt);
Checkpoint weights_checkpoint(const LayerMap& weights, Role role,
                              std::map<std::string, std::string> metadata = {});

}  // namespace osrm::io
