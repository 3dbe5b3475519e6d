#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "ekd/nn.hpp"

namespace ekd::io {

// Layout (all integers little-endian):
//   "EKD1" | u32 version | u32 entry count
//   per entry: u32 name length | name bytes (UTF-8) | u8 dtype | u32 rank |
//              u64 dims[rank] | raw little-endian values
inline constexpr char kCheckpointMagic[4] = {'E', 'K', 'D', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { float32 = 1, float64 = 2 };

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string name;
  ad::Shape shape;
  std::variant<std::vector<float>, std::vector<double>> values;

  DType dtype() const;
  std::size_t numel() const;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Snapshot of named tensors in their native precision.
template <typename T>
Checkpoint make_checkpoint(const std::vector<nn::NamedTensor<T>>& tensors);

/// Copies checkpoint values into same-named tensors. Every target tensor must
/// be present with a matching shape; extra checkpoint entries are an error
/// unless `allow_extra` is set.
template <typename T>
void load_into(const Checkpoint& checkpoint, const std::vector<nn::NamedTensor<T>>& tensors,
               bool allow_extra = false);

}  // namespace ekd::io
