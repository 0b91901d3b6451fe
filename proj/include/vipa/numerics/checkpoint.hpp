#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "vipa/numerics/layers.hpp"

// Binary parameter checkpoint:
//   "VIPA1" | u8 precision (4 = float32, 8 = float64) | u32 entry count
//   per entry: u32 name length | name bytes | u32 rank | u64 dims[rank] | values
// All integers and values little-endian.

namespace vipa {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Precision : std::uint8_t { f32 = 4, f64 = 8 };

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  Precision precision = Precision::f32;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

template <typename T>
constexpr Precision precision_of() {
  return sizeof(T) == 4 ? Precision::f32 : Precision::f64;
}

template <typename T>
Checkpoint snapshot_parameters(const ParameterList<T>& params);

/// Copies checkpoint values into `params`. Every parameter must be present
/// with an identical shape; extra checkpoint entries are ignored.
template <typename T>
void restore_parameters(ParameterList<T>& params, const Checkpoint& ckpt);

}  // namespace vipa
