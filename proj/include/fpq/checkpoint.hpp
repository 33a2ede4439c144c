#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fpq/model.hpp"
#include "fpq/tensor.hpp"

namespace fpq {

// Layout: version byte, "FPQC", u32 entry count, then per entry: u32 name
// length, name bytes, u8 dtype, u8 ndim, i64 dims, u64 payload length,
// little-endian payload.
inline constexpr std::uint8_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 0, I32 = 1, U8 = 2, I64 = 3 };

struct CheckpointEntry {
  DType dtype = DType::F32;
  Shape shape;
  std::vector<std::uint8_t> bytes;
};

class Checkpoint {
 public:
  void put(const std::string& name, const Tensor& t);
  void put_floats(const std::string& name, const Shape& shape, std::span<const float> values);
  void put_ints(const std::string& name, const std::vector<std::int32_t>& values);
  void put_i64(const std::string& name, std::int64_t value);
  void put_string(const std::string& name, const std::string& value);

  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  const CheckpointEntry& entry(const std::string& name) const;
  Tensor tensor(const std::string& name) const;
  std::vector<std::int32_t> ints(const std::string& name) const;
  std::int64_t i64(const std::string& name) const;
  std::string str(const std::string& name) const;
  std::vector<std::string> names() const;

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  std::map<std::string, CheckpointEntry> entries_;
};

// Model weights, quantizer state and the topology config under `prefix`.
void save_model(Checkpoint& ckpt, const LayeredModel& model, const std::string& prefix = "model.");
LayeredModel load_model(const Checkpoint& ckpt, const std::string& prefix = "model.");

}  // namespace fpq
