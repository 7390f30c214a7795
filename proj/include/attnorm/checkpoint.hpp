#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "attnorm/config.hpp"
#include "attnorm/network.hpp"

namespace attnorm {

inline constexpr std::uint8_t kCheckpointVersion = 1;

/// One stored tensor. Values are always kept as f32.
struct CheckpointRecord {
  std::string name;
  std::vector<std::size_t> dims;
  ParamKind kind = ParamKind::kWeight;
  std::vector<float> values;
};

struct Checkpoint {
  std::uint8_t version = kCheckpointVersion;
  DType compute_dtype = DType::kF32;
  std::string config_text;
  std::string rng_state;
  std::vector<CheckpointRecord> records;
};

/// Layout (little-endian): "ANCK", u8 version, u8 dtype, u32 + config text,
/// u32 + rng text, u32 record count, then per record: u16 + name, u8 rank,
/// u32 dims, u8 value dtype (0 = f32), u8 kind, f32 values.
std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::string& bytes);

template <class T>
Checkpoint make_checkpoint(Network<T>& net, const RunConfig& cfg, const std::string& rng_state);

/// Copies records into the network by name; shapes and order must match.
template <class T>
void apply_checkpoint(const Checkpoint& ck, Network<T>& net);

template <class T>
void save_checkpoint(const std::string& path, Network<T>& net, const RunConfig& cfg, const std::string& rng_state);

Checkpoint read_checkpoint(const std::string& path);

/// Rebuilds the network from the config echo and loads the weights.
template <class T>
std::unique_ptr<Network<T>> load_network(const Checkpoint& ck);

}  // namespace attnorm
