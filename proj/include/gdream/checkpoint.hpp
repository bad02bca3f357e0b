#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <json.hpp>

#include "gdream/autograd.hpp"
#include "gdream/denoiser.hpp"
#include "gdream/diffusion.hpp"

namespace gdream {

/// First and second moment estimates per parameter name.
struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, ag::Matrix> m;
  std::map<std::string, ag::Matrix> v;

  bool operator==(const AdamState&) const;
};

/// Everything needed to resume training or to sample: model weights, the
/// schedule with its normalization statistics and the optimizer state.
struct Checkpoint {
  DenoiserConfig config;
  NoiseSchedule schedule;
  std::map<std::string, ag::Matrix> params;
  AdamState adam;
  /// Training steps taken so far.
  std::int64_t step = 0;
  /// Free-form run information (seed, embodiments, ...).
  nlohmann::json meta = nlohmann::json::object();

  bool operator==(const Checkpoint&) const;
};

/// Fresh checkpoint with randomly initialized weights.
Checkpoint initial_checkpoint(const DenoiserConfig& config, const NoiseSchedule& schedule, std::uint64_t seed);

Denoiser make_denoiser(const Checkpoint& checkpoint);
/// Copies the current weights of `model` into `checkpoint.params`.
void store_params(Checkpoint& checkpoint, const Denoiser& model);

/// Binary layout: magic "GDRMCKPT", u32 version, u64 header size, JSON header,
/// then little-endian doubles in header order. Values round-trip bitwise.
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace gdream
