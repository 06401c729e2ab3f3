#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "moppr/model.hpp"

namespace moppr {

/// Everything needed to serve or resume: model shape, feature space,
/// parameters and (optionally) the Adagrad accumulators.
struct Checkpoint {
  ModelConfig config;
  FeatureSpace space;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  Parameters<float> params;
  std::optional<Parameters<float>> accumulators;
};

/// Layout: "MOPPRCKP", u32 version, u32 header length, JSON header
/// (config, space, step, seed, tensor manifest), then every tensor as
/// row-major little-endian float32 at the offsets listed in the manifest.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace moppr
