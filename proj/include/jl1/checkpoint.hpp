#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "jl1/models.hpp"
#include "jl1/params.hpp"
#include "jl1/tensor.hpp"

namespace jl1 {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Container format: magic "JL1V", u32 version, u32-length-prefixed JSON
// metadata (which records the tensor count), then per tensor:
// u32 name length + name bytes, u32 rank, u32 extents, float32
// little-endian payload. Round-trips are bit-exact.
void write_checkpoint(const std::filesystem::path& path, nlohmann::json meta,
                      const std::vector<NamedTensor>& tensors);

struct Checkpoint {
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

// VAE-level wrappers: the model parameters plus (optionally) Adam
// moment buffers stored as extra "adam.m.<name>" / "adam.v.<name>"
// entries, with optimizer scalars and caller metadata in the JSON
// document.
void save_vae_checkpoint(const std::filesystem::path& path, const Vae& model,
                         const AdamState* adam, nlohmann::json extra_meta);

struct LoadedVae {
  Vae model;
  std::optional<AdamState> adam;
  nlohmann::json meta;
};

LoadedVae load_vae_checkpoint(const std::filesystem::path& path);

}  // namespace jl1
