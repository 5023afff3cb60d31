#pragma once

// Binary parameter checkpoints.
//
// Layout (all integers little-endian):
//   "QEEBMCK1" | u32 version | u32 kind | u32 count
//   count x { u32 name_len | name | u32 rank | rank x u64 dim | u8 frozen }
//   u64 payload_bytes | payload: fp64 values of every parameter in manifest order
//   u64 FNV-1a of the payload bytes

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>

#include "qeebm/models.hpp"

namespace qeebm {

enum class ModelKind : std::uint32_t { kTask = 1, kEnergy = 2, kValue = 3 };

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void save_checkpoint(std::ostream& out, const ParameterStore& store, ModelKind kind);
/// Overwrites the store's values and frozen flags. The store must already have the same
/// manifest (names and shapes, in order); anything else throws CheckpointError.
void load_checkpoint(std::istream& in, ParameterStore& store, ModelKind kind);

/// Writes to a temporary sibling and renames, so readers never see a partial file.
void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store, ModelKind kind);
void load_checkpoint(const std::filesystem::path& path, ParameterStore& store, ModelKind kind);

}  // namespace qeebm
