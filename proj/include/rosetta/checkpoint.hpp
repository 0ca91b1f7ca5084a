#pragma once

#include <filesystem>
#include <stdexcept>

#include "rosetta/vae.hpp"

namespace rosetta {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes a checkpoint: a magic line, a one-line JSON manifest (architecture,
/// provenance, tensor names and shapes) and then every tensor as
/// little-endian doubles in manifest order.
void save_checkpoint(const std::filesystem::path& path, const ModelState& model);
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace rosetta
