#pragma once

#include <filesystem>

#include "branchkit/nn.hpp"

namespace branchkit::nn {

// Checkpoint layout: `manifest.json` describing each tensor (name, shape,
// dtype, byte offset) plus `params.bin`, a flat blob of little-endian IEEE-754
// doubles in manifest order.
void save_checkpoint(const ParamMap& params, const std::filesystem::path& dir);

// Loads values into the given parameters; every manifest entry must match an
// existing parameter name and shape.
void load_checkpoint(ParamMap& params, const std::filesystem::path& dir);

}  // namespace branchkit::nn
