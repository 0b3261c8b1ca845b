#pragma once

#include <string>
#include <utility>
#include <vector>

#include "groupalign/tensor.hpp"

namespace groupalign {

// Parameter fragments keyed by slash-separated names, e.g.
// "reward/plugin/text/cross/0/w".
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Plain-text manifest (name, shape, byte offset into the data section),
// a DATA separator line, then raw little-endian 64-bit floats.
void save_checkpoint(const std::string& path, const NamedParams& params);

// Fills each listed tensor from its entry in the file. The file may hold
// additional names; a missing requested name or a shape mismatch is an
// error. Gradients are untouched.
void load_checkpoint(const std::string& path, NamedParams& params);

// Manifest names in file order.
std::vector<std::string> checkpoint_names(const std::string& path);

}  // namespace groupalign
