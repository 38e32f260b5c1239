#pragma once

#include <string>

#include "cspd/diffusion.hpp"
#include "cspd/model.hpp"

namespace cspd {

// Self-describing little-endian binary container; doubles round-trip
// bit-exactly. Throws std::runtime_error on I/O or format errors.
void save_checkpoint(const std::string& path, const ToyARModel& model);
void save_checkpoint(const std::string& path, const DiffusionHead& head);

ToyARModel load_model_checkpoint(const std::string& path);
DiffusionHead load_head_checkpoint(const std::string& path);

} // namespace cspd
