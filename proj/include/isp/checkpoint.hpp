#pragma once

#include <string>
#include <vector>

#include "isp/train.hpp"

namespace isp {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Little-endian binary container (magic "ISPCKPT1"): model spec, parameter
// table, optimizer moments, data-stream state, schedule counters. Round trips
// are bit-exact, so resumed training continues identically.
std::vector<uint8_t> serialize_checkpoint(const TrainState& st);
TrainState deserialize_checkpoint(const std::vector<uint8_t>& bytes);
void save_checkpoint(const TrainState& st, const std::string& path);
TrainState load_checkpoint(const std::string& path);

}  // namespace isp
