#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cspd/engine.hpp"
#include "cspd/entropy.hpp"
#include "cspd/train.hpp"

namespace cspd {

struct ModelSpec {
  int dim = 8;
  int target_depth = 3;
  int draft_depth = 2;
  int heads = 2;
};

// One experiment end to end: the models, the engine knobs, the training
// recipe, the monitor calibration, and the trial plan.
struct ExperimentConfig {
  std::string experiment = "cspd-toy";
  ModelSpec model;
  SpecConfig spec;
  TrainConfig train;
  ThresholdConfig threshold{0.3, 0.1, 0};  // depth-2 drafts only have layer 0
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  int seq_len = 256;
  int trials = 5;
  std::string out_dir = "out";
};

void validate(const ExperimentConfig& cfg);

// JSON mirrors the struct field for field. Parsing is strict: an unknown key
// at any nesting level is an error; missing keys keep their defaults.
std::string experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const std::string& text);

void save_experiment(const std::string& path, const ExperimentConfig& cfg);
ExperimentConfig load_experiment(const std::string& path);

} // namespace cspd
