#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cspd/model.hpp"
#include "cspd/numeric.hpp"

namespace cspd {

// Mean signed attention entropy over one layer's heads:
//   (1/(R N)) * sum_{heads, rows, cols} w log w,   0 log 0 := 0,
// which lives in [-log R, 0]. Rows must be stochastic within 1e-6.
double entropy_loss(const std::vector<AttentionMap>& maps);

// d entropy_loss / d w (boundary entries get the 0 log 0 limit's subgradient 0).
std::vector<Mat> entropy_loss_grad(const std::vector<AttentionMap>& maps);

// Negated entropy loss at one layer: mean row entropy in [0, log R]. High
// values mean diffuse attention; collapse toward 0 flags drift.
double shallow_entropy_indicator(const ModelOutput& out, int shallow_layer);

struct ThresholdConfig {
  double mean_coeff = 0.3;
  double std_coeff = 0.1;
  int shallow_layer = 1;
};

struct EntropyStats {
  double mean = 0.0;
  double stddev = 0.0;  // unbiased, n-1
  std::size_t count = 0;
};

// Streaming moments with an order-insensitive merge so concurrent trials can
// accumulate independently and combine at the end.
class EntropyAccumulator {
 public:
  void add(double x);
  void merge(const EntropyAccumulator& other);
  std::size_t count() const { return n_; }
  EntropyStats stats() const;  // requires count >= 2

 private:
  double mean_ = 0.0;
  double m2_ = 0.0;
  std::size_t n_ = 0;
};

// tau = mean_coeff * mean - std_coeff * stddev.
double calibrate_threshold(const EntropyStats& stats, const ThresholdConfig& cfg);

// Strict: indicator < tau stops; equality keeps speculating.
bool early_stop_check(double indicator, double tau);

struct Calibration {
  double tau = 0.0;
  EntropyStats stats;
  ThresholdConfig config;
};

std::string calibration_to_json(const Calibration& c);
Calibration calibration_from_json(const std::string& text);
void save_calibration(const std::string& path, const Calibration& c);
Calibration load_calibration(const std::string& path);

} // namespace cspd
