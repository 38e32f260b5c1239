#include "cspd/entropy.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace cspd {

namespace {

void validate_maps(const std::vector<AttentionMap>& maps) {
  if (maps.empty()) throw std::invalid_argument("entropy_loss: no attention maps");
  const Eigen::Index r = maps[0].rows();
  for (const auto& m : maps) {
    if (m.rows() != r || m.cols() != r)
      throw std::invalid_argument("entropy_loss: maps must be square and same-shaped");
    if (!m.allFinite())
      throw std::invalid_argument("entropy_loss: non-finite attention weight");
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      if (m.row(i).minCoeff() < -1e-12)
        throw std::invalid_argument("entropy_loss: negative attention weight");
      if (std::abs(m.row(i).sum() - 1.0) > 1e-6)
        throw std::invalid_argument("entropy_loss: row is not stochastic");
    }
  }
}

double wlogw(double w) { return w > 0.0 ? w * std::log(w) : 0.0; }

} // namespace

double entropy_loss(const std::vector<AttentionMap>& maps) {
  validate_maps(maps);
  const Eigen::Index r = maps[0].rows();
  std::vector<double> terms;
  terms.reserve(maps.size() * r * r);
  for (const auto& m : maps)
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < r; ++j) terms.push_back(wlogw(m(i, j)));
  return pairwise_sum(terms) / (static_cast<double>(r) * maps.size());
}

std::vector<Mat> entropy_loss_grad(const std::vector<AttentionMap>& maps) {
  validate_maps(maps);
  const Eigen::Index r = maps[0].rows();
  const double scale = 1.0 / (static_cast<double>(r) * maps.size());
  std::vector<Mat> grads(maps.size());
  for (std::size_t h = 0; h < maps.size(); ++h) {
    grads[h].resize(r, r);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < r; ++j) {
        const double w = maps[h](i, j);
        grads[h](i, j) = w > 0.0 ? scale * (std::log(w) + 1.0) : 0.0;
      }
  }
  return grads;
}

double shallow_entropy_indicator(const ModelOutput& out, int shallow_layer) {
  if (shallow_layer < 0 || shallow_layer >= static_cast<int>(out.attn.size()))
    throw std::out_of_range("shallow_entropy_indicator: layer out of range");
  return -entropy_loss(out.attn[shallow_layer]);
}

void EntropyAccumulator::add(double x) {
  if (!std::isfinite(x))
    throw std::invalid_argument("EntropyAccumulator: non-finite sample");
  ++n_;
  const double delta = x - mean_;
  mean_ += delta / static_cast<double>(n_);
  m2_ += delta * (x - mean_);
}

void EntropyAccumulator::merge(const EntropyAccumulator& other) {
  if (other.n_ == 0) return;
  if (n_ == 0) {
    *this = other;
    return;
  }
  const double na = static_cast<double>(n_), nb = static_cast<double>(other.n_);
  const double delta = other.mean_ - mean_;
  const double n = na + nb;
  mean_ += delta * nb / n;
  m2_ += other.m2_ + delta * delta * na * nb / n;
  n_ += other.n_;
}

EntropyStats EntropyAccumulator::stats() const {
  if (n_ < 2)
    throw std::logic_error("EntropyAccumulator: need at least 2 samples");
  EntropyStats s;
  s.count = n_;
  s.mean = mean_;
  s.stddev = std::sqrt(m2_ / static_cast<double>(n_ - 1));
  return s;
}

double calibrate_threshold(const EntropyStats& stats, const ThresholdConfig& cfg) {
  if (stats.count < 2)
    throw std::invalid_argument("calibrate_threshold: need at least 2 samples");
  if (!(std::isfinite(stats.mean) && std::isfinite(stats.stddev)) || stats.stddev < 0.0)
    throw std::invalid_argument("calibrate_threshold: bad stats");
  return cfg.mean_coeff * stats.mean - cfg.std_coeff * stats.stddev;
}

bool early_stop_check(double indicator, double tau) {
  if (!std::isfinite(indicator))
    throw std::invalid_argument("early_stop_check: non-finite indicator");
  return indicator < tau;
}

std::string calibration_to_json(const Calibration& c) {
  nlohmann::json j;
  j["tau"] = c.tau;
  j["mean_indicator"] = c.stats.mean;
  j["std_indicator"] = c.stats.stddev;
  j["sample_count"] = c.stats.count;
  j["shallow_layer"] = c.config.shallow_layer;
  j["coefficients"] = {{"mean", c.config.mean_coeff}, {"std", c.config.std_coeff}};
  return j.dump(2);
}

Calibration calibration_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  Calibration c;
  c.tau = j.at("tau").get<double>();
  c.stats.mean = j.at("mean_indicator").get<double>();
  c.stats.stddev = j.at("std_indicator").get<double>();
  c.stats.count = j.at("sample_count").get<std::size_t>();
  c.config.shallow_layer = j.at("shallow_layer").get<int>();
  c.config.mean_coeff = j.at("coefficients").at("mean").get<double>();
  c.config.std_coeff = j.at("coefficients").at("std").get<double>();
  return c;
}

void save_calibration(const std::string& path, const Calibration& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_calibration: cannot open " + path);
  out << calibration_to_json(c) << "\n";
}

Calibration load_calibration(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_calibration: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return calibration_from_json(ss.str());
}

} // namespace cspd
