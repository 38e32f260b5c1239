#include "cspd/config.hpp"

#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace cspd {

namespace {

using nlohmann::ordered_json;

void reject_unknown(const ordered_json& j, std::initializer_list<const char*> allowed,
                    const char* where) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw std::invalid_argument(std::string("config: unknown key '") + item.key() +
                                  "' in " + where);
  }
}

template <typename T>
void read(const ordered_json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

void read_model(const ordered_json& j, ModelSpec& m) {
  reject_unknown(j, {"dim", "target_depth", "draft_depth", "heads"}, "model");
  read(j, "dim", m.dim);
  read(j, "target_depth", m.target_depth);
  read(j, "draft_depth", m.draft_depth);
  read(j, "heads", m.heads);
}

void read_spec(const ordered_json& j, SpecConfig& s) {
  reject_unknown(j,
                 {"gamma", "denoise_steps", "temperature", "cfg_scale",
                  "prefix_fraction", "tau_ent", "shallow_layer", "bonus_token",
                  "share_noise", "ratio_cap", "resample_cap", "draft_beta_scale"},
                 "spec");
  read(j, "gamma", s.gamma);
  read(j, "denoise_steps", s.denoise_steps);
  read(j, "temperature", s.temperature);
  read(j, "cfg_scale", s.cfg_scale);
  read(j, "prefix_fraction", s.prefix_fraction);
  read(j, "tau_ent", s.tau_ent);
  read(j, "shallow_layer", s.shallow_layer);
  read(j, "bonus_token", s.bonus_token);
  read(j, "share_noise", s.share_noise);
  read(j, "ratio_cap", s.ratio_cap);
  read(j, "resample_cap", s.resample_cap);
  read(j, "draft_beta_scale", s.draft_beta_scale);
}

void read_train(const ordered_json& j, TrainConfig& t) {
  reject_unknown(j,
                 {"epochs_stage1", "epochs_stage2", "batch", "lr_stage1",
                  "lr_gen_stage2", "lr_fake_stage2", "alpha0", "alphaT",
                  "total_epochs", "lr_scale", "entropy_weight", "condition_pathway",
                  "learned_fake", "optimizer", "smooth_l1_beta", "clip_norm",
                  "alpha_override"},
                 "train");
  read(j, "epochs_stage1", t.epochs_stage1);
  read(j, "epochs_stage2", t.epochs_stage2);
  read(j, "batch", t.batch);
  read(j, "lr_stage1", t.lr_stage1);
  read(j, "lr_gen_stage2", t.lr_gen_stage2);
  read(j, "lr_fake_stage2", t.lr_fake_stage2);
  read(j, "alpha0", t.alpha0);
  read(j, "alphaT", t.alphaT);
  read(j, "total_epochs", t.total_epochs);
  read(j, "lr_scale", t.lr_scale);
  read(j, "entropy_weight", t.entropy_weight);
  read(j, "condition_pathway", t.condition_pathway);
  read(j, "learned_fake", t.learned_fake);
  if (j.contains("optimizer")) {
    const std::string name = j.at("optimizer").get<std::string>();
    if (name == "sgd")
      t.optimizer = Optimizer::sgd;
    else if (name == "adam")
      t.optimizer = Optimizer::adam;
    else
      throw std::invalid_argument("config: optimizer must be 'sgd' or 'adam', got '" +
                                  name + "'");
  }
  read(j, "smooth_l1_beta", t.smooth_l1_beta);
  read(j, "clip_norm", t.clip_norm);
  read(j, "alpha_override", t.alpha_override);
}

void read_threshold(const ordered_json& j, ThresholdConfig& t) {
  reject_unknown(j, {"mean_coeff", "std_coeff", "shallow_layer"}, "threshold");
  read(j, "mean_coeff", t.mean_coeff);
  read(j, "std_coeff", t.std_coeff);
  read(j, "shallow_layer", t.shallow_layer);
}

} // namespace

void validate(const ExperimentConfig& cfg) {
  if (cfg.experiment.empty())
    throw std::invalid_argument("ExperimentConfig: experiment id must be non-empty");
  if (cfg.model.dim < 1)
    throw std::invalid_argument("ExperimentConfig: model.dim must be >= 1");
  if (cfg.model.heads < 1)
    throw std::invalid_argument("ExperimentConfig: model.heads must be >= 1");
  if (cfg.model.target_depth < 2)
    throw std::invalid_argument("ExperimentConfig: model.target_depth must be >= 2");
  if (cfg.model.draft_depth < 2 || cfg.model.draft_depth > cfg.model.target_depth)
    throw std::invalid_argument(
        "ExperimentConfig: model.draft_depth must be in [2, target_depth]");
  validate(cfg.spec, cfg.model.draft_depth);
  cfg.train.validate();
  if (!std::isfinite(cfg.threshold.mean_coeff) || !std::isfinite(cfg.threshold.std_coeff))
    throw std::invalid_argument("ExperimentConfig: threshold coefficients must be finite");
  if (cfg.threshold.shallow_layer < 0 ||
      cfg.threshold.shallow_layer >= cfg.model.draft_depth - 1)
    throw std::invalid_argument(
        "ExperimentConfig: threshold.shallow_layer must be below draft_depth - 1");
  if (cfg.seeds.empty())
    throw std::invalid_argument("ExperimentConfig: need at least one seed");
  if (cfg.seq_len < 1)
    throw std::invalid_argument("ExperimentConfig: seq_len must be >= 1");
  if (cfg.trials < 1)
    throw std::invalid_argument("ExperimentConfig: trials must be >= 1");
  if (cfg.out_dir.empty())
    throw std::invalid_argument("ExperimentConfig: out_dir must be non-empty");
}

std::string experiment_to_json(const ExperimentConfig& cfg) {
  ordered_json j;
  j["experiment"] = cfg.experiment;
  j["model"] = {{"dim", cfg.model.dim},
                {"target_depth", cfg.model.target_depth},
                {"draft_depth", cfg.model.draft_depth},
                {"heads", cfg.model.heads}};
  j["spec"] = {{"gamma", cfg.spec.gamma},
               {"denoise_steps", cfg.spec.denoise_steps},
               {"temperature", cfg.spec.temperature},
               {"cfg_scale", cfg.spec.cfg_scale},
               {"prefix_fraction", cfg.spec.prefix_fraction},
               {"tau_ent", cfg.spec.tau_ent},
               {"shallow_layer", cfg.spec.shallow_layer},
               {"bonus_token", cfg.spec.bonus_token},
               {"share_noise", cfg.spec.share_noise},
               {"ratio_cap", cfg.spec.ratio_cap},
               {"resample_cap", cfg.spec.resample_cap},
               {"draft_beta_scale", cfg.spec.draft_beta_scale}};
  j["train"] = {{"epochs_stage1", cfg.train.epochs_stage1},
                {"epochs_stage2", cfg.train.epochs_stage2},
                {"batch", cfg.train.batch},
                {"lr_stage1", cfg.train.lr_stage1},
                {"lr_gen_stage2", cfg.train.lr_gen_stage2},
                {"lr_fake_stage2", cfg.train.lr_fake_stage2},
                {"alpha0", cfg.train.alpha0},
                {"alphaT", cfg.train.alphaT},
                {"total_epochs", cfg.train.total_epochs},
                {"lr_scale", cfg.train.lr_scale},
                {"entropy_weight", cfg.train.entropy_weight},
                {"condition_pathway", cfg.train.condition_pathway},
                {"learned_fake", cfg.train.learned_fake},
                {"optimizer", cfg.train.optimizer == Optimizer::adam ? "adam" : "sgd"},
                {"smooth_l1_beta", cfg.train.smooth_l1_beta},
                {"clip_norm", cfg.train.clip_norm},
                {"alpha_override", cfg.train.alpha_override}};
  j["threshold"] = {{"mean_coeff", cfg.threshold.mean_coeff},
                    {"std_coeff", cfg.threshold.std_coeff},
                    {"shallow_layer", cfg.threshold.shallow_layer}};
  j["seeds"] = cfg.seeds;
  j["seq_len"] = cfg.seq_len;
  j["trials"] = cfg.trials;
  j["out_dir"] = cfg.out_dir;
  return j.dump(2);
}

ExperimentConfig experiment_from_json(const std::string& text) {
  const ordered_json j = ordered_json::parse(text);
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  reject_unknown(j,
                 {"experiment", "model", "spec", "train", "threshold", "seeds",
                  "seq_len", "trials", "out_dir"},
                 "the top level");

  ExperimentConfig cfg;
  read(j, "experiment", cfg.experiment);
  if (j.contains("model")) read_model(j.at("model"), cfg.model);
  if (j.contains("spec")) read_spec(j.at("spec"), cfg.spec);
  if (j.contains("train")) read_train(j.at("train"), cfg.train);
  if (j.contains("threshold")) read_threshold(j.at("threshold"), cfg.threshold);
  read(j, "seeds", cfg.seeds);
  read(j, "seq_len", cfg.seq_len);
  read(j, "trials", cfg.trials);
  read(j, "out_dir", cfg.out_dir);
  return cfg;
}

void save_experiment(const std::string& path, const ExperimentConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_experiment: cannot open " + path);
  out << experiment_to_json(cfg) << "\n";
  if (!out) throw std::runtime_error("save_experiment: failed writing " + path);
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_experiment: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return experiment_from_json(ss.str());
}

} // namespace cspd
