#pragma once

// One TOML document configures every module:
//
//   preset = "desk"        # optional base: "paper" (defaults), "desk", "micro"
//   [ahe]   ...            # AheConfig fields
//   [train] ...            # TrainConfig fields
//   [ppu] [kma] [dlg] [fl] [bench]
//
// Unknown keys are rejected so typos do not silently fall back to defaults.

#include "hanlab/bench.hpp"
#include "hanlab/fl.hpp"

#include <toml.hpp>

#include <sstream>

namespace hanlab {

inline void to_json(nlohmann::json& j, const BenchConfig& c) {
  j = {{"warmups", c.warmups}, {"trials", c.trials}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, BenchConfig& c) {
  BenchConfig d;
  c.warmups = j.value("warmups", d.warmups);
  c.trials = j.value("trials", d.trials);
  c.seed = j.value("seed", d.seed);
}

struct ExperimentConfig {
  AheConfig ahe;
  TrainConfig train;
  PpuConfig ppu;
  KmaConfig kma;
  DlgConfig dlg;
  FlConfig fl;
  BenchConfig bench;

  // Propagates one seed to every module.
  void set_seed(std::uint64_t s) {
    ahe.seed = train.seed = ppu.seed = kma.seed = dlg.seed = fl.seed = bench.seed = s;
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"ahe", c.ahe}, {"train", c.train}, {"ppu", c.ppu}, {"kma", c.kma},
       {"dlg", c.dlg}, {"fl", c.fl},       {"bench", c.bench}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c.ahe = j.at("ahe").get<AheConfig>();
  c.train = j.at("train").get<TrainConfig>();
  c.ppu = j.at("ppu").get<PpuConfig>();
  c.kma = j.at("kma").get<KmaConfig>();
  c.dlg = j.at("dlg").get<DlgConfig>();
  c.fl = j.at("fl").get<FlConfig>();
  c.bench = j.at("bench").get<BenchConfig>();
}

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  if (name == "paper" || name.empty()) return c;
  if (name == "desk") {
    c.train.lr = 1e-3;
    return c;
  }
  if (name == "micro") {
    c.ahe.hidden_dim = 16;
    c.ahe.aggregator_hidden_dim = 32;
    c.ahe.num_res_blocks = 1;
    c.train.lr = 3e-3;
    c.train.batch_size = 128;
    c.train.stage1_steps = 300;
    c.train.stage2_steps = 200;
    c.train.stage3_max_steps = 200;
    c.train.stage4_steps = 50;
    c.train.stage5_max_steps = 600;
    c.train.stage5_batch_size = 256;
    c.train.stage5_min_steps = 200;
    c.train.plateau_window = 50;
    c.train.plateau_min_steps = 100;
    c.train.gate = {0.0, 1.0};
    c.train.eval_samples = 2000;
    c.ppu.public_size = 256;
    c.ppu.private_size = 128;
    c.ppu.max_iterations = 2;
    c.ppu.steps_per_client = 30;
    c.ppu.rounds_per_client = 2;
    c.ppu.eval_samples = 2000;
    c.kma.steps = 200;
    c.kma.eval_samples = 2000;
    c.dlg.iterations = 500;
    c.fl.rounds = 2;
    c.fl.train_subset = 600;
    c.fl.test_subset = 500;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (paper, desk, micro)");
}

namespace detail {

// Rejects keys in `patch` that `base` does not have, then overlays it.
inline void overlay(nlohmann::json& base, const nlohmann::json& patch, const std::string& where) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    if (base[it.key()].is_object() && it->is_object())
      overlay(base[it.key()], *it, key);
    else
      base[it.key()] = *it;
  }
}

inline nlohmann::json toml_to_json(const toml::table& t) {
  std::ostringstream ss;
  ss << toml::json_formatter{t};
  return nlohmann::json::parse(ss.str());
}

}  // namespace detail

inline ExperimentConfig config_from_toml(const std::string& text, const std::string& source = "config") {
  toml::table t;
  try {
    t = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << source << ": " << e.description() << " at line " << e.source().begin.line;
    throw ConfigError(msg.str());
  }
  auto patch = detail::toml_to_json(t);
  std::string base_name = "paper";
  if (patch.contains("preset")) {
    if (!patch["preset"].is_string()) throw ConfigError("preset must be a string");
    base_name = patch["preset"].get<std::string>();
    patch.erase("preset");
  }
  nlohmann::json merged = preset(base_name);
  detail::overlay(merged, patch, "");
  auto cfg = merged.get<ExperimentConfig>();
  validate(cfg.ahe);
  validate(cfg.train);
  validate(cfg.ppu);
  validate(cfg.kma);
  validate(cfg.dlg);
  validate(cfg.fl);
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_toml(ss.str(), path.string());
}

}  // namespace hanlab
