#pragma once

// Five-stage schedule: adversarial pre-training, security enhancement,
// attacker assessment, balance fine-tune with a security gate, and
// aggregator alignment.

#include "hanlab/checkpoint.hpp"
#include "hanlab/jsonl.hpp"
#include "hanlab/losses.hpp"

#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hanlab {

struct SecurityGate {
  double min_attacker_l1 = 5e-4;
  double max_agg_l1 = 0.01;
};

struct TrainConfig {
  double lr = 1e-5;
  double lr_min_ratio = 0.01;
  double weight_decay = 1e-6;
  std::size_t batch_size = 256;
  std::size_t attacker_steps_per_enc_step = 2;
  std::size_t stage1_steps = 3000;
  std::size_t stage2_steps = 3000;
  std::size_t stage3_max_steps = 3000;
  std::size_t stage4_steps = 500;
  std::size_t stage5_max_steps = 10000;
  std::size_t stage5_batch_size = 512;
  double stage5_lr_scale = 0.3;
  std::size_t stage5_min_steps = 5000;
  double stage1_attacker_weight = 0.1;
  LossConfig loss;
  SecurityGate gate;
  std::size_t gate_retries = 3;
  std::size_t plateau_window = 200;
  double plateau_tolerance = 1e-3;
  std::size_t plateau_min_steps = 1000;
  std::size_t eval_samples = 20000;
  std::size_t log_every = 10;
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& c) {
  if (!(c.lr > 0.0)) throw std::invalid_argument("train config: lr must be > 0");
  if (!(c.lr_min_ratio >= 0.0 && c.lr_min_ratio <= 1.0))
    throw std::invalid_argument("train config: lr_min_ratio must be in [0, 1]");
  if (!(c.stage5_lr_scale > 0.0)) throw std::invalid_argument("train config: stage5_lr_scale must be > 0");
  if (!(c.weight_decay >= 0.0)) throw std::invalid_argument("train config: weight_decay must be >= 0");
  for (std::size_t v : {c.batch_size, c.attacker_steps_per_enc_step, c.stage1_steps, c.stage2_steps, c.stage3_max_steps,
                        c.stage4_steps, c.stage5_max_steps, c.stage5_batch_size, c.plateau_window, c.eval_samples,
                        c.log_every})
    if (v == 0) throw std::invalid_argument("train config: step counts and sizes must be >= 1");
  if (!(c.stage1_attacker_weight >= 0.0)) throw std::invalid_argument("train config: stage1_attacker_weight must be >= 0");
  validate(c.loss);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"lr_min_ratio", c.lr_min_ratio},
       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},
       {"attacker_steps_per_enc_step", c.attacker_steps_per_enc_step},
       {"stage1_steps", c.stage1_steps},
       {"stage2_steps", c.stage2_steps},
       {"stage3_max_steps", c.stage3_max_steps},
       {"stage4_steps", c.stage4_steps},
       {"stage5_max_steps", c.stage5_max_steps},
       {"stage5_batch_size", c.stage5_batch_size},
       {"stage5_lr_scale", c.stage5_lr_scale},
       {"stage5_min_steps", c.stage5_min_steps},
       {"stage1_attacker_weight", c.stage1_attacker_weight},
       {"gamma", c.loss.gamma},
       {"lambda", c.loss.lambda},
       {"gate_min_attacker_l1", c.gate.min_attacker_l1},
       {"gate_max_agg_l1", c.gate.max_agg_l1},
       {"gate_retries", c.gate_retries},
       {"plateau_window", c.plateau_window},
       {"plateau_tolerance", c.plateau_tolerance},
       {"plateau_min_steps", c.plateau_min_steps},
       {"eval_samples", c.eval_samples},
       {"log_every", c.log_every},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.lr_min_ratio = j.value("lr_min_ratio", d.lr_min_ratio);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.attacker_steps_per_enc_step = j.value("attacker_steps_per_enc_step", d.attacker_steps_per_enc_step);
  c.stage1_steps = j.value("stage1_steps", d.stage1_steps);
  c.stage2_steps = j.value("stage2_steps", d.stage2_steps);
  c.stage3_max_steps = j.value("stage3_max_steps", d.stage3_max_steps);
  c.stage4_steps = j.value("stage4_steps", d.stage4_steps);
  c.stage5_max_steps = j.value("stage5_max_steps", d.stage5_max_steps);
  c.stage5_batch_size = j.value("stage5_batch_size", d.stage5_batch_size);
  c.stage5_lr_scale = j.value("stage5_lr_scale", d.stage5_lr_scale);
  c.stage5_min_steps = j.value("stage5_min_steps", d.stage5_min_steps);
  c.stage1_attacker_weight = j.value("stage1_attacker_weight", d.stage1_attacker_weight);
  c.loss.gamma = j.value("gamma", d.loss.gamma);
  c.loss.lambda = j.value("lambda", d.loss.lambda);
  c.gate.min_attacker_l1 = j.value("gate_min_attacker_l1", d.gate.min_attacker_l1);
  c.gate.max_agg_l1 = j.value("gate_max_agg_l1", d.gate.max_agg_l1);
  c.gate_retries = j.value("gate_retries", d.gate_retries);
  c.plateau_window = j.value("plateau_window", d.plateau_window);
  c.plateau_tolerance = j.value("plateau_tolerance", d.plateau_tolerance);
  c.plateau_min_steps = j.value("plateau_min_steps", d.plateau_min_steps);
  c.eval_samples = j.value("eval_samples", d.eval_samples);
  c.log_every = j.value("log_every", d.log_every);
  c.seed = j.value("seed", d.seed);
}

struct StageFailure : std::runtime_error {
  int stage;
  nlohmann::json diagnostics;
  StageFailure(int s, const std::string& what, nlohmann::json diag = {})
      : std::runtime_error("stage " + std::to_string(s) + ": " + what), stage(s), diagnostics(std::move(diag)) {}
};

// A model declared frozen changed anyway.
struct FreezeViolation : std::logic_error {
  using std::logic_error::logic_error;
};

struct CurvePoint {
  std::size_t step;
  double value;
};

struct StageReport {
  int stage = 0;
  // one curve per trained model, keyed by slot name
  std::map<std::string, std::vector<CurvePoint>> curves;
  // auxiliary series (objective value, hinge terms)
  std::map<std::string, std::vector<CurvePoint>> terms;
  EvalStats aggregation;
  std::map<std::string, EvalStats> attackers;
  std::optional<bool> gate_passed;
  std::size_t retries = 0;
  std::size_t steps_run = 0;
  bool plateau_reached = false;
  std::vector<std::string> notes;
};

inline nlohmann::json stats_json(const EvalStats& s) {
  return {{"mean_l1", s.mean_l1}, {"max_l1", s.max_l1}, {"std_mean", s.std_mean}, {"std_max", s.std_max},
          {"mad", s.mad},         {"var", s.var},       {"count", s.count}};
}

inline nlohmann::json summary_json(const StageReport& r) {
  nlohmann::json j = {{"stage", r.stage},
                      {"steps_run", r.steps_run},
                      {"plateau_reached", r.plateau_reached},
                      {"aggregation", stats_json(r.aggregation)},
                      {"retries", r.retries},
                      {"notes", r.notes}};
  for (const auto& [k, v] : r.attackers) j["attackers"][k] = stats_json(v);
  if (r.gate_passed) j["gate_passed"] = *r.gate_passed;
  return j;
}

// JSON-lines: one {stage, step, loss_name, value} record per curve point,
// then a summary record.
inline void write_report(JsonlSink& sink, const StageReport& r) {
  if (!sink.active()) return;
  for (const auto* series : {&r.curves, &r.terms})
    for (const auto& [name, points] : *series)
      for (const auto& p : points) sink.write({{"stage", r.stage}, {"step", p.step}, {"loss_name", name}, {"value", p.value}});
  sink.write({{"stage", r.stage}, {"summary", summary_json(r)}});
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Independent stream per (seed, purpose); makes stages restartable.
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t purpose, std::uint64_t sub = 0) {
  return std::mt19937_64(splitmix64(splitmix64(seed ^ splitmix64(purpose)) + sub));
}

template <class Rng>
Vec uniform_plaintexts(std::size_t n, double psi, Rng& rng) {
  std::uniform_real_distribution<double> d(-psi, psi);
  Vec v(static_cast<Eigen::Index>(n));
  for (auto& x : v) x = static_cast<float>(d(rng));
  return v;
}

template <class Rng>
AggregationBatch gen_batch(std::size_t batch_size, const AheConfig& cfg, Rng& rng) {
  if (batch_size == 0) throw std::invalid_argument("gen_batch: batch_size must be >= 1");
  AggregationBatch b;
  b.target = Vec::Zero(static_cast<Eigen::Index>(batch_size));
  for (std::size_t i = 0; i < cfg.num_clients; ++i) {
    b.plaintexts.push_back(uniform_plaintexts(batch_size, cfg.psi, rng));
    b.keys.push_back(keygen(batch_size, cfg, rng).first);
    b.target += b.plaintexts.back();
  }
  return b;
}

class PlateauDetector {
 public:
  PlateauDetector(std::size_t window, double tolerance, std::size_t min_steps)
      : window_(window), tol_(tolerance), min_steps_(min_steps) {}

  // True once the mean over the last window improves on the window before
  // it by less than the relative tolerance.
  bool update(double loss) {
    ++seen_;
    recent_.push_back(loss);
    if (recent_.size() > 2 * window_) recent_.pop_front();
    if (fired_ || seen_ < std::max(min_steps_, 2 * window_)) return fired_;
    double prev = 0, cur = 0;
    for (std::size_t i = 0; i < window_; ++i) {
      prev += recent_[i];
      cur += recent_[i + window_];
    }
    const double rel = (prev - cur) / std::max(std::abs(prev), 1e-30);
    fired_ = rel < tol_;
    return fired_;
  }
  bool fired() const { return fired_; }

 private:
  std::size_t window_;
  double tol_;
  std::size_t min_steps_;
  std::size_t seen_ = 0;
  bool fired_ = false;
  std::deque<double> recent_;
};

inline std::string attacker_name(std::size_t client, AttackerKind k) {
  return "client" + std::to_string(client) + "/" + std::string(to_string(k));
}

namespace detail {

inline nn::AdamWConfig adamw(const TrainConfig& c) {
  nn::AdamWConfig a;
  a.weight_decay = c.weight_decay;
  return a;
}

inline nn::CosineSchedule cosine(const TrainConfig& c, std::size_t steps) {
  return {c.lr, c.lr * c.lr_min_ratio, steps};
}

inline void ensure_finite(double v, int stage, std::size_t step, const std::string& what) {
  if (!std::isfinite(v))
    throw StageFailure(stage, "non-finite " + what + " at step " + std::to_string(step),
                       {{"step", step}, {"loss_name", what}});
}

inline bool should_log(const TrainConfig& c, std::size_t step, std::size_t total) {
  return step % c.log_every == 0 || step + 1 == total;
}

template <typename S>
std::vector<std::uint64_t> digests(const std::vector<Model<S>>& models) {
  std::vector<std::uint64_t> out;
  for (const auto& m : models) out.push_back(m.net.digest());
  return out;
}

}  // namespace detail

// One optimizer step on a single attacker against fixed ciphertexts.
inline double attacker_update(Model<float>& atk, nn::AdamW<float>& opt, const nn::Matrix<float>& c, const Vec& pk,
                              const Vec& m, double lr) {
  typename nn::Network<float>::Tape tape;
  const auto guess = atk.net.forward(detail::attacker_features<float>(c, pk, atk.role == Role::attacker_pk), tape);
  const double loss = detail::mse_value<float>(guess, m);
  atk.net.zero_grad();
  atk.net.backward(tape, detail::mse_grad<float>(guess, m, 1.0f), true);
  opt.step(atk.net, lr);
  return loss;
}

template <class Rng>
EvalStats evaluate_aggregation(const ModelBundle& b, std::size_t n, Rng& rng, std::size_t chunk = 20000) {
  Vec all_diff(static_cast<Eigen::Index>(n));
  Vec zeros = Vec::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t len = std::min(chunk, n - start);
    const auto batch = gen_batch(len, b.cfg, rng);
    std::vector<CiphertextBatch> cts;
    std::vector<PublicKeyBatch> pks;
    for (std::size_t i = 0; i < b.num_clients(); ++i) {
      cts.push_back(encrypt(b.encryptors[i], PlaintextBatch{batch.plaintexts[i]}, batch.keys[i], b.cfg));
      pks.push_back(public_keys(batch.keys[i]));
    }
    const Vec out = aggregate(b.aggregator, std::span<const CiphertextBatch>(cts), std::span<const PublicKeyBatch>(pks));
    all_diff.segment(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(len)) = out - batch.target;
  }
  return l1_stats(all_diff, zeros);
}

template <class Rng>
EvalStats evaluate_attacker(const Model<float>& enc, const Model<float>& atk, std::size_t n, const AheConfig& cfg,
                            Rng& rng) {
  const Vec m = uniform_plaintexts(n, cfg.psi, rng);
  auto [keys, pks] = keygen(n, cfg, rng);
  const auto c = encrypt(enc, PlaintextBatch{m}, keys, cfg);
  const Vec guess = attack_forward(atk, c, atk.role == Role::attacker_pk ? std::optional(pks) : std::nullopt);
  return l1_stats(guess, m);
}

namespace detail {

// Stages 1, 2 and the security pass of stage 4: attackers (standard depth)
// and encryptor+aggregator steps alternate.
inline void adversarial_phase(ModelBundle& b, const TrainConfig& cfg, int stage, Objective objective,
                              const LossConfig& lc, std::size_t steps, std::mt19937_64& rng, StageReport& report,
                              std::size_t step_offset = 0) {
  const std::size_t n = b.num_clients();
  const auto sched = cosine(cfg, steps);
  std::vector<nn::AdamW<float>> enc_opt;
  for (auto& e : b.encryptors) enc_opt.emplace_back(e.net, adamw(cfg));
  nn::AdamW<float> agg_opt(b.aggregator.net, adamw(cfg));
  std::vector<std::array<nn::AdamW<float>, 2>> atk_opt;
  for (std::size_t i = 0; i < n; ++i)
    atk_opt.push_back({nn::AdamW<float>(b.attacker(i, AttackerKind::atk1).net, adamw(cfg)),
                       nn::AdamW<float>(b.attacker(i, AttackerKind::atk2).net, adamw(cfg))});
  const std::array<AttackerKind, 2> kinds{AttackerKind::atk1, AttackerKind::atk2};

  for (std::size_t step = 0; step < steps; ++step) {
    const double lr = sched.at(step);
    std::vector<std::array<double, 2>> last_atk(n);
    const bool with_attackers = objective != Objective::aggregation;
    for (std::size_t r = 0; with_attackers && r < cfg.attacker_steps_per_enc_step; ++r) {
      const auto batch = gen_batch(cfg.batch_size, b.cfg, rng);
      for (std::size_t i = 0; i < n; ++i) {
        const auto c = b.encryptors[i].net.forward(
            encryptor_input<float>(batch.plaintexts[i], batch.keys[i].sk_a, batch.keys[i].sk_b));
        const Vec pk = batch.keys[i].sk_a + batch.keys[i].sk_b;
        for (std::size_t k = 0; k < 2; ++k)
          last_atk[i][k] = attacker_update(b.attacker(i, kinds[k]), atk_opt[i][k], c, pk, batch.plaintexts[i], lr);
      }
    }
    const auto batch = gen_batch(cfg.batch_size, b.cfg, rng);
    for (auto& e : b.encryptors) e.net.zero_grad();
    b.aggregator.net.zero_grad();
    const auto terms = objective_backward(b, batch, lc, objective, {true, true});
    ensure_finite(terms.value, stage, step, "objective");
    for (std::size_t i = 0; i < n; ++i) enc_opt[i].step(b.encryptors[i].net, lr);
    agg_opt.step(b.aggregator.net, lr);

    if (should_log(cfg, step, steps)) {
      const std::size_t s = step_offset + step;
      report.curves["aggregator"].push_back({s, terms.aggregation});
      report.terms["objective"].push_back({s, terms.value});
      for (std::size_t i = 0; i < n; ++i) {
        double own = terms.aggregation;
        if (objective == Objective::final_hinge)
          own = lc.lambda * terms.aggregation + terms.hinges[2 * i] + terms.hinges[2 * i + 1];
        else if (objective == Objective::pretrain)
          own = terms.aggregation - lc.attacker_weight * (terms.attacker[2 * i] + terms.attacker[2 * i + 1]);
        report.curves[encryptor_slot(i)].push_back({s, own});
        if (with_attackers) {
          report.curves[attacker_name(i, AttackerKind::atk1)].push_back({s, last_atk[i][0]});
          report.curves[attacker_name(i, AttackerKind::atk2)].push_back({s, last_atk[i][1]});
        }
        if (objective == Objective::final_hinge)
          report.terms["client" + std::to_string(i) + "/hinge"].push_back(
              {s, terms.hinges[2 * i] + terms.hinges[2 * i + 1]});
      }
    }
  }
  report.steps_run += steps;
}

// Encryptors and aggregator fixed; every attacker variant trained until its
// plateau detector fires or the budget runs out.
inline void assess_attackers(ModelBundle& b, const TrainConfig& cfg, int stage, std::mt19937_64& rng,
                             StageReport& report) {
  const std::size_t n = b.num_clients();
  const auto before_enc = digests(b.encryptors);
  const auto before_agg = b.aggregator.net.digest();
  const auto sched = cosine(cfg, cfg.stage3_max_steps);
  std::vector<std::array<nn::AdamW<float>, 4>> opt;
  std::vector<std::array<PlateauDetector, 4>> plateau;
  for (std::size_t i = 0; i < n; ++i) {
    opt.push_back({nn::AdamW<float>(b.attackers[i][0].net, adamw(cfg)), nn::AdamW<float>(b.attackers[i][1].net, adamw(cfg)),
                   nn::AdamW<float>(b.attackers[i][2].net, adamw(cfg)), nn::AdamW<float>(b.attackers[i][3].net, adamw(cfg))});
    const PlateauDetector p(cfg.plateau_window, cfg.plateau_tolerance, cfg.plateau_min_steps);
    plateau.push_back({p, p, p, p});
  }
  std::size_t step = 0;
  for (; step < cfg.stage3_max_steps; ++step) {
    bool all_done = true;
    for (const auto& pc : plateau)
      for (const auto& p : pc) all_done = all_done && p.fired();
    if (all_done) break;
    const double lr = sched.at(step);
    const auto batch = gen_batch(cfg.batch_size, b.cfg, rng);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = b.encryptors[i].net.forward(
          encryptor_input<float>(batch.plaintexts[i], batch.keys[i].sk_a, batch.keys[i].sk_b));
      const Vec pk = batch.keys[i].sk_a + batch.keys[i].sk_b;
      for (auto k : kAllAttackerKinds) {
        const auto ki = static_cast<std::size_t>(k);
        if (plateau[i][ki].fired()) continue;
        const double loss = attacker_update(b.attackers[i][ki], opt[i][ki], c, pk, batch.plaintexts[i], lr);
        ensure_finite(loss, stage, step, attacker_name(i, k));
        plateau[i][ki].update(loss);
        if (should_log(cfg, step, cfg.stage3_max_steps))
          report.curves[attacker_name(i, k)].push_back({report.steps_run + step, loss});
      }
    }
  }
  report.steps_run += step;
  bool all_plateau = true;
  for (const auto& pc : plateau)
    for (const auto& p : pc) all_plateau = all_plateau && p.fired();
  report.plateau_reached = all_plateau;
  if (digests(b.encryptors) != before_enc || b.aggregator.net.digest() != before_agg)
    throw FreezeViolation("attacker assessment modified encryptor or aggregator weights");
  for (std::size_t i = 0; i < n; ++i)
    for (auto k : kAllAttackerKinds)
      report.attackers[attacker_name(i, k)] =
          evaluate_attacker(b.encryptors[i], b.attacker(i, k), cfg.eval_samples, b.cfg, rng);
}

inline void finish_standard(ModelBundle& b, const TrainConfig& cfg, std::mt19937_64& rng, StageReport& report) {
  report.aggregation = evaluate_aggregation(b, cfg.eval_samples, rng);
  for (std::size_t i = 0; i < b.num_clients(); ++i)
    for (auto k : {AttackerKind::atk1, AttackerKind::atk2})
      report.attackers[attacker_name(i, k)] =
          evaluate_attacker(b.encryptors[i], b.attacker(i, k), cfg.eval_samples, b.cfg, rng);
}

}  // namespace detail

inline StageReport stage1_pretrain(ModelBundle& b, const TrainConfig& cfg) {
  validate(cfg);
  auto rng = derived_rng(cfg.seed, 1);
  StageReport report;
  report.stage = 1;
  LossConfig lc = cfg.loss;
  lc.attacker_weight = cfg.stage1_attacker_weight;
  detail::adversarial_phase(b, cfg, 1, Objective::pretrain, lc, cfg.stage1_steps, rng, report);
  detail::finish_standard(b, cfg, rng, report);
  return report;
}

inline StageReport stage2_security(ModelBundle& b, const TrainConfig& cfg) {
  validate(cfg);
  auto rng = derived_rng(cfg.seed, 2);
  StageReport report;
  report.stage = 2;
  detail::adversarial_phase(b, cfg, 2, Objective::final_hinge, cfg.loss, cfg.stage2_steps, rng, report);
  detail::finish_standard(b, cfg, rng, report);
  return report;
}

inline StageReport stage3_assess(ModelBundle& b, const TrainConfig& cfg) {
  validate(cfg);
  auto rng = derived_rng(cfg.seed, 3);
  StageReport report;
  report.stage = 3;
  report.notes.push_back("standard attackers warm-started from stage 2; double-depth attackers from initialization");
  detail::assess_attackers(b, cfg, 3, rng, report);
  report.aggregation = evaluate_aggregation(b, cfg.eval_samples, rng);
  return report;
}

// Called before each retry with the gate about to be re-applied.
using GateRetryHook = std::function<void(SecurityGate& gate, std::size_t attempt)>;

inline bool gate_verdict(const StageReport& r, const SecurityGate& gate) {
  if (!(r.aggregation.mean_l1 <= gate.max_agg_l1)) return false;
  for (const auto& [name, s] : r.attackers)
    if (!(s.mean_l1 >= gate.min_attacker_l1)) return false;
  return true;
}

inline StageReport stage4_balance(ModelBundle& b, const TrainConfig& cfg, const GateRetryHook& on_retry = {}) {
  validate(cfg);
  auto rng = derived_rng(cfg.seed, 4);
  StageReport report;
  report.stage = 4;
  SecurityGate gate = cfg.gate;
  LossConfig lc = cfg.loss;
  lc.attacker_weight = 0.0;
  for (std::size_t attempt = 0;; ++attempt) {
    detail::adversarial_phase(b, cfg, 4, Objective::aggregation, lc, cfg.stage4_steps, rng, report, report.steps_run);
    StageReport gate_run;
    gate_run.stage = 4;
    detail::assess_attackers(b, cfg, 4, rng, gate_run);
    gate_run.aggregation = evaluate_aggregation(b, cfg.eval_samples, rng);
    for (auto& [name, pts] : gate_run.curves)
      for (auto& p : pts) report.curves[name].push_back({report.steps_run + p.step, p.value});
    report.steps_run += gate_run.steps_run;
    report.aggregation = gate_run.aggregation;
    report.attackers = gate_run.attackers;
    const bool attackers_ok = [&] {
      for (const auto& [name, s] : gate_run.attackers)
        if (!(s.mean_l1 >= gate.min_attacker_l1)) return false;
      return true;
    }();
    const bool agg_ok = gate_run.aggregation.mean_l1 <= gate.max_agg_l1;
    report.gate_passed = attackers_ok && agg_ok;
    report.terms["gate"].push_back({report.steps_run, *report.gate_passed ? 1.0 : 0.0});
    if (*report.gate_passed) break;
    if (attempt >= cfg.gate_retries) {
      throw StageFailure(4, "security gate failed after " + std::to_string(attempt + 1) + " attempts",
                         summary_json(report));
    }
    ++report.retries;
    if (!agg_ok) {
      lc.lambda *= 2.0;
      report.notes.push_back("retry " + std::to_string(report.retries) + ": aggregation above gate, lambda -> " +
                             std::to_string(lc.lambda));
    }
    if (!attackers_ok) {
      report.notes.push_back("retry " + std::to_string(report.retries) + ": attacker below gate, security pass");
      detail::adversarial_phase(b, cfg, 4, Objective::final_hinge, lc, cfg.stage4_steps, rng, report, report.steps_run);
    }
    if (on_retry) on_retry(gate, report.retries);
  }
  return report;
}

inline StageReport stage5_align(ModelBundle& b, const TrainConfig& cfg) {
  validate(cfg);
  auto rng = derived_rng(cfg.seed, 5);
  StageReport report;
  report.stage = 5;
  const auto before = detail::digests(b.encryptors);
  const double lr = cfg.lr * cfg.stage5_lr_scale;
  const nn::CosineSchedule sched{lr, lr * cfg.lr_min_ratio, cfg.stage5_max_steps};
  nn::AdamW<float> opt(b.aggregator.net, detail::adamw(cfg));
  PlateauDetector plateau(cfg.plateau_window, cfg.plateau_tolerance,
                          std::max(cfg.plateau_min_steps, cfg.stage5_min_steps));
  std::size_t step = 0;
  for (; step < cfg.stage5_max_steps && !plateau.fired(); ++step) {
    const auto batch = gen_batch(cfg.stage5_batch_size, b.cfg, rng);
    b.aggregator.net.zero_grad();
    const auto terms = objective_backward(b, batch, cfg.loss, Objective::aggregation, {false, true});
    detail::ensure_finite(terms.value, 5, step, "aggregation");
    opt.step(b.aggregator.net, sched.at(step));
    plateau.update(terms.value);
    if (detail::should_log(cfg, step, cfg.stage5_max_steps)) report.curves["aggregator"].push_back({step, terms.value});
  }
  report.steps_run = step;
  report.plateau_reached = plateau.fired();
  if (detail::digests(b.encryptors) != before) throw FreezeViolation("stage 5 modified encryptor weights");
  report.aggregation = evaluate_aggregation(b, cfg.eval_samples, rng);
  return report;
}

struct TrainOptions {
  std::filesystem::path out_dir;          // checkpoints + reports; empty = in-memory only
  std::filesystem::path resume_from;      // stage checkpoint to continue from
  int stop_after = 5;                     // last stage to run
  std::function<void(const StageReport&)> on_stage;
  GateRetryHook on_gate_retry;
};

struct TrainResult {
  ModelBundle bundle;
  std::vector<StageReport> reports;
};

inline std::filesystem::path stage_checkpoint(const std::filesystem::path& dir, int stage) {
  return dir / ("stage" + std::to_string(stage) + ".ckpt");
}

inline TrainResult train_hans(const AheConfig& ahe, const TrainConfig& cfg, const TrainOptions& opts = {}) {
  validate(ahe);
  validate(cfg);
  TrainResult result;
  int start = 1;
  const nlohmann::json cfg_json = cfg;
  if (!opts.resume_from.empty()) {
    auto loaded = load_checkpoint(opts.resume_from);
    const auto& extra = loaded.manifest.at("extra");
    if (!(loaded.bundle.cfg == ahe)) throw std::invalid_argument("resume: checkpoint AHE config differs");
    if (extra.value("train_cfg_hash", "") != config_hash(cfg_json))
      throw std::invalid_argument("resume: checkpoint training config differs");
    result.bundle = std::move(loaded.bundle);
    start = extra.at("stage").get<int>() + 1;
  } else {
    auto rng = derived_rng(ahe.seed, 0);
    result.bundle = build_models(ahe, rng);
  }
  JsonlSink sink;
  if (!opts.out_dir.empty()) sink.open(opts.out_dir / "train_report.jsonl");
  for (int stage = start; stage <= opts.stop_after; ++stage) {
    StageReport r;
    switch (stage) {
      case 1: r = stage1_pretrain(result.bundle, cfg); break;
      case 2: r = stage2_security(result.bundle, cfg); break;
      case 3: r = stage3_assess(result.bundle, cfg); break;
      case 4: r = stage4_balance(result.bundle, cfg, opts.on_gate_retry); break;
      default: r = stage5_align(result.bundle, cfg); break;
    }
    write_report(sink, r);
    if (!opts.out_dir.empty())
      save_checkpoint(result.bundle, stage_checkpoint(opts.out_dir, stage),
                      {{"stage", stage}, {"train_cfg", cfg_json}, {"train_cfg_hash", config_hash(cfg_json)}});
    if (opts.on_stage) opts.on_stage(r);
    result.reports.push_back(std::move(r));
  }
  return result;
}

}  // namespace hanlab
