#pragma once

// Adversary suite: known-model attackers, pseudo-collusion guessing and
// gradient-leakage reconstruction. Attack code only ever sees intercepted
// traffic, original (public) models and published datasets.

#include "hanlab/ppu.hpp"

#include <png.h>

#include <cstdio>
#include <numeric>

namespace hanlab {

struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// Values below this guessing difference are treated as a successful guess.
inline constexpr double kGuessingFloor = 0.01;

// What an eavesdropper captures on the wire.
struct Traffic {
  CiphertextBatch c;
  PublicKeyBatch pk;
  std::size_t size() const { return c.size(); }
};

// Client-side simulation: the victim encrypts fresh plaintexts with fresh
// keys. The plaintexts are returned separately and used only for scoring.
struct Interception {
  Traffic traffic;
  Vec truth;
};

template <class Rng>
Interception intercept(const Model<float>& victim_enc, std::size_t n, const AheConfig& cfg, Rng& rng) {
  Interception out;
  out.truth = uniform_plaintexts(n, cfg.psi, rng);
  auto [keys, pks] = keygen(n, cfg, rng);
  out.traffic.c = encrypt(victim_enc, PlaintextBatch{out.truth}, keys, cfg);
  out.traffic.pk = std::move(pks);
  return out;
}

struct KmaConfig {
  std::size_t steps = 4000;
  double lr = 1e-3;
  double lr_min = 1e-5;
  std::size_t batch_size = 256;
  double weight_decay = 1e-6;
  std::size_t eval_samples = 20000;
  std::uint64_t seed = 0;
};

inline void validate(const KmaConfig& c) {
  if (c.steps == 0 || c.batch_size == 0 || c.eval_samples == 0)
    throw std::invalid_argument("kma config: steps, batch size and eval samples must be >= 1");
  if (!(c.lr > 0.0) || !(c.lr_min >= 0.0)) throw std::invalid_argument("kma config: learning rates must be positive");
}

inline void to_json(nlohmann::json& j, const KmaConfig& c) {
  j = {{"steps", c.steps},           {"lr", c.lr},
       {"lr_min", c.lr_min},         {"batch_size", c.batch_size},
       {"weight_decay", c.weight_decay}, {"eval_samples", c.eval_samples},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, KmaConfig& c) {
  KmaConfig d;
  c.steps = j.value("steps", d.steps);
  c.lr = j.value("lr", d.lr);
  c.lr_min = j.value("lr_min", d.lr_min);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.eval_samples = j.value("eval_samples", d.eval_samples);
  c.seed = j.value("seed", d.seed);
}

// crack1 (c, pk) and crack2 (c only), each in standard and double depth.
struct KmaAttackers {
  std::array<Model<float>, 4> models;
  std::map<std::string, std::vector<CurvePoint>> curves;

  Model<float>& get(AttackerKind k) { return models[static_cast<std::size_t>(k)]; }
  const Model<float>& get(AttackerKind k) const { return models[static_cast<std::size_t>(k)]; }
};

// Trains all four attacker variants on traffic the attacker generates
// itself with the ORIGINAL encryptor.
inline KmaAttackers train_kma_attackers(const Model<float>& original, const AheConfig& cfg, const KmaConfig& kc) {
  if (original.role != Role::encryptor) throw std::invalid_argument("kma: model is not an encryptor");
  if (original.provenance != Provenance::original)
    throw ContractViolation("kma: attackers may only be trained on the original model, not a private one");
  validate(kc);
  auto rng = derived_rng(kc.seed, 300);
  KmaAttackers out;
  std::array<nn::AdamW<float>, 4> opt;
  nn::AdamWConfig ac;
  ac.weight_decay = kc.weight_decay;
  for (auto k : kAllAttackerKinds) {
    const auto ki = static_cast<std::size_t>(k);
    out.models[ki] = make_attacker<float>(cfg, k, rng);
    opt[ki] = nn::AdamW<float>(out.models[ki].net, ac);
  }
  const nn::CosineSchedule sched{kc.lr, kc.lr_min, kc.steps};
  for (std::size_t step = 0; step < kc.steps; ++step) {
    const Vec m = uniform_plaintexts(kc.batch_size, cfg.psi, rng);
    auto [keys, pks] = keygen(kc.batch_size, cfg, rng);
    const auto c = original.net.forward(encryptor_input<float>(m, keys.sk_a, keys.sk_b));
    for (auto k : kAllAttackerKinds) {
      const auto ki = static_cast<std::size_t>(k);
      const double loss = attacker_update(out.models[ki], opt[ki], c, pks.pk, m, sched.at(step));
      if (!std::isfinite(loss)) throw std::runtime_error("kma: non-finite attacker loss");
      if (step % 10 == 0 || step + 1 == kc.steps) out.curves[std::string(to_string(k))].push_back({step, loss});
    }
  }
  return out;
}

inline Vec crack(const Model<float>& atk, const Traffic& t) {
  return attack_forward(atk, t.c, atk.role == Role::attacker_pk ? std::optional(t.pk) : std::nullopt);
}

inline EvalStats score_attacker(const Model<float>& atk, const Traffic& t, const Vec& truth) {
  return l1_stats(crack(atk, t), truth);
}

struct AttackRow {
  double orig;
  double estimate;
  double diff;
};

struct AttackReport {
  std::string name;
  double mad = 0.0;
  double var = 0.0;
  std::vector<AttackRow> rows;
  bool success = false;
  nlohmann::json config;
  EvalStats stats;
  // per-sample trace
  Vec orig, estimate, m_agg, m_b, m_att;
  std::vector<std::size_t> picks;
};

inline nlohmann::json to_json_record(const AttackReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) rows.push_back({{"orig", row.orig}, {"estimate", row.estimate}, {"diff", row.diff}});
  return {{"attack", r.name},   {"mad", r.mad},        {"var", r.var},
          {"rows", rows},       {"success", r.success}, {"config", r.config},
          {"stats", stats_json(r.stats)}, {"samples", r.orig.size()}};
}

namespace detail {

// Five rows spread over the range of |orig|.
inline std::vector<AttackRow> example_rows(const Vec& orig, const Vec& est) {
  const auto n = static_cast<std::size_t>(orig.size());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(orig[static_cast<Eigen::Index>(a)]) < std::abs(orig[static_cast<Eigen::Index>(b)]);
  });
  std::vector<AttackRow> rows;
  if (n == 0) return rows;
  for (int q = 0; q < 5; ++q) {
    const auto i = static_cast<Eigen::Index>(idx[std::min(n - 1, static_cast<std::size_t>(q * (n - 1) / 4))]);
    rows.push_back({orig[i], est[i], std::abs(static_cast<double>(est[i]) - orig[i])});
  }
  return rows;
}

inline void finish_report(AttackReport& r) {
  r.stats = l1_stats(r.estimate, r.orig);
  r.mad = r.stats.mad;
  r.var = r.stats.var;
  r.rows = example_rows(r.orig, r.estimate);
  r.success = r.mad < kGuessingFloor;
}

inline void require_three_party(const Model<float>& agg, const AheConfig& cfg) {
  if (cfg.num_clients != 3 || agg.net.architecture().input_width != 3 * (cfg.ciphertext_len + 1))
    throw std::invalid_argument("pseudo-collusion: needs an aggregator over exactly 3 participants");
}

}  // namespace detail

inline double guess_from_aggregate(double m_agg, double m_b, double m_att) { return m_agg - m_b - m_att; }

// Which aggregator slot each party occupies.
struct CollusionSlots {
  std::size_t victim = 0;
  std::size_t bob = 1;
  std::size_t attacker = 2;
};

namespace detail {

template <class Rng>
AttackReport collusion_common(std::string name, const Traffic& victim, const Vec& truth, const CiphertextBatch& c_b,
                              const PublicKeyBatch& pk_b, const Vec& m_b, const Model<float>& attacker_enc,
                              const Model<float>& aggregator, const AheConfig& cfg, Rng& rng, CollusionSlots slots) {
  const std::size_t n = victim.size();
  if (static_cast<std::size_t>(truth.size()) != n) throw std::invalid_argument(name + ": truth length mismatch");
  const std::array<std::size_t, 3> s{slots.victim, slots.bob, slots.attacker};
  if (*std::max_element(s.begin(), s.end()) > 2 || s[0] == s[1] || s[0] == s[2] || s[1] == s[2])
    throw std::invalid_argument(name + ": slots must be a permutation of 0, 1, 2");
  AttackReport r;
  r.name = std::move(name);
  r.m_att = uniform_plaintexts(n, cfg.psi, rng);
  auto [att_keys, att_pks] = keygen(n, cfg, rng);
  const auto c_att = encrypt(attacker_enc, PlaintextBatch{r.m_att}, att_keys, cfg);
  std::vector<CiphertextBatch> cts(3);
  std::vector<PublicKeyBatch> pks(3);
  cts[slots.victim] = victim.c;
  pks[slots.victim] = victim.pk;
  cts[slots.bob] = c_b;
  pks[slots.bob] = pk_b;
  cts[slots.attacker] = c_att;
  pks[slots.attacker] = att_pks;
  r.m_agg = aggregate(aggregator, std::span<const CiphertextBatch>(cts), std::span<const PublicKeyBatch>(pks));
  r.m_b = m_b;
  r.orig = truth;
  r.estimate = r.m_agg - r.m_b - r.m_att;
  finish_report(r);
  return r;
}

}  // namespace detail

// Bob's side is encrypted with the original model, which the attacker has.
template <class Rng>
AttackReport pcaom(const Traffic& victim, const Vec& victim_truth, const Model<float>& bob_original,
                   const Model<float>& attacker_enc, const Model<float>& aggregator, const AheConfig& cfg, Rng& rng,
                   CollusionSlots slots = {}) {
  detail::require_three_party(aggregator, cfg);
  if (bob_original.provenance != Provenance::original)
    throw ContractViolation("pcaom: Bob's model must be the original model");
  const auto n = victim.size();
  const Vec m_b = uniform_plaintexts(n, cfg.psi, rng);
  auto [keys, pks] = keygen(n, cfg, rng);
  const auto c_b = encrypt(bob_original, PlaintextBatch{m_b}, keys, cfg);
  auto r = detail::collusion_common("pcaom", victim, victim_truth, c_b, pks, m_b, attacker_enc, aggregator, cfg, rng,
                                    slots);
  r.config = {{"samples", n}, {"victim_slot", slots.victim}, {"bob_slot", slots.bob}, {"attacker_slot", slots.attacker}};
  return r;
}

// Bob's entries are drawn from his last public dataset; the attacker only
// knows the noisy plaintext.
template <class Rng>
AttackReport pcapd(const Traffic& victim, const Vec& victim_truth, const PublicDataset& bob_public,
                   const Model<float>& attacker_enc, const Model<float>& aggregator, const AheConfig& cfg, Rng& rng,
                   CollusionSlots slots = {}) {
  detail::require_three_party(aggregator, cfg);
  if (bob_public.empty()) throw std::invalid_argument("pcapd: Bob's public dataset is empty");
  const auto n = static_cast<Eigen::Index>(victim.size());
  std::uniform_int_distribution<std::size_t> pick(0, bob_public.size() - 1);
  CiphertextBatch c_b{Mat(bob_public.c().rows(), n)};
  PublicKeyBatch pk_b{Vec(n)};
  Vec m_b(n);
  std::vector<std::size_t> picks;
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto j = pick(rng);
    picks.push_back(j);
    const auto e = bob_public.entry(j);
    c_b.c.col(k) = e.c;
    pk_b.pk[k] = e.pk;
    m_b[k] = e.x_noisy;
  }
  auto r = detail::collusion_common("pcapd", victim, victim_truth, c_b, pk_b, m_b, attacker_enc, aggregator, cfg, rng,
                                    slots);
  r.picks = std::move(picks);
  r.config = {{"samples", n},
              {"victim_slot", slots.victim},
              {"bob_slot", slots.bob},
              {"attacker_slot", slots.attacker},
              {"bob_round", bob_public.round()},
              {"bob_sigma", bob_public.sigma()}};
  return r;
}

// ---------------------------------------------------------------------------
// Gradient leakage

using VecD = Eigen::VectorXd;
using MatD = Eigen::MatrixXd;

// Two-layer probe classifier: sigmoid hidden layer, softmax output.
struct DlgProbe {
  MatD w1;
  VecD b1;
  MatD w2;
  VecD b2;

  std::size_t input_width() const { return static_cast<std::size_t>(w1.cols()); }
  std::size_t classes() const { return static_cast<std::size_t>(w2.rows()); }
  std::size_t parameter_count() const {
    return static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + b2.size());
  }

  template <class Rng>
  static DlgProbe init(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    DlgProbe p;
    auto fill = [&](auto& m, double bound) {
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    };
    p.w1.resize(static_cast<Eigen::Index>(hidden), static_cast<Eigen::Index>(in));
    p.b1.resize(static_cast<Eigen::Index>(hidden));
    p.w2.resize(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(hidden));
    p.b2.resize(static_cast<Eigen::Index>(out));
    fill(p.w1, 1.0 / std::sqrt(static_cast<double>(in)));
    fill(p.b1, 1.0 / std::sqrt(static_cast<double>(in)));
    fill(p.w2, 1.0 / std::sqrt(static_cast<double>(hidden)));
    fill(p.b2, 1.0 / std::sqrt(static_cast<double>(hidden)));
    return p;
  }
};

// Gradients of the probe's loss in parameter order w1, b1, w2, b2.
struct ProbeGrads {
  MatD w1;
  VecD b1;
  MatD w2;
  VecD b2;

  VecD flatten() const {
    VecD out(w1.size() + b1.size() + w2.size() + b2.size());
    Eigen::Index o = 0;
    out.segment(o, w1.size()) = w1.reshaped();
    o += w1.size();
    out.segment(o, b1.size()) = b1;
    o += b1.size();
    out.segment(o, w2.size()) = w2.reshaped();
    o += w2.size();
    out.segment(o, b2.size()) = b2;
    return out;
  }

  static ProbeGrads unflatten(const VecD& flat, const DlgProbe& shape) {
    const auto n1 = shape.w1.size(), n2 = shape.b1.size(), n3 = shape.w2.size(), n4 = shape.b2.size();
    if (flat.size() != n1 + n2 + n3 + n4) throw std::invalid_argument("dlg: gradient vector length mismatch");
    ProbeGrads g;
    g.w1 = flat.segment(0, n1).reshaped(shape.w1.rows(), shape.w1.cols());
    g.b1 = flat.segment(n1, n2);
    g.w2 = flat.segment(n1 + n2, n3).reshaped(shape.w2.rows(), shape.w2.cols());
    g.b2 = flat.segment(n1 + n2 + n3, n4);
    return g;
  }

  bool matches(const DlgProbe& p) const {
    return w1.rows() == p.w1.rows() && w1.cols() == p.w1.cols() && b1.size() == p.b1.size() &&
           w2.rows() == p.w2.rows() && w2.cols() == p.w2.cols() && b2.size() == p.b2.size();
  }
};

namespace detail {

inline VecD sigmoid(const VecD& z) { return (1.0 / (1.0 + (-z.array()).exp())).matrix(); }

inline VecD softmax(const VecD& z) {
  const VecD e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

struct ProbeForward {
  VecD a;   // hidden activation
  VecD q;   // predicted distribution
  VecD d1;  // dL/d(hidden pre-activation)
  VecD d2;  // dL/d(logits)
};

inline ProbeForward probe_forward(const DlgProbe& p, const VecD& x, const VecD& label_probs) {
  ProbeForward f;
  f.a = sigmoid(p.w1 * x + p.b1);
  f.q = softmax(p.w2 * f.a + p.b2);
  f.d2 = f.q - label_probs;
  f.d1 = ((p.w2.transpose() * f.d2).array() * f.a.array() * (1.0 - f.a.array())).matrix();
  return f;
}

}  // namespace detail

// Cross-entropy gradients for input x against soft label distribution p.
inline ProbeGrads probe_gradients(const DlgProbe& p, const VecD& x, const VecD& label_probs) {
  if (x.size() != p.w1.cols() || label_probs.size() != p.w2.rows())
    throw std::invalid_argument("dlg: input or label width does not match the probe");
  const auto f = detail::probe_forward(p, x, label_probs);
  return {f.d1 * x.transpose(), f.d1, f.d2 * f.a.transpose(), f.d2};
}

inline VecD one_hot(std::size_t label, std::size_t classes) {
  VecD y = VecD::Zero(static_cast<Eigen::Index>(classes));
  y[static_cast<Eigen::Index>(label)] = 1.0;
  return y;
}

// ||grad(x', softmax(y')) - target||^2 and its gradient w.r.t. x' and y'.
inline double gradient_distance(const DlgProbe& p, const ProbeGrads& target, const VecD& x, const VecD& y_logits,
                                VecD* dx, VecD* dy) {
  const VecD lp = detail::softmax(y_logits);
  const auto f = detail::probe_forward(p, x, lp);
  const MatD r1 = f.d1 * x.transpose() - target.w1;
  const VecD rb1 = f.d1 - target.b1;
  const MatD r2 = f.d2 * f.a.transpose() - target.w2;
  const VecD rb2 = f.d2 - target.b2;
  const double dist = r1.squaredNorm() + rb1.squaredNorm() + r2.squaredNorm() + rb2.squaredNorm();
  if (!dx && !dy) return dist;
  // adjoints of d1 and d2 from the four residual terms
  VecD g_d1 = 2.0 * (r1 * x) + 2.0 * rb1;
  VecD g_d2 = 2.0 * (r2 * f.a) + 2.0 * rb2;
  VecD g_x = 2.0 * (r1.transpose() * f.d1);
  VecD g_a = 2.0 * (r2.transpose() * f.d2);
  // d1 = (W2^T d2) * s, s = a(1-a)
  const VecD s = (f.a.array() * (1.0 - f.a.array())).matrix();
  g_d2 += p.w2 * (g_d1.array() * s.array()).matrix();
  const VecD g_s = (g_d1.array() * (p.w2.transpose() * f.d2).array()).matrix();
  g_a += (g_s.array() * (1.0 - 2.0 * f.a.array())).matrix();
  // d2 = q - softmax(y')
  const VecD g_q = g_d2;
  const VecD g_lp = -g_d2;
  const VecD g_z2 = (f.q.array() * (g_q.array() - g_q.dot(f.q))).matrix();
  g_a += p.w2.transpose() * g_z2;
  const VecD g_z1 = (g_a.array() * s.array()).matrix();
  g_x += p.w1.transpose() * g_z1;
  if (dx) *dx = g_x;
  if (dy) *dy = (lp.array() * (g_lp.array() - g_lp.dot(lp))).matrix();
  return dist;
}

// Plain gradient descent on z; stops early on a non-finite value.
template <class F>
std::vector<double> descend(VecD& z, F&& value_and_grad, double eta, std::size_t iterations) {
  std::vector<double> curve;
  VecD g(z.size());
  for (std::size_t it = 0; it < iterations; ++it) {
    const double v = value_and_grad(z, g);
    curve.push_back(v);
    if (!std::isfinite(v) || !g.allFinite()) break;
    z -= eta * g;
  }
  return curve;
}

struct DlgConfig {
  std::size_t iterations = 2000;
  double eta = 1.0;
  // dummy input ~ U(x_low, x_high), dummy label logits ~ N(0, label_std)
  double x_low = 0.0;
  double x_high = 1.0;
  double label_std = 1.0;
  double mse_threshold = 0.1;
  std::uint64_t seed = 0;
};

inline void validate(const DlgConfig& c) {
  if (c.iterations == 0) throw std::invalid_argument("dlg config: iterations must be >= 1");
  if (!(c.eta > 0.0)) throw std::invalid_argument("dlg config: step size must be positive");
  if (!(c.x_low < c.x_high) || !(c.label_std > 0.0)) throw std::invalid_argument("dlg config: bad init ranges");
}

inline void to_json(nlohmann::json& j, const DlgConfig& c) {
  j = {{"iterations", c.iterations}, {"eta", c.eta},           {"x_low", c.x_low},
       {"x_high", c.x_high},         {"label_std", c.label_std}, {"mse_threshold", c.mse_threshold},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, DlgConfig& c) {
  DlgConfig d;
  c.iterations = j.value("iterations", d.iterations);
  c.eta = j.value("eta", d.eta);
  c.x_low = j.value("x_low", d.x_low);
  c.x_high = j.value("x_high", d.x_high);
  c.label_std = j.value("label_std", d.label_std);
  c.mse_threshold = j.value("mse_threshold", d.mse_threshold);
  c.seed = j.value("seed", d.seed);
}

struct DlgResult {
  VecD x;
  VecD y_logits;
  std::vector<double> distance;
  double mse = std::numeric_limits<double>::infinity();
  std::size_t label = 0;
  bool label_match = false;
  bool success = false;
};

// Reconstructs (x, y) from observed gradients. The true sample is used only
// to score the result.
inline DlgResult dlg(const DlgProbe& probe, const ProbeGrads& target, const DlgConfig& cfg, const VecD& true_x,
                     std::size_t true_label) {
  validate(cfg);
  if (!target.matches(probe)) throw std::invalid_argument("dlg: gradient shapes do not match the probe weights");
  if (true_x.size() != probe.w1.cols()) throw std::invalid_argument("dlg: reference input width mismatch");
  const auto nx = probe.w1.cols();
  const auto ny = probe.w2.rows();
  auto rng = derived_rng(cfg.seed, 400);
  std::uniform_real_distribution<double> ux(cfg.x_low, cfg.x_high);
  std::normal_distribution<double> uy(0.0, cfg.label_std);
  VecD z(nx + ny);
  for (Eigen::Index i = 0; i < nx; ++i) z[i] = ux(rng);
  for (Eigen::Index i = 0; i < ny; ++i) z[nx + i] = uy(rng);
  VecD dx, dy;
  auto f = [&](const VecD& zz, VecD& g) {
    const double d = gradient_distance(probe, target, zz.head(nx), zz.tail(ny), &dx, &dy);
    g.head(nx) = dx;
    g.tail(ny) = dy;
    return d;
  };
  DlgResult r;
  r.distance = descend(z, f, cfg.eta, cfg.iterations);
  r.x = z.head(nx);
  r.y_logits = z.tail(ny);
  const bool finite = z.allFinite() && !r.distance.empty() && std::isfinite(r.distance.back());
  if (finite) {
    r.mse = (r.x - true_x).squaredNorm() / static_cast<double>(nx);
    Eigen::Index best = 0;
    r.y_logits.maxCoeff(&best);
    r.label = static_cast<std::size_t>(best);
    r.label_match = r.label == true_label;
  }
  r.success = finite && r.mse <= cfg.mse_threshold && r.label_match;
  return r;
}

// Maps the victim's true flattened gradient to what the attacker recovers.
using GradientChannel = std::function<VecD(const VecD&)>;

inline GradientChannel identity_channel() {
  return [](const VecD& g) { return g; };
}

// Victim encrypts every gradient scalar with fresh keys under its encryptor;
// the attacker decodes the intercepted traffic with a cracking model.
inline GradientChannel hans_channel(const Model<float>& victim_enc, const Model<float>& atk, const AheConfig& cfg,
                                    std::uint64_t seed) {
  return [&victim_enc, &atk, cfg, seed](const VecD& g) {
    auto rng = derived_rng(seed, 401);
    const auto m = clip_plaintexts(g.cast<float>(), cfg.psi);
    auto [keys, pks] = keygen(static_cast<std::size_t>(g.size()), cfg, rng);
    const Traffic t{encrypt(victim_enc, m, keys, cfg), pks};
    return VecD(crack(atk, t).cast<double>());
  };
}

struct DlgHansResult {
  DlgResult via_crack1;
  DlgResult via_crack2;
  bool success = false;
};

// Runs reconstruction on both recovered gradient streams.
inline DlgHansResult dlg_hans(const DlgProbe& probe, const ProbeGrads& true_grads, const GradientChannel& crack1,
                              const GradientChannel& crack2, const DlgConfig& cfg, const VecD& true_x,
                              std::size_t true_label) {
  const VecD flat = true_grads.flatten();
  DlgHansResult r;
  r.via_crack1 = dlg(probe, ProbeGrads::unflatten(crack1(flat), probe), cfg, true_x, true_label);
  r.via_crack2 = dlg(probe, ProbeGrads::unflatten(crack2(flat), probe), cfg, true_x, true_label);
  r.success = r.via_crack1.success || r.via_crack2.success;
  return r;
}

inline nlohmann::json to_json_record(const std::string& name, const DlgResult& r) {
  return {{"attack", name},
          {"mse", std::isfinite(r.mse) ? nlohmann::json(r.mse) : nlohmann::json(nullptr)},
          {"label", r.label},
          {"label_match", r.label_match},
          {"success", r.success},
          {"iterations", r.distance.size()},
          {"final_distance", r.distance.empty() ? 0.0 : r.distance.back()}};
}

// Grayscale grid of side x side images, values clamped to [0, 1].
inline void write_png_grid(const std::filesystem::path& path, const std::vector<VecD>& images, std::size_t side,
                           std::size_t cols = 0) {
  if (images.empty()) throw std::invalid_argument("png grid: no images");
  for (const auto& im : images)
    if (static_cast<std::size_t>(im.size()) != side * side) throw std::invalid_argument("png grid: image size mismatch");
  if (cols == 0) cols = images.size();
  const std::size_t rows = (images.size() + cols - 1) / cols;
  const std::size_t pad = 2;
  const std::size_t w = cols * (side + pad) + pad, h = rows * (side + pad) + pad;
  std::vector<unsigned char> px(w * h, 0);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const std::size_t ox = pad + (n % cols) * (side + pad), oy = pad + (n / cols) * (side + pad);
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        double v = images[n][static_cast<Eigen::Index>(y * side + x)];
        v = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
        px[(oy + y) * w + ox + x] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("png write failed for " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) png_write_row(png, px.data() + y * w);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace hanlab
