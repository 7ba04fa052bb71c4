#pragma once

// Training losses (MSE scale) and evaluation statistics (L1 scale).
//
// Attacker losses:  L(enc, atk)  = E[(m - atk(enc(m, ska, skb)))^2]
//                   L^(enc, atk) = E[(m - atk(pk, enc(m, ska, skb)))^2]
// Aggregation loss: E = E[(sum_i m_i - agg(c_1, pk_1, ..., c_N, pk_N))^2]
// Pretrain:         E - w * sum_i (L_i + L^_i)
// Final:            lambda * E + sum_i (max(0, gamma - L_i) + max(0, gamma - L^_i))

#include "hanlab/ahe.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace hanlab {

struct LossConfig {
  double gamma = 0.015;
  double lambda = 1.0;
  // Weight on the attacker terms of the pretrain objective; 0 leaves a pure
  // aggregation fine-tune.
  double attacker_weight = 1.0;
};

inline void validate(const LossConfig& c) {
  if (!(c.gamma >= 0.0)) throw std::invalid_argument("loss config: gamma must be >= 0");
  if (!(c.lambda > 0.0)) throw std::invalid_argument("loss config: lambda must be > 0");
  if (!(c.attacker_weight >= 0.0)) throw std::invalid_argument("loss config: attacker_weight must be >= 0");
}

// mad == mean_l1 for a single batch; std_mean / std_max are spreads across
// batches or rounds and stay 0 until combine() fills them.
struct EvalStats {
  double mean_l1 = 0.0;
  double max_l1 = 0.0;
  double std_mean = 0.0;
  double std_max = 0.0;
  double mad = 0.0;
  double var = 0.0;
  std::size_t count = 0;
};

inline void check_same_length(Eigen::Index a, Eigen::Index b, const char* where) {
  if (a != b) throw std::invalid_argument(std::string(where) + ": length mismatch");
}

inline double mse(const Vec& a, const Vec& b) {
  check_same_length(a.size(), b.size(), "mse");
  if (a.size() == 0) return 0.0;
  return (a.cast<double>() - b.cast<double>()).squaredNorm() / static_cast<double>(a.size());
}

inline EvalStats l1_stats(const Vec& a, const Vec& b) {
  check_same_length(a.size(), b.size(), "l1_stats");
  EvalStats s;
  s.count = static_cast<std::size_t>(a.size());
  if (a.size() == 0) return s;
  const Eigen::VectorXd d = a.cast<double>() - b.cast<double>();
  const double n = static_cast<double>(d.size());
  s.mean_l1 = d.cwiseAbs().mean();
  s.max_l1 = d.cwiseAbs().maxCoeff();
  s.mad = s.mean_l1;
  const double mean = d.mean();
  s.var = (d.array() - mean).square().sum() / n;
  return s;
}

// Per-round summary: means of means and maxima plus their spreads.
inline EvalStats combine(std::span<const EvalStats> rounds) {
  EvalStats out;
  if (rounds.empty()) return out;
  const double n = static_cast<double>(rounds.size());
  for (const auto& r : rounds) {
    out.mean_l1 += r.mean_l1 / n;
    out.max_l1 += r.max_l1 / n;
    out.var += r.var / n;
    out.count += r.count;
  }
  for (const auto& r : rounds) {
    out.std_mean += (r.mean_l1 - out.mean_l1) * (r.mean_l1 - out.mean_l1) / n;
    out.std_max += (r.max_l1 - out.max_l1) * (r.max_l1 - out.max_l1) / n;
  }
  out.std_mean = std::sqrt(out.std_mean);
  out.std_max = std::sqrt(out.std_max);
  out.mad = out.mean_l1;
  return out;
}

inline double hinge(double gamma, double attacker_loss) { return std::max(0.0, gamma - attacker_loss); }

inline double compose_pretrain(double agg_loss, std::span<const double> attacker_losses, double attacker_weight = 1.0) {
  double s = 0.0;
  for (double l : attacker_losses) s += l;
  return agg_loss - attacker_weight * s;
}

inline double compose_final(double agg_loss, std::span<const double> attacker_losses, double gamma, double lambda) {
  double s = lambda * agg_loss;
  for (double l : attacker_losses) s += hinge(gamma, l);
  return s;
}

// Plaintexts, keys and exact sums for one aggregation step.
struct AggregationBatch {
  std::vector<Vec> plaintexts;
  std::vector<KeyBatch> keys;
  Vec target;
  std::size_t size() const { return static_cast<std::size_t>(target.size()); }
};

inline void check_batch(const AggregationBatch& batch, std::size_t clients) {
  if (batch.plaintexts.size() != clients || batch.keys.size() != clients)
    throw std::invalid_argument("aggregation batch: expected " + std::to_string(clients) + " client streams");
  for (std::size_t i = 0; i < clients; ++i) {
    if (static_cast<Eigen::Index>(batch.plaintexts[i].size()) != batch.target.size() ||
        static_cast<Eigen::Index>(batch.keys[i].size()) != batch.target.size())
      throw std::invalid_argument("aggregation batch: client batch lengths differ");
  }
}

namespace detail {

template <typename S>
S mse_value(const nn::Matrix<S>& guess_row, const Vec& truth) {
  const auto diff = guess_row.row(0).transpose() - truth.cast<S>();
  return diff.squaredNorm() / static_cast<S>(truth.size());
}

// d/dguess of scale * mean((guess - truth)^2)
template <typename S>
nn::Matrix<S> mse_grad(const nn::Matrix<S>& guess_row, const Vec& truth, S scale) {
  nn::Matrix<S> g = guess_row;
  g.row(0) -= truth.transpose().template cast<S>();
  g *= S(2) * scale / static_cast<S>(truth.size());
  return g;
}

template <typename S>
nn::Matrix<S> attacker_features(const nn::Matrix<S>& c, const Vec& pk, bool with_pk) {
  if (!with_pk) return c;
  nn::Matrix<S> x(c.rows() + 1, c.cols());
  x.topRows(c.rows()) = c;
  x.row(c.rows()) = pk.transpose().template cast<S>();
  return x;
}

}  // namespace detail

template <typename S>
S attacker_loss_impl(const Model<S>& enc, const Model<S>& atk, const Vec& m, const KeyBatch& keys, Role expected) {
  detail::require_role(enc.role, Role::encryptor, "attacker_loss");
  detail::require_role(atk.role, expected, "attacker_loss");
  const auto c = enc.net.forward(encryptor_input<S>(m, keys.sk_a, keys.sk_b));
  const Vec pk = keys.sk_a + keys.sk_b;
  const auto guess = atk.net.forward(detail::attacker_features<S>(c, pk, expected == Role::attacker_pk));
  return detail::mse_value<S>(guess, m);
}

// Ciphertext-only attacker loss.
template <typename S>
S attacker_loss(const Model<S>& enc, const Model<S>& atk_nopk, const Vec& m, const KeyBatch& keys) {
  return attacker_loss_impl(enc, atk_nopk, m, keys, Role::attacker_nopk);
}

// Attacker loss with the public key as an extra input.
template <typename S>
S attacker_loss_pk(const Model<S>& enc, const Model<S>& atk_pk, const Vec& m, const KeyBatch& keys) {
  return attacker_loss_impl(enc, atk_pk, m, keys, Role::attacker_pk);
}

template <typename S>
S aggregation_loss(const ModelBundleT<S>& b, const AggregationBatch& batch) {
  check_batch(batch, b.num_clients());
  const std::size_t n = b.num_clients();
  const Eigen::Index l = static_cast<Eigen::Index>(b.cfg.ciphertext_len);
  nn::Matrix<S> x(static_cast<Eigen::Index>(n) * (l + 1), static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& k = batch.keys[i];
    x.middleRows(static_cast<Eigen::Index>(i) * (l + 1), l) =
        b.encryptors[i].net.forward(encryptor_input<S>(batch.plaintexts[i], k.sk_a, k.sk_b));
    x.row(static_cast<Eigen::Index>(i) * (l + 1) + l) = (k.sk_a + k.sk_b).transpose().template cast<S>();
  }
  return detail::mse_value<S>(b.aggregator.net.forward(x), batch.target);
}

// Forms that accept an arbitrary guess or aggregation function in place of a
// network. guess(c, pk_or_null) -> Vec; agg(cts, pks) -> Vec.
template <typename S, class Guess>
double attacker_loss_with(const Model<S>& enc, Guess&& guess, const Vec& m, const KeyBatch& keys, bool with_pk) {
  detail::require_role(enc.role, Role::encryptor, "attacker_loss");
  const Mat c = enc.net.forward(encryptor_input<S>(m, keys.sk_a, keys.sk_b)).template cast<float>();
  const Vec pk = keys.sk_a + keys.sk_b;
  return mse(guess(c, with_pk ? &pk : nullptr), m);
}

template <typename S, class Agg>
double aggregation_loss_with(const ModelBundleT<S>& b, Agg&& agg, const AggregationBatch& batch) {
  check_batch(batch, b.num_clients());
  std::vector<CiphertextBatch> cts;
  std::vector<PublicKeyBatch> pks;
  for (std::size_t i = 0; i < b.num_clients(); ++i) {
    const auto& k = batch.keys[i];
    cts.push_back({b.encryptors[i].net.forward(encryptor_input<S>(batch.plaintexts[i], k.sk_a, k.sk_b)).template cast<float>()});
    pks.push_back(public_keys(k));
  }
  return mse(agg(std::span<const CiphertextBatch>(cts), std::span<const PublicKeyBatch>(pks)), batch.target);
}

// Standard-depth attackers drive the encryptor objectives; the order is
// (client 0: L, L^), (client 1: L, L^), ...
template <typename S>
std::vector<double> attacker_losses(const ModelBundleT<S>& b, const AggregationBatch& batch) {
  check_batch(batch, b.num_clients());
  std::vector<double> out;
  for (std::size_t i = 0; i < b.num_clients(); ++i) {
    out.push_back(static_cast<double>(
        attacker_loss(b.encryptors[i], b.attacker(i, AttackerKind::atk2), batch.plaintexts[i], batch.keys[i])));
    out.push_back(static_cast<double>(
        attacker_loss_pk(b.encryptors[i], b.attacker(i, AttackerKind::atk1), batch.plaintexts[i], batch.keys[i])));
  }
  return out;
}

template <typename S>
double pretrain_objective(const ModelBundleT<S>& b, const AggregationBatch& batch, const LossConfig& cfg) {
  const auto atk = attacker_losses(b, batch);
  return compose_pretrain(static_cast<double>(aggregation_loss(b, batch)), atk, cfg.attacker_weight);
}

template <typename S>
double final_objective(const ModelBundleT<S>& b, const AggregationBatch& batch, const LossConfig& cfg) {
  const auto atk = attacker_losses(b, batch);
  return compose_final(static_cast<double>(aggregation_loss(b, batch)), atk, cfg.gamma, cfg.lambda);
}

// ---------------------------------------------------------------------------
// Gradient evaluation. Each *_backward returns the value and adds the
// gradient into Param::grad of the models selected by the caller.

enum class Objective { aggregation, pretrain, final_hinge };

struct GradTargets {
  bool encryptors = true;
  bool aggregator = true;
};

struct ObjectiveTerms {
  double value = 0.0;
  double aggregation = 0.0;
  std::vector<double> attacker;  // same order as attacker_losses()
  std::vector<double> hinges;    // final objective only
};

template <typename S>
S attacker_loss_backward(Model<S>& enc, Model<S>& atk, const Vec& m, const KeyBatch& keys, bool grad_encryptor,
                         bool grad_attacker) {
  detail::require_role(enc.role, Role::encryptor, "attacker_loss");
  if (atk.role != Role::attacker_pk && atk.role != Role::attacker_nopk)
    throw std::invalid_argument("attacker_loss: model is not an attacker");
  const bool with_pk = atk.role == Role::attacker_pk;
  typename nn::Network<S>::Tape enc_tape, atk_tape;
  nn::Matrix<S> c = grad_encryptor ? enc.net.forward(encryptor_input<S>(m, keys.sk_a, keys.sk_b), enc_tape)
                                   : enc.net.forward(encryptor_input<S>(m, keys.sk_a, keys.sk_b));
  const Vec pk = keys.sk_a + keys.sk_b;
  const auto guess = atk.net.forward(detail::attacker_features<S>(c, pk, with_pk), atk_tape);
  const S value = detail::mse_value<S>(guess, m);
  if (!grad_encryptor && !grad_attacker) return value;
  const auto d_in = atk.net.backward(atk_tape, detail::mse_grad<S>(guess, m, S(1)), grad_attacker);
  if (grad_encryptor) enc.net.backward(enc_tape, d_in.topRows(c.rows()), true);
  return value;
}

template <typename S>
ObjectiveTerms objective_backward(ModelBundleT<S>& b, const AggregationBatch& batch, const LossConfig& cfg,
                                  Objective objective, GradTargets targets) {
  check_batch(batch, b.num_clients());
  const std::size_t n = b.num_clients();
  const Eigen::Index l = static_cast<Eigen::Index>(b.cfg.ciphertext_len);
  const Eigen::Index bs = static_cast<Eigen::Index>(batch.size());

  std::vector<typename nn::Network<S>::Tape> enc_tapes(n);
  std::vector<nn::Matrix<S>> cts(n);
  std::vector<Vec> pks(n);
  nn::Matrix<S> x(static_cast<Eigen::Index>(n) * (l + 1), bs);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& k = batch.keys[i];
    const auto in = encryptor_input<S>(batch.plaintexts[i], k.sk_a, k.sk_b);
    cts[i] = targets.encryptors ? b.encryptors[i].net.forward(in, enc_tapes[i]) : b.encryptors[i].net.forward(in);
    pks[i] = k.sk_a + k.sk_b;
    x.middleRows(static_cast<Eigen::Index>(i) * (l + 1), l) = cts[i];
    x.row(static_cast<Eigen::Index>(i) * (l + 1) + l) = pks[i].transpose().template cast<S>();
  }

  ObjectiveTerms terms;
  typename nn::Network<S>::Tape agg_tape;
  const auto out = b.aggregator.net.forward(x, agg_tape);
  terms.aggregation = static_cast<double>(detail::mse_value<S>(out, batch.target));
  const double agg_scale = objective == Objective::final_hinge ? cfg.lambda : 1.0;

  std::vector<nn::Matrix<S>> d_cts(n);
  if (targets.encryptors || targets.aggregator) {
    const auto d_x = b.aggregator.net.backward(agg_tape, detail::mse_grad<S>(out, batch.target, static_cast<S>(agg_scale)),
                                               targets.aggregator);
    if (targets.encryptors)
      for (std::size_t i = 0; i < n; ++i) d_cts[i] = d_x.middleRows(static_cast<Eigen::Index>(i) * (l + 1), l);
  }

  if (objective != Objective::aggregation) {
    for (std::size_t i = 0; i < n; ++i) {
      for (AttackerKind kind : {AttackerKind::atk2, AttackerKind::atk1}) {
        auto& atk = b.attacker(i, kind);
        typename nn::Network<S>::Tape atk_tape;
        const auto guess = atk.net.forward(detail::attacker_features<S>(cts[i], pks[i], uses_pk(kind)), atk_tape);
        const double loss = static_cast<double>(detail::mse_value<S>(guess, batch.plaintexts[i]));
        terms.attacker.push_back(loss);
        double coef = 0.0;
        if (objective == Objective::pretrain) {
          coef = -cfg.attacker_weight;
        } else {
          terms.hinges.push_back(hinge(cfg.gamma, loss));
          coef = cfg.gamma - loss > 0.0 ? -1.0 : 0.0;
        }
        if (targets.encryptors && coef != 0.0) {
          const auto d_in =
              atk.net.backward(atk_tape, detail::mse_grad<S>(guess, batch.plaintexts[i], static_cast<S>(coef)), false);
          d_cts[i] += d_in.topRows(l);
        }
      }
    }
  }

  if (targets.encryptors)
    for (std::size_t i = 0; i < n; ++i) b.encryptors[i].net.backward(enc_tapes[i], d_cts[i], true);

  switch (objective) {
    case Objective::aggregation: terms.value = terms.aggregation; break;
    case Objective::pretrain: terms.value = compose_pretrain(terms.aggregation, terms.attacker, cfg.attacker_weight); break;
    case Objective::final_hinge: terms.value = compose_final(terms.aggregation, terms.attacker, cfg.gamma, cfg.lambda); break;
  }
  return terms;
}

}  // namespace hanlab
