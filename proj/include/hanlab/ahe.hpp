#pragma once

// Aggregatable hybrid encryption realized by learned networks: per-scalar
// one-time key pairs, an encryptor per client, one aggregator that maps N
// (ciphertext, public key) pairs to the plaintext sum, and attacker models.

#include "hanlab/nn.hpp"

#include <array>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hanlab {

using Vec = Eigen::VectorXf;
using Mat = Eigen::MatrixXf;

struct AheConfig {
  double psi = 1.0;
  std::size_t ciphertext_len = 28;
  std::size_t num_clients = 3;
  double key_low = -1.0;
  double key_high = 1.0;
  std::size_t hidden_dim = 64;
  std::size_t aggregator_hidden_dim = 128;
  std::size_t num_res_blocks = 2;
  std::size_t conv_channels = 4;
  std::uint64_t seed = 0;

  bool operator==(const AheConfig&) const = default;
};

inline void validate(const AheConfig& cfg) {
  if (!(cfg.psi > 0.0)) throw std::invalid_argument("ahe config: psi must be > 0");
  if (cfg.ciphertext_len < 2) throw std::invalid_argument("ahe config: ciphertext_len must be >= 2");
  if (cfg.num_clients < 2) throw std::invalid_argument("ahe config: num_clients must be >= 2");
  if (!(cfg.key_low < cfg.key_high)) throw std::invalid_argument("ahe config: key_low must be < key_high");
  if (cfg.hidden_dim == 0 || cfg.aggregator_hidden_dim == 0 || cfg.num_res_blocks == 0)
    throw std::invalid_argument("ahe config: hidden sizes and block count must be positive");
}

struct KeyBatch {
  Vec sk_a;
  Vec sk_b;
  std::size_t size() const { return static_cast<std::size_t>(sk_a.size()); }
};

struct PublicKeyBatch {
  Vec pk;
  std::size_t size() const { return static_cast<std::size_t>(pk.size()); }
};

struct PlaintextBatch {
  Vec m;
  std::size_t clip_count = 0;
  std::size_t size() const { return static_cast<std::size_t>(m.size()); }
};

// Ciphertext i is column i; rows() is the ciphertext length L.
struct CiphertextBatch {
  Mat c;
  std::size_t size() const { return static_cast<std::size_t>(c.cols()); }
  std::size_t length() const { return static_cast<std::size_t>(c.rows()); }
};

inline PlaintextBatch clip_plaintexts(const Vec& values, double psi) {
  PlaintextBatch out{values, 0};
  const float bound = static_cast<float>(psi);
  for (Eigen::Index i = 0; i < out.m.size(); ++i) {
    float& v = out.m[i];
    if (!std::isfinite(v)) throw std::invalid_argument("plaintext: non-finite value");
    if (v > bound || v < -bound) {
      v = std::clamp(v, -bound, bound);
      ++out.clip_count;
    }
  }
  return out;
}

inline PublicKeyBatch public_keys(const KeyBatch& keys) {
  PublicKeyBatch out;
  out.pk = keys.sk_a + keys.sk_b;
  return out;
}

// Fresh keys on every call: the stream advances, nothing is cached.
template <class Rng>
std::pair<KeyBatch, PublicKeyBatch> keygen(std::size_t batch_size, const AheConfig& cfg, Rng& rng) {
  if (batch_size == 0) throw std::invalid_argument("keygen: batch_size must be >= 1");
  std::uniform_real_distribution<double> dist(cfg.key_low, cfg.key_high);
  KeyBatch keys{Vec(static_cast<Eigen::Index>(batch_size)), Vec(static_cast<Eigen::Index>(batch_size))};
  for (std::size_t i = 0; i < batch_size; ++i) {
    keys.sk_a[static_cast<Eigen::Index>(i)] = static_cast<float>(dist(rng));
    keys.sk_b[static_cast<Eigen::Index>(i)] = static_cast<float>(dist(rng));
  }
  auto pks = public_keys(keys);
  return {std::move(keys), std::move(pks)};
}

enum class Role : std::uint8_t { encryptor, aggregator, attacker_pk, attacker_nopk };
enum class Depth : std::uint8_t { standard, doubled };
// Private models come out of the privacy-preserving update; attack code
// refuses to train on them.
enum class Provenance : std::uint8_t { original, private_model };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::encryptor: return "encryptor";
    case Role::aggregator: return "aggregator";
    case Role::attacker_pk: return "attacker_pk";
    case Role::attacker_nopk: return "attacker_nopk";
  }
  return "?";
}
inline std::string_view to_string(Depth d) { return d == Depth::standard ? "standard" : "double"; }
inline std::string_view to_string(Provenance p) { return p == Provenance::original ? "original" : "private"; }

// Atk 1 sees (c, pk); Atk 2 sees c only. Each has a double-depth variant.
enum class AttackerKind : std::uint8_t { atk1, atk1_double, atk2, atk2_double };
inline constexpr std::array<AttackerKind, 4> kAllAttackerKinds{AttackerKind::atk1, AttackerKind::atk1_double,
                                                                AttackerKind::atk2, AttackerKind::atk2_double};
inline constexpr bool uses_pk(AttackerKind k) { return k == AttackerKind::atk1 || k == AttackerKind::atk1_double; }
inline constexpr bool is_double(AttackerKind k) {
  return k == AttackerKind::atk1_double || k == AttackerKind::atk2_double;
}
inline std::string_view to_string(AttackerKind k) {
  switch (k) {
    case AttackerKind::atk1: return "atk1";
    case AttackerKind::atk1_double: return "atk1_dbl";
    case AttackerKind::atk2: return "atk2";
    case AttackerKind::atk2_double: return "atk2_dbl";
  }
  return "?";
}

template <typename S>
struct Model {
  Role role = Role::encryptor;
  Depth depth = Depth::standard;
  Provenance provenance = Provenance::original;
  nn::Network<S> net;

  template <typename T>
  Model<T> cast() const {
    return Model<T>{role, depth, provenance, net.template cast<T>()};
  }
};

inline nn::Architecture encryptor_architecture(const AheConfig& cfg) {
  return {3, cfg.hidden_dim, cfg.ciphertext_len, cfg.num_res_blocks, cfg.conv_channels, 3};
}
inline nn::Architecture aggregator_architecture(const AheConfig& cfg) {
  return {cfg.num_clients * (cfg.ciphertext_len + 1), cfg.aggregator_hidden_dim, 1, cfg.num_res_blocks,
          cfg.conv_channels, 3};
}
inline nn::Architecture attacker_architecture(const AheConfig& cfg, AttackerKind kind) {
  return {cfg.ciphertext_len + (uses_pk(kind) ? 1 : 0), cfg.hidden_dim, 1,
          cfg.num_res_blocks * (is_double(kind) ? 2 : 1), cfg.conv_channels, 3};
}

template <typename S, class Rng>
Model<S> make_attacker(const AheConfig& cfg, AttackerKind kind, Rng& rng) {
  Model<S> m{uses_pk(kind) ? Role::attacker_pk : Role::attacker_nopk,
             is_double(kind) ? Depth::doubled : Depth::standard, Provenance::original,
             nn::Network<S>(attacker_architecture(cfg, kind))};
  m.net.initialize(rng);
  return m;
}

template <typename S>
struct ModelBundleT {
  AheConfig cfg;
  std::vector<Model<S>> encryptors;
  Model<S> aggregator;
  // attackers[client][kind]
  std::vector<std::array<Model<S>, 4>> attackers;

  Model<S>& attacker(std::size_t client, AttackerKind k) { return attackers.at(client)[static_cast<std::size_t>(k)]; }
  const Model<S>& attacker(std::size_t client, AttackerKind k) const {
    return attackers.at(client)[static_cast<std::size_t>(k)];
  }
  std::size_t num_clients() const { return encryptors.size(); }
};
using ModelBundle = ModelBundleT<float>;

template <typename T, typename S>
ModelBundleT<T> cast_bundle(const ModelBundleT<S>& b) {
  ModelBundleT<T> out;
  out.cfg = b.cfg;
  for (const auto& e : b.encryptors) out.encryptors.push_back(e.template cast<T>());
  out.aggregator = b.aggregator.template cast<T>();
  out.attackers.resize(b.attackers.size());
  for (std::size_t i = 0; i < b.attackers.size(); ++i)
    for (std::size_t k = 0; k < 4; ++k) out.attackers[i][k] = b.attackers[i][k].template cast<T>();
  return out;
}

// N encryptors sharing one initial weight set (the original model), one
// aggregator, and 4 attacker variants per client slot.
template <class Rng>
ModelBundle build_models(const AheConfig& cfg, Rng& rng) {
  validate(cfg);
  ModelBundle b;
  b.cfg = cfg;
  Model<float> enc{Role::encryptor, Depth::standard, Provenance::original, nn::Network<float>(encryptor_architecture(cfg))};
  enc.net.initialize(rng);
  b.encryptors.assign(cfg.num_clients, enc);
  b.aggregator = {Role::aggregator, Depth::standard, Provenance::original,
                  nn::Network<float>(aggregator_architecture(cfg))};
  b.aggregator.net.initialize(rng);
  b.attackers.resize(cfg.num_clients);
  for (std::size_t i = 0; i < cfg.num_clients; ++i)
    for (auto k : kAllAttackerKinds) b.attackers[i][static_cast<std::size_t>(k)] = make_attacker<float>(cfg, k, rng);
  return b;
}

namespace detail {

inline constexpr Eigen::Index kForwardChunk = 32768;

// Inference in column chunks keeps the working set bounded for very large batches.
template <typename S>
nn::Matrix<S> forward_chunked(const nn::Network<S>& net, const nn::Matrix<S>& x) {
  if (x.cols() <= kForwardChunk) return net.forward(x);
  nn::Matrix<S> out(static_cast<Eigen::Index>(net.architecture().output_width), x.cols());
  for (Eigen::Index start = 0; start < x.cols(); start += kForwardChunk) {
    const Eigen::Index n = std::min(kForwardChunk, x.cols() - start);
    out.middleCols(start, n) = net.forward(x.middleCols(start, n));
  }
  return out;
}

inline void require_role(Role actual, Role expected, std::string_view where) {
  if (actual != expected)
    throw std::invalid_argument(std::string(where) + ": expected " + std::string(to_string(expected)) + " model, got " +
                                std::string(to_string(actual)));
}

}  // namespace detail

template <typename S>
nn::Matrix<S> encryptor_input(const Vec& m, const Vec& sk_a, const Vec& sk_b) {
  if (m.size() != sk_a.size() || m.size() != sk_b.size())
    throw std::invalid_argument("encrypt: plaintext and key batch lengths differ");
  nn::Matrix<S> x(3, m.size());
  x.row(0) = m.transpose().template cast<S>();
  x.row(1) = sk_a.transpose().template cast<S>();
  x.row(2) = sk_b.transpose().template cast<S>();
  return x;
}

inline void check_plaintext_bound(const PlaintextBatch& m, double psi) {
  const float bound = static_cast<float>(psi);
  for (Eigen::Index i = 0; i < m.m.size(); ++i)
    if (!(std::abs(m.m[i]) <= bound))
      throw std::invalid_argument("encrypt: plaintext " + std::to_string(m.m[i]) + " outside [-psi, psi]");
}

// Deterministic, row-independent: ciphertext i depends on (m[i], sk_a[i], sk_b[i]) only.
template <typename S>
CiphertextBatch encrypt(const Model<S>& enc, const PlaintextBatch& m, const KeyBatch& keys, const AheConfig& cfg) {
  detail::require_role(enc.role, Role::encryptor, "encrypt");
  if (m.size() != keys.size()) throw std::invalid_argument("encrypt: plaintext and key batch lengths differ");
  check_plaintext_bound(m, cfg.psi);
  const auto x = encryptor_input<S>(m.m, keys.sk_a, keys.sk_b);
  return {detail::forward_chunked(enc.net, x).template cast<float>()};
}

template <typename S>
nn::Matrix<S> aggregator_input(std::span<const CiphertextBatch> cts, std::span<const PublicKeyBatch> pks) {
  if (cts.size() != pks.size()) throw std::invalid_argument("aggregate: ciphertext and public key counts differ");
  if (cts.empty()) throw std::invalid_argument("aggregate: no ciphertexts");
  const Eigen::Index b = static_cast<Eigen::Index>(cts.front().size());
  const Eigen::Index l = static_cast<Eigen::Index>(cts.front().length());
  nn::Matrix<S> x(static_cast<Eigen::Index>(cts.size()) * (l + 1), b);
  for (std::size_t n = 0; n < cts.size(); ++n) {
    if (static_cast<Eigen::Index>(cts[n].size()) != b || static_cast<Eigen::Index>(pks[n].size()) != b)
      throw std::invalid_argument("aggregate: batch lengths differ across clients");
    if (static_cast<Eigen::Index>(cts[n].length()) != l)
      throw std::invalid_argument("aggregate: ciphertext lengths differ across clients");
    const Eigen::Index base = static_cast<Eigen::Index>(n) * (l + 1);
    x.middleRows(base, l) = cts[n].c.template cast<S>();
    x.row(base + l) = pks[n].pk.transpose().template cast<S>();
  }
  return x;
}

// Slot n of the aggregator always belongs to client n.
template <typename S>
Vec aggregate(const Model<S>& agg, std::span<const CiphertextBatch> cts, std::span<const PublicKeyBatch> pks) {
  detail::require_role(agg.role, Role::aggregator, "aggregate");
  const std::size_t arity = agg.net.architecture().input_width;
  if (cts.empty() || arity != cts.size() * (cts.front().length() + 1))
    throw std::invalid_argument("aggregate: arity mismatch (aggregator expects " + std::to_string(arity) +
                                " inputs, got " + std::to_string(cts.size()) + " ciphertext streams)");
  const auto x = aggregator_input<S>(cts, pks);
  return detail::forward_chunked(agg.net, x).row(0).transpose().template cast<float>();
}

template <typename S>
nn::Matrix<S> attacker_input(const Model<S>& atk, const Mat& c, const Vec* pk) {
  if (atk.role == Role::attacker_nopk && pk) throw std::invalid_argument("attack: public key supplied to a c-only attacker");
  if (atk.role == Role::attacker_pk && !pk) throw std::invalid_argument("attack: attacker requires the public key");
  if (atk.role != Role::attacker_pk && atk.role != Role::attacker_nopk)
    throw std::invalid_argument("attack: model is not an attacker");
  if (!pk) return c.template cast<S>();
  if (pk->size() != c.cols()) throw std::invalid_argument("attack: public key and ciphertext batch lengths differ");
  nn::Matrix<S> x(c.rows() + 1, c.cols());
  x.topRows(c.rows()) = c.template cast<S>();
  x.row(c.rows()) = pk->transpose().template cast<S>();
  return x;
}

template <typename S>
Vec attack_forward(const Model<S>& atk, const CiphertextBatch& c, const std::optional<PublicKeyBatch>& pk) {
  const auto x = attacker_input(atk, c.c, pk ? &pk->pk : nullptr);
  return detail::forward_chunked(atk.net, x).row(0).transpose().template cast<float>();
}

}  // namespace hanlab
