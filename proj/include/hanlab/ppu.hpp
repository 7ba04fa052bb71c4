#pragma once

// Privacy-preserving update. Collaborative rounds (CPPU) let every client
// move its encryptor away from the public original model together with the
// shared aggregator, exchanging only noisy public datasets; independent
// rounds (IPPU) then refine each encryptor against the frozen aggregator.

#include "hanlab/training.hpp"

#include <filesystem>
#include <thread>

namespace hanlab {

struct PpuConfig {
  double sigma = 0.05;
  // Noise on the publication made in the last CPPU iteration; that dataset
  // is the one that stays public after the update.
  double final_sigma = 0.15;
  std::size_t public_size = 2048;
  std::size_t private_size = 256;
  std::size_t max_iterations = 8;
  std::size_t steps_per_client = 200;
  std::size_t rounds_per_client = 10;
  double cppu_lr = 6e-3;
  double ippu_lr = 3e-4;
  double lr_floor = 1e-5;
  double weight_decay = 1e-6;
  std::size_t eval_samples = 20000;
  bool parallel_ippu = false;
  std::uint64_t seed = 0;
};

inline constexpr double kNoiseFloor = 0.01;

// Publishing with noise at or below the floor would leak plaintexts.
struct NoiseFloorViolation : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void validate(const PpuConfig& c) {
  if (!(c.sigma > kNoiseFloor) || !(c.final_sigma > kNoiseFloor))
    throw NoiseFloorViolation("ppu config: sigma must exceed " + std::to_string(kNoiseFloor));
  for (std::size_t v : {c.public_size, c.private_size, c.max_iterations, c.steps_per_client, c.rounds_per_client,
                        c.eval_samples})
    if (v == 0) throw std::invalid_argument("ppu config: sizes and counts must be >= 1");
  if (!(c.cppu_lr > 0.0) || !(c.ippu_lr > 0.0) || !(c.lr_floor >= 0.0))
    throw std::invalid_argument("ppu config: learning rates must be positive");
}

inline void to_json(nlohmann::json& j, const PpuConfig& c) {
  j = {{"sigma", c.sigma},
       {"final_sigma", c.final_sigma},
       {"public_size", c.public_size},
       {"private_size", c.private_size},
       {"max_iterations", c.max_iterations},
       {"steps_per_client", c.steps_per_client},
       {"rounds_per_client", c.rounds_per_client},
       {"cppu_lr", c.cppu_lr},
       {"ippu_lr", c.ippu_lr},
       {"lr_floor", c.lr_floor},
       {"weight_decay", c.weight_decay},
       {"eval_samples", c.eval_samples},
       {"parallel_ippu", c.parallel_ippu},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, PpuConfig& c) {
  PpuConfig d;
  c.sigma = j.value("sigma", d.sigma);
  c.final_sigma = j.value("final_sigma", d.final_sigma);
  c.public_size = j.value("public_size", d.public_size);
  c.private_size = j.value("private_size", d.private_size);
  c.max_iterations = j.value("max_iterations", d.max_iterations);
  c.steps_per_client = j.value("steps_per_client", d.steps_per_client);
  c.rounds_per_client = j.value("rounds_per_client", d.rounds_per_client);
  c.cppu_lr = j.value("cppu_lr", d.cppu_lr);
  c.ippu_lr = j.value("ippu_lr", d.ippu_lr);
  c.lr_floor = j.value("lr_floor", d.lr_floor);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.eval_samples = j.value("eval_samples", d.eval_samples);
  c.parallel_ippu = j.value("parallel_ippu", d.parallel_ippu);
  c.seed = j.value("seed", d.seed);
}

struct PublicDatasetEntry {
  float x_noisy;
  float pk;
  Vec c;
};

// Noisy (plaintext, public key, ciphertext) triples. Only publish() builds
// one, so every plaintext in a public dataset carries noise.
class PublicDataset {
 public:
  PublicDataset() = default;

  std::size_t client_id() const { return client_; }
  std::size_t round() const { return round_; }
  double sigma() const { return sigma_; }
  std::size_t size() const { return static_cast<std::size_t>(x_noisy_.size()); }
  bool empty() const { return size() == 0; }
  const Vec& x_noisy() const { return x_noisy_; }
  const Vec& pk() const { return pk_; }
  const Mat& c() const { return c_; }
  PublicDatasetEntry entry(std::size_t i) const {
    const auto k = static_cast<Eigen::Index>(i);
    return {x_noisy_[k], pk_[k], c_.col(k)};
  }

 private:
  template <class Rng>
  friend struct Publisher;
  friend PublicDataset read_public_dataset_line_group(const std::vector<nlohmann::json>&);

  std::size_t client_ = 0;
  std::size_t round_ = 0;
  double sigma_ = 0.0;
  Vec x_noisy_;
  Vec pk_;
  Mat c_;
};

// What the publishing client keeps locally next to its public dataset.
struct Publication {
  PublicDataset data;
  Vec true_plaintexts;
  Vec noise;
};

template <class Rng>
struct Publisher {
  static Publication run(const Model<float>& enc, std::size_t n, double sigma, const AheConfig& cfg, Rng& rng,
                         std::size_t client, std::size_t round) {
    if (!(sigma > kNoiseFloor))
      throw NoiseFloorViolation("publish: noise sigma " + std::to_string(sigma) + " does not exceed the floor " +
                                std::to_string(kNoiseFloor));
    if (n == 0) throw std::invalid_argument("publish: empty dataset");
    Publication p;
    p.true_plaintexts = uniform_plaintexts(n, cfg.psi, rng);
    // keys for published traffic come from a fresh keygen and are never reused
    auto [keys, pks] = keygen(n, cfg, rng);
    p.data.c_ = encrypt(enc, PlaintextBatch{p.true_plaintexts}, keys, cfg).c;
    std::normal_distribution<double> noise(0.0, sigma);
    p.noise.resize(static_cast<Eigen::Index>(n));
    for (auto& v : p.noise) v = static_cast<float>(noise(rng));
    p.data.x_noisy_ = p.true_plaintexts + p.noise;
    p.data.pk_ = pks.pk;
    p.data.client_ = client;
    p.data.round_ = round;
    p.data.sigma_ = sigma;
    return p;
  }
};

template <class Rng>
Publication publish(const Model<float>& enc, std::size_t n, double sigma, const AheConfig& cfg, Rng& rng,
                    std::size_t client, std::size_t round) {
  return Publisher<Rng>::run(enc, n, sigma, cfg, rng, client, round);
}

// Own private scalars plus, per other client, public (pk, c) pairs drawn
// with replacement; target = own plaintext + the drawn noisy plaintexts.
struct TrainingSet {
  struct Other {
    std::size_t slot;
    Vec pk;
    Mat c;
    std::vector<std::size_t> picks;
  };
  std::size_t own_slot = 0;
  Vec x_own;
  KeyBatch own_keys;
  std::vector<Other> others;
  Vec target;
  std::size_t size() const { return static_cast<std::size_t>(x_own.size()); }
};

template <class Rng>
TrainingSet sample_with_replacement(std::size_t own_slot, std::span<const PublicDataset* const> others, const Vec& x_own,
                                    const Vec& sk1, const Vec& sk2, Rng& rng) {
  if (x_own.size() != sk1.size() || x_own.size() != sk2.size())
    throw std::invalid_argument("sample_with_replacement: plaintext and key lengths differ");
  TrainingSet ts;
  ts.own_slot = own_slot;
  ts.x_own = x_own;
  ts.own_keys = {sk1, sk2};
  ts.target = x_own;
  const auto n = x_own.size();
  for (const PublicDataset* d : others) {
    if (!d || d->empty()) throw std::invalid_argument("sample_with_replacement: empty public dataset");
    if (d->client_id() == own_slot) throw std::invalid_argument("sample_with_replacement: own dataset among others");
    TrainingSet::Other o{d->client_id(), Vec(n), Mat(d->c().rows(), n), {}};
    std::uniform_int_distribution<std::size_t> pick(0, d->size() - 1);
    for (Eigen::Index k = 0; k < n; ++k) {
      const std::size_t j = pick(rng);
      o.picks.push_back(j);
      const auto jj = static_cast<Eigen::Index>(j);
      o.pk[k] = d->pk()[jj];
      o.c.col(k) = d->c().col(jj);
      ts.target[k] += d->x_noisy()[jj];
    }
    ts.others.push_back(std::move(o));
  }
  return ts;
}

// One step on the aggregation loss over a sampled training set: gradients
// reach the own encryptor always and the aggregator only when agg_opt is set.
inline double ppu_step(ModelBundle& b, const TrainingSet& ts, nn::AdamW<float>& enc_opt, nn::AdamW<float>* agg_opt,
                       double lr) {
  const auto l = static_cast<Eigen::Index>(b.cfg.ciphertext_len);
  const auto n = static_cast<Eigen::Index>(ts.size());
  if (ts.others.size() + 1 != b.num_clients())
    throw std::invalid_argument("ppu: training set does not cover every aggregator slot");
  auto& enc = b.encryptors.at(ts.own_slot);
  nn::Network<float>::Tape enc_tape, agg_tape;
  nn::Matrix<float> x(static_cast<Eigen::Index>(b.num_clients()) * (l + 1), n);
  const auto own_base = static_cast<Eigen::Index>(ts.own_slot) * (l + 1);
  x.middleRows(own_base, l) =
      enc.net.forward(encryptor_input<float>(ts.x_own, ts.own_keys.sk_a, ts.own_keys.sk_b), enc_tape);
  x.row(own_base + l) = (ts.own_keys.sk_a + ts.own_keys.sk_b).transpose();
  for (const auto& o : ts.others) {
    const auto base = static_cast<Eigen::Index>(o.slot) * (l + 1);
    x.middleRows(base, l) = o.c;
    x.row(base + l) = o.pk.transpose();
  }
  const auto out = b.aggregator.net.forward(x, agg_tape);
  const double loss = detail::mse_value<float>(out, ts.target);
  if (agg_opt) b.aggregator.net.zero_grad();
  enc.net.zero_grad();
  const auto dx = b.aggregator.net.backward(agg_tape, detail::mse_grad<float>(out, ts.target, 1.0f), agg_opt != nullptr);
  enc.net.backward(enc_tape, dx.middleRows(own_base, l), true);
  enc_opt.step(enc.net, lr);
  if (agg_opt) agg_opt->step(b.aggregator.net, lr);
  return loss;
}

struct PpuReport {
  std::string phase;
  std::map<std::string, std::vector<CurvePoint>> curves;
  EvalStats aggregation;
  std::vector<std::uint64_t> encryptor_digests;
  std::uint64_t aggregator_digest = 0;
};

struct CppuResult {
  std::vector<Publication> publications;  // final publication of each client
  std::vector<PublicDataset> history;     // every dataset published, in order
  PpuReport report;
};

namespace detail {

inline double cosine_lr(double peak, double floor, std::size_t k, std::size_t total) {
  const double frac = std::min(1.0, static_cast<double>(k) / static_cast<double>(std::max<std::size_t>(total, 1)));
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac)) + floor;
}

inline std::vector<const PublicDataset*> others_of(std::size_t own, const std::vector<PublicDataset>& all) {
  std::vector<const PublicDataset*> out;
  for (std::size_t j = 0; j < all.size(); ++j)
    if (j != own) out.push_back(&all[j]);
  return out;
}

inline nn::AdamWConfig ppu_adamw(const PpuConfig& c) {
  nn::AdamWConfig a;
  a.weight_decay = c.weight_decay;
  return a;
}

}  // namespace detail

inline CppuResult cppu(ModelBundle& b, const PpuConfig& cfg) {
  validate(cfg);
  const std::size_t n = b.num_clients();
  if (n < 2) throw std::invalid_argument("cppu: needs at least two clients");
  auto rng = derived_rng(cfg.seed, 100);
  CppuResult res;
  res.report.phase = "cppu";
  std::vector<PublicDataset> current;
  res.publications.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    res.publications[i] = publish(b.encryptors[i], cfg.public_size, cfg.sigma, b.cfg, rng, i, 0);
    current.push_back(res.publications[i].data);
    res.history.push_back(res.publications[i].data);
  }
  std::vector<nn::AdamW<float>> enc_opt;
  for (auto& e : b.encryptors) enc_opt.emplace_back(e.net, detail::ppu_adamw(cfg));
  nn::AdamW<float> agg_opt(b.aggregator.net, detail::ppu_adamw(cfg));
  const std::size_t total = cfg.max_iterations * n * cfg.steps_per_client;
  std::size_t k = 0;
  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto others = detail::others_of(i, current);
      for (std::size_t s = 0; s < cfg.steps_per_client; ++s, ++k) {
        const Vec x = uniform_plaintexts(cfg.private_size, b.cfg.psi, rng);
        const auto keys = keygen(cfg.private_size, b.cfg, rng).first;
        const auto ts = sample_with_replacement(i, std::span<const PublicDataset* const>(others), x, keys.sk_a,
                                                keys.sk_b, rng);
        const double loss =
            ppu_step(b, ts, enc_opt[i], &agg_opt, detail::cosine_lr(cfg.cppu_lr, cfg.lr_floor, k, total));
        detail::ensure_finite(loss, 6, k, "cppu");
        if (s % 10 == 0) res.report.curves[encryptor_slot(i)].push_back({k, loss});
      }
      const double sigma = it + 1 == cfg.max_iterations ? cfg.final_sigma : cfg.sigma;
      res.publications[i] = publish(b.encryptors[i], cfg.public_size, sigma, b.cfg, rng, i, it + 1);
      current[i] = res.publications[i].data;
      res.history.push_back(current[i]);
    }
  }
  for (auto& e : b.encryptors) e.provenance = Provenance::private_model;
  res.report.aggregation = evaluate_aggregation(b, cfg.eval_samples, rng);
  res.report.encryptor_digests = detail::digests(b.encryptors);
  res.report.aggregator_digest = b.aggregator.net.digest();
  return res;
}

inline PpuReport ippu(ModelBundle& b, const std::vector<PublicDataset>& final_public, const PpuConfig& cfg) {
  validate(cfg);
  const std::size_t n = b.num_clients();
  if (final_public.size() != n) throw std::invalid_argument("ippu: need one final public dataset per client");
  for (std::size_t i = 0; i < n; ++i)
    if (final_public[i].client_id() != i) throw std::invalid_argument("ippu: public datasets out of slot order");
  const auto agg_before = b.aggregator.net.digest();
  PpuReport report;
  report.phase = "ippu";
  std::vector<std::vector<CurvePoint>> curves(n);
  auto run_client = [&](std::size_t i) {
    auto rng = derived_rng(cfg.seed, 200, i);
    nn::AdamW<float> opt(b.encryptors[i].net, detail::ppu_adamw(cfg));
    const auto others = detail::others_of(i, final_public);
    const std::size_t total = cfg.rounds_per_client * cfg.steps_per_client;
    for (std::size_t k = 0; k < total; ++k) {
      const Vec x = uniform_plaintexts(cfg.private_size, b.cfg.psi, rng);
      const auto keys = keygen(cfg.private_size, b.cfg, rng).first;
      const auto ts =
          sample_with_replacement(i, std::span<const PublicDataset* const>(others), x, keys.sk_a, keys.sk_b, rng);
      const double loss = ppu_step(b, ts, opt, nullptr, detail::cosine_lr(cfg.ippu_lr, cfg.lr_floor, k, total));
      if (!std::isfinite(loss)) throw StageFailure(7, "non-finite ippu loss for client " + std::to_string(i));
      if (k % 10 == 0) curves[i].push_back({k, loss});
    }
  };
  if (cfg.parallel_ippu) {
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(n);
    for (std::size_t i = 0; i < n; ++i)
      workers.emplace_back([&, i] {
        try {
          run_client(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    for (auto& w : workers) w.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (std::size_t i = 0; i < n; ++i) run_client(i);
  }
  if (b.aggregator.net.digest() != agg_before) throw FreezeViolation("ippu modified the aggregator");
  for (std::size_t i = 0; i < n; ++i) {
    b.encryptors[i].provenance = Provenance::private_model;
    report.curves[encryptor_slot(i)] = std::move(curves[i]);
  }
  auto rng = derived_rng(cfg.seed, 201);
  report.aggregation = evaluate_aggregation(b, cfg.eval_samples, rng);
  report.encryptor_digests = detail::digests(b.encryptors);
  report.aggregator_digest = b.aggregator.net.digest();
  return report;
}

// {client_id, round, x_noisy, pk, c:[...]} per entry.
inline void write_public_dataset(JsonlSink& sink, const PublicDataset& d) {
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto e = d.entry(i);
    sink.write({{"client_id", d.client_id()},
                {"round", d.round()},
                {"sigma", d.sigma()},
                {"x_noisy", e.x_noisy},
                {"pk", e.pk},
                {"c", std::vector<float>(e.c.data(), e.c.data() + e.c.size())}});
  }
}

// Rebuilds one dataset from its JSON-lines records (all sharing client and round).
inline PublicDataset read_public_dataset_line_group(const std::vector<nlohmann::json>& lines) {
  if (lines.empty()) throw std::invalid_argument("public dataset: no records");
  PublicDataset d;
  d.client_ = lines.front().at("client_id");
  d.round_ = lines.front().at("round");
  d.sigma_ = lines.front().value("sigma", 0.0);
  if (!(d.sigma_ > kNoiseFloor)) throw NoiseFloorViolation("public dataset: recorded sigma below the noise floor");
  const auto n = static_cast<Eigen::Index>(lines.size());
  const auto l = static_cast<Eigen::Index>(lines.front().at("c").size());
  d.x_noisy_.resize(n);
  d.pk_.resize(n);
  d.c_.resize(l, n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& j = lines[static_cast<std::size_t>(k)];
    d.x_noisy_[k] = j.at("x_noisy");
    d.pk_[k] = j.at("pk");
    const auto c = j.at("c").get<std::vector<float>>();
    if (static_cast<Eigen::Index>(c.size()) != l) throw std::invalid_argument("public dataset: ragged ciphertexts");
    for (Eigen::Index r = 0; r < l; ++r) d.c_(r, k) = c[static_cast<std::size_t>(r)];
  }
  return d;
}

// Latest round per client from a JSON-lines file written by write_public_dataset.
inline std::vector<PublicDataset> read_public_datasets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::map<std::size_t, std::pair<std::size_t, std::vector<nlohmann::json>>> latest;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    const std::size_t client = j.at("client_id"), round = j.at("round");
    auto& slot = latest[client];
    if (slot.second.empty() || round > slot.first) {
      slot.first = round;
      slot.second.clear();
    }
    if (round == slot.first) slot.second.push_back(std::move(j));
  }
  std::vector<PublicDataset> out;
  for (auto& [client, group] : latest) out.push_back(read_public_dataset_line_group(group.second));
  return out;
}

}  // namespace hanlab
