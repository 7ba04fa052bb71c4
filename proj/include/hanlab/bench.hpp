#pragma once

// Timing of keygen / encrypt / aggregate and closed-form communication cost.

#include "hanlab/training.hpp"

#include <chrono>
#include <cstdlib>
#include <thread>

namespace hanlab {

// Reference figures for a multi-key HE baseline; reported, never measured.
namespace secfed_reference {
inline constexpr double kSeconds3000Ciphertexts = 6.5;
inline constexpr double kHansSeconds3000Ciphertexts = 0.00107;
inline constexpr double kSpeedup = 6075.0;
inline constexpr double kMegabytesSmallModel = 2.6;    // 616,420 parameters
inline constexpr double kMegabytesLargeModel = 30.2;   // 7,027,860 parameters
inline constexpr double kHansMegabytesSmallModel = 232.8;
inline constexpr double kHansMegabytesLargeModel = 884.7;
inline constexpr double kOverheadRatio = 29.2;
}  // namespace secfed_reference

struct BenchConfig {
  std::size_t warmups = 3;
  std::size_t trials = 5;
  std::uint64_t seed = 0;
};

struct BenchResult {
  std::string op;
  std::size_t batch_size = 0;
  double wall_seconds = 0.0;  // median over trials
  std::size_t trials = 0;
  std::vector<double> samples;
  std::string device;
};

inline nlohmann::json to_json_record(const BenchResult& r) {
  return {{"op", r.op},           {"batch_size", r.batch_size}, {"wall_seconds", r.wall_seconds},
          {"trials", r.trials},   {"samples", r.samples},       {"device", r.device}};
}

inline std::string device_descriptor() {
  if (const char* env = std::getenv("HANLAB_DEVICE"); env && *env) return env;
  return "cpu (" + std::to_string(std::max(1u, std::thread::hardware_concurrency())) + " hw threads, " +
         std::to_string(Eigen::nbThreads()) + " eigen threads)";
}

inline constexpr std::array<std::string_view, 4> kBenchOps{"keygen", "encrypt", "aggregate", "encrypt_aggregate"};

namespace detail {

template <class F>
std::vector<double> time_trials(const BenchConfig& c, F&& body) {
  for (std::size_t i = 0; i < c.warmups; ++i) body();
  std::vector<double> out;
  for (std::size_t i = 0; i < c.trials; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    body();
    out.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return out;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// encrypt times one client's batch; encrypt_aggregate times every client's
// encryption plus the aggregation.
inline std::vector<BenchResult> bench(const std::string& op, const std::vector<std::size_t>& batch_sizes,
                                      const ModelBundle& b, const BenchConfig& c = {}) {
  if (std::find(kBenchOps.begin(), kBenchOps.end(), op) == kBenchOps.end())
    throw std::invalid_argument("bench: unknown op '" + op + "' (keygen, encrypt, aggregate, encrypt_aggregate)");
  if (c.trials < 5) throw std::invalid_argument("bench: at least 5 measured trials are required");
  if (batch_sizes.empty()) throw std::invalid_argument("bench: no batch sizes");
  std::vector<BenchResult> out;
  const std::string device = device_descriptor();
  for (std::size_t n : batch_sizes) {
    if (n == 0) throw std::invalid_argument("bench: batch size must be >= 1");
    auto rng = derived_rng(c.seed, 900, n);
    const auto batch = gen_batch(n, b.cfg, rng);
    std::vector<CiphertextBatch> cts;
    std::vector<PublicKeyBatch> pks;
    for (std::size_t i = 0; i < b.num_clients(); ++i) {
      cts.push_back(encrypt(b.encryptors[i], PlaintextBatch{batch.plaintexts[i]}, batch.keys[i], b.cfg));
      pks.push_back(public_keys(batch.keys[i]));
    }
    float sink = 0.0f;
    std::vector<double> samples;
    if (op == "keygen") {
      samples = detail::time_trials(c, [&] { sink += keygen(n, b.cfg, rng).second.pk[0]; });
    } else if (op == "encrypt") {
      samples = detail::time_trials(c, [&] {
        sink += encrypt(b.encryptors[0], PlaintextBatch{batch.plaintexts[0]}, batch.keys[0], b.cfg).c(0, 0);
      });
    } else if (op == "aggregate") {
      samples = detail::time_trials(c, [&] {
        sink += aggregate(b.aggregator, std::span<const CiphertextBatch>(cts), std::span<const PublicKeyBatch>(pks))[0];
      });
    } else {
      samples = detail::time_trials(c, [&] {
        std::vector<CiphertextBatch> fresh;
        for (std::size_t i = 0; i < b.num_clients(); ++i)
          fresh.push_back(encrypt(b.encryptors[i], PlaintextBatch{batch.plaintexts[i]}, batch.keys[i], b.cfg));
        sink += aggregate(b.aggregator, std::span<const CiphertextBatch>(fresh), std::span<const PublicKeyBatch>(pks))[0];
      });
    }
    if (!std::isfinite(sink)) throw std::runtime_error("bench: non-finite output");
    out.push_back({op, n, detail::median(samples), samples.size(), samples, device});
  }
  return out;
}

struct CommEstimate {
  std::size_t model_size = 0;
  std::uint64_t bytes_hans = 0;
  std::uint64_t bytes_plain = 0;
  double ratio = 0.0;
};

// Per parameter: L ciphertext reals + one public key, 4 bytes each.
inline CommEstimate comm_estimate(std::size_t model_size, const AheConfig& cfg) {
  if (model_size == 0) throw std::invalid_argument("comm_estimate: model size must be >= 1");
  CommEstimate e;
  e.model_size = model_size;
  e.bytes_hans = static_cast<std::uint64_t>(model_size) * (cfg.ciphertext_len + 1) * sizeof(float);
  e.bytes_plain = static_cast<std::uint64_t>(model_size) * sizeof(float);
  e.ratio = static_cast<double>(e.bytes_hans) / static_cast<double>(e.bytes_plain);
  return e;
}

inline nlohmann::json to_json_record(const CommEstimate& e) {
  return {{"model_size", e.model_size},
          {"bytes_hans", e.bytes_hans},
          {"bytes_plain", e.bytes_plain},
          {"megabytes_hans", static_cast<double>(e.bytes_hans) / 1e6},
          {"mebibytes_hans", static_cast<double>(e.bytes_hans) / (1024.0 * 1024.0)},
          {"ratio", e.ratio},
          {"reference_ratio", secfed_reference::kOverheadRatio}};
}

}  // namespace hanlab
