// Trains a small model bundle, encrypts three clients' values and aggregates
// them without ever decrypting an individual contribution.

#include "hanlab/config.hpp"

#include <iomanip>
#include <iostream>

using namespace hanlab;

int main() {
  auto cfg = preset("micro");
  cfg.set_seed(1);

  std::cout << "training a micro bundle (five stages)...\n";
  const auto result = train_hans(cfg.ahe, cfg.train);
  for (const auto& r : result.reports)
    std::cout << "  stage " << r.stage << ": " << r.steps_run << " steps, aggregation error " << r.aggregation.mean_l1
              << '\n';
  const ModelBundle& b = result.bundle;

  const std::vector<std::vector<float>> values{{0.50f, -0.20f, 0.90f, 0.00f},
                                               {0.25f, 0.40f, -0.70f, 0.10f},
                                               {-0.30f, 0.10f, 0.60f, -0.95f}};
  const std::size_t n = values[0].size();
  auto rng = derived_rng(1, 42);
  std::vector<CiphertextBatch> cts;
  std::vector<PublicKeyBatch> pks;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto [keys, pk] = keygen(n, b.cfg, rng);
    const Vec m = Eigen::Map<const Vec>(values[i].data(), static_cast<Eigen::Index>(n));
    cts.push_back(encrypt(b.encryptors[i], PlaintextBatch{m}, keys, b.cfg));
    pks.push_back(pk);
  }
  const Vec sum = aggregate(b.aggregator, std::span<const CiphertextBatch>(cts), std::span<const PublicKeyBatch>(pks));

  std::cout << std::fixed << std::setprecision(3) << "\n  slot   true sum   aggregated\n";
  for (std::size_t j = 0; j < n; ++j) {
    const float truth = values[0][j] + values[1][j] + values[2][j];
    std::cout << "  " << j << "      " << std::setw(7) << truth << "    " << std::setw(7) << sum[static_cast<Eigen::Index>(j)]
              << '\n';
  }

  const auto t = intercept(b.encryptors[0], 5000, b.cfg, rng);
  std::cout << "\nciphertext-only eavesdropper error on client 0: "
            << score_attacker(b.attacker(0, AttackerKind::atk2), t.traffic, t.truth).mean_l1 << '\n';
}
