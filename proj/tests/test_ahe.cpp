#include "hanlab/ahe.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

using namespace hanlab;

namespace {

AheConfig small_cfg() {
  AheConfig c;
  c.ciphertext_len = 8;
  c.hidden_dim = 16;
  c.aggregator_hidden_dim = 16;
  c.num_res_blocks = 1;
  return c;
}

Vec uniform(std::size_t n, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  Vec v(static_cast<Eigen::Index>(n));
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST(Keygen, PublicKeyIsExactSum) {
  std::mt19937_64 rng(1);
  auto [keys, pks] = keygen(10000, AheConfig{}, rng);
  ASSERT_EQ(keys.size(), 10000u);
  for (Eigen::Index i = 0; i < pks.pk.size(); ++i) {
    const float expect = keys.sk_a[i] + keys.sk_b[i];
    EXPECT_EQ(pks.pk[i], expect);
    EXPECT_GE(keys.sk_a[i], -1.0f);
    EXPECT_LE(keys.sk_a[i], 1.0f);
  }
}

TEST(Keygen, HandPickedPair) {
  KeyBatch k{Vec::Constant(1, 0.3f), Vec::Constant(1, -0.1f)};
  const auto pk = public_keys(k);
  EXPECT_EQ(pk.pk[0], 0.3f + -0.1f);
  EXPECT_NEAR(pk.pk[0], 0.2f, 1e-7);
}

TEST(Keygen, LargeBatchAndDeterminism) {
  std::mt19937_64 a(42), b(42);
  auto [ka, pa] = keygen(300000, AheConfig{}, a);
  auto [kb, pb] = keygen(300000, AheConfig{}, b);
  EXPECT_EQ(ka.sk_a.size(), 300000);
  EXPECT_TRUE(ka.sk_a == kb.sk_a);
  EXPECT_TRUE(ka.sk_b == kb.sk_b);
  EXPECT_TRUE(pa.pk == pb.pk);
  // the stream advances: a second call yields fresh keys
  auto [kc, pc] = keygen(300000, AheConfig{}, a);
  EXPECT_FALSE(kc.sk_a == ka.sk_a);
}

TEST(Keygen, ZeroBatchRejected) {
  std::mt19937_64 rng(0);
  EXPECT_THROW(keygen(0, AheConfig{}, rng), std::invalid_argument);
}

TEST(Config, Validation) {
  AheConfig c;
  c.psi = 0;
  EXPECT_THROW(validate(c), std::invalid_argument);
  c = {};
  c.ciphertext_len = 1;
  EXPECT_THROW(validate(c), std::invalid_argument);
  c = {};
  c.key_low = 1;
  EXPECT_THROW(validate(c), std::invalid_argument);
  c = {};
  c.num_clients = 1;
  EXPECT_THROW(validate(c), std::invalid_argument);
  EXPECT_NO_THROW(validate(AheConfig{}));
}

TEST(Plaintext, ClipRecordsCount) {
  Vec v(4);
  v << 1.7f, -0.5f, -3.0f, 1.0f;
  const auto p = clip_plaintexts(v, 1.0);
  EXPECT_EQ(p.clip_count, 2u);
  EXPECT_EQ(p.m[0], 1.0f);
  EXPECT_EQ(p.m[2], -1.0f);
  EXPECT_EQ(p.m[1], -0.5f);
  Vec bad = Vec::Constant(1, std::nanf(""));
  EXPECT_THROW(clip_plaintexts(bad, 1.0), std::invalid_argument);
}

TEST(Bundle, Arity) {
  std::mt19937_64 rng(3);
  const auto b = build_models(AheConfig{}, rng);
  EXPECT_EQ(b.encryptors.size(), 3u);
  std::size_t slots = 0;
  for (const auto& a : b.attackers) slots += a.size();
  EXPECT_EQ(slots, 12u);
  EXPECT_EQ(b.aggregator.net.architecture().input_width, 87u);
  EXPECT_EQ(b.encryptors[0].net.architecture().input_width, 3u);
  EXPECT_EQ(b.encryptors[0].net.architecture().output_width, 28u);
  EXPECT_EQ(b.attacker(0, AttackerKind::atk1).net.architecture().input_width, 29u);
  EXPECT_EQ(b.attacker(0, AttackerKind::atk2).net.architecture().input_width, 28u);
  EXPECT_EQ(b.attacker(0, AttackerKind::atk1).role, Role::attacker_pk);
  EXPECT_EQ(b.attacker(0, AttackerKind::atk2_double).role, Role::attacker_nopk);
}

TEST(Bundle, DoubleDepthBlocksAndParameterDelta) {
  std::mt19937_64 rng(3);
  const AheConfig cfg;
  const auto b = build_models(cfg, rng);
  for (auto [std_kind, dbl_kind] : {std::pair{AttackerKind::atk1, AttackerKind::atk1_double},
                                    std::pair{AttackerKind::atk2, AttackerKind::atk2_double}}) {
    const auto& s = b.attacker(1, std_kind);
    const auto& d = b.attacker(1, dbl_kind);
    EXPECT_EQ(d.net.architecture().num_res_blocks, 2 * s.net.architecture().num_res_blocks);
    EXPECT_EQ(d.depth, Depth::doubled);
    const std::size_t h = cfg.hidden_dim;
    const std::size_t per_block = 2 * (h * h + h);
    EXPECT_EQ(d.net.parameter_count() - s.net.parameter_count(), cfg.num_res_blocks * per_block);
  }
}

TEST(Bundle, SameSeedSameWeights) {
  std::mt19937_64 a(9), b(9), c(10);
  const auto x = build_models(AheConfig{}, a);
  const auto y = build_models(AheConfig{}, b);
  const auto z = build_models(AheConfig{}, c);
  EXPECT_EQ(x.aggregator.net.digest(), y.aggregator.net.digest());
  EXPECT_EQ(x.encryptors[2].net.digest(), y.encryptors[2].net.digest());
  EXPECT_EQ(x.attacker(2, AttackerKind::atk2_double).net.digest(), y.attacker(2, AttackerKind::atk2_double).net.digest());
  EXPECT_NE(x.aggregator.net.digest(), z.aggregator.net.digest());
  // every client starts from the same original encryptor
  EXPECT_EQ(x.encryptors[0].net.digest(), x.encryptors[1].net.digest());
  EXPECT_EQ(x.encryptors[0].net.digest(), x.encryptors[2].net.digest());
}

TEST(Encrypt, DeterministicAndShaped) {
  std::mt19937_64 rng(5);
  const auto cfg = small_cfg();
  const auto b = build_models(cfg, rng);
  const auto m = clip_plaintexts(uniform(64, rng), cfg.psi);
  auto [keys, pks] = keygen(64, cfg, rng);
  const auto c1 = encrypt(b.encryptors[0], m, keys, cfg);
  const auto c2 = encrypt(b.encryptors[0], m, keys, cfg);
  EXPECT_EQ(c1.size(), 64u);
  EXPECT_EQ(c1.length(), cfg.ciphertext_len);
  EXPECT_TRUE(c1.c == c2.c);
  EXPECT_TRUE(c1.c.allFinite());
}

TEST(Encrypt, RowPermutationAndConcatenation) {
  std::mt19937_64 rng(6);
  const auto cfg = small_cfg();
  const auto b = build_models(cfg, rng);
  const std::size_t n = 50;
  const auto m = clip_plaintexts(uniform(n, rng), cfg.psi);
  auto [keys, pks] = keygen(n, cfg, rng);
  const auto full = encrypt(b.encryptors[0], m, keys, cfg);

  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  PlaintextBatch pm{Vec(n)};
  KeyBatch pk{Vec(n), Vec(n)};
  for (std::size_t i = 0; i < n; ++i) {
    pm.m[static_cast<Eigen::Index>(i)] = m.m[perm[i]];
    pk.sk_a[static_cast<Eigen::Index>(i)] = keys.sk_a[perm[i]];
    pk.sk_b[static_cast<Eigen::Index>(i)] = keys.sk_b[perm[i]];
  }
  const auto permuted = encrypt(b.encryptors[0], pm, pk, cfg);
  for (std::size_t i = 0; i < n; ++i)
    EXPECT_LT((permuted.c.col(static_cast<Eigen::Index>(i)) - full.c.col(perm[i])).cwiseAbs().maxCoeff(), 1e-6f);

  // encrypt(m || m') == encrypt(m) || encrypt(m')
  PlaintextBatch head{m.m.head(20)}, tail{m.m.tail(30)};
  KeyBatch kh{keys.sk_a.head(20), keys.sk_b.head(20)}, kt{keys.sk_a.tail(30), keys.sk_b.tail(30)};
  const auto ch = encrypt(b.encryptors[0], head, kh, cfg);
  const auto ct = encrypt(b.encryptors[0], tail, kt, cfg);
  EXPECT_LT((ch.c - full.c.leftCols(20)).cwiseAbs().maxCoeff(), 1e-6f);
  EXPECT_LT((ct.c - full.c.rightCols(30)).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(Encrypt, FreshKeysGiveDistinctCiphertexts) {
  std::mt19937_64 rng(7);
  const AheConfig cfg;
  const auto b = build_models(cfg, rng);
  const std::size_t n = 1000;
  const auto m = clip_plaintexts(uniform(n, rng), cfg.psi);
  auto [k1, p1] = keygen(n, cfg, rng);
  auto [k2, p2] = keygen(n, cfg, rng);
  const auto c1 = encrypt(b.encryptors[0], m, k1, cfg);
  const auto c2 = encrypt(b.encryptors[0], m, k2, cfg);
  const Eigen::RowVectorXf dist = (c1.c - c2.c).cwiseAbs().colwise().sum();
  EXPECT_GT(dist.mean(), 1e-3f);
  const auto close = std::count_if(dist.data(), dist.data() + dist.size(), [](float d) { return d < 1e-3f; });
  EXPECT_LT(static_cast<double>(close) / static_cast<double>(n), 0.01);
}

TEST(Encrypt, ContractViolations) {
  std::mt19937_64 rng(8);
  const auto cfg = small_cfg();
  const auto b = build_models(cfg, rng);
  auto [keys, pks] = keygen(4, cfg, rng);
  PlaintextBatch out_of_range{Vec::Constant(4, 1.5f)};
  EXPECT_THROW(encrypt(b.encryptors[0], out_of_range, keys, cfg), std::invalid_argument);
  PlaintextBatch short_batch{Vec::Zero(3)};
  EXPECT_THROW(encrypt(b.encryptors[0], short_batch, keys, cfg), std::invalid_argument);
  PlaintextBatch ok{Vec::Zero(4)};
  EXPECT_THROW(encrypt(b.aggregator, ok, keys, cfg), std::invalid_argument);
}

TEST(Aggregate, UntrainedShapeAndArity) {
  std::mt19937_64 rng(11);
  const auto cfg = small_cfg();
  const auto b = build_models(cfg, rng);
  std::vector<CiphertextBatch> cts;
  std::vector<PublicKeyBatch> pks;
  for (std::size_t i = 0; i < cfg.num_clients; ++i) {
    auto [k, p] = keygen(33, cfg, rng);
    cts.push_back(encrypt(b.encryptors[i], clip_plaintexts(uniform(33, rng), 1.0), k, cfg));
    pks.push_back(p);
  }
  const Vec out = aggregate(b.aggregator, std::span<const CiphertextBatch>(cts), std::span<const PublicKeyBatch>(pks));
  EXPECT_EQ(out.size(), 33);
  EXPECT_TRUE(out.allFinite());
  EXPECT_THROW(aggregate(b.aggregator, std::span<const CiphertextBatch>(cts).first(2),
                         std::span<const PublicKeyBatch>(pks).first(2)),
               std::invalid_argument);
  pks[1].pk.conservativeResize(10);
  EXPECT_THROW(aggregate(b.aggregator, std::span<const CiphertextBatch>(cts), std::span<const PublicKeyBatch>(pks)),
               std::invalid_argument);
}

TEST(Aggregate, ChunkedInferenceMatchesSingleShot) {
  std::mt19937_64 rng(12);
  const auto cfg = small_cfg();
  const auto b = build_models(cfg, rng);
  const std::size_t n = 70000;
  const auto m = clip_plaintexts(uniform(n, rng), 1.0);
  auto [k, p] = keygen(n, cfg, rng);
  const auto c = encrypt(b.encryptors[0], m, k, cfg);
  const auto direct = b.encryptors[0].net.forward(encryptor_input<float>(m.m, k.sk_a, k.sk_b));
  EXPECT_LT((c.c - direct).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(Attack, PublicKeyPresenceMatchesRole) {
  std::mt19937_64 rng(13);
  const auto cfg = small_cfg();
  const auto b = build_models(cfg, rng);
  auto [k, p] = keygen(16, cfg, rng);
  const auto c = encrypt(b.encryptors[0], clip_plaintexts(uniform(16, rng), 1.0), k, cfg);
  EXPECT_EQ(attack_forward(b.attacker(0, AttackerKind::atk1), c, p).size(), 16);
  EXPECT_EQ(attack_forward(b.attacker(0, AttackerKind::atk2), c, std::nullopt).size(), 16);
  EXPECT_THROW(attack_forward(b.attacker(0, AttackerKind::atk2), c, p), std::invalid_argument);
  EXPECT_THROW(attack_forward(b.attacker(0, AttackerKind::atk1), c, std::nullopt), std::invalid_argument);
  const auto g1 = attack_forward(b.attacker(0, AttackerKind::atk1), c, p);
  const auto g2 = attack_forward(b.attacker(0, AttackerKind::atk1), c, p);
  EXPECT_TRUE(g1 == g2);
}

TEST(Network, ConvolutionMatchesDirectDefinition) {
  std::mt19937_64 rng(14);
  const std::size_t channels = 4, kernel = 3, len = 5;
  nn::Matrix<double> w(channels, channels * kernel), b(channels, 1), in(channels * len, 3);
  std::normal_distribution<double> nd;
  for (auto* m : {&w, &b, &in})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = nd(rng);
  const auto out = nn::detail::conv_forward<double>(w, b, in, channels, kernel);
  for (Eigen::Index col = 0; col < 3; ++col)
    for (std::size_t co = 0; co < channels; ++co)
      for (std::size_t p = 0; p < len; ++p) {
        double acc = b(static_cast<Eigen::Index>(co), 0);
        for (std::size_t ci = 0; ci < channels; ++ci)
          for (std::size_t k = 0; k < kernel; ++k) {
            const long q = static_cast<long>(p) + static_cast<long>(k) - 1;
            if (q < 0 || q >= static_cast<long>(len)) continue;
            acc += w(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(ci * kernel + k)) *
                   in(static_cast<Eigen::Index>(ci * len + static_cast<std::size_t>(q)), col);
          }
        EXPECT_NEAR(out(static_cast<Eigen::Index>(co * len + p), col), acc, 1e-12);
      }
}

TEST(Network, InputGradientMatchesFiniteDifference) {
  std::mt19937_64 rng(15);
  nn::Network<double> net(nn::Architecture{5, 8, 3, 2, 4, 3});
  net.initialize(rng);
  nn::Matrix<double> x = nn::Matrix<double>::Random(5, 4);
  nn::Matrix<double> w = nn::Matrix<double>::Random(3, 4);
  nn::Network<double>::Tape tape;
  net.forward(x, tape);
  const auto dx = net.backward(tape, w, false);
  const double eps = 1e-6;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    nn::Matrix<double> xp = x, xm = x;
    xp.data()[i] += eps;
    xm.data()[i] -= eps;
    const double num = ((net.forward(xp).cwiseProduct(w)).sum() - (net.forward(xm).cwiseProduct(w)).sum()) / (2 * eps);
    EXPECT_NEAR(dx.data()[i], num, 1e-6 * std::max(1.0, std::abs(num)));
  }
}

TEST(Optim, CosineScheduleEndpoints) {
  nn::CosineSchedule s{1e-3, 1e-5, 100};
  EXPECT_DOUBLE_EQ(s.at(0), 1e-3);
  EXPECT_NEAR(s.at(100), 1e-5, 1e-15);
  EXPECT_NEAR(s.at(50), 0.5 * (1e-3 + 1e-5), 1e-12);
  EXPECT_NEAR(s.at(500), 1e-5, 1e-15);
}

TEST(Optim, AdamWMinimizesQuadratic) {
  // a linear readout trained to hit a constant target
  std::mt19937_64 rng(16);
  nn::Network<double> net(nn::Architecture{1, 4, 1, 1, 4, 3});
  net.initialize(rng);
  nn::AdamW<double> opt(net, {});
  nn::Matrix<double> x = nn::Matrix<double>::Constant(1, 8, 0.5);
  double first = 0, last = 0;
  for (int step = 0; step < 300; ++step) {
    nn::Network<double>::Tape tape;
    const auto y = net.forward(x, tape);
    const nn::Matrix<double> d = (y.array() - 0.7).matrix();
    const double loss = d.squaredNorm() / 8;
    if (step == 0) first = loss;
    last = loss;
    net.zero_grad();
    net.backward(tape, 2 * d / 8);
    opt.step(net, 1e-2);
  }
  EXPECT_LT(last, first * 1e-3);
}
