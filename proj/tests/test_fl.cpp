#include "hanlab/config.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <numeric>
#include <set>
#include <sstream>

using namespace hanlab;

namespace {

// Straightforward double-precision CNN with explicit loops, used as the
// reference for TaskCnn's forward pass and gradients.
struct NaiveCnn {
  TaskArch a;
  std::vector<double> w1, b1, w2, b2, wf, bf;

  explicit NaiveCnn(const TaskCnn& m) : a(m.arch()) {
    auto grab = [](const RMat* r) {
      std::vector<double> v(static_cast<std::size_t>(r->size()));
      for (Eigen::Index i = 0; i < r->size(); ++i) v[static_cast<std::size_t>(i)] = r->data()[i];
      return v;
    };
    const auto l = m.layers();
    w1 = grab(l[0].second), b1 = grab(l[1].second), w2 = grab(l[2].second);
    b2 = grab(l[3].second), wf = grab(l[4].second), bf = grab(l[5].second);
  }

  using Map3 = std::vector<std::vector<std::vector<double>>>;  // [c][y][x]

  static Map3 zeros(std::size_t c, std::size_t s) {
    return Map3(c, std::vector<std::vector<double>>(s, std::vector<double>(s, 0.0)));
  }

  // conv weight index: (co, ci, dy, dx) -> co*(cin*k*k) + ci*k*k + dy*k + dx
  Map3 conv(const Map3& in, const std::vector<double>& w, const std::vector<double>& b, std::size_t cout) const {
    const std::size_t cin = in.size(), s = in[0].size(), k = a.kernel, o = s - k + 1;
    Map3 out = zeros(cout, o);
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t y = 0; y < o; ++y)
        for (std::size_t x = 0; x < o; ++x) {
          double acc = b[co];
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t dy = 0; dy < k; ++dy)
              for (std::size_t dx = 0; dx < k; ++dx)
                acc += w[co * cin * k * k + ci * k * k + dy * k + dx] * in[ci][y + dy][x + dx];
          out[co][y][x] = acc;
        }
    return out;
  }

  static Map3 relu(Map3 m) {
    for (auto& c : m)
      for (auto& r : c)
        for (auto& v : r) v = std::max(0.0, v);
    return m;
  }

  static Map3 pool(const Map3& in) {
    const std::size_t p = in[0].size() / 2;
    Map3 out = zeros(in.size(), p);
    for (std::size_t c = 0; c < in.size(); ++c)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          out[c][y][x] = std::max({in[c][2 * y][2 * x], in[c][2 * y][2 * x + 1], in[c][2 * y + 1][2 * x],
                                   in[c][2 * y + 1][2 * x + 1]});
    return out;
  }

  Map3 image(const Vec& v) const {
    Map3 m = zeros(a.channels, a.side);
    for (std::size_t c = 0; c < a.channels; ++c)
      for (std::size_t y = 0; y < a.side; ++y)
        for (std::size_t x = 0; x < a.side; ++x)
          m[c][y][x] = v[static_cast<Eigen::Index>(c * a.side * a.side + y * a.side + x)];
    return m;
  }

  std::vector<double> logits(const Vec& img) const {
    const Map3 p2 = pool(relu(conv(pool(relu(conv(image(img), w1, b1, a.conv1))), w2, b2, a.conv2)));
    std::vector<double> f;
    for (const auto& c : p2)
      for (const auto& r : c)
        for (double v : r) f.push_back(v);
    std::vector<double> z(a.classes);
    for (std::size_t j = 0; j < a.classes; ++j) {
      z[j] = bf[j];
      for (std::size_t i = 0; i < f.size(); ++i) z[j] += wf[j * f.size() + i] * f[i];
    }
    return z;
  }

  double loss(const Mat& images, const std::vector<std::uint8_t>& labels) const {
    double total = 0;
    for (Eigen::Index i = 0; i < images.cols(); ++i) {
      const auto z = logits(images.col(i));
      const double mx = *std::max_element(z.begin(), z.end());
      double s = 0;
      for (double v : z) s += std::exp(v - mx);
      total += -(z[labels[static_cast<std::size_t>(i)]] - mx - std::log(s));
    }
    return total / static_cast<double>(images.cols());
  }

  std::vector<double*> params() {
    std::vector<double*> out;
    for (auto* v : {&w1, &b1, &w2, &b2, &wf, &bf})
      for (auto& x : *v) out.push_back(&x);
    return out;
  }
};

TaskArch small_arch() {
  TaskArch a;
  a.channels = 2;
  a.side = 14;
  a.conv1 = 3;
  a.conv2 = 4;
  a.kernel = 3;
  a.classes = 5;
  return a;
}

Mat random_images(std::size_t n, std::size_t dim, std::uint64_t seed) {
  auto rng = derived_rng(seed, 1);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Mat m(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

FlConfig small_fl() {
  FlConfig c;
  c.train_subset = 600;
  c.test_subset = 300;
  c.rounds = 2;
  return c;
}

const FlData& mnist_small() {
  static const FlData d = load_fl_data(small_fl());
  return d;
}

const ModelBundle& micro_bundle() {
  static const ModelBundle b = [] {
    auto c = preset("micro");
    c.set_seed(31);
    return train_hans(c.ahe, c.train).bundle;
  }();
  return b;
}

}  // namespace

TEST(TaskCnn, ForwardMatchesNaiveDoubleOracle) {
  TaskCnn m(small_arch());
  auto rng = derived_rng(1, 1);
  m.initialize(rng);
  const NaiveCnn ref(m);
  const Mat x = random_images(4, 2 * 14 * 14, 2);
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    const Vec got = m.logits(x.col(i));
    const auto want = ref.logits(x.col(i));
    for (std::size_t j = 0; j < want.size(); ++j) EXPECT_NEAR(got[static_cast<Eigen::Index>(j)], want[j], 1e-5);
  }
}

TEST(TaskCnn, GradientsMatchNaiveDoubleOracle) {
  TaskCnn m(small_arch());
  auto rng = derived_rng(3, 1);
  m.initialize(rng);
  const Mat x = random_images(3, 2 * 14 * 14, 4);
  const std::vector<std::uint8_t> y{0, 3, 4};
  Vec g;
  const double loss = m.loss_and_grad(x, y, g);
  NaiveCnn ref(m);
  EXPECT_NEAR(loss, ref.loss(x, y), 1e-5);
  const auto ps = ref.params();
  ASSERT_EQ(static_cast<std::size_t>(g.size()), ps.size());
  // central differences on the double oracle; random inputs keep ReLU and
  // max-pool away from their kinks at this step size
  const double h = 1e-6;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < ps.size(); ++i, ++checked) {
    const double keep = *ps[i];
    *ps[i] = keep + h;
    const double up = ref.loss(x, y);
    *ps[i] = keep - h;
    const double dn = ref.loss(x, y);
    *ps[i] = keep;
    const double fd = (up - dn) / (2 * h);
    EXPECT_NEAR(g[static_cast<Eigen::Index>(i)], fd, 2e-4 + 1e-3 * std::abs(fd)) << "param " << i;
  }
  EXPECT_EQ(checked, 254u);
}

TEST(TaskCnn, ParameterCountAndFlattenRoundTrip) {
  TaskCnn m(TaskArch{});
  EXPECT_EQ(m.parameter_count(), 8u * 25 + 8 + 16u * 8 * 25 + 16 + 10u * 16 * 4 * 4 + 10);
  auto rng = derived_rng(5, 1);
  m.initialize(rng);
  TaskCnn n(TaskArch{});
  n.assign(m.flatten());
  EXPECT_EQ(n.digest(), m.digest());
  EXPECT_THROW(n.assign(Vec::Zero(3)), std::invalid_argument);
}

TEST(TaskArch, ValidationAndCifarGeometry) {
  TaskArch bad;
  bad.side = 27;
  EXPECT_THROW(validate(bad), std::invalid_argument);
  const auto c = arch_for("cifar10");
  EXPECT_EQ(c.channels, 3u);
  EXPECT_EQ(c.side, 32u);
  EXPECT_NO_THROW(validate(c));
}

// ----------------------------------------------------------------------------
// codec

TEST(Codec, RoundTripForInRangeWeights) {
  TaskCnn m(TaskArch{});
  auto rng = derived_rng(6, 1);
  m.initialize(rng);
  std::ostringstream warn;
  const auto e = param_codec_encode(m, 1.0, &warn);
  EXPECT_EQ(e.meta.clip_count, 0u);
  EXPECT_TRUE(warn.str().empty());
  const Vec back = param_codec_decode(e.m.m, e.meta);
  TaskCnn n(TaskArch{});
  n.assign(back);
  EXPECT_EQ(n.digest(), m.digest());
}

TEST(Codec, ClipsOutOfRangeWeight) {
  TaskCnn m(TaskArch{});
  auto& b = *m.layers()[1].value;
  b(0, 0) = 1.7f;
  std::ostringstream warn;
  const auto e = param_codec_encode(m, 1.0, &warn);
  EXPECT_EQ(e.meta.clip_count, 1u);
  EXPECT_EQ(e.m.m[8 * 25], 1.0f);
  EXPECT_TRUE(warn.str().empty());
}

TEST(Codec, WarnsWhenClipRateHigh) {
  TaskCnn m(TaskArch{});
  for (auto& l : m.layers()) l.value->setConstant(3.0f);
  std::ostringstream warn;
  const auto e = param_codec_encode(m, 1.0, &warn);
  EXPECT_EQ(e.meta.clip_count, e.meta.total);
  EXPECT_NE(warn.str().find("clipped"), std::string::npos);
}

TEST(Codec, NonFiniteRejected) {
  TaskCnn m(TaskArch{});
  (*m.layers()[4].value)(0, 0) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(param_codec_encode(m, 1.0), std::invalid_argument);
}

TEST(Codec, CanonicalOrderAndMetadataRoundTrip) {
  TaskCnn a(TaskArch{}), b(TaskArch{});
  auto r1 = derived_rng(7, 1), r2 = derived_rng(7, 1);
  a.initialize(r1);
  b.initialize(r2);
  const auto ea = param_codec_encode(a, 1.0), eb = param_codec_encode(b, 1.0);
  EXPECT_TRUE(ea.m.m == eb.m.m);
  const std::vector<std::string> order{"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc.weight", "fc.bias"};
  ASSERT_EQ(ea.meta.layers.size(), order.size());
  for (std::size_t i = 0; i < order.size(); ++i) EXPECT_EQ(ea.meta.layers[i].first, order[i]);
  const nlohmann::json j = ea.meta;
  EXPECT_EQ(j.get<CodecMeta>(), ea.meta);
  EXPECT_THROW(param_codec_decode(Vec::Zero(5), ea.meta), std::invalid_argument);
}

// ----------------------------------------------------------------------------
// datasets

TEST(Datasets, ParseIdxHeader) {
  std::string bytes{'\0', '\0', '\x08', '\x02', '\0', '\0', '\0', '\x02', '\0', '\0', '\0', '\x03'};
  bytes += std::string{'\1', '\2', '\3', '\4', '\5', '\6'};
  std::vector<std::size_t> dims;
  const auto payload = parse_idx(bytes, 0x0802, dims);
  EXPECT_EQ(dims, (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(payload.size(), 6u);
  EXPECT_THROW(parse_idx(bytes, 0x0803, dims), DatasetError);
  EXPECT_THROW(parse_idx(bytes.substr(0, bytes.size() - 1), 0x0802, dims), DatasetError);
}

TEST(Datasets, MnistSubsetShapes) {
  const auto& d = mnist_small();
  EXPECT_EQ(d.train.size(), 600u);
  EXPECT_EQ(d.test.size(), 300u);
  EXPECT_EQ(d.train.images.rows(), 784);
  EXPECT_GE(d.train.images.minCoeff(), 0.0f);
  EXPECT_LE(d.train.images.maxCoeff(), 1.0f);
  for (auto l : d.train.labels) EXPECT_LT(l, 10);
}

TEST(Datasets, MissingDataGivesFetchHint) {
  const auto empty = std::filesystem::temp_directory_path() / "hanlab_no_data";
  std::filesystem::create_directories(empty);
  const char* old = std::getenv("HANLAB_DATA_DIR");
  const std::string saved = old ? old : "";
  setenv("HANLAB_DATA_DIR", empty.c_str(), 1);
  try {
    load_dataset("fashion_mnist", "train", 10);
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("HANLAB_DATA_DIR"), std::string::npos);
  }
  EXPECT_THROW(load_dataset("cifar10", "test", 10), DatasetError);
  EXPECT_THROW(load_dataset("svhn", "test", 10), std::invalid_argument);
  if (old)
    setenv("HANLAB_DATA_DIR", saved.c_str(), 1);
  else
    unsetenv("HANLAB_DATA_DIR");
}

// ----------------------------------------------------------------------------
// federated runs

TEST(FedAvg, PlainIsDeterministic) {
  const auto a = fedavg_plain(small_fl(), mnist_small());
  const auto b = fedavg_plain(small_fl(), mnist_small());
  EXPECT_EQ(a.model.digest(), b.model.digest());
  EXPECT_EQ(a.accuracy, b.accuracy);
  ASSERT_EQ(a.traces.size(), 2u);
  EXPECT_EQ(a.traces[0].client_digests.size(), 3u);
}

TEST(FedAvg, SingleClientIsCentralizedTraining) {
  auto c = small_fl();
  c.clients = 1;
  c.rounds = 1;
  const auto run = fedavg_plain(c, mnist_small());
  std::vector<std::size_t> all(mnist_small().train.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto central = detail::local_train(detail::initial_model(c), mnist_small().train, all, c, 0, 0);
  EXPECT_EQ(run.model.digest(), central.digest());
}

TEST(FedAvg, MicroMnistBaselineAccuracy) {
  const FlConfig c;  // 2k train images, 5 rounds
  const auto run = fedavg_plain(c, load_fl_data(c));
  std::cout << "[baseline] accuracy " << run.accuracy << '\n';
  EXPECT_GE(run.accuracy, 0.90);
}

TEST(FedAvg, HansRunSharesDataOrderAndRecordsDiffs) {
  const auto c = small_fl();
  const auto plain = fedavg_plain(c, mnist_small());
  const auto hans = fedavg_hans(c, mnist_small(), micro_bundle());
  ASSERT_EQ(hans.traces.size(), c.rounds);
  // round 0 starts from the same broadcast model, so local training is identical
  EXPECT_EQ(hans.traces[0].client_digests, plain.traces[0].client_digests);
  for (const auto& t : hans.traces) {
    ASSERT_TRUE(t.diff.has_value());
    EXPECT_EQ(t.diff->count, plain.model.parameter_count());
    EXPECT_TRUE(std::isfinite(t.diff->mean_l1));
    const auto rec = to_json_record(t, "hans");
    EXPECT_TRUE(rec.contains("diff"));
  }
}

TEST(FedAvg, HansAverageTracksPlainAverage) {
  auto c = small_fl();
  c.rounds = 1;
  const auto& b = micro_bundle();
  const auto plain = fedavg_plain(c, mnist_small());
  const auto hans = fedavg_hans(c, mnist_small(), b);
  const double max_diff = hans.traces[0].diff->max_l1;
  const Vec gap = (hans.model.flatten() - plain.model.flatten()).cwiseAbs();
  EXPECT_LE(gap.maxCoeff(), max_diff / 3.0 + 1e-6);
}

TEST(FedAvg, ArityMismatchRejected) {
  auto c = small_fl();
  c.clients = 2;
  EXPECT_THROW(fedavg_hans(c, mnist_small(), micro_bundle()), std::invalid_argument);
}

TEST(FedAvg, FreshKeysEveryUpload) {
  const auto& b = micro_bundle();
  TaskCnn m(TaskArch{});
  auto rng = derived_rng(8, 1);
  m.initialize(rng);
  const auto e = param_codec_encode(m, 1.0);
  std::set<std::uint64_t> seen;
  for (std::size_t round = 0; round < 3; ++round)
    for (std::size_t i = 0; i < 3; ++i) {
      auto r = derived_rng(0, 800 + round, i);
      std::uint64_t fp = 0;
      client_upload(b.encryptors[i], e.m, b.cfg, r, &fp);
      EXPECT_TRUE(seen.insert(fp).second) << "round " << round << " client " << i;
    }
}

TEST(FedAvg, ServerAggregateMatchesDirectAggregation) {
  const auto& b = micro_bundle();
  auto rng = derived_rng(9, 1);
  std::vector<Traffic> ups;
  std::vector<CiphertextBatch> cts;
  std::vector<PublicKeyBatch> pks;
  for (std::size_t i = 0; i < 3; ++i) {
    const PlaintextBatch p{uniform_plaintexts(100, 1.0, rng)};
    ups.push_back(client_upload(b.encryptors[i], p, b.cfg, rng));
    cts.push_back(ups.back().c);
    pks.push_back(ups.back().pk);
  }
  const Vec a = server_aggregate(b.aggregator, ups);
  const Vec d = aggregate(b.aggregator, std::span<const CiphertextBatch>(cts), std::span<const PublicKeyBatch>(pks));
  EXPECT_TRUE(a == d);
}

TEST(AccuracyDelta, IdenticalRunsGiveZero) {
  const auto a = fedavg_plain(small_fl(), mnist_small());
  const auto r = accuracy_delta(a, a);
  EXPECT_EQ(r.delta, 0.0);
  EXPECT_TRUE(r.within_budget);
  const auto j = to_json_record(r);
  EXPECT_EQ(j.at("delta_pct"), 0.0);
}

TEST(AccuracyDelta, ConfigMismatchRejected) {
  auto a = fedavg_plain(small_fl(), mnist_small());
  auto b = a;
  b.cfg.seed = 99;
  EXPECT_THROW(accuracy_delta(a, b), std::invalid_argument);
}

TEST(FlConfig, JsonRoundTripAndValidation) {
  FlConfig c;
  c.rounds = 7;
  c.arch = arch_for("cifar10");
  const nlohmann::json j = c;
  EXPECT_EQ(nlohmann::json(j.get<FlConfig>()), j);
  c.rounds = 0;
  EXPECT_THROW(validate(c), std::invalid_argument);
}
