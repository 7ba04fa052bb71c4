#pragma once

// Federated averaging with and without HANs-encrypted uploads.

#include "hanlab/attacks.hpp"
#include "hanlab/datasets.hpp"

#include <chrono>
#include <unordered_set>

namespace hanlab {

using RMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TaskArch {
  std::size_t channels = 1;
  std::size_t side = 28;
  std::size_t conv1 = 8;
  std::size_t conv2 = 16;
  std::size_t kernel = 5;
  std::size_t classes = 10;

  std::size_t out1() const { return side - kernel + 1; }
  std::size_t pool1() const { return out1() / 2; }
  std::size_t out2() const { return pool1() - kernel + 1; }
  std::size_t pool2() const { return out2() / 2; }
  std::size_t features() const { return conv2 * pool2() * pool2(); }
  bool operator==(const TaskArch&) const = default;
};

inline void validate(const TaskArch& a) {
  if (a.channels == 0 || a.conv1 == 0 || a.conv2 == 0 || a.classes < 2 || a.kernel == 0 || a.side < a.kernel)
    throw std::invalid_argument("task arch: bad sizes");
  if (a.out1() % 2 || a.pool1() < a.kernel || a.out2() % 2)
    throw std::invalid_argument("task arch: conv outputs must be even before each 2x2 pool");
}

namespace detail {

// in: (C, S*S) feature map. out: (C*k*k, O*O) with O = S-k+1.
inline Mat im2col(const Mat& in, std::size_t side, std::size_t k) {
  const std::size_t o = side - k + 1, c = static_cast<std::size_t>(in.rows());
  Mat cols(static_cast<Eigen::Index>(c * k * k), static_cast<Eigen::Index>(o * o));
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t dy = 0; dy < k; ++dy)
      for (std::size_t dx = 0; dx < k; ++dx) {
        const auto r = static_cast<Eigen::Index>(ch * k * k + dy * k + dx);
        for (std::size_t y = 0; y < o; ++y)
          for (std::size_t x = 0; x < o; ++x)
            cols(r, static_cast<Eigen::Index>(y * o + x)) =
                in(static_cast<Eigen::Index>(ch), static_cast<Eigen::Index>((y + dy) * side + x + dx));
      }
  return cols;
}

inline Mat col2im(const Mat& cols, std::size_t c, std::size_t side, std::size_t k) {
  const std::size_t o = side - k + 1;
  Mat out = Mat::Zero(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(side * side));
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t dy = 0; dy < k; ++dy)
      for (std::size_t dx = 0; dx < k; ++dx) {
        const auto r = static_cast<Eigen::Index>(ch * k * k + dy * k + dx);
        for (std::size_t y = 0; y < o; ++y)
          for (std::size_t x = 0; x < o; ++x)
            out(static_cast<Eigen::Index>(ch), static_cast<Eigen::Index>((y + dy) * side + x + dx)) +=
                cols(r, static_cast<Eigen::Index>(y * o + x));
      }
  return out;
}

// 2x2 max pool over (C, S*S); argmax holds the winning input position.
inline Mat maxpool2(const Mat& in, std::size_t side, std::vector<Eigen::Index>& argmax) {
  const std::size_t p = side / 2;
  Mat out(in.rows(), static_cast<Eigen::Index>(p * p));
  argmax.resize(static_cast<std::size_t>(out.size()));
  for (Eigen::Index ch = 0; ch < in.rows(); ++ch)
    for (std::size_t y = 0; y < p; ++y)
      for (std::size_t x = 0; x < p; ++x) {
        Eigen::Index best = static_cast<Eigen::Index>(2 * y * side + 2 * x);
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const auto pos = static_cast<Eigen::Index>((2 * y + dy) * side + 2 * x + dx);
            if (in(ch, pos) > in(ch, best)) best = pos;
          }
        const auto o = static_cast<Eigen::Index>(y * p + x);
        out(ch, o) = in(ch, best);
        argmax[static_cast<std::size_t>(ch * out.cols() + o)] = best;
      }
  return out;
}

inline Mat unpool2(const Mat& grad, std::size_t side, const std::vector<Eigen::Index>& argmax) {
  Mat out = Mat::Zero(grad.rows(), static_cast<Eigen::Index>(side * side));
  for (Eigen::Index ch = 0; ch < grad.rows(); ++ch)
    for (Eigen::Index o = 0; o < grad.cols(); ++o)
      out(ch, argmax[static_cast<std::size_t>(ch * grad.cols() + o)]) += grad(ch, o);
  return out;
}

}  // namespace detail

// conv(k) -> relu -> pool2 -> conv(k) -> relu -> pool2 -> linear, softmax
// cross-entropy. Weights are row-major (out, in); conv kernels are laid out
// as (out, in_channel * k * k).
class TaskCnn {
 public:
  struct Layer {
    std::string name;
    RMat* value;
  };

  TaskCnn() = default;
  explicit TaskCnn(const TaskArch& a) : arch_(a) {
    validate(a);
    const auto k2 = static_cast<Eigen::Index>(a.kernel * a.kernel);
    w1_ = RMat::Zero(static_cast<Eigen::Index>(a.conv1), static_cast<Eigen::Index>(a.channels) * k2);
    b1_ = RMat::Zero(static_cast<Eigen::Index>(a.conv1), 1);
    w2_ = RMat::Zero(static_cast<Eigen::Index>(a.conv2), static_cast<Eigen::Index>(a.conv1) * k2);
    b2_ = RMat::Zero(static_cast<Eigen::Index>(a.conv2), 1);
    wf_ = RMat::Zero(static_cast<Eigen::Index>(a.classes), static_cast<Eigen::Index>(a.features()));
    bf_ = RMat::Zero(static_cast<Eigen::Index>(a.classes), 1);
  }
  TaskCnn(const TaskCnn& o) : arch_(o.arch_), w1_(o.w1_), b1_(o.b1_), w2_(o.w2_), b2_(o.b2_), wf_(o.wf_), bf_(o.bf_) {}
  TaskCnn& operator=(const TaskCnn& o) {
    arch_ = o.arch_;
    w1_ = o.w1_, b1_ = o.b1_, w2_ = o.w2_, b2_ = o.b2_, wf_ = o.wf_, bf_ = o.bf_;
    return *this;
  }

  const TaskArch& arch() const { return arch_; }

  std::vector<Layer> layers() {
    return {{"conv1.weight", &w1_}, {"conv1.bias", &b1_}, {"conv2.weight", &w2_},
            {"conv2.bias", &b2_},   {"fc.weight", &wf_},  {"fc.bias", &bf_}};
  }
  std::vector<std::pair<std::string, const RMat*>> layers() const {
    return {{"conv1.weight", &w1_}, {"conv1.bias", &b1_}, {"conv2.weight", &w2_},
            {"conv2.bias", &b2_},   {"fc.weight", &wf_},  {"fc.bias", &bf_}};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : layers()) n += static_cast<std::size_t>(m->size());
    return n;
  }

  // PyTorch-style uniform fan-in initialization.
  template <class Rng>
  void initialize(Rng& rng) {
    const double k2 = static_cast<double>(arch_.kernel * arch_.kernel);
    auto fill = [&](RMat& m, double fan_in) {
      std::uniform_real_distribution<float> u(static_cast<float>(-1.0 / std::sqrt(fan_in)),
                                              static_cast<float>(1.0 / std::sqrt(fan_in)));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    };
    fill(w1_, static_cast<double>(arch_.channels) * k2);
    fill(b1_, static_cast<double>(arch_.channels) * k2);
    fill(w2_, static_cast<double>(arch_.conv1) * k2);
    fill(b2_, static_cast<double>(arch_.conv1) * k2);
    fill(wf_, static_cast<double>(arch_.features()));
    fill(bf_, static_cast<double>(arch_.features()));
  }

  Vec flatten() const {
    Vec out(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index o = 0;
    for (const auto& [name, m] : layers()) {
      out.segment(o, m->size()) = Eigen::Map<const Vec>(m->data(), m->size());
      o += m->size();
    }
    return out;
  }

  void assign(const Vec& flat) {
    if (static_cast<std::size_t>(flat.size()) != parameter_count())
      throw std::invalid_argument("task model: parameter vector length mismatch");
    Eigen::Index o = 0;
    for (auto& l : layers()) {
      Eigen::Map<Vec>(l.value->data(), l.value->size()) = flat.segment(o, l.value->size());
      o += l.value->size();
    }
  }

  std::uint64_t digest() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [name, m] : layers()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(m->data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(m->size()) * sizeof(float); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
      }
    }
    return h;
  }

  struct Cache {
    Mat x1, z1, x2, z2;
    std::vector<Eigen::Index> arg1, arg2;
    Vec f;
    Vec logits;
  };

  Vec logits(const Eigen::Ref<const Vec>& image, Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    const auto s = arch_.side, k = arch_.kernel;
    const Mat in = Eigen::Map<const Mat>(image.data(), static_cast<Eigen::Index>(s * s),
                                         static_cast<Eigen::Index>(arch_.channels))
                       .transpose();
    c.x1 = detail::im2col(in, s, k);
    c.z1 = (w1_ * c.x1).colwise() + Vec(b1_.col(0));
    const Mat a1 = c.z1.cwiseMax(0.0f);
    const Mat p1 = detail::maxpool2(a1, arch_.out1(), c.arg1);
    c.x2 = detail::im2col(p1, arch_.pool1(), k);
    c.z2 = (w2_ * c.x2).colwise() + Vec(b2_.col(0));
    const Mat a2 = c.z2.cwiseMax(0.0f);
    const Mat p2 = detail::maxpool2(a2, arch_.out2(), c.arg2);
    const RMat p2r = p2;  // channel-major flatten
    c.f = Eigen::Map<const Vec>(p2r.data(), p2r.size());
    c.logits = wf_ * c.f + Vec(bf_.col(0));
    return c.logits;
  }

  std::size_t predict(const Eigen::Ref<const Vec>& image) const {
    Eigen::Index best = 0;
    logits(image).maxCoeff(&best);
    return static_cast<std::size_t>(best);
  }

  // Mean cross-entropy over the batch; gradients written in flatten() order.
  double loss_and_grad(const Mat& images, const std::vector<std::uint8_t>& labels, Vec& grad) const {
    const auto n = images.cols();
    if (static_cast<std::size_t>(n) != labels.size()) throw std::invalid_argument("task model: label count mismatch");
    RMat g1 = RMat::Zero(w1_.rows(), w1_.cols()), gb1 = RMat::Zero(b1_.rows(), 1);
    RMat g2 = RMat::Zero(w2_.rows(), w2_.cols()), gb2 = RMat::Zero(b2_.rows(), 1);
    RMat gf = RMat::Zero(wf_.rows(), wf_.cols()), gbf = RMat::Zero(bf_.rows(), 1);
    double loss = 0.0;
    const float inv = 1.0f / static_cast<float>(n);
    Cache c;
    for (Eigen::Index i = 0; i < n; ++i) {
      logits(images.col(i), &c);
      const float mx = c.logits.maxCoeff();
      Vec p = (c.logits.array() - mx).exp().matrix();
      const float z = p.sum();
      p /= z;
      const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
      loss += -(c.logits[y] - mx - std::log(z));
      Vec d = p;
      d[y] -= 1.0f;
      d *= inv;
      gf.noalias() += d * c.f.transpose();
      gbf.col(0) += d;
      const Vec df = wf_.transpose() * d;
      const auto p2s = static_cast<Eigen::Index>(arch_.pool2() * arch_.pool2());
      const Mat dp2 = Eigen::Map<const RMat>(df.data(), static_cast<Eigen::Index>(arch_.conv2), p2s);
      const Mat dz2 = detail::unpool2(dp2, arch_.out2(), c.arg2).cwiseProduct((c.z2.array() > 0.0f).cast<float>().matrix());
      g2.noalias() += dz2 * c.x2.transpose();
      gb2.col(0) += dz2.rowwise().sum();
      const Mat dp1 = detail::col2im(w2_.transpose() * dz2, arch_.conv1, arch_.pool1(), arch_.kernel);
      const Mat dz1 = detail::unpool2(dp1, arch_.out1(), c.arg1).cwiseProduct((c.z1.array() > 0.0f).cast<float>().matrix());
      g1.noalias() += dz1 * c.x1.transpose();
      gb1.col(0) += dz1.rowwise().sum();
    }
    grad.resize(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index o = 0;
    for (const RMat* m : {&g1, &gb1, &g2, &gb2, &gf, &gbf}) {
      grad.segment(o, m->size()) = Eigen::Map<const Vec>(m->data(), m->size());
      o += m->size();
    }
    return loss / static_cast<double>(n);
  }

 private:
  TaskArch arch_;
  RMat w1_, b1_, w2_, b2_, wf_, bf_;
};

inline double accuracy(const TaskCnn& m, const ImageSet& data) {
  if (data.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    hit += m.predict(data.images.col(static_cast<Eigen::Index>(i))) == data.labels[i];
  return static_cast<double>(hit) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Parameter codec

struct CodecMeta {
  std::vector<std::pair<std::string, std::array<std::size_t, 2>>> layers;
  std::size_t total = 0;
  std::size_t clip_count = 0;
  double psi = 1.0;
  double clip_rate() const { return total ? static_cast<double>(clip_count) / static_cast<double>(total) : 0.0; }
  bool operator==(const CodecMeta&) const = default;
};

inline void to_json(nlohmann::json& j, const CodecMeta& m) {
  j = nlohmann::json::object();
  j["total"] = m.total;
  j["clip_count"] = m.clip_count;
  j["psi"] = m.psi;
  for (const auto& [name, shape] : m.layers) j["layers"].push_back({{"name", name}, {"shape", shape}});
}

inline void from_json(const nlohmann::json& j, CodecMeta& m) {
  m.total = j.at("total");
  m.clip_count = j.at("clip_count");
  m.psi = j.at("psi");
  m.layers.clear();
  for (const auto& l : j.at("layers")) m.layers.emplace_back(l.at("name"), l.at("shape").get<std::array<std::size_t, 2>>());
}

struct EncodedParams {
  PlaintextBatch m;
  CodecMeta meta;
};

inline constexpr double kClipWarnRate = 0.01;

// Canonical order: conv1.weight, conv1.bias, conv2.weight, conv2.bias,
// fc.weight, fc.bias, each row-major.
inline EncodedParams param_codec_encode(const TaskCnn& model, double psi, std::ostream* warn = &std::cerr) {
  const Vec flat = model.flatten();
  if (!flat.allFinite()) throw std::invalid_argument("param codec: non-finite weight");
  EncodedParams e;
  e.m = clip_plaintexts(flat, psi);
  e.meta.total = static_cast<std::size_t>(flat.size());
  e.meta.clip_count = e.m.clip_count;
  e.meta.psi = psi;
  for (const auto& [name, m] : model.layers())
    e.meta.layers.push_back({name, {static_cast<std::size_t>(m->rows()), static_cast<std::size_t>(m->cols())}});
  if (warn && e.meta.clip_rate() > kClipWarnRate)
    *warn << "warning: param codec clipped " << e.meta.clip_count << " of " << e.meta.total
          << " weights; psi may be too small\n";
  return e;
}

inline Vec param_codec_decode(const Vec& values, const CodecMeta& meta) {
  std::size_t expected = 0;
  for (const auto& [name, shape] : meta.layers) expected += shape[0] * shape[1];
  if (expected != meta.total || static_cast<std::size_t>(values.size()) != meta.total)
    throw std::invalid_argument("param codec: decoded length does not match codec metadata");
  return values;
}

// ---------------------------------------------------------------------------
// Federated runs

struct FlConfig {
  std::string dataset = "mnist";
  std::size_t train_subset = 2000;
  std::size_t test_subset = 2000;
  std::size_t rounds = 5;
  std::size_t local_epochs = 1;
  std::size_t clients = 3;
  std::size_t batch_size = 16;
  double lr = 0.1;
  double momentum = 0.5;
  TaskArch arch;
  std::uint64_t seed = 0;
};

inline void validate(const FlConfig& c) {
  if (c.rounds == 0 || c.local_epochs == 0 || c.clients == 0 || c.batch_size == 0 || c.train_subset == 0)
    throw std::invalid_argument("fl config: rounds, epochs, clients, batch and subset must be >= 1");
  if (!(c.lr > 0.0) || c.momentum < 0.0) throw std::invalid_argument("fl config: bad optimizer settings");
  validate(c.arch);
}

inline void to_json(nlohmann::json& j, const TaskArch& a) {
  j = {{"channels", a.channels}, {"side", a.side},       {"conv1", a.conv1},
       {"conv2", a.conv2},       {"kernel", a.kernel},   {"classes", a.classes}};
}

inline void from_json(const nlohmann::json& j, TaskArch& a) {
  TaskArch d;
  a.channels = j.value("channels", d.channels);
  a.side = j.value("side", d.side);
  a.conv1 = j.value("conv1", d.conv1);
  a.conv2 = j.value("conv2", d.conv2);
  a.kernel = j.value("kernel", d.kernel);
  a.classes = j.value("classes", d.classes);
}

inline void to_json(nlohmann::json& j, const FlConfig& c) {
  j = {{"dataset", c.dataset},   {"train_subset", c.train_subset}, {"test_subset", c.test_subset},
       {"rounds", c.rounds},     {"local_epochs", c.local_epochs}, {"clients", c.clients},
       {"batch_size", c.batch_size}, {"lr", c.lr},                 {"momentum", c.momentum},
       {"arch", c.arch},         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, FlConfig& c) {
  FlConfig d;
  c.dataset = j.value("dataset", d.dataset);
  c.train_subset = j.value("train_subset", d.train_subset);
  c.test_subset = j.value("test_subset", d.test_subset);
  c.rounds = j.value("rounds", d.rounds);
  c.local_epochs = j.value("local_epochs", d.local_epochs);
  c.clients = j.value("clients", d.clients);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.momentum = j.value("momentum", d.momentum);
  c.arch = j.value("arch", d.arch);
  c.seed = j.value("seed", d.seed);
}

// Architecture matching a dataset's image geometry.
inline TaskArch arch_for(const std::string& dataset) {
  TaskArch a;
  if (dataset == "cifar10") {
    a.channels = 3;
    a.side = 32;
    a.conv1 = 16;
    a.conv2 = 32;
  }
  return a;
}

struct FlData {
  ImageSet train;
  ImageSet test;
};

inline FlData load_fl_data(const FlConfig& c) {
  return {load_dataset(c.dataset, "train", c.train_subset), load_dataset(c.dataset, "test", c.test_subset)};
}

struct RoundTrace {
  std::size_t round = 0;
  std::vector<std::uint64_t> client_digests;
  std::optional<EvalStats> diff;  // HANs sum vs plain sum, HANs runs only
  std::size_t clip_count = 0;
  double accuracy = 0.0;
  double wall_seconds = 0.0;
};

inline nlohmann::json to_json_record(const RoundTrace& t, const std::string& mode) {
  nlohmann::json j{{"mode", mode},
                   {"round", t.round},
                   {"client_digests", t.client_digests},
                   {"clip_count", t.clip_count},
                   {"accuracy", t.accuracy},
                   {"wall_seconds", t.wall_seconds}};
  if (t.diff) j["diff"] = stats_json(*t.diff);
  return j;
}

struct FlRun {
  std::string mode;
  FlConfig cfg;
  TaskCnn model;
  double accuracy = 0.0;
  std::vector<RoundTrace> traces;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> shards(std::size_t n, std::size_t clients) {
  std::vector<std::vector<std::size_t>> out(clients);
  for (std::size_t i = 0; i < n; ++i) out[i % clients].push_back(i);
  return out;
}

// Local SGD with momentum from the broadcast global model.
inline TaskCnn local_train(const TaskCnn& global, const ImageSet& data, const std::vector<std::size_t>& shard,
                           const FlConfig& cfg, std::size_t round, std::size_t client) {
  TaskCnn m = global;
  auto rng = derived_rng(cfg.seed, 600 + round, client);
  Vec w = m.flatten(), vel = Vec::Zero(w.size()), g;
  std::vector<std::size_t> order = shard;
  const auto in = data.images.rows();
  for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - s);
      Mat x(in, static_cast<Eigen::Index>(len));
      std::vector<std::uint8_t> y(len);
      for (std::size_t k = 0; k < len; ++k) {
        x.col(static_cast<Eigen::Index>(k)) = data.images.col(static_cast<Eigen::Index>(order[s + k]));
        y[k] = data.labels[order[s + k]];
      }
      m.loss_and_grad(x, y, g);
      vel = static_cast<float>(cfg.momentum) * vel + g;
      w -= static_cast<float>(cfg.lr) * vel;
      m.assign(w);
    }
  }
  return m;
}

inline std::uint64_t key_digest(const KeyBatch& k) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Vec* v : {&k.sk_a, &k.sk_b}) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(v->data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(v->size()) * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

inline TaskCnn initial_model(const FlConfig& cfg) {
  TaskCnn m(cfg.arch);
  auto rng = derived_rng(cfg.seed, 700);
  m.initialize(rng);
  return m;
}

inline void check_data(const FlConfig& cfg, const FlData& data) {
  validate(cfg);
  const auto in = static_cast<Eigen::Index>(cfg.arch.channels * cfg.arch.side * cfg.arch.side);
  if (data.train.images.rows() != in || data.test.images.rows() != in)
    throw std::invalid_argument("fl: dataset geometry does not match the task architecture");
  if (data.train.size() < cfg.clients) throw std::invalid_argument("fl: fewer training images than clients");
}

}  // namespace detail

// Client side: encrypt every parameter with fresh keys.
template <class Rng>
Traffic client_upload(const Model<float>& enc, const PlaintextBatch& params, const AheConfig& cfg, Rng& rng,
                      std::uint64_t* key_fingerprint = nullptr) {
  auto [keys, pks] = keygen(params.size(), cfg, rng);
  if (key_fingerprint) *key_fingerprint = detail::key_digest(keys);
  return {encrypt(enc, params, keys, cfg), std::move(pks)};
}

// Server side: sees only ciphertexts and public keys.
inline Vec server_aggregate(const Model<float>& agg, std::span<const Traffic> uploads) {
  std::vector<CiphertextBatch> cts;
  std::vector<PublicKeyBatch> pks;
  for (const auto& u : uploads) {
    cts.push_back(u.c);
    pks.push_back(u.pk);
  }
  return aggregate(agg, std::span<const CiphertextBatch>(cts), std::span<const PublicKeyBatch>(pks));
}

inline FlRun fedavg_plain(const FlConfig& cfg, const FlData& data) {
  detail::check_data(cfg, data);
  FlRun run{"plain", cfg, detail::initial_model(cfg), 0.0, {}};
  const auto parts = detail::shards(data.train.size(), cfg.clients);
  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    RoundTrace tr;
    tr.round = t;
    Vec sum = Vec::Zero(static_cast<Eigen::Index>(run.model.parameter_count()));
    for (std::size_t i = 0; i < cfg.clients; ++i) {
      const auto local = detail::local_train(run.model, data.train, parts[i], cfg, t, i);
      tr.client_digests.push_back(local.digest());
      sum += local.flatten();
    }
    run.model.assign(sum / static_cast<float>(cfg.clients));
    tr.accuracy = accuracy(run.model, data.test);
    tr.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.traces.push_back(std::move(tr));
  }
  run.accuracy = run.traces.back().accuracy;
  return run;
}

inline FlRun fedavg_hans(const FlConfig& cfg, const FlData& data, const ModelBundle& bundle) {
  detail::check_data(cfg, data);
  if (bundle.num_clients() != cfg.clients)
    throw std::invalid_argument("fl: bundle arity " + std::to_string(bundle.num_clients()) + " does not match " +
                                std::to_string(cfg.clients) + " clients");
  FlRun run{"hans", cfg, detail::initial_model(cfg), 0.0, {}};
  const auto parts = detail::shards(data.train.size(), cfg.clients);
  std::unordered_set<std::uint64_t> seen_keys;
  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    RoundTrace tr;
    tr.round = t;
    std::vector<Traffic> uploads;
    Vec plain_sum = Vec::Zero(static_cast<Eigen::Index>(run.model.parameter_count()));
    CodecMeta meta;
    for (std::size_t i = 0; i < cfg.clients; ++i) {
      const auto local = detail::local_train(run.model, data.train, parts[i], cfg, t, i);
      tr.client_digests.push_back(local.digest());
      auto enc = param_codec_encode(local, bundle.cfg.psi);
      tr.clip_count += enc.meta.clip_count;
      plain_sum += enc.m.m;
      meta = enc.meta;
      auto rng = derived_rng(cfg.seed, 800 + t, i);
      std::uint64_t fp = 0;
      uploads.push_back(client_upload(bundle.encryptors[i], enc.m, bundle.cfg, rng, &fp));
      if (!seen_keys.insert(fp).second) throw std::logic_error("fl: key batch reused across uploads");
    }
    const Vec hans_sum = server_aggregate(bundle.aggregator, uploads);
    tr.diff = l1_stats(hans_sum, plain_sum);
    run.model.assign(param_codec_decode(hans_sum / static_cast<float>(cfg.clients), meta));
    tr.accuracy = accuracy(run.model, data.test);
    tr.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.traces.push_back(std::move(tr));
  }
  run.accuracy = run.traces.back().accuracy;
  return run;
}

struct DeltaReport {
  double plain_accuracy = 0.0;
  double hans_accuracy = 0.0;
  double delta = 0.0;  // plain minus HANs; negative means HANs did better
  double budget = 0.02;
  bool within_budget = true;
  double worst_round_mean_diff = 0.0;
  double worst_round_max_diff = 0.0;
};

inline DeltaReport accuracy_delta(const FlRun& plain, const FlRun& hans, double budget = 0.02) {
  if (nlohmann::json(plain.cfg) != nlohmann::json(hans.cfg))
    throw std::invalid_argument("accuracy delta: runs use different configurations");
  DeltaReport r;
  r.plain_accuracy = plain.accuracy;
  r.hans_accuracy = hans.accuracy;
  r.delta = plain.accuracy - hans.accuracy;
  r.budget = budget;
  r.within_budget = r.delta < budget;
  for (const auto& t : hans.traces)
    if (t.diff) {
      r.worst_round_mean_diff = std::max(r.worst_round_mean_diff, t.diff->mean_l1);
      r.worst_round_max_diff = std::max(r.worst_round_max_diff, t.diff->max_l1);
    }
  return r;
}

inline nlohmann::json to_json_record(const DeltaReport& r) {
  return {{"plain_accuracy", r.plain_accuracy},
          {"hans_accuracy", r.hans_accuracy},
          {"delta", r.delta},
          {"delta_pct", 100.0 * r.delta},
          {"budget", r.budget},
          {"within_budget", r.within_budget},
          {"worst_round_mean_diff", r.worst_round_mean_diff},
          {"worst_round_max_diff", r.worst_round_max_diff}};
}

}  // namespace hanlab
