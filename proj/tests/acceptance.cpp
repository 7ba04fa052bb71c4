// End-to-end acceptance run at desk scale. Prints one PASS/FAIL line per
// criterion and exits non-zero if any fails.

#include "hanlab/config.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <iostream>

using namespace hanlab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

double clock_s() {
  static const auto t0 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void log(const std::string& msg) { std::cerr << "[" << static_cast<long>(clock_s()) << "s] " << msg << std::endl; }

struct Verdict {
  int id = 0;
  bool pass = false;
  json detail;
};

std::vector<Verdict> verdicts;

void record(int id, bool pass, json detail) { verdicts.push_back({id, pass, std::move(detail)}); }

bool bitwise_equal(const ModelBundle& a, const ModelBundle& b) {
  auto same = [](const Model<float>& x, const Model<float>& y) {
    const auto px = x.net.params(), py = y.net.params();
    if (px.size() != py.size()) return false;
    for (std::size_t i = 0; i < px.size(); ++i) {
      if (px[i].value.rows() != py[i].value.rows() || px[i].value.cols() != py[i].value.cols()) return false;
      if (std::memcmp(px[i].value.data(), py[i].value.data(), sizeof(float) * static_cast<std::size_t>(px[i].value.size())))
        return false;
    }
    return true;
  };
  if (a.encryptors.size() != b.encryptors.size() || a.attackers.size() != b.attackers.size()) return false;
  for (std::size_t i = 0; i < a.encryptors.size(); ++i)
    if (!same(a.encryptors[i], b.encryptors[i])) return false;
  for (std::size_t i = 0; i < a.attackers.size(); ++i)
    for (auto k : kAllAttackerKinds)
      if (!same(a.attacker(i, k), b.attacker(i, k))) return false;
  return same(a.aggregator, b.aggregator);
}

// Stage-5 bundle, trained once and reused while the configuration is unchanged.
ModelBundle trained_bundle(const ExperimentConfig& cfg, const fs::path& cache) {
  const auto dir = cache / "train";
  const auto final_ckpt = stage_checkpoint(dir, 5);
  const std::string want = config_hash(json(cfg.train));
  if (fs::exists(final_ckpt)) {
    auto loaded = load_checkpoint(final_ckpt);
    if (loaded.bundle.cfg == cfg.ahe && loaded.manifest.at("extra").value("train_cfg_hash", "") == want) {
      log("reusing " + final_ckpt.string());
      return std::move(loaded.bundle);
    }
  }
  TrainOptions opts;
  opts.out_dir = dir;
  opts.on_stage = [](const StageReport& r) {
    log("stage " + std::to_string(r.stage) + " done, steps " + std::to_string(r.steps_run) + ", agg mean " +
        std::to_string(r.aggregation.mean_l1));
  };
  for (int s = 4; s >= 1; --s) {
    const auto p = stage_checkpoint(dir, s);
    if (!fs::exists(p)) continue;
    const auto m = load_checkpoint(p);
    if (m.bundle.cfg == cfg.ahe && m.manifest.at("extra").value("train_cfg_hash", "") == want) {
      log("resuming after stage " + std::to_string(s));
      opts.resume_from = p;
      break;
    }
  }
  return train_hans(cfg.ahe, cfg.train, opts).bundle;
}

struct PpuState {
  ModelBundle bundle;
  std::vector<PublicDataset> published;  // final dataset of each client, slot order
};

PpuState ppu_bundle(const ModelBundle& pre, const ExperimentConfig& cfg, const fs::path& cache) {
  const auto ckpt = cache / "ppu.ckpt";
  const auto pub_path = cache / "public_final.jsonl";
  const std::string key =
      config_hash(json{{"train", json(cfg.train)}, {"ppu", json(cfg.ppu)}, {"pre", bundle_digest(pre)}});
  PpuState s;
  if (fs::exists(ckpt) && fs::exists(pub_path)) {
    auto loaded = load_checkpoint(ckpt);
    if (loaded.manifest.at("extra").value("key", "") == key) {
      log("reusing " + ckpt.string());
      s.bundle = std::move(loaded.bundle);
      s.published.resize(s.bundle.num_clients());
      for (auto& d : read_public_datasets(pub_path)) s.published.at(d.client_id()) = std::move(d);
      return s;
    }
  }
  s.bundle = pre;
  log("cppu");
  auto c = cppu(s.bundle, cfg.ppu);
  for (const auto& p : c.publications) s.published.push_back(p.data);
  log("ippu");
  ippu(s.bundle, s.published, cfg.ppu);
  {
    JsonlSink sink(pub_path);
    for (const auto& d : s.published) write_public_dataset(sink, d);
  }
  save_checkpoint(s.bundle, ckpt, {{"key", key}});
  return s;
}

fs::path self_dir(const char* argv0) {
  std::error_code ec;
  const auto exe = fs::read_symlink("/proc/self/exe", ec);
  return ec ? fs::absolute(argv0).parent_path() : exe.parent_path();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hanlab acceptance run"};
  std::string cache = "acceptance_cache";
  std::uint64_t seed = 0;
  app.add_option("--cache", cache, "Directory for checkpoints and results");
  app.add_option("--seed", seed, "Experiment seed");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(cache);

  auto cfg = preset("desk");
  cfg.set_seed(seed);
  Eigen::setNbThreads(static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));

  try {
    // 1. aggregation fidelity after stage 5
    const ModelBundle pre = trained_bundle(cfg, cache);
    auto eval_rng = derived_rng(seed, 1100);
    const auto agg_pre = evaluate_aggregation(pre, 100000, eval_rng);
    record(1, agg_pre.mean_l1 <= 5e-3 && agg_pre.max_l1 <= 0.1,
           {{"mean_l1", agg_pre.mean_l1}, {"max_l1", agg_pre.max_l1}, {"samples", 100000}});

    // 2. fidelity after both update phases
    const auto ppu = ppu_bundle(pre, cfg, cache);
    const ModelBundle& post = ppu.bundle;
    const auto agg_post = evaluate_aggregation(post, 100000, eval_rng);
    record(2, agg_post.mean_l1 <= 1e-2, {{"mean_l1", agg_post.mean_l1}, {"max_l1", agg_post.max_l1}});

    // 3 and 4. known-model attackers, one set per client
    bool floor_ok = true, uplift_ok = true;
    json kma_rows = json::array();
    std::vector<KmaAttackers> kma;
    auto atk_rng = derived_rng(seed, 1101);
    for (std::size_t i = 0; i < pre.num_clients(); ++i) {
      log("kma client " + std::to_string(i));
      kma.push_back(train_kma_attackers(pre.encryptors[i], pre.cfg, cfg.kma));
      const auto before = intercept(pre.encryptors[i], cfg.kma.eval_samples, pre.cfg, atk_rng);
      const auto after = intercept(post.encryptors[i], cfg.kma.eval_samples, post.cfg, atk_rng);
      for (auto k : kAllAttackerKinds) {
        const double a = score_attacker(kma.back().get(k), before.traffic, before.truth).mean_l1;
        const double b = score_attacker(kma.back().get(k), after.traffic, after.truth).mean_l1;
        floor_ok = floor_ok && b >= 5e-2;
        if (k == AttackerKind::atk2 || k == AttackerKind::atk2_double) uplift_ok = uplift_ok && b > 2.0 * a;
        kma_rows.push_back({{"client", i}, {"attacker", to_string(k)}, {"pre", a}, {"post", b}});
      }
    }
    record(3, floor_ok, {{"floor", 5e-2}, {"rows", kma_rows}});
    record(4, uplift_ok, {{"required_factor", 2.0}, {"attackers", {"atk2", "atk2_dbl"}}, {"rows", kma_rows}});

    // 5. pseudo-collusion, victim 0, Bob 1, attacker 2
    {
      const CollusionSlots slots{0, 1, 2};
      auto rng = derived_rng(seed, 1102);
      const auto v = intercept(post.encryptors[0], 2000, post.cfg, rng);
      const auto om = pcaom(v.traffic, v.truth, pre.encryptors[1], post.encryptors[2], post.aggregator, post.cfg, rng, slots);
      const auto pd = pcapd(v.traffic, v.truth, ppu.published[1], post.encryptors[2], post.aggregator, post.cfg, rng, slots);
      const auto vp = intercept(pre.encryptors[0], 2000, pre.cfg, rng);
      const auto om_pre = pcaom(vp.traffic, vp.truth, pre.encryptors[1], pre.encryptors[2], pre.aggregator, pre.cfg, rng, slots);
      const double ratio = om_pre.mad / agg_pre.mean_l1;
      record(5, om.mad >= 0.1 && pd.mad >= 0.1 && ratio <= 3.0 && ratio >= 1.0 / 3.0,
             {{"pcaom_post", om.mad}, {"pcapd_post", pd.mad}, {"pcaom_pre", om_pre.mad}, {"pre_over_agg", ratio}});
    }

    // 6. federated utility over three seeds
    {
      bool ok = true;
      json rows = json::array();
      for (std::uint64_t s = 0; s < 3; ++s) {
        log("fl seed " + std::to_string(s));
        FlConfig fc = cfg.fl;
        fc.seed = s;
        const auto data = load_fl_data(fc);
        const auto d = accuracy_delta(fedavg_plain(fc, data), fedavg_hans(fc, data, post));
        ok = ok && std::abs(d.delta) <= 0.02 && d.worst_round_mean_diff <= 0.02;
        auto row = to_json_record(d);
        row["seed"] = s;
        rows.push_back(row);
      }
      record(6, ok, {{"runs", rows}});
    }

    // 7. gradient leakage with and without encryption
    {
      log("dlg");
      const double t0 = clock_s();
      const auto test = load_dataset("mnist", "test", 1);
      const VecD x = test.images.col(0).cast<double>();
      auto prng = derived_rng(cfg.dlg.seed, 410);
      const auto probe = DlgProbe::init(x.size(), 32, 10, prng);
      const auto grads = probe_gradients(probe, x, one_hot(test.labels[0], 10));
      const auto plain = dlg(probe, grads, cfg.dlg, x, test.labels[0]);
      const auto& victim = post.encryptors[0];
      const auto enc = dlg_hans(probe, grads, hans_channel(victim, kma[0].get(AttackerKind::atk1), post.cfg, 1),
                                hans_channel(victim, kma[0].get(AttackerKind::atk2), post.cfg, 2), cfg.dlg, x,
                                test.labels[0]);
      const double secs = clock_s() - t0;
      write_png_grid(fs::path(cache) / "dlg.png", {x, plain.x, enc.via_crack1.x, enc.via_crack2.x}, 28);
      const bool ok = plain.mse <= 0.1 && enc.via_crack1.mse >= 0.5 && enc.via_crack2.mse >= 0.5 && secs <= 300.0;
      record(7, ok,
             {{"plain_mse", plain.mse}, {"crack1_mse", enc.via_crack1.mse}, {"crack2_mse", enc.via_crack2.mse},
              {"seconds", secs}});
    }

    // 8. efficiency shape
    {
      log("bench");
      const auto kg = bench("keygen", {100000, 300000}, post, cfg.bench);
      const auto ea = bench("encrypt_aggregate", {300000}, post, cfg.bench);
      const auto comm = comm_estimate(7027860, post.cfg);
      const double kg_ratio = kg[1].wall_seconds / kg[0].wall_seconds;
      const double comm_err = std::abs(comm.ratio - secfed_reference::kOverheadRatio) / secfed_reference::kOverheadRatio;
      record(8, kg_ratio < 2.0 && ea[0].wall_seconds < 5.0 && comm_err <= 0.1,
             {{"keygen_100k_s", kg[0].wall_seconds},
              {"keygen_300k_s", kg[1].wall_seconds},
              {"keygen_ratio", kg_ratio},
              {"encrypt_aggregate_300k_s", ea[0].wall_seconds},
              {"comm_ratio", comm.ratio},
              {"reference_ratio", secfed_reference::kOverheadRatio},
              {"device", ea[0].device}});
    }
  } catch (const std::exception& e) {
    log(std::string("pipeline aborted: ") + e.what());
    for (int id = 1; id <= 8; ++id) {
      const bool seen = std::any_of(verdicts.begin(), verdicts.end(), [&](const Verdict& v) { return v.id == id; });
      if (!seen) record(id, false, {{"error", e.what()}});
    }
  }

  // 9. determinism, checkpoint round trip, loss tests
  {
    log("determinism");
    auto micro = preset("micro");
    micro.set_seed(seed + 5);
    const auto a = train_hans(micro.ahe, micro.train).bundle;
    const auto b = train_hans(micro.ahe, micro.train).bundle;
    const auto path = fs::path(cache) / "roundtrip.ckpt";
    save_checkpoint(a, path);
    const auto back = load_checkpoint(path).bundle;
    const auto losses = self_dir(argv[0]) / "test_losses";
    const bool have_losses = fs::exists(losses);
    const int loss_rc = have_losses ? std::system((losses.string() + " > " + (fs::path(cache) / "test_losses.log").string() + " 2>&1").c_str()) : -1;
    const bool same_seed = bundle_digest(a) == bundle_digest(b) && bitwise_equal(a, b);
    const bool roundtrip = bundle_digest(back) == bundle_digest(a) && bitwise_equal(a, back);
    record(9, same_seed && roundtrip && loss_rc == 0,
           {{"same_seed_identical", same_seed},
            {"digest", bundle_digest(a)},
            {"roundtrip_identical", roundtrip},
            {"loss_tests", have_losses ? (loss_rc == 0 ? "passed" : "failed") : "binary not found"}});
  }

  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& x, const Verdict& y) { return x.id < y.id; });
  json all = json::array();
  bool every = true;
  for (const auto& v : verdicts) {
    every = every && v.pass;
    json brief = v.detail;
    brief.erase("rows");
    std::cout << "criterion " << v.id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << brief.dump() << '\n';
    all.push_back({{"criterion", v.id}, {"pass", v.pass}, {"detail", v.detail}});
  }
  std::ofstream(fs::path(cache) / "acceptance.json") << all.dump(2) << '\n';
  std::cout << (every ? "all criteria passed" : "some criteria failed") << std::endl;
  return every ? 0 : 1;
}
