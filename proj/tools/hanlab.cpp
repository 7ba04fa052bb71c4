#include "hanlab/config.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace hanlab;
using nlohmann::json;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "hanlab_out";
  std::string checkpoint;
};

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class Emitter {
 public:
  Emitter(const Globals& g, const ExperimentConfig& cfg, const std::string& file)
      : hash_(config_hash(json(cfg))), sink_(std::filesystem::path(g.out) / file) {}

  void operator()(json record) {
    record["cfg_hash"] = hash_;
    std::cout << record.dump() << '\n';
    sink_.write(record);
  }

 private:
  std::string hash_;
  JsonlSink sink_;
};

ExperimentConfig resolve_config(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? preset("paper") : load_config(g.config);
  if (g.seed) cfg.set_seed(*g.seed);
  return cfg;
}

LoadedCheckpoint require_checkpoint(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string(what) + " requires --checkpoint");
  return load_checkpoint(path);
}

std::vector<PublicDataset> public_from(const std::string& path) {
  if (path.empty()) throw UsageError("--public <datasets.jsonl> is required");
  return read_public_datasets(path);
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read " + path);
  return json::parse(in);
}

Vec to_vec(const std::vector<float>& v) { return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())); }

std::vector<float> from_vec(const Vec& v) { return {v.data(), v.data() + v.size()}; }

VecD image_at(const ImageSet& s, std::size_t i) {
  if (i >= s.size()) throw UsageError("image index out of range");
  return s.images.col(static_cast<Eigen::Index>(i)).cast<double>();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hanlab: learned aggregatable encryption toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "TOML config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for every module");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--checkpoint", g.checkpoint, "Model checkpoint (hans-ckpt/1)");

  // train
  auto* train = app.add_subcommand("train", "Run the five training stages");
  std::string resume;
  int stop_after = 5;
  train->add_option("--resume", resume, "Stage checkpoint to resume from");
  train->add_option("--stop-after", stop_after, "Last stage to run")->check(CLI::Range(1, 5));

  // assess
  auto* assess = app.add_subcommand("assess", "Train attackers against fixed encryptors");
  std::string original;
  assess->add_option("--original", original, "Original-model checkpoint: use known-model attackers");

  // ppu
  auto* ppu = app.add_subcommand("ppu", "Privacy-preserving update");
  ppu->require_subcommand(1);
  auto* ppu_c = ppu->add_subcommand("cppu", "Collaborative phase");
  auto* ppu_i = ppu->add_subcommand("ippu", "Independent phase");
  std::optional<double> sigma;
  std::string public_path;
  ppu_c->add_option("--sigma", sigma, "Noise std for publications");
  ppu_i->add_option("--public", public_path, "Public datasets written by cppu");

  // attack
  auto* attack = app.add_subcommand("attack", "Adversary suite");
  attack->require_subcommand(1);
  std::size_t client = 0, samples = 2000, image = 0;
  std::string attack_public;
  auto* a_kma = attack->add_subcommand("kma", "Known-model attackers vs a target encryptor");
  auto* a_pcaom = attack->add_subcommand("pcaom", "Pseudo-collusion with Bob's original model");
  auto* a_pcapd = attack->add_subcommand("pcapd", "Pseudo-collusion with Bob's public dataset");
  auto* a_dlg = attack->add_subcommand("dlg", "Gradient leakage on plain gradients");
  auto* a_dlgh = attack->add_subcommand("dlg-hans", "Gradient leakage through encrypted gradients");
  for (auto* s : {a_kma, a_pcaom, a_pcapd, a_dlgh}) s->add_option("--client", client, "Victim slot");
  for (auto* s : {a_kma, a_pcaom, a_dlgh}) s->add_option("--original", original, "Original-model checkpoint")->required();
  for (auto* s : {a_pcaom, a_pcapd, a_kma}) s->add_option("--samples", samples, "Intercepted samples");
  a_pcapd->add_option("--public", attack_public, "Public datasets (JSON-lines)")->required();
  for (auto* s : {a_dlg, a_dlgh}) s->add_option("--image", image, "MNIST test image index");

  // fl
  auto* fl = app.add_subcommand("fl", "Federated averaging runs");
  fl->require_subcommand(1);
  std::string dataset;
  auto* fl_plain = fl->add_subcommand("plain", "Unencrypted baseline");
  auto* fl_hans = fl->add_subcommand("hans", "HANs-encrypted uploads");
  auto* fl_delta = fl->add_subcommand("delta", "Both runs plus the accuracy delta");
  for (auto* s : {fl_plain, fl_hans, fl_delta}) s->add_option("--dataset", dataset, "mnist, fashion_mnist or cifar10");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "Timing and communication estimates");
  std::string op = "encrypt";
  std::vector<std::size_t> batches;
  std::size_t model_size = 7027860, trials = 0;
  bench_cmd->add_option("--op", op, "keygen, encrypt, aggregate, encrypt_aggregate or comm");
  bench_cmd->add_option("--batch", batches, "Batch sizes");
  bench_cmd->add_option("--trials", trials, "Measured trials (>= 5)");
  bench_cmd->add_option("--model-size", model_size, "Parameter count for --op comm");

  // primitives
  auto* kg = app.add_subcommand("keygen", "Generate key pairs");
  std::size_t batch = 1;
  kg->add_option("--batch", batch, "Number of key pairs")->required();
  auto* enc_cmd = app.add_subcommand("encrypt", "Encrypt values with a client's encryptor");
  std::string keys_path;
  std::vector<float> values;
  enc_cmd->add_option("--client", client, "Encryptor slot");
  enc_cmd->add_option("--keys", keys_path, "Keys from `keygen`")->required();
  enc_cmd->add_option("--values", values, "Plaintexts")->required();
  auto* agg_cmd = app.add_subcommand("aggregate", "Aggregate one ciphertext file per client");
  std::vector<std::string> inputs;
  agg_cmd->add_option("--inputs", inputs, "Ciphertext files from `encrypt`, in slot order")->required();
  auto* report = app.add_subcommand("report", "Summarize a JSON-lines report");
  std::string report_in;
  report->add_option("--in", report_in, "JSON-lines file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    ExperimentConfig cfg = resolve_config(g);

    if (*train) {
      Emitter emit(g, cfg, "train.jsonl");
      TrainOptions opts;
      opts.out_dir = g.out;
      opts.resume_from = resume;
      opts.stop_after = stop_after;
      opts.on_stage = [&](const StageReport& r) { emit(summary_json(r)); };
      train_hans(cfg.ahe, cfg.train, opts);
      return 0;
    }

    if (*assess) {
      auto target = require_checkpoint(g.checkpoint, "assess");
      Emitter emit(g, cfg, "assess.jsonl");
      if (original.empty()) {
        auto r = stage3_assess(target.bundle, cfg.train);
        emit(summary_json(r));
        save_checkpoint(target.bundle, std::filesystem::path(g.out) / "assessed.ckpt", {{"stage", 3}});
      } else {
        const auto orig = load_checkpoint(original).bundle;
        auto rng = derived_rng(cfg.kma.seed, 310);
        for (std::size_t i = 0; i < target.bundle.num_clients(); ++i) {
          const auto kma = train_kma_attackers(orig.encryptors.at(i), orig.cfg, cfg.kma);
          const auto t = intercept(target.bundle.encryptors[i], cfg.kma.eval_samples, target.bundle.cfg, rng);
          for (auto k : kAllAttackerKinds)
            emit({{"client", i},
                  {"attacker", to_string(k)},
                  {"target", to_string(target.bundle.encryptors[i].provenance)},
                  {"stats", stats_json(score_attacker(kma.get(k), t.traffic, t.truth))}});
        }
      }
      return 0;
    }

    if (*ppu) {
      if (sigma) cfg.ppu.sigma = cfg.ppu.final_sigma = *sigma;
      validate(cfg.ppu);
      auto loaded = require_checkpoint(g.checkpoint, "ppu");
      Emitter emit(g, cfg, "ppu.jsonl");
      if (*ppu_c) {
        auto res = cppu(loaded.bundle, cfg.ppu);
        JsonlSink pub(std::filesystem::path(g.out) / "public.jsonl");
        for (const auto& d : res.history) write_public_dataset(pub, d);
        save_checkpoint(loaded.bundle, std::filesystem::path(g.out) / "cppu.ckpt", {{"phase", "cppu"}});
        emit({{"phase", "cppu"}, {"aggregation", stats_json(res.report.aggregation)},
              {"encryptor_digests", res.report.encryptor_digests}, {"aggregator_digest", res.report.aggregator_digest}});
      } else {
        const auto pub = public_from(public_path);
        auto r = ippu(loaded.bundle, pub, cfg.ppu);
        save_checkpoint(loaded.bundle, std::filesystem::path(g.out) / "ippu.ckpt", {{"phase", "ippu"}});
        emit({{"phase", "ippu"}, {"aggregation", stats_json(r.aggregation)},
              {"encryptor_digests", r.encryptor_digests}, {"aggregator_digest", r.aggregator_digest}});
      }
      return 0;
    }

    if (*attack) {
      Emitter emit(g, cfg, "attacks.jsonl");
      auto rng = derived_rng(cfg.kma.seed, 320);
      if (*a_dlg) {
        const auto test = load_dataset("mnist", "test", image + 1);
        const VecD x = image_at(test, image);
        auto prng = derived_rng(cfg.dlg.seed, 410);
        const auto probe = DlgProbe::init(x.size(), 32, 10, prng);
        const auto grads = probe_gradients(probe, x, one_hot(test.labels[image], 10));
        const auto r = dlg(probe, grads, cfg.dlg, x, test.labels[image]);
        write_png_grid(std::filesystem::path(g.out) / "dlg.png", {x, r.x}, 28);
        emit(to_json_record("dlg", r));
        return 0;
      }
      if (*a_pcapd) {
        auto target = require_checkpoint(g.checkpoint, "attack pcapd");
        const auto pub = read_public_datasets(attack_public);
        const std::size_t bob = (client + 1) % 3, att = (client + 2) % 3;
        const PublicDataset* bob_pub = nullptr;
        for (const auto& d : pub)
          if (d.client_id() == bob) bob_pub = &d;
        if (!bob_pub) throw UsageError("no public dataset for slot " + std::to_string(bob));
        const auto v = intercept(target.bundle.encryptors.at(client), samples, target.bundle.cfg, rng);
        emit(to_json_record(pcapd(v.traffic, v.truth, *bob_pub, target.bundle.encryptors.at(att),
                                  target.bundle.aggregator, target.bundle.cfg, rng, {client, bob, att})));
        return 0;
      }
      auto target = require_checkpoint(g.checkpoint, "attack");
      const auto orig = load_checkpoint(original).bundle;
      if (*a_pcaom) {
        const std::size_t bob = (client + 1) % 3, att = (client + 2) % 3;
        const auto v = intercept(target.bundle.encryptors.at(client), samples, target.bundle.cfg, rng);
        emit(to_json_record(pcaom(v.traffic, v.truth, orig.encryptors.at(bob), target.bundle.encryptors.at(att),
                                  target.bundle.aggregator, target.bundle.cfg, rng, {client, bob, att})));
        return 0;
      }
      const auto kma = train_kma_attackers(orig.encryptors.at(client), orig.cfg, cfg.kma);
      if (*a_kma) {
        const auto t = intercept(target.bundle.encryptors.at(client), samples, target.bundle.cfg, rng);
        for (auto k : kAllAttackerKinds)
          emit({{"attack", "kma"},
                {"client", client},
                {"attacker", to_string(k)},
                {"stats", stats_json(score_attacker(kma.get(k), t.traffic, t.truth))}});
        return 0;
      }
      const auto test = load_dataset("mnist", "test", image + 1);
      const VecD x = image_at(test, image);
      auto prng = derived_rng(cfg.dlg.seed, 410);
      const auto probe = DlgProbe::init(x.size(), 32, 10, prng);
      const auto grads = probe_gradients(probe, x, one_hot(test.labels[image], 10));
      const auto& victim = target.bundle.encryptors.at(client);
      const auto r = dlg_hans(probe, grads, hans_channel(victim, kma.get(AttackerKind::atk1), target.bundle.cfg, 1),
                              hans_channel(victim, kma.get(AttackerKind::atk2), target.bundle.cfg, 2), cfg.dlg, x,
                              test.labels[image]);
      write_png_grid(std::filesystem::path(g.out) / "dlg_hans.png", {x, r.via_crack1.x, r.via_crack2.x}, 28);
      emit(to_json_record("dlg-hans/crack1", r.via_crack1));
      emit(to_json_record("dlg-hans/crack2", r.via_crack2));
      emit({{"attack", "dlg-hans"}, {"success", r.success}});
      return 0;
    }

    if (*fl) {
      if (!dataset.empty()) {
        cfg.fl.dataset = dataset;
        cfg.fl.arch = arch_for(dataset);
      }
      Emitter emit(g, cfg, "fl.jsonl");
      const auto data = load_fl_data(cfg.fl);
      auto bundle_for_hans = [&]() -> ModelBundle {
        if (!g.checkpoint.empty()) return load_checkpoint(g.checkpoint).bundle;
        std::cerr << "no --checkpoint given; training a bundle with the configured settings\n";
        return train_hans(cfg.ahe, cfg.train).bundle;
      };
      std::optional<FlRun> plain, hans;
      if (*fl_plain || *fl_delta) plain = fedavg_plain(cfg.fl, data);
      if (*fl_hans || *fl_delta) hans = fedavg_hans(cfg.fl, data, bundle_for_hans());
      for (const auto* run : {plain ? &*plain : nullptr, hans ? &*hans : nullptr}) {
        if (!run) continue;
        for (const auto& t : run->traces) emit(to_json_record(t, run->mode));
        emit({{"mode", run->mode}, {"final_accuracy", run->accuracy}});
      }
      if (plain && hans) emit(to_json_record(accuracy_delta(*plain, *hans)));
      return 0;
    }

    if (*bench_cmd) {
      Emitter emit(g, cfg, "bench.jsonl");
      if (op == "comm") {
        emit(to_json_record(comm_estimate(model_size, cfg.ahe)));
        return 0;
      }
      if (trials) cfg.bench.trials = trials;
      if (batches.empty()) batches = {100000, 200000, 300000};
      ModelBundle b;
      if (!g.checkpoint.empty()) {
        b = load_checkpoint(g.checkpoint).bundle;
      } else {
        auto rng = derived_rng(cfg.ahe.seed, 0);
        b = build_models(cfg.ahe, rng);
      }
      for (const auto& r : bench(op, batches, b, cfg.bench)) emit(to_json_record(r));
      return 0;
    }

    if (*kg) {
      if (batch == 0) throw UsageError("--batch must be >= 1");
      auto rng = derived_rng(cfg.ahe.seed, 1000);
      auto [keys, pks] = keygen(batch, cfg.ahe, rng);
      std::cout << json{{"sk_a", from_vec(keys.sk_a)}, {"sk_b", from_vec(keys.sk_b)}, {"pk", from_vec(pks.pk)}}.dump()
                << '\n';
      return 0;
    }

    if (*enc_cmd) {
      auto loaded = require_checkpoint(g.checkpoint, "encrypt");
      const auto k = read_json(keys_path);
      const KeyBatch keys{to_vec(k.at("sk_a").get<std::vector<float>>()), to_vec(k.at("sk_b").get<std::vector<float>>())};
      const auto& b = loaded.bundle;
      const auto c = encrypt(b.encryptors.at(client), PlaintextBatch{to_vec(values)}, keys, b.cfg);
      json cols = json::array();
      for (Eigen::Index i = 0; i < c.c.cols(); ++i) cols.push_back(from_vec(c.c.col(i)));
      std::cout << json{{"client", client}, {"c", cols}, {"pk", from_vec(public_keys(keys).pk)}}.dump() << '\n';
      return 0;
    }

    if (*agg_cmd) {
      auto loaded = require_checkpoint(g.checkpoint, "aggregate");
      std::vector<CiphertextBatch> cts;
      std::vector<PublicKeyBatch> pks;
      for (const auto& path : inputs) {
        const auto j = read_json(path);
        const auto cols = j.at("c").get<std::vector<std::vector<float>>>();
        Mat c(static_cast<Eigen::Index>(loaded.bundle.cfg.ciphertext_len), static_cast<Eigen::Index>(cols.size()));
        for (std::size_t i = 0; i < cols.size(); ++i) {
          if (cols[i].size() != loaded.bundle.cfg.ciphertext_len) throw UsageError(path + ": wrong ciphertext length");
          c.col(static_cast<Eigen::Index>(i)) = to_vec(cols[i]);
        }
        cts.push_back({c});
        pks.push_back({to_vec(j.at("pk").get<std::vector<float>>())});
      }
      const Vec sum = aggregate(loaded.bundle.aggregator, std::span<const CiphertextBatch>(cts),
                                std::span<const PublicKeyBatch>(pks));
      std::cout << json{{"sum", from_vec(sum)}}.dump() << '\n';
      return 0;
    }

    if (*report) {
      std::ifstream in(report_in);
      std::map<std::string, std::size_t> counts;
      std::vector<json> summaries;
      std::string line;
      std::size_t total = 0;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = json::parse(line);
        ++total;
        std::string kind = j.contains("stage") ? "stage " + j["stage"].dump()
                           : j.contains("attack") ? j["attack"].get<std::string>()
                           : j.contains("mode")   ? j["mode"].get<std::string>()
                           : j.contains("op")     ? j["op"].get<std::string>()
                           : j.contains("phase")  ? j["phase"].get<std::string>()
                                                  : "other";
        ++counts[kind];
        if (j.value("summary", false) || j.contains("aggregation") || j.contains("final_accuracy") || j.contains("mad") ||
            j.contains("delta"))
          summaries.push_back(j);
      }
      std::cout << json{{"records", total}, {"by_kind", counts}, {"summaries", summaries}}.dump(2) << '\n';
      return 0;
    }
  } catch (const StageFailure& e) {
    std::cerr << "error: " << e.what() << '\n' << e.diagnostics.dump() << '\n';
    return 2;
  } catch (const NoiseFloorViolation& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n' << app.help();
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
