// Federated averaging on an MNIST subset, once in the clear and once with
// encrypted uploads, printing per-round accuracy and the aggregation gap.

#include "hanlab/config.hpp"

#include <iostream>

using namespace hanlab;

int main(int argc, char** argv) {
  auto cfg = preset("micro");
  cfg.set_seed(2);
  ModelBundle bundle;
  if (argc > 1) {
    std::cout << "loading " << argv[1] << '\n';
    bundle = load_checkpoint(argv[1]).bundle;
  } else {
    std::cout << "no checkpoint given, training a micro bundle\n";
    bundle = train_hans(cfg.ahe, cfg.train).bundle;
  }

  const auto data = load_fl_data(cfg.fl);
  const auto plain = fedavg_plain(cfg.fl, data);
  const auto hans = fedavg_hans(cfg.fl, data, bundle);
  for (std::size_t r = 0; r < hans.traces.size(); ++r) {
    const auto& t = hans.traces[r];
    std::cout << "round " << r << ": plain acc " << plain.traces[r].accuracy << ", encrypted acc " << t.accuracy
              << ", mean |gap| " << t.diff->mean_l1 << ", clipped " << t.clip_count << '\n';
  }
  const auto d = accuracy_delta(plain, hans);
  std::cout << to_json_record(d).dump(2) << '\n';
}
