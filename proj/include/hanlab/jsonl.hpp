#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

namespace hanlab {

// Append-only JSON-lines file. A default-constructed sink discards records.
class JsonlSink {
 public:
  JsonlSink() = default;
  explicit JsonlSink(const std::filesystem::path& path) { open(path); }

  void open(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::app);
    if (!out_) throw std::runtime_error("cannot open " + path.string() + " for append");
  }

  bool active() const { return out_.is_open(); }

  void write(const nlohmann::json& record) {
    if (!out_.is_open()) return;
    out_ << record.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline std::string config_hash(const nlohmann::json& cfg) {
  // FNV-1a of the canonical dump; short enough to embed in every record
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : cfg.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace hanlab
