#pragma once

// hans-ckpt/1 archives: an uncompressed ustar file holding manifest.json and
// one little-endian float32 blob per layer named <model>/<layer>.f32.
// Headers carry no timestamps or owners so equal weights give equal bytes.

#include "hanlab/ahe.hpp"

#include <json.hpp>
#include <openssl/evp.h>
#include <zlib.h>

#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hanlab {

inline constexpr const char* kCheckpointFormat = "hans-ckpt/1";

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void to_json(nlohmann::json& j, const AheConfig& c) {
  j = {{"psi", c.psi},
       {"ciphertext_len", c.ciphertext_len},
       {"num_clients", c.num_clients},
       {"key_low", c.key_low},
       {"key_high", c.key_high},
       {"hidden_dim", c.hidden_dim},
       {"aggregator_hidden_dim", c.aggregator_hidden_dim},
       {"num_res_blocks", c.num_res_blocks},
       {"conv_channels", c.conv_channels},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, AheConfig& c) {
  AheConfig d;
  c.psi = j.value("psi", d.psi);
  c.ciphertext_len = j.value("ciphertext_len", d.ciphertext_len);
  c.num_clients = j.value("num_clients", d.num_clients);
  c.key_low = j.value("key_low", d.key_low);
  c.key_high = j.value("key_high", d.key_high);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.aggregator_hidden_dim = j.value("aggregator_hidden_dim", d.aggregator_hidden_dim);
  c.num_res_blocks = j.value("num_res_blocks", d.num_res_blocks);
  c.conv_channels = j.value("conv_channels", d.conv_channels);
  c.seed = j.value("seed", d.seed);
}

namespace nn {
inline void to_json(nlohmann::json& j, const Architecture& a) {
  j = {{"input_width", a.input_width},     {"hidden_width", a.hidden_width},   {"output_width", a.output_width},
       {"num_res_blocks", a.num_res_blocks}, {"conv_channels", a.conv_channels}, {"conv_kernel", a.conv_kernel}};
}
inline void from_json(const nlohmann::json& j, Architecture& a) {
  a.input_width = j.at("input_width");
  a.hidden_width = j.at("hidden_width");
  a.output_width = j.at("output_width");
  a.num_res_blocks = j.at("num_res_blocks");
  a.conv_channels = j.at("conv_channels");
  a.conv_kernel = j.at("conv_kernel");
}
}  // namespace nn

inline std::uint32_t crc32_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string sha256_hex(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256: digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::string file_sha256(const std::filesystem::path& p) { return sha256_hex(read_file(p)); }

// Model slot names used inside archives.
inline std::string encryptor_slot(std::size_t i) { return "encryptor" + std::to_string(i); }
inline std::string attacker_slot(std::size_t i, AttackerKind k) {
  return "attacker" + std::to_string(i) + "_" + std::string(to_string(k));
}

namespace detail {

inline std::string floats_le(const float* data, std::size_t n) {
  std::string out(n * 4, '\0');
  for (std::size_t i = 0; i < n; ++i) {
    auto u = std::bit_cast<std::uint32_t>(data[i]);
    for (int b = 0; b < 4; ++b) out[i * 4 + static_cast<std::size_t>(b)] = static_cast<char>((u >> (8 * b)) & 0xFFu);
  }
  return out;
}

inline void floats_from_le(const std::string& bytes, float* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b)
      u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + static_cast<std::size_t>(b)])) << (8 * b);
    data[i] = std::bit_cast<float>(u);
  }
}

inline void put_octal(char* field, std::size_t width, std::uint64_t v) {
  std::snprintf(field, width, "%0*llo", static_cast<int>(width - 1), static_cast<unsigned long long>(v));
}

inline std::string tar_header(const std::string& name, std::size_t size) {
  if (name.size() >= 100) throw CheckpointError("archive member name too long: " + name);
  std::array<char, 512> h{};
  std::memcpy(h.data(), name.data(), name.size());
  put_octal(h.data() + 100, 8, 0644);
  put_octal(h.data() + 108, 8, 0);
  put_octal(h.data() + 116, 8, 0);
  put_octal(h.data() + 124, 12, size);
  put_octal(h.data() + 136, 12, 0);
  std::memset(h.data() + 148, ' ', 8);
  h[156] = '0';
  std::memcpy(h.data() + 257, "ustar", 6);
  std::memcpy(h.data() + 263, "00", 2);
  unsigned sum = 0;
  for (char c : h) sum += static_cast<unsigned char>(c);
  std::snprintf(h.data() + 148, 8, "%06o", sum);
  h[155] = ' ';
  return std::string(h.data(), h.size());
}

inline std::map<std::string, std::string> untar(const std::string& data) {
  std::map<std::string, std::string> members;
  std::size_t pos = 0;
  while (pos + 512 <= data.size()) {
    const char* h = data.data() + pos;
    if (h[0] == '\0') break;
    unsigned stored = static_cast<unsigned>(std::strtoul(std::string(h + 148, 8).c_str(), nullptr, 8));
    unsigned sum = 0;
    for (int i = 0; i < 512; ++i) sum += (i >= 148 && i < 156) ? ' ' : static_cast<unsigned char>(h[i]);
    if (sum != stored) throw CheckpointError("archive header checksum mismatch");
    const std::string name(h, strnlen(h, 100));
    const std::size_t size = std::strtoull(std::string(h + 124, 12).c_str(), nullptr, 8);
    pos += 512;
    if (pos + size > data.size()) throw CheckpointError("archive truncated in " + name);
    members[name] = data.substr(pos, size);
    pos += (size + 511) / 512 * 512;
  }
  return members;
}

template <typename S>
nlohmann::json model_entry(const Model<S>& m) {
  return {{"role", to_string(m.role)},
          {"depth", to_string(m.depth)},
          {"provenance", to_string(m.provenance)},
          {"arch", m.net.architecture()}};
}

}  // namespace detail

// Writes the bundle; extra lands under manifest["extra"] verbatim.
inline void save_checkpoint(const ModelBundle& b, const std::filesystem::path& path,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  std::vector<std::pair<std::string, const Model<float>*>> models;
  for (std::size_t i = 0; i < b.encryptors.size(); ++i) models.emplace_back(encryptor_slot(i), &b.encryptors[i]);
  models.emplace_back("aggregator", &b.aggregator);
  for (std::size_t i = 0; i < b.attackers.size(); ++i)
    for (auto k : kAllAttackerKinds) models.emplace_back(attacker_slot(i, k), &b.attacker(i, k));

  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["cfg"] = b.cfg;
  manifest["extra"] = extra;
  std::string body;
  auto append = [&body](const std::string& name, const std::string& bytes) {
    body += detail::tar_header(name, bytes.size());
    body += bytes;
    body.append((512 - bytes.size() % 512) % 512, '\0');
  };
  std::vector<std::pair<std::string, std::string>> blobs;
  for (const auto& [slot, model] : models) {
    auto entry = detail::model_entry(*model);
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& p : model->net.params()) {
      const std::string name = slot + "/" + p.name + ".f32";
      std::string bytes = detail::floats_le(p.value.data(), static_cast<std::size_t>(p.value.size()));
      layers.push_back({{"name", name},
                        {"rows", p.value.rows()},
                        {"cols", p.value.cols()},
                        {"bytes", bytes.size()},
                        {"crc32", crc32_of(bytes)}});
      blobs.emplace_back(name, std::move(bytes));
    }
    entry["layers"] = std::move(layers);
    manifest["models"][slot] = std::move(entry);
  }
  append("manifest.json", manifest.dump(1) + "\n");
  for (const auto& [name, bytes] : blobs) append(name, bytes);
  body.append(1024, '\0');

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
  ModelBundle bundle;
  nlohmann::json manifest;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto members = detail::untar(read_file(path));
  const auto mit = members.find("manifest.json");
  if (mit == members.end()) throw CheckpointError(path.string() + ": missing manifest.json");
  LoadedCheckpoint out;
  try {
    out.manifest = nlohmann::json::parse(mit->second);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": bad manifest: " + e.what());
  }
  if (out.manifest.value("format", "") != kCheckpointFormat)
    throw CheckpointError(path.string() + ": unsupported format " + out.manifest.value("format", "?"));

  auto& b = out.bundle;
  b.cfg = out.manifest.at("cfg").get<AheConfig>();
  validate(b.cfg);
  auto restore = [&](const std::string& slot, Role role, Depth depth) {
    const auto& entry = out.manifest.at("models").at(slot);
    Model<float> m{role, depth,
                   entry.value("provenance", "original") == "private" ? Provenance::private_model : Provenance::original,
                   nn::Network<float>(entry.at("arch").get<nn::Architecture>())};
    const auto& layers = entry.at("layers");
    if (layers.size() != m.net.params().size()) throw CheckpointError(slot + ": layer count mismatch");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& p = m.net.params()[i];
      const std::string name = layers[i].at("name");
      if (name != slot + "/" + p.name + ".f32") throw CheckpointError(slot + ": unexpected layer " + name);
      const auto bit = members.find(name);
      if (bit == members.end()) throw CheckpointError("missing blob " + name);
      if (crc32_of(bit->second) != layers[i].at("crc32").get<std::uint32_t>())
        throw CheckpointError("crc32 mismatch in " + name);
      if (bit->second.size() != static_cast<std::size_t>(p.value.size()) * 4)
        throw CheckpointError("size mismatch in " + name);
      detail::floats_from_le(bit->second, p.value.data(), static_cast<std::size_t>(p.value.size()));
    }
    return m;
  };
  for (std::size_t i = 0; i < b.cfg.num_clients; ++i)
    b.encryptors.push_back(restore(encryptor_slot(i), Role::encryptor, Depth::standard));
  b.aggregator = restore("aggregator", Role::aggregator, Depth::standard);
  b.attackers.resize(b.cfg.num_clients);
  for (std::size_t i = 0; i < b.cfg.num_clients; ++i)
    for (auto k : kAllAttackerKinds)
      b.attackers[i][static_cast<std::size_t>(k)] =
          restore(attacker_slot(i, k), uses_pk(k) ? Role::attacker_pk : Role::attacker_nopk,
                  is_double(k) ? Depth::doubled : Depth::standard);
  return out;
}

// Combined digest over every model of a bundle.
template <typename S>
std::uint64_t bundle_digest(const ModelBundleT<S>& b) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  };
  for (const auto& e : b.encryptors) mix(e.net.digest());
  mix(b.aggregator.net.digest());
  for (const auto& a : b.attackers)
    for (const auto& m : a) mix(m.net.digest());
  return h;
}

}  // namespace hanlab
