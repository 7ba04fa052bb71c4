#pragma once

// Small image datasets from local IDX / CIFAR binary archives.

#include "hanlab/checkpoint.hpp"

#include <zlib.h>

#include <cstdlib>
#include <iostream>

#ifndef HANLAB_DEFAULT_DATA_DIR
#define HANLAB_DEFAULT_DATA_DIR "data"
#endif

namespace hanlab {

struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ImageSet {
  std::size_t channels = 1;
  std::size_t side = 28;
  Mat images;  // one column per image, values in [0, 1], channel-major
  std::vector<std::uint8_t> labels;
  std::size_t size() const { return labels.size(); }
};

inline std::filesystem::path data_root() {
  if (const char* env = std::getenv("HANLAB_DATA_DIR"); env && *env) return env;
  return HANLAB_DEFAULT_DATA_DIR;
}

namespace detail {

inline std::string read_gz(const std::filesystem::path& p) {
  gzFile f = gzopen(p.string().c_str(), "rb");
  if (!f) throw DatasetError("cannot open " + p.string());
  std::string out;
  char buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.append(buf, static_cast<std::size_t>(n));
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw DatasetError("corrupt gzip stream in " + p.string());
  return out;
}

inline std::uint32_t be32(const std::string& s, std::size_t off) {
  if (off + 4 > s.size()) throw DatasetError("truncated IDX header");
  const auto* u = reinterpret_cast<const unsigned char*>(s.data() + off);
  return (std::uint32_t{u[0]} << 24) | (std::uint32_t{u[1]} << 16) | (std::uint32_t{u[2]} << 8) | u[3];
}

inline std::string fetch_hint(const std::string& id) {
  if (id == "mnist")
    return "run `python3 tools/prepare_mnist.py <digits_dir> data/mnist` or copy the MNIST IDX .gz archives into "
           "$HANLAB_DATA_DIR/mnist";
  if (id == "fashion_mnist") return "copy the Fashion-MNIST IDX .gz archives into $HANLAB_DATA_DIR/fashion_mnist";
  return "copy the CIFAR-10 binary batches (data_batch_1.bin .. test_batch.bin) into $HANLAB_DATA_DIR/cifar10";
}

// Checks `file` against the SHA256SUMS manifest next to it, if there is one.
inline void verify_sha256(const std::filesystem::path& file) {
  const auto manifest = file.parent_path() / "SHA256SUMS";
  if (!std::filesystem::exists(manifest)) {
    std::cerr << "warning: no SHA256SUMS next to " << file.string() << ", skipping verification\n";
    return;
  }
  std::ifstream in(manifest);
  std::string hash, name;
  while (in >> hash >> name) {
    if (name == file.filename().string()) {
      if (file_sha256(file) != hash) throw DatasetError("SHA-256 mismatch for " + file.string());
      return;
    }
  }
  throw DatasetError(file.filename().string() + " is not listed in " + manifest.string());
}

}  // namespace detail

inline std::string parse_idx(const std::string& bytes, std::uint32_t expect_magic, std::vector<std::size_t>& dims) {
  const auto magic = detail::be32(bytes, 0);
  if (magic != expect_magic) throw DatasetError("unexpected IDX magic");
  const std::size_t nd = magic & 0xff;
  dims.clear();
  std::size_t total = 1;
  for (std::size_t d = 0; d < nd; ++d) {
    dims.push_back(detail::be32(bytes, 4 + 4 * d));
    total *= dims.back();
  }
  const std::size_t off = 4 + 4 * nd;
  if (bytes.size() != off + total) throw DatasetError("IDX payload size does not match its header");
  return bytes.substr(off);
}

// split: "train" or "test"; limit 0 = everything.
inline ImageSet load_idx_dataset(const std::string& id, const std::string& split, std::size_t limit = 0) {
  const auto dir = data_root() / id;
  const std::string prefix = split == "train" ? "train" : "t10k";
  const auto img_path = dir / (prefix + "-images-idx3-ubyte.gz");
  const auto lbl_path = dir / (prefix + "-labels-idx1-ubyte.gz");
  for (const auto& p : {img_path, lbl_path})
    if (!std::filesystem::exists(p)) throw DatasetError("missing " + p.string() + "; " + detail::fetch_hint(id));
  detail::verify_sha256(img_path);
  detail::verify_sha256(lbl_path);
  std::vector<std::size_t> idims, ldims;
  const auto pix = parse_idx(detail::read_gz(img_path), 0x803, idims);
  const auto lab = parse_idx(detail::read_gz(lbl_path), 0x801, ldims);
  if (idims.size() != 3 || ldims.size() != 1 || idims[0] != ldims[0] || idims[1] != idims[2])
    throw DatasetError("inconsistent IDX image/label archives for " + id);
  std::size_t n = idims[0];
  if (limit) n = std::min(n, limit);
  ImageSet s;
  s.channels = 1;
  s.side = idims[1];
  const std::size_t px = s.side * s.side;
  s.images.resize(static_cast<Eigen::Index>(px), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < px; ++k)
      s.images(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) =
          static_cast<unsigned char>(pix[i * px + k]) / 255.0f;
  s.labels.assign(lab.begin(), lab.begin() + static_cast<std::ptrdiff_t>(n));
  return s;
}

inline ImageSet load_cifar10(const std::string& split, std::size_t limit = 0) {
  const auto dir = data_root() / "cifar10";
  std::vector<std::string> files;
  if (split == "train")
    for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
  else
    files.push_back("test_batch.bin");
  constexpr std::size_t rec = 1 + 3 * 32 * 32;
  ImageSet s;
  s.channels = 3;
  s.side = 32;
  std::vector<float> pixels;
  for (const auto& f : files) {
    const auto p = dir / f;
    if (!std::filesystem::exists(p)) throw DatasetError("missing " + p.string() + "; " + detail::fetch_hint("cifar10"));
    detail::verify_sha256(p);
    const auto bytes = read_file(p);
    if (bytes.size() % rec) throw DatasetError("CIFAR batch has a partial record: " + p.string());
    for (std::size_t off = 0; off < bytes.size() && (!limit || s.labels.size() < limit); off += rec) {
      s.labels.push_back(static_cast<std::uint8_t>(bytes[off]));
      for (std::size_t k = 1; k < rec; ++k) pixels.push_back(static_cast<unsigned char>(bytes[off + k]) / 255.0f);
    }
  }
  s.images = Eigen::Map<Mat>(pixels.data(), static_cast<Eigen::Index>(rec - 1), static_cast<Eigen::Index>(s.size()));
  return s;
}

inline ImageSet load_dataset(const std::string& id, const std::string& split, std::size_t limit = 0) {
  if (id == "mnist" || id == "fashion_mnist") return load_idx_dataset(id, split, limit);
  if (id == "cifar10") return load_cifar10(split, limit);
  throw std::invalid_argument("unknown dataset '" + id + "' (expected mnist, fashion_mnist or cifar10)");
}

}  // namespace hanlab
