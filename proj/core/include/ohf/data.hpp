#pragma once

// Image and dataset plumbing: binary PPM (P6) input/output, the manifest-based
// dataset index with dense identity labels, PK batch sampling, and train-time
// augmentation (horizontal flip, random erasing).

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ohf/errors.hpp"
#include "ohf/rng.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

// ---------------------------------------------------------------------------
// PPM (P6)
// ---------------------------------------------------------------------------

// Encodes [3, H, W] values in [0, 1] as binary PPM bytes.
inline std::vector<unsigned char> encode_ppm(const Tensor<float>& image) {
  if (image.dim() != 3 || image.extent(0) != 3)
    fail_dim("encode_ppm expects an RGB image [3, H, W], got " + shape_str(image.shape()));
  const int H = image.extent(1), W = image.extent(2);
  const std::string header = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(out.size() + static_cast<std::size_t>(3) * H * W);
  const float* v = image.data();
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) {
      const float x = std::min(1.0f, std::max(0.0f, v[c * plane + p]));
      out.push_back(static_cast<unsigned char>(std::lround(x * 255.0f)));
    }
  return out;
}

inline void save_ppm(const std::string& path, const Tensor<float>& image) {
  const auto bytes = encode_ppm(image);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) fail_io("cannot open '" + path + "' for writing");
  const bool ok = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size() && std::fclose(f) == 0;
  if (!ok) fail_io("failed writing '" + path + "'");
}

namespace detail {

// Reads the next PPM header token, skipping whitespace and '#' comments.
inline std::string ppm_token(const std::vector<unsigned char>& buf, std::size_t& pos, const std::string& path) {
  while (pos < buf.size()) {
    if (std::isspace(buf[pos])) {
      ++pos;
    } else if (buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  std::string tok;
  while (pos < buf.size() && !std::isspace(buf[pos])) tok.push_back(static_cast<char>(buf[pos++]));
  if (tok.empty()) fail_data("'" + path + "' is not a valid PPM: unexpected end of header");
  return tok;
}

}  // namespace detail

// Decodes a binary PPM into [3, H, W] with values in [0, 1]. `path` only
// labels error messages for in-memory buffers.
inline Tensor<float> decode_ppm(const std::vector<unsigned char>& buf, const std::string& path = "<memory>") {
  std::size_t pos = 0;
  if (detail::ppm_token(buf, pos, path) != "P6") fail_data("'" + path + "' is not a binary PPM (P6)");
  int W = 0, H = 0, maxval = 0;
  try {
    W = std::stoi(detail::ppm_token(buf, pos, path));
    H = std::stoi(detail::ppm_token(buf, pos, path));
    maxval = std::stoi(detail::ppm_token(buf, pos, path));
  } catch (const std::exception&) {
    fail_data("'" + path + "' has a malformed PPM header");
  }
  if (W <= 0 || H <= 0) fail_data("'" + path + "' has invalid PPM dimensions");
  if (maxval != 255) fail_data("'" + path + "' uses maxval " + std::to_string(maxval) + "; only 255 is supported");
  ++pos;  // single whitespace byte after the header
  const std::size_t want = static_cast<std::size_t>(3) * W * H;
  if (pos + want > buf.size()) fail_data("'" + path + "' is truncated");
  std::vector<float> v(want);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) v[c * plane + p] = static_cast<float>(buf[pos + p * 3 + c]) / 255.0f;
  return Tensor<float>::from_values({3, H, W}, std::move(v));
}

inline Tensor<float> load_ppm(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) fail_data("cannot open image '" + path + "'");
  std::fseek(f, 0, SEEK_END);
  const long size = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<unsigned char> buf(static_cast<std::size_t>(size < 0 ? 0 : size));
  const std::size_t got = buf.empty() ? 0 : std::fread(buf.data(), 1, buf.size(), f);
  std::fclose(f);
  if (got != buf.size()) fail_data("failed reading '" + path + "'");
  return decode_ppm(buf, path);
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct DataItem {
  std::string file;
  int pid = 0;
  int cam = 0;
};

// A fully loaded dataset: manifest rows, raw person/camera ids, dense labels
// (0..num_ids-1 in ascending pid order), and every image in memory.
struct Dataset {
  std::vector<DataItem> items;
  std::vector<int> labels;
  std::vector<std::vector<int>> by_label;  // label -> item indices
  std::vector<Tensor<float>> images;       // [3, H, W] each, all same size
  std::array<float, 3> channel_mean{};     // for erasing fill
  int height = 0, width = 0;

  int num_ids() const { return static_cast<int>(by_label.size()); }
};

// Reads `dir/manifest.tsv` (header line `file\tpid\tcam`) and every image it
// names. All images must share one size.
inline Dataset load_dataset(const std::string& dir) {
  const std::string manifest = dir + "/manifest.tsv";
  std::FILE* f = std::fopen(manifest.c_str(), "rb");
  if (!f) fail_data("cannot open manifest '" + manifest + "'");
  std::string text;
  char chunk[4096];
  std::size_t got;
  while ((got = std::fread(chunk, 1, sizeof chunk, f)) > 0) text.append(chunk, got);
  std::fclose(f);

  Dataset ds;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "file\tpid\tcam")
        fail_data("'" + manifest + "' line 1: expected header 'file\\tpid\\tcam', got '" + line + "'");
      continue;
    }
    const std::size_t t1 = line.find('\t');
    const std::size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) fail_data("'" + manifest + "' line " + std::to_string(line_no) + " is malformed");
    DataItem item;
    item.file = line.substr(0, t1);
    try {
      item.pid = std::stoi(line.substr(t1 + 1, t2 - t1 - 1));
      item.cam = std::stoi(line.substr(t2 + 1));
    } catch (const std::exception&) {
      fail_data("'" + manifest + "' line " + std::to_string(line_no) + " has non-numeric pid/cam");
    }
    ds.items.push_back(std::move(item));
  }
  if (ds.items.empty()) fail_data("'" + manifest + "' lists no images");

  // Dense labels in ascending pid order.
  std::map<int, int> pid_to_label;
  for (const auto& item : ds.items) pid_to_label.emplace(item.pid, 0);
  int next = 0;
  for (auto& [pid, label] : pid_to_label) label = next++;
  ds.by_label.resize(pid_to_label.size());
  ds.labels.reserve(ds.items.size());
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    const int label = pid_to_label[ds.items[i].pid];
    ds.labels.push_back(label);
    ds.by_label[static_cast<std::size_t>(label)].push_back(static_cast<int>(i));
  }

  double sums[3] = {0, 0, 0};
  std::int64_t count = 0;
  for (const auto& item : ds.items) {
    auto img = load_ppm(dir + "/" + item.file);
    if (ds.images.empty()) {
      ds.height = img.extent(1);
      ds.width = img.extent(2);
    } else if (img.extent(1) != ds.height || img.extent(2) != ds.width) {
      fail_data("'" + item.file + "' is " + std::to_string(img.extent(1)) + "x" + std::to_string(img.extent(2)) +
                " but the dataset started at " + std::to_string(ds.height) + "x" + std::to_string(ds.width));
    }
    const std::size_t plane = static_cast<std::size_t>(ds.height) * ds.width;
    for (int c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p) sums[c] += img.values()[c * plane + p];
    count += static_cast<std::int64_t>(plane);
    ds.images.push_back(std::move(img));
  }
  for (int c = 0; c < 3; ++c) ds.channel_mean[static_cast<std::size_t>(c)] = static_cast<float>(sums[c] / count);
  return ds;
}

// ---------------------------------------------------------------------------
// PK sampling
// ---------------------------------------------------------------------------

struct PkBatch {
  std::vector<int> item_indices;
  std::vector<int> labels;
};

// P distinct identities, K images each. Identities with fewer than K images
// are drawn with replacement. Deterministic given the generator state.
inline PkBatch pk_sample(const Dataset& ds, int P, int K, Rng& rng) {
  if (P < 1 || K < 1) fail_config("PK sampling needs positive P and K");
  if (ds.num_ids() < P)
    fail_config("PK sampling needs " + std::to_string(P) + " identities, dataset has " + std::to_string(ds.num_ids()));
  std::vector<int> ids(static_cast<std::size_t>(ds.num_ids()));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  rng.shuffle(ids);

  PkBatch batch;
  batch.item_indices.reserve(static_cast<std::size_t>(P) * K);
  batch.labels.reserve(static_cast<std::size_t>(P) * K);
  for (int p = 0; p < P; ++p) {
    const int label = ids[static_cast<std::size_t>(p)];
    const auto& pool = ds.by_label[static_cast<std::size_t>(label)];
    if (static_cast<int>(pool.size()) >= K) {
      std::vector<int> picks = pool;
      rng.shuffle(picks);
      picks.resize(static_cast<std::size_t>(K));
      for (int idx : picks) {
        batch.item_indices.push_back(idx);
        batch.labels.push_back(label);
      }
    } else {
      for (int k = 0; k < K; ++k) {
        batch.item_indices.push_back(pool[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(pool.size())))]);
        batch.labels.push_back(label);
      }
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
  bool flip = true;
  bool erase = true;
};

// Horizontal flip with probability 1/2, then random erasing with probability
// 1/2: a rectangle with area ratio in [0.02, 0.4] and aspect ratio (h/w) in
// [0.3, 3.33], placed fully inside the image and filled with the per-channel
// dataset mean. Resampled sizes that cannot fit are retried a bounded number
// of times, then erasing is skipped.
inline Tensor<float> augment(const Tensor<float>& image, Rng& rng, const std::array<float, 3>& channel_mean,
                             const AugmentConfig& cfg) {
  const int H = image.extent(1), W = image.extent(2);
  std::vector<float> v(image.values());
  const std::size_t plane = static_cast<std::size_t>(H) * W;

  if (cfg.flip && rng.bernoulli(0.5)) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < H; ++y) {
        float* row = v.data() + c * plane + static_cast<std::size_t>(y) * W;
        std::reverse(row, row + W);
      }
  }

  if (cfg.erase && rng.bernoulli(0.5)) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      const double area = rng.uniform(0.02, 0.4) * H * W;
      const double aspect = rng.uniform(0.3, 3.33);
      const int eh = static_cast<int>(std::lround(std::sqrt(area * aspect)));
      const int ew = static_cast<int>(std::lround(std::sqrt(area / aspect)));
      if (eh < 1 || ew < 1 || eh > H || ew > W) continue;
      const int y0 = rng.uniform_int(H - eh + 1);
      const int x0 = rng.uniform_int(W - ew + 1);
      for (int c = 0; c < 3; ++c)
        for (int y = y0; y < y0 + eh; ++y) {
          float* row = v.data() + c * plane + static_cast<std::size_t>(y) * W;
          std::fill(row + x0, row + x0 + ew, channel_mean[static_cast<std::size_t>(c)]);
        }
      break;
    }
  }
  return Tensor<float>::from_values(image.shape(), std::move(v));
}

// Stacks dataset images (augmented when requested) into one [B, 3, H, W]
// training batch.
inline Tensor<float> make_batch(const Dataset& ds, const std::vector<int>& item_indices, Rng& rng,
                                const AugmentConfig* aug) {
  if (item_indices.empty()) fail_contract("make_batch needs at least one image");
  const int B = static_cast<int>(item_indices.size());
  const std::size_t per = static_cast<std::size_t>(3) * ds.height * ds.width;
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(B) * per);
  for (int idx : item_indices) {
    const auto& img = ds.images[static_cast<std::size_t>(idx)];
    if (aug) {
      auto a = augment(img, rng, ds.channel_mean, *aug);
      out.insert(out.end(), a.values().begin(), a.values().end());
    } else {
      out.insert(out.end(), img.values().begin(), img.values().end());
    }
  }
  return Tensor<float>::from_values({B, 3, ds.height, ds.width}, std::move(out));
}

}  // namespace ohf
