#pragma once

// Procedural pedestrian dataset generator. Each identity gets a stable visual
// signature (head/torso/legs colors plus torso width); each camera applies a
// global illumination scale and color tint; each image adds positional
// jitter, pixel noise, and optionally a gray occluder across the lower half.
// Output: one binary PPM per image, `manifest.tsv` (file, pid, cam), and
// `genlog.tsv` recording every image's signature and occlusion flag.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "ohf/data.hpp"
#include "ohf/errors.hpp"
#include "ohf/rng.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

struct SynthSpec {
  int ids = 8;
  int cams = 2;
  int per_id = 10;  // images per identity per camera
  int height = 60, width = 30;
  double occlude_p = 0.0;
  std::uint64_t seed = 1;
};

namespace detail {

inline std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c; g = x;
  } else if (hp < 2) {
    r = x; g = c;
  } else if (hp < 3) {
    g = c; b = x;
  } else if (hp < 4) {
    g = x; b = c;
  } else if (hp < 5) {
    r = x; b = c;
  } else {
    r = c; b = x;
  }
  const double m = v - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

struct IdentitySignature {
  std::array<float, 3> head, torso, legs;
  double torso_frac = 0.6;  // torso width as a fraction of image width
};

struct CameraProfile {
  double illum = 1.0;
  std::array<double, 3> tint{};
};

inline std::string triple_str(const std::array<float, 3>& c) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f:%.6f:%.6f", c[0], c[1], c[2]);
  return buf;
}

}  // namespace detail

inline std::string synth_file_name(int pid, int cam, int idx) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d_%02d_%04d.ppm", pid, cam, idx);
  return buf;
}

// Generates the dataset into `dir` (created if absent). Returns the number of
// images written. Same spec (including seed) -> byte-identical output.
inline int synth_generate(const SynthSpec& spec, const std::string& dir) {
  if (spec.ids < 1 || spec.cams < 1 || spec.per_id < 1)
    fail_config("synthetic dataset needs at least one identity, camera, and image per identity");
  if (spec.height < 16 || spec.width < 8)
    fail_config("synthetic images must be at least 16x8, got " + std::to_string(spec.height) + "x" +
                std::to_string(spec.width));
  if (spec.occlude_p < 0.0 || spec.occlude_p > 1.0) fail_config("occlusion probability must lie in [0, 1]");

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail_io("cannot create output directory '" + dir + "': " + ec.message());

  Rng rng(spec.seed);

  // Identity signatures: evenly spaced hue bands keep identities separable
  // while the exact colors stay random.
  std::vector<detail::IdentitySignature> sigs;
  sigs.reserve(static_cast<std::size_t>(spec.ids));
  for (int i = 0; i < spec.ids; ++i) {
    detail::IdentitySignature s;
    const double hue = (i + rng.uniform(0.0, 0.5)) / spec.ids;
    s.torso = detail::hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0));
    s.head = detail::hsv_to_rgb(hue + 0.33, rng.uniform(0.6, 0.9), rng.uniform(0.6, 0.95));
    s.legs = detail::hsv_to_rgb(hue + 0.67, rng.uniform(0.6, 0.9), rng.uniform(0.5, 0.9));
    s.torso_frac = rng.uniform(0.45, 0.8);
    sigs.push_back(s);
  }

  std::vector<detail::CameraProfile> cams;
  cams.reserve(static_cast<std::size_t>(spec.cams));
  for (int c = 0; c < spec.cams; ++c) {
    detail::CameraProfile p;
    p.illum = rng.uniform(0.75, 1.1);
    for (auto& t : p.tint) t = rng.uniform(-0.06, 0.06);
    cams.push_back(p);
  }

  const int H = spec.height, W = spec.width;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::string manifest = "file\tpid\tcam\n";
  std::string genlog = "file\tpid\tcam\toccluded\thead\ttorso\tlegs\ttorso_frac\n";
  int written = 0;

  for (int pid = 0; pid < spec.ids; ++pid) {
    const auto& sig = sigs[static_cast<std::size_t>(pid)];
    for (int cam = 0; cam < spec.cams; ++cam) {
      const auto& prof = cams[static_cast<std::size_t>(cam)];
      for (int idx = 0; idx < spec.per_id; ++idx) {
        const int dx = rng.uniform_int(5) - 2;   // horizontal body sway
        const int dy = rng.uniform_int(3) - 1;   // segment boundary jitter
        const bool occluded = rng.bernoulli(spec.occlude_p);
        const int occ_top = occluded ? H / 2 + rng.uniform_int(std::max(1, H / 4)) : H;

        std::vector<float> v(3 * plane, 0.45f);
        const int cx = W / 2 + dx;
        const int head_t = static_cast<int>(0.05 * H) + dy, head_b = static_cast<int>(0.18 * H) + dy;
        const int torso_b = static_cast<int>(0.52 * H) + dy;
        const int legs_b = static_cast<int>(0.94 * H);
        const int head_hw = std::max(1, static_cast<int>(0.15 * W));
        const int torso_hw = std::max(1, static_cast<int>(0.5 * sig.torso_frac * W));
        const int leg_hw = std::max(1, static_cast<int>(0.07 * W));
        const int leg_off = std::max(1, static_cast<int>(0.12 * W));

        auto paint = [&](int y0, int y1, int x_center, int half_w, const std::array<float, 3>& color) {
          for (int y = std::max(0, y0); y < std::min(H, y1); ++y)
            for (int x = std::max(0, x_center - half_w); x < std::min(W, x_center + half_w + 1); ++x)
              for (int c = 0; c < 3; ++c) v[c * plane + static_cast<std::size_t>(y) * W + x] = color[static_cast<std::size_t>(c)];
        };
        paint(head_t, head_b, cx, head_hw, sig.head);
        paint(head_b, torso_b, cx, torso_hw, sig.torso);
        paint(torso_b, legs_b, cx - leg_off, leg_hw, sig.legs);
        paint(torso_b, legs_b, cx + leg_off, leg_hw, sig.legs);

        // Camera transform + sensor noise, then the occluder in front of it.
        for (std::size_t p = 0; p < plane; ++p) {
          const float noise = static_cast<float>(rng.uniform(-0.04, 0.04));
          for (int c = 0; c < 3; ++c) {
            float& px = v[c * plane + p];
            px = std::min(1.0f, std::max(0.0f, static_cast<float>(px * prof.illum + prof.tint[static_cast<std::size_t>(c)] + noise)));
          }
        }
        for (int y = occ_top; y < H; ++y)
          for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c) v[c * plane + static_cast<std::size_t>(y) * W + x] = 0.35f;

        const std::string name = synth_file_name(pid, cam, idx);
        save_ppm(dir + "/" + name, Tensor<float>::from_values({3, H, W}, std::move(v)));
        manifest += name + "\t" + std::to_string(pid) + "\t" + std::to_string(cam) + "\n";
        genlog += name + "\t" + std::to_string(pid) + "\t" + std::to_string(cam) + "\t" + (occluded ? "1" : "0") +
                  "\t" + detail::triple_str(sig.head) + "\t" + detail::triple_str(sig.torso) + "\t" +
                  detail::triple_str(sig.legs) + "\t" + std::to_string(sig.torso_frac) + "\n";
        ++written;
      }
    }
  }

  auto write_text = [&](const std::string& name, const std::string& text) {
    const std::string path = dir + "/" + name;
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) fail_io("cannot open '" + path + "' for writing");
    const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size() && std::fclose(f) == 0;
    if (!ok) fail_io("failed writing '" + path + "'");
  };
  write_text("manifest.tsv", manifest);
  write_text("genlog.tsv", genlog);
  return written;
}

}  // namespace ohf
