#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "stp/image_io.hpp"
#include "stp/rng.hpp"
#include "stp/tensor.hpp"

namespace stp {

// ---------------------------------------------------------------------------
// synthetic moving-sprites clips

struct Sprite {
  double x0 = 0, y0 = 0;      // initial center
  double vx = 0, vy = 0;      // px/frame
  double radius = 3;
  bool disc = true;           // disc or axis-aligned square
  std::array<float, 3> color{1, 1, 1};
};

struct SynthParams {
  int size = 32;
  int length = 64;
  int sprites_min = 1;
  int sprites_max = 3;
  double speed_min = 0.3;
  double speed_max = 1.2;
  double radius_min = 2.5;
  double radius_max = 4.5;
  float background = 0.08f;
};

struct VideoClip {
  std::vector<Tensor<float>> frames;  // each 3 x H x W in [0,1]
  double fps_tag = 30.0;
  std::vector<Sprite> sprites;                            // empty for ingested clips
  std::vector<std::vector<std::array<double, 2>>> positions;  // [frame][sprite] centers
  bool has_motion_truth() const { return !positions.empty(); }
  int length() const { return static_cast<int>(frames.size()); }
};

namespace detail {

// Snap to a 1/256 grid so center positions stay exact dyadic rationals; the
// closed-form trajectory is then reproducible and wall-free displacements
// equal k*v exactly in double arithmetic.
inline double snap256(double v) { return std::round(v * 256.0) / 256.0; }

// Triangle-wave fold of an unconstrained coordinate into [lo, hi].
inline double reflect_into(double x, double lo, double hi) {
  const double span = hi - lo;
  const double period = 2.0 * span;
  double y = std::fmod(x - lo, period);
  if (y < 0) y += period;
  return y <= span ? lo + y : lo + (period - y);
}

inline std::array<double, 2> sprite_center(const Sprite& s, int frame, int size) {
  const double lo_x = s.radius, hi_x = size - s.radius;
  const double lo_y = s.radius, hi_y = size - s.radius;
  return {reflect_into(s.x0 + frame * s.vx, lo_x, hi_x),
          reflect_into(s.y0 + frame * s.vy, lo_y, hi_y)};
}

inline const std::array<std::array<float, 3>, 6>& sprite_palette() {
  static const std::array<std::array<float, 3>, 6> palette{{{0.95f, 0.30f, 0.25f},
                                                            {0.25f, 0.85f, 0.35f},
                                                            {0.30f, 0.45f, 0.95f},
                                                            {0.95f, 0.85f, 0.25f},
                                                            {0.85f, 0.35f, 0.90f},
                                                            {0.30f, 0.90f, 0.90f}}};
  return palette;
}

}  // namespace detail

inline Tensor<float> render_sprites(const std::vector<Sprite>& sprites,
                                    const std::vector<std::array<double, 2>>& centers, int size,
                                    float background) {
  std::vector<float> img(static_cast<size_t>(3) * size * size, background);
  for (size_t si = 0; si < sprites.size(); ++si) {
    const Sprite& s = sprites[si];
    const double cx = centers[si][0], cy = centers[si][1];
    const int x_lo = std::max(0, static_cast<int>(std::floor(cx - s.radius)));
    const int x_hi = std::min(size - 1, static_cast<int>(std::ceil(cx + s.radius)));
    const int y_lo = std::max(0, static_cast<int>(std::floor(cy - s.radius)));
    const int y_hi = std::min(size - 1, static_cast<int>(std::ceil(cy + s.radius)));
    for (int y = y_lo; y <= y_hi; ++y)
      for (int x = x_lo; x <= x_hi; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const bool inside = s.disc ? (dx * dx + dy * dy <= s.radius * s.radius)
                                   : (std::abs(dx) <= s.radius && std::abs(dy) <= s.radius);
        if (!inside) continue;
        for (int c = 0; c < 3; ++c)
          img[(static_cast<size_t>(c) * size + y) * size + x] = s.color[static_cast<size_t>(c)];
      }
  }
  return Tensor<float>::from_data({3, size, size}, std::move(img));
}

// Sprites move with constant velocity and reflect at the borders; exact
// per-frame centers are recorded as motion ground truth.
inline VideoClip synth_clip(Rng& rng, const SynthParams& params) {
  if (params.length < 2) throw ValueError("synth_clip: length must be >= 2");
  VideoClip clip;
  const int n = params.sprites_min +
                (params.sprites_max > params.sprites_min
                     ? rng.uniform_int(params.sprites_max - params.sprites_min + 1)
                     : 0);
  for (int i = 0; i < n; ++i) {
    Sprite s;
    s.radius = detail::snap256(rng.uniform(params.radius_min, params.radius_max));
    s.x0 = detail::snap256(rng.uniform(s.radius, params.size - s.radius));
    s.y0 = detail::snap256(rng.uniform(s.radius, params.size - s.radius));
    const double speed = rng.uniform(params.speed_min, params.speed_max);
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    s.vx = detail::snap256(speed * std::cos(angle));
    s.vy = detail::snap256(speed * std::sin(angle));
    s.disc = rng.uniform_int(2) == 0;
    s.color = detail::sprite_palette()[rng.uniform_u64(detail::sprite_palette().size())];
    clip.sprites.push_back(s);
  }
  clip.positions.resize(static_cast<size_t>(params.length));
  clip.frames.reserve(static_cast<size_t>(params.length));
  for (int t = 0; t < params.length; ++t) {
    auto& centers = clip.positions[static_cast<size_t>(t)];
    centers.reserve(clip.sprites.size());
    for (const Sprite& s : clip.sprites) centers.push_back(detail::sprite_center(s, t, params.size));
    clip.frames.push_back(render_sprites(clip.sprites, centers, params.size, params.background));
  }
  return clip;
}

// ---------------------------------------------------------------------------
// pair sampling and augmentation

struct IntervalPolicy {
  bool uniform = false;
  int fixed = 16;
  int lo = 8, hi = 24;

  int draw(Rng& rng) const { return uniform ? lo + rng.uniform_int(hi - lo + 1) : fixed; }
  int max_interval() const { return uniform ? hi : fixed; }

  // "16" or "8-24"
  static IntervalPolicy parse(const std::string& text) {
    IntervalPolicy p;
    const auto dash = text.find('-');
    if (dash == std::string::npos) {
      p.uniform = false;
      p.fixed = std::stoi(text);
    } else {
      p.uniform = true;
      p.lo = std::stoi(text.substr(0, dash));
      p.hi = std::stoi(text.substr(dash + 1));
      if (p.lo > p.hi) throw ConfigError("interval range '" + text + "' is reversed");
    }
    return p;
  }
  std::string to_string() const {
    return uniform ? std::to_string(lo) + "-" + std::to_string(hi) : std::to_string(fixed);
  }
};

struct CropRect {
  int x0 = 0, y0 = 0, w = 0, h = 0;
  bool operator==(const CropRect& o) const = default;
};

struct ClipPair {
  Tensor<float> current, future;
  int interval = 0;
  bool has_motion = false;
  std::array<double, 2> displacement{0, 0};  // sprite 0, (dx, dy) in output px
  CropRect crop;                             // identity until augmented
};

inline ClipPair sample_frame_pair(const VideoClip& clip, const IntervalPolicy& policy, Rng& rng) {
  const int k = policy.draw(rng);
  if (clip.length() <= k) {
    throw ValueError("sample_frame_pair: clip of length " + std::to_string(clip.length()) +
                     " too short for interval " + std::to_string(k));
  }
  const int current = rng.uniform_int(clip.length() - k);
  ClipPair pair;
  pair.current = clip.frames[static_cast<size_t>(current)];
  pair.future = clip.frames[static_cast<size_t>(current + k)];
  pair.interval = k;
  const int size = pair.current.dim(1);
  pair.crop = {0, 0, size, size};
  if (clip.has_motion_truth() && !clip.sprites.empty()) {
    pair.has_motion = true;
    const auto& a = clip.positions[static_cast<size_t>(current)][0];
    const auto& b = clip.positions[static_cast<size_t>(current + k)][0];
    pair.displacement = {b[0] - a[0], b[1] - a[1]};
  }
  return pair;
}

// One crop rectangle (area fraction within `scale`, aspect in [3/4, 4/3],
// log-uniform) applied to both frames, bilinear-resized to out_size. The
// shared rectangle keeps the temporal correspondence intact; the motion
// label is rescaled by the crop->output ratio.
inline ClipPair random_resized_crop_pair(const ClipPair& pair, std::array<double, 2> scale,
                                         int out_size, Rng& rng) {
  if (!(scale[0] > 0.0) || scale[0] > scale[1] || scale[1] > 1.0)
    throw ValueError("random_resized_crop_pair: scale range must be within (0, 1]");
  const int h = pair.current.dim(1), w = pair.current.dim(2);
  CropRect crop{0, 0, w, h};
  const double area = static_cast<double>(w) * h;
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target_area = area * rng.uniform(scale[0], scale[1]);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const int cw = static_cast<int>(std::lround(std::sqrt(target_area * aspect)));
    const int ch = static_cast<int>(std::lround(std::sqrt(target_area / aspect)));
    if (cw < 1 || ch < 1 || cw > w || ch > h) continue;
    crop.x0 = rng.uniform_int(w - cw + 1);
    crop.y0 = rng.uniform_int(h - ch + 1);
    crop.w = cw;
    crop.h = ch;
    break;
  }
  ClipPair out;
  out.current = bilinear_resize(pair.current, crop.x0, crop.y0, crop.w, crop.h, out_size, out_size);
  out.future = bilinear_resize(pair.future, crop.x0, crop.y0, crop.w, crop.h, out_size, out_size);
  out.interval = pair.interval;
  out.crop = crop;
  out.has_motion = pair.has_motion;
  out.displacement = {pair.displacement[0] * out_size / crop.w,
                      pair.displacement[1] * out_size / crop.h};
  return out;
}

// ---------------------------------------------------------------------------
// frame-directory ingestion

inline std::vector<VideoClip> ingest_frames(const std::string& directory) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(directory)) throw IoError("ingest_frames: '" + directory + "' is not a directory");
  std::vector<fs::path> folders;
  for (const auto& entry : fs::directory_iterator(directory))
    if (entry.is_directory()) folders.push_back(entry.path());
  std::sort(folders.begin(), folders.end());
  std::vector<VideoClip> clips;
  for (const auto& folder : folders) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(folder)) {
      const auto ext = entry.path().extension().string();
      if (entry.is_regular_file() && (ext == ".ppm" || ext == ".png")) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.size() < 2) {
      throw IoError("ingest_frames: folder '" + folder.string() + "' has " +
                    std::to_string(files.size()) + " frame(s); need at least 2 to form pairs");
    }
    VideoClip clip;
    for (const auto& file : files) {
      Tensor<float> img = read_image(file.string());
      if (!clip.frames.empty() && img.shape() != clip.frames.front().shape()) {
        throw IoError("ingest_frames: frame '" + file.string() + "' has shape " +
                      shape_str(img.shape()) + ", expected " + shape_str(clip.frames.front().shape()));
      }
      clip.frames.push_back(std::move(img));
    }
    clips.push_back(std::move(clip));
  }
  return clips;
}

inline void export_clip_ppm(const VideoClip& clip, const std::string& folder) {
  std::filesystem::create_directories(folder);
  for (size_t i = 0; i < clip.frames.size(); ++i) {
    char name[16];
    std::snprintf(name, sizeof(name), "%05zu.ppm", i);
    write_ppm(folder + "/" + name, clip.frames[i]);
  }
}

// ---------------------------------------------------------------------------
// pipeline: datasets, channel stats, batches

struct ChannelStats {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> stdev{1, 1, 1};
};

inline ChannelStats compute_channel_stats(const std::vector<VideoClip>& clips) {
  ChannelStats stats;
  std::array<double, 3> sum{0, 0, 0}, sq{0, 0, 0};
  int64_t count = 0;
  for (const auto& clip : clips) {
    for (const auto& frame : clip.frames) {
      const int hw = frame.dim(1) * frame.dim(2);
      for (int c = 0; c < 3; ++c) {
        const float* p = frame.data() + static_cast<size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) {
          sum[static_cast<size_t>(c)] += p[i];
          sq[static_cast<size_t>(c)] += static_cast<double>(p[i]) * p[i];
        }
      }
      count += hw;
    }
  }
  if (count == 0) throw ValueError("compute_channel_stats: no frames");
  for (int c = 0; c < 3; ++c) {
    stats.mean[static_cast<size_t>(c)] = sum[static_cast<size_t>(c)] / static_cast<double>(count);
    const double var = sq[static_cast<size_t>(c)] / static_cast<double>(count) -
                       stats.mean[static_cast<size_t>(c)] * stats.mean[static_cast<size_t>(c)];
    stats.stdev[static_cast<size_t>(c)] = std::sqrt(std::max(var, 1e-8));
  }
  return stats;
}

inline Tensor<float> channel_normalize(const Tensor<float>& image, const ChannelStats& stats) {
  const int c = image.dim(0), hw = image.dim(1) * image.dim(2);
  std::vector<float> out(image.values());
  for (int ch = 0; ch < c; ++ch) {
    const float m = static_cast<float>(stats.mean[static_cast<size_t>(ch)]);
    const float s = static_cast<float>(stats.stdev[static_cast<size_t>(ch)]);
    float* p = out.data() + static_cast<size_t>(ch) * hw;
    for (int i = 0; i < hw; ++i) p[i] = (p[i] - m) / s;
  }
  return Tensor<float>::from_data(image.shape(), std::move(out));
}

// One pre-assembled training pair: channel-normalized model inputs plus the
// raw post-crop frames the regression targets are computed from.
template <typename S>
struct PairExample {
  Tensor<S> input_current, input_future;
  Tensor<S> raw_current, raw_future;
  std::array<double, 2> displacement{0, 0};
  bool has_motion = false;
};

struct DataPipelineConfig {
  IntervalPolicy interval;
  bool crop = true;
  std::array<double, 2> crop_scale{0.8, 1.0};
  int out_size = 32;
};

template <typename S>
Tensor<S> cast_tensor(const Tensor<float>& t) {
  std::vector<S> data(t.values().begin(), t.values().end());
  return Tensor<S>::from_data(t.shape(), std::move(data));
}

template <>
inline Tensor<float> cast_tensor<float>(const Tensor<float>& t) {
  return t;
}

// Deterministic example assembly: all randomness comes from `rng`.
template <typename S = float>
PairExample<S> make_example(const VideoClip& clip, const DataPipelineConfig& cfg,
                            const ChannelStats& stats, Rng& rng) {
  ClipPair pair = sample_frame_pair(clip, cfg.interval, rng);
  if (cfg.crop) pair = random_resized_crop_pair(pair, cfg.crop_scale, cfg.out_size, rng);
  PairExample<S> ex;
  ex.raw_current = cast_tensor<S>(pair.current);
  ex.raw_future = cast_tensor<S>(pair.future);
  ex.input_current = cast_tensor<S>(channel_normalize(pair.current, stats));
  ex.input_future = cast_tensor<S>(channel_normalize(pair.future, stats));
  ex.displacement = pair.displacement;
  ex.has_motion = pair.has_motion;
  return ex;
}

// ---------------------------------------------------------------------------
// regenerable dataset manifest (text: seed + params)

struct SynthManifest {
  uint64_t seed = 0;
  int clips = 500;
  SynthParams params;

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("manifest: cannot open '" + path + "' for writing");
    f << "seed=" << seed << "\n"
      << "clips=" << clips << "\n"
      << "size=" << params.size << "\n"
      << "length=" << params.length << "\n"
      << "sprites_min=" << params.sprites_min << "\n"
      << "sprites_max=" << params.sprites_max << "\n"
      << "speed_min=" << params.speed_min << "\n"
      << "speed_max=" << params.speed_max << "\n"
      << "radius_min=" << params.radius_min << "\n"
      << "radius_max=" << params.radius_max << "\n"
      << "background=" << params.background << "\n";
  }

  static SynthManifest load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("manifest: cannot open '" + path + "'");
    SynthManifest m;
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw IoError("manifest: malformed line '" + line + "'");
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      if (key == "seed") m.seed = std::stoull(value);
      else if (key == "clips") m.clips = std::stoi(value);
      else if (key == "size") m.params.size = std::stoi(value);
      else if (key == "length") m.params.length = std::stoi(value);
      else if (key == "sprites_min") m.params.sprites_min = std::stoi(value);
      else if (key == "sprites_max") m.params.sprites_max = std::stoi(value);
      else if (key == "speed_min") m.params.speed_min = std::stod(value);
      else if (key == "speed_max") m.params.speed_max = std::stod(value);
      else if (key == "radius_min") m.params.radius_min = std::stod(value);
      else if (key == "radius_max") m.params.radius_max = std::stod(value);
      else if (key == "background") m.params.background = std::stof(value);
      else throw IoError("manifest: unknown key '" + key + "'");
    }
    return m;
  }
};

inline std::vector<VideoClip> generate_dataset(const SynthManifest& manifest) {
  std::vector<VideoClip> clips;
  clips.reserve(static_cast<size_t>(manifest.clips));
  for (int i = 0; i < manifest.clips; ++i) {
    Rng rng = Rng(manifest.seed).derive({0x434c4950ull /*CLIP*/, static_cast<uint64_t>(i)});
    clips.push_back(synth_clip(rng, manifest.params));
  }
  return clips;
}

}  // namespace stp
