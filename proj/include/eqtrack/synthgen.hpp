#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "eqtrack/error.hpp"
#include "eqtrack/imaging.hpp"
#include "eqtrack/rng.hpp"

namespace eqtrack::synthgen {

enum class TrackCountDist { Empirical, Uniform };

// Empirical per-image track-count weights for counts 0..5.
inline constexpr std::array<double, 6> kEmpiricalWeights = {0.30, 0.30, 0.20, 0.12, 0.06, 0.02};

// All generation parameters live at the full (pre-downscale) resolution.
struct GenParams {
  double mu = 0.25;         // mean spots per pixel of intersected track length
  double sigma_d = 0.5;     // transverse spot deviation, px
  double rho = 0.003;       // fog spots per px^2
  double spot_sigma = 1.2;  // gaussian spot radius, px
  double amp_lo = 0.6, amp_hi = 1.0;
  int full_size = 128;
  int downscale = 4;
  TrackCountDist track_count_dist = TrackCountDist::Empirical;

  int stored_size() const { return full_size / downscale; }
};

// A line known to intersect the image square; coordinates are normalized to
// [0,1] over the stored (downscaled) image, phi in [0, 2pi).
struct GroundTruthTrack {
  double x = 0, y = 0, phi = 0;
};

struct Spot {
  double x = 0, y = 0;  // math pixel coords at full resolution
  double amp = 1.0;
};

namespace detail {

// Parameter interval of line p + t*u inside [0,size]^2 (slab clipping).
inline bool clip_to_square(double px, double py, double ux, double uy, double size, double* t0,
                           double* t1) {
  double lo = -1e300, hi = 1e300;
  for (int axis = 0; axis < 2; ++axis) {
    const double p = axis ? py : px;
    const double u = axis ? uy : ux;
    if (std::abs(u) < 1e-300) {
      if (p < 0.0 || p > size) return false;
    } else {
      double a = (0.0 - p) / u, b = (size - p) / u;
      if (a > b) std::swap(a, b);
      lo = std::max(lo, a);
      hi = std::min(hi, b);
    }
  }
  *t0 = lo;
  *t1 = hi;
  return hi > lo;
}

}  // namespace detail

// Draw one track: a line through a uniform interior point at a uniform angle,
// with spots strewn along the intersected chord.
inline std::pair<GroundTruthTrack, std::vector<Spot>> sample_track(rng::Stream& rs,
                                                                   const GenParams& gp) {
  const double size = gp.full_size;
  double px = 0, py = 0, phi = 0, t0 = 0, t1 = 0;
  for (int attempt = 0; attempt < 100; ++attempt) {
    px = rs.uniform(0.0, size);
    py = rs.uniform(0.0, size);
    phi = rs.uniform(0.0, 2.0 * geometry::kPi);
    if (detail::clip_to_square(px, py, std::cos(phi), std::sin(phi), size, &t0, &t1) &&
        t1 - t0 > 1e-9)
      break;
  }
  const double ux = std::cos(phi), uy = std::sin(phi);
  const double nx = -uy, ny = ux;
  const long count = rs.poisson(gp.mu * (t1 - t0));
  std::vector<Spot> spots;
  spots.reserve(static_cast<std::size_t>(count));
  for (long k = 0; k < count; ++k) {
    const double t = rs.uniform(t0, t1);
    const double d = gp.sigma_d > 0 ? rs.normal(0.0, gp.sigma_d) : 0.0;
    Spot sp;
    sp.x = px + t * ux + d * nx;
    sp.y = py + t * uy + d * ny;
    sp.amp = rs.uniform(gp.amp_lo, gp.amp_hi);
    spots.push_back(sp);
  }
  GroundTruthTrack gt{px / size, py / size, phi};
  return {gt, spots};
}

// Additive splat of isotropic gaussian spots, clamped to [0,1] at the end.
inline imaging::GrayImage render_spots(const std::vector<Spot>& spots, double spot_sigma,
                                       int canvas) {
  imaging::GrayImage img(canvas, canvas);
  std::vector<double> acc(static_cast<std::size_t>(canvas) * canvas, 0.0);
  const double cutoff = 5.0 * spot_sigma;
  const double inv2s2 = 1.0 / (2.0 * spot_sigma * spot_sigma);
  for (const Spot& sp : spots) {
    const int j0 = std::max(0, static_cast<int>(std::floor(sp.x - cutoff)));
    const int j1 = std::min(canvas - 1, static_cast<int>(std::ceil(sp.x + cutoff)));
    const int i0 = std::max(0, static_cast<int>(std::floor(sp.y - cutoff)));
    const int i1 = std::min(canvas - 1, static_cast<int>(std::ceil(sp.y + cutoff)));
    for (int i = i0; i <= i1; ++i)
      for (int j = j0; j <= j1; ++j) {
        const double dx = j + 0.5 - sp.x, dy = i + 0.5 - sp.y;
        const double r2 = dx * dx + dy * dy;
        if (r2 > cutoff * cutoff) continue;
        acc[static_cast<std::size_t>(canvas - 1 - i) * canvas + j] +=
            sp.amp * std::exp(-r2 * inv2s2);
      }
  }
  for (std::size_t k = 0; k < acc.size(); ++k)
    img.data[k] = static_cast<float>(std::clamp(acc[k], 0.0, 1.0));
  return img;
}

// Tracks plus fog rendered at full resolution, then block-averaged down to
// the stored size. Ground truth is reported in stored-image normalized
// coordinates (identical numbers at both resolutions).
inline std::pair<imaging::GrayImage, std::vector<GroundTruthTrack>> generate_image(
    rng::Stream& rs, int n_tracks, const GenParams& gp) {
  std::vector<Spot> spots;
  std::vector<GroundTruthTrack> gts;
  for (int t = 0; t < n_tracks; ++t) {
    auto [gt, sp] = sample_track(rs, gp);
    gts.push_back(gt);
    spots.insert(spots.end(), sp.begin(), sp.end());
  }
  const double area = static_cast<double>(gp.full_size) * gp.full_size;
  const long fog = rs.poisson(gp.rho * area);
  for (long k = 0; k < fog; ++k) {
    Spot sp;
    sp.x = rs.uniform(0.0, gp.full_size);
    sp.y = rs.uniform(0.0, gp.full_size);
    sp.amp = rs.uniform(gp.amp_lo, gp.amp_hi);
    spots.push_back(sp);
  }
  imaging::GrayImage full = render_spots(spots, gp.spot_sigma, gp.full_size);
  return {imaging::downscale(full, gp.downscale), gts};
}

struct DatasetManifest {
  std::uint64_t seed = 0;
  long count = 0;
  GenParams gen;
  std::vector<int> track_counts;
  int format_version = 1;
};

inline int draw_track_count(rng::Stream& rs, const GenParams& gp, long index, long total) {
  if (gp.track_count_dist == TrackCountDist::Uniform) return static_cast<int>(index % 6);
  const double u = rs.uniform(0.0, 1.0);
  double acc = 0;
  for (int k = 0; k < 6; ++k) {
    acc += kEmpiricalWeights[static_cast<std::size_t>(k)];
    if (u < acc) return k;
  }
  (void)total;
  return 5;
}

namespace detail {

inline nlohmann::json gen_to_json(const GenParams& gp) {
  return nlohmann::json{
      {"mu", gp.mu},
      {"sigma_d", gp.sigma_d},
      {"rho", gp.rho},
      {"spot_sigma", gp.spot_sigma},
      {"amp_lo", gp.amp_lo},
      {"amp_hi", gp.amp_hi},
      {"full_size", gp.full_size},
      {"downscale", gp.downscale},
      {"track_count_dist",
       gp.track_count_dist == TrackCountDist::Uniform ? "uniform" : "empirical"}};
}

inline GenParams gen_from_json(const nlohmann::json& j) {
  GenParams gp;
  gp.mu = j.at("mu").get<double>();
  gp.sigma_d = j.at("sigma_d").get<double>();
  gp.rho = j.at("rho").get<double>();
  gp.spot_sigma = j.at("spot_sigma").get<double>();
  gp.amp_lo = j.at("amp_lo").get<double>();
  gp.amp_hi = j.at("amp_hi").get<double>();
  gp.full_size = j.at("full_size").get<int>();
  gp.downscale = j.at("downscale").get<int>();
  gp.track_count_dist = j.at("track_count_dist").get<std::string>() == "uniform"
                            ? TrackCountDist::Uniform
                            : TrackCountDist::Empirical;
  return gp;
}

}  // namespace detail

inline std::string image_filename(long index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%06ld.pgm", index);
  return buf;
}

// Writes manifest.json, img_%06d.pgm and gt.jsonl. Each image derives its own
// random stream from (seed, index), so generation parallelizes over images
// and regeneration is byte-identical.
inline DatasetManifest generate_dataset(const std::filesystem::path& out_dir, long count,
                                        const GenParams& gp, std::uint64_t seed) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  DatasetManifest man;
  man.seed = seed;
  man.count = count;
  man.gen = gp;
  man.track_counts.resize(static_cast<std::size_t>(count));
  for (long i = 0; i < count; ++i) {
    rng::Stream cs(seed, 0xC0u, static_cast<std::uint64_t>(i));
    man.track_counts[static_cast<std::size_t>(i)] = draw_track_count(cs, gp, i, count);
  }

  std::vector<std::string> gt_lines(static_cast<std::size_t>(count));
  const unsigned workers = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::thread> pool;
  std::atomic<long> next{0};
  auto work = [&]() {
    for (;;) {
      const long i = next.fetch_add(1);
      if (i >= count) return;
      rng::Stream rs(seed, 1, static_cast<std::uint64_t>(i));
      auto [img, gts] = generate_image(rs, man.track_counts[static_cast<std::size_t>(i)], gp);
      imaging::write_pgm(out_dir / image_filename(i), img);
      nlohmann::json tracks = nlohmann::json::array();
      for (const auto& g : gts) tracks.push_back({{"x", g.x}, {"y", g.y}, {"phi", g.phi}});
      nlohmann::json line{{"id", i}, {"tracks", tracks}};
      gt_lines[static_cast<std::size_t>(i)] = line.dump();
    }
  };
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  {
    std::ofstream f(out_dir / "gt.jsonl", std::ios::binary);
    if (!f) throw IoError("cannot write gt.jsonl");
    for (const auto& l : gt_lines) f << l << "\n";
  }
  {
    nlohmann::json j{{"format_version", man.format_version},
                     {"seed", man.seed},
                     {"count", man.count},
                     {"gen", detail::gen_to_json(gp)},
                     {"track_counts", man.track_counts}};
    std::ofstream f(out_dir / "manifest.json", std::ios::binary);
    if (!f) throw IoError("cannot write manifest.json");
    f << j.dump(2) << "\n";
  }
  return man;
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot open manifest.json in " + dir.string());
  nlohmann::json j;
  f >> j;
  DatasetManifest man;
  man.format_version = j.at("format_version").get<int>();
  man.seed = j.at("seed").get<std::uint64_t>();
  man.count = j.at("count").get<long>();
  man.gen = detail::gen_from_json(j.at("gen"));
  man.track_counts = j.at("track_counts").get<std::vector<int>>();
  return man;
}

inline std::vector<std::vector<GroundTruthTrack>> load_ground_truth(
    const std::filesystem::path& dir) {
  std::ifstream f(dir / "gt.jsonl");
  if (!f) throw IoError("cannot open gt.jsonl in " + dir.string());
  std::vector<std::vector<GroundTruthTrack>> all;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    std::vector<GroundTruthTrack> tracks;
    for (const auto& t : j.at("tracks")) {
      GroundTruthTrack g;
      g.x = t.at("x").get<double>();
      g.y = t.at("y").get<double>();
      g.phi = t.at("phi").get<double>();
      tracks.push_back(g);
    }
    all.push_back(std::move(tracks));
  }
  return all;
}

inline imaging::GrayImage load_image(const std::filesystem::path& dir, long index) {
  return imaging::read_pgm(dir / image_filename(index));
}

}  // namespace eqtrack::synthgen
