#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "eqtrack/adam.hpp"
#include "eqtrack/geometry.hpp"
#include "eqtrack/graph.hpp"
#include "eqtrack/imaging.hpp"
#include "eqtrack/model.hpp"
#include "eqtrack/synthgen.hpp"

namespace eqtrack::trainer {

struct TrainConfig {
  geometry::ModelConfig model = geometry::ModelConfig::preset("AT+TI");
  long iterations = 500000;
  int batch = 128;

  long lambda_switch = 100000;  // pure weighted phase before this iteration
  long lambda_step = 5000;      // then one decay factor per this many iterations
  double lambda_factor = 0.9;

  double lr_start = 6e-5;
  double lr_peak = 1e-3;
  long lr_warmup = 2000;
  double lr_decay = 0.88;
  long lr_decay_every = 90000;

  double c0 = 0.3;
  double alpha_sig = 10000.0;
  double alpha_l2 = 300.0;
  double alpha_unif = 2.5e5;
  double alpha_bin = 55.0;

  std::uint64_t seed = 1;
  long checkpoint_every = 10000;
  long log_every = 100;
  long eval_every = 2000;
  int eval_samples = 512;
  bool fixed_windows = false;  // pin one source window per image (overfit runs)
};

inline double lambda_schedule(long l, const TrainConfig& c) {
  if (l < c.lambda_switch) return 1.0;
  const double steps = std::floor(static_cast<double>(l - c.lambda_switch) /
                                  static_cast<double>(c.lambda_step));
  return std::pow(c.lambda_factor, steps);
}
inline double lambda_schedule(long l) { return lambda_schedule(l, TrainConfig{}); }

inline double lr_schedule(long l, const TrainConfig& c) {
  if (l < c.lr_warmup)
    return c.lr_start +
           (c.lr_peak - c.lr_start) * static_cast<double>(l) / static_cast<double>(c.lr_warmup);
  const double steps = std::floor(static_cast<double>(l) / static_cast<double>(c.lr_decay_every));
  return c.lr_peak * std::pow(c.lr_decay, steps);
}
inline double lr_schedule(long l) { return lr_schedule(l, TrainConfig{}); }

// --- scalar loss forms (the graph ops carry the training path) --------------

inline double loss_image(const std::vector<double>& y, const std::vector<double>& target,
                         double lambda, const TrainConfig& c) {
  if (y.size() != target.size()) throw ShapeMismatch("loss_image sizes differ");
  double acc = 0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    const double w =
        lambda * c.alpha_sig * (c.c0 + target[k]) * (c.c0 + target[k]) + (1 - lambda) * c.alpha_l2;
    acc += w * (y[k] - target[k]) * (y[k] - target[k]);
  }
  return acc / static_cast<double>(y.size());
}

// activations: batch rows of n raw values
inline double loss_unif_act(const std::vector<std::vector<double>>& a, const TrainConfig& c) {
  if (c.model.n_p() != 5) throw WrongParametrization("activation loss needs n_p = 5");
  const std::size_t n = a.empty() ? 0 : a[0].size();
  std::vector<double> abar(n, 0.0);
  for (const auto& row : a) {
    if (row.size() != n) throw ShapeMismatch("ragged activation batch");
    for (std::size_t i = 0; i < n; ++i) abar[i] += row[i];
  }
  double mean = 0;
  for (auto& v : abar) {
    v /= static_cast<double>(a.size());
    mean += v;
  }
  mean /= static_cast<double>(n);
  double acc = 0;
  for (double v : abar) acc += (v - mean) * (v - mean);
  return c.alpha_unif * acc / static_cast<double>(n);
}

inline double loss_bin_act(const std::vector<std::vector<double>>& a, const TrainConfig& c) {
  if (c.model.n_p() != 5) throw WrongParametrization("activation loss needs n_p = 5");
  double acc = 0;
  std::size_t count = 0;
  for (const auto& row : a)
    for (double v : row) {
      acc += 1.0 - v * v;
      ++count;
    }
  return c.alpha_bin * acc / static_cast<double>(count);
}

// --- training data -----------------------------------------------------------

inline constexpr int kWindow = 96;
inline constexpr int kCropOrigin = 48;  // window pixel of the crop's lower-left corner

// In-memory byte cache of a generated dataset.
class TrainData {
 public:
  explicit TrainData(const std::filesystem::path& dir) {
    manifest_ = synthgen::load_manifest(dir);
    const long n = manifest_.count;
    images_.reserve(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) {
      auto img = synthgen::load_image(dir, i);
      if (i == 0) side_ = img.width;
      if (img.width != side_ || img.height != side_)
        throw IoError("dataset images must share one size");
      std::vector<unsigned char> bytes(img.data.size());
      for (std::size_t k = 0; k < bytes.size(); ++k)
        bytes[k] = static_cast<unsigned char>(std::lround(img.data[k] * 255.0f));
      images_.push_back(std::move(bytes));
    }
  }

  long size() const { return static_cast<long>(images_.size()); }
  int side() const { return side_; }
  const synthgen::DatasetManifest& manifest() const { return manifest_; }

  // 96x96 window with its lower-left corner at (col, row), math orientation
  imaging::GrayImage window(long image, int col, int row) const {
    if (side_ < kWindow) throw SourceTooSmall("dataset images smaller than the sample window");
    imaging::GrayImage out(kWindow, kWindow);
    const auto& bytes = images_[static_cast<std::size_t>(image)];
    for (int i = 0; i < kWindow; ++i) {
      const int src_row_from_top = side_ - 1 - (row + i);
      const unsigned char* src =
          bytes.data() + static_cast<std::size_t>(src_row_from_top) * side_ + col;
      float* dst = out.data.data() + static_cast<std::size_t>(kWindow - 1 - i) * kWindow;
      for (int j = 0; j < kWindow; ++j) dst[j] = src[j] / 255.0f;
    }
    return out;
  }

 private:
  synthgen::DatasetManifest manifest_;
  std::vector<std::vector<unsigned char>> images_;
  int side_ = 0;
};

struct TrainSample {
  imaging::GrayImage input_crop;   // network input
  imaging::GrayImage target_crop;  // coherently transformed target
  geometry::TransformParams xi;
  std::vector<double> rand4;  // disabled-container draws (activation models)
};

namespace tags {
inline constexpr std::uint64_t kSample = 0x5A01;
inline constexpr std::uint64_t kWindowPick = 0x5A02;
inline constexpr std::uint64_t kEval = 0x5A03;
}  // namespace tags

// One training sample: a random 96x96 window, the 32x32 crop above its
// center-origin, and the same window warped with a fresh xi then cropped.
// All randomness is keyed by (seed, iteration, slot).
inline TrainSample make_sample(const TrainData& data, const geometry::ModelConfig& cfg,
                               std::uint64_t seed, std::uint64_t iter, std::uint64_t slot,
                               bool fixed_windows) {
  rng::Stream rs(seed, tags::kSample, iter, slot);
  const long image = static_cast<long>(rs.below(static_cast<std::uint64_t>(data.size())));
  const int span = data.side() - kWindow;
  int col, row;
  if (fixed_windows) {
    rng::Stream ws(seed, tags::kWindowPick, static_cast<std::uint64_t>(image));
    col = static_cast<int>(ws.below(static_cast<std::uint64_t>(span + 1)));
    row = static_cast<int>(ws.below(static_cast<std::uint64_t>(span + 1)));
    rs.below(1);  // keep the draw count of the shared stream fixed
    rs.below(1);
  } else {
    col = static_cast<int>(rs.below(static_cast<std::uint64_t>(span + 1)));
    row = static_cast<int>(rs.below(static_cast<std::uint64_t>(span + 1)));
  }
  TrainSample s;
  auto window = data.window(image, col, row);
  s.xi = geometry::sample_xi(rs, cfg);
  if (cfg.has_activation()) {
    s.rand4.resize(static_cast<std::size_t>(cfg.n) * 4);
    for (auto& v : s.rand4) v = rs.uniform(-1.0, 1.0);
  }
  s.input_crop = imaging::crop(window, {kCropOrigin, kCropOrigin, model::kCropSize});
  auto warped = imaging::warp_affine(window, geometry::affine_matrix(s.xi, cfg), kCropOrigin,
                                     kCropOrigin, model::kCropSize);
  s.target_crop = imaging::crop(warped, {kCropOrigin, kCropOrigin, model::kCropSize});
  return s;
}

struct StepResult {
  double total = 0, image = 0, unif = 0, bin = 0;
};

namespace detail {

inline std::vector<int> activation_columns(const geometry::ModelConfig& cfg) {
  std::vector<int> cols;
  for (int i = 0; i < cfg.n; ++i) cols.push_back(i * cfg.n_p() + 4);
  return cols;
}

template <class G, class Net>
StepResult build_losses(G& g, Net& net, const std::vector<TrainSample>& batch, double lambda,
                        const TrainConfig& c, model::Mode mode, typename G::Var* loss_out) {
  const int B = static_cast<int>(batch.size());
  const int px = model::kCropSize * model::kCropSize;
  auto in = g.constant(diff::Shape::p4(1, B, model::kCropSize, model::kCropSize));
  auto tgt = g.constant(diff::Shape::p4(1, B, model::kCropSize, model::kCropSize));
  std::vector<geometry::TransformParams> xis;
  std::vector<double> rand4;
  for (int b = 0; b < B; ++b) {
    const auto& s = batch[static_cast<std::size_t>(b)];
    for (int k = 0; k < px; ++k) {
      g.mutable_value(in)[static_cast<std::size_t>(b) * px + k] = s.input_crop.data[static_cast<std::size_t>(k)];
      g.mutable_value(tgt)[static_cast<std::size_t>(b) * px + k] = s.target_crop.data[static_cast<std::size_t>(k)];
    }
    xis.push_back(s.xi);
    rand4.insert(rand4.end(), s.rand4.begin(), s.rand4.end());
  }
  auto z = net.encode(g, in, mode);
  auto zp = g.latent_transform(z, net.cfg, xis, rand4);
  auto y = net.decode(g, zp, diff::Region{}, mode);
  auto loss = g.loss_image(y, tgt, lambda, c.c0, c.alpha_sig, c.alpha_l2);
  StepResult r;
  r.image = static_cast<double>(g.scalar_value(loss));
  if (net.cfg.has_activation()) {
    auto a = g.gather_cols(z, activation_columns(net.cfg));
    auto lu = g.loss_unif(a, c.alpha_unif);
    auto lb = g.loss_bin(a, c.alpha_bin);
    r.unif = static_cast<double>(g.scalar_value(lu));
    r.bin = static_cast<double>(g.scalar_value(lb));
    loss = g.add(loss, g.add(lu, lb));
  }
  r.total = static_cast<double>(g.scalar_value(loss));
  *loss_out = loss;
  return r;
}

}  // namespace detail

// One optimization step over an assembled batch. Throws NumericFailure when
// the loss stops being finite.
inline StepResult train_step(model::Autoencoder<float>& net, diff::Graph<float>& g,
                             const std::vector<TrainSample>& batch,
                             diff::AdamState<float>& opt, long iteration,
                             const TrainConfig& c) {
  if (static_cast<int>(batch.size()) < 2) throw DegenerateBatch("train_step needs batch >= 2");
  g.reset();
  typename diff::Graph<float>::Var loss = 0;
  const StepResult r = detail::build_losses(g, net, batch, lambda_schedule(iteration, c), c,
                                            model::Mode::Train, &loss);
  if (!std::isfinite(r.total)) throw NumericFailure("non-finite loss at iteration " +
                                                    std::to_string(iteration));
  net.params.zero_grad();
  g.backward(loss);
  opt.step(net.params, lr_schedule(iteration, c));
  return r;
}

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::vector<float> image_loss_history;  // one entry per iteration
  double final_test_loss = 0;
};

// Full training loop: dataset cache, per-iteration keyed sampling, schedules,
// periodic fixed-sample evaluation, CSV log and checkpoints.
inline TrainResult train(const TrainConfig& c, const std::filesystem::path& data_dir,
                         const std::filesystem::path& out_dir,
                         const std::filesystem::path& resume = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  TrainData data(data_dir);

  std::unique_ptr<model::Autoencoder<float>> net;
  diff::AdamState<float> opt;
  std::uint64_t start_iter = 0;
  if (!resume.empty()) {
    net = model::load_model(resume, &opt, &start_iter);
  } else {
    net = std::make_unique<model::Autoencoder<float>>(c.model);
    net->init_weights(c.seed);
    opt.init(net->params);
  }

  // fixed held-out samples with fixed xi draws
  std::vector<TrainSample> eval_set;
  for (int k = 0; k < c.eval_samples; ++k)
    eval_set.push_back(make_sample(data, net->cfg, c.seed, 0, static_cast<std::uint64_t>(k) |
                                   (tags::kEval << 32), false));

  diff::Graph<float> g;
  auto eval_test_loss = [&](long iter) {
    double acc = 0;
    long count = 0;
    const int eb = std::max(2, std::min<int>(64, c.batch));
    for (std::size_t k = 0; k + eb <= eval_set.size(); k += static_cast<std::size_t>(eb)) {
      std::vector<TrainSample> chunk(eval_set.begin() + static_cast<long>(k),
                                     eval_set.begin() + static_cast<long>(k) + eb);
      g.reset();
      typename diff::Graph<float>::Var loss = 0;
      auto r = detail::build_losses(g, *net, chunk, lambda_schedule(iter, c), c,
                                    model::Mode::Infer, &loss);
      acc += r.total;
      ++count;
    }
    return count ? acc / static_cast<double>(count) : 0.0;
  };

  std::ofstream log(out_dir / "log.csv", start_iter ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write training log");
  if (!start_iter) log << "iter,lambda,lr,train_loss,test_loss\n";

  TrainResult result;
  result.image_loss_history.reserve(static_cast<std::size_t>(c.iterations));
  char name[64];

  for (long l = static_cast<long>(start_iter); l < c.iterations; ++l) {
    std::vector<TrainSample> batch;
    batch.reserve(static_cast<std::size_t>(c.batch));
    for (int s = 0; s < c.batch; ++s)
      batch.push_back(make_sample(data, net->cfg, c.seed, static_cast<std::uint64_t>(l),
                                  static_cast<std::uint64_t>(s), c.fixed_windows));
    const StepResult r = train_step(*net, g, batch, opt, l, c);
    result.image_loss_history.push_back(static_cast<float>(r.image));

    const bool eval_now = c.eval_every > 0 && (l + 1) % c.eval_every == 0;
    double test_loss = 0;
    if (eval_now) {
      test_loss = eval_test_loss(l);
      result.final_test_loss = test_loss;
    }
    if (eval_now || c.log_every <= 1 || l % c.log_every == 0 || l + 1 == c.iterations) {
      log << l << ',' << lambda_schedule(l, c) << ',' << lr_schedule(l, c) << ',' << r.total
          << ',';
      if (eval_now) log << test_loss;
      log << '\n';
    }
    const bool ckpt_now =
        (c.checkpoint_every > 0 && (l + 1) % c.checkpoint_every == 0) || l + 1 == c.iterations;
    if (ckpt_now) {
      std::snprintf(name, sizeof(name), "ckpt_%07ld.eqtk", l + 1);
      model::save_model(out_dir / name, *net, &opt, static_cast<std::uint64_t>(l + 1));
      result.final_checkpoint = out_dir / name;
    }
  }
  log.flush();
  return result;
}

}  // namespace eqtrack::trainer
