#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "eqtrack/checkpoint.hpp"
#include "eqtrack/geometry.hpp"
#include "eqtrack/graph.hpp"
#include "eqtrack/imaging.hpp"
#include "eqtrack/rng.hpp"

namespace eqtrack::model {

using geometry::ModelConfig;
using geometry::Parametrization;

enum class Mode { Train, Infer };

inline constexpr int kCropSize = 32;

// Interpreted view of one track feature container.
struct ContainerView {
  geometry::TrackXYCS track;
  bool enabled = true;
  double activation = 1.0;  // raw latent a (meaningful for n_p = 5)
  int container_index = 0;
};

inline std::vector<ContainerView> container_views(const std::vector<double>& z,
                                                  const ModelConfig& cfg) {
  const int np = cfg.n_p();
  if (static_cast<int>(z.size()) != cfg.n * np)
    throw ShapeMismatch("latent size " + std::to_string(z.size()));
  std::vector<ContainerView> views;
  views.reserve(static_cast<std::size_t>(cfg.n));
  for (int i = 0; i < cfg.n; ++i) {
    const double* c = &z[static_cast<std::size_t>(i) * np];
    ContainerView v;
    v.container_index = i;
    switch (cfg.parametrization) {
      case Parametrization::XYCSA:
        v.track = {c[0], c[1], c[2], c[3]};
        v.activation = c[4];
        v.enabled = c[4] > 0.0;
        break;
      case Parametrization::XYCS:
        v.track = {c[0], c[1], c[2], c[3]};
        break;
      case Parametrization::RCS: {
        geometry::TrackRCS rcs{geometry::rho_from_latent(c[0]), c[1], c[2]};
        v.track = geometry::rcs_to_xycs(rcs);
        break;
      }
    }
    views.push_back(v);
  }
  return views;
}

// The convolutional autoencoder. Container decoding is batch-folded: all n
// containers of all B samples run through the shared single-block decoder as
// one batch of n*B rows (container i occupying rows [i*B, (i+1)*B)).
template <class T>
class Autoencoder {
 public:
  using Var = typename diff::Graph<T>::Var;
  static constexpr const char* kConfigTensorName = "meta.config";

  ModelConfig cfg;
  diff::ParamStore<T> params;

  explicit Autoencoder(const ModelConfig& config = ModelConfig{}) : cfg(config) { declare(); }

  // fan-scaled uniform init for weights; biases and batch-norm state keep
  // their declared values. Deterministic in (seed, parameter index).
  void init_weights(std::uint64_t seed) {
    std::size_t index = 0;
    for (auto& p : params) {
      rng::Stream rs(seed, 0xC0DEull, index++);
      if (!p.trainable || !p.name.ends_with(".w")) continue;
      double fan_in, fan_out;
      if (p.shape.kind == diff::Shape::Kind::P4) {
        fan_in = static_cast<double>(p.shape.d1) * p.shape.d2 * p.shape.d3;
        fan_out = static_cast<double>(p.shape.d0) * p.shape.d2 * p.shape.d3;
      } else {
        fan_in = p.shape.d0;
        fan_out = p.shape.d1;
      }
      const bool tanh_head = p.name == "enc.fc3.w";    // latent head
      const bool linear_out = p.name == "dec.out.w";   // pre-sigmoid map
      const double limit = (tanh_head || linear_out) ? std::sqrt(6.0 / (fan_in + fan_out))
                                                     : std::sqrt(6.0 / fan_in);
      for (auto& v : p.value) v = static_cast<T>(rs.uniform(-limit, limit));
    }
  }

  // images: (1, B, 32, 32) -> latent (B, n*n_p), all values in (-1, 1)
  Var encode(diff::Graph<T>& g, Var images, Mode mode) {
    const diff::Shape& s = g.shape(images);
    if (s.kind != diff::Shape::Kind::P4 || s.d0 != 1 || s.d2 != kCropSize || s.d3 != kCropSize)
      throw ShapeMismatch("encode expects (1, B, 32, 32), got " + s.str());
    Var x = g.coord_concat(images, diff::Region{0, 0, 1, 1});
    x = conv_block(g, x, "enc.conv0", 1, mode);
    x = conv_block(g, x, "enc.conv1", 2, mode);
    x = conv_block(g, x, "enc.conv2", 2, mode);
    x = conv_block(g, x, "enc.conv3", 2, mode);
    x = g.avg_pool2(x);
    x = conv_block(g, x, "enc.conv4", 1, mode);
    x = conv_block(g, x, "enc.conv5", 2, mode);
    x = g.avg_pool2(x);
    x = conv_block(g, x, "enc.conv6", 1, mode);
    x = g.flatten(x);
    x = fc_block(g, x, "enc.fc0", mode);
    x = fc_block(g, x, "enc.fc1", mode);
    x = fc_block(g, x, "enc.fc2", mode);
    x = g.dense(x, g.param(*params.find("enc.fc3.w")), g.param(*params.find("enc.fc3.b")));
    return g.tanh_(x);
  }

  // single decoder block over folded containers: (N, n_p) -> (1, N, size, size),
  // pre-sigmoid
  Var decode_block(diff::Graph<T>& g, Var zfold, const diff::Region& region, Mode mode,
                   int size = kCropSize) {
    Var x = fc_block(g, zfold, "dec.fc0", mode);
    x = g.tile_latent(x, size);
    x = g.coord_concat(x, region);
    x = conv_block(g, x, "dec.conv0", 1, mode);
    x = conv_block(g, x, "dec.conv1", 1, mode);
    x = conv_block(g, x, "dec.conv2", 1, mode);
    x = conv_block(g, x, "dec.conv3", 1, mode);
    x = conv_block(g, x, "dec.conv4", 1, mode);
    return g.conv2d(x, g.param(*params.find("dec.out.w")), g.param(*params.find("dec.out.b")), 1);
  }

  // z: (B, n*n_p) -> sigmoid(max over containers), (1, B, size, size)
  Var decode(diff::Graph<T>& g, Var z, const diff::Region& region, Mode mode,
             int size = kCropSize) {
    const int B = g.shape(z).d0;
    Var folded = g.fold_containers(z, cfg.n);
    Var maps = decode_block(g, folded, region, mode, size);
    std::vector<Var> blocks;
    blocks.reserve(static_cast<std::size_t>(cfg.n));
    for (int i = 0; i < cfg.n; ++i) blocks.push_back(g.slice_batch(maps, i * B, B));
    return g.sigmoid(g.max_merge(blocks));
  }

  // encoder inference on image crops; returns one latent vector per crop
  std::vector<std::vector<double>> encode_images(const std::vector<imaging::GrayImage>& crops,
                                                 Mode mode = Mode::Infer) {
    if (crops.empty()) return {};
    const int B = static_cast<int>(crops.size());
    diff::Graph<T> g;
    Var in = g.constant(diff::Shape::p4(1, B, kCropSize, kCropSize));
    T* buf = g.mutable_value(in);
    for (int b = 0; b < B; ++b) {
      if (crops[static_cast<std::size_t>(b)].width != kCropSize ||
          crops[static_cast<std::size_t>(b)].height != kCropSize)
        throw ShapeMismatch("encode_images expects 32x32 crops");
      for (int k = 0; k < kCropSize * kCropSize; ++k)
        buf[static_cast<std::size_t>(b) * kCropSize * kCropSize + k] =
            static_cast<T>(crops[static_cast<std::size_t>(b)].data[static_cast<std::size_t>(k)]);
    }
    Var z = encode(g, in, mode);
    std::vector<std::vector<double>> out(static_cast<std::size_t>(B));
    const T* zv = g.value(z);
    const int L = cfg.latent_size();
    for (int b = 0; b < B; ++b) {
      out[static_cast<std::size_t>(b)].resize(static_cast<std::size_t>(L));
      for (int k = 0; k < L; ++k)
        out[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)] =
            static_cast<double>(zv[static_cast<std::size_t>(b) * L + k]);
    }
    return out;
  }

  // decoder inference for explicit container values (sweeps, overlays)
  std::vector<imaging::GrayImage> decode_containers(const std::vector<std::vector<double>>& zs,
                                                    const diff::Region& region, int size,
                                                    bool apply_sigmoid) {
    if (zs.empty()) return {};
    const int N = static_cast<int>(zs.size());
    const int np = cfg.n_p();
    diff::Graph<T> g;
    Var in = g.constant(diff::Shape::mat(N, np));
    T* buf = g.mutable_value(in);
    for (int r = 0; r < N; ++r) {
      if (static_cast<int>(zs[static_cast<std::size_t>(r)].size()) != np)
        throw ShapeMismatch("container length");
      for (int k = 0; k < np; ++k)
        buf[static_cast<std::size_t>(r) * np + k] =
            static_cast<T>(zs[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)]);
    }
    Var maps = decode_block(g, in, region, Mode::Infer, size);
    std::vector<imaging::GrayImage> out;
    const T* mv = g.value(maps);
    for (int r = 0; r < N; ++r) {
      imaging::GrayImage img(size, size);
      for (int k = 0; k < size * size; ++k) {
        double v = static_cast<double>(mv[static_cast<std::size_t>(r) * size * size + k]);
        if (apply_sigmoid) v = 1.0 / (1.0 + std::exp(-v));
        img.data[static_cast<std::size_t>(k)] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      out.push_back(std::move(img));
    }
    return out;
  }

 private:
  void declare() {
    const int np = cfg.n_p();
    conv_params("enc.conv0", 3, 16, 3);
    conv_params("enc.conv1", 16, 16, 3);
    conv_params("enc.conv2", 16, 64, 3);
    conv_params("enc.conv3", 64, 128, 3);
    conv_params("enc.conv4", 128, 128, 1);
    conv_params("enc.conv5", 128, 512, 3);
    conv_params("enc.conv6", 512, 256, 1);
    fc_params("enc.fc0", 8 * 8 * 256, 1024);
    fc_params("enc.fc1", 1024, 512);
    fc_params("enc.fc2", 512, 128);
    params.add("enc.fc3.w", diff::Shape::mat(128, cfg.n * np));
    params.add("enc.fc3.b", diff::Shape::mat(1, cfg.n * np));

    fc_params("dec.fc0", np, 16);
    conv_params("dec.conv0", 18, 32, 1);
    conv_params("dec.conv1", 32, 32, 1);
    conv_params("dec.conv2", 32, 32, 1);
    conv_params("dec.conv3", 32, 16, 1);
    conv_params("dec.conv4", 16, 16, 3);
    params.add("dec.out.w", diff::Shape::p4(1, 16, 3, 3));
    params.add("dec.out.b", diff::Shape::mat(1, 1));

    auto& meta = params.add(kConfigTensorName, diff::Shape::mat(1, 9), false);
    write_config_record(&meta.value);
  }

  void write_config_record(std::vector<T>* out) const {
    const auto rec = std::vector<double>{
        static_cast<double>(static_cast<int>(cfg.parametrization)),
        static_cast<double>(cfg.n),
        cfg.rotation ? 1.0 : 0.0,
        cfg.scale ? 1.0 : 0.0,
        cfg.skew ? 1.0 : 0.0,
        cfg.translation ? 1.0 : 0.0,
        cfg.line_shift ? 1.0 : 0.0,
        cfg.gamma,
        cfg.epsilon};
    out->resize(rec.size());
    for (std::size_t k = 0; k < rec.size(); ++k) (*out)[k] = static_cast<T>(rec[k]);
  }

  void conv_params(const std::string& base, int cin, int cout, int k) {
    params.add(base + ".w", diff::Shape::p4(cout, cin, k, k));
    params.add(base + ".b", diff::Shape::mat(1, cout));
    bn_params(base + ".bn", cout);
  }
  void fc_params(const std::string& base, int fin, int fout) {
    params.add(base + ".w", diff::Shape::mat(fin, fout));
    params.add(base + ".b", diff::Shape::mat(1, fout));
    bn_params(base + ".bn", fout);
  }
  void bn_params(const std::string& base, int c) {
    auto& g = params.add(base + ".g", diff::Shape::mat(1, c));
    std::fill(g.value.begin(), g.value.end(), T(1));
    params.add(base + ".beta", diff::Shape::mat(1, c));
    params.add(base + ".rm", diff::Shape::mat(1, c), false);
    auto& rv = params.add(base + ".rv", diff::Shape::mat(1, c), false);
    std::fill(rv.value.begin(), rv.value.end(), T(1));
  }

  Var conv_block(diff::Graph<T>& g, Var x, const std::string& base, int dilation, Mode mode) {
    Var y = g.conv2d(x, g.param(*params.find(base + ".w")), g.param(*params.find(base + ".b")),
                     dilation);
    return bn_relu(g, y, base + ".bn", mode);
  }
  Var fc_block(diff::Graph<T>& g, Var x, const std::string& base, Mode mode) {
    Var y = g.dense(x, g.param(*params.find(base + ".w")), g.param(*params.find(base + ".b")));
    return bn_relu(g, y, base + ".bn", mode);
  }
  Var bn_relu(diff::Graph<T>& g, Var x, const std::string& base, Mode mode) {
    Var y = g.batch_norm(x, g.param(*params.find(base + ".g")),
                         g.param(*params.find(base + ".beta")), *params.find(base + ".rm"),
                         *params.find(base + ".rv"), mode == Mode::Train);
    return g.relu(y);
  }
};

// --- model checkpoints -------------------------------------------------------

inline ModelConfig config_from_record(const std::vector<float>& v) {
  if (v.size() != 9) throw IoError("bad model config record");
  ModelConfig cfg;
  cfg.parametrization = static_cast<Parametrization>(static_cast<int>(v[0]));
  cfg.n = static_cast<int>(v[1]);
  cfg.rotation = v[2] != 0;
  cfg.scale = v[3] != 0;
  cfg.skew = v[4] != 0;
  cfg.translation = v[5] != 0;
  cfg.line_shift = v[6] != 0;
  cfg.gamma = v[7];
  cfg.epsilon = v[8];
  return cfg;
}

inline void save_model(const std::filesystem::path& path, Autoencoder<float>& net,
                       const diff::AdamState<float>* opt, std::uint64_t iteration) {
  save_checkpoint(path, net.params, opt, iteration);
}

inline std::unique_ptr<Autoencoder<float>> load_model(const std::filesystem::path& path,
                                                      diff::AdamState<float>* opt = nullptr,
                                                      std::uint64_t* iteration = nullptr) {
  // peek the config record, then rebuild a store with the right shapes
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "EQTK", 4) != 0)
    throw BadMagic("not a checkpoint: " + path.string());
  if (diff::ckpt_detail::take<std::uint32_t>(is) != 1)
    throw IoError("unsupported checkpoint version");
  const auto n_rec = diff::ckpt_detail::take<std::uint32_t>(is);
  ModelConfig cfg;
  bool found = false;
  for (std::uint32_t k = 0; k < n_rec && !found; ++k) {
    auto rec = diff::ckpt_detail::take_record(is);
    if (rec.name == Autoencoder<float>::kConfigTensorName) {
      cfg = config_from_record(rec.data);
      found = true;
    }
  }
  if (!found) throw IoError("checkpoint has no model config record");
  is.close();

  auto net = std::make_unique<Autoencoder<float>>(cfg);
  if (opt) opt->init(net->params);
  const auto iter = diff::load_checkpoint(path, &net->params, opt);
  if (iteration) *iteration = iter;
  return net;
}

}  // namespace eqtrack::model
