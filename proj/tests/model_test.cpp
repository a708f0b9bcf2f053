#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>

#include "eqtrack/model.hpp"
#include "test_util.hpp"

using namespace eqtrack;
using namespace eqtrack::model;
using Catch::Approx;

namespace {

imaging::GrayImage random_crop(std::uint64_t seed) {
  imaging::GrayImage img(kCropSize, kCropSize);
  rng::Stream rs(seed);
  for (auto& v : img.data) v = static_cast<float>(rs.uniform(0.0, 1.0));
  return img;
}

template <class T>
typename diff::Graph<T>::Var encode_crops(Autoencoder<T>& net, diff::Graph<T>& g,
                                          const std::vector<imaging::GrayImage>& crops,
                                          Mode mode) {
  const int B = static_cast<int>(crops.size());
  auto in = g.constant(diff::Shape::p4(1, B, kCropSize, kCropSize));
  T* buf = g.mutable_value(in);
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < kCropSize * kCropSize; ++k)
      buf[b * kCropSize * kCropSize + k] =
          static_cast<T>(crops[static_cast<std::size_t>(b)].data[static_cast<std::size_t>(k)]);
  return net.encode(g, in, mode);
}

}  // namespace

TEST_CASE("encode") {
  Autoencoder<float> net(ModelConfig::preset("AT+TI+A"));
  net.init_weights(7);
  SECTION("latent length and tanh range") {
    auto zs = net.encode_images({random_crop(1), random_crop(2)});
    REQUIRE(zs.size() == 2);
    REQUIRE(zs[0].size() == static_cast<std::size_t>(net.cfg.latent_size()));
    for (const auto& z : zs)
      for (double v : z) {
        REQUIRE(v > -1.0);
        REQUIRE(v < 1.0);
      }
  }
  SECTION("identical crops in one batch give identical latents") {
    auto crop = random_crop(3);
    auto zs = net.encode_images({crop, crop, random_crop(4)});
    CHECK(zs[0] == zs[1]);
    CHECK(zs[0] != zs[2]);
  }
  SECTION("wrong crop size is rejected") {
    imaging::GrayImage bad(16, 16);
    CHECK_THROWS_AS(net.encode_images({bad}), ShapeMismatch);
  }
}

TEST_CASE("decode") {
  SECTION("single container reduces to sigmoid of the block map") {
    ModelConfig cfg = ModelConfig::preset("AT+TI");
    cfg.n = 1;
    Autoencoder<float> net(cfg);
    net.init_weights(11);
    diff::Graph<float> g;
    auto z = g.constant(diff::Shape::mat(2, cfg.n_p()));
    float* buf = g.mutable_value(z);
    rng::Stream rs(12);
    for (int k = 0; k < 2 * cfg.n_p(); ++k) buf[k] = static_cast<float>(rs.uniform(-1, 1));
    auto y = net.decode(g, z, diff::Region{}, Mode::Infer);
    auto folded = g.fold_containers(z, 1);
    auto block = net.decode_block(g, folded, diff::Region{}, Mode::Infer);
    const float* yv = g.value(y);
    const float* bv = g.value(block);
    for (int k = 0; k < 2 * kCropSize * kCropSize; ++k)
      REQUIRE(yv[k] == Approx(1.0 / (1.0 + std::exp(-bv[k]))).margin(1e-5));
  }
  SECTION("permuting containers leaves the output unchanged, pixels in (0,1)") {
    Autoencoder<float> net(ModelConfig::preset("AT+TI"));
    net.init_weights(13);
    const int L = net.cfg.latent_size();
    std::vector<double> z(static_cast<std::size_t>(L));
    rng::Stream rs(14);
    for (auto& v : z) v = rs.uniform(-1, 1);
    std::vector<double> perm = z;
    const int np = net.cfg.n_p();
    // swap containers 0 and 5, 2 and 7
    for (int k = 0; k < np; ++k) {
      std::swap(perm[static_cast<std::size_t>(k)], perm[static_cast<std::size_t>(5 * np + k)]);
      std::swap(perm[static_cast<std::size_t>(2 * np + k)], perm[static_cast<std::size_t>(7 * np + k)]);
    }
    diff::Graph<float> g;
    auto za = g.constant(diff::Shape::mat(1, L));
    auto zb = g.constant(diff::Shape::mat(1, L));
    for (int k = 0; k < L; ++k) {
      g.mutable_value(za)[k] = static_cast<float>(z[static_cast<std::size_t>(k)]);
      g.mutable_value(zb)[k] = static_cast<float>(perm[static_cast<std::size_t>(k)]);
    }
    auto ya = net.decode(g, za, diff::Region{}, Mode::Infer);
    auto yb = net.decode(g, zb, diff::Region{}, Mode::Infer);
    for (int k = 0; k < kCropSize * kCropSize; ++k) {
      REQUIRE(g.value(ya)[k] == g.value(yb)[k]);
      REQUIRE(g.value(ya)[k] > 0.0f);
      REQUIRE(g.value(ya)[k] < 1.0f);
    }
  }
  SECTION("decoding regions produce genuinely different maps") {
    Autoencoder<float> net(ModelConfig::preset("AT+TI"));
    net.init_weights(15);
    std::vector<std::vector<double>> zs = {{0.2, 0.4, 0.9, 0.1}};
    auto near = net.decode_containers(zs, diff::Region{0, 0, 1, 1}, 32, true);
    auto wide = net.decode_containers(zs, diff::Region{-1, -1, 2, 2}, 32, true);
    double diff_acc = 0;
    for (int k = 0; k < 32 * 32; ++k)
      diff_acc += std::abs(near[0].data[static_cast<std::size_t>(k)] -
                           wide[0].data[static_cast<std::size_t>(k)]);
    CHECK(diff_acc > 1e-3);
  }
}

TEST_CASE("container_views") {
  SECTION("rcs scaling endpoints") {
    ModelConfig cfg = ModelConfig::preset("AT,rcs");
    std::vector<double> z(static_cast<std::size_t>(cfg.latent_size()), 0.0);
    z[0] = -1.0;  // r = 0
    z[1] = 1.0;   // theta = 0
    z[2] = 0.0;
    z[3] = 1.0;   // r = sqrt2
    z[4] = 0.0;
    z[5] = 1.0;   // theta = pi/2
    auto views = container_views(z, cfg);
    REQUIRE(views.size() == 8);
    // r = 0, theta = 0: line through the origin with phi = -pi/2
    CHECK(views[0].track.x == Approx(0.0).margin(1e-12));
    CHECK(views[0].track.y == Approx(0.0).margin(1e-12));
    CHECK(geometry::phi_of(views[0].track) == Approx(-geometry::kPi / 2).margin(1e-12));
    // r = sqrt2, theta = pi/2: foot of the perpendicular at (0, sqrt2)
    CHECK(views[1].track.x == Approx(0.0).margin(1e-12));
    CHECK(views[1].track.y == Approx(std::sqrt(2.0)).margin(1e-12));
    CHECK(views[1].enabled);
  }
  SECTION("activation parametrization splits enabled and disabled") {
    ModelConfig cfg = ModelConfig::preset("AT+TI+A");
    std::vector<double> z(static_cast<std::size_t>(cfg.latent_size()), 0.0);
    z[0] = 0.5; z[1] = 0.5; z[2] = 1.0; z[3] = 0.0; z[4] = 0.3;
    z[5 + 4] = -0.2;
    auto views = container_views(z, cfg);
    CHECK(views[0].enabled);
    CHECK(views[0].track.x == 0.5);
    CHECK(geometry::phi_of(views[0].track) == Approx(0.0));
    CHECK_FALSE(views[1].enabled);
  }
  SECTION("wrong latent length") {
    CHECK_THROWS_AS(container_views({0.0, 0.0}, ModelConfig::preset("AT+TI")),
                    ShapeMismatch);
  }
}

TEST_CASE("decoder weight sharing") {
  Autoencoder<float> net(ModelConfig::preset("AT+TI"));
  net.init_weights(21);
  // a single parameter set serves all containers: the store holds exactly one
  // copy of each decoder tensor
  int dec_weights = 0;
  for (const auto& p : net.params)
    if (p.name.rfind("dec.", 0) == 0 && p.name.ends_with(".w")) ++dec_weights;
  CHECK(dec_weights == 7);  // fc0 + five hidden convs + output conv
}

TEST_CASE("model checkpoint round trip") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "eqtrack_model_ckpt";
  fs::create_directories(dir);
  Autoencoder<float> net(ModelConfig::preset("AT,rcs"));
  net.init_weights(31);
  auto crop = random_crop(32);
  const auto before = net.encode_images({crop});
  save_model(dir / "m.eqtk", net, nullptr, 77);

  std::uint64_t iter = 0;
  auto loaded = load_model(dir / "m.eqtk", nullptr, &iter);
  CHECK(iter == 77);
  CHECK(loaded->cfg.parametrization == geometry::Parametrization::RCS);
  CHECK(loaded->cfg.n == 8);
  const auto after = loaded->encode_images({crop});
  REQUIRE(after.size() == 1);
  for (std::size_t k = 0; k < before[0].size(); ++k)
    REQUIRE(after[0][k] == before[0][k]);
}

TEST_CASE("full autoencoder graph gradient check") {
  // double-precision finite differences on probed coordinates of every
  // trainable tensor, through encode -> latent transform -> decode -> loss
  const auto cfg = ModelConfig::preset("AT+TI+A");
  Autoencoder<double> net(cfg);
  net.init_weights(41);
  const int B = 2;
  rng::Stream rs(42);

  std::vector<double> images(static_cast<std::size_t>(B) * kCropSize * kCropSize);
  std::vector<double> target(images.size());
  for (auto& v : images) v = rs.uniform(0.0, 1.0);
  for (auto& v : target) v = rs.uniform(0.0, 1.0);
  std::vector<geometry::TransformParams> xis;
  for (int b = 0; b < B; ++b) xis.push_back(geometry::sample_xi(rs, cfg));
  std::vector<double> rand4(static_cast<std::size_t>(B) * cfg.n * 4);
  for (auto& v : rand4) v = rs.uniform(-1, 1);

  auto build = [&](diff::Graph<double>& g) {
    auto in = g.constant(diff::Shape::p4(1, B, kCropSize, kCropSize), images.data());
    auto tgt = g.constant(diff::Shape::p4(1, B, kCropSize, kCropSize), target.data());
    auto z = net.encode(g, in, Mode::Train);
    auto zp = g.latent_transform(z, cfg, xis, rand4);
    auto y = net.decode(g, zp, diff::Region{}, Mode::Train);
    auto loss = g.loss_image(y, tgt, 1.0, 0.3, 1e4, 300);
    std::vector<int> acts;
    for (int i = 0; i < cfg.n; ++i) acts.push_back(i * cfg.n_p() + 4);
    auto a = g.gather_cols(z, acts);
    return g.add(loss, g.add(g.loss_unif(a, 2.5e5), g.loss_bin(a, 55)));
  };

  // snapshot running stats so repeated train-mode evals stay comparable
  std::vector<std::vector<double>> stats;
  for (auto& p : net.params)
    if (!p.trainable) stats.push_back(p.value);
  auto restore = [&]() {
    std::size_t k = 0;
    for (auto& p : net.params)
      if (!p.trainable) p.value = stats[k++];
  };

  net.params.zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    diff::Graph<double> g;
    auto loss = build(g);
    g.backward(loss);
    for (auto& p : net.params) analytic.push_back(p.grad);
    restore();
  }

  // Central differences on a step cascade: the composite graph is only
  // piecewise smooth (relu and container-max switches), so a fixed step sees
  // kink-crossing noise. Truncation shrinks with h while a wrong backward
  // stays wrong at every h, so the best step of the cascade is decisive.
  std::size_t pi = 0;
  int checked = 0;
  for (auto& p : net.params) {
    if (p.trainable) {
      rng::Stream pick(43, pi);
      for (int probe = 0; probe < 2; ++probe) {
        const std::size_t k = static_cast<std::size_t>(pick.below(p.value.size()));
        const double keep = p.value[k];
        const double ad = analytic[pi][k];
        double best = 1e9;
        for (const double h : {1e-5, 1e-3, 1e-6, 1e-7}) {
          p.value[k] = keep + h;
          diff::Graph<double> g1;
          const double up = g1.scalar_value(build(g1));
          restore();
          p.value[k] = keep - h;
          diff::Graph<double> g2;
          const double dn = g2.scalar_value(build(g2));
          restore();
          p.value[k] = keep;
          const double fd = (up - dn) / (2 * h);
          const double rel = std::abs(ad - fd) / std::max(std::abs(ad) + std::abs(fd), 1.0);
          best = std::min(best, rel);
          if (best < 1e-3) break;
        }
        INFO(p.name << "[" << k << "] analytic " << ad << " best rel " << best);
        REQUIRE(best < 1e-3);
        ++checked;
      }
    }
    ++pi;
  }
  CHECK(checked >= 2 * 40);
}
