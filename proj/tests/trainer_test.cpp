#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "eqtrack/trainer.hpp"
#include "test_util.hpp"

using namespace eqtrack;
using namespace eqtrack::trainer;
using Catch::Approx;

namespace {

std::filesystem::path small_dataset() {
  static std::filesystem::path dir = [] {
    auto p = std::filesystem::temp_directory_path() / "eqtrack_trainer_ds";
    if (!std::filesystem::exists(p / "manifest.json")) {
      synthgen::GenParams gp;
      gp.full_size = 512;  // stored 128x128, room for 96x96 windows
      synthgen::generate_dataset(p, 12, gp, 2024);
    }
    return p;
  }();
  return dir;
}

}  // namespace

TEST_CASE("lambda schedule") {
  CHECK(lambda_schedule(0) == 1.0);
  CHECK(lambda_schedule(50000) == 1.0);
  CHECK(lambda_schedule(99999) == 1.0);
  CHECK(lambda_schedule(105000) == 0.9);
  CHECK(lambda_schedule(200000) == std::pow(0.9, 20.0));
  // steps quantize: everything inside a window shares one value
  CHECK(lambda_schedule(104999) == 1.0);
  CHECK(lambda_schedule(109999) == 0.9);
}

TEST_CASE("lr schedule") {
  CHECK(lr_schedule(0) == 6e-5);
  CHECK(lr_schedule(2000) == 1e-3);
  CHECK(lr_schedule(95000) == 8.8e-4);
  CHECK(lr_schedule(1000) == Approx(0.5 * (6e-5 + 1e-3)).epsilon(1e-12));
  CHECK(lr_schedule(89999) == 1e-3);
  CHECK(lr_schedule(180000) == Approx(1e-3 * 0.88 * 0.88).epsilon(1e-12));
}

TEST_CASE("scalar loss forms") {
  TrainConfig c;
  SECTION("image term fixtures") {
    std::vector<double> target(64, 0.0), y(64, 0.1);
    CHECK(loss_image(y, y, 1.0, c) == 0.0);
    // pure L2 phase: 300 * d^2
    CHECK(loss_image(y, target, 0.0, c) == Approx(300 * 0.01).epsilon(1e-12));
    // weighted phase: 10000 * (0.3 + 0)^2 * 0.1^2 = 9
    CHECK(loss_image(y, target, 1.0, c) == Approx(9.0).epsilon(1e-12));
    CHECK_THROWS_AS(loss_image(y, std::vector<double>(32, 0.0), 1.0, c), ShapeMismatch);
  }
  SECTION("activation terms need the five-parameter form") {
    TrainConfig c4;
    c4.model = geometry::ModelConfig::preset("AT+TI");
    CHECK_THROWS_AS(loss_unif_act({{0.0}}, c4), WrongParametrization);
    CHECK_THROWS_AS(loss_bin_act({{0.0}}, c4), WrongParametrization);
  }
  SECTION("uniform-activation fixture") {
    TrainConfig c5;
    c5.model = geometry::ModelConfig::preset("AT+TI+A");
    // two containers with batch means +1 and -1
    CHECK(loss_unif_act({{1, -1}, {1, -1}}, c5) == Approx(2.5e5).epsilon(1e-12));
    CHECK(loss_unif_act({{0.37, 0.37}, {0.37, 0.37}}, c5) == Approx(0.0).margin(1e-9));
    // permutation invariance over containers
    CHECK(loss_unif_act({{-1, 1}, {-1, 1}}, c5) == Approx(2.5e5).epsilon(1e-12));
  }
  SECTION("binary-activation fixture") {
    TrainConfig c5;
    c5.model = geometry::ModelConfig::preset("AT+TI+A");
    CHECK(loss_bin_act({{0, 0}, {0, 0}}, c5) == Approx(55.0).epsilon(1e-12));
    CHECK(loss_bin_act({{1, -1}, {-1, 1}}, c5) == Approx(0.0).margin(1e-9));
  }
}

TEST_CASE("make_sample") {
  TrainData data(small_dataset());
  const auto cfg = geometry::ModelConfig::preset("AT+TI");
  SECTION("identity transform reproduces the input crop") {
    // sample normally, then rebuild the target with identity xi
    auto s = make_sample(data, cfg, 7, 0, 0, false);
    REQUIRE(s.input_crop.width == 32);
    rng::Stream rs(7, tags::kSample, 0, 0);
    const long image = static_cast<long>(rs.below(static_cast<std::uint64_t>(data.size())));
    const int span = data.side() - kWindow;
    const int col = static_cast<int>(rs.below(static_cast<std::uint64_t>(span + 1)));
    const int row = static_cast<int>(rs.below(static_cast<std::uint64_t>(span + 1)));
    auto window = data.window(image, col, row);
    auto ident = imaging::warp_affine(window, geometry::Affine{}, kCropOrigin, kCropOrigin, 32);
    auto crop = imaging::crop(ident, {kCropOrigin, kCropOrigin, 32});
    for (std::size_t k = 0; k < crop.data.size(); ++k)
      REQUIRE(std::abs(crop.data[k] - s.input_crop.data[k]) < 1e-6);
  }
  SECTION("pure translation shifts by whole pixels") {
    rng::Stream rs(9, tags::kSample, 1, 0);
    const long image = static_cast<long>(rs.below(static_cast<std::uint64_t>(data.size())));
    const int span = data.side() - kWindow;
    const int col = static_cast<int>(rs.below(static_cast<std::uint64_t>(span + 1)));
    const int row = static_cast<int>(rs.below(static_cast<std::uint64_t>(span + 1)));
    auto window = data.window(image, col, row);
    geometry::TransformParams xi;
    xi.trans_x = 0.25;  // 8 px
    auto warped = imaging::warp_affine(window, geometry::affine_matrix(xi, cfg), kCropOrigin,
                                       kCropOrigin, 32);
    auto target = imaging::crop(warped, {kCropOrigin, kCropOrigin, 32});
    for (int i = 0; i < 32; ++i)
      for (int j = 0; j < 32; ++j)
        REQUIRE(target.at(j, i) ==
                Approx(window.at(kCropOrigin + j - 8, kCropOrigin + i)).margin(1e-6));
  }
  SECTION("ground-truth ridges follow the transformed lines") {
    // rendered ideal lines must land on bright ridges of the warped target
    auto gts = synthgen::load_ground_truth(small_dataset());
    TrainData d2(small_dataset());
    int tested = 0;
    for (long img = 0; img < d2.size() && tested < 6; ++img) {
      if (gts[static_cast<std::size_t>(img)].empty()) continue;
      rng::Stream rs(11, static_cast<std::uint64_t>(img));
      const int span = d2.side() - kWindow;
      const int col = static_cast<int>(rs.below(static_cast<std::uint64_t>(span + 1)));
      const int row = static_cast<int>(rs.below(static_cast<std::uint64_t>(span + 1)));
      auto window = d2.window(img, col, row);
      auto cfg2 = cfg;
      auto xi = geometry::sample_xi(rs, cfg2);
      auto warped = imaging::warp_affine(window, geometry::affine_matrix(xi, cfg2), kCropOrigin,
                                         kCropOrigin, 32);
      auto target = imaging::crop(warped, {kCropOrigin, kCropOrigin, 32});
      const double img_mean = imaging::mean(target);
      for (const auto& gt : gts[static_cast<std::size_t>(img)]) {
        // stored-image coords -> crop units of the sampled window
        geometry::TrackXYCS line{(gt.x * d2.side() - col - kCropOrigin) / 32.0,
                                 (gt.y * d2.side() - row - kCropOrigin) / 32.0,
                                 std::cos(gt.phi), std::sin(gt.phi)};
        auto moved = geometry::compose(line, xi, cfg2);
        // mean intensity along the landed segment, sampled inside the crop
        double acc = 0;
        int count = 0;
        for (int t = -64; t <= 64; ++t) {
          const double px = moved.x + moved.c * t / 64.0;
          const double py = moved.y + moved.s * t / 64.0;
          if (px < 0.02 || px > 0.98 || py < 0.02 || py > 0.98) continue;
          acc += imaging::sample_bilinear(target, px * 32, py * 32);
          ++count;
        }
        if (count < 16) continue;
        INFO("image " << img << " ridge " << acc / count << " mean " << img_mean);
        CHECK(acc / count > img_mean);
        ++tested;
      }
    }
    REQUIRE(tested >= 3);
  }
}

TEST_CASE("train_step") {
  TrainData data(small_dataset());
  TrainConfig c;
  c.model = geometry::ModelConfig::preset("AT+TI");
  c.batch = 2;
  SECTION("a step at the warmup rate decreases the loss on its own batch") {
    int improved = 0;
    const int trials = 20;
    for (int t = 0; t < trials; ++t) {
      model::Autoencoder<float> net(c.model);
      net.init_weights(static_cast<std::uint64_t>(100 + t));
      diff::AdamState<float> opt;
      opt.init(net.params);
      diff::Graph<float> g;
      std::vector<TrainSample> batch;
      for (int s = 0; s < c.batch; ++s)
        batch.push_back(make_sample(data, c.model, 50 + static_cast<std::uint64_t>(t), 0,
                                    static_cast<std::uint64_t>(s), false));
      auto before = train_step(net, g, batch, opt, 0, c);
      // re-evaluate the same batch with updated weights, no further update
      g.reset();
      typename diff::Graph<float>::Var loss = 0;
      auto after = trainer::detail::build_losses(g, net, batch, lambda_schedule(0, c), c,
                                                 model::Mode::Train, &loss);
      if (after.total < before.total) ++improved;
    }
    INFO("improved " << improved << "/" << trials);
    CHECK(improved >= trials * 8 / 10);
  }
  SECTION("gradients and losses stay finite over random batches") {
    model::Autoencoder<float> net(c.model);
    net.init_weights(3);
    diff::AdamState<float> opt;
    opt.init(net.params);
    diff::Graph<float> g;
    for (long l = 0; l < 40; ++l) {
      std::vector<TrainSample> batch;
      for (int s = 0; s < c.batch; ++s)
        batch.push_back(make_sample(data, c.model, 777, l, static_cast<std::uint64_t>(s), false));
      auto r = train_step(net, g, batch, opt, l, c);
      REQUIRE(std::isfinite(r.total));
      for (const auto& p : net.params)
        for (float v : p.grad) REQUIRE(std::isfinite(v));
    }
  }
  SECTION("black input factors the loss into a weight times mean(Y^2)") {
    model::Autoencoder<float> net(c.model);
    net.init_weights(5);
    std::vector<TrainSample> batch;
    for (int s = 0; s < 2; ++s) {
      TrainSample ts;
      ts.input_crop = imaging::GrayImage(32, 32, 0.0f);
      ts.target_crop = imaging::GrayImage(32, 32, 0.0f);
      rng::Stream rs(20, static_cast<std::uint64_t>(s));
      ts.xi = geometry::sample_xi(rs, c.model);
      batch.push_back(ts);
    }
    diff::Graph<float> g;
    typename diff::Graph<float>::Var loss = 0;
    const double lambda = 0.7;
    auto r = trainer::detail::build_losses(g, net, batch, lambda, c, model::Mode::Train, &loss);
    // with an all-zero target the weight is constant across pixels
    const double weight = lambda * c.alpha_sig * c.c0 * c.c0 + (1 - lambda) * c.alpha_l2;
    // recover mean(Y^2) by re-running with pure L2 coefficients
    diff::Graph<float> g2;
    TrainConfig c2 = c;
    c2.alpha_l2 = 1.0;
    typename diff::Graph<float>::Var loss2 = 0;
    auto r2 = trainer::detail::build_losses(g2, net, batch, 0.0, c2, model::Mode::Train, &loss2);
    CHECK(r.image == Approx(weight * r2.image).epsilon(1e-4));
  }
  SECTION("undersized batch is rejected") {
    model::Autoencoder<float> net(c.model);
    net.init_weights(6);
    diff::AdamState<float> opt;
    opt.init(net.params);
    diff::Graph<float> g;
    std::vector<TrainSample> one;
    one.push_back(make_sample(data, c.model, 1, 0, 0, false));
    CHECK_THROWS_AS(train_step(net, g, one, opt, 0, c), DegenerateBatch);
  }
}

TEST_CASE("train loop") {
  namespace fs = std::filesystem;
  TrainConfig c;
  c.model = geometry::ModelConfig::preset("AT+TI+A");
  c.batch = 2;
  c.iterations = 8;
  c.checkpoint_every = 4;
  c.log_every = 1;
  c.eval_every = 4;
  c.eval_samples = 4;
  c.seed = 31;

  SECTION("resume reproduces the uninterrupted run bitwise") {
    auto full_dir = fs::temp_directory_path() / "eqtrack_train_full";
    auto part_dir = fs::temp_directory_path() / "eqtrack_train_part";
    fs::remove_all(full_dir);
    fs::remove_all(part_dir);

    auto full = train(c, small_dataset(), full_dir);

    TrainConfig half = c;
    half.iterations = 4;
    train(half, small_dataset(), part_dir);
    auto resumed = train(c, small_dataset(), part_dir, part_dir / "ckpt_0000004.eqtk");

    REQUIRE(full.image_loss_history.size() == 8);
    REQUIRE(resumed.image_loss_history.size() == 4);
    for (int k = 0; k < 4; ++k)
      REQUIRE(resumed.image_loss_history[static_cast<std::size_t>(k)] ==
              full.image_loss_history[static_cast<std::size_t>(k + 4)]);

    // final checkpoints byte-identical
    std::ifstream a(full.final_checkpoint, std::ios::binary);
    std::ifstream b(resumed.final_checkpoint, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), {});
    std::string sb((std::istreambuf_iterator<char>(b)), {});
    REQUIRE(sa == sb);
  }
  SECTION("log lambda column matches the schedule") {
    auto dir = fs::temp_directory_path() / "eqtrack_train_log";
    fs::remove_all(dir);
    train(c, small_dataset(), dir);
    std::ifstream log(dir / "log.csv");
    std::string line;
    std::getline(log, line);
    REQUIRE(line == "iter,lambda,lr,train_loss,test_loss");
    int rows = 0;
    while (std::getline(log, line)) {
      std::istringstream ss(line);
      std::string iter_s, lambda_s, lr_s;
      std::getline(ss, iter_s, ',');
      std::getline(ss, lambda_s, ',');
      std::getline(ss, lr_s, ',');
      const long it = std::stol(iter_s);
      CHECK(std::stod(lambda_s) == Approx(lambda_schedule(it, c)).epsilon(1e-12));
      CHECK(std::stod(lr_s) == Approx(lr_schedule(it, c)).epsilon(1e-12));
      ++rows;
    }
    CHECK(rows == 8);
  }
}
