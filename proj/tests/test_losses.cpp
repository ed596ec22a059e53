#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sir3dmm/losses.hpp"
#include "test_support.hpp"

#include <cmath>
#include <numbers>

using namespace sir3dmm;
namespace st = sir3dmm::testing;

namespace {

// Pixel values whose differences stay away from the L1 kink so central
// differences with h = 1e-5 see a smooth function.
ImageGrid safe_image(std::mt19937_64& rng, Eigen::Index h, Eigen::Index w, int c,
                     double offset) {
  std::uniform_real_distribution<double> uni(0.05, 0.45);
  ImageGrid img;
  for (int ch = 0; ch < c; ++ch) {
    Mat m(h, w);
    for (Eigen::Index i = 0; i < h; ++i) {
      for (Eigen::Index j = 0; j < w; ++j) m(i, j) = offset + uni(rng);
    }
    img.channels.push_back(std::move(m));
  }
  return img;
}

ConfidenceMap positive_conf(std::mt19937_64& rng, Eigen::Index h, Eigen::Index w) {
  std::uniform_real_distribution<double> uni(0.4, 2.0);
  Mat m(h, w);
  for (Eigen::Index i = 0; i < h; ++i) {
    for (Eigen::Index j = 0; j < w; ++j) m(i, j) = uni(rng);
  }
  return m;
}

Vec flatten(const ImageGrid& img) {
  Vec out(img.channel_count() * img.height() * img.width());
  Eigen::Index at = 0;
  for (const auto& ch : img.channels) {
    for (Eigen::Index i = 0; i < ch.rows(); ++i) {
      for (Eigen::Index j = 0; j < ch.cols(); ++j) out(at++) = ch(i, j);
    }
  }
  return out;
}

ImageGrid unflatten(const Vec& v, Eigen::Index h, Eigen::Index w, int c) {
  ImageGrid img;
  Eigen::Index at = 0;
  for (int ch = 0; ch < c; ++ch) {
    Mat m(h, w);
    for (Eigen::Index i = 0; i < h; ++i) {
      for (Eigen::Index j = 0; j < w; ++j) m(i, j) = v(at++);
    }
    img.channels.push_back(std::move(m));
  }
  return img;
}

}  // namespace

TEST_CASE("landmark_loss: hand cases") {
  LandmarkSet a, b;
  a.points = Eigen::MatrixX2d::Zero(3, 2);
  b.points = a.points;
  Eigen::MatrixX2d grad;
  CHECK(landmark_loss(a, b, &grad) == 0.0);
  CHECK(grad.cwiseAbs().maxCoeff() == 0.0);  // subgradient at zero

  LandmarkSet pred, truth;
  pred.points.resize(1, 2);
  pred.points << 3.0, 4.0;
  truth.points = Eigen::MatrixX2d::Zero(1, 2);
  CHECK(landmark_loss(pred, truth) == doctest::Approx(5.0).epsilon(1e-15));

  LandmarkSet wrong;
  wrong.points = Eigen::MatrixX2d::Zero(2, 2);
  CHECK_THROWS_AS(landmark_loss(pred, wrong), std::invalid_argument);
}

TEST_CASE("landmark_loss: loop oracle and finite differences") {
  auto rng = st::rng_for(31);
  LandmarkSet pred, truth;
  pred.points = st::random_mat(rng, 6, 2, 2.0);
  truth.points = st::random_mat(rng, 6, 2, 2.0);

  double ss = 0.0;
  for (Eigen::Index i = 0; i < 6; ++i) {
    for (int c = 0; c < 2; ++c) {
      const double d = pred.points(i, c) - truth.points(i, c);
      ss += d * d;
    }
  }
  CHECK(landmark_loss(pred, truth) ==
        doctest::Approx(std::sqrt(ss) / 6.0).epsilon(1e-14));

  Eigen::MatrixX2d grad;
  landmark_loss(pred, truth, &grad);
  Vec flat_grad(12), x(12);
  for (Eigen::Index i = 0; i < 6; ++i) {
    for (int c = 0; c < 2; ++c) {
      flat_grad(2 * i + c) = grad(i, c);
      x(2 * i + c) = pred.points(i, c);
    }
  }
  const Vec fd = st::finite_difference(
      [&](const Vec& v) {
        LandmarkSet p;
        p.points.resize(6, 2);
        for (Eigen::Index i = 0; i < 6; ++i) {
          p.points(i, 0) = v(2 * i);
          p.points(i, 1) = v(2 * i + 1);
        }
        return landmark_loss(p, truth);
      },
      x);
  CHECK(st::rel_err(flat_grad, fd) <= 1e-5);
}

TEST_CASE("pixel_loss: likelihood peak and closed-form cell") {
  auto rng = st::rng_for(32);
  const ImageGrid img = safe_image(rng, 3, 4, 3, 0.0);
  const ConfidenceMap conf =
      Mat::Constant(3, 4, 1.0 / std::numbers::sqrt2);
  CHECK(std::abs(pixel_loss(img, img, conf)) <= 1e-14);

  ImageGrid recon = ImageGrid::constant(1, 1, 1, 1.0);
  ImageGrid input = ImageGrid::constant(1, 1, 1, 0.0);  // l1 = 1
  const ConfidenceMap one = Mat::Constant(1, 1, 1.0);
  const double expected = std::log(std::numbers::sqrt2) + std::numbers::sqrt2;
  CHECK(pixel_loss(recon, input, one) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("pixel_loss: errors") {
  auto rng = st::rng_for(33);
  const ImageGrid a = safe_image(rng, 2, 2, 1, 0.0);
  const ImageGrid b = safe_image(rng, 2, 3, 1, 0.0);
  CHECK_THROWS_AS(pixel_loss(a, b, Mat::Constant(2, 2, 1.0)), std::invalid_argument);
  Mat bad = Mat::Constant(2, 2, 1.0);
  bad(0, 0) = 0.0;
  CHECK_THROWS_AS(pixel_loss(a, a, bad), std::invalid_argument);
}

TEST_CASE("pixel_loss gradients match finite differences") {
  auto rng = st::rng_for(34);
  const ImageGrid input = safe_image(rng, 3, 3, 3, 0.0);
  const ImageGrid recon = safe_image(rng, 3, 3, 3, 0.5);  // differences >= 0.05
  const ConfidenceMap conf = positive_conf(rng, 3, 3);

  ImageGrid grad_recon;
  Mat grad_conf;
  pixel_loss(recon, input, conf, &grad_recon, &grad_conf);

  const Vec fd_recon = st::finite_difference(
      [&](const Vec& v) {
        return pixel_loss(unflatten(v, 3, 3, 3), input, conf);
      },
      flatten(recon));
  CHECK(st::rel_err(flatten(grad_recon), fd_recon) <= 1e-5);

  Vec conf_flat(9), conf_grad_flat(9);
  for (Eigen::Index i = 0; i < 3; ++i) {
    for (Eigen::Index j = 0; j < 3; ++j) {
      conf_flat(3 * i + j) = conf(i, j);
      conf_grad_flat(3 * i + j) = grad_conf(i, j);
    }
  }
  const Vec fd_conf = st::finite_difference(
      [&](const Vec& v) {
        Mat c(3, 3);
        for (Eigen::Index i = 0; i < 3; ++i) {
          for (Eigen::Index j = 0; j < 3; ++j) c(i, j) = v(3 * i + j);
        }
        return pixel_loss(recon, input, c);
      },
      conf_flat);
  CHECK(st::rel_err(conf_grad_flat, fd_conf) <= 1e-5);
}

TEST_CASE("perceptual_loss: identical inputs leave only the sigma term") {
  auto rng = st::rng_for(35);
  const ImageGrid img = safe_image(rng, 4, 4, 1, 0.0);
  const AveragePoolPyramidEncoder encoder(2);
  std::vector<ConfidenceMap> confs{positive_conf(rng, 4, 4), positive_conf(rng, 2, 2)};

  double expected = 0.0;
  const double ln_sqrt_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  for (const auto& c : confs) {
    expected += (c.array().log() + ln_sqrt_2pi).sum() / static_cast<double>(c.size());
  }
  CHECK(perceptual_loss(img, img, encoder, confs) ==
        doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("perceptual_loss: closed-form single cell") {
  const AveragePoolPyramidEncoder identity(1);
  ImageGrid recon = ImageGrid::constant(1, 1, 1, 1.0);
  ImageGrid input = ImageGrid::constant(1, 1, 1, 0.0);
  std::vector<ConfidenceMap> confs{Mat::Constant(1, 1, 1.0)};
  const double expected = 0.5 * std::log(2.0 * std::numbers::pi) + 0.5;
  CHECK(perceptual_loss(recon, input, identity, confs) ==
        doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("perceptual_loss: downsample-by-2 layer matches a hand-pooled oracle") {
  auto rng = st::rng_for(36);
  const ImageGrid recon = safe_image(rng, 4, 4, 1, 0.5);
  const ImageGrid input = safe_image(rng, 4, 4, 1, 0.0);
  const AveragePoolPyramidEncoder encoder(2);
  const ConfidenceMap c1 = positive_conf(rng, 2, 2);
  // isolate layer 1 by making layer 0 contribute a known constant
  const ConfidenceMap c0 = Mat::Constant(4, 4, 1.0);

  // hand pooling
  Mat pooled_r(2, 2), pooled_i(2, 2);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      pooled_r(i, j) = recon.channels[0].block(2 * i, 2 * j, 2, 2).mean();
      pooled_i(i, j) = input.channels[0].block(2 * i, 2 * j, 2, 2).mean();
    }
  }
  const double ln_sqrt_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  double expected = 0.0;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      const double l = std::abs(pooled_r(i, j) - pooled_i(i, j));
      expected += (ln_sqrt_2pi + std::log(c1(i, j)) +
                   l * l / (2.0 * c1(i, j) * c1(i, j))) /
                  4.0;
    }
  }
  Mat l0 = (recon.channels[0] - input.channels[0]).cwiseAbs();
  expected += (ln_sqrt_2pi * 16.0 + l0.array().square().sum() / 2.0) / 16.0;

  CHECK(perceptual_loss(recon, input, encoder, {c0, c1}) ==
        doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("perceptual_loss gradients match finite differences") {
  auto rng = st::rng_for(37);
  const ImageGrid input = safe_image(rng, 4, 4, 1, 0.0);
  const ImageGrid recon = safe_image(rng, 4, 4, 1, 0.5);
  const AveragePoolPyramidEncoder encoder(2);
  std::vector<ConfidenceMap> confs{positive_conf(rng, 4, 4), positive_conf(rng, 2, 2)};

  ImageGrid grad_recon;
  std::vector<Mat> grad_confs;
  perceptual_loss(recon, input, encoder, confs, &grad_recon, &grad_confs);

  const Vec fd = st::finite_difference(
      [&](const Vec& v) {
        return perceptual_loss(unflatten(v, 4, 4, 1), input, encoder, confs);
      },
      flatten(recon));
  CHECK(st::rel_err(flatten(grad_recon), fd) <= 1e-5);

  Vec c1_flat(4), g1_flat(4);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      c1_flat(2 * i + j) = confs[1](i, j);
      g1_flat(2 * i + j) = grad_confs[1](i, j);
    }
  }
  const Vec fd_conf = st::finite_difference(
      [&](const Vec& v) {
        Mat c(2, 2);
        for (int i = 0; i < 2; ++i) {
          for (int j = 0; j < 2; ++j) c(i, j) = v(2 * i + j);
        }
        return perceptual_loss(recon, input, encoder, {confs[0], c});
      },
      c1_flat);
  CHECK(st::rel_err(g1_flat, fd_conf) <= 1e-5);
}

TEST_CASE("param_regularizer: hand cases and gradient") {
  auto rng = st::rng_for(38);
  const MorphableModel model = st::random_model(rng, 6, 3, 2);
  LossWeights w;
  w.eps_id = 0.7;
  w.eps_exp = 1.3;

  CHECK(param_regularizer(ShapeCode{Vec::Zero(3)}, ExpressionCode{Vec::Zero(2)},
                          model, w) == 0.0);
  CHECK(param_regularizer(ShapeCode{model.shape_eigenvalues},
                          ExpressionCode{model.expr_eigenvalues}, model, w) ==
        doctest::Approx(0.7 * 3 + 1.3 * 2).epsilon(1e-13));

  const ShapeCode shape{st::random_vec(rng, 3)};
  const ExpressionCode expr{st::random_vec(rng, 2)};
  double acc = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double z = shape.values(i) / model.shape_eigenvalues(i);
    acc += 0.7 * z * z;
  }
  for (int i = 0; i < 2; ++i) {
    const double z = expr.values(i) / model.expr_eigenvalues(i);
    acc += 1.3 * z * z;
  }
  Vec gs, ge;
  CHECK(param_regularizer(shape, expr, model, w, &gs, &ge) ==
        doctest::Approx(acc).epsilon(1e-13));

  const Vec fd = st::finite_difference(
      [&](const Vec& v) {
        return param_regularizer(ShapeCode{v}, expr, model, w);
      },
      shape.values);
  CHECK(st::rel_err(gs, fd) <= 1e-6);
}

TEST_CASE("albedo_regularizer: constant grid leaves only the residual term") {
  UVGrid uv;
  for (auto& ch : uv.channels) ch = Mat::Constant(3, 3, 0.25);
  LossWeights w;
  w.eps_uv = 0.01;
  double sq = 0.0;
  for (const auto& ch : uv.channels) sq += ch.squaredNorm();
  CHECK(albedo_regularizer(uv, w) == doctest::Approx(0.01 * sq).epsilon(1e-13));
}

TEST_CASE("albedo_regularizer: 2x1 grid hand case") {
  UVGrid uv;
  for (int c = 0; c < 3; ++c) uv.channels[c] = Mat::Zero(2, 1);
  uv.channels[0](0, 0) = 1.0;  // pixel values (1,0,0) and (0,0,0)
  LossWeights w;
  w.eps_uv = 0.5;
  // each pixel has one neighbour: smooth = 2 * ||(1,0,0)|| = 2; residual = 1
  CHECK(albedo_regularizer(uv, w) == doctest::Approx(2.0 + 0.5).epsilon(1e-13));
}

TEST_CASE("albedo_regularizer: loop oracle and gradient") {
  auto rng = st::rng_for(39);
  UVGrid uv;
  for (auto& ch : uv.channels) ch = st::random_mat(rng, 3, 4);
  LossWeights w;
  w.eps_uv = 0.05;

  // independent loop oracle
  double smooth = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j) {
      Eigen::Vector3d mean = Eigen::Vector3d::Zero();
      int count = 0;
      const int offs[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
      for (const auto& o : offs) {
        const int ni = i + o[0], nj = j + o[1];
        if (ni < 0 || ni >= 3 || nj < 0 || nj >= 4) continue;
        ++count;
        for (int c = 0; c < 3; ++c) mean(c) += uv.channels[c](ni, nj);
      }
      Eigen::Vector3d diff;
      for (int c = 0; c < 3; ++c) diff(c) = uv.channels[c](i, j) - mean(c) / count;
      smooth += diff.norm();
    }
  }
  double residual = 0.0;
  for (const auto& ch : uv.channels) residual += ch.squaredNorm();
  CHECK(albedo_regularizer(uv, w) ==
        doctest::Approx(smooth + 0.05 * residual).epsilon(1e-12));

  UVGrid grad;
  albedo_regularizer(uv, w, &grad);
  Vec x(36), g(36);
  Eigen::Index at = 0;
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 4; ++j) {
        x(at) = uv.channels[c](i, j);
        g(at) = grad.channels[c](i, j);
        ++at;
      }
    }
  }
  const Vec fd = st::finite_difference(
      [&](const Vec& v) {
        UVGrid u;
        Eigen::Index k = 0;
        for (int c = 0; c < 3; ++c) {
          u.channels[c] = Mat(3, 4);
          for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 4; ++j) u.channels[c](i, j) = v(k++);
          }
        }
        return albedo_regularizer(u, w);
      },
      x);
  CHECK(st::rel_err(g, fd) <= 1e-5);

  UVGrid tiny;
  for (auto& ch : tiny.channels) ch = Mat::Zero(1, 1);
  CHECK_THROWS_AS(albedo_regularizer(tiny, w), std::invalid_argument);
}

TEST_CASE("cosface_loss: single class is exactly zero") {
  ClassWeightMatrix anchors;
  anchors.weights = Mat::Zero(1, 3);
  anchors.weights(0, 0) = 1.0;
  const ShapeCode shape{(Vec(3) << 0.3, -0.2, 0.9).finished()};
  CHECK(cosface_loss(shape, 0, anchors, 30.0, 0.35) == 0.0);
}

TEST_CASE("cosface_loss: two orthogonal classes, aligned code") {
  ClassWeightMatrix anchors;
  anchors.weights = Mat::Zero(2, 2);
  anchors.weights(0, 0) = 1.0;
  anchors.weights(1, 1) = 1.0;
  const ShapeCode shape{(Vec(2) << 2.0, 0.0).finished()};
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(cosface_loss(shape, 0, anchors, 1.0, 0.0) ==
        doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("cosface_loss: scale invariance in the code norm") {
  auto rng = st::rng_for(40);
  const ClassWeightMatrix anchors = ClassWeightMatrix::random(5, 4, 77);
  const ShapeCode shape{st::random_vec(rng, 4)};
  const double base = cosface_loss(shape, 2, anchors, 30.0, 0.35);
  for (const double c : {0.1, 10.0}) {
    const double scaled =
        cosface_loss(ShapeCode{(c * shape.values).eval()}, 2, anchors, 30.0, 0.35);
    CHECK(std::abs(scaled - base) <= 1e-9);
  }
}

TEST_CASE("cosface_loss: gradient and errors") {
  auto rng = st::rng_for(41);
  const ClassWeightMatrix anchors = ClassWeightMatrix::random(4, 5, 78);
  const ShapeCode shape{st::random_vec(rng, 5)};
  Vec grad;
  cosface_loss(shape, 1, anchors, 30.0, 0.35, &grad);
  const Vec fd = st::finite_difference(
      [&](const Vec& v) {
        return cosface_loss(ShapeCode{v}, 1, anchors, 30.0, 0.35);
      },
      shape.values);
  CHECK(st::rel_err(grad, fd) <= 1e-4);

  CHECK_THROWS_AS(cosface_loss(ShapeCode{Vec::Zero(5)}, 1, anchors, 30.0, 0.35),
                  std::invalid_argument);
  CHECK_THROWS_AS(cosface_loss(shape, 9, anchors, 30.0, 0.35),
                  std::invalid_argument);
}

TEST_CASE("center_loss: hand cases, oracle, gradient") {
  CenterTable table = init_centers(2, 1);
  table.centers(1, 0) = 0.0;
  const ShapeCode two{(Vec(1) << 2.0).finished()};
  CHECK(center_loss(two, 1, table) == doctest::Approx(2.0).epsilon(1e-15));

  auto rng = st::rng_for(42);
  CenterTable big = init_centers(3, 6);
  big.centers = st::random_mat(rng, 3, 6);
  const ShapeCode shape{st::random_vec(rng, 6)};
  CHECK(center_loss(shape, 2, big) ==
        doctest::Approx(
            0.5 * (shape.values - big.centers.row(2).transpose()).squaredNorm())
            .epsilon(1e-14));
  CHECK(center_loss(ShapeCode{big.centers.row(0).transpose()}, 0, big) == 0.0);

  Vec grad;
  center_loss(shape, 2, big, &grad);
  CHECK((grad - (shape.values - big.centers.row(2).transpose())).norm() == 0.0);
  CHECK_THROWS_AS(center_loss(shape, 5, big), std::invalid_argument);
}

TEST_CASE("sir_loss composes its three parts") {
  auto rng = st::rng_for(43);
  const int m = 4;
  const ClassWeightMatrix anchors = ClassWeightMatrix::random(3, m, 79);
  CenterTable centers = init_centers(3, m);
  centers.centers = st::random_mat(rng, 3, m);
  const Vec sigma = (Vec(m) << 1.0, 0.7, 1.3, 0.9).finished();
  std::vector<ShapeCode> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(ShapeCode{st::random_vec(rng, m)});
  LossWeights w;
  w.eps_c = 0.4;
  w.eps_kl = 0.8;

  const double composed = sir_loss(batch[1], 2, centers, anchors, sigma, batch, w);
  const double expected =
      cosface_loss(batch[1], 2, anchors, w.cosface_scale, w.cosface_margin) +
      0.4 * center_loss(batch[1], 2, centers) +
      0.8 * kl_to_standard_normal(batch, sigma).value;
  CHECK(composed == doctest::Approx(expected).epsilon(1e-14));

  // zero weights leave only the softmax-like part
  LossWeights only_sm = w;
  only_sm.eps_c = 0.0;
  only_sm.eps_kl = 0.0;
  CHECK(sir_loss(batch[1], 2, centers, anchors, sigma, batch, only_sm) ==
        doctest::Approx(cosface_loss(batch[1], 2, anchors, w.cosface_scale,
                                     w.cosface_margin))
            .epsilon(1e-14));
}

TEST_CASE("sir_loss: neutral batch at centers with unit moments") {
  const int m = 3;
  const Vec sigma = (Vec(m) << 0.5, 1.0, 2.0).finished();
  // codes +sigma and -sigma give exact unit moments; centers sit on the codes
  std::vector<ShapeCode> batch{ShapeCode{sigma}, ShapeCode{(-sigma).eval()}};
  CenterTable centers = init_centers(2, m);
  centers.centers.row(0) = sigma.transpose();
  centers.centers.row(1) = -sigma.transpose();
  const ClassWeightMatrix anchors = ClassWeightMatrix::random(2, m, 80);
  LossWeights w;

  const double total = sir_loss(batch[0], 0, centers, anchors, sigma, batch, w);
  const double sm =
      cosface_loss(batch[0], 0, anchors, w.cosface_scale, w.cosface_margin);
  CHECK(total == doctest::Approx(sm).epsilon(1e-12));  // L_c = 0 and KL = 0
}

TEST_CASE("sir_loss gradient matches finite differences through the batch KL") {
  auto rng = st::rng_for(44);
  const int m = 4;
  const ClassWeightMatrix anchors = ClassWeightMatrix::random(3, m, 81);
  CenterTable centers = init_centers(3, m);
  centers.centers = st::random_mat(rng, 3, m);
  const Vec sigma = (Vec(m) << 1.0, 0.7, 1.3, 0.9).finished();
  std::vector<ShapeCode> batch;
  for (int i = 0; i < 5; ++i) batch.push_back(ShapeCode{st::random_vec(rng, m)});
  LossWeights w;
  w.eps_c = 0.4;
  w.eps_kl = 0.8;

  Vec grad;
  sir_loss(batch[2], 1, centers, anchors, sigma, batch, w, &grad, 2);
  const Vec fd = st::finite_difference(
      [&](const Vec& v) {
        auto copy = batch;
        copy[2].values = v;
        return sir_loss(copy[2], 1, centers, anchors, sigma, copy, w);
      },
      batch[2].values);
  CHECK(st::rel_err(grad, fd) <= 1e-4);
}

TEST_CASE("scaling a unit-moment batch by 0.1 strictly increases the KL") {
  const Vec sigma = (Vec(3) << 1.0, 2.0, 0.5).finished();
  std::vector<ShapeCode> batch{ShapeCode{sigma}, ShapeCode{(-sigma).eval()}};
  const double before = kl_to_standard_normal(batch, sigma).value;
  std::vector<ShapeCode> shrunk;
  for (const auto& c : batch) shrunk.push_back(ShapeCode{(0.1 * c.values).eval()});
  const double after = kl_to_standard_normal(shrunk, sigma).value;
  CHECK(after > before);
}

TEST_CASE("pixel_loss: reconstruction equal to the input minimizes over recon") {
  auto rng = st::rng_for(45);
  const ImageGrid input = safe_image(rng, 3, 3, 1, 0.0);
  const ConfidenceMap conf = positive_conf(rng, 3, 3);
  const double at_input = pixel_loss(input, input, conf);
  for (int trial = 0; trial < 5; ++trial) {
    const ImageGrid other = safe_image(rng, 3, 3, 1, 0.3);
    CHECK(pixel_loss(other, input, conf) > at_input);
  }
}

// ---------- total_loss routing ----------

namespace {

struct TotalFixture {
  MorphableModel model;
  CenterTable centers;
  ClassWeightMatrix anchors;
  AveragePoolPyramidEncoder encoder{1};
  LossWeights w;
  TotalLossContext ctx;
  std::vector<ShapeCode> batch;

  explicit TotalFixture(std::uint64_t seed) {
    auto rng = st::rng_for(seed);
    model = st::random_model(rng, 8, 3, 2);
    model.landmark_indices = {0, 2, 5};
    centers = init_centers(3, 3);
    centers.centers = st::random_mat(rng, 3, 3);
    anchors = ClassWeightMatrix::random(3, 3, seed + 1);
    for (int i = 0; i < 4; ++i) batch.push_back(ShapeCode{st::random_vec(rng, 3)});
    ctx.model = &model;
    ctx.centers = &centers;
    ctx.anchors = &anchors;
    ctx.encoder = &encoder;
    ctx.batch = batch;
    ctx.batch_index = 0;
  }

  TotalLossInputs recon_inputs(std::uint64_t seed) const {
    auto rng = st::rng_for(seed);
    TotalLossInputs in;
    in.pred_landmarks.points = st::random_mat(rng, 3, 2);
    in.landmark_truth = LandmarkSet{st::random_mat(rng, 3, 2)};
    in.shape = ShapeCode{batch[0].values};
    in.expr = ExpressionCode{st::random_vec(rng, 2)};
    return in;
  }

  TotalLossInputs identity_inputs(std::uint64_t seed) const {
    auto rng = st::rng_for(seed);
    TotalLossInputs in;
    in.pred_landmarks.points = Eigen::MatrixX2d::Zero(3, 2);
    in.identity_label = 1;
    in.shape = ShapeCode{batch[0].values};
    in.expr = ExpressionCode{st::random_vec(rng, 2)};
    return in;
  }
};

}  // namespace

TEST_CASE("total_loss: landmark samples exclude every SIR term") {
  TotalFixture f(50);
  const TotalLossBreakdown out = total_loss(f.recon_inputs(51), f.ctx, f.w);
  CHECK(out.sm == 0.0);
  CHECK(out.center == 0.0);
  CHECK(out.kl == 0.0);
  CHECK(out.landmark > 0.0);
  CHECK(out.total == doctest::Approx(f.w.eps_l * out.landmark).epsilon(1e-14));
}

TEST_CASE("total_loss: identity samples exclude the landmark term") {
  TotalFixture f(52);
  const TotalLossBreakdown out = total_loss(f.identity_inputs(53), f.ctx, f.w);
  CHECK(out.landmark == 0.0);
  CHECK(out.sm > 0.0);
  const double sir = out.sm + f.w.eps_c * out.center + f.w.eps_kl * out.kl;
  CHECK(out.total == doctest::Approx(f.w.eps_s * sir).epsilon(1e-14));
}

TEST_CASE("total_loss: photometric branch adds the documented pixel terms") {
  TotalFixture f(54);
  auto rng = st::rng_for(55);
  TotalLossInputs in = f.recon_inputs(56);
  PhotometricData photo;
  photo.input = safe_image(rng, 2, 2, 1, 0.0);
  photo.recon = safe_image(rng, 2, 2, 1, 0.4);
  photo.conf = positive_conf(rng, 2, 2);
  photo.layer_confs = {positive_conf(rng, 2, 2)};
  in.photo = photo;

  const TotalLossBreakdown out = total_loss(in, f.ctx, f.w);
  const double expect_pixel = pixel_loss(photo.recon, photo.input, photo.conf);
  const double expect_perc =
      perceptual_loss(photo.recon, photo.input, f.encoder, photo.layer_confs);
  const double expect_regp =
      param_regularizer(in.shape, in.expr, f.model, f.w);
  CHECK(out.pixel == doctest::Approx(expect_pixel).epsilon(1e-14));
  CHECK(out.perceptual == doctest::Approx(expect_perc).epsilon(1e-14));
  CHECK(out.regp == doctest::Approx(expect_regp).epsilon(1e-14));
  const double l_pix = expect_pixel + expect_perc + f.w.eps_reg * expect_regp;
  CHECK(out.total ==
        doctest::Approx(f.w.eps_l * out.landmark + l_pix).epsilon(1e-13));
}

TEST_CASE("total_loss: label errors and the drop-pix flag") {
  TotalFixture f(57);
  TotalLossInputs neither = f.recon_inputs(58);
  neither.landmark_truth.reset();
  CHECK_THROWS_AS(total_loss(neither, f.ctx, f.w), std::invalid_argument);

  TotalLossInputs both = f.recon_inputs(59);
  both.identity_label = 0;
  CHECK_THROWS_AS(total_loss(both, f.ctx, f.w), std::invalid_argument);

  TotalLossContext strict_ctx = f.ctx;
  strict_ctx.drop_pix_without_recon = false;
  CHECK_THROWS_AS(total_loss(f.recon_inputs(60), strict_ctx, f.w),
                  std::invalid_argument);
}

TEST_CASE("total_loss: switching the label kind changes exactly the routed terms") {
  TotalFixture f(61);
  TotalLossInputs in = f.recon_inputs(62);
  const TotalLossBreakdown as_recon = total_loss(in, f.ctx, f.w);

  TotalLossInputs flipped = in;
  flipped.landmark_truth.reset();
  flipped.identity_label = 1;
  const TotalLossBreakdown as_id = total_loss(flipped, f.ctx, f.w);

  CHECK(as_recon.landmark > 0.0);
  CHECK(as_recon.sm == 0.0);
  CHECK(as_id.landmark == 0.0);
  CHECK(as_id.sm > 0.0);
  CHECK(as_recon.pixel == as_id.pixel);  // shared term identical (both zero here)
}

TEST_CASE("total_loss gradients match finite differences on both branches") {
  TotalFixture f(63);

  TotalLossInputs id_in = f.identity_inputs(64);
  f.ctx.batch[0] = id_in.shape;  // make batch_index consistent
  TotalLossGrads grads;
  total_loss(id_in, f.ctx, f.w, &grads);
  const Vec fd_shape = st::finite_difference(
      [&](const Vec& v) {
        TotalLossInputs copy = id_in;
        copy.shape.values = v;
        TotalLossContext ctx2 = f.ctx;
        ctx2.batch[0] = copy.shape;
        return total_loss(copy, ctx2, f.w).total;
      },
      id_in.shape.values);
  CHECK(st::rel_err(grads.shape, fd_shape) <= 1e-4);

  TotalLossInputs rec_in = f.recon_inputs(65);
  total_loss(rec_in, f.ctx, f.w, &grads);
  Vec flat(6);
  for (int i = 0; i < 3; ++i) {
    flat(2 * i) = rec_in.pred_landmarks.points(i, 0);
    flat(2 * i + 1) = rec_in.pred_landmarks.points(i, 1);
  }
  const Vec fd_land = st::finite_difference(
      [&](const Vec& v) {
        TotalLossInputs copy = rec_in;
        for (int i = 0; i < 3; ++i) {
          copy.pred_landmarks.points(i, 0) = v(2 * i);
          copy.pred_landmarks.points(i, 1) = v(2 * i + 1);
        }
        return total_loss(copy, f.ctx, f.w).total;
      },
      flat);
  Vec flat_grad(6);
  for (int i = 0; i < 3; ++i) {
    flat_grad(2 * i) = grads.pred_landmarks(i, 0);
    flat_grad(2 * i + 1) = grads.pred_landmarks(i, 1);
  }
  CHECK(st::rel_err(flat_grad, fd_land) <= 1e-4);
}
