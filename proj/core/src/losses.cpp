#include "sir3dmm/losses.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace sir3dmm {

namespace {

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

void require_same_shape(const ImageGrid& a, const ImageGrid& b) {
  if (a.channel_count() != b.channel_count() || a.height() != b.height() ||
      a.width() != b.width()) {
    throw std::invalid_argument("image shapes differ");
  }
}

void require_image_valid(const ImageGrid& img) {
  if (img.channel_count() != 1 && img.channel_count() != 3) {
    throw std::invalid_argument("image must have 1 or 3 channels");
  }
  for (const auto& ch : img.channels) {
    if (ch.rows() != img.height() || ch.cols() != img.width()) {
      throw std::invalid_argument("image channels have inconsistent shapes");
    }
  }
}

}  // namespace

ImageGrid ImageGrid::constant(Eigen::Index h, Eigen::Index w, int c, double value) {
  ImageGrid img;
  img.channels.assign(static_cast<size_t>(c), Mat::Constant(h, w, value));
  return img;
}

AveragePoolPyramidEncoder::AveragePoolPyramidEncoder(int levels) : levels_(levels) {
  if (levels < 1) throw std::invalid_argument("encoder needs at least one level");
}

std::vector<std::array<Eigen::Index, 3>> AveragePoolPyramidEncoder::layer_shapes(
    Eigen::Index h, Eigen::Index w, int c) const {
  std::vector<std::array<Eigen::Index, 3>> shapes;
  for (int k = 0; k < levels_; ++k) {
    const Eigen::Index p = Eigen::Index{1} << k;
    shapes.push_back({(h + p - 1) / p, (w + p - 1) / p, c});
  }
  return shapes;
}

std::vector<ImageGrid> AveragePoolPyramidEncoder::encode(const ImageGrid& image) const {
  require_image_valid(image);
  std::vector<ImageGrid> layers;
  for (int k = 0; k < levels_; ++k) {
    const Eigen::Index p = Eigen::Index{1} << k;
    const Eigen::Index oh = (image.height() + p - 1) / p;
    const Eigen::Index ow = (image.width() + p - 1) / p;
    ImageGrid layer;
    for (const auto& ch : image.channels) {
      Mat pooled(oh, ow);
      for (Eigen::Index i = 0; i < oh; ++i) {
        for (Eigen::Index j = 0; j < ow; ++j) {
          const Eigen::Index r0 = i * p, c0 = j * p;
          const Eigen::Index rn = std::min(p, image.height() - r0);
          const Eigen::Index cn = std::min(p, image.width() - c0);
          pooled(i, j) = ch.block(r0, c0, rn, cn).mean();
        }
      }
      layer.channels.push_back(std::move(pooled));
    }
    layers.push_back(std::move(layer));
  }
  return layers;
}

ImageGrid AveragePoolPyramidEncoder::encode_vjp(
    const ImageGrid& image, const std::vector<ImageGrid>& cotangents) const {
  if (static_cast<int>(cotangents.size()) != levels_) {
    throw std::invalid_argument("cotangent count does not match layer count");
  }
  ImageGrid out = ImageGrid::constant(image.height(), image.width(),
                                      image.channel_count(), 0.0);
  for (int k = 0; k < levels_; ++k) {
    const Eigen::Index p = Eigen::Index{1} << k;
    const ImageGrid& cot = cotangents[static_cast<size_t>(k)];
    for (int c = 0; c < image.channel_count(); ++c) {
      const Mat& g = cot.channels[static_cast<size_t>(c)];
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        for (Eigen::Index j = 0; j < g.cols(); ++j) {
          const Eigen::Index r0 = i * p, c0 = j * p;
          const Eigen::Index rn = std::min(p, image.height() - r0);
          const Eigen::Index cn = std::min(p, image.width() - c0);
          out.channels[static_cast<size_t>(c)].block(r0, c0, rn, cn).array() +=
              g(i, j) / static_cast<double>(rn * cn);
        }
      }
    }
  }
  return out;
}

ClassWeightMatrix ClassWeightMatrix::random(int num_classes, int dims,
                                            std::uint64_t seed) {
  if (num_classes <= 0 || dims <= 0) {
    throw std::invalid_argument("anchor matrix dimensions must be positive");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  ClassWeightMatrix out;
  out.weights.resize(num_classes, dims);
  for (int i = 0; i < num_classes; ++i) {
    Vec row(dims);
    do {
      for (int d = 0; d < dims; ++d) row(d) = gauss(rng);
    } while (row.norm() < 1e-9);
    out.weights.row(i) = row.transpose() / row.norm();
  }
  return out;
}

double landmark_loss(const LandmarkSet& pred, const LandmarkSet& truth,
                     Eigen::MatrixX2d* grad_pred) {
  if (pred.points.rows() != truth.points.rows()) {
    throw std::invalid_argument("landmark counts differ");
  }
  const auto n = pred.points.rows();
  if (n == 0) throw std::invalid_argument("empty landmark sets");
  const Eigen::MatrixX2d diff = pred.points - truth.points;
  const double norm = std::sqrt(diff.squaredNorm());
  const double inv_n = 1.0 / static_cast<double>(n);
  if (grad_pred != nullptr) {
    // subgradient 0 at coincident sets
    *grad_pred = norm == 0.0 ? Eigen::MatrixX2d::Zero(n, 2).eval()
                             : (inv_n / norm * diff).eval();
  }
  return inv_n * norm;
}

double pixel_loss(const ImageGrid& recon, const ImageGrid& input,
                  const ConfidenceMap& conf, ImageGrid* grad_recon,
                  Mat* grad_conf) {
  require_image_valid(recon);
  require_image_valid(input);
  require_same_shape(recon, input);
  if (conf.rows() != recon.height() || conf.cols() != recon.width()) {
    throw std::invalid_argument("confidence map shape differs from image");
  }
  if ((conf.array() <= 0.0).any()) {
    throw std::invalid_argument("confidence map must be strictly positive");
  }
  const double inv_area = 1.0 / static_cast<double>(conf.size());
  const double inv_c = 1.0 / recon.channel_count();
  const double sqrt2 = std::numbers::sqrt2;

  Mat l1 = Mat::Zero(conf.rows(), conf.cols());
  for (int c = 0; c < recon.channel_count(); ++c) {
    l1 += (recon.channels[static_cast<size_t>(c)] -
           input.channels[static_cast<size_t>(c)])
              .cwiseAbs();
  }
  l1 *= inv_c;

  const double loss =
      inv_area *
      ((sqrt2 * conf.array()).log() + sqrt2 * l1.array() / conf.array()).sum();

  if (grad_recon != nullptr) {
    grad_recon->channels.clear();
    for (int c = 0; c < recon.channel_count(); ++c) {
      const Mat& rc = recon.channels[static_cast<size_t>(c)];
      const Mat& ic = input.channels[static_cast<size_t>(c)];
      Mat g(conf.rows(), conf.cols());
      for (Eigen::Index i = 0; i < conf.rows(); ++i) {
        for (Eigen::Index j = 0; j < conf.cols(); ++j) {
          g(i, j) = inv_area * sqrt2 / conf(i, j) * inv_c *
                    sign_of(rc(i, j) - ic(i, j));
        }
      }
      grad_recon->channels.push_back(std::move(g));
    }
  }
  if (grad_conf != nullptr) {
    *grad_conf = inv_area * (1.0 / conf.array() -
                             sqrt2 * l1.array() / conf.array().square());
  }
  return loss;
}

double perceptual_loss(const ImageGrid& recon, const ImageGrid& input,
                       const FeatureEncoder& encoder,
                       const std::vector<ConfidenceMap>& confs,
                       ImageGrid* grad_recon, std::vector<Mat>* grad_confs) {
  require_image_valid(recon);
  require_image_valid(input);
  require_same_shape(recon, input);
  if (static_cast<int>(confs.size()) != encoder.num_layers()) {
    throw std::invalid_argument("one confidence map per encoder layer required");
  }

  const std::vector<ImageGrid> fr = encoder.encode(recon);
  const std::vector<ImageGrid> fi = encoder.encode(input);
  const double ln_sqrt_2pi = 0.5 * std::log(2.0 * std::numbers::pi);

  double loss = 0.0;
  std::vector<ImageGrid> cotangents;
  if (grad_confs != nullptr) grad_confs->assign(confs.size(), Mat());

  for (size_t k = 0; k < confs.size(); ++k) {
    const ImageGrid& a = fr[k];
    const ImageGrid& b = fi[k];
    const Mat& sigma = confs[k];
    if (sigma.rows() != a.height() || sigma.cols() != a.width()) {
      throw std::invalid_argument("layer confidence shape mismatch");
    }
    if ((sigma.array() <= 0.0).any()) {
      throw std::invalid_argument("confidence map must be strictly positive");
    }
    const double inv_area = 1.0 / static_cast<double>(sigma.size());
    const double inv_c = 1.0 / a.channel_count();

    Mat l = Mat::Zero(sigma.rows(), sigma.cols());
    for (int c = 0; c < a.channel_count(); ++c) {
      l += (a.channels[static_cast<size_t>(c)] - b.channels[static_cast<size_t>(c)])
               .cwiseAbs();
    }
    l *= inv_c;

    loss += inv_area * (ln_sqrt_2pi + sigma.array().log() +
                        l.array().square() / (2.0 * sigma.array().square()))
                           .sum();

    if (grad_recon != nullptr) {
      ImageGrid cot;
      const Mat dl = inv_area * l.array() / sigma.array().square();
      for (int c = 0; c < a.channel_count(); ++c) {
        Mat g(sigma.rows(), sigma.cols());
        const Mat& ac = a.channels[static_cast<size_t>(c)];
        const Mat& bc = b.channels[static_cast<size_t>(c)];
        for (Eigen::Index i = 0; i < sigma.rows(); ++i) {
          for (Eigen::Index j = 0; j < sigma.cols(); ++j) {
            g(i, j) = dl(i, j) * inv_c * sign_of(ac(i, j) - bc(i, j));
          }
        }
        cot.channels.push_back(std::move(g));
      }
      cotangents.push_back(std::move(cot));
    }
    if (grad_confs != nullptr) {
      (*grad_confs)[k] = inv_area * (1.0 / sigma.array() -
                                     l.array().square() / sigma.array().cube());
    }
  }

  if (grad_recon != nullptr) {
    *grad_recon = encoder.encode_vjp(recon, cotangents);
  }
  return loss;
}

double param_regularizer(const ShapeCode& shape, const ExpressionCode& expr,
                         const MorphableModel& model, const LossWeights& w,
                         Vec* grad_shape, Vec* grad_expr) {
  if (shape.values.size() != model.id_dims() ||
      expr.values.size() != model.expr_dims()) {
    throw std::invalid_argument("code lengths do not match model");
  }
  const Vec zs = shape.values.array() / model.shape_eigenvalues.array();
  const Vec ze = expr.values.array() / model.expr_eigenvalues.array();
  if (grad_shape != nullptr) {
    *grad_shape = 2.0 * w.eps_id * (zs.array() / model.shape_eigenvalues.array());
  }
  if (grad_expr != nullptr) {
    *grad_expr = 2.0 * w.eps_exp * (ze.array() / model.expr_eigenvalues.array());
  }
  return w.eps_id * zs.squaredNorm() + w.eps_exp * ze.squaredNorm();
}

double albedo_regularizer(const UVGrid& uv, const LossWeights& w, UVGrid* grad) {
  const Eigen::Index h = uv.height();
  const Eigen::Index wd = uv.width();
  for (const auto& ch : uv.channels) {
    if (ch.rows() != h || ch.cols() != wd) {
      throw std::invalid_argument("uv channels have inconsistent shapes");
    }
  }
  if (h * wd < 2) throw std::invalid_argument("degenerate uv grid");

  if (grad != nullptr) {
    for (auto& ch : grad->channels) ch = Mat::Zero(h, wd);
  }

  const std::array<std::array<int, 2>, 4> offsets{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
  double smooth = 0.0;
  double residual = 0.0;
  for (const auto& ch : uv.channels) residual += ch.squaredNorm();

  for (Eigen::Index i = 0; i < h; ++i) {
    for (Eigen::Index j = 0; j < wd; ++j) {
      Eigen::Vector3d mean = Eigen::Vector3d::Zero();
      std::array<std::pair<Eigen::Index, Eigen::Index>, 4> neigh;
      int count = 0;
      for (const auto& off : offsets) {
        const Eigen::Index ni = i + off[0];
        const Eigen::Index nj = j + off[1];
        if (ni < 0 || ni >= h || nj < 0 || nj >= wd) continue;
        neigh[static_cast<size_t>(count++)] = {ni, nj};
        for (int c = 0; c < 3; ++c) {
          mean(c) += uv.channels[static_cast<size_t>(c)](ni, nj);
        }
      }
      mean /= static_cast<double>(count);
      Eigen::Vector3d diff;
      for (int c = 0; c < 3; ++c) {
        diff(c) = uv.channels[static_cast<size_t>(c)](i, j) - mean(c);
      }
      const double norm = diff.norm();
      smooth += norm;
      if (grad != nullptr && norm > 0.0) {
        const Eigen::Vector3d unit = diff / norm;
        for (int c = 0; c < 3; ++c) {
          grad->channels[static_cast<size_t>(c)](i, j) += unit(c);
          for (int t = 0; t < count; ++t) {
            const auto [ni, nj] = neigh[static_cast<size_t>(t)];
            grad->channels[static_cast<size_t>(c)](ni, nj) -=
                unit(c) / static_cast<double>(count);
          }
        }
      }
    }
  }

  if (grad != nullptr) {
    for (int c = 0; c < 3; ++c) {
      grad->channels[static_cast<size_t>(c)] +=
          2.0 * w.eps_uv * uv.channels[static_cast<size_t>(c)];
    }
  }
  return smooth + w.eps_uv * residual;
}

double cosface_loss(const ShapeCode& shape, int label,
                    const ClassWeightMatrix& anchors, double scale,
                    double margin, Vec* grad) {
  const int k = anchors.num_classes();
  if (label < 0 || label >= k) throw std::invalid_argument("label out of range");
  if (shape.values.size() != anchors.weights.cols()) {
    throw std::invalid_argument("code length does not match anchors");
  }
  const double norm = shape.values.norm();
  if (norm < 1e-12) throw std::invalid_argument("zero-norm shape code");

  const Vec unit = shape.values / norm;
  const Vec cosines = anchors.weights * unit;
  Vec logits = scale * cosines;
  logits(label) -= scale * margin;

  const double max_logit = logits.maxCoeff();
  const Vec shifted = (logits.array() - max_logit).exp();
  const double denom = shifted.sum();
  const double loss = -(logits(label) - max_logit) + std::log(denom);

  if (grad != nullptr) {
    const Vec p = shifted / denom;
    Vec dcos = scale * p;
    dcos(label) -= scale;
    // d cos_j / d alpha = (w_j - cos_j u) / ||alpha||
    *grad = (anchors.weights.transpose() * dcos - (cosines.dot(dcos)) * unit) / norm;
  }
  return loss;
}

double center_loss(const ShapeCode& shape, int label, const CenterTable& centers,
                   Vec* grad) {
  if (label < 0 || label >= centers.num_classes()) {
    throw std::invalid_argument("label out of range");
  }
  if (shape.values.size() != centers.dims()) {
    throw std::invalid_argument("code length does not match center table");
  }
  const Vec diff = shape.values - centers.centers.row(label).transpose();
  if (grad != nullptr) *grad = diff;
  return 0.5 * diff.squaredNorm();
}

double sir_loss(const ShapeCode& shape, int label, const CenterTable& centers,
                const ClassWeightMatrix& anchors, const Vec& eigenvalues,
                const std::vector<ShapeCode>& batch, const LossWeights& w,
                Vec* grad, int batch_index) {
  Vec g_sm, g_c;
  double loss = cosface_loss(shape, label, anchors, w.cosface_scale,
                             w.cosface_margin, grad != nullptr ? &g_sm : nullptr);
  loss += w.eps_c *
          center_loss(shape, label, centers, grad != nullptr ? &g_c : nullptr);
  if (grad != nullptr) *grad = g_sm + w.eps_c * g_c;

  if (w.eps_kl > 0.0) {
    std::vector<Vec> kl_grads;
    const KlResult kl = kl_to_standard_normal(
        batch, eigenvalues, grad != nullptr ? &kl_grads : nullptr);
    loss += w.eps_kl * kl.value;
    if (grad != nullptr) {
      if (batch_index < 0 || batch_index >= static_cast<int>(batch.size())) {
        throw std::invalid_argument(
            "sir_loss gradient needs the sample's index in the batch");
      }
      *grad += w.eps_kl * kl_grads[static_cast<size_t>(batch_index)];
    }
  }
  return loss;
}

TotalLossBreakdown total_loss(const TotalLossInputs& inputs,
                              const TotalLossContext& ctx, const LossWeights& w,
                              TotalLossGrads* grads) {
  const bool has_identity = inputs.identity_label.has_value();
  const bool has_landmarks = inputs.landmark_truth.has_value();
  if (has_identity == has_landmarks) {
    throw std::invalid_argument("sample must carry exactly one label kind");
  }
  if (ctx.model == nullptr) throw std::invalid_argument("model context required");

  TotalLossBreakdown out;
  Vec g_shape = Vec::Zero(inputs.shape.values.size());
  Vec g_expr = Vec::Zero(inputs.expr.values.size());
  Eigen::MatrixX2d g_landmarks =
      Eigen::MatrixX2d::Zero(inputs.pred_landmarks.points.rows(), 2);

  // Pixelwise term, shared by both branches.
  if (inputs.photo.has_value()) {
    if (ctx.encoder == nullptr) {
      throw std::invalid_argument("photometric data needs an encoder");
    }
    out.pixel = pixel_loss(inputs.photo->recon, inputs.photo->input,
                           inputs.photo->conf);
    out.perceptual = perceptual_loss(inputs.photo->recon, inputs.photo->input,
                                     *ctx.encoder, inputs.photo->layer_confs);
    Vec g_regp_shape, g_regp_expr;
    out.regp = param_regularizer(inputs.shape, inputs.expr, *ctx.model, w,
                                 grads != nullptr ? &g_regp_shape : nullptr,
                                 grads != nullptr ? &g_regp_expr : nullptr);
    if (inputs.albedo.has_value()) {
      out.rega = albedo_regularizer(*inputs.albedo, w);
    }
    if (grads != nullptr) {
      g_shape += w.eps_reg * g_regp_shape;
      g_expr += w.eps_reg * g_regp_expr;
    }
  } else if (!ctx.drop_pix_without_recon) {
    throw std::invalid_argument("sample has no paired reconstruction");
  }
  const double l_pix = out.pixel + out.perceptual +
                       w.eps_reg * (out.regp + w.eps_rega * out.rega);

  if (has_landmarks) {
    Eigen::MatrixX2d g_land;
    out.landmark = landmark_loss(inputs.pred_landmarks, *inputs.landmark_truth,
                                 grads != nullptr ? &g_land : nullptr);
    out.total = w.eps_l * out.landmark + l_pix;
    if (grads != nullptr) g_landmarks += w.eps_l * g_land;
  } else {
    if (ctx.centers == nullptr || ctx.anchors == nullptr) {
      throw std::invalid_argument("identity sample needs centers and anchors");
    }
    Vec g_sm, g_c;
    out.sm = cosface_loss(inputs.shape, *inputs.identity_label, *ctx.anchors,
                          w.cosface_scale, w.cosface_margin,
                          grads != nullptr ? &g_sm : nullptr);
    out.center = center_loss(inputs.shape, *inputs.identity_label, *ctx.centers,
                             grads != nullptr ? &g_c : nullptr);
    if (grads != nullptr) g_shape += w.eps_s * (g_sm + w.eps_c * g_c);
    if (w.eps_kl > 0.0) {
      std::vector<Vec> kl_grads;
      const KlResult kl =
          kl_to_standard_normal(ctx.batch, ctx.model->shape_eigenvalues,
                                grads != nullptr ? &kl_grads : nullptr);
      out.kl = kl.value;
      if (grads != nullptr) {
        if (ctx.batch_index < 0 ||
            ctx.batch_index >= static_cast<int>(ctx.batch.size())) {
          throw std::invalid_argument(
              "total_loss gradient needs the sample's batch index");
        }
        g_shape += w.eps_s * w.eps_kl * kl_grads[static_cast<size_t>(ctx.batch_index)];
      }
    }
    const double l_sir = out.sm + w.eps_c * out.center + w.eps_kl * out.kl;
    out.total = w.eps_s * l_sir + l_pix;
  }

  if (grads != nullptr) {
    grads->shape = std::move(g_shape);
    grads->expr = std::move(g_expr);
    grads->pred_landmarks = std::move(g_landmarks);
  }
  return out;
}

}  // namespace sir3dmm
