#include "sir3dmm/trainer.hpp"

#include "sir3dmm/param_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sir3dmm {

namespace {

// Landmark-row slices of the bases, precomputed once per training run.
struct LandmarkRows {
  std::vector<Mat> id_rows;    // 3 x m_id per landmark
  std::vector<Mat> expr_rows;  // 3 x m_exp per landmark
  std::vector<Eigen::Vector3d> mean_rows;

  explicit LandmarkRows(const MorphableModel& model) {
    for (const auto idx : model.landmark_indices) {
      const Eigen::Index r = 3 * static_cast<Eigen::Index>(idx);
      id_rows.push_back(model.shape_basis.middleRows(r, 3));
      expr_rows.push_back(model.expr_basis.middleRows(r, 3));
      mean_rows.push_back(model.mean_shape.segment<3>(r));
    }
  }
};

struct BatchEval {
  double objective = 0.0;
  double landmark_sum = 0.0;
  int landmark_count = 0;
  double sm_sum = 0.0;
  double center_sum = 0.0;
  int recog_count = 0;
  double kl_value = 0.0;
  bool kl_present = false;
  Mat grad_w;
  Vec grad_b;
  std::vector<CenterSample> center_batch;
};

NeutralConfidence sample_confidence(const TrainSample& sample, double lambda) {
  // Missing ground truth counts as a neutral frontal observation.
  const Pose pose = sample.pose.value_or(Pose{});
  const ExpressionCode expr =
      sample.expr.value_or(ExpressionCode{Vec::Zero(0)});
  return neutral_confidence(pose, expr, lambda);
}

BatchEval evaluate_batch(const std::vector<TrainSample>& batch,
                         const MorphableModel& model, const LandmarkRows& rows,
                         const LinearRegressor& reg, const CenterTable& centers,
                         const ClassWeightMatrix& anchors,
                         const StageConfig& stage, double lambda,
                         bool want_grads) {
  const LossWeights& w = stage.weights;
  const Eigen::Index m_id = model.id_dims();
  const Eigen::Index m_exp = model.expr_dims();
  const Eigen::Index out_dims = reg.weights.rows();
  const auto batch_size = static_cast<double>(batch.size());

  BatchEval eval;
  if (want_grads) {
    eval.grad_w = Mat::Zero(out_dims, reg.weights.cols());
    eval.grad_b = Vec::Zero(out_dims);
  }

  struct RecogEntry {
    size_t sample_index;
    int label;
  };
  std::vector<ShapeCode> recog_codes;
  std::vector<RecogEntry> recog_entries;
  std::vector<Vec> outputs(batch.size());
  std::vector<Vec> grad_outputs(batch.size(), Vec::Zero(out_dims));
  double total = 0.0;

  const bool use_landmark = stage.landmark_term && w.eps_l > 0.0;
  const bool use_sir = stage.sir_term && w.eps_s > 0.0;

  for (size_t i = 0; i < batch.size(); ++i) {
    const TrainSample& sample = batch[i];
    outputs[i] = reg.predict(sample.features);
    const Vec& y = outputs[i];
    const ShapeCode alpha_id{y.head(m_id)};
    const ExpressionCode alpha_exp{y.segment(m_id, m_exp)};

    if (sample.landmarks.has_value() && use_landmark) {
      if (!sample.pose.has_value()) {
        throw std::invalid_argument("landmark sample is missing its pose");
      }
      const Pose& pose = *sample.pose;
      const Eigen::Matrix3d rot = pose.rotation.toRotationMatrix();
      const Eigen::Matrix<double, 2, 3> proj = pose.focal * rot.topRows<2>();

      const auto n_land = static_cast<Eigen::Index>(rows.mean_rows.size());
      LandmarkSet pred;
      pred.points.resize(n_land, 2);
      for (Eigen::Index r = 0; r < n_land; ++r) {
        const auto ri = static_cast<size_t>(r);
        const Eigen::Vector3d v = rows.mean_rows[ri] +
                                  rows.id_rows[ri] * alpha_id.values +
                                  rows.expr_rows[ri] * alpha_exp.values;
        pred.points.row(r) = (proj * v + pose.translation2d).transpose();
      }

      Eigen::MatrixX2d g_pred;
      const double land = landmark_loss(pred, *sample.landmarks,
                                        want_grads ? &g_pred : nullptr);
      eval.landmark_sum += land;
      eval.landmark_count += 1;
      total += w.eps_l * land;
      if (want_grads) {
        Vec g_id = Vec::Zero(m_id);
        Vec g_exp = Vec::Zero(m_exp);
        for (Eigen::Index r = 0; r < n_land; ++r) {
          const auto ri = static_cast<size_t>(r);
          const Eigen::Vector2d gr = g_pred.row(r).transpose();
          const Eigen::Vector3d back = proj.transpose() * gr;
          g_id += rows.id_rows[ri].transpose() * back;
          g_exp += rows.expr_rows[ri].transpose() * back;
        }
        grad_outputs[i].head(m_id) += w.eps_l * g_id;
        grad_outputs[i].segment(m_id, m_exp) += w.eps_l * g_exp;
      }
    }

    if (sample.identity.has_value() && use_sir) {
      const int label = *sample.identity;
      Vec g_sm, g_c;
      const double sm =
          cosface_loss(alpha_id, label, anchors, w.cosface_scale,
                       w.cosface_margin, want_grads ? &g_sm : nullptr);
      const double c =
          center_loss(alpha_id, label, centers, want_grads ? &g_c : nullptr);
      eval.sm_sum += sm;
      eval.center_sum += c;
      total += w.eps_s * (sm + w.eps_c * c);
      if (want_grads) {
        grad_outputs[i].head(m_id) += w.eps_s * (g_sm + w.eps_c * g_c);
      }
      recog_codes.push_back(alpha_id);
      recog_entries.push_back({i, label});
      eval.center_batch.push_back(
          {alpha_id, label, sample_confidence(sample, lambda)});
    }
  }
  eval.recog_count = static_cast<int>(recog_codes.size());

  // Distribution term over the identity codes of the batch; each identity
  // sample carries the shared batch value.
  if (use_sir && w.eps_kl > 0.0 && recog_codes.size() >= 2) {
    std::vector<Vec> kl_grads;
    const KlResult kl =
        kl_to_standard_normal(recog_codes, model.shape_eigenvalues,
                              want_grads ? &kl_grads : nullptr);
    eval.kl_value = kl.value;
    eval.kl_present = true;
    total += static_cast<double>(recog_codes.size()) * w.eps_s * w.eps_kl * kl.value;
    if (want_grads) {
      const double factor =
          static_cast<double>(recog_codes.size()) * w.eps_s * w.eps_kl;
      for (size_t j = 0; j < recog_entries.size(); ++j) {
        grad_outputs[recog_entries[j].sample_index].head(m_id) +=
            factor * kl_grads[j];
      }
    }
  }

  eval.objective = total / batch_size;
  if (!std::isfinite(eval.objective)) {
    throw DivergenceError("training loss became non-finite");
  }
  if (want_grads) {
    for (size_t i = 0; i < batch.size(); ++i) {
      eval.grad_w += grad_outputs[i] * batch[i].features.transpose();
      eval.grad_b += grad_outputs[i];
    }
    eval.grad_w /= batch_size;
    eval.grad_b /= batch_size;
  }
  return eval;
}

int count_classes(const MixedDataset& ds) {
  int max_label = -1;
  for (const auto& s : ds.recog_samples) {
    if (s.identity.has_value()) max_label = std::max(max_label, *s.identity);
  }
  return max_label + 1;
}

EpochMetrics pool_metrics(const MixedDataset& ds, const MorphableModel& model,
                          const LinearRegressor& reg, int num_classes) {
  EpochMetrics m;
  if (ds.recog_samples.empty() || num_classes == 0) return m;
  const Eigen::Index m_id = model.id_dims();

  Mat codes(static_cast<Eigen::Index>(ds.n_recog()), m_id);
  std::vector<int> labels(ds.n_recog());
  Mat class_sum = Mat::Zero(num_classes, m_id);
  Vec class_count = Vec::Zero(num_classes);
  double moment = 0.0;
  for (size_t i = 0; i < ds.recog_samples.size(); ++i) {
    const Vec y = reg.predict(ds.recog_samples[i].features);
    const Vec code = y.head(m_id);
    codes.row(static_cast<Eigen::Index>(i)) = code.transpose();
    labels[i] = *ds.recog_samples[i].identity;
    class_sum.row(labels[i]) += code.transpose();
    class_count(labels[i]) += 1.0;
    moment += (code.array() / model.shape_eigenvalues.array()).square().sum() /
              static_cast<double>(m_id);
  }
  m.norm_moment = moment / static_cast<double>(ds.n_recog());

  Mat class_mean = class_sum;
  for (int k = 0; k < num_classes; ++k) {
    if (class_count(k) > 0.0) class_mean.row(k) /= class_count(k);
  }

  double intra = 0.0;
  for (size_t i = 0; i < ds.recog_samples.size(); ++i) {
    intra += (codes.row(static_cast<Eigen::Index>(i)) - class_mean.row(labels[i]))
                 .norm();
  }
  m.intra_dist = intra / static_cast<double>(ds.n_recog());

  double inter = 0.0;
  int pairs = 0;
  for (int a = 0; a < num_classes; ++a) {
    if (class_count(a) == 0.0) continue;
    for (int b = a + 1; b < num_classes; ++b) {
      if (class_count(b) == 0.0) continue;
      inter += (class_mean.row(a) - class_mean.row(b)).norm();
      ++pairs;
    }
  }
  m.inter_dist = pairs > 0 ? inter / pairs : 0.0;
  return m;
}

}  // namespace

LinearRegressor LinearRegressor::zero(Eigen::Index out_dims, Eigen::Index in_dims) {
  return {Mat::Zero(out_dims, in_dims), Vec::Zero(out_dims)};
}

double sampling_probability(const MixedDataset& ds) {
  const double recon = static_cast<double>(ds.n_recon());
  const double recog = static_cast<double>(ds.n_recog());
  if (recon + recog == 0.0) throw std::invalid_argument("empty mixed dataset");
  return recon / (recog + recon);
}

std::vector<TrainSample> draw_batch(const MixedDataset& ds, double p_recog,
                                    std::mt19937_64& rng, int batch_size) {
  if (batch_size <= 0) throw std::invalid_argument("batch size must be positive");
  if (p_recog < 0.0 || p_recog > 1.0) {
    throw std::invalid_argument("probability must lie in [0, 1]");
  }
  if (p_recog > 0.0 && ds.recog_samples.empty()) {
    throw std::invalid_argument("recognition pool is empty");
  }
  if (p_recog < 1.0 && ds.recon_samples.empty()) {
    throw std::invalid_argument("reconstruction pool is empty");
  }
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<TrainSample> batch;
  batch.reserve(static_cast<size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    const bool recog = coin(rng) < p_recog;
    const auto& pool = recog ? ds.recog_samples : ds.recon_samples;
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    batch.push_back(pool[pick(rng)]);
  }
  return batch;
}

TrainResult train(const MixedDataset& ds, const MorphableModel& model,
                  const TrainConfig& config) {
  if (config.stages.empty()) {
    throw std::invalid_argument("training config needs at least one stage");
  }
  if (config.batch_size <= 0 || config.learning_rate < 0.0) {
    throw std::invalid_argument("invalid optimizer settings");
  }

  const Eigen::Index m_id = model.id_dims();
  const Eigen::Index m_exp = model.expr_dims();
  const Eigen::Index out_dims = m_id + m_exp + 7;  // quaternion + focal + t2d
  Eigen::Index in_dims = 0;
  if (!ds.recon_samples.empty()) in_dims = ds.recon_samples.front().features.size();
  if (!ds.recog_samples.empty()) in_dims = ds.recog_samples.front().features.size();

  TrainResult result;
  result.regressor = LinearRegressor::zero(out_dims, in_dims);

  const int num_classes = count_classes(ds);
  if (num_classes > 0) {
    result.centers =
        init_centers(num_classes, static_cast<int>(m_id), CenterInit::kZero,
                     nullptr, config.center_learning_rate, config.lambda);
    result.anchors = ClassWeightMatrix::random(
        num_classes, static_cast<int>(m_id), config.anchor_seed);
  }

  const LandmarkRows rows(model);
  std::mt19937_64 rng(config.seed);
  int epoch_index = 0;

  for (size_t stage_index = 0; stage_index < config.stages.size(); ++stage_index) {
    const StageConfig& stage = config.stages[stage_index];
    const double p_recog = stage.sir_term ? sampling_probability(ds) : 0.0;
    const size_t active_pool =
        stage.sir_term ? ds.n_recon() + ds.n_recog() : ds.n_recon();
    const int steps = std::max<int>(
        1, static_cast<int>((active_pool + config.batch_size - 1) /
                            static_cast<size_t>(config.batch_size)));

    for (int e = 0; e < stage.epochs; ++e) {
      double total_sum = 0.0;
      double land_sum = 0.0, sm_sum = 0.0, center_sum = 0.0, kl_sum = 0.0;
      int land_batches = 0, recog_batches = 0, kl_batches = 0;

      for (int step = 0; step < steps; ++step) {
        const auto batch = draw_batch(ds, p_recog, rng, config.batch_size);
        BatchEval eval =
            evaluate_batch(batch, model, rows, result.regressor, result.centers,
                           result.anchors, stage, config.lambda, true);
        result.regressor.weights -= config.learning_rate * eval.grad_w;
        result.regressor.bias -= config.learning_rate * eval.grad_b;
        if (stage.sir_term && !eval.center_batch.empty()) {
          result.centers = update_centers(result.centers, eval.center_batch);
        }

        total_sum += eval.objective;
        if (eval.landmark_count > 0) {
          land_sum += eval.landmark_sum / eval.landmark_count;
          ++land_batches;
        }
        if (eval.recog_count > 0) {
          sm_sum += eval.sm_sum / eval.recog_count;
          center_sum += eval.center_sum / eval.recog_count;
          ++recog_batches;
        }
        if (eval.kl_present) {
          kl_sum += eval.kl_value;
          ++kl_batches;
        }
      }

      EpochMetrics metrics =
          pool_metrics(ds, model, result.regressor, num_classes);
      metrics.epoch = epoch_index++;
      metrics.stage = static_cast<int>(stage_index);
      metrics.loss_total = total_sum / steps;
      if (stage.landmark_term) {
        metrics.loss_landmark = land_batches > 0 ? land_sum / land_batches : 0.0;
      }
      if (stage.sir_term) {
        metrics.loss_sm = recog_batches > 0 ? sm_sum / recog_batches : 0.0;
        metrics.loss_center =
            recog_batches > 0 ? center_sum / recog_batches : 0.0;
        metrics.loss_kl = kl_batches > 0 ? kl_sum / kl_batches : 0.0;
      }
      result.history.push_back(metrics);
    }
  }
  return result;
}

double GradientCheckReport::worst() const {
  double worst = 0.0;
  for (const auto& c : cases) worst = std::max(worst, c.max_rel_err);
  return worst;
}

namespace {

// Small orthonormal-basis model and mixed batch for end-to-end checks.
struct TinyInstance {
  MorphableModel model;
  MixedDataset ds;
  LinearRegressor reg;
  CenterTable centers;
  ClassWeightMatrix anchors;
};

TinyInstance make_tiny_instance(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int n = 8, m_id = 3, m_exp = 2, d = 4;

  TinyInstance t;
  t.model.mean_shape = Vec::NullaryExpr(3 * n, [&](Eigen::Index) {
    return 10.0 * gauss(rng);
  });
  Mat raw(3 * n, m_id + m_exp);
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    for (Eigen::Index j = 0; j < raw.cols(); ++j) raw(i, j) = gauss(rng);
  }
  const Mat q = Eigen::HouseholderQR<Mat>(raw).householderQ() *
                Mat::Identity(3 * n, m_id + m_exp);
  t.model.shape_basis = q.leftCols(m_id);
  t.model.expr_basis = q.rightCols(m_exp);
  t.model.shape_eigenvalues = (Vec(m_id) << 1.5, 1.0, 0.7).finished();
  t.model.expr_eigenvalues = (Vec(m_exp) << 0.8, 0.5).finished();
  t.model.landmark_indices = {0, 3, 5, 7};

  auto random_pose = [&]() {
    Pose pose;
    pose.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(
        0.3 * gauss(rng), Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng))
                              .normalized()));
    pose.translation2d = Eigen::Vector2d(gauss(rng), gauss(rng));
    pose.focal = 1.2;
    return pose;
  };
  auto random_features = [&]() {
    return Vec::NullaryExpr(d, [&](Eigen::Index) { return gauss(rng); }).eval();
  };

  for (int i = 0; i < 6; ++i) {
    TrainSample s;
    s.features = random_features();
    LandmarkSet truth;
    truth.points = Eigen::MatrixX2d::NullaryExpr(
        4, 2, [&](Eigen::Index, Eigen::Index) { return 5.0 * gauss(rng); });
    s.landmarks = truth;
    s.pose = random_pose();
    t.ds.recon_samples.push_back(std::move(s));
  }
  for (int i = 0; i < 6; ++i) {
    TrainSample s;
    s.features = random_features();
    s.identity = i % 3;
    s.pose = random_pose();
    s.expr = ExpressionCode{Vec::Zero(m_exp)};
    t.ds.recog_samples.push_back(std::move(s));
  }

  t.reg.weights = Mat::NullaryExpr(m_id + m_exp + 7, d,
                                   [&](Eigen::Index, Eigen::Index) {
                                     return 0.5 * gauss(rng);
                                   });
  t.reg.bias = Vec::NullaryExpr(m_id + m_exp + 7,
                                [&](Eigen::Index) { return 0.1 * gauss(rng); });
  t.centers = init_centers(3, m_id);
  t.centers.centers = Mat::NullaryExpr(
      3, m_id, [&](Eigen::Index, Eigen::Index) { return gauss(rng); });
  t.anchors = ClassWeightMatrix::random(3, m_id, seed + 17);
  return t;
}

double check_case(const TinyInstance& t, const StageConfig& stage) {
  const LandmarkRows rows(t.model);
  std::vector<TrainSample> batch = t.ds.recon_samples;
  batch.insert(batch.end(), t.ds.recog_samples.begin(), t.ds.recog_samples.end());

  const BatchEval analytic = evaluate_batch(batch, t.model, rows, t.reg,
                                            t.centers, t.anchors, stage, 1.0, true);
  auto objective_at = [&](const LinearRegressor& reg) {
    return evaluate_batch(batch, t.model, rows, reg, t.centers, t.anchors, stage,
                          1.0, false)
        .objective;
  };

  const double h = 1e-5;
  Mat fd_w = Mat::Zero(t.reg.weights.rows(), t.reg.weights.cols());
  Vec fd_b = Vec::Zero(t.reg.bias.size());
  for (Eigen::Index i = 0; i < t.reg.weights.rows(); ++i) {
    for (Eigen::Index j = 0; j < t.reg.weights.cols(); ++j) {
      LinearRegressor plus = t.reg, minus = t.reg;
      plus.weights(i, j) += h;
      minus.weights(i, j) -= h;
      fd_w(i, j) = (objective_at(plus) - objective_at(minus)) / (2.0 * h);
    }
  }
  for (Eigen::Index i = 0; i < t.reg.bias.size(); ++i) {
    LinearRegressor plus = t.reg, minus = t.reg;
    plus.bias(i) += h;
    minus.bias(i) -= h;
    fd_b(i) = (objective_at(plus) - objective_at(minus)) / (2.0 * h);
  }

  const double scale = std::max({analytic.grad_w.cwiseAbs().maxCoeff(),
                                 fd_w.cwiseAbs().maxCoeff(),
                                 analytic.grad_b.cwiseAbs().maxCoeff(),
                                 fd_b.cwiseAbs().maxCoeff(), 1e-6});
  const double err = std::max((analytic.grad_w - fd_w).cwiseAbs().maxCoeff(),
                              (analytic.grad_b - fd_b).cwiseAbs().maxCoeff());
  return err / scale;
}

}  // namespace

GradientCheckReport gradient_check(std::uint64_t seed) {
  const TinyInstance t = make_tiny_instance(seed);

  StageConfig landmark_only;
  landmark_only.landmark_term = true;
  landmark_only.sir_term = false;
  landmark_only.weights.eps_l = 1.0;

  StageConfig sir_only;
  sir_only.landmark_term = false;
  sir_only.sir_term = true;
  sir_only.weights.eps_s = 1.0;
  sir_only.weights.eps_c = 0.5;
  sir_only.weights.eps_kl = 0.5;

  StageConfig all_terms;
  all_terms.landmark_term = true;
  all_terms.sir_term = true;

  GradientCheckReport report;
  report.cases.push_back({"landmark-only", check_case(t, landmark_only)});
  report.cases.push_back({"sir-only", check_case(t, sir_only)});
  report.cases.push_back({"all-terms", check_case(t, all_terms)});
  return report;
}

}  // namespace sir3dmm
