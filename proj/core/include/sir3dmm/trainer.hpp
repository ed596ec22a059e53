#pragma once

#include "sir3dmm/centers.hpp"
#include "sir3dmm/losses.hpp"
#include "sir3dmm/model.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace sir3dmm {

/// One training sample. Carries either an identity label or a landmark
/// target, never both; pose and expression ground truth ride along for
/// neutral-confidence computation and landmark projection.
struct TrainSample {
  Vec features;
  std::optional<int> identity;
  std::optional<LandmarkSet> landmarks;
  std::optional<Pose> pose;
  std::optional<ExpressionCode> expr;

  bool is_recognition() const { return identity.has_value(); }
};

/// Linear stand-in for the regressing network: features -> codes + pose.
/// Output layout is [alpha_id | alpha_exp | pose(7)].
struct LinearRegressor {
  Mat weights;  // out x d
  Vec bias;     // out

  Vec predict(const Vec& features) const { return weights * features + bias; }
  static LinearRegressor zero(Eigen::Index out_dims, Eigen::Index in_dims);
};

/// Pools of reconstruction-labelled and recognition-labelled samples.
struct MixedDataset {
  std::vector<TrainSample> recon_samples;
  std::vector<TrainSample> recog_samples;

  std::size_t n_recon() const { return recon_samples.size(); }
  std::size_t n_recog() const { return recog_samples.size(); }
};

struct StageConfig {
  std::string name;
  int epochs = 1;
  bool landmark_term = true;
  bool sir_term = false;
  LossWeights weights;
};

struct TrainConfig {
  std::vector<StageConfig> stages;
  std::uint64_t seed = 1;
  double learning_rate = 0.1;
  int batch_size = 32;
  double center_learning_rate = 0.5;
  double lambda = 1.0;
  std::uint64_t anchor_seed = 99;
};

/// Per-epoch record. SIR components are absent for stages that do not
/// enable the SIR term.
struct EpochMetrics {
  int epoch = 0;
  int stage = 0;
  double loss_total = 0.0;
  std::optional<double> loss_landmark;
  std::optional<double> loss_sm;
  std::optional<double> loss_center;
  std::optional<double> loss_kl;
  double intra_dist = 0.0;   // mean distance of codes to their class mean
  double inter_dist = 0.0;   // mean pairwise distance between class means
  double norm_moment = 0.0;  // mean ||alpha/sigma||^2 / m_id over the pool
};

struct TrainResult {
  LinearRegressor regressor;
  CenterTable centers;
  ClassWeightMatrix anchors;
  std::vector<EpochMetrics> history;
};

/// Thrown when the training loss becomes non-finite.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// P = N_recon / (N_recog + N_recon): the probability of drawing a
/// recognition sample; reconstruction samples are drawn with 1 - P.
double sampling_probability(const MixedDataset& ds);

/// Fills a batch slot by slot: recognition-kind with probability p_recog,
/// then uniform within the chosen pool.
std::vector<TrainSample> draw_batch(const MixedDataset& ds, double p_recog,
                                    std::mt19937_64& rng, int batch_size);

/// Mini-batch SGD over the staged schedule. Stages without the SIR term
/// draw only reconstruction samples (warm-up); stages with it draw from the
/// mixed pools with the sampling probability above and update the center
/// table every batch.
TrainResult train(const MixedDataset& ds, const MorphableModel& model,
                  const TrainConfig& config);

struct GradientCheckCase {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradientCheckReport {
  std::vector<GradientCheckCase> cases;
  double worst() const;
};

/// Central finite differences of the end-to-end batch objective against the
/// analytic regressor-weight gradient, on a tiny synthetic instance, for the
/// landmark-only, SIR-only, and all-terms configurations.
GradientCheckReport gradient_check(std::uint64_t seed = 5);

}  // namespace sir3dmm
