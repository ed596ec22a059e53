#pragma once

#include "sir3dmm/centers.hpp"
#include "sir3dmm/model.hpp"
#include "sir3dmm/param_geometry.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

namespace sir3dmm {

/// Per-term loss weights. All default values are configuration, tunable via
/// the JSON config surface.
struct LossWeights {
  double eps_l = 1.0;      // landmark term
  double eps_s = 1.0;      // SIR term
  double eps_reg = 1e-3;   // parameter/albedo regularizer inside the pixel term
  double eps_rega = 1e-2;  // albedo part of the regularizer
  double eps_id = 1.0;     // identity code regularizer
  double eps_exp = 1.0;    // expression code regularizer
  double eps_uv = 1e-3;    // albedo residual term
  double eps_kl = 0.5;     // KL part of the SIR term
  double eps_c = 0.5;      // center part of the SIR term
  double cosface_scale = 30.0;
  double cosface_margin = 0.35;
};

/// H x W x C image with C in {1, 3}, one matrix per channel.
struct ImageGrid {
  std::vector<Mat> channels;

  Eigen::Index height() const { return channels.empty() ? 0 : channels[0].rows(); }
  Eigen::Index width() const { return channels.empty() ? 0 : channels[0].cols(); }
  int channel_count() const { return static_cast<int>(channels.size()); }

  static ImageGrid constant(Eigen::Index h, Eigen::Index w, int c, double value);
};

/// Strictly positive per-pixel confidence (sigma).
using ConfidenceMap = Mat;

/// H x W x 3 albedo values.
struct UVGrid {
  std::array<Mat, 3> channels;

  Eigen::Index height() const { return channels[0].rows(); }
  Eigen::Index width() const { return channels[0].cols(); }
};

/// Deterministic map from an image to a list of per-layer feature grids.
class FeatureEncoder {
 public:
  virtual ~FeatureEncoder() = default;
  virtual int num_layers() const = 0;
  /// (H_k, W_k, C_k) for each layer given an input shape.
  virtual std::vector<std::array<Eigen::Index, 3>> layer_shapes(
      Eigen::Index h, Eigen::Index w, int c) const = 0;
  virtual std::vector<ImageGrid> encode(const ImageGrid& image) const = 0;
  /// Adjoint of encode: maps per-layer cotangents to an image cotangent.
  virtual ImageGrid encode_vjp(const ImageGrid& image,
                               const std::vector<ImageGrid>& cotangents) const = 0;
};

/// Average-pool pyramid: layer k is the input pooled by a factor of 2^k
/// (layer 0 is the identity). One level gives a plain identity encoder,
/// which is the self-contained test default.
class AveragePoolPyramidEncoder final : public FeatureEncoder {
 public:
  explicit AveragePoolPyramidEncoder(int levels);

  int num_layers() const override { return levels_; }
  std::vector<std::array<Eigen::Index, 3>> layer_shapes(
      Eigen::Index h, Eigen::Index w, int c) const override;
  std::vector<ImageGrid> encode(const ImageGrid& image) const override;
  ImageGrid encode_vjp(const ImageGrid& image,
                       const std::vector<ImageGrid>& cotangents) const override;

 private:
  int levels_;
};

/// Per-class unit-norm anchor directions in shape-code space.
struct ClassWeightMatrix {
  Mat weights;  // K x m, unit-norm rows

  int num_classes() const { return static_cast<int>(weights.rows()); }
  static ClassWeightMatrix random(int num_classes, int dims, std::uint64_t seed);
};

/// (1/N) sqrt(sum of squared landmark coordinate differences).
/// Gradient at zero distance is the zero subgradient.
double landmark_loss(const LandmarkSet& pred, const LandmarkSet& truth,
                     Eigen::MatrixX2d* grad_pred = nullptr);

/// Laplace-likelihood photometric loss under a confidence map:
/// (1/|Omega|) sum [ln(sqrt(2) sigma) + sqrt(2) l1 / sigma], with the
/// per-pixel L1 distance averaged over channels.
double pixel_loss(const ImageGrid& recon, const ImageGrid& input,
                  const ConfidenceMap& conf, ImageGrid* grad_recon = nullptr,
                  Mat* grad_conf = nullptr);

/// Gaussian-likelihood feature-space loss, summed over encoder layers:
/// (1/|Omega_k|) sum [ln(sqrt(2 pi) sigma) + l^2 / (2 sigma^2)].
double perceptual_loss(const ImageGrid& recon, const ImageGrid& input,
                       const FeatureEncoder& encoder,
                       const std::vector<ConfidenceMap>& confs,
                       ImageGrid* grad_recon = nullptr,
                       std::vector<Mat>* grad_confs = nullptr);

/// eps_id ||alpha_id / sigma_id||^2 + eps_exp ||alpha_exp / sigma_exp||^2.
double param_regularizer(const ShapeCode& shape, const ExpressionCode& expr,
                         const MorphableModel& model, const LossWeights& w,
                         Vec* grad_shape = nullptr, Vec* grad_expr = nullptr);

/// Smoothness plus residual albedo regularizer: for every pixel the L2 norm
/// of its difference from the mean of its in-range 4-neighbors, plus
/// eps_uv ||A||^2. Needs at least two pixels.
double albedo_regularizer(const UVGrid& uv, const LossWeights& w,
                          UVGrid* grad = nullptr);

/// Additive-cosine-margin softmax over class anchors, numerically stabilized.
/// Depends on the code only through its direction.
double cosface_loss(const ShapeCode& shape, int label,
                    const ClassWeightMatrix& anchors, double scale,
                    double margin, Vec* grad = nullptr);

/// 1/2 ||alpha - c_label||^2.
double center_loss(const ShapeCode& shape, int label, const CenterTable& centers,
                   Vec* grad = nullptr);

/// Identification + distribution term: L_sm + eps_c L_c + eps_kl KL(batch).
/// The KL part is evaluated over the whole batch of identity-branch codes;
/// when a gradient is requested, batch_index must locate `shape` inside
/// `batch` so the batch-coupled KL gradient can be attributed.
double sir_loss(const ShapeCode& shape, int label, const CenterTable& centers,
                const ClassWeightMatrix& anchors, const Vec& eigenvalues,
                const std::vector<ShapeCode>& batch, const LossWeights& w,
                Vec* grad = nullptr, int batch_index = -1);

/// Photometric inputs for the pixelwise term, when a paired reconstruction
/// exists for the sample.
struct PhotometricData {
  ImageGrid recon;
  ImageGrid input;
  ConfidenceMap conf;
  std::vector<ConfidenceMap> layer_confs;
};

/// Everything a single training sample contributes to the total loss.
/// Exactly one of identity_label / landmark_truth must be present.
struct TotalLossInputs {
  std::optional<int> identity_label;
  std::optional<LandmarkSet> landmark_truth;

  LandmarkSet pred_landmarks;
  ShapeCode shape;
  ExpressionCode expr;
  std::optional<PhotometricData> photo;
  std::optional<UVGrid> albedo;
};

struct TotalLossContext {
  const MorphableModel* model = nullptr;
  const CenterTable* centers = nullptr;
  const ClassWeightMatrix* anchors = nullptr;
  const FeatureEncoder* encoder = nullptr;
  std::vector<ShapeCode> batch;  // identity-branch codes for the KL term
  int batch_index = -1;          // index of this sample's code in `batch`
  /// Drops the whole pixelwise term when no paired reconstruction exists
  /// (identity datasets carry no geometry labels); when false, a missing
  /// reconstruction is an error.
  bool drop_pix_without_recon = true;
};

struct TotalLossBreakdown {
  double total = 0.0;
  double landmark = 0.0;
  double pixel = 0.0;
  double perceptual = 0.0;
  double regp = 0.0;
  double rega = 0.0;
  double sm = 0.0;
  double center = 0.0;
  double kl = 0.0;
};

struct TotalLossGrads {
  Vec shape;
  Vec expr;
  Eigen::MatrixX2d pred_landmarks;
};

/// Label-routed total loss:
///   reconstruction sample: eps_l L_land + L_pix
///   identity sample:       eps_s L_SIR + L_pix
/// with L_pix = L_recon + eps_reg (L_regp + eps_rega L_rega).
TotalLossBreakdown total_loss(const TotalLossInputs& inputs,
                              const TotalLossContext& ctx, const LossWeights& w,
                              TotalLossGrads* grads = nullptr);

}  // namespace sir3dmm
