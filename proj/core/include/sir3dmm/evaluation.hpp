#pragma once

#include "sir3dmm/model.hpp"

#include <optional>
#include <vector>

namespace sir3dmm {

struct VerificationPair {
  Vec a;
  Vec b;
  bool same_identity = false;
};

enum class VerificationMetric { kEuclidean, kCosine };

struct RocPoint {
  double threshold = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
};

struct VerificationReport {
  double accuracy = 0.0;
  double threshold = 0.0;
  std::vector<RocPoint> roc;
};

/// Sweeps decision thresholds over the observed pair distances (midpoints of
/// the sorted values plus sentinels below and above) and returns the best
/// accuracy, its threshold, and the ROC samples. Pairs closer than the
/// threshold are predicted same-identity. Needs both label kinds present.
VerificationReport verification_accuracy(const std::vector<VerificationPair>& pairs,
                                         VerificationMetric metric);

struct SimilarityTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double scale = 1.0;

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return scale * (rotation * p) + translation;
  }
  Eigen::MatrixX3d apply(const Eigen::MatrixX3d& points) const;
};

/// Least-squares similarity transform (rotation, translation, isotropic
/// scale) mapping src onto dst. Throws on coincident or collinear input.
SimilarityTransform umeyama_similarity(const Eigen::MatrixX3d& src,
                                       const Eigen::MatrixX3d& dst);

struct AlignmentResult {
  SimilarityTransform transform;
  double rmse_point_to_plane = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> rmse_history;  // point-to-point RMSE after each fit
};

/// ICP with isotropic scale: nearest-neighbour correspondences alternate
/// with the closed-form similarity fit (point-to-point), after a centroid
/// and RMS-radius pre-alignment. The reported metric is point-to-plane
/// against the target's vertex normals.
AlignmentResult icp_align(const Mesh& source, const Mesh& target,
                          int max_iters = 50, double tol = 1e-10);

/// Area-weighted vertex normals, normalized. Throws if a vertex has no
/// incident face area.
Eigen::MatrixX3d vertex_normals(const Mesh& mesh);

/// Optional crop: only source vertices within `radius` of the target's
/// designated vertex participate.
struct CropSpec {
  std::int32_t center_vertex = 0;
  double radius = 0.0;
};

/// RMSE over source vertices of |<p - q_nn, n_nn>|, the distance to the
/// tangent plane of the nearest target vertex.
double point_to_plane_rmse(const Eigen::MatrixX3d& source_vertices,
                           const Mesh& target,
                           const std::optional<CropSpec>& crop = std::nullopt);

/// Per-source-vertex point-to-plane distances (the CED inputs).
std::vector<double> point_to_plane_errors(const Eigen::MatrixX3d& source_vertices,
                                          const Mesh& target);

struct CEDCurve {
  std::vector<double> values;     // sorted ascending
  std::vector<double> fractions;  // non-decreasing, ends at 1
};

/// Empirical CDF of the error list.
CEDCurve ced_curve(std::vector<double> errors);

}  // namespace sir3dmm
