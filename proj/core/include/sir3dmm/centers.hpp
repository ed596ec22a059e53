#pragma once

#include "sir3dmm/model.hpp"

#include <vector>

namespace sir3dmm {

/// Similarity of a sample to a neutral frontal face, in [0, 1].
struct NeutralConfidence {
  double value = 0.0;
};

/// Per-identity shape-parameter centers with weighted-update state.
/// Class ids are dense 0..K-1.
struct CenterTable {
  Mat centers;             // K x m_id
  Eigen::VectorXi counts;  // samples that have contributed to each center
  double learning_rate = 0.5;  // in (0, 1]
  double lambda = 1.0;         // expression decay of the neutral confidence

  int num_classes() const { return static_cast<int>(centers.rows()); }
  Eigen::Index dims() const { return centers.cols(); }
};

enum class CenterInit { kZero, kFirstSample };

struct CenterSample {
  ShapeCode code;
  int label = 0;
  NeutralConfidence confidence;
};

/// f = 1/8 (cos a + 1)(cos b + 1)(cos g + 1) exp(-lambda ||alpha_exp||),
/// with (a, b, g) the ZYX Euler angles of the pose.
NeutralConfidence neutral_confidence(const Pose& pose, const ExpressionCode& expr,
                                     double lambda);

/// Zero-init by default; kFirstSample seeds each center with the first batch
/// sample of its class (remaining classes stay zero).
CenterTable init_centers(int num_classes, int m_id,
                         CenterInit strategy = CenterInit::kZero,
                         const std::vector<CenterSample>* samples = nullptr,
                         double learning_rate = 0.5, double lambda = 1.0);

/// Confidence-weighted center update. For every class j:
///   delta_j = sum_i d_ij f_i (c_j - alpha_i) / (1 + sum_i d_ij f_i)
///   c_j <- c_j - lr * delta_j
/// where d_ij selects the samples labelled j. Classes absent from the batch
/// are untouched. The per-sample weighting reduces to a single trailing
/// factor when all confidences in a class are equal.
CenterTable update_centers(const CenterTable& table,
                           const std::vector<CenterSample>& batch);

}  // namespace sir3dmm
