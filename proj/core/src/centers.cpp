#include "sir3dmm/centers.hpp"

#include <cmath>
#include <stdexcept>

namespace sir3dmm {

NeutralConfidence neutral_confidence(const Pose& pose, const ExpressionCode& expr,
                                     double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("lambda must be non-negative");
  const EulerAngles angles = extract_euler(pose);
  const double pose_factor = (std::cos(angles.yaw) + 1.0) *
                             (std::cos(angles.pitch) + 1.0) *
                             (std::cos(angles.roll) + 1.0) / 8.0;
  const double expr_factor = std::exp(-lambda * expr.values.norm());
  return NeutralConfidence{pose_factor * expr_factor};
}

CenterTable init_centers(int num_classes, int m_id, CenterInit strategy,
                         const std::vector<CenterSample>* samples,
                         double learning_rate, double lambda) {
  if (num_classes <= 0 || m_id <= 0) {
    throw std::invalid_argument("center table dimensions must be positive");
  }
  if (learning_rate <= 0.0 || learning_rate > 1.0) {
    throw std::invalid_argument("center learning rate must be in (0, 1]");
  }
  CenterTable table;
  table.centers = Mat::Zero(num_classes, m_id);
  table.counts = Eigen::VectorXi::Zero(num_classes);
  table.learning_rate = learning_rate;
  table.lambda = lambda;

  if (strategy == CenterInit::kFirstSample) {
    if (samples == nullptr) {
      throw std::invalid_argument("first-sample init needs a sample batch");
    }
    Eigen::VectorXi seeded = Eigen::VectorXi::Zero(num_classes);
    for (const auto& s : *samples) {
      if (s.label < 0 || s.label >= num_classes) {
        throw std::invalid_argument("sample label outside the class range");
      }
      if (s.code.values.size() != m_id) {
        throw std::invalid_argument("sample code length does not match m_id");
      }
      if (seeded(s.label) == 0) {
        table.centers.row(s.label) = s.code.values.transpose();
        seeded(s.label) = 1;
      }
    }
  }
  return table;
}

CenterTable update_centers(const CenterTable& table,
                           const std::vector<CenterSample>& batch) {
  const int k = table.num_classes();
  CenterTable out = table;

  Mat weighted_sum = Mat::Zero(k, table.dims());
  Vec weight_total = Vec::Zero(k);
  Eigen::VectorXi hits = Eigen::VectorXi::Zero(k);

  for (const auto& s : batch) {
    if (s.label < 0 || s.label >= k) {
      throw std::invalid_argument("unknown class id in center update");
    }
    if (s.code.values.size() != table.dims()) {
      throw std::invalid_argument("code length does not match center table");
    }
    const double f = s.confidence.value;
    if (!(f >= 0.0 && f <= 1.0)) {
      throw std::invalid_argument("neutral confidence must lie in [0, 1]");
    }
    weighted_sum.row(s.label) +=
        f * (table.centers.row(s.label) - s.code.values.transpose());
    weight_total(s.label) += f;
    hits(s.label) += 1;
  }

  for (int j = 0; j < k; ++j) {
    if (hits(j) == 0) continue;  // untouched classes stay bit-identical
    const Vec delta = weighted_sum.row(j).transpose() / (1.0 + weight_total(j));
    out.centers.row(j) -= table.learning_rate * delta.transpose();
    out.counts(j) += hits(j);
  }
  return out;
}

}  // namespace sir3dmm
