#include "sir3dmm/evaluation.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace sir3dmm {

namespace {

double pair_distance(const VerificationPair& pair, VerificationMetric metric) {
  if (pair.a.size() != pair.b.size()) {
    throw std::invalid_argument("pair vectors have different lengths");
  }
  if (metric == VerificationMetric::kEuclidean) {
    return (pair.a - pair.b).norm();
  }
  const double na = pair.a.norm();
  const double nb = pair.b.norm();
  if (na == 0.0 || nb == 0.0) {
    throw std::invalid_argument("cosine distance undefined for zero vectors");
  }
  return 1.0 - pair.a.dot(pair.b) / (na * nb);
}

// Exact nearest neighbour over a static point set.
class KdTree3 {
 public:
  explicit KdTree3(const Eigen::MatrixX3d& points) : points_(points) {
    if (points.rows() == 0) throw std::invalid_argument("empty point set");
    std::vector<int> order(static_cast<size_t>(points.rows()));
    std::iota(order.begin(), order.end(), 0);
    nodes_.reserve(order.size());
    root_ = build(order, 0, static_cast<int>(order.size()), 0);
  }

  int nearest(const Eigen::Vector3d& query) const {
    int best = -1;
    double best_sq = std::numeric_limits<double>::infinity();
    search(root_, query, best, best_sq);
    return best;
  }

 private:
  struct Node {
    int point = -1;
    int left = -1;
    int right = -1;
    int axis = 0;
  };

  int build(std::vector<int>& order, int lo, int hi, int depth) {
    if (lo >= hi) return -1;
    const int axis = depth % 3;
    const int mid = lo + (hi - lo) / 2;
    std::nth_element(order.begin() + lo, order.begin() + mid, order.begin() + hi,
                     [&](int a, int b) {
                       if (points_(a, axis) != points_(b, axis)) {
                         return points_(a, axis) < points_(b, axis);
                       }
                       return a < b;  // deterministic tie break
                     });
    Node node;
    node.point = order[static_cast<size_t>(mid)];
    node.axis = axis;
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    const int left = build(order, lo, mid, depth + 1);
    const int right = build(order, mid + 1, hi, depth + 1);
    nodes_[static_cast<size_t>(id)].left = left;
    nodes_[static_cast<size_t>(id)].right = right;
    return id;
  }

  void search(int id, const Eigen::Vector3d& query, int& best,
              double& best_sq) const {
    if (id < 0) return;
    const Node& node = nodes_[static_cast<size_t>(id)];
    const Eigen::Vector3d p = points_.row(node.point).transpose();
    const double d2 = (p - query).squaredNorm();
    if (d2 < best_sq || (d2 == best_sq && node.point < best)) {
      best_sq = d2;
      best = node.point;
    }
    const double delta = query(node.axis) - points_(node.point, node.axis);
    const int near = delta < 0.0 ? node.left : node.right;
    const int far = delta < 0.0 ? node.right : node.left;
    search(near, query, best, best_sq);
    if (delta * delta <= best_sq) search(far, query, best, best_sq);
  }

  const Eigen::MatrixX3d& points_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace

VerificationReport verification_accuracy(const std::vector<VerificationPair>& pairs,
                                         VerificationMetric metric) {
  if (pairs.size() < 2) throw std::invalid_argument("need at least two pairs");
  std::size_t positives = 0;
  for (const auto& p : pairs) positives += p.same_identity ? 1 : 0;
  const std::size_t negatives = pairs.size() - positives;
  if (positives == 0 || negatives == 0) {
    throw std::invalid_argument("pair set must contain both label kinds");
  }

  struct Entry {
    double distance;
    bool same;
  };
  std::vector<Entry> entries;
  entries.reserve(pairs.size());
  for (const auto& p : pairs) {
    entries.push_back({pair_distance(p, metric), p.same_identity});
  }
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.distance < b.distance; });

  // Candidate thresholds: below the minimum, midpoints between distinct
  // consecutive distances, above the maximum. Predict same if d <= t.
  std::vector<double> candidates;
  candidates.push_back(entries.front().distance - 1.0);
  for (size_t i = 0; i + 1 < entries.size(); ++i) {
    if (entries[i + 1].distance > entries[i].distance) {
      candidates.push_back(0.5 * (entries[i].distance + entries[i + 1].distance));
    }
  }
  candidates.push_back(entries.back().distance + 1.0);

  VerificationReport report;
  const double total = static_cast<double>(pairs.size());
  size_t cursor = 0;
  std::size_t tp = 0, fp = 0;
  for (const double threshold : candidates) {
    while (cursor < entries.size() && entries[cursor].distance <= threshold) {
      if (entries[cursor].same) ++tp;
      else ++fp;
      ++cursor;
    }
    const std::size_t tn = negatives - fp;
    const double accuracy = (static_cast<double>(tp) + static_cast<double>(tn)) / total;
    report.roc.push_back({threshold, static_cast<double>(tp) / positives,
                          static_cast<double>(fp) / negatives});
    if (accuracy > report.accuracy) {
      report.accuracy = accuracy;
      report.threshold = threshold;
    }
  }
  return report;
}

Eigen::MatrixX3d SimilarityTransform::apply(const Eigen::MatrixX3d& points) const {
  return (scale * (points * rotation.transpose())).rowwise() + translation.transpose();
}

SimilarityTransform umeyama_similarity(const Eigen::MatrixX3d& src,
                                       const Eigen::MatrixX3d& dst) {
  if (src.rows() != dst.rows()) {
    throw std::invalid_argument("correspondence counts differ");
  }
  const Eigen::Index n = src.rows();
  if (n < 3) throw std::invalid_argument("need at least 3 correspondences");

  const Eigen::RowVector3d mu_src = src.colwise().mean();
  const Eigen::RowVector3d mu_dst = dst.colwise().mean();
  const Eigen::MatrixX3d cs = src.rowwise() - mu_src;
  const Eigen::MatrixX3d cd = dst.rowwise() - mu_dst;

  const double var_src = cs.squaredNorm() / static_cast<double>(n);
  if (var_src <= 0.0) {
    throw std::invalid_argument("degenerate input: coincident source points");
  }

  const Eigen::Matrix3d sigma = cd.transpose() * cs / static_cast<double>(n);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(sigma,
                                        Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d d = svd.singularValues();
  if (d(1) <= d(0) * 1e-12) {
    throw std::invalid_argument("degenerate input: collinear points");
  }

  Eigen::Vector3d s = Eigen::Vector3d::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) {
    s(2) = -1.0;
  }

  SimilarityTransform t;
  t.rotation = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  t.scale = d.dot(s) / var_src;
  t.translation = mu_dst.transpose() - t.scale * t.rotation * mu_src.transpose();
  return t;
}

Eigen::MatrixX3d vertex_normals(const Mesh& mesh) {
  if (mesh.faces.empty()) {
    throw std::invalid_argument("mesh has no faces; normals undefined");
  }
  Eigen::MatrixX3d normals = Eigen::MatrixX3d::Zero(mesh.vertices.rows(), 3);
  for (const auto& tri : mesh.faces) {
    const Eigen::Vector3d a = mesh.vertices.row(tri[0]).transpose();
    const Eigen::Vector3d b = mesh.vertices.row(tri[1]).transpose();
    const Eigen::Vector3d c = mesh.vertices.row(tri[2]).transpose();
    const Eigen::Vector3d area_normal = (b - a).cross(c - a);  // 2x area
    for (const auto v : tri) normals.row(v) += area_normal.transpose();
  }
  for (Eigen::Index i = 0; i < normals.rows(); ++i) {
    const double len = normals.row(i).norm();
    if (len <= 1e-30) {
      throw std::invalid_argument("vertex without valid normal");
    }
    normals.row(i) /= len;
  }
  return normals;
}

std::vector<double> point_to_plane_errors(const Eigen::MatrixX3d& source_vertices,
                                          const Mesh& target) {
  if (source_vertices.rows() == 0 || target.vertices.rows() == 0) {
    throw std::invalid_argument("empty inputs");
  }
  const Eigen::MatrixX3d normals = vertex_normals(target);
  const KdTree3 tree(target.vertices);
  std::vector<double> errors;
  errors.reserve(static_cast<size_t>(source_vertices.rows()));
  for (Eigen::Index i = 0; i < source_vertices.rows(); ++i) {
    const Eigen::Vector3d p = source_vertices.row(i).transpose();
    const int nn = tree.nearest(p);
    const Eigen::Vector3d q = target.vertices.row(nn).transpose();
    const Eigen::Vector3d nrm = normals.row(nn).transpose();
    errors.push_back(std::abs((p - q).dot(nrm)));
  }
  return errors;
}

double point_to_plane_rmse(const Eigen::MatrixX3d& source_vertices,
                           const Mesh& target,
                           const std::optional<CropSpec>& crop) {
  Eigen::MatrixX3d used = source_vertices;
  if (crop.has_value()) {
    if (crop->center_vertex < 0 || crop->center_vertex >= target.vertices.rows()) {
      throw std::invalid_argument("crop vertex index out of range");
    }
    const Eigen::Vector3d center =
        target.vertices.row(crop->center_vertex).transpose();
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < source_vertices.rows(); ++i) {
      if ((source_vertices.row(i).transpose() - center).norm() <= crop->radius) {
        keep.push_back(i);
      }
    }
    if (keep.empty()) throw std::invalid_argument("crop removed every vertex");
    used.resize(static_cast<Eigen::Index>(keep.size()), 3);
    for (size_t i = 0; i < keep.size(); ++i) {
      used.row(static_cast<Eigen::Index>(i)) = source_vertices.row(keep[i]);
    }
  }
  const std::vector<double> errors = point_to_plane_errors(used, target);
  double sum_sq = 0.0;
  for (const double e : errors) sum_sq += e * e;
  return std::sqrt(sum_sq / static_cast<double>(errors.size()));
}

AlignmentResult icp_align(const Mesh& source, const Mesh& target, int max_iters,
                          double tol) {
  if (source.vertices.rows() == 0 || target.vertices.rows() == 0) {
    throw std::invalid_argument("empty meshes");
  }
  if (max_iters < 1) throw std::invalid_argument("max_iters must be positive");

  AlignmentResult result;

  // Centroid and RMS-radius pre-alignment keeps the first nearest-neighbour
  // pass meaningful when the inputs differ by a large scale.
  const Eigen::RowVector3d mu_src = source.vertices.colwise().mean();
  const Eigen::RowVector3d mu_dst = target.vertices.colwise().mean();
  const double r_src =
      std::sqrt((source.vertices.rowwise() - mu_src).squaredNorm() /
                static_cast<double>(source.vertices.rows()));
  const double r_dst =
      std::sqrt((target.vertices.rowwise() - mu_dst).squaredNorm() /
                static_cast<double>(target.vertices.rows()));
  result.transform.scale = r_src > 0.0 && r_dst > 0.0 ? r_dst / r_src : 1.0;
  result.transform.translation =
      mu_dst.transpose() - result.transform.scale * mu_src.transpose();

  const KdTree3 tree(target.vertices);
  const auto n = source.vertices.rows();
  Eigen::MatrixX3d matched(n, 3);
  double prev_rmse = std::numeric_limits<double>::infinity();

  for (int iter = 0; iter < max_iters; ++iter) {
    const Eigen::MatrixX3d moved = result.transform.apply(source.vertices);
    for (Eigen::Index i = 0; i < n; ++i) {
      matched.row(i) = target.vertices.row(tree.nearest(moved.row(i).transpose()));
    }
    result.transform = umeyama_similarity(source.vertices, matched);

    const Eigen::MatrixX3d fitted = result.transform.apply(source.vertices);
    const double rmse =
        std::sqrt((fitted - matched).squaredNorm() / static_cast<double>(n));
    result.rmse_history.push_back(rmse);
    result.iterations = iter + 1;
    if (rmse <= tol || prev_rmse - rmse < tol) {
      result.converged = true;
      break;
    }
    prev_rmse = rmse;
  }

  result.rmse_point_to_plane =
      point_to_plane_rmse(result.transform.apply(source.vertices), target);
  return result;
}

CEDCurve ced_curve(std::vector<double> errors) {
  if (errors.empty()) throw std::invalid_argument("empty error list");
  std::sort(errors.begin(), errors.end());
  CEDCurve curve;
  curve.values = std::move(errors);
  curve.fractions.resize(curve.values.size());
  const double n = static_cast<double>(curve.values.size());
  for (size_t i = 0; i < curve.values.size(); ++i) {
    curve.fractions[i] = static_cast<double>(i + 1) / n;
  }
  return curve;
}

}  // namespace sir3dmm
