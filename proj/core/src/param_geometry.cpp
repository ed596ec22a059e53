#include "sir3dmm/param_geometry.hpp"

#include <cmath>
#include <stdexcept>

namespace sir3dmm {

namespace {
constexpr double kVarianceFloor = 1e-12;
}

double param_distance(const ShapeCode& x, const ShapeCode& y) {
  if (x.values.size() != y.values.size()) {
    throw std::invalid_argument("shape code lengths differ");
  }
  if (x.values.size() == 0) throw std::invalid_argument("empty shape codes");
  return (x.values - y.values).squaredNorm() /
         static_cast<double>(x.values.size());
}

double geometry_distance(const Mesh& x, const Mesh& y) {
  if (x.vertices.rows() != y.vertices.rows()) {
    throw std::invalid_argument("vertex counts differ");
  }
  if (x.vertices.rows() == 0) throw std::invalid_argument("empty meshes");
  return (x.vertices - y.vertices).squaredNorm() /
         static_cast<double>(x.vertices.rows());
}

DistanceReport verify_proportionality(const MorphableModel& model,
                                      const ShapeCode& x, const ShapeCode& y) {
  DistanceReport report;
  const ExpressionCode rest{Vec::Zero(model.expr_dims())};
  const Mesh mx = synthesize(model, x, rest);
  const Mesh my = synthesize(model, y, rest);
  report.e = param_distance(x, y);
  report.E = geometry_distance(mx, my);
  const double m = static_cast<double>(model.id_dims());
  const double n = static_cast<double>(model.num_vertices());
  report.ratio = report.e == 0.0 ? 1.0 : report.E * n / (report.e * m);
  return report;
}

double gaussian_prior_energy(const ShapeCode& shape, const Vec& eigenvalues,
                             Vec* grad) {
  if (shape.values.size() != eigenvalues.size()) {
    throw std::invalid_argument("code and eigenvalue lengths differ");
  }
  if ((eigenvalues.array() <= 0.0).any()) {
    throw std::invalid_argument("eigenvalues must be strictly positive");
  }
  const Vec z = shape.values.array() / eigenvalues.array();
  if (grad != nullptr) {
    *grad = z.array() / eigenvalues.array();
  }
  return 0.5 * z.squaredNorm();
}

KlResult kl_to_standard_normal(const std::vector<ShapeCode>& batch,
                               const Vec& eigenvalues,
                               std::vector<Vec>* grads) {
  if (batch.size() < 2) {
    throw std::invalid_argument("KL estimate needs a batch of at least 2 codes");
  }
  if ((eigenvalues.array() <= 0.0).any()) {
    throw std::invalid_argument("eigenvalues must be strictly positive");
  }
  const Eigen::Index m = eigenvalues.size();
  const Eigen::Index count = static_cast<Eigen::Index>(batch.size());
  Mat z(count, m);
  for (Eigen::Index i = 0; i < count; ++i) {
    const Vec& v = batch[static_cast<size_t>(i)].values;
    if (v.size() != m) throw std::invalid_argument("code length mismatch in batch");
    z.row(i) = v.array() / eigenvalues.array();
  }

  const Vec mu = z.colwise().mean();
  const Vec raw_var =
      (z.rowwise() - mu.transpose()).array().square().colwise().mean();

  KlResult result;
  Vec var = raw_var;
  for (Eigen::Index d = 0; d < m; ++d) {
    if (var(d) < kVarianceFloor) {
      var(d) = kVarianceFloor;
      result.variance_floored = true;
    }
  }
  result.value =
      0.5 *
      (var.array() + mu.array().square() - 1.0 - var.array().log()).mean();

  if (grads != nullptr) {
    // d/dz_id of mean_d 1/2 (s2 + mu^2 - 1 - ln s2) with population moments:
    //   (1/m) [ (1/N)(z - mu)(1 - 1/s2) + mu/N ], zero through floored s2.
    grads->assign(batch.size(), Vec::Zero(m));
    const double inv_n = 1.0 / static_cast<double>(count);
    const double inv_m = 1.0 / static_cast<double>(m);
    for (Eigen::Index i = 0; i < count; ++i) {
      Vec g(m);
      for (Eigen::Index d = 0; d < m; ++d) {
        const double centered = z(i, d) - mu(d);
        const double var_term =
            raw_var(d) < kVarianceFloor ? 0.0
                                        : centered * (1.0 - 1.0 / var(d));
        g(d) = inv_m * inv_n * (var_term + mu(d));
      }
      // chain through z = alpha / sigma
      (*grads)[static_cast<size_t>(i)] = g.array() / eigenvalues.array();
    }
  }
  return result;
}

}  // namespace sir3dmm
