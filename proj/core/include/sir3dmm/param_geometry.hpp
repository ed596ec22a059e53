#pragma once

#include "sir3dmm/model.hpp"

#include <vector>

namespace sir3dmm {

/// Both sides of the parameter-vs-geometry distance law.
///
/// e is the mean-squared parameter distance, E the mean-squared geometric
/// distance; for an orthonormal basis E = (m/n) e, so ratio = E*n/(e*m) is 1.
struct DistanceReport {
  double e = 0.0;
  double E = 0.0;
  double ratio = 1.0;  // defined as 1 when e == 0
};

/// (1/m) ||x - y||^2.
double param_distance(const ShapeCode& x, const ShapeCode& y);

/// (1/n) sum of squared per-coordinate differences.
double geometry_distance(const Mesh& x, const Mesh& y);

/// Synthesizes both codes (zero expression) and reports e, E and E*n/(e*m).
DistanceReport verify_proportionality(const MorphableModel& model,
                                      const ShapeCode& x, const ShapeCode& y);

/// Negative log of the unnormalized Gaussian prior: 1/2 sum (alpha_i/sigma_i)^2.
/// If grad is non-null it receives alpha_i / sigma_i^2.
double gaussian_prior_energy(const ShapeCode& shape, const Vec& eigenvalues,
                             Vec* grad = nullptr);

struct KlResult {
  double value = 0.0;
  bool variance_floored = false;  // some dimension hit the 1e-12 floor
};

/// Closed-form KL divergence of a moment-fit Gaussian against N(0,1),
/// averaged over dimensions.
///
/// Codes are first divided elementwise by the eigenvalues; mu_d and s2_d are
/// the batch mean and (population) variance of each normalized dimension,
/// and the per-dimension term is 1/2 (s2 + mu^2 - 1 - ln s2). Variances are
/// floored at 1e-12 so collapsed batches stay finite; the floor is flagged.
///
/// If grads is non-null it receives d value / d code for every batch entry.
KlResult kl_to_standard_normal(const std::vector<ShapeCode>& batch,
                               const Vec& eigenvalues,
                               std::vector<Vec>* grads = nullptr);

}  // namespace sir3dmm
