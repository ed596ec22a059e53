#pragma once

#include "sir3dmm/model.hpp"
#include "sir3dmm/trainer.hpp"

#include <cstdint>
#include <vector>

namespace sir3dmm {

/// Knobs for the synthetic model and dataset generators.
struct SyntheticSpec {
  int n_vertices = 100;
  int m_id = 16;
  int m_exp = 8;
  int num_identities = 20;
  int samples_per_identity = 30;
  double noise_scale = 0.25;
  std::uint64_t seed = 7;
};

/// Identity-labelled samples plus the ground truth they were drawn from.
struct SyntheticDataset {
  Mat identity_codes;  // num_identities x m_id, drawn from the Gaussian prior
  std::vector<TrainSample> recog_samples;
};

struct PcaBuildResult {
  MorphableModel model;  // shape part only (m_exp = 0) unless combined later
  bool reduced = false;  // achievable rank fell short of the request
  int requested_m = 0;
};

/// PCA over flattened vertex vectors: mean, orthonormal top-m directions,
/// per-component score standard deviations as the eigenvalue vector.
PcaBuildResult build_model_via_pca(const std::vector<Vec>& samples, int m_id);

/// Deterministic ellipsoid-dome-with-bumps generator. All meshes share the
/// grid topology implied by n_vertices; displacements ride along the dome
/// normals so the variation has x, y and z components.
std::vector<Vec> make_face_like_meshes(const SyntheticSpec& spec, int count);

/// Grid triangulation and the designated landmark/nose-tip vertices for the
/// generator's fixed topology.
std::vector<Triangle> grid_topology(int n_vertices);
std::vector<std::int32_t> grid_landmarks(int n_vertices);
std::int32_t nose_tip_index(int n_vertices);

struct SyntheticModelResult {
  MorphableModel model;
  bool shape_reduced = false;
  int requested_m_id = 0;
};

/// Full pipeline: shape PCA over face-like scans, expression PCA over a
/// separate localized displacement family, grid topology and landmarks.
SyntheticModelResult build_synthetic_model(const SyntheticSpec& spec);

/// Identity codes drawn from N(0, diag(sigma^2)); per-sample codes perturb
/// the identity code by noise_scale, with random pose and expression draws.
/// Features are the whitened per-sample codes.
SyntheticDataset generate_identities(const MorphableModel& model,
                                     const SyntheticSpec& spec);

/// Landmark-labelled samples with self-consistent targets: fresh prior codes
/// projected under their drawn pose.
std::vector<TrainSample> make_reconstruction_samples(const MorphableModel& model,
                                                     const SyntheticSpec& spec,
                                                     int count);

}  // namespace sir3dmm
