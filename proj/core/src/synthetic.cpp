#include "sir3dmm/synthetic.hpp"

#include <Eigen/QR>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace sir3dmm {

namespace {

struct GridLayout {
  int rows = 0;
  int cols = 0;
};

GridLayout grid_layout(int n_vertices) {
  if (n_vertices < 4) throw std::invalid_argument("need at least 4 vertices");
  int rows = static_cast<int>(std::sqrt(static_cast<double>(n_vertices)));
  while (rows > 1 && n_vertices % rows != 0) --rows;
  return {rows, n_vertices / rows};
}

void validate_spec(const SyntheticSpec& spec) {
  if (spec.n_vertices <= 0 || spec.m_id <= 0 || spec.m_exp < 0 ||
      spec.num_identities <= 0 || spec.samples_per_identity <= 0) {
    throw std::invalid_argument("synthetic spec counts must be positive");
  }
  if (spec.m_id >= 3 * spec.n_vertices) {
    throw std::invalid_argument("m_id must be below 3 * n_vertices");
  }
  if (spec.noise_scale < 0.0) {
    throw std::invalid_argument("noise scale must be non-negative");
  }
}

// Dome heightfield with an analytic normal; bump displacements ride on it.
struct DomeGrid {
  std::vector<Eigen::Vector3d> base;
  std::vector<Eigen::Vector3d> normal;
  std::vector<double> xs, ys;
};

DomeGrid dome_grid(int n_vertices) {
  const GridLayout g = grid_layout(n_vertices);
  DomeGrid dome;
  const double half_w = 60.0, half_h = 75.0;  // face-sized sheet, mm
  const double height = 40.0, sx = 45.0, sy = 55.0;
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      const double u = g.rows == 1 ? 0.0 : static_cast<double>(r) / (g.rows - 1);
      const double v = g.cols == 1 ? 0.0 : static_cast<double>(c) / (g.cols - 1);
      const double x = (2.0 * v - 1.0) * half_w;
      const double y = (2.0 * u - 1.0) * half_h;
      const double z = height * std::exp(-(x * x / (2 * sx * sx) +
                                           y * y / (2 * sy * sy)));
      const double dzdx = -z * x / (sx * sx);
      const double dzdy = -z * y / (sy * sy);
      dome.base.emplace_back(x, y, z);
      dome.normal.push_back(
          Eigen::Vector3d(-dzdx, -dzdy, 1.0).normalized());
      dome.xs.push_back(x);
      dome.ys.push_back(y);
    }
  }
  return dome;
}

Vec bumpy_mesh(const DomeGrid& dome, std::mt19937_64& rng, int num_bumps,
               double max_amp, double y_min_frac, double y_max_frac) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  struct Bump {
    double cx, cy, width, amp;
  };
  std::vector<Bump> bumps;
  for (int b = 0; b < num_bumps; ++b) {
    Bump bump;
    bump.cx = (2.0 * uni(rng) - 1.0) * 48.0;
    bump.cy = (y_min_frac + (y_max_frac - y_min_frac) * uni(rng)) * 150.0 - 75.0;
    bump.width = 8.0 + 17.0 * uni(rng);
    bump.amp = (2.0 * uni(rng) - 1.0) * max_amp;
    bumps.push_back(bump);
  }
  Vec flat(3 * static_cast<Eigen::Index>(dome.base.size()));
  for (size_t i = 0; i < dome.base.size(); ++i) {
    double displacement = 0.0;
    for (const auto& bump : bumps) {
      const double dx = dome.xs[i] - bump.cx;
      const double dy = dome.ys[i] - bump.cy;
      displacement +=
          bump.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * bump.width * bump.width));
    }
    const Eigen::Vector3d p = dome.base[i] + displacement * dome.normal[i];
    flat.segment<3>(3 * static_cast<Eigen::Index>(i)) = p;
  }
  return flat;
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  // splitmix-style mixing so distinct streams do not overlap
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return std::mt19937_64(z ^ (z >> 31));
}

Pose random_pose(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  Pose pose;
  const double yaw = 0.45 * uni(rng);
  const double pitch = 0.3 * uni(rng);
  const double roll = 0.2 * uni(rng);
  pose.rotation = Eigen::Quaterniond(euler_to_matrix(yaw, pitch, roll));
  pose.translation2d = Eigen::Vector2d(5.0 * uni(rng), 5.0 * uni(rng));
  pose.focal = 1.0 + 0.1 * uni(rng);
  return pose;
}

}  // namespace

std::vector<Triangle> grid_topology(int n_vertices) {
  const GridLayout g = grid_layout(n_vertices);
  std::vector<Triangle> faces;
  if (g.rows < 2 || g.cols < 2) return faces;
  auto at = [&](int r, int c) { return static_cast<std::int32_t>(r * g.cols + c); };
  for (int r = 0; r + 1 < g.rows; ++r) {
    for (int c = 0; c + 1 < g.cols; ++c) {
      faces.push_back({at(r, c), at(r, c + 1), at(r + 1, c)});
      faces.push_back({at(r + 1, c), at(r, c + 1), at(r + 1, c + 1)});
    }
  }
  return faces;
}

std::vector<std::int32_t> grid_landmarks(int n_vertices) {
  const GridLayout g = grid_layout(n_vertices);
  std::vector<std::int32_t> indices;
  const std::array<double, 4> fractions{0.2, 0.4, 0.6, 0.8};
  for (const double fr : fractions) {
    for (const double fc : fractions) {
      const int r = static_cast<int>(std::lround(fr * (g.rows - 1)));
      const int c = static_cast<int>(std::lround(fc * (g.cols - 1)));
      const auto idx = static_cast<std::int32_t>(r * g.cols + c);
      if (std::find(indices.begin(), indices.end(), idx) == indices.end()) {
        indices.push_back(idx);
      }
    }
  }
  return indices;
}

std::int32_t nose_tip_index(int n_vertices) {
  const GridLayout g = grid_layout(n_vertices);
  return static_cast<std::int32_t>((g.rows / 2) * g.cols + g.cols / 2);
}

std::vector<Vec> make_face_like_meshes(const SyntheticSpec& spec, int count) {
  validate_spec(spec);
  if (count <= 0) throw std::invalid_argument("mesh count must be positive");
  const DomeGrid dome = dome_grid(spec.n_vertices);
  std::vector<Vec> meshes;
  meshes.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    auto rng = stream_rng(spec.seed, 1000 + static_cast<std::uint64_t>(i));
    meshes.push_back(bumpy_mesh(dome, rng, 12, 6.0, 0.0, 1.0));
  }
  return meshes;
}

PcaBuildResult build_model_via_pca(const std::vector<Vec>& samples, int m_id) {
  if (m_id <= 0) throw std::invalid_argument("m_id must be positive");
  if (samples.size() < static_cast<size_t>(m_id) + 1) {
    throw std::invalid_argument("PCA needs at least m_id + 1 samples");
  }
  const Eigen::Index dim = samples.front().size();
  const auto count = static_cast<Eigen::Index>(samples.size());
  for (const auto& s : samples) {
    if (s.size() != dim) throw std::invalid_argument("sample lengths differ");
  }

  Vec mean = Vec::Zero(dim);
  for (const auto& s : samples) mean += s;
  mean /= static_cast<double>(count);

  Mat centered(dim, count);
  for (Eigen::Index i = 0; i < count; ++i) {
    centered.col(i) = samples[static_cast<size_t>(i)] - mean;
  }

  Eigen::JacobiSVD<Mat> svd(centered, Eigen::ComputeThinU);
  const Vec singular = svd.singularValues();
  const double cutoff = singular(0) * 1e-9;
  int rank = 0;
  while (rank < singular.size() && singular(rank) > cutoff) ++rank;

  PcaBuildResult result;
  result.requested_m = m_id;
  const int m_eff = std::min(rank, m_id);
  result.reduced = m_eff < m_id;

  result.model.mean_shape = mean;
  result.model.shape_basis = svd.matrixU().leftCols(m_eff);
  result.model.shape_eigenvalues =
      singular.head(m_eff) / std::sqrt(static_cast<double>(count - 1));
  result.model.expr_basis = Mat::Zero(dim, 0);
  result.model.expr_eigenvalues = Vec::Zero(0);
  return result;
}

SyntheticModelResult build_synthetic_model(const SyntheticSpec& spec) {
  validate_spec(spec);
  const int scan_count = std::max(4 * spec.m_id + 4, spec.m_id + 9);
  const std::vector<Vec> scans = make_face_like_meshes(spec, scan_count);

  SyntheticModelResult out;
  PcaBuildResult shape = build_model_via_pca(scans, spec.m_id);
  out.shape_reduced = shape.reduced;
  out.requested_m_id = spec.m_id;
  out.model = std::move(shape.model);

  if (spec.m_exp > 0) {
    // Separate localized displacement family (lower half of the sheet),
    // centered before PCA so the neutral face stays the mean shape.
    const DomeGrid dome = dome_grid(spec.n_vertices);
    const int expr_count = std::max(4 * spec.m_exp + 4, spec.m_exp + 9);
    std::vector<Vec> displacements;
    std::mt19937_64 unused_rng(0);
    const Vec flat_base = bumpy_mesh(dome, unused_rng, 0, 0.0, 0.0, 1.0);
    for (int i = 0; i < expr_count; ++i) {
      auto rng = stream_rng(spec.seed, 5000 + static_cast<std::uint64_t>(i));
      displacements.push_back(bumpy_mesh(dome, rng, 6, 4.0, 0.0, 0.45) - flat_base);
    }
    PcaBuildResult expr = build_model_via_pca(displacements, spec.m_exp);
    if (expr.reduced) {
      throw std::runtime_error("expression displacement family is rank deficient");
    }
    out.model.expr_basis = expr.model.shape_basis;
    out.model.expr_eigenvalues = expr.model.shape_eigenvalues;
  }

  out.model.topology = grid_topology(spec.n_vertices);
  out.model.landmark_indices = grid_landmarks(spec.n_vertices);
  return out;
}

SyntheticDataset generate_identities(const MorphableModel& model,
                                     const SyntheticSpec& spec) {
  validate_spec(spec);
  auto rng = stream_rng(spec.seed, 2);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Eigen::Index m_id = model.id_dims();
  const Eigen::Index m_exp = model.expr_dims();

  SyntheticDataset ds;
  ds.identity_codes.resize(spec.num_identities, m_id);
  for (int k = 0; k < spec.num_identities; ++k) {
    for (Eigen::Index d = 0; d < m_id; ++d) {
      ds.identity_codes(k, d) = model.shape_eigenvalues(d) * gauss(rng);
    }
  }

  for (int k = 0; k < spec.num_identities; ++k) {
    for (int s = 0; s < spec.samples_per_identity; ++s) {
      TrainSample sample;
      Vec alpha_id(m_id);
      for (Eigen::Index d = 0; d < m_id; ++d) {
        alpha_id(d) = ds.identity_codes(k, d) +
                      spec.noise_scale * model.shape_eigenvalues(d) * gauss(rng);
      }
      Vec alpha_exp(m_exp);
      for (Eigen::Index d = 0; d < m_exp; ++d) {
        alpha_exp(d) = 0.5 * model.expr_eigenvalues(d) * gauss(rng);
      }
      sample.features = Vec(m_id + m_exp);
      sample.features.head(m_id) =
          alpha_id.array() / model.shape_eigenvalues.array();
      if (m_exp > 0) {
        sample.features.tail(m_exp) =
            alpha_exp.array() / model.expr_eigenvalues.array();
      }
      sample.identity = k;
      sample.pose = random_pose(rng);
      sample.expr = ExpressionCode{alpha_exp};
      ds.recog_samples.push_back(std::move(sample));
    }
  }
  return ds;
}

std::vector<TrainSample> make_reconstruction_samples(const MorphableModel& model,
                                                     const SyntheticSpec& spec,
                                                     int count) {
  validate_spec(spec);
  if (count <= 0) throw std::invalid_argument("sample count must be positive");
  auto rng = stream_rng(spec.seed, 3);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Eigen::Index m_id = model.id_dims();
  const Eigen::Index m_exp = model.expr_dims();

  std::vector<TrainSample> samples;
  samples.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    Vec alpha_id(m_id);
    for (Eigen::Index d = 0; d < m_id; ++d) {
      alpha_id(d) = model.shape_eigenvalues(d) * gauss(rng);
    }
    Vec alpha_exp(m_exp);
    for (Eigen::Index d = 0; d < m_exp; ++d) {
      alpha_exp(d) = 0.5 * model.expr_eigenvalues(d) * gauss(rng);
    }
    TrainSample sample;
    sample.features = Vec(m_id + m_exp);
    sample.features.head(m_id) = alpha_id.array() / model.shape_eigenvalues.array();
    if (m_exp > 0) {
      sample.features.tail(m_exp) =
          alpha_exp.array() / model.expr_eigenvalues.array();
    }
    sample.pose = random_pose(rng);
    sample.expr = ExpressionCode{alpha_exp};
    sample.landmarks = project_landmarks(model, ShapeCode{alpha_id},
                                         ExpressionCode{alpha_exp}, *sample.pose);
    samples.push_back(std::move(sample));
  }
  return samples;
}

}  // namespace sir3dmm
