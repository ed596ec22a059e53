#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace sir3dmm {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Triangle = std::array<std::int32_t, 3>;

/// Identity shape parameters (alpha_id).
struct ShapeCode {
  Vec values;
};

/// Expression parameters (alpha_exp).
struct ExpressionCode {
  Vec values;
};

/// Linear statistical face model: S = mean + A_id * alpha_id + A_exp * alpha_exp.
///
/// The 3n-long vectors are interleaved (x0, y0, z0, x1, y1, z1, ...); this
/// layout is also the on-disk contract of the model container.
/// Eigenvalue vectors hold per-component standard deviations.
struct MorphableModel {
  Vec mean_shape;               // 3n
  Mat shape_basis;              // 3n x m_id, orthonormal columns
  Mat expr_basis;               // 3n x m_exp
  Vec shape_eigenvalues;        // m_id, > 0
  Vec expr_eigenvalues;         // m_exp, > 0
  std::vector<Triangle> topology;
  std::vector<std::int32_t> landmark_indices;

  Eigen::Index num_vertices() const { return mean_shape.size() / 3; }
  Eigen::Index id_dims() const { return shape_basis.cols(); }
  Eigen::Index expr_dims() const { return expr_basis.cols(); }
  Eigen::Index num_landmarks() const {
    return static_cast<Eigen::Index>(landmark_indices.size());
  }
};

/// Result of checking MorphableModel invariants.
struct ModelCheck {
  bool ok = true;
  double max_orthonormality_deviation = 0.0;  // max |A^T A - I|
  std::vector<std::string> warnings;
};

/// Validates dimensions, eigenvalue positivity, index ranges, triangle
/// non-degeneracy, and column orthonormality of the shape basis
/// (max |A^T A - I| <= 1e-8).
///
/// In strict mode an orthonormality violation throws; otherwise it is
/// recorded as a warning (deployed bases are not always exactly orthonormal).
/// All other violations always throw std::invalid_argument.
ModelCheck validate_model(const MorphableModel& model, bool strict = true);

/// Rigid camera pose plus weak-projection parameters.
struct Pose {
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Eigen::Vector3d translation3d = Eigen::Vector3d::Zero();
  Eigen::Vector2d translation2d = Eigen::Vector2d::Zero();
  double focal = 1.0;
};

struct Mesh {
  Eigen::MatrixX3d vertices;   // n x 3, millimetres
  std::vector<Triangle> faces;
};

/// Sparse 2D landmark coordinates, one row per model landmark index.
struct LandmarkSet {
  Eigen::MatrixX2d points;
};

/// ZYX intrinsic Euler decomposition (yaw about z, then pitch about y,
/// then roll about x). Angles in radians.
struct EulerAngles {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;
  bool gimbal_lock = false;  // |pitch| within 1e-6 of pi/2; canonical roll=0 branch
};

/// S = mean + A_id * alpha_id + A_exp * alpha_exp, reshaped to n x 3.
Mesh synthesize(const MorphableModel& model, const ShapeCode& shape,
                const ExpressionCode& expr);

/// v -> R v + t_3d for every vertex. Requires a unit quaternion.
Mesh transform_to_camera(const Mesh& mesh, const Pose& pose);

/// Weak projection of all vertices: f * Pr * (R v) + t_2d, where Pr keeps
/// the x and y rows. Note t_3d does not appear.
Eigen::MatrixX2d project(const Mesh& mesh, const Pose& pose);

/// Weak projection restricted to the model's landmark vertices.
LandmarkSet project_landmarks(const Mesh& mesh, const Pose& pose,
                              const MorphableModel& model);

/// Synthesize-and-project convenience for the sparse landmark rows.
LandmarkSet project_landmarks(const MorphableModel& model, const ShapeCode& shape,
                              const ExpressionCode& expr, const Pose& pose);

/// Euler angles of the pose rotation; rebuilding Rz(yaw)Ry(pitch)Rx(roll)
/// reproduces the quaternion's rotation matrix.
EulerAngles extract_euler(const Pose& pose);

/// Rz(yaw) * Ry(pitch) * Rx(roll).
Eigen::Matrix3d euler_to_matrix(double yaw, double pitch, double roll);

}  // namespace sir3dmm
