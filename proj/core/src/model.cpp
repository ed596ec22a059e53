#include "sir3dmm/model.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace sir3dmm {

namespace {

constexpr double kQuatTol = 1e-10;
constexpr double kOrthoTol = 1e-8;

void require_unit_quaternion(const Pose& pose) {
  if (std::abs(pose.rotation.norm() - 1.0) > kQuatTol) {
    throw std::invalid_argument("pose rotation quaternion is not unit length");
  }
}

}  // namespace

ModelCheck validate_model(const MorphableModel& model, bool strict) {
  ModelCheck check;
  const Eigen::Index n3 = model.mean_shape.size();
  if (n3 == 0 || n3 % 3 != 0) {
    throw std::invalid_argument("mean shape length must be a positive multiple of 3");
  }
  if (model.shape_basis.rows() != n3 || model.expr_basis.rows() != n3) {
    throw std::invalid_argument("basis row count does not match mean shape length");
  }
  if (model.shape_eigenvalues.size() != model.shape_basis.cols() ||
      model.expr_eigenvalues.size() != model.expr_basis.cols()) {
    throw std::invalid_argument("eigenvalue count does not match basis width");
  }
  if ((model.shape_eigenvalues.array() <= 0.0).any() ||
      (model.expr_eigenvalues.array() <= 0.0).any()) {
    throw std::invalid_argument("eigenvalues must be strictly positive");
  }

  const auto n = model.num_vertices();
  for (const auto idx : model.landmark_indices) {
    if (idx < 0 || idx >= n) {
      throw std::invalid_argument("landmark index out of range");
    }
  }
  for (const auto& tri : model.topology) {
    for (const auto v : tri) {
      if (v < 0 || v >= n) throw std::invalid_argument("triangle index out of range");
    }
    if (tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2]) {
      throw std::invalid_argument("degenerate triangle with repeated vertex index");
    }
  }

  const Mat gram = model.shape_basis.transpose() * model.shape_basis;
  const Mat eye = Mat::Identity(gram.rows(), gram.cols());
  check.max_orthonormality_deviation = (gram - eye).cwiseAbs().maxCoeff();
  if (check.max_orthonormality_deviation > kOrthoTol) {
    if (strict) {
      throw std::invalid_argument("shape basis columns are not orthonormal");
    }
    check.ok = false;
    check.warnings.push_back("shape basis columns deviate from orthonormality by " +
                             std::to_string(check.max_orthonormality_deviation));
  }
  return check;
}

Mesh synthesize(const MorphableModel& model, const ShapeCode& shape,
                const ExpressionCode& expr) {
  if (shape.values.size() != model.id_dims()) {
    throw std::invalid_argument("shape code length does not match basis width");
  }
  if (expr.values.size() != model.expr_dims()) {
    throw std::invalid_argument("expression code length does not match basis width");
  }
  const Vec flat = model.mean_shape + model.shape_basis * shape.values +
                   model.expr_basis * expr.values;
  Mesh mesh;
  mesh.vertices = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3,
                                                 Eigen::RowMajor>>(
      flat.data(), model.num_vertices(), 3);
  mesh.faces = model.topology;
  return mesh;
}

Mesh transform_to_camera(const Mesh& mesh, const Pose& pose) {
  require_unit_quaternion(pose);
  const Eigen::Matrix3d rot = pose.rotation.toRotationMatrix();
  Mesh out;
  out.vertices = (mesh.vertices * rot.transpose()).rowwise() +
                 pose.translation3d.transpose();
  out.faces = mesh.faces;
  return out;
}

Eigen::MatrixX2d project(const Mesh& mesh, const Pose& pose) {
  require_unit_quaternion(pose);
  const Eigen::Matrix3d rot = pose.rotation.toRotationMatrix();
  // f * Pr * R * v + t_2d; Pr truncates to the first two rows.
  const Eigen::Matrix<double, 2, 3> proj = pose.focal * rot.topRows<2>();
  return (mesh.vertices * proj.transpose()).rowwise() +
         pose.translation2d.transpose();
}

LandmarkSet project_landmarks(const Mesh& mesh, const Pose& pose,
                              const MorphableModel& model) {
  const Eigen::MatrixX2d all = project(mesh, pose);
  LandmarkSet out;
  out.points.resize(model.num_landmarks(), 2);
  for (Eigen::Index i = 0; i < model.num_landmarks(); ++i) {
    out.points.row(i) = all.row(model.landmark_indices[static_cast<size_t>(i)]);
  }
  return out;
}

LandmarkSet project_landmarks(const MorphableModel& model, const ShapeCode& shape,
                              const ExpressionCode& expr, const Pose& pose) {
  return project_landmarks(synthesize(model, shape, expr), pose, model);
}

Eigen::Matrix3d euler_to_matrix(double yaw, double pitch, double roll) {
  return (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()) *
          Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

EulerAngles extract_euler(const Pose& pose) {
  require_unit_quaternion(pose);
  const Eigen::Matrix3d r = pose.rotation.toRotationMatrix();
  EulerAngles e;
  // R = Rz(yaw) Ry(pitch) Rx(roll): R(2,0) = -sin(pitch).
  const double sp = -r(2, 0);
  const double clamped = std::clamp(sp, -1.0, 1.0);
  e.pitch = std::asin(clamped);
  if (std::abs(std::abs(e.pitch) - std::numbers::pi / 2.0) < 1e-6) {
    // Gimbal lock: yaw and roll share an axis. Return the roll = 0 branch.
    e.gimbal_lock = true;
    e.roll = 0.0;
    if (e.pitch > 0.0) {
      e.yaw = std::atan2(-r(0, 1), r(0, 2));
    } else {
      e.yaw = std::atan2(-r(0, 1), -r(0, 2));
    }
  } else {
    e.yaw = std::atan2(r(1, 0), r(0, 0));
    e.roll = std::atan2(r(2, 1), r(2, 2));
  }
  return e;
}

}  // namespace sir3dmm
