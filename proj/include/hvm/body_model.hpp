#pragma once

// Surrogate parametric body with SMPL-X body-block parameter shapes:
// 21 articulated joints (theta in R^63), 10 shape coefficients, root
// orientation and translation. Internal units are meters and radians.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace hvm {
struct MotionSequence;
}

namespace hvm::body {

inline constexpr int kJointCount = 22;
inline constexpr int kPoseDims = 63;
inline constexpr int kShapeDims = 10;
inline constexpr double kMaxShapeCoefficient = 3.0;

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3>;
using PoseVector = Eigen::Matrix<double, kPoseDims, 1>;
using ShapeVector = Eigen::Matrix<double, kShapeDims, 1>;

enum Joint : int {
    pelvis = 0, left_hip, right_hip, spine1, left_knee, right_knee, spine2, left_ankle, right_ankle, spine3,
    left_foot, right_foot, neck, left_collar, right_collar, head, left_shoulder, right_shoulder, left_elbow,
    right_elbow, left_wrist, right_wrist
};

struct FramePose {
    PoseVector theta = PoseVector::Zero();  // axis-angle for joints 1..21
    ShapeVector beta = ShapeVector::Zero();
    Vec3 phi = Vec3::Zero();                // root orientation, axis-angle
    Vec3 tau = Vec3::Zero();                // root translation, meters

    Vec3 joint_rotation(int joint) const { return theta.segment<3>(3 * (joint - 1)); }
};

class StubBody {
public:
    // Validates the tree, skin-weight and bone-length invariants; throws std::invalid_argument.
    StubBody(std::vector<int> parents, Points rest_offsets, std::vector<Points> shape_basis, Points template_vertices,
             Eigen::MatrixXd skin_weights);

    // Deterministic 22-joint body with a capsule-shell mesh (~600 vertices).
    static StubBody procedural(std::uint64_t seed = 0);

    int joint_count() const { return static_cast<int>(parents_.size()); }
    int vertex_count() const { return static_cast<int>(template_vertices_.rows()); }
    const std::vector<int>& parents() const { return parents_; }
    const Points& rest_offsets() const { return rest_offsets_; }
    const std::vector<Points>& shape_basis() const { return shape_basis_; }
    const Points& template_vertices() const { return template_vertices_; }
    const Eigen::MatrixXd& skin_weights() const { return skin_weights_; }

    void save(const std::filesystem::path& path) const;
    static StubBody load(const std::filesystem::path& path);

private:
    std::vector<int> parents_;
    Points rest_offsets_;
    std::vector<Points> shape_basis_;  // kShapeDims entries, each J x 3
    Points template_vertices_;
    Eigen::MatrixXd skin_weights_;      // V x J
};

// Rodrigues; exact identity at zero.
Mat3 axis_angle_to_matrix(const Vec3& v);
// Inverse of axis_angle_to_matrix with rotation angle in [0, pi].
Vec3 matrix_to_axis_angle(const Mat3& r);
// Equivalent axis-angle with norm <= pi.
Vec3 canonicalize_axis_angle(const Vec3& v);

// Throws std::invalid_argument when any |beta_i| > 3.
Points rest_joints(const StubBody& body, const ShapeVector& beta);

struct PosedBody {
    Points joints;                                // J x 3 world positions
    std::vector<Eigen::Isometry3d> world;         // joint frames
    std::vector<Eigen::Isometry3d> skinning;      // world * rest^-1, input to skinning
};

PosedBody forward_kinematics(const StubBody& body, const FramePose& pose);

// Linear blend skinning of the template mesh.
Points skin_vertices(const StubBody& body, std::span<const Eigen::Isometry3d> skinning);

// Frame-wise forward kinematics; one J x 3 block per frame.
std::vector<Points> joints_from_motion(const StubBody& body, const MotionSequence& motion);
std::vector<Points> vertices_from_motion(const StubBody& body, const MotionSequence& motion);

// The kinematic tree the procedural body uses.
const std::array<int, kJointCount>& smplx_body_parents();

}  // namespace hvm::body
