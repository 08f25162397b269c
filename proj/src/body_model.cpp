#include "hvm/body_model.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

#include "hvm/archive.hpp"
#include "hvm/motion.hpp"

namespace hvm::body {

namespace {

constexpr std::array<int, kJointCount> kParents = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7,
                                                   8,  9, 9, 9, 12, 13, 14, 16, 17, 18, 19};

// Bone offsets from the parent joint at zero shape; y up, +x toward the body's left, +z forward.
constexpr std::array<std::array<double, 3>, kJointCount> kRestOffsets = {{
    {0.0, 0.0, 0.0},       // pelvis
    {0.06, -0.09, 0.0},    // left_hip
    {-0.06, -0.09, 0.0},   // right_hip
    {0.0, 0.11, -0.01},    // spine1
    {0.04, -0.38, 0.0},    // left_knee
    {-0.04, -0.38, 0.0},   // right_knee
    {0.0, 0.13, 0.0},      // spine2
    {0.0, -0.40, -0.04},   // left_ankle
    {0.0, -0.40, -0.04},   // right_ankle
    {0.0, 0.05, 0.02},     // spine3
    {0.02, -0.06, 0.12},   // left_foot
    {-0.02, -0.06, 0.12},  // right_foot
    {0.0, 0.21, -0.03},    // neck
    {0.07, 0.11, -0.01},   // left_collar
    {-0.07, 0.11, -0.01},  // right_collar
    {0.0, 0.09, 0.05},     // head
    {0.11, 0.04, -0.01},   // left_shoulder
    {-0.11, 0.04, -0.01},  // right_shoulder
    {0.26, 0.0, -0.02},    // left_elbow
    {-0.26, 0.0, -0.02},   // right_elbow
    {0.25, 0.01, 0.0},     // left_wrist
    {-0.25, 0.01, 0.0},    // right_wrist
}};

// Capsule radius of the bone that ends at each joint.
constexpr std::array<double, kJointCount> kBoneRadius = {0.0,  0.07, 0.07, 0.11, 0.065, 0.065, 0.11, 0.05,
                                                         0.05, 0.11, 0.04, 0.04, 0.05,  0.05,  0.05, 0.06,
                                                         0.05, 0.05, 0.045, 0.045, 0.035, 0.035};

constexpr int kRingsPerBone = 4;
constexpr int kPointsPerRing = 7;
constexpr double kHeadRadius = 0.1;

Mat3 skew(const Vec3& v) {
    Mat3 k;
    k << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return k;
}

void validate_shape(const ShapeVector& beta) {
    for (int i = 0; i < kShapeDims; ++i) {
        if (!std::isfinite(beta[i]) || std::abs(beta[i]) > kMaxShapeCoefficient)
            throw std::invalid_argument("shape coefficient " + std::to_string(i) + " outside [-3, 3]");
    }
}

}  // namespace

const std::array<int, kJointCount>& smplx_body_parents() { return kParents; }

StubBody::StubBody(std::vector<int> parents, Points rest_offsets, std::vector<Points> shape_basis,
                   Points template_vertices, Eigen::MatrixXd skin_weights)
    : parents_(std::move(parents)),
      rest_offsets_(std::move(rest_offsets)),
      shape_basis_(std::move(shape_basis)),
      template_vertices_(std::move(template_vertices)),
      skin_weights_(std::move(skin_weights)) {
    const int j = joint_count();
    if (j < 1 || parents_[0] != -1) throw std::invalid_argument("body: joint 0 must be the root");
    for (int k = 1; k < j; ++k) {
        if (parents_[k] < 0 || parents_[k] >= k) throw std::invalid_argument("body: parents[k] must be < k");
    }
    if (rest_offsets_.rows() != j) throw std::invalid_argument("body: rest_offsets must be J x 3");
    if (static_cast<int>(shape_basis_.size()) != kShapeDims)
        throw std::invalid_argument("body: shape basis must have 10 components");
    for (const auto& b : shape_basis_) {
        if (b.rows() != j) throw std::invalid_argument("body: shape basis components must be J x 3");
    }
    if (skin_weights_.rows() != template_vertices_.rows() || skin_weights_.cols() != j)
        throw std::invalid_argument("body: skin weights must be V x J");
    for (Eigen::Index v = 0; v < skin_weights_.rows(); ++v) {
        if ((skin_weights_.row(v).array() < 0.0).any()) throw std::invalid_argument("body: negative skin weight");
        if (std::abs(skin_weights_.row(v).sum() - 1.0) > 1e-6)
            throw std::invalid_argument("body: skin weights of vertex " + std::to_string(v) + " do not sum to 1");
    }
    // Worst case over |beta_i| <= 3 of the shortened bone length.
    for (int k = 1; k < j; ++k) {
        double slack = 0.0;
        for (const auto& b : shape_basis_) slack += kMaxShapeCoefficient * b.row(k).norm();
        if (rest_offsets_.row(k).norm() - slack <= 0.0)
            throw std::invalid_argument("body: bone " + std::to_string(k) + " can collapse within the shape range");
    }
}

StubBody StubBody::procedural(std::uint64_t seed) {
    const int j = kJointCount;
    Points offsets(j, 3);
    for (int k = 0; k < j; ++k) offsets.row(k) = Vec3(kRestOffsets[k][0], kRestOffsets[k][1], kRestOffsets[k][2]);

    auto chain_basis = [&](double scale, std::initializer_list<int> joints) {
        Points b = Points::Zero(j, 3);
        for (int k : joints) b.row(k) = scale * offsets.row(k);
        return b;
    };
    std::vector<Points> basis;
    basis.push_back(0.04 * offsets);                                            // stature
    basis.push_back(chain_basis(0.05, {left_knee, right_knee, left_ankle, right_ankle}));  // legs
    basis.push_back(chain_basis(0.05, {left_elbow, right_elbow, left_wrist, right_wrist})); // arms
    basis.push_back(chain_basis(0.05, {spine1, spine2, spine3, neck}));        // torso
    basis.push_back(chain_basis(0.06, {left_collar, right_collar, left_shoulder, right_shoulder}));
    basis.push_back(chain_basis(0.06, {left_hip, right_hip}));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    while (static_cast<int>(basis.size()) < kShapeDims) {
        Points b = Points::Zero(j, 3);
        for (int k = 1; k < j; ++k) {
            for (int c = 0; c < 3; ++c) b(k, c) = 0.01 * offsets.row(k).norm() * gauss(rng);
        }
        basis.push_back(b);
    }
    basis[0].row(0).setZero();
    // Keep every bone at >= 25% of its rest length for |beta_i| <= 3.
    for (int k = 1; k < j; ++k) {
        double total = 0.0;
        for (const auto& b : basis) total += b.row(k).norm();
        const double budget = 0.25 * offsets.row(k).norm() / kMaxShapeCoefficient;
        if (total > budget) {
            for (auto& b : basis) b.row(k) *= budget / total;
        }
    }

    // Rest joint positions at zero shape drive the mesh layout.
    Points rest(j, 3);
    rest.row(0).setZero();
    for (int k = 1; k < j; ++k) rest.row(k) = rest.row(kParents[k]) + offsets.row(k);

    const int bone_vertices = (j - 1) * kRingsPerBone * kPointsPerRing;
    const std::array<Vec3, 12> icosa = [] {
        const double p = std::numbers::phi;
        std::array<Vec3, 12> v = {Vec3(-1, p, 0), Vec3(1, p, 0),  Vec3(-1, -p, 0), Vec3(1, -p, 0),
                                  Vec3(0, -1, p), Vec3(0, 1, p),  Vec3(0, -1, -p), Vec3(0, 1, -p),
                                  Vec3(p, 0, -1), Vec3(p, 0, 1),  Vec3(-p, 0, -1), Vec3(-p, 0, 1)};
        for (auto& x : v) x.normalize();
        return v;
    }();
    const int vertex_total = bone_vertices + static_cast<int>(icosa.size());
    Points verts(vertex_total, 3);
    Eigen::MatrixXd weights = Eigen::MatrixXd::Zero(vertex_total, j);

    int v = 0;
    for (int k = 1; k < j; ++k) {
        const int p = kParents[k];
        const Vec3 a = rest.row(p);
        const Vec3 b = rest.row(k);
        const Vec3 axis = (b - a).normalized();
        const Vec3 helper = std::abs(axis.y()) < 0.9 ? Vec3::UnitY() : Vec3::UnitX();
        const Vec3 u = axis.cross(helper).normalized();
        const Vec3 w = axis.cross(u);
        for (int r = 0; r < kRingsPerBone; ++r) {
            const double f = (r + 0.5) / kRingsPerBone;
            const Vec3 centre = a + f * (b - a);
            for (int q = 0; q < kPointsPerRing; ++q) {
                const double ang = 2.0 * std::numbers::pi * (q + 0.5 * (r % 2)) / kPointsPerRing;
                verts.row(v) = centre + kBoneRadius[k] * (std::cos(ang) * u + std::sin(ang) * w);
                weights(v, p) = 1.0 - 0.5 * f;
                weights(v, k) = 0.5 * f;
                ++v;
            }
        }
    }
    const Vec3 head_centre = rest.row(head).transpose() + Vec3(0.0, 0.08, 0.0);
    for (const auto& dir : icosa) {
        verts.row(v) = head_centre + kHeadRadius * dir;
        weights(v, head) = 1.0;
        ++v;
    }

    return StubBody(std::vector<int>(kParents.begin(), kParents.end()), offsets, std::move(basis), verts, weights);
}

void StubBody::save(const std::filesystem::path& path) const {
    const int j = joint_count();
    const int nv = vertex_count();
    Archive ar;
    ar.meta = {{"kind", "stub_body"}, {"joints", j}, {"vertices", nv}, {"shape_dims", kShapeDims}};
    ar.add("parents", {j}, std::vector<std::int32_t>(parents_.begin(), parents_.end()));
    std::vector<float> off, basis, verts, weights;
    for (int k = 0; k < j; ++k)
        for (int c = 0; c < 3; ++c) off.push_back(static_cast<float>(rest_offsets_(k, c)));
    for (const auto& b : shape_basis_)
        for (int k = 0; k < j; ++k)
            for (int c = 0; c < 3; ++c) basis.push_back(static_cast<float>(b(k, c)));
    for (int i = 0; i < nv; ++i)
        for (int c = 0; c < 3; ++c) verts.push_back(static_cast<float>(template_vertices_(i, c)));
    for (int i = 0; i < nv; ++i)
        for (int k = 0; k < j; ++k) weights.push_back(static_cast<float>(skin_weights_(i, k)));
    ar.add("rest_offsets", {j, 3}, std::move(off));
    ar.add("shape_basis", {kShapeDims, j, 3}, std::move(basis));
    ar.add("template_vertices", {nv, 3}, std::move(verts));
    ar.add("skin_weights", {nv, j}, std::move(weights));
    ar.save(path);
}

StubBody StubBody::load(const std::filesystem::path& path) {
    const Archive ar = Archive::load(path);
    if (ar.meta.value("kind", "") != "stub_body") throw FormatError(path.string() + " is not a body file");
    const auto& parents = ar.at("parents");
    const int j = static_cast<int>(parents.numel());
    const auto& off = ar.at("rest_offsets");
    const auto& basis = ar.at("shape_basis");
    const auto& verts = ar.at("template_vertices");
    const auto& weights = ar.at("skin_weights");
    if (off.numel() != 3 * j || basis.numel() != kShapeDims * 3 * j || verts.shape.size() != 2 ||
        weights.numel() != verts.shape[0] * j)
        throw FormatError("body file arrays have inconsistent shapes");
    const int nv = static_cast<int>(verts.shape[0]);
    Points rest(j, 3);
    for (int k = 0; k < j; ++k)
        for (int c = 0; c < 3; ++c) rest(k, c) = off.f32[3 * k + c];
    std::vector<Points> shape(kShapeDims, Points(j, 3));
    for (int i = 0; i < kShapeDims; ++i)
        for (int k = 0; k < j; ++k)
            for (int c = 0; c < 3; ++c) shape[i](k, c) = basis.f32[(i * j + k) * 3 + c];
    Points tv(nv, 3);
    for (int i = 0; i < nv; ++i)
        for (int c = 0; c < 3; ++c) tv(i, c) = verts.f32[3 * i + c];
    Eigen::MatrixXd w(nv, j);
    for (int i = 0; i < nv; ++i) {
        for (int k = 0; k < j; ++k) w(i, k) = weights.f32[i * j + k];
        w.row(i) /= w.row(i).sum();
    }
    return StubBody(std::vector<int>(parents.i32.begin(), parents.i32.end()), rest, std::move(shape), tv, w);
}

Mat3 axis_angle_to_matrix(const Vec3& v) {
    const double theta = v.norm();
    const Mat3 k = skew(v);
    double a, b;  // sin(t)/t and (1 - cos(t))/t^2
    if (theta < 1e-4) {
        const double t2 = theta * theta;
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    } else {
        a = std::sin(theta) / theta;
        b = (1.0 - std::cos(theta)) / (theta * theta);
    }
    return Mat3::Identity() + a * k + b * k * k;
}

Vec3 matrix_to_axis_angle(const Mat3& r) {
    const Vec3 w(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));  // 2 sin(t) axis
    const double s = 0.5 * w.norm();
    const double c = std::clamp(0.5 * (r.trace() - 1.0), -1.0, 1.0);
    const double theta = std::atan2(s, c);
    if (theta < 1e-6) return 0.5 * w;
    if (std::numbers::pi - theta > 1e-6) return theta / (2.0 * s) * w;
    // Near a half-turn: recover the axis from the symmetric part.
    const Mat3 b = 0.5 * (r + Mat3::Identity());
    int col = 0;
    b.diagonal().maxCoeff(&col);
    Vec3 axis = b.col(col) / std::sqrt(std::max(b(col, col), 1e-300));
    axis.normalize();
    if (axis.dot(w) < 0.0) axis = -axis;
    return theta * axis;
}

Vec3 canonicalize_axis_angle(const Vec3& v) {
    const double theta = v.norm();
    if (theta <= std::numbers::pi) return v;
    const double reduced = std::remainder(theta, 2.0 * std::numbers::pi);  // in [-pi, pi]
    return v * (reduced / theta);
}

Points rest_joints(const StubBody& body, const ShapeVector& beta) {
    validate_shape(beta);
    const int j = body.joint_count();
    Points offsets = body.rest_offsets();
    for (int i = 0; i < kShapeDims; ++i) offsets += beta[i] * body.shape_basis()[i];
    Points joints(j, 3);
    joints.row(0).setZero();
    for (int k = 1; k < j; ++k) joints.row(k) = joints.row(body.parents()[k]) + offsets.row(k);
    return joints;
}

PosedBody forward_kinematics(const StubBody& body, const FramePose& pose) {
    const int j = body.joint_count();
    const Points rest = rest_joints(body, pose.beta);
    PosedBody out;
    out.joints.resize(j, 3);
    out.world.resize(j);
    out.skinning.resize(j);
    for (int k = 0; k < j; ++k) {
        Eigen::Isometry3d local = Eigen::Isometry3d::Identity();
        if (k == 0) {
            local.linear() = axis_angle_to_matrix(pose.phi);
            local.translation() = pose.tau + rest.row(0).transpose();
            out.world[k] = local;
        } else {
            const int p = body.parents()[k];
            local.linear() = axis_angle_to_matrix(pose.joint_rotation(k));
            local.translation() = (rest.row(k) - rest.row(p)).transpose();
            out.world[k] = out.world[p] * local;
        }
        out.joints.row(k) = out.world[k].translation().transpose();
        Eigen::Isometry3d rest_inv = Eigen::Isometry3d::Identity();
        rest_inv.translation() = -rest.row(k).transpose();
        out.skinning[k] = out.world[k] * rest_inv;
    }
    return out;
}

Points skin_vertices(const StubBody& body, std::span<const Eigen::Isometry3d> skinning) {
    const int j = body.joint_count();
    if (static_cast<int>(skinning.size()) != j) throw std::invalid_argument("skin_vertices: need one transform per joint");
    const auto& tv = body.template_vertices();
    const auto& w = body.skin_weights();
    Points out(tv.rows(), 3);
    for (Eigen::Index v = 0; v < tv.rows(); ++v) {
        Eigen::Matrix3d lin = Eigen::Matrix3d::Zero();
        Vec3 trans = Vec3::Zero();
        for (int k = 0; k < j; ++k) {
            const double wk = w(v, k);
            if (wk == 0.0) continue;
            lin += wk * skinning[k].linear();
            trans += wk * skinning[k].translation();
        }
        out.row(v) = (lin * tv.row(v).transpose() + trans).transpose();
    }
    return out;
}

std::vector<Points> joints_from_motion(const StubBody& body, const MotionSequence& motion) {
    std::vector<Points> out;
    out.reserve(motion.frames());
    for (int t = 0; t < motion.frames(); ++t) out.push_back(forward_kinematics(body, motion.frame(t)).joints);
    return out;
}

std::vector<Points> vertices_from_motion(const StubBody& body, const MotionSequence& motion) {
    std::vector<Points> out;
    out.reserve(motion.frames());
    for (int t = 0; t < motion.frames(); ++t) {
        const auto posed = forward_kinematics(body, motion.frame(t));
        out.push_back(skin_vertices(body, posed.skinning));
    }
    return out;
}

}  // namespace hvm::body
