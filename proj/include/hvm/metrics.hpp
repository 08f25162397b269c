#pragma once

// Motion-capture accuracy (MPJPE, PA-MPJPE, PVE, Accel) and distribution
// metrics (FID, diversity) over kinematic features.
//
// Units: positions in meters internally; MPJPE/PA-MPJPE/PVE are reported in
// millimeters, Accel in m/s^2.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "hvm/body_model.hpp"
#include "hvm/motion.hpp"

namespace hvm::metrics {

using body::Points;

struct JointSet {
    std::vector<Points> frames;  // T entries of J x 3
    double fps = kDefaultFps;
};

struct MeshSequence {
    std::vector<Points> vertices;       // T entries of V x 3
    std::vector<Eigen::Vector3d> roots; // pelvis position per frame
};

// N x D feature rows.
using FeatureSet = Eigen::MatrixXd;

double mpjpe(const JointSet& pred, const JointSet& gt);
double pa_mpjpe(const JointSet& pred, const JointSet& gt);
double pve(const MeshSequence& pred, const MeshSequence& gt);
double accel_error(const JointSet& pred, const JointSet& gt);

struct SimilarityTransform {
    double scale = 1.0;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
    bool degenerate = false;  // rank-deficient input; identity returned

    Points apply(const Points& x) const;
};

// Closed-form similarity minimizing |s R x + t - y|^2 (with reflection
// correction). Requires P >= 3 rows.
SimilarityTransform procrustes_align(const Points& x, const Points& y);

// Fixed-length descriptor of one motion; see kFeatureDims for the layout:
//   [0, 8)   mean speed of 8 key joints (pelvis absolute, others pelvis-relative), m/s
//   [8, 16)  std of those speeds
//   [16, 24) mean world height of the key joints, m
//   [24, 32) std of those heights
//   [32, 36) root path: mean turning rate, std turning rate (rad/s), mean ground speed (m/s), straightness.
//            Turning is measured between ground velocities over 4-frame strides, with a 0.2 m/s speed floor.
inline constexpr int kFeatureDims = 36;
inline constexpr int kVelocityFeatureDims = 16;
Eigen::VectorXd kinematic_features(const MotionSequence& m, const body::StubBody& body);
FeatureSet stack_features(const std::vector<Eigen::VectorXd>& rows);

// Frechet distance between Gaussian fits of two feature sets. When a set has
// fewer rows than D + 1 its covariance is shrunk toward a scaled identity.
double fid(const FeatureSet& a, const FeatureSet& b);
// Mean pairwise Euclidean distance over all unordered row pairs.
double diversity(const FeatureSet& a);

JointSet joint_set(const body::StubBody& body, const MotionSequence& m);
MeshSequence mesh_sequence(const body::StubBody& body, const MotionSequence& m);

struct MetricRecord {
    std::string metric;
    double value = 0.0;
    std::string units;
    std::int64_t n = 0;
    std::string config_hash;
};

nlohmann::json to_json(const MetricRecord& r);

// Reconstruction metrics of predicted vs reference motions, averaged over sequences.
struct ReconstructionReport {
    double mpjpe_mm = 0.0;
    double pa_mpjpe_mm = 0.0;
    double pve_mm = 0.0;
    double accel = 0.0;
    std::int64_t sequences = 0;
};

ReconstructionReport evaluate_reconstruction(const body::StubBody& body, const std::vector<MotionSequence>& pred,
                                             const std::vector<MotionSequence>& gt);

}  // namespace hvm::metrics
