#include "hvm/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

namespace hvm::metrics {

namespace {

constexpr std::array<int, 8> kKeyJoints = {body::pelvis,      body::left_knee, body::right_knee, body::left_ankle,
                                           body::right_ankle, body::head,      body::left_wrist, body::right_wrist};

void check_pair(const JointSet& pred, const JointSet& gt) {
    if (pred.frames.size() != gt.frames.size() || pred.frames.empty())
        throw std::invalid_argument("metrics: frame counts differ or are zero");
    for (std::size_t t = 0; t < pred.frames.size(); ++t) {
        if (pred.frames[t].rows() != gt.frames[t].rows())
            throw std::invalid_argument("metrics: joint counts differ");
    }
}

Points root_aligned(const Points& joints, const Eigen::RowVector3d& root) { return joints.rowwise() - root; }

Eigen::MatrixXd covariance(const FeatureSet& x) {
    const Eigen::RowVectorXd mean = x.colwise().mean();
    const Eigen::MatrixXd c = x.rowwise() - mean;
    Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
    if (x.rows() < x.cols() + 1) {
        const double alpha = 0.1;
        const double avg = cov.trace() / static_cast<double>(cov.rows());
        cov = (1.0 - alpha) * cov + alpha * avg * Eigen::MatrixXd::Identity(cov.rows(), cov.cols());
    }
    return cov;
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double mpjpe(const JointSet& pred, const JointSet& gt) {
    check_pair(pred, gt);
    double total = 0.0;
    std::int64_t count = 0;
    for (std::size_t t = 0; t < pred.frames.size(); ++t) {
        const Points p = root_aligned(pred.frames[t], pred.frames[t].row(0));
        const Points g = root_aligned(gt.frames[t], gt.frames[t].row(0));
        total += (p - g).rowwise().norm().sum();
        count += p.rows();
    }
    return 1000.0 * total / static_cast<double>(count);
}

Points SimilarityTransform::apply(const Points& x) const {
    return ((scale * (rotation * x.transpose())).colwise() + translation).transpose();
}

SimilarityTransform procrustes_align(const Points& x, const Points& y) {
    if (x.rows() != y.rows()) throw std::invalid_argument("procrustes_align: point counts differ");
    if (x.rows() < 3) throw std::invalid_argument("procrustes_align: need at least 3 points");
    const Eigen::RowVector3d mx = x.colwise().mean();
    const Eigen::RowVector3d my = y.colwise().mean();
    const Points xc = x.rowwise() - mx;
    const Points yc = y.rowwise() - my;
    const double n = static_cast<double>(x.rows());

    SimilarityTransform out;
    Eigen::JacobiSVD<Eigen::MatrixXd> xsvd(xc);
    const auto sx = xsvd.singularValues();
    if (sx(0) < 1e-12 || sx(1) < 1e-9 * sx(0)) {
        out.degenerate = true;
        return out;
    }
    const Eigen::Matrix3d cov = yc.transpose() * xc / n;
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d s = Eigen::Matrix3d::Identity();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s(2, 2) = -1.0;
    out.rotation = svd.matrixU() * s * svd.matrixV().transpose();
    const double var_x = xc.squaredNorm() / n;
    out.scale = (svd.singularValues().asDiagonal() * s).trace() / var_x;
    out.translation = my.transpose() - out.scale * out.rotation * mx.transpose();
    return out;
}

double pa_mpjpe(const JointSet& pred, const JointSet& gt) {
    check_pair(pred, gt);
    double total = 0.0;
    std::int64_t count = 0;
    for (std::size_t t = 0; t < pred.frames.size(); ++t) {
        const auto tf = procrustes_align(pred.frames[t], gt.frames[t]);
        const Points aligned = tf.apply(pred.frames[t]);
        total += (aligned - gt.frames[t]).rowwise().norm().sum();
        count += aligned.rows();
    }
    return 1000.0 * total / static_cast<double>(count);
}

double pve(const MeshSequence& pred, const MeshSequence& gt) {
    if (pred.vertices.size() != gt.vertices.size() || pred.vertices.empty() ||
        pred.roots.size() != pred.vertices.size() || gt.roots.size() != gt.vertices.size())
        throw std::invalid_argument("pve: frame counts differ or are zero");
    double total = 0.0;
    std::int64_t count = 0;
    for (std::size_t t = 0; t < pred.vertices.size(); ++t) {
        if (pred.vertices[t].rows() != gt.vertices[t].rows()) throw std::invalid_argument("pve: vertex counts differ");
        const Points p = pred.vertices[t].rowwise() - pred.roots[t].transpose();
        const Points g = gt.vertices[t].rowwise() - gt.roots[t].transpose();
        total += (p - g).rowwise().norm().sum();
        count += p.rows();
    }
    return 1000.0 * total / static_cast<double>(count);
}

double accel_error(const JointSet& pred, const JointSet& gt) {
    check_pair(pred, gt);
    const auto t_count = pred.frames.size();
    if (t_count < 3) throw std::invalid_argument("accel_error: need at least 3 frames");
    const double fps2 = pred.fps * pred.fps;
    double total = 0.0;
    std::int64_t count = 0;
    for (std::size_t t = 1; t + 1 < t_count; ++t) {
        const Points ap = (pred.frames[t + 1] - 2.0 * pred.frames[t] + pred.frames[t - 1]) * fps2;
        const Points ag = (gt.frames[t + 1] - 2.0 * gt.frames[t] + gt.frames[t - 1]) * fps2;
        total += (ap - ag).rowwise().norm().sum();
        count += ap.rows();
    }
    return total / static_cast<double>(count);
}

Eigen::VectorXd kinematic_features(const MotionSequence& m, const body::StubBody& body) {
    if (m.frames() < kUnitFrames) throw std::invalid_argument("kinematic_features: need at least 16 frames");
    const auto joints = body::joints_from_motion(body, m);
    const int t_count = static_cast<int>(joints.size());
    const double fps = m.fps;
    Eigen::VectorXd f = Eigen::VectorXd::Zero(kFeatureDims);

    auto local = [&](int t, int k) -> Eigen::Vector3d {
        if (k == body::pelvis) return joints[t].row(0).transpose();
        return (joints[t].row(k) - joints[t].row(0)).transpose();
    };
    for (std::size_t i = 0; i < kKeyJoints.size(); ++i) {
        const int k = kKeyJoints[i];
        Eigen::VectorXd speed(t_count - 1);
        for (int t = 0; t + 1 < t_count; ++t) speed(t) = (local(t + 1, k) - local(t, k)).norm() * fps;
        Eigen::VectorXd height(t_count);
        for (int t = 0; t < t_count; ++t) height(t) = joints[t](k, 1);
        f(i) = speed.mean();
        f(8 + i) = std::sqrt((speed.array() - speed.mean()).square().mean());
        f(16 + i) = height.mean();
        f(24 + i) = std::sqrt((height.array() - height.mean()).square().mean());
    }

    // Horizontal root path. Turning compares ground velocities measured over a
    // stride of frames, with a speed floor, so sub-centimeter jitter of a nearly
    // stationary root does not read as turning.
    constexpr int stride = 4;
    constexpr double floor_speed = 0.2;  // m/s
    double path = 0.0;
    for (int t = 0; t + 1 < t_count; ++t) {
        const Eigen::Vector3d d = joints[t + 1].row(0) - joints[t].row(0);
        path += Eigen::Vector2d(d.x(), d.z()).norm();
    }
    auto ground_velocity = [&](int t) -> Eigen::Vector2d {
        const Eigen::Vector3d d = joints[t + stride].row(0) - joints[t].row(0);
        return Eigen::Vector2d(d.x(), d.z()) * fps / stride;
    };
    Eigen::VectorXd turn(t_count - 2 * stride);
    for (int t = 0; t + 2 * stride < t_count; ++t) {
        const Eigen::Vector2d a = ground_velocity(t), b = ground_velocity(t + stride);
        const double cross = a.x() * b.y() - a.y() * b.x();
        turn(t) = std::abs(cross) / (a.norm() * b.norm() + floor_speed * floor_speed) * fps / stride;
    }
    const Eigen::Vector3d net = joints[t_count - 1].row(0) - joints[0].row(0);
    f(32) = turn.mean();
    f(33) = std::sqrt((turn.array() - turn.mean()).square().mean());
    f(34) = path * fps / static_cast<double>(t_count - 1);
    f(35) = path > 1e-9 ? Eigen::Vector2d(net.x(), net.z()).norm() / path : 0.0;
    return f;
}

FeatureSet stack_features(const std::vector<Eigen::VectorXd>& rows) {
    if (rows.empty()) return FeatureSet(0, kFeatureDims);
    FeatureSet out(static_cast<Eigen::Index>(rows.size()), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    return out;
}

double fid(const FeatureSet& a, const FeatureSet& b) {
    if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("fid: need at least 2 rows per set");
    if (a.cols() != b.cols()) throw std::invalid_argument("fid: feature widths differ");
    const Eigen::VectorXd mu = (a.colwise().mean() - b.colwise().mean()).transpose();
    const Eigen::MatrixXd ca = covariance(a);
    const Eigen::MatrixXd cb = covariance(b);
    const Eigen::MatrixXd root_a = sqrt_psd(ca);
    const Eigen::MatrixXd inner = root_a * cb * root_a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d = mu.squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    return d < 0.0 ? 0.0 : d;
}

double diversity(const FeatureSet& a) {
    if (a.rows() < 2) throw std::invalid_argument("diversity: need at least 2 rows");
    double total = 0.0;
    std::int64_t pairs = 0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < a.rows(); ++j) {
            total += (a.row(i) - a.row(j)).norm();
            ++pairs;
        }
    }
    return total / static_cast<double>(pairs);
}

JointSet joint_set(const body::StubBody& body, const MotionSequence& m) {
    return {body::joints_from_motion(body, m), m.fps};
}

MeshSequence mesh_sequence(const body::StubBody& body, const MotionSequence& m) {
    MeshSequence out;
    for (int t = 0; t < m.frames(); ++t) {
        const auto posed = body::forward_kinematics(body, m.frame(t));
        out.vertices.push_back(body::skin_vertices(body, posed.skinning));
        out.roots.push_back(posed.joints.row(0).transpose());
    }
    return out;
}

nlohmann::json to_json(const MetricRecord& r) {
    return {{"metric", r.metric}, {"value", r.value}, {"units", r.units}, {"n", r.n}, {"config_hash", r.config_hash}};
}

ReconstructionReport evaluate_reconstruction(const body::StubBody& body, const std::vector<MotionSequence>& pred,
                                             const std::vector<MotionSequence>& gt) {
    if (pred.size() != gt.size() || pred.empty())
        throw std::invalid_argument("evaluate_reconstruction: sequence counts differ or are zero");
    ReconstructionReport r;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto jp = joint_set(body, pred[i]);
        const auto jg = joint_set(body, gt[i]);
        r.mpjpe_mm += mpjpe(jp, jg);
        r.pa_mpjpe_mm += pa_mpjpe(jp, jg);
        r.pve_mm += pve(mesh_sequence(body, pred[i]), mesh_sequence(body, gt[i]));
        if (jp.frames.size() >= 3) r.accel += accel_error(jp, jg);
    }
    const double n = static_cast<double>(pred.size());
    r.mpjpe_mm /= n;
    r.pa_mpjpe_mm /= n;
    r.pve_mm /= n;
    r.accel /= n;
    r.sequences = static_cast<std::int64_t>(pred.size());
    return r;
}

}  // namespace hvm::metrics
