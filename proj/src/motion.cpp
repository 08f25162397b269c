#include "hvm/motion.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <random>
#include <stdexcept>
#include <unordered_set>

#include "hvm/archive.hpp"

namespace hvm {

using body::Mat3;
using body::Vec3;

MotionSequence MotionSequence::zeros(int frames, float fps) {
    MotionSequence m;
    m.theta = RowMatrixXf::Zero(frames, kThetaChannels);
    m.beta = RowMatrixXf::Zero(frames, kBetaChannels);
    m.phi = RowMatrixXf::Zero(frames, kPhiChannels);
    m.tau = RowMatrixXf::Zero(frames, kTauChannels);
    m.fps = fps;
    return m;
}

body::FramePose MotionSequence::frame(int t) const {
    body::FramePose p;
    p.theta = theta.row(t).transpose().cast<double>();
    p.beta = beta.row(t).transpose().cast<double>();
    p.phi = phi.row(t).transpose().cast<double>();
    p.tau = tau.row(t).transpose().cast<double>();
    return p;
}

void MotionSequence::set_frame(int t, const body::FramePose& pose) {
    theta.row(t) = pose.theta.transpose().cast<float>();
    beta.row(t) = pose.beta.transpose().cast<float>();
    phi.row(t) = pose.phi.transpose().cast<float>();
    tau.row(t) = pose.tau.transpose().cast<float>();
}

void MotionSequence::validate() const {
    const auto t = theta.rows();
    if (t < 1) throw std::invalid_argument("motion: need at least one frame");
    if (theta.cols() != kThetaChannels || beta.cols() != kBetaChannels || phi.cols() != kPhiChannels ||
        tau.cols() != kTauChannels)
        throw std::invalid_argument("motion: wrong channel count");
    if (beta.rows() != t || phi.rows() != t || tau.rows() != t)
        throw std::invalid_argument("motion: frame counts differ between parameter blocks");
    if (!theta.allFinite() || !beta.allFinite() || !phi.allFinite() || !tau.allFinite())
        throw std::invalid_argument("motion: non-finite parameter");
    if (!(fps > 0.0f)) throw std::invalid_argument("motion: fps must be positive");
}

bool MotionSequence::operator==(const MotionSequence& o) const {
    return fps == o.fps && theta == o.theta && beta == o.beta && phi == o.phi && tau == o.tau;
}

VelocityEncodedMotion velocity_encode(const MotionSequence& m) {
    const RowMatrixXf x = channel_concat(m);
    RowMatrixXf v = x;
    for (Eigen::Index t = x.rows() - 1; t >= 1; --t) v.row(t) = x.row(t) - x.row(t - 1);
    return {channel_split(v, m.fps)};
}

MotionSequence velocity_decode(const VelocityEncodedMotion& v) {
    const RowMatrixXf d = channel_concat(v.channels);
    RowMatrixXf x(d.rows(), d.cols());
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(d.cols());
    for (Eigen::Index t = 0; t < d.rows(); ++t) {
        acc += d.row(t).transpose().cast<double>();
        x.row(t) = acc.transpose().cast<float>();
    }
    return channel_split(x, v.channels.fps);
}

RowMatrixXf channel_concat(const MotionSequence& m) {
    RowMatrixXf x(m.frames(), kMotionChannels);
    x.leftCols(kThetaChannels) = m.theta;
    x.middleCols(kThetaChannels, kBetaChannels) = m.beta;
    x.middleCols(kThetaChannels + kBetaChannels, kPhiChannels) = m.phi;
    x.rightCols(kTauChannels) = m.tau;
    return x;
}

MotionSequence channel_split(const RowMatrixXf& x, float fps) {
    if (x.cols() != kMotionChannels)
        throw FormatError("channel_split: expected 79 channels, got " + std::to_string(x.cols()));
    MotionSequence m;
    m.theta = x.leftCols(kThetaChannels);
    m.beta = x.middleCols(kThetaChannels, kBetaChannels);
    m.phi = x.middleCols(kThetaChannels + kBetaChannels, kPhiChannels);
    m.tau = x.rightCols(kTauChannels);
    m.fps = fps;
    return m;
}

MotionSequence pad_to_unit(const MotionSequence& m, int unit) {
    const int t = m.frames();
    const int padded = (t + unit - 1) / unit * unit;
    if (padded == t) return m;
    MotionSequence out = MotionSequence::zeros(padded, m.fps);
    const RowMatrixXf src = channel_concat(m);
    RowMatrixXf dst(padded, kMotionChannels);
    dst.topRows(t) = src;
    for (int k = t; k < padded; ++k) dst.row(k) = src.row(t - 1);
    return channel_split(dst, m.fps);
}

MotionSequence slice_frames(const MotionSequence& m, int first, int count) {
    if (first < 0 || count < 1 || first + count > m.frames()) throw std::out_of_range("slice_frames: bad range");
    MotionSequence out;
    out.theta = m.theta.middleRows(first, count);
    out.beta = m.beta.middleRows(first, count);
    out.phi = m.phi.middleRows(first, count);
    out.tau = m.tau.middleRows(first, count);
    out.fps = m.fps;
    return out;
}

MotionFamily parse_family(std::string_view name) {
    if (name == "walk") return MotionFamily::walk;
    if (name == "wave") return MotionFamily::wave;
    if (name == "squat") return MotionFamily::squat;
    if (name == "smooth_noise") return MotionFamily::smooth_noise;
    throw std::invalid_argument("unknown motion family '" + std::string(name) + "'");
}

std::string_view family_name(MotionFamily family) {
    switch (family) {
        case MotionFamily::walk: return "walk";
        case MotionFamily::wave: return "wave";
        case MotionFamily::squat: return "squat";
        case MotionFamily::smooth_noise: return "smooth_noise";
    }
    return "unknown";
}

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kStandingHeight = 0.92;
constexpr double kArmsDown = 1.3;

Mat3 rot_x(double a) { return body::axis_angle_to_matrix(Vec3(a, 0, 0)); }
Mat3 rot_y(double a) { return body::axis_angle_to_matrix(Vec3(0, a, 0)); }
Mat3 rot_z(double a) { return body::axis_angle_to_matrix(Vec3(0, 0, a)); }

class Generator {
public:
    Generator(std::uint64_t seed, int frames, MotionFamily family)
        : rng_(seed ^ (0x51ed2701ULL * (static_cast<std::uint64_t>(family) + 1))),
          motion_(MotionSequence::zeros(frames, kDefaultFps)) {
        for (int i = 0; i < body::kShapeDims; ++i) {
            shape_[i] = uniform(-1.5, 1.5);
            drift_rate_[i] = uniform(0.1, 0.3);
            drift_phase_[i] = uniform(0.0, 2.0 * std::numbers::pi);
        }
    }

    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
    int frames() const { return motion_.frames(); }
    double time(int t) const { return t / static_cast<double>(motion_.fps); }

    // Shape is fixed per sequence up to a slow drift of amplitude 0.3 * kShapeNoise.
    body::FramePose base_pose(int t) const {
        body::FramePose p;
        for (int i = 0; i < body::kShapeDims; ++i)
            p.beta[i] = shape_[i] + 0.3 * kShapeNoise * std::sin(2.0 * std::numbers::pi * drift_rate_[i] * time(t) + drift_phase_[i]);
        return p;
    }

    static void set_joint(body::FramePose& p, int joint, const Vec3& aa) {
        p.theta.segment<3>(3 * (joint - 1)) = body::canonicalize_axis_angle(aa);
    }
    static void set_joint_rotation(body::FramePose& p, int joint, const Mat3& r) {
        set_joint(p, joint, body::matrix_to_axis_angle(r));
    }

    void emit(int t, const body::FramePose& p) { motion_.set_frame(t, p); }
    MotionSequence take() { return std::move(motion_); }

private:
    std::mt19937_64 rng_;
    MotionSequence motion_;
    std::array<double, body::kShapeDims> shape_{};
    std::array<double, body::kShapeDims> drift_rate_{};
    std::array<double, body::kShapeDims> drift_phase_{};
};

MotionSequence walk(Generator& g) {
    const double speed = g.uniform(0.6, 1.4);
    const double heading = g.uniform(-0.5, 0.5);
    const double freq = g.uniform(0.7, 1.1);
    const double phase = g.uniform(0.0, 2.0 * kPi);
    const double x0 = g.uniform(-0.5, 0.5), z0 = g.uniform(-0.3, 0.3);
    const double hip_amp = g.uniform(0.3, 0.5), knee_amp = g.uniform(0.4, 0.8), arm_amp = g.uniform(0.2, 0.4);
    const double lean = g.uniform(0.0, 0.08);
    const double w = 2.0 * kPi * freq;
    for (int t = 0; t < g.frames(); ++t) {
        const double s = g.time(t);
        const double c = w * s + phase;
        body::FramePose p = g.base_pose(t);
        p.tau = Vec3(x0 + speed * std::cos(heading) * s, kStandingHeight + 0.015 * std::sin(2.0 * c),
                     z0 + speed * std::sin(heading) * s);
        p.phi = body::matrix_to_axis_angle(rot_y(0.5 * kPi - heading + 0.05 * std::sin(c)) * rot_x(lean));
        Generator::set_joint(p, body::left_hip, Vec3(hip_amp * std::sin(c), 0, 0));
        Generator::set_joint(p, body::right_hip, Vec3(-hip_amp * std::sin(c), 0, 0));
        Generator::set_joint(p, body::left_knee, Vec3(0.5 * knee_amp * (1.0 - std::cos(c)), 0, 0));
        Generator::set_joint(p, body::right_knee, Vec3(0.5 * knee_amp * (1.0 + std::cos(c)), 0, 0));
        Generator::set_joint(p, body::left_ankle, Vec3(0.2 * std::sin(c + 0.5), 0, 0));
        Generator::set_joint(p, body::right_ankle, Vec3(-0.2 * std::sin(c + 0.5), 0, 0));
        Generator::set_joint(p, body::spine1, Vec3(0, 0.05 * std::sin(c), 0));
        Generator::set_joint_rotation(p, body::left_shoulder, rot_z(-kArmsDown) * rot_x(-arm_amp * std::sin(c)));
        Generator::set_joint_rotation(p, body::right_shoulder, rot_z(kArmsDown) * rot_x(arm_amp * std::sin(c)));
        Generator::set_joint(p, body::left_elbow, Vec3(0, -(0.3 + 0.15 * std::sin(c)), 0));
        Generator::set_joint(p, body::right_elbow, Vec3(0, 0.3 - 0.15 * std::sin(c), 0));
        g.emit(t, p);
    }
    return g.take();
}

MotionSequence wave(Generator& g) {
    const bool left = g.uniform(0.0, 1.0) < 0.5;
    const double yaw = g.uniform(-0.6, 0.6);
    const double raise_time = g.uniform(0.7, 1.0);
    const double start = g.uniform(0.0, 1.0);
    const double wave_amp = g.uniform(0.25, 0.4), freq = g.uniform(1.0, 1.5);
    const double phase = g.uniform(0.0, 2.0 * kPi);
    const double x0 = g.uniform(-0.3, 0.3), z0 = g.uniform(-0.3, 0.3);
    const double sway = g.uniform(0.0, 0.03);
    const double sign = left ? 1.0 : -1.0;  // left arm rotates about -z to go down
    for (int t = 0; t < g.frames(); ++t) {
        const double s = g.time(t);
        const double u = std::clamp((s + start) / raise_time, 0.0, 1.0);
        const double raise = u * u * (3.0 - 2.0 * u);
        const double c = 2.0 * kPi * freq * s + phase;
        body::FramePose p = g.base_pose(t);
        p.tau = Vec3(x0 + sway * std::sin(2.0 * kPi * 0.3 * s), kStandingHeight + 0.005 * std::sin(c), z0);
        p.phi = Vec3(0, yaw, 0);
        const int waving_shoulder = left ? body::left_shoulder : body::right_shoulder;
        const int waving_elbow = left ? body::left_elbow : body::right_elbow;
        const int idle_shoulder = left ? body::right_shoulder : body::left_shoulder;
        Generator::set_joint(p, waving_shoulder, Vec3(0, 0, sign * (-kArmsDown + 1.6 * raise)));
        Generator::set_joint(p, waving_elbow, Vec3(0, 0, sign * (0.9 + wave_amp * std::sin(c))));
        Generator::set_joint(p, idle_shoulder, Vec3(0, 0, sign * kArmsDown));
        Generator::set_joint(p, body::spine2, Vec3(0, 0, -sign * 0.05 * raise));
        Generator::set_joint(p, body::left_knee, Vec3(0.05, 0, 0));
        Generator::set_joint(p, body::right_knee, Vec3(0.05, 0, 0));
        g.emit(t, p);
    }
    return g.take();
}

MotionSequence squat(Generator& g) {
    const double freq = g.uniform(0.9, 1.3);
    const double depth = g.uniform(0.6, 0.95);
    const double yaw = g.uniform(-2.5, 2.5);
    const double arm_raise = g.uniform(0.4, 0.8);
    const double x0 = g.uniform(-0.3, 0.3), z0 = g.uniform(-0.3, 0.3);
    for (int t = 0; t < g.frames(); ++t) {
        const double s = g.time(t);
        const double bend = 0.5 * (1.0 - std::cos(2.0 * kPi * freq * s));  // 0 standing, 1 deepest
        body::FramePose p = g.base_pose(t);
        p.tau = Vec3(x0, kStandingHeight - 0.35 * depth * bend, z0);
        p.phi = body::matrix_to_axis_angle(rot_y(yaw) * rot_x(0.3 * depth * bend));
        Generator::set_joint(p, body::left_hip, Vec3(-0.8 * depth * bend, 0, 0));
        Generator::set_joint(p, body::right_hip, Vec3(-0.8 * depth * bend, 0, 0));
        Generator::set_joint(p, body::left_knee, Vec3(depth * bend, 0, 0));
        Generator::set_joint(p, body::right_knee, Vec3(depth * bend, 0, 0));
        Generator::set_joint(p, body::left_ankle, Vec3(-0.4 * depth * bend, 0, 0));
        Generator::set_joint(p, body::right_ankle, Vec3(-0.4 * depth * bend, 0, 0));
        Generator::set_joint_rotation(p, body::left_shoulder, rot_z(-kArmsDown) * rot_y(arm_raise * bend));
        Generator::set_joint_rotation(p, body::right_shoulder, rot_z(kArmsDown) * rot_y(-arm_raise * bend));
        g.emit(t, p);
    }
    return g.take();
}

MotionSequence smooth_noise(Generator& g) {
    struct Wave {
        double amp, freq, phase;
    };
    // Per component: three sinusoids with total peak speed sum(a * 2 pi f) <= 1.81 rad/s,
    // so the axis-angle derivative stays below 1.81 * sqrt(3) < 4 rad/s.
    auto draw = [&g] {
        std::array<Wave, 3> w{};
        for (auto& x : w) x = {g.uniform(0.0, 0.12), g.uniform(0.2, 0.8), g.uniform(0.0, 2.0 * kPi)};
        return w;
    };
    auto eval = [](const std::array<Wave, 3>& w, double s) {
        double v = 0.0;
        for (const auto& x : w) v += x.amp * std::sin(2.0 * kPi * x.freq * s + x.phase);
        return v;
    };
    std::vector<std::array<std::array<Wave, 3>, 3>> joint_waves(body::kJointCount);
    for (auto& jw : joint_waves)
        for (auto& comp : jw) comp = draw();
    const double yaw = g.uniform(-2.0, 2.0);
    const double x0 = g.uniform(-0.3, 0.3), z0 = g.uniform(-0.3, 0.3);
    const double drift_phase = g.uniform(0.0, 2.0 * kPi);
    for (int t = 0; t < g.frames(); ++t) {
        const double s = g.time(t);
        body::FramePose p = g.base_pose(t);
        p.tau = Vec3(x0 + 0.2 * std::sin(2.0 * kPi * 0.2 * s + drift_phase),
                     kStandingHeight + 0.02 * std::sin(2.0 * kPi * 0.3 * s + drift_phase),
                     z0 + 0.2 * std::cos(2.0 * kPi * 0.15 * s + drift_phase));
        p.phi = Vec3(eval(joint_waves[0][0], s), yaw + eval(joint_waves[0][1], s), eval(joint_waves[0][2], s));
        for (int j = 1; j < body::kJointCount; ++j) {
            Vec3 aa(eval(joint_waves[j][0], s), eval(joint_waves[j][1], s), eval(joint_waves[j][2], s));
            if (j == body::left_shoulder) aa.z() -= kArmsDown;
            if (j == body::right_shoulder) aa.z() += kArmsDown;
            Generator::set_joint(p, j, aa);
        }
        g.emit(t, p);
    }
    return g.take();
}

constexpr char kDatasetMagic[8] = {'H', 'V', 'M', 'D', 'S', 'E', 'T', '1'};
constexpr std::size_t kBlockHeaderBytes = 4 + 4 + 4 + 8;

std::size_t block_bytes(int frames) { return kBlockHeaderBytes + static_cast<std::size_t>(frames) * kMotionChannels * 4; }

void append_matrix(std::vector<std::byte>& out, const RowMatrixXf& m) {
    append_f32s(out, std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
}

}  // namespace

MotionSequence generate_procedural_motion(std::uint64_t seed, int frames, MotionFamily family) {
    if (frames < kUnitFrames) throw std::invalid_argument("generate_procedural_motion: need at least 16 frames");
    Generator g(seed, frames, family);
    switch (family) {
        case MotionFamily::walk: return walk(g);
        case MotionFamily::wave: return wave(g);
        case MotionFamily::squat: return squat(g);
        case MotionFamily::smooth_noise: return smooth_noise(g);
    }
    throw std::invalid_argument("unknown motion family");
}

std::uint64_t record_checksum(const MotionSequence& m) {
    std::vector<std::byte> bytes;
    append_matrix(bytes, m.theta);
    append_matrix(bytes, m.beta);
    append_matrix(bytes, m.phi);
    append_matrix(bytes, m.tau);
    return fnv1a64(bytes);
}

void save_dataset(const MotionDataset& d, const std::filesystem::path& path) {
    nlohmann::json manifest;
    manifest["format"] = "hvm-motion-dataset";
    manifest["version"] = 1;
    manifest["meta"] = d.manifest;
    manifest["records"] = nlohmann::json::array();
    std::vector<std::byte> body;
    std::unordered_set<std::string> ids;
    for (const auto& r : d.records) {
        if (!ids.insert(r.id).second) throw std::invalid_argument("save_dataset: duplicate record id " + r.id);
        r.motion.validate();
        const std::size_t offset = body.size();
        append_u32(body, static_cast<std::uint32_t>(r.motion.frames()));
        append_f32(body, r.motion.fps);
        append_u32(body, static_cast<std::uint32_t>(r.family));
        append_u64(body, r.seed);
        append_matrix(body, r.motion.theta);
        append_matrix(body, r.motion.beta);
        append_matrix(body, r.motion.phi);
        append_matrix(body, r.motion.tau);
        manifest["records"].push_back({{"id", r.id},
                                       {"family", family_name(r.family)},
                                       {"seed", r.seed},
                                       {"frames", r.motion.frames()},
                                       {"fps", r.motion.fps},
                                       {"offset", offset},
                                       {"nbytes", body.size() - offset},
                                       {"checksum", hex64(record_checksum(r.motion))}});
    }
    const std::string text = manifest.dump();
    std::vector<std::byte> out;
    for (char c : kDatasetMagic) out.push_back(static_cast<std::byte>(c));
    append_u64(out, text.size());
    for (char c : text) out.push_back(static_cast<std::byte>(c));
    out.insert(out.end(), body.begin(), body.end());
    write_file_bytes(path, out);
}

MotionDataset load_dataset(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    const std::span<const std::byte> all(bytes);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kDatasetMagic, 8) != 0)
        throw FormatError(path.string() + ": not a motion dataset");
    const auto len = read_u64(all, 8);
    if (16 + len > bytes.size()) throw FormatError("dataset manifest truncated");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(bytes.data() + 16), len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset manifest is not valid JSON: ") + e.what());
    }
    const auto body = all.subspan(16 + len);

    MotionDataset d;
    std::unordered_set<std::string> ids;
    try {
        if (manifest.at("format") != "hvm-motion-dataset") throw FormatError("unexpected dataset format tag");
        d.manifest = manifest.at("meta");
        const auto& records = manifest.at("records");
        for (std::size_t i = 0; i < records.size(); ++i) {
            const auto& e = records[i];
            MotionRecord r;
            r.id = e.at("id").get<std::string>();
            if (!ids.insert(r.id).second) throw FormatError("duplicate record id " + r.id, i);
            const int frames = e.at("frames").get<int>();
            const auto offset = e.at("offset").get<std::size_t>();
            const auto nbytes = e.at("nbytes").get<std::size_t>();
            if (frames < 1 || nbytes != block_bytes(frames)) throw FormatError("record size mismatch", i);
            if (offset + nbytes > body.size()) throw FormatError("record truncated", i);
            const auto block = body.subspan(offset, nbytes);
            if (static_cast<int>(read_u32(block, 0)) != frames) throw FormatError("record header frame count", i);
            const float fps = read_f32(block, 4);
            const auto family = read_u32(block, 8);
            if (family > static_cast<std::uint32_t>(MotionFamily::smooth_noise))
                throw FormatError("record header family", i);
            r.family = static_cast<MotionFamily>(family);
            r.seed = read_u64(block, 12);
            if (r.seed != e.at("seed").get<std::uint64_t>()) throw FormatError("record seed mismatch", i);
            r.motion = MotionSequence::zeros(frames, fps);
            std::size_t at = kBlockHeaderBytes;
            for (RowMatrixXf* m : {&r.motion.theta, &r.motion.beta, &r.motion.phi, &r.motion.tau}) {
                for (Eigen::Index k = 0; k < m->size(); ++k, at += 4) m->data()[k] = read_f32(block, at);
            }
            if (hex64(record_checksum(r.motion)) != e.at("checksum").get<std::string>())
                throw FormatError("record checksum mismatch", i);
            try {
                r.motion.validate();
            } catch (const std::invalid_argument& err) {
                throw FormatError(err.what(), i);
            }
            d.records.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset manifest malformed: ") + e.what());
    }
    return d;
}

}  // namespace hvm
