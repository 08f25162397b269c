#pragma once

// Motion parameter sequences, the first-frame-absolute velocity codec, the
// 79-channel cascade, procedural motion families and dataset persistence.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "hvm/body_model.hpp"

namespace hvm {

using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kThetaChannels = 63;
inline constexpr int kBetaChannels = 10;
inline constexpr int kPhiChannels = 3;
inline constexpr int kTauChannels = 3;
inline constexpr int kMotionChannels = kThetaChannels + kBetaChannels + kPhiChannels + kTauChannels;  // 79
inline constexpr int kUnitFrames = 16;
inline constexpr float kDefaultFps = 30.0f;

struct MotionSequence {
    RowMatrixXf theta;  // T x 63, radians
    RowMatrixXf beta;   // T x 10
    RowMatrixXf phi;    // T x 3, radians
    RowMatrixXf tau;    // T x 3, meters
    float fps = kDefaultFps;

    static MotionSequence zeros(int frames, float fps = kDefaultFps);

    int frames() const { return static_cast<int>(theta.rows()); }
    body::FramePose frame(int t) const;
    void set_frame(int t, const body::FramePose& pose);

    // Throws std::invalid_argument on shape mismatch, T < 1 or non-finite values.
    void validate() const;
    bool operator==(const MotionSequence& other) const;
};

// Frame 0 absolute, frames k > 0 hold per-channel first differences.
struct VelocityEncodedMotion {
    MotionSequence channels;
};

VelocityEncodedMotion velocity_encode(const MotionSequence& m);
MotionSequence velocity_decode(const VelocityEncodedMotion& v);

// theta | beta | phi | tau along the channel axis; T x 79.
RowMatrixXf channel_concat(const MotionSequence& m);
// Inverse of channel_concat; throws FormatError when the width is not 79.
MotionSequence channel_split(const RowMatrixXf& x, float fps = kDefaultFps);

// Repeats the last frame until T is a multiple of `unit`.
MotionSequence pad_to_unit(const MotionSequence& m, int unit = kUnitFrames);
MotionSequence slice_frames(const MotionSequence& m, int first, int count);

enum class MotionFamily { walk, wave, squat, smooth_noise };

MotionFamily parse_family(std::string_view name);
std::string_view family_name(MotionFamily family);
inline constexpr std::array<MotionFamily, 4> kAllFamilies = {MotionFamily::walk, MotionFamily::wave,
                                                             MotionFamily::squat, MotionFamily::smooth_noise};

inline constexpr double kMaxJointSpeed = 4.0;  // rad/s
inline constexpr double kMaxRootSpeed = 2.0;   // m/s
inline constexpr double kShapeNoise = 0.01;

// Deterministic in (seed, frames, family); frames >= 16. Joint angular speed
// stays below 4 rad/s, root speed below 2 m/s, shape noise below 0.01.
MotionSequence generate_procedural_motion(std::uint64_t seed, int frames, MotionFamily family);

struct MotionRecord {
    std::string id;
    MotionSequence motion;
    MotionFamily family = MotionFamily::walk;
    std::uint64_t seed = 0;
};

struct MotionDataset {
    std::vector<MotionRecord> records;
    nlohmann::json manifest = nlohmann::json::object();
};

// Per-record checksum over the four float32 arrays as stored on disk.
std::uint64_t record_checksum(const MotionSequence& m);

// Single file: magic, u64 manifest length, JSON manifest, then one block per
// record (u32 T, f32 fps, u32 family, u64 seed, theta, beta, phi, tau as
// little-endian float32). Load errors are FormatError carrying the record index.
void save_dataset(const MotionDataset& d, const std::filesystem::path& path);
MotionDataset load_dataset(const std::filesystem::path& path);

}  // namespace hvm
