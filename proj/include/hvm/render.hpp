#pragma once

// Orthographic capsule rasterizer producing the synthetic paired videos.

#include <filesystem>
#include <vector>

#include "hvm/body_model.hpp"
#include "hvm/motion.hpp"

namespace hvm {

// Frames stored as T x H x W x 3, values in [0, 1].
struct VideoClip {
    int frames = 0;
    int height = 0;
    int width = 0;
    float fps = kDefaultFps;
    std::vector<float> pixels;
    bool mostly_out_of_frame = false;

    float& at(int t, int y, int x, int c) { return pixels[index(t, y, x, c)]; }
    float at(int t, int y, int x, int c) const { return pixels[index(t, y, x, c)]; }
    std::size_t index(int t, int y, int x, int c) const {
        return ((static_cast<std::size_t>(t) * height + y) * width + x) * 3 + c;
    }
    static VideoClip blank(int frames, int height, int width, float value = 0.0f);
    bool operator==(const VideoClip& other) const = default;
};

// Camera looks down -z; image x follows world x, image y follows world -y.
struct Camera {
    double center_x = 0.0;
    double center_y = 0.9;
    double pixels_per_meter = 30.0;

    // Centered horizontally on the first-frame root, at a fixed height.
    static Camera following_start(const MotionSequence& m, double pixels_per_meter = 30.0);
};

struct RenderConfig {
    int height = 64;
    int width = 64;
    double limb_radius = 0.045;
    double head_radius = 0.1;
    float background = 0.08f;
};

// Deterministic; per-pixel nearest surface wins. Bones are colored by side
// (left warm, right cool, spine green, head yellow) and shaded by depth.
VideoClip render_motion(const MotionSequence& m, const body::StubBody& body, const Camera& camera,
                        const RenderConfig& cfg = {});

// Pixels that differ from the background color.
int foreground_pixels(const VideoClip& clip, int frame, float background = RenderConfig{}.background);

// Archive with kind "video_clip" and one f32 array "frames" of shape T x H x W x 3.
void save_clip(const VideoClip& clip, const std::filesystem::path& path, const std::string& config_hash = "");
VideoClip load_clip(const std::filesystem::path& path);

}  // namespace hvm
