#include "hvm/render.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "hvm/archive.hpp"

namespace hvm {

namespace {

using Color = std::array<float, 3>;

Color bone_color(int joint) {
    switch (joint) {
        case body::left_hip: case body::left_knee: case body::left_ankle: case body::left_foot:
            return {0.95f, 0.35f, 0.2f};
        case body::right_hip: case body::right_knee: case body::right_ankle: case body::right_foot:
            return {0.2f, 0.45f, 0.95f};
        case body::left_collar: case body::left_shoulder: case body::left_elbow: case body::left_wrist:
            return {0.95f, 0.75f, 0.25f};
        case body::right_collar: case body::right_shoulder: case body::right_elbow: case body::right_wrist:
            return {0.3f, 0.85f, 0.9f};
        case body::head:
            return {0.95f, 0.95f, 0.4f};
        default:
            return {0.35f, 0.85f, 0.4f};
    }
}

struct Surface {
    float depth = -std::numeric_limits<float>::infinity();
    Color color{};
};

class FrameRaster {
public:
    FrameRaster(const Camera& cam, const RenderConfig& cfg)
        : cam_(cam), cfg_(cfg), buffer_(static_cast<std::size_t>(cfg.height) * cfg.width) {}

    void capsule(const body::Vec3& a, const body::Vec3& b, double radius, const Color& color, double root_depth) {
        const double ax = u(a.x()), ay = v(a.y()), bx = u(b.x()), by = v(b.y());
        const double r = radius * cam_.pixels_per_meter;
        const int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - r)));
        const int x1 = std::min(cfg_.width - 1, static_cast<int>(std::ceil(std::max(ax, bx) + r)));
        const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - r)));
        const int y1 = std::min(cfg_.height - 1, static_cast<int>(std::ceil(std::max(ay, by) + r)));
        const double dx = bx - ax, dy = by - ay;
        const double len2 = dx * dx + dy * dy;
        for (int py = y0; py <= y1; ++py) {
            for (int px = x0; px <= x1; ++px) {
                const double cx = px + 0.5, cy = py + 0.5;
                const double s = len2 > 1e-12 ? std::clamp(((cx - ax) * dx + (cy - ay) * dy) / len2, 0.0, 1.0) : 0.0;
                const double ex = cx - (ax + s * dx), ey = cy - (ay + s * dy);
                const double d2 = ex * ex + ey * ey;
                if (d2 > r * r) continue;
                const double bulge = std::sqrt(r * r - d2);
                const double z = a.z() + s * (b.z() - a.z()) + bulge / cam_.pixels_per_meter;
                auto& cell = buffer_[static_cast<std::size_t>(py) * cfg_.width + px];
                if (z <= cell.depth) continue;
                const double depth_shade = std::clamp(0.6 + 0.8 * (z - root_depth), 0.35, 1.0);
                const double round_shade = 0.75 + 0.25 * bulge / r;
                const auto k = static_cast<float>(depth_shade * round_shade);
                cell.depth = static_cast<float>(z);
                cell.color = {color[0] * k, color[1] * k, color[2] * k};
            }
        }
    }

    void write(VideoClip& clip, int t) const {
        for (int y = 0; y < cfg_.height; ++y) {
            for (int x = 0; x < cfg_.width; ++x) {
                const auto& cell = buffer_[static_cast<std::size_t>(y) * cfg_.width + x];
                for (int c = 0; c < 3; ++c)
                    clip.at(t, y, x, c) = std::isfinite(cell.depth) ? std::clamp(cell.color[c], 0.0f, 1.0f) : cfg_.background;
            }
        }
    }

private:
    double u(double x) const { return (x - cam_.center_x) * cam_.pixels_per_meter + 0.5 * cfg_.width; }
    double v(double y) const { return 0.5 * cfg_.height - (y - cam_.center_y) * cam_.pixels_per_meter; }

    const Camera& cam_;
    const RenderConfig& cfg_;
    std::vector<Surface> buffer_;
};

}  // namespace

VideoClip VideoClip::blank(int frames, int height, int width, float value) {
    VideoClip c;
    c.frames = frames;
    c.height = height;
    c.width = width;
    c.pixels.assign(static_cast<std::size_t>(frames) * height * width * 3, value);
    return c;
}

Camera Camera::following_start(const MotionSequence& m, double pixels_per_meter) {
    Camera c;
    c.center_x = m.frames() > 0 ? m.tau(0, 0) : 0.0;
    c.pixels_per_meter = pixels_per_meter;
    return c;
}

VideoClip render_motion(const MotionSequence& m, const body::StubBody& body, const Camera& camera,
                        const RenderConfig& cfg) {
    m.validate();
    if (cfg.height <= 0 || cfg.width <= 0) throw std::invalid_argument("render_motion: empty resolution");
    VideoClip clip = VideoClip::blank(m.frames(), cfg.height, cfg.width, cfg.background);
    clip.fps = m.fps;
    const auto& parents = body.parents();
    int empty_frames = 0;
    for (int t = 0; t < m.frames(); ++t) {
        const auto posed = body::forward_kinematics(body, m.frame(t));
        const double root_depth = posed.joints(0, 2);
        FrameRaster raster(camera, cfg);
        for (int j = 1; j < body.joint_count(); ++j) {
            raster.capsule(posed.joints.row(parents[j]).transpose(), posed.joints.row(j).transpose(), cfg.limb_radius,
                           bone_color(j), root_depth);
        }
        const body::Vec3 head = posed.joints.row(body::head).transpose();
        raster.capsule(head, head, cfg.head_radius, bone_color(body::head), root_depth);
        raster.write(clip, t);
        if (foreground_pixels(clip, t, cfg.background) == 0) ++empty_frames;
    }
    clip.mostly_out_of_frame = 2 * empty_frames > m.frames();
    return clip;
}

int foreground_pixels(const VideoClip& clip, int frame, float background) {
    int count = 0;
    for (int y = 0; y < clip.height; ++y)
        for (int x = 0; x < clip.width; ++x)
            if (clip.at(frame, y, x, 0) != background || clip.at(frame, y, x, 1) != background ||
                clip.at(frame, y, x, 2) != background)
                ++count;
    return count;
}

void save_clip(const VideoClip& clip, const std::filesystem::path& path, const std::string& config_hash) {
    Archive a;
    a.meta = {{"kind", "video_clip"},
              {"fps", clip.fps},
              {"mostly_out_of_frame", clip.mostly_out_of_frame},
              {"config_hash", config_hash}};
    a.add("frames", {clip.frames, clip.height, clip.width, 3}, clip.pixels);
    a.save(path);
}

VideoClip load_clip(const std::filesystem::path& path) {
    const Archive a = Archive::load(path);
    if (a.meta.value("kind", "") != "video_clip") throw FormatError("load_clip: not a video clip archive");
    const auto& arr = a.at("frames");
    if (arr.shape.size() != 4 || arr.shape[3] != 3 || arr.dtype != DType::f32)
        throw FormatError("load_clip: frames must be f32 T x H x W x 3");
    VideoClip c;
    c.frames = static_cast<int>(arr.shape[0]);
    c.height = static_cast<int>(arr.shape[1]);
    c.width = static_cast<int>(arr.shape[2]);
    c.fps = a.meta.value("fps", kDefaultFps);
    c.mostly_out_of_frame = a.meta.value("mostly_out_of_frame", false);
    c.pixels = arr.f32;
    return c;
}

}  // namespace hvm
