#include "keytailor/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "keytailor/errors.hpp"
#include "keytailor/ktsr.hpp"
#include "keytailor/rng.hpp"

namespace kt {
namespace {

constexpr double kPi = 3.14159265358979323846;

struct P2 {
    double x, y;
};

double seg_dist(double px, double py, P2 a, P2 b) {
    double vx = b.x - a.x, vy = b.y - a.y;
    double wx = px - a.x, wy = py - a.y;
    double vv = vx * vx + vy * vy;
    double t = vv > 0 ? std::clamp((wx * vx + wy * vy) / vv, 0.0, 1.0) : 0.0;
    double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

bool inside_quad(double px, double py, const P2 q[4]) {
    int sign = 0;
    for (int i = 0; i < 4; ++i) {
        const P2& a = q[i];
        const P2& b = q[(i + 1) % 4];
        double cr = (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
        if (std::abs(cr) < 1e-12) continue;
        int s = cr > 0 ? 1 : -1;
        if (sign == 0)
            sign = s;
        else if (s != sign)
            return false;
    }
    return true;
}

// Procedural textures; all values in [0,1].
void background_color(int id, size_t x, size_t y, double rgb[3]) {
    bool check = ((x / 8 + y / 8 + static_cast<size_t>(id)) % 2) == 0;
    double base = check ? 0.85 : 0.25;
    double wave = 0.5 + 0.5 * std::sin(2.0 * kPi * static_cast<double>(x * (3 + id % 3)) / 64.0) *
                            std::sin(2.0 * kPi * static_cast<double>(y * (2 + id % 2)) / 64.0);
    double v = 0.7 * base + 0.3 * wave;
    rgb[0] = v;
    rgb[1] = 0.9 * v + 0.05;
    rgb[2] = 0.8 * v + 0.1;
}

void garment_color(int id, bool back_side, double x, double y, double rgb[3]) {
    double c0[3] = {0.80, 0.15, 0.20};
    double c1[3] = {0.95, 0.80, 0.25};
    if (id % 3 == 1) {
        c0[0] = 0.15; c0[1] = 0.30; c0[2] = 0.85;
        c1[0] = 0.70; c1[1] = 0.90; c1[2] = 0.95;
    } else if (id % 3 == 2) {
        c0[0] = 0.10; c0[1] = 0.60; c0[2] = 0.25;
        c1[0] = 0.90; c1[1] = 0.45; c1[2] = 0.75;
    }
    bool first;
    if (back_side)
        first = (static_cast<long>(std::floor(x / 5.0)) + static_cast<long>(std::floor(y / 5.0))) % 2 == 0;
    else
        first = static_cast<long>(std::floor(y / 4.0)) % 2 == 0;
    for (int c = 0; c < 3; ++c) rgb[c] = first ? c0[c] : c1[c];
}

void draw_capsule(Tensor& mask, P2 a, P2 b, double radius) {
    size_t H = mask.shape[0], W = mask.shape[1];
    for (size_t y = 0; y < H; ++y)
        for (size_t x = 0; x < W; ++x) {
            double px = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
            double py = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
            if (seg_dist(px, py, a, b) <= radius) mask.at2(y, x) = 1.0;
        }
}

P2 jp(const SkeletonPose& p, int j) { return {p.joints[j][0], p.joints[j][1]}; }

}  // namespace

SceneSpec default_scene_spec(uint64_t seed, size_t frames, size_t size) {
    SceneSpec spec;
    spec.frames = frames;
    spec.height = size;
    spec.width = size;
    spec.seed = seed;
    SeededRng rng(seed * 0x9e37ull + 17);
    const char* views[4] = {"front", "back", "left", "right"};
    const char* actions[3] = {"raise-hand", "turn", "walk"};
    size_t segments = 2 + rng.below(3);  // 2..4 view segments
    spec.view_schedule.resize(frames);
    size_t start = 0;
    for (size_t s = 0; s < segments; ++s) {
        size_t end = (s + 1 == segments) ? frames : start + 1 + rng.below(frames / segments + 1);
        end = std::min(end, frames);
        const char* v = views[rng.below(4)];
        for (size_t f = start; f < end; ++f) spec.view_schedule[f] = v;
        start = end;
        if (start >= frames) break;
    }
    for (size_t f = 0; f < frames; ++f)
        if (spec.view_schedule[f].empty()) spec.view_schedule[f] = views[0];
    size_t n_actions = rng.below(3);  // 0..2
    for (size_t i = 0; i < n_actions; ++i) {
        ActionEvent ev;
        ev.begin = rng.below(frames - 1);
        ev.end = std::min(frames, ev.begin + 2 + rng.below(frames / 2));
        ev.action = actions[rng.below(3)];
        spec.actions.push_back(ev);
    }
    if (rng.below(2) == 0) {
        OcclusionEvent oc;
        oc.begin = rng.below(frames - 1);
        oc.end = std::min(frames, oc.begin + 1 + rng.below(frames / 2));
        oc.fraction = 0.25 + 0.5 * rng.uniform();
        spec.occlusions.push_back(oc);
    }
    spec.garment_texture = static_cast<int>(rng.below(3));
    spec.background_texture = static_cast<int>(rng.below(4));
    return spec;
}

SyntheticSample generate_scene(const SceneSpec& spec) {
    if (spec.height < 32 || spec.width < 32)
        throw config_error("generate_scene: resolution below 32x32");
    if (spec.frames < 2) throw config_error("generate_scene: need at least 2 frames");
    if (spec.view_schedule.size() != spec.frames)
        throw config_error("generate_scene: view schedule must cover every frame");

    const size_t T = spec.frames, H = spec.height, W = spec.width;
    SyntheticSample s;
    s.video = Tensor(Shape{3, T, H, W});
    s.agnostic = Tensor(Shape{3, T, H, W});
    s.garment_masks = Tensor(Shape{T, H, W});
    s.human_masks = Tensor(Shape{T, H, W});
    s.occluded_masks = Tensor(Shape{T, H, W});
    s.pose_joints = Tensor(Shape{T, kNumJoints, 2});

    SeededRng rng(spec.seed);
    double sway_phase = rng.uniform(0.0, 2.0 * kPi);
    double wrinkle_phase = rng.uniform(0.0, 2.0 * kPi);

    for (size_t f = 0; f < T; ++f) {
        const std::string& view = spec.view_schedule[f];
        SkeletonPose pose = anchor_pose(view);
        std::vector<std::string> active_actions;
        for (const ActionEvent& ev : spec.actions) {
            if (f < ev.begin || f >= ev.end) continue;
            double prog = (static_cast<double>(f - ev.begin) + 0.5) /
                          static_cast<double>(ev.end - ev.begin);
            double w = 0.8 * std::sin(kPi * prog);
            pose = pose_lerp(pose, anchor_pose(ev.action), w);
            active_actions.push_back(ev.action);
        }
        double sway = 0.01 * std::sin(2.0 * kPi * static_cast<double>(f) / static_cast<double>(T) +
                                      sway_phase);
        for (auto& j : pose.joints) j[0] += sway;
        for (size_t j = 0; j < kNumJoints; ++j) {
            s.pose_joints.at3(f, j, 0) = pose.joints[j][0];
            s.pose_joints.at3(f, j, 1) = pose.joints[j][1];
        }

        // Limb + head mask.
        Tensor limb(Shape{H, W});
        for (const auto& bone : kBones)
            draw_capsule(limb, jp(pose, bone[0]), jp(pose, bone[1]), 0.018);
        P2 head = jp(pose, 0);
        for (size_t y = 0; y < H; ++y)
            for (size_t x = 0; x < W; ++x) {
                double px = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
                double py = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
                double dx = px - head.x, dy = py - head.y;
                if (dx * dx + dy * dy <= 0.06 * 0.06) limb.at2(y, x) = 1.0;
            }

        // Garment quad over the torso, expanded from shoulders and hips.
        P2 corners[4] = {jp(pose, 5), jp(pose, 6), jp(pose, 12), jp(pose, 11)};
        P2 c{0, 0};
        for (const P2& p : corners) {
            c.x += p.x / 4.0;
            c.y += p.y / 4.0;
        }
        P2 quad[4];
        for (int i = 0; i < 4; ++i)
            quad[i] = {c.x + 1.35 * (corners[i].x - c.x), c.y + 1.35 * (corners[i].y - c.y)};

        bool back_side = view == "back";
        bool wrinkle = !active_actions.empty();
        double wr_t = wrinkle_phase + 2.0 * kPi * static_cast<double>(f) / static_cast<double>(T);

        long gx0 = static_cast<long>(W), gx1 = -1, gy0 = static_cast<long>(H), gy1 = -1;
        for (size_t y = 0; y < H; ++y)
            for (size_t x = 0; x < W; ++x) {
                double px = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
                double py = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
                double rgb[3];
                background_color(spec.background_texture, x, y, rgb);
                bool human = limb.at2(y, x) > 0.5;
                bool garment = inside_quad(px, py, quad);
                if (human) {
                    rgb[0] = rgb[1] = rgb[2] = 0.70;
                }
                if (garment) {
                    double tx = static_cast<double>(x);
                    if (wrinkle) tx += 2.0 * std::sin(2.0 * kPi * static_cast<double>(y) / 8.0 + wr_t);
                    garment_color(spec.garment_texture, back_side, tx, static_cast<double>(y), rgb);
                    s.garment_masks.at3(f, y, x) = 1.0;
                    gx0 = std::min(gx0, static_cast<long>(x));
                    gx1 = std::max(gx1, static_cast<long>(x));
                    gy0 = std::min(gy0, static_cast<long>(y));
                    gy1 = std::max(gy1, static_cast<long>(y));
                }
                if (human || garment) s.human_masks.at3(f, y, x) = 1.0;
                for (size_t ch = 0; ch < 3; ++ch) s.video.at4(ch, f, y, x) = rgb[ch];
            }

        // Occlusion: a flat panel overdrawing the leading columns of the
        // garment's bounding box.
        for (const OcclusionEvent& oc : spec.occlusions) {
            if (f < oc.begin || f >= oc.end || gx1 < gx0) continue;
            long cover = gx0 + static_cast<long>(std::round(oc.fraction * static_cast<double>(gx1 - gx0 + 1))) - 1;
            for (long y = gy0; y <= gy1; ++y)
                for (long x = gx0; x <= cover && x <= gx1; ++x) {
                    if (s.garment_masks.at3(f, static_cast<size_t>(y), static_cast<size_t>(x)) < 0.5)
                        continue;
                    s.occluded_masks.at3(f, static_cast<size_t>(y), static_cast<size_t>(x)) = 1.0;
                    for (size_t ch = 0; ch < 3; ++ch)
                        s.video.at4(ch, f, static_cast<size_t>(y), static_cast<size_t>(x)) = 0.30;
                }
        }

        Frame fr;
        fr.index = static_cast<int>(f);
        fr.timestamp = static_cast<double>(f) / spec.fps;
        fr.pose = pose;
        fr.labels.insert(view);
        for (const std::string& a : active_actions) fr.labels.insert(a);
        s.frames.push_back(std::move(fr));
    }

    s.agnostic = make_agnostic(s.video, s.garment_masks);
    s.pose_maps = render_pose_maps(s.pose_joints, H, W);

    // Garment reference: the front texture rendered flat.
    s.garment_ref = Tensor(Shape{3, H, W});
    for (size_t y = 0; y < H; ++y)
        for (size_t x = 0; x < W; ++x) {
            double rgb[3];
            garment_color(spec.garment_texture, false, static_cast<double>(x),
                          static_cast<double>(y), rgb);
            for (size_t ch = 0; ch < 3; ++ch) s.garment_ref.at3(ch, y, x) = rgb[ch];
        }

    // Fill the per-frame tensor views.
    for (size_t f = 0; f < T; ++f) {
        Frame& fr = s.frames[f];
        fr.pixels = Tensor(Shape{3, H, W});
        fr.garment_mask = Tensor(Shape{H, W});
        fr.human_mask = Tensor(Shape{H, W});
        fr.occluded_garment_mask = Tensor(Shape{H, W});
        for (size_t y = 0; y < H; ++y)
            for (size_t x = 0; x < W; ++x) {
                for (size_t ch = 0; ch < 3; ++ch) fr.pixels.at3(ch, y, x) = s.video.at4(ch, f, y, x);
                fr.garment_mask.at2(y, x) = s.garment_masks.at3(f, y, x);
                fr.human_mask.at2(y, x) = s.human_masks.at3(f, y, x);
                fr.occluded_garment_mask.at2(y, x) = s.occluded_masks.at3(f, y, x);
            }
    }
    return s;
}

Tensor make_agnostic(const Tensor& video, const Tensor& garment_masks) {
    if (video.ndim() != 4 || garment_masks.ndim() != 3 || video.shape[1] != garment_masks.shape[0] ||
        video.shape[2] != garment_masks.shape[1] || video.shape[3] != garment_masks.shape[2])
        throw shape_error("make_agnostic: video " + shape_str(video.shape) + " vs masks " +
                          shape_str(garment_masks.shape));
    Tensor out = video;
    size_t T = video.shape[1], H = video.shape[2], W = video.shape[3];
    for (size_t f = 0; f < T; ++f)
        for (size_t y = 0; y < H; ++y)
            for (size_t x = 0; x < W; ++x)
                if (garment_masks.at3(f, y, x) > 0.5)
                    for (size_t ch = 0; ch < 3; ++ch) out.at4(ch, f, y, x) = 0.5;
    return out;
}

Tensor render_pose_maps(const Tensor& pose_joints, size_t height, size_t width) {
    if (pose_joints.ndim() != 3 || pose_joints.shape[1] != kNumJoints || pose_joints.shape[2] != 2)
        throw shape_error("render_pose_maps: expected [T,17,2], got " + shape_str(pose_joints.shape));
    size_t T = pose_joints.shape[0];
    Tensor maps(Shape{3, T, height, width});
    for (size_t f = 0; f < T; ++f) {
        Tensor m(Shape{height, width});
        for (const auto& bone : kBones) {
            P2 a{pose_joints.at3(f, bone[0], 0), pose_joints.at3(f, bone[0], 1)};
            P2 b{pose_joints.at3(f, bone[1], 0), pose_joints.at3(f, bone[1], 1)};
            draw_capsule(m, a, b, 0.008);
        }
        for (size_t y = 0; y < height; ++y)
            for (size_t x = 0; x < width; ++x)
                for (size_t ch = 0; ch < 3; ++ch) maps.at4(ch, f, y, x) = m.at2(y, x);
    }
    return maps;
}

// ---- persistence ----------------------------------------------------------

namespace {

const char* kRoles[7] = {"video", "agnostic", "masks", "occluded_masks",
                         "pose",  "garment_ref", "labels"};

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

void write_sample(const std::string& dir, const SyntheticSample& s) {
    std::filesystem::create_directories(dir);
    auto path = [&](const char* n) { return dir + "/" + n; };
    ktsr_write_file(path("video.ktsr"), s.video);
    ktsr_write_file(path("agnostic.ktsr"), s.agnostic);
    size_t T = s.garment_masks.shape[0], H = s.garment_masks.shape[1], W = s.garment_masks.shape[2];
    Tensor masks(Shape{2, T, H, W});
    std::copy(s.garment_masks.data.begin(), s.garment_masks.data.end(), masks.data.begin());
    std::copy(s.human_masks.data.begin(), s.human_masks.data.end(),
              masks.data.begin() + s.garment_masks.size());
    ktsr_write_file(path("masks.ktsr"), masks);
    ktsr_write_file(path("occluded_masks.ktsr"), s.occluded_masks);
    ktsr_write_file(path("pose.ktsr"), s.pose_joints);
    ktsr_write_file(path("garment_ref.ktsr"), s.garment_ref);

    std::ofstream labels(path("labels.tsv"));
    if (!labels) throw io_error("write_sample: cannot open " + path("labels.tsv"));
    for (const Frame& f : s.frames) {
        std::string view, actions;
        for (const std::string& l : f.labels) {
            bool is_view = l == "front" || l == "back" || l == "left" || l == "right";
            if (is_view)
                view = l;
            else
                actions += (actions.empty() ? "" : ",") + l;
        }
        labels << f.index << '\t' << fmt_double(f.timestamp) << '\t' << view << '\t' << actions
               << '\n';
    }
    labels.close();

    std::ofstream manifest(path("manifest.tsv"));
    if (!manifest) throw io_error("write_sample: cannot open " + path("manifest.tsv"));
    const char* files[7] = {"video.ktsr", "agnostic.ktsr", "masks.ktsr", "occluded_masks.ktsr",
                            "pose.ktsr", "garment_ref.ktsr", "labels.tsv"};
    for (int i = 0; i < 7; ++i) manifest << kRoles[i] << '\t' << files[i] << '\n';
    if (!manifest) throw io_error("write_sample: manifest write failed");
}

SyntheticSample read_sample(const std::string& dir) {
    std::string mpath = dir + "/manifest.tsv";
    std::ifstream manifest(mpath);
    if (!manifest) throw io_error("read_sample: cannot open " + mpath);
    std::string files[7];
    std::string line;
    for (int i = 0; i < 7; ++i) {
        if (!std::getline(manifest, line))
            throw format_error("read_sample: manifest truncated at line " + std::to_string(i + 1));
        size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw format_error("read_sample: manifest line missing tab: " + line);
        std::string role = line.substr(0, tab);
        if (role != kRoles[i])
            throw format_error("read_sample: manifest role order violated, expected '" +
                               std::string(kRoles[i]) + "', got '" + role + "'");
        files[i] = line.substr(tab + 1);
    }

    SyntheticSample s;
    s.video = ktsr_read_file(dir + "/" + files[0]);
    s.agnostic = ktsr_read_file(dir + "/" + files[1]);
    Tensor masks = ktsr_read_file(dir + "/" + files[2]);
    if (masks.ndim() != 4 || masks.shape[0] != 2)
        throw format_error("read_sample: masks tensor must be [2,T,H,W], got " +
                           shape_str(masks.shape));
    size_t T = masks.shape[1], H = masks.shape[2], W = masks.shape[3];
    s.garment_masks = Tensor(Shape{T, H, W},
                             std::vector<double>(masks.data.begin(), masks.data.begin() + T * H * W));
    s.human_masks = Tensor(Shape{T, H, W},
                           std::vector<double>(masks.data.begin() + T * H * W, masks.data.end()));
    s.occluded_masks = ktsr_read_file(dir + "/" + files[3]);
    s.pose_joints = ktsr_read_file(dir + "/" + files[4]);
    s.garment_ref = ktsr_read_file(dir + "/" + files[5]);
    s.pose_maps = render_pose_maps(s.pose_joints, H, W);

    std::ifstream labels(dir + "/" + files[6]);
    if (!labels) throw io_error("read_sample: cannot open labels file");
    while (std::getline(labels, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string idx, ts, view, actions;
        std::getline(ls, idx, '\t');
        std::getline(ls, ts, '\t');
        std::getline(ls, view, '\t');
        std::getline(ls, actions, '\t');
        Frame f;
        try {
            f.index = std::stoi(idx);
            f.timestamp = std::stod(ts);
        } catch (const std::exception&) {
            throw format_error("read_sample: bad labels line: " + line);
        }
        if (!view.empty()) f.labels.insert(view);
        std::istringstream as(actions);
        std::string a;
        while (std::getline(as, a, ','))
            if (!a.empty()) f.labels.insert(a);
        s.frames.push_back(std::move(f));
    }
    if (s.frames.size() != T)
        throw format_error("read_sample: labels cover " + std::to_string(s.frames.size()) +
                           " frames, tensors have " + std::to_string(T));

    for (size_t f = 0; f < T; ++f) {
        Frame& fr = s.frames[f];
        fr.pixels = Tensor(Shape{3, H, W});
        fr.garment_mask = Tensor(Shape{H, W});
        fr.human_mask = Tensor(Shape{H, W});
        fr.occluded_garment_mask = Tensor(Shape{H, W});
        for (size_t y = 0; y < H; ++y)
            for (size_t x = 0; x < W; ++x) {
                for (size_t ch = 0; ch < 3; ++ch) fr.pixels.at3(ch, y, x) = s.video.at4(ch, f, y, x);
                fr.garment_mask.at2(y, x) = s.garment_masks.at3(f, y, x);
                fr.human_mask.at2(y, x) = s.human_masks.at3(f, y, x);
                fr.occluded_garment_mask.at2(y, x) = s.occluded_masks.at3(f, y, x);
            }
        for (size_t j = 0; j < kNumJoints; ++j) {
            fr.pose.joints[j][0] = s.pose_joints.at3(f, j, 0);
            fr.pose.joints[j][1] = s.pose_joints.at3(f, j, 1);
        }
    }
    return s;
}

}  // namespace kt
