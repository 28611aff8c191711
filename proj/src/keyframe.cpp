#include "keytailor/keyframe.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

#include "keytailor/errors.hpp"

namespace kt {

std::vector<std::string> InstructionTargets::all() const {
    std::vector<std::string> out = views;
    out.insert(out.end(), actions.begin(), actions.end());
    return out;
}

std::vector<int> KeyframeSet::indices() const {
    std::vector<int> out;
    out.reserve(selected.size());
    for (const FrameScore& s : selected) out.push_back(s.index);
    return out;
}

// ---- instruction parsing --------------------------------------------------

InstructionTargets parse_instruction(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : text) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!cur.empty()) {
            tokens.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(cur);

    auto has = [&](const char* w) {
        return std::find(tokens.begin(), tokens.end(), w) != tokens.end();
    };
    InstructionTargets t;
    for (const char* v : {"front", "back", "left", "right"})
        if (has(v)) t.views.push_back(v);
    if (has("raise") && has("hand")) t.actions.push_back("raise-hand");
    for (const char* a : {"turn", "walk"})
        if (has(a)) t.actions.push_back(a);
    if (t.count() == 0)
        throw config_error("parse_instruction: no recognized view or action in \"" + text + "\"");
    return t;
}

// ---- score functions ------------------------------------------------------

double motion_difference_score(const Frame& f, const std::vector<SkeletonPose>& anchors) {
    if (anchors.empty()) throw usage_error("motion_difference_score: no anchor poses");
    auto fd = f.pose.bone_directions();
    double best = 1.0;
    bool any = false;
    for (const SkeletonPose& a : anchors) {
        auto ad = a.bone_directions();
        double dot = 0.0, na = 0.0, nf = 0.0;
        size_t used = 0;
        for (size_t b = 0; b < kNumBones; ++b) {
            if (fd[b].degenerate || ad[b].degenerate) continue;
            dot += fd[b].x * ad[b].x + fd[b].y * ad[b].y;
            nf += fd[b].x * fd[b].x + fd[b].y * fd[b].y;
            na += ad[b].x * ad[b].x + ad[b].y * ad[b].y;
            ++used;
        }
        double s = 0.0;
        if (used > 0) {
            double cosv = dot / (std::sqrt(nf) * std::sqrt(na));
            s = 0.5 * (1.0 + cosv);
            any = true;
        }
        best = std::min(best, s);
    }
    return any ? best : 0.0;
}

double garment_area_ratio(const Frame& f) {
    return f.garment_mask.sum() / static_cast<double>(f.garment_mask.size());
}

double occlusion_ratio(const Frame& f) {
    double garment = f.garment_mask.sum();
    if (garment <= 0.0) return 1.0;
    return f.occluded_garment_mask.sum() / garment;
}

double instruction_score(const Frame& f, const InstructionTargets& targets) {
    if (targets.count() == 0 || f.labels.empty()) return 0.0;
    size_t hit = 0;
    for (const std::string& t : targets.all())
        if (f.labels.count(t)) ++hit;
    return static_cast<double>(hit) / static_cast<double>(targets.count());
}

FrameScore frame_score(const Frame& f, const std::vector<SkeletonPose>& anchors,
                       const InstructionTargets& targets, const SamplerConfig& cfg) {
    FrameScore s;
    s.index = f.index;
    s.timestamp = f.timestamp;
    s.s_ins = instruction_score(f, targets);
    s.s_m = motion_difference_score(f, anchors);
    s.s_r = garment_area_ratio(f);
    s.occlusion_ratio = occlusion_ratio(f);
    if (cfg.mode == ScoringMode::eq1)
        s.initial_score = 1.0 - s.s_m + cfg.lambda * s.s_r;
    else
        s.initial_score = cfg.w1 * s.s_ins + cfg.w2 * (1.0 - s.s_m) + cfg.w3 * s.s_r + cfg.w4 * 1.0;
    s.temporal_score = 1.0;
    s.final_score = s.initial_score;
    return s;
}

// ---- selection ------------------------------------------------------------

KeyframeSet select_keyframes(const std::vector<Frame>& frames, const InstructionTargets& targets,
                             const SamplerConfig& cfg) {
    if (frames.empty()) throw usage_error("select_keyframes: no frames");
    std::vector<SkeletonPose> anchors;
    for (const std::string& t : targets.all()) anchors.push_back(anchor_pose(t));

    KeyframeSet out;
    double tmin = frames.front().timestamp, tmax = frames.front().timestamp;
    for (const Frame& f : frames) {
        tmin = std::min(tmin, f.timestamp);
        tmax = std::max(tmax, f.timestamp);
    }
    out.t_thres = cfg.t_thres >= 0.0 ? cfg.t_thres : (tmax - tmin) / 5.0;

    std::vector<FrameScore> scored;
    for (const Frame& f : frames) {
        if (occlusion_ratio(f) > cfg.occlu_thres) continue;
        scored.push_back(frame_score(f, anchors, targets, cfg));
    }
    if (scored.empty()) {
        out.all_filtered = true;
        return out;
    }
    std::sort(scored.begin(), scored.end(), [](const FrameScore& a, const FrameScore& b) {
        if (a.initial_score != b.initial_score) return a.initial_score > b.initial_score;
        return a.index < b.index;
    });

    for (FrameScore cand : scored) {
        if (out.selected.size() >= cfg.k_max) break;
        if (out.selected.empty()) {
            cand.temporal_score = 1.0;
            cand.final_score = cand.initial_score;
            out.selected.push_back(cand);
            continue;
        }
        double min_gap = std::numeric_limits<double>::infinity();
        for (const FrameScore& sel : out.selected)
            min_gap = std::min(min_gap, std::abs(cand.timestamp - sel.timestamp));
        cand.temporal_score = out.t_thres > 0.0 ? min_gap / out.t_thres : 1.0;
        cand.final_score = cand.initial_score * cand.temporal_score;
        double min_diff = std::numeric_limits<double>::infinity();
        for (const FrameScore& sel : out.selected)
            min_diff = std::min(min_diff, std::abs(cand.final_score - sel.initial_score));
        if (min_diff >= cfg.score_diff_min && min_gap >= out.t_thres)
            out.selected.push_back(cand);
    }
    return out;
}

// ---- background clarity ---------------------------------------------------

Tensor luma255(const Tensor& rgb) {
    if (rgb.ndim() != 3 || rgb.shape[0] != 3)
        throw shape_error("luma: expected [3,H,W], got " + shape_str(rgb.shape));
    size_t H = rgb.shape[1], W = rgb.shape[2];
    Tensor g(Shape{H, W});
    for (size_t i = 0; i < H * W; ++i)
        g.data[i] = 255.0 * (0.299 * rgb.data[i] + 0.587 * rgb.data[H * W + i] +
                             0.114 * rgb.data[2 * H * W + i]);
    return g;
}

Tensor sobel_edge_map(const Tensor& gray) {
    if (gray.ndim() != 2 || gray.shape[0] < 3 || gray.shape[1] < 3)
        throw shape_error("sobel: need a 2-D image of at least 3x3, got " + shape_str(gray.shape));
    size_t H = gray.shape[0], W = gray.shape[1];
    auto at = [&](long y, long x) {
        y = std::clamp<long>(y, 0, static_cast<long>(H) - 1);
        x = std::clamp<long>(x, 0, static_cast<long>(W) - 1);
        return gray.data[static_cast<size_t>(y) * W + static_cast<size_t>(x)];
    };
    Tensor e(Shape{H, W});
    for (long y = 0; y < static_cast<long>(H); ++y)
        for (long x = 0; x < static_cast<long>(W); ++x) {
            double gx = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2.0 * at(y, x - 1) +
                        2.0 * at(y, x + 1) - at(y + 1, x - 1) + at(y + 1, x + 1);
            double gy = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1) +
                        at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1);
            e.data[static_cast<size_t>(y) * W + static_cast<size_t>(x)] =
                std::sqrt(gx * gx + gy * gy);
        }
    return e;
}

double clarity(const Frame& f, double threshold) {
    size_t H = f.human_mask.shape[0], W = f.human_mask.shape[1];
    // Background image: pixels with the human region blanked.
    Tensor gray = luma255(f.pixels);
    size_t bg_count = 0;
    for (size_t i = 0; i < H * W; ++i) {
        if (f.human_mask.data[i] > 0.5)
            gray.data[i] = 0.0;
        else
            ++bg_count;
    }
    if (bg_count == 0) return 0.0;
    Tensor e = sobel_edge_map(gray);
    size_t edge_count = 0;
    double edge_sum = 0.0;
    for (size_t i = 0; i < H * W; ++i) {
        if (f.human_mask.data[i] > 0.5) continue;
        if (e.data[i] > threshold) {
            ++edge_count;
            edge_sum += e.data[i];
        }
    }
    if (edge_count == 0) return 0.0;
    double proportion = static_cast<double>(edge_count) / static_cast<double>(bg_count);
    double strength = (edge_sum / static_cast<double>(edge_count)) / 255.0;
    return proportion * strength;
}

double background_integrity_score(const Frame& f) {
    size_t total = f.human_mask.size();
    double bg_ratio = (static_cast<double>(total) - f.human_mask.sum()) / static_cast<double>(total);
    return bg_ratio * clarity(f);
}

}  // namespace kt
