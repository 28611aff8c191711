#pragma once

#include <set>
#include <string>
#include <vector>

#include "keytailor/pose.hpp"
#include "keytailor/tensor.hpp"

namespace kt {

/// One video frame with its masks, pose, and ground-truth labels.
struct Frame {
    int index = 0;
    double timestamp = 0.0;
    Tensor pixels;                 // [3,H,W] in [0,1]
    Tensor garment_mask;           // [H,W] binary
    Tensor human_mask;             // [H,W] binary; garment_mask subset of it
    Tensor occluded_garment_mask;  // [H,W] binary
    SkeletonPose pose;
    std::set<std::string> labels;  // view/action tags; may be empty
};

struct InstructionTargets {
    std::vector<std::string> views;    // subset of {front, back, left, right}
    std::vector<std::string> actions;  // subset of {raise-hand, turn, walk}

    std::vector<std::string> all() const;
    size_t count() const { return views.size() + actions.size(); }
};

enum class ScoringMode { eq1, algorithm };

struct SamplerConfig {
    size_t k_max = 3;
    double w1 = 0.3, w2 = 0.2, w3 = 0.3, w4 = 0.2;
    double lambda = 0.5;
    double t_thres = -1.0;  // < 0 means auto: video duration / 5
    double occlu_thres = 0.2;
    double score_diff_min = 0.1;
    ScoringMode mode = ScoringMode::algorithm;
};

struct FrameScore {
    int index = 0;
    double timestamp = 0.0;
    double s_ins = 0.0;
    double s_m = 0.0;
    double s_r = 0.0;
    double occlusion_ratio = 0.0;
    double initial_score = 0.0;
    double temporal_score = 1.0;
    double final_score = 0.0;
};

struct KeyframeSet {
    std::vector<FrameScore> selected;  // in selection order
    bool all_filtered = false;         // every frame dropped by occlusion
    double t_thres = 0.0;              // resolved threshold used

    std::vector<int> indices() const;
};

/// Deterministic keyword extraction. Recognized words: the view/action
/// vocabulary, with "raise" + "hand" (any order, any separator) mapping to
/// raise-hand. Throws config_error when nothing is recognized.
InstructionTargets parse_instruction(const std::string& text);

double motion_difference_score(const Frame& f, const std::vector<SkeletonPose>& anchors);
double garment_area_ratio(const Frame& f);
double occlusion_ratio(const Frame& f);
double instruction_score(const Frame& f, const InstructionTargets& targets);

FrameScore frame_score(const Frame& f, const std::vector<SkeletonPose>& anchors,
                       const InstructionTargets& targets, const SamplerConfig& cfg);

/// Scored, dual-constrained greedy keyframe selection.
KeyframeSet select_keyframes(const std::vector<Frame>& frames, const InstructionTargets& targets,
                             const SamplerConfig& cfg);

/// Gradient-magnitude edge map of a grayscale image in [0,255];
/// 3x3 Sobel kernels with replicate-padded borders.
Tensor sobel_edge_map(const Tensor& gray);

/// Luma (0.299 R + 0.587 G + 0.114 B) scaled to [0,255].
Tensor luma255(const Tensor& rgb);

double clarity(const Frame& f, double threshold = 50.0);
double background_integrity_score(const Frame& f);

}  // namespace kt
