#pragma once

#include <array>
#include <string>
#include <vector>

namespace kt {

// 17-joint skeleton in COCO keypoint order:
//  0 nose, 1 l-eye, 2 r-eye, 3 l-ear, 4 r-ear, 5 l-shoulder, 6 r-shoulder,
//  7 l-elbow, 8 r-elbow, 9 l-wrist, 10 r-wrist, 11 l-hip, 12 r-hip,
// 13 l-knee, 14 r-knee, 15 l-ankle, 16 r-ankle.
inline constexpr size_t kNumJoints = 17;
inline constexpr size_t kNumBones = 16;

// Bone list as (parent, child) joint indices.
inline constexpr std::array<std::array<int, 2>, kNumBones> kBones{{
    {0, 1}, {0, 2}, {1, 3}, {2, 4},   // head
    {5, 6},                            // shoulder line
    {5, 7}, {7, 9}, {6, 8}, {8, 10},  // arms
    {5, 11}, {6, 12}, {11, 12},       // torso
    {11, 13}, {13, 15}, {12, 14}, {14, 16},  // legs
}};

struct BoneDir {
    double x = 0.0, y = 0.0;
    bool degenerate = true;  // both endpoints coincide
};

/// Joint positions in normalized frame coordinates [0,1]^2, y pointing down.
struct SkeletonPose {
    std::array<std::array<double, 2>, kNumJoints> joints{};

    std::array<BoneDir, kNumBones> bone_directions() const;
};

/// Canonical pose for a view or action target from the shipped lookup table.
/// Throws config_error for targets outside the vocabulary.
SkeletonPose anchor_pose(const std::string& target);

/// The full target vocabulary: views then actions, in canonical order.
const std::vector<std::string>& pose_vocabulary();

/// Linear interpolation between poses (used by the scene generator).
SkeletonPose pose_lerp(const SkeletonPose& a, const SkeletonPose& b, double t);

}  // namespace kt
