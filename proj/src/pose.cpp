#include "keytailor/pose.hpp"

#include <cmath>
#include <map>

#include "keytailor/errors.hpp"

namespace kt {

std::array<BoneDir, kNumBones> SkeletonPose::bone_directions() const {
    std::array<BoneDir, kNumBones> dirs;
    for (size_t b = 0; b < kNumBones; ++b) {
        const auto& pa = joints[kBones[b][0]];
        const auto& pb = joints[kBones[b][1]];
        double dx = pb[0] - pa[0];
        double dy = pb[1] - pa[1];
        double n = std::sqrt(dx * dx + dy * dy);
        if (n > 0.0) dirs[b] = {dx / n, dy / n, false};
    }
    return dirs;
}

namespace {

using J = std::array<std::array<double, 2>, kNumJoints>;

SkeletonPose make(J j) {
    SkeletonPose p;
    p.joints = j;
    return p;
}

SkeletonPose mirror_x(const SkeletonPose& p) {
    SkeletonPose m = p;
    for (auto& j : m.joints) j[0] = 1.0 - j[0];
    return m;
}

// Frozen canonical poses; values are authored fixture data.
const std::map<std::string, SkeletonPose>& pose_table() {
    static const std::map<std::string, SkeletonPose> table = [] {
        std::map<std::string, SkeletonPose> t;
        SkeletonPose front = make(J{{
            {0.50, 0.15}, {0.47, 0.13}, {0.53, 0.13}, {0.44, 0.15}, {0.56, 0.15},
            {0.38, 0.30}, {0.62, 0.30}, {0.34, 0.45}, {0.66, 0.45}, {0.32, 0.60},
            {0.68, 0.60}, {0.42, 0.58}, {0.58, 0.58}, {0.41, 0.75}, {0.59, 0.75},
            {0.40, 0.92}, {0.60, 0.92},
        }});
        t["front"] = front;
        t["back"] = mirror_x(front);
        SkeletonPose left = make(J{{
            {0.56, 0.15}, {0.54, 0.13}, {0.55, 0.135}, {0.50, 0.15}, {0.51, 0.155},
            {0.48, 0.30}, {0.52, 0.30}, {0.56, 0.44}, {0.58, 0.45}, {0.62, 0.58},
            {0.64, 0.59}, {0.48, 0.58}, {0.52, 0.58}, {0.50, 0.75}, {0.54, 0.75},
            {0.48, 0.92}, {0.58, 0.92},
        }});
        t["left"] = left;
        t["right"] = mirror_x(left);
        SkeletonPose raise = front;
        raise.joints[7] = {0.36, 0.20};  // left elbow lifted
        raise.joints[9] = {0.37, 0.06};  // left wrist above the head
        t["raise-hand"] = raise;
        SkeletonPose turn = make(J{{
            {0.55, 0.15}, {0.53, 0.13}, {0.57, 0.13}, {0.50, 0.15}, {0.59, 0.15},
            {0.44, 0.29}, {0.56, 0.31}, {0.40, 0.44}, {0.60, 0.46}, {0.38, 0.59},
            {0.62, 0.61}, {0.46, 0.58}, {0.54, 0.58}, {0.45, 0.75}, {0.55, 0.75},
            {0.44, 0.92}, {0.56, 0.92},
        }});
        t["turn"] = turn;
        SkeletonPose walk = front;
        walk.joints[7] = {0.40, 0.43};
        walk.joints[9] = {0.44, 0.56};
        walk.joints[8] = {0.60, 0.47};
        walk.joints[10] = {0.56, 0.62};
        walk.joints[13] = {0.36, 0.73};
        walk.joints[15] = {0.33, 0.90};
        walk.joints[14] = {0.64, 0.74};
        walk.joints[16] = {0.66, 0.91};
        t["walk"] = walk;
        return t;
    }();
    return table;
}

}  // namespace

SkeletonPose anchor_pose(const std::string& target) {
    auto it = pose_table().find(target);
    if (it == pose_table().end())
        throw config_error("anchor_pose: unknown target '" + target + "'");
    return it->second;
}

const std::vector<std::string>& pose_vocabulary() {
    static const std::vector<std::string> v{"front", "back",      "left", "right",
                                            "raise-hand", "turn", "walk"};
    return v;
}

SkeletonPose pose_lerp(const SkeletonPose& a, const SkeletonPose& b, double t) {
    SkeletonPose out;
    for (size_t j = 0; j < kNumJoints; ++j) {
        out.joints[j][0] = (1.0 - t) * a.joints[j][0] + t * b.joints[j][0];
        out.joints[j][1] = (1.0 - t) * a.joints[j][1] + t * b.joints[j][1];
    }
    return out;
}

}  // namespace kt
