#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "keytailor/keyframe.hpp"
#include "keytailor/tensor.hpp"

namespace kt {

struct ActionEvent {
    size_t begin = 0, end = 0;  // frame range [begin, end)
    std::string action;
};

struct OcclusionEvent {
    size_t begin = 0, end = 0;
    double fraction = 0.5;  // horizontal share of the garment covered
};

struct SceneSpec {
    size_t frames = 16;
    size_t height = 64, width = 64;
    std::vector<std::string> view_schedule;  // one view tag per frame
    std::vector<ActionEvent> actions;
    std::vector<OcclusionEvent> occlusions;
    int garment_texture = 0;
    int background_texture = 0;
    double fps = 8.0;
    uint64_t seed = 1;
};

struct SyntheticSample {
    std::vector<Frame> frames;
    Tensor video;           // [3,T,H,W]
    Tensor agnostic;        // [3,T,H,W]
    Tensor garment_masks;   // [T,H,W]
    Tensor human_masks;     // [T,H,W]
    Tensor occluded_masks;  // [T,H,W]
    Tensor pose_joints;     // [T,17,2]
    Tensor pose_maps;       // [3,T,H,W] rendered skeletons
    Tensor garment_ref;     // [3,H,W]
};

/// Randomized but fully seed-determined scene description.
SceneSpec default_scene_spec(uint64_t seed, size_t frames = 16, size_t size = 64);

/// Renders the articulated stick-figure scene described by `spec`.
SyntheticSample generate_scene(const SceneSpec& spec);

/// Garment region replaced by mid-gray; elsewhere identical to the source.
Tensor make_agnostic(const Tensor& video, const Tensor& garment_masks);

/// White-on-black bone renderings for the pose guider.
Tensor render_pose_maps(const Tensor& pose_joints, size_t height, size_t width);

/// Persists/loads one sample as KTSR tensors plus a fixed-order manifest.
void write_sample(const std::string& dir, const SyntheticSample& sample);
SyntheticSample read_sample(const std::string& dir);

}  // namespace kt
