#pragma once

#include <string>
#include <vector>

#include "slamformer/geometry.hpp"
#include "slamformer/model.hpp"
#include "slamformer/tensor.hpp"

namespace slamformer {

struct LossConfig {
    double lambda = 100.0;         // camera-loss weight
    double beta = 10.0;            // third-mode weight
    double alpha = 0.2;            // confidence regularizer weight
    double epsilon_huber = 0.1;    // Huber threshold, scene units

    void validate() const {
        if (lambda <= 0 || beta <= 0 || alpha <= 0 || epsilon_huber <= 0)
            throw Error::config("LossConfig: all weights must be positive");
    }
};

// Ground truth for one frame of a training clip.
struct FrameGroundTruth {
    std::vector<double> depth;    // H*W, camera-local z
    std::vector<uint8_t> valid;   // H*W, false pixels are excluded from all terms
    std::vector<Vec3> pointmap;   // H*W camera-local coordinates
    SE3Pose pose;                 // camera-to-world
};

struct ModeLossResult {
    Tensor total;
    double depth = 0;
    double pointmap = 0;
    double camera = 0;
    double s_star = 1;
    std::vector<double> per_frame_depth;
    std::vector<double> per_frame_pointmap;
};

struct LossReport {
    double depth = 0, pmap = 0, cam = 0;   // mode-1 components
    double mode1 = 0, mode2 = 0, mode3 = 0, total = 0;
    double s_star1 = 1, s_star2 = 1, s_star3 = 1;
    std::vector<double> per_frame_depth, per_frame_pointmap;

    // Flat key = value block for training logs.
    std::string to_kv_text() const;
};

// Confidence-weighted L1 depth term with spatial-gradient consistency and
// the -alpha*log(conf) regularizer; mean over frames with any valid pixel.
Tensor depth_loss(const std::vector<HeadOutputs>& preds,
                  const std::vector<FrameGroundTruth>& gt, int h, int w, double s_star,
                  double alpha, std::vector<double>* per_frame = nullptr);

// Same structure on pointmaps aligned to the first frame through the
// predicted poses (prediction side) and ground-truth poses (reference side);
// per-pixel Euclidean residuals.
Tensor pointmap_loss(const std::vector<HeadOutputs>& preds,
                     const std::vector<FrameGroundTruth>& gt, int h, int w, double s_star,
                     double alpha, std::vector<double>* per_frame = nullptr);

// Pairwise relative-pose consistency under the Huber norm; the predicted
// relative translation is scaled by s_star.
Tensor camera_loss(const std::vector<HeadOutputs>& preds,
                   const std::vector<FrameGroundTruth>& gt, double s_star,
                   double epsilon_huber);

// depth + pointmap + lambda * camera with s* solved once from the window's
// pointmaps and treated as a constant.
ModeLossResult mode_loss(const std::vector<HeadOutputs>& preds,
                         const std::vector<FrameGroundTruth>& gt, int h, int w,
                         const LossConfig& cfg);

// L1 + L2 + beta * L3 on shared weights.
Tensor joint_objective(const Tensor& l1, const Tensor& l2, const Tensor& l3, double beta);

// Scale solve over all frames of a window, pooled; constant downstream.
double solve_window_scale(const std::vector<HeadOutputs>& preds,
                          const std::vector<FrameGroundTruth>& gt);

// ---- Differentiable pose algebra on [1x4] quaternion / [1x3] translation
// tensors; used inside the losses and exposed for tests.

Tensor quat_multiply(const Tensor& a, const Tensor& b);
Tensor quat_conjugate(const Tensor& q);
Tensor quat_rotation_matrix(const Tensor& q);  // [3x3], assumes unit input
// Axis-angle vector (angle * axis) of the rotation dq represents; smooth at
// the identity.
Tensor quat_geodesic_vec(const Tensor& dq);

}  // namespace slamformer
