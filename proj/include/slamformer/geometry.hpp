#pragma once

#include <array>
#include <vector>

#include "slamformer/error.hpp"

namespace slamformer {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
double norm(const Vec3& a);
double dot(const Vec3& a, const Vec3& b);

// Unit quaternion, scalar-first storage.
struct Quat {
    double w = 1, x = 0, y = 0, z = 0;

    static Quat identity() { return {}; }
    Quat normalized() const;
    Quat conjugate() const { return {w, -x, -y, -z}; }
    Quat operator*(const Quat& o) const;
    Vec3 rotate(const Vec3& v) const;
    std::array<std::array<double, 3>, 3> rotation_matrix() const;
    double norm() const;

    // Axis-angle vector of the rotation (length = angle in radians).
    Vec3 log_vector() const;
    static Quat from_axis_angle(const Vec3& axis, double angle);
};

// Camera-to-world rigid pose.
struct SE3Pose {
    Quat rotation;
    Vec3 translation{0, 0, 0};

    static SE3Pose identity() { return {}; }
    SE3Pose inverse() const;
    SE3Pose operator*(const SE3Pose& o) const;  // composition: this after o
    Vec3 apply(const Vec3& p) const;
};

// x -> s * R x + t, s > 0.
struct Sim3Transform {
    double scale = 1.0;
    Quat rotation;
    Vec3 translation{0, 0, 0};

    static Sim3Transform identity() { return {}; }
    Vec3 apply(const Vec3& p) const;
};

struct ScaleEstimate {
    double s_star = 1.0;
    double residual = 0.0;  // objective value at s_star
};

// g_a^{-1} . g_b
SE3Pose relative_pose(const SE3Pose& g_a, const SE3Pose& g_b);

// Rigid transform of every point.
std::vector<Vec3> apply_to_pointmap(const SE3Pose& g, const std::vector<Vec3>& points);

// Forward differences over an H x W x channels map stored row-major;
// gradient at the last column / row is zero.
struct GradientMaps {
    std::vector<double> dx;  // same layout as input
    std::vector<double> dy;
};
GradientMaps spatial_gradient(const std::vector<double>& map, int h, int w, int channels);

// Per-component Huber summed over the vector.
double huber_norm(const std::vector<double>& r, double epsilon);

// Weighted-median minimizer of sum_i |s * pred_i - gt_i| / depth_i taken
// per coordinate. Entries with non-positive depth or an invalid flag are
// skipped; gradients never flow through the result.
ScaleEstimate solve_scale(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                          const std::vector<double>& depth,
                          const std::vector<uint8_t>* valid = nullptr);

// Least-squares similarity (or rigid when with_scale is false) aligning
// src onto dst: min sum || s R x + t - y ||^2. Requires >= 3 points in a
// non-degenerate configuration.
Sim3Transform umeyama_alignment(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                                bool with_scale = true);
inline Sim3Transform umeyama_sim3(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
    return umeyama_alignment(src, dst, true);
}

}  // namespace slamformer
