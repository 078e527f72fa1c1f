#include "slamformer/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

namespace slamformer {

double norm(const Vec3& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

double Quat::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

Quat Quat::normalized() const {
    const double n = norm();
    if (n < 1e-12) throw Error::numeric("cannot normalize near-zero quaternion");
    return {w / n, x / n, y / n, z / n};
}

Quat Quat::operator*(const Quat& o) const {
    return {
        w * o.w - x * o.x - y * o.y - z * o.z,
        w * o.x + x * o.w + y * o.z - z * o.y,
        w * o.y - x * o.z + y * o.w + z * o.x,
        w * o.z + x * o.y - y * o.x + z * o.w,
    };
}

std::array<std::array<double, 3>, 3> Quat::rotation_matrix() const {
    const double xx = x * x, yy = y * y, zz = z * z;
    const double xy = x * y, xz = x * z, yz = y * z;
    const double wx = w * x, wy = w * y, wz = w * z;
    return {{
        {1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)},
        {2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)},
        {2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)},
    }};
}

Vec3 Quat::rotate(const Vec3& v) const {
    const auto R = rotation_matrix();
    return {
        R[0][0] * v[0] + R[0][1] * v[1] + R[0][2] * v[2],
        R[1][0] * v[0] + R[1][1] * v[1] + R[1][2] * v[2],
        R[2][0] * v[0] + R[2][1] * v[1] + R[2][2] * v[2],
    };
}

Vec3 Quat::log_vector() const {
    // Canonicalize to the w >= 0 hemisphere so the angle is in [0, pi].
    const double s = w >= 0 ? 1.0 : -1.0;
    const double vw = s * w;
    const Vec3 v{s * x, s * y, s * z};
    const double n = slamformer::norm(v);
    if (n < 1e-12) return {0, 0, 0};
    const double angle = 2.0 * std::atan2(n, vw);
    return (angle / n) * v;
}

Quat Quat::from_axis_angle(const Vec3& axis, double angle) {
    const double n = slamformer::norm(axis);
    if (n < 1e-12) return Quat::identity();
    const double half = 0.5 * angle;
    const double s = std::sin(half) / n;
    return Quat{std::cos(half), s * axis[0], s * axis[1], s * axis[2]};
}

SE3Pose SE3Pose::inverse() const {
    const Quat qinv = rotation.conjugate();
    const Vec3 t = qinv.rotate(translation);
    return {qinv, {-t[0], -t[1], -t[2]}};
}

SE3Pose SE3Pose::operator*(const SE3Pose& o) const {
    return {(rotation * o.rotation).normalized(), translation + rotation.rotate(o.translation)};
}

Vec3 SE3Pose::apply(const Vec3& p) const { return translation + rotation.rotate(p); }

Vec3 Sim3Transform::apply(const Vec3& p) const {
    return translation + scale * rotation.rotate(p);
}

SE3Pose relative_pose(const SE3Pose& g_a, const SE3Pose& g_b) {
    return g_a.inverse() * g_b;
}

std::vector<Vec3> apply_to_pointmap(const SE3Pose& g, const std::vector<Vec3>& points) {
    std::vector<Vec3> out;
    out.reserve(points.size());
    for (const auto& p : points) out.push_back(g.apply(p));
    return out;
}

GradientMaps spatial_gradient(const std::vector<double>& map, int h, int w, int channels) {
    if (h < 2 || w < 2 || channels < 1)
        throw Error::dimension("spatial_gradient: degenerate dimensions");
    if (static_cast<size_t>(h) * w * channels != map.size())
        throw Error::dimension("spatial_gradient: map size mismatch");
    GradientMaps g;
    g.dx.assign(map.size(), 0.0);
    g.dy.assign(map.size(), 0.0);
    auto idx = [&](int y, int x, int c) { return (static_cast<size_t>(y) * w + x) * channels + c; };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c) {
                if (x + 1 < w) g.dx[idx(y, x, c)] = map[idx(y, x + 1, c)] - map[idx(y, x, c)];
                if (y + 1 < h) g.dy[idx(y, x, c)] = map[idx(y + 1, x, c)] - map[idx(y, x, c)];
            }
    return g;
}

double huber_norm(const std::vector<double>& r, double epsilon) {
    if (epsilon <= 0) throw Error::config("huber_norm: epsilon must be positive");
    double acc = 0.0;
    for (double v : r) {
        const double a = std::fabs(v);
        acc += a <= epsilon ? 0.5 * v * v : epsilon * (a - 0.5 * epsilon);
    }
    return acc;
}

ScaleEstimate solve_scale(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                          const std::vector<double>& depth,
                          const std::vector<uint8_t>* valid) {
    if (pred.size() != gt.size() || pred.size() != depth.size())
        throw Error::dimension("solve_scale: input sizes differ");
    // Each coordinate contributes |s*a - b| with a = pred/depth, b = gt/depth,
    // i.e. weight |a| at ratio b/a. The weighted median of the ratios
    // minimizes the objective.
    struct Term { double ratio; double weight; };
    std::vector<Term> terms;
    terms.reserve(pred.size() * 3);
    for (size_t i = 0; i < pred.size(); ++i) {
        if (valid != nullptr && !(*valid)[i]) continue;
        if (!(depth[i] > 0)) continue;
        for (int c = 0; c < 3; ++c) {
            const double a = pred[i][c] / depth[i];
            if (a == 0.0) continue;  // constant term, no influence on s
            const double b = gt[i][c] / depth[i];
            terms.push_back({b / a, std::fabs(a)});
        }
    }
    if (terms.empty()) throw Error::estimation("solve_scale: no valid elements");

    std::sort(terms.begin(), terms.end(),
              [](const Term& l, const Term& r) { return l.ratio < r.ratio; });
    double total = 0.0;
    for (const auto& t : terms) total += t.weight;
    double run = 0.0;
    double s = terms.back().ratio;
    for (const auto& t : terms) {
        run += t.weight;
        if (run >= 0.5 * total) {
            s = t.ratio;
            break;
        }
    }
    // The estimate scales positive-depth geometry; keep the invariant even on
    // adversarial inputs.
    if (!(s > 0)) s = 1e-12;

    double residual = 0.0;
    for (const auto& t : terms) residual += t.weight * std::fabs(s - t.ratio);
    return {s, residual};
}

Sim3Transform umeyama_alignment(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                                bool with_scale) {
    if (src.size() != dst.size()) throw Error::dimension("umeyama: point counts differ");
    const int n = static_cast<int>(src.size());
    if (n < 3) throw Error::estimation("umeyama: need at least 3 correspondences");

    Eigen::MatrixXd X(3, n), Y(3, n);
    for (int i = 0; i < n; ++i) {
        X.col(i) = Eigen::Vector3d(src[i][0], src[i][1], src[i][2]);
        Y.col(i) = Eigen::Vector3d(dst[i][0], dst[i][1], dst[i][2]);
    }
    const Eigen::Vector3d mx = X.rowwise().mean();
    const Eigen::Vector3d my = Y.rowwise().mean();
    X.colwise() -= mx;
    Y.colwise() -= my;

    const double var_x = X.squaredNorm() / n;
    const Eigen::Matrix3d sigma = Y * X.transpose() / n;

    Eigen::JacobiSVD<Eigen::Matrix3d> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d d = svd.singularValues();
    // Rank < 2 leaves the rotation unconstrained (collinear points).
    if (d(1) < 1e-12 * std::max(1.0, d(0)))
        throw Error::estimation("umeyama: degenerate point configuration");

    Eigen::Matrix3d S = Eigen::Matrix3d::Identity();
    if (sigma.determinant() < 0 ||
        (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0)
        S(2, 2) = -1;

    const Eigen::Matrix3d R = svd.matrixU() * S * svd.matrixV().transpose();
    double scale = 1.0;
    if (with_scale) {
        if (var_x < 1e-300) throw Error::estimation("umeyama: zero-variance source");
        scale = (d.asDiagonal().toDenseMatrix() * S).trace() / var_x;
        if (!(scale > 0)) throw Error::estimation("umeyama: non-positive scale");
    }
    const Eigen::Vector3d t = my - scale * R * mx;

    const Eigen::Quaterniond q(R);
    Sim3Transform out;
    out.scale = scale;
    out.rotation = Quat{q.w(), q.x(), q.y(), q.z()}.normalized();
    out.translation = {t(0), t(1), t(2)};
    return out;
}

}  // namespace slamformer
