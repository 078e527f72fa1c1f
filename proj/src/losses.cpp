#include "slamformer/losses.hpp"

#include <cmath>
#include <iostream>
#include <sstream>

#include "slamformer/tensor_ops.hpp"

namespace slamformer {

using detail::common_tape;
using detail::make_op;

namespace {

Tensor const_row(std::initializer_list<double> vals) {
    std::vector<scalar> v;
    v.reserve(vals.size());
    for (double x : vals) v.push_back(static_cast<scalar>(x));
    return Tensor::from_data({1, static_cast<int>(vals.size())}, std::move(v));
}

Tensor mask_tensor(const std::vector<uint8_t>& valid, Shape shape) {
    std::vector<scalar> v(valid.size());
    for (size_t i = 0; i < valid.size(); ++i) v[i] = valid[i] ? scalar(1) : scalar(0);
    return Tensor::from_data(std::move(shape), std::move(v));
}

// Pair-validity for forward-difference terms: both the pixel and its
// forward neighbor must be valid, and the neighbor must exist.
std::vector<uint8_t> pair_valid(const std::vector<uint8_t>& valid, int h, int w, bool x_axis) {
    std::vector<uint8_t> out(valid.size(), 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const size_t i = static_cast<size_t>(y) * w + x;
            if (!valid[i]) continue;
            if (x_axis && x + 1 < w && valid[i + 1]) out[i] = 1;
            if (!x_axis && y + 1 < h && valid[i + static_cast<size_t>(w)]) out[i] = 1;
        }
    return out;
}

Tensor row_norms(const Tensor& m) {  // [n x c] -> [n x 1] Euclidean
    const Tensor sq = mul(m, m);
    const Tensor ones = Tensor::full({m.cols(), 1}, 1);
    return sqrt(matmul(sq, ones));
}

Tensor depth_column(const Tensor& pointmap) {  // z channel of [HW x 3]
    std::vector<scalar> sel(3, 0);
    sel[2] = 1;
    return matmul(pointmap, Tensor::from_data({3, 1}, std::move(sel)));
}

bool any_valid(const std::vector<uint8_t>& v) {
    for (uint8_t x : v)
        if (x) return true;
    return false;
}

}  // namespace

Tensor depth_loss(const std::vector<HeadOutputs>& preds,
                  const std::vector<FrameGroundTruth>& gt, int h, int w, double s_star,
                  double alpha, std::vector<double>* per_frame) {
    if (preds.empty() || preds.size() != gt.size())
        throw Error::contract("depth_loss: prediction/ground-truth count mismatch");
    if (per_frame != nullptr) per_frame->assign(preds.size(), 0.0);

    Tensor total;
    int included = 0;
    for (size_t t = 0; t < preds.size(); ++t) {
        const auto& g = gt[t];
        if (static_cast<int>(g.depth.size()) != h * w || g.valid.size() != g.depth.size())
            throw Error::dimension("depth_loss: ground-truth map size mismatch");
        if (!any_valid(g.valid)) {
            std::cerr << "[slamformer] depth_loss: frame " << t
                      << " has no valid depth, excluded\n";
            continue;
        }
        std::vector<scalar> gd(g.depth.size());
        for (size_t i = 0; i < gd.size(); ++i) gd[i] = static_cast<scalar>(g.depth[i]);
        const Tensor gt_map = Tensor::from_data({h, w}, std::move(gd));

        const Tensor pred_map = reshape(mul(depth_column(preds[t].pointmap),
                                            static_cast<scalar>(s_star)), {h, w});
        const Tensor conf = reshape(preds[t].confidence, {h, w});
        const Tensor vmask = mask_tensor(g.valid, {h, w});

        const Tensor value_term =
            sum(mul(mul(conf, abs(sub(pred_map, gt_map))), vmask));

        const Tensor mask_x = mask_tensor(pair_valid(g.valid, h, w, true), {h, w});
        const Tensor mask_y = mask_tensor(pair_valid(g.valid, h, w, false), {h, w});
        const Tensor grad_term_x = sum(mul(
            mul(conf, abs(sub(spatial_grad_x(pred_map), spatial_grad_x(gt_map)))), mask_x));
        const Tensor grad_term_y = sum(mul(
            mul(conf, abs(sub(spatial_grad_y(pred_map), spatial_grad_y(gt_map)))), mask_y));

        const Tensor reg = mul(sum(mul(log(conf), vmask)), static_cast<scalar>(-alpha));

        const Tensor frame = add(add(value_term, add(grad_term_x, grad_term_y)), reg);
        if (per_frame != nullptr) (*per_frame)[t] = static_cast<double>(frame.item());
        total = included == 0 ? frame : add(total, frame);
        ++included;
    }
    if (included == 0) throw Error::contract("depth_loss: all frames invalid");
    return mul(total, static_cast<scalar>(1.0 / included));
}

namespace {

// Predicted relative pose (q_rel, t_rel) of frame t in the coordinates of
// frame 0, differentiable through both poses. Row-vector convention:
// column expression R^T u becomes u_row * R.
struct RelPose {
    Tensor quat;   // [1 x 4]
    Tensor trans;  // [1 x 3]
};

RelPose predicted_relative(const HeadOutputs& anchor, const HeadOutputs& frame) {
    RelPose rel;
    rel.quat = quat_multiply(quat_conjugate(anchor.quat), frame.quat);
    const Tensor r_anchor = quat_rotation_matrix(anchor.quat);
    rel.trans = matmul(sub(frame.translation, anchor.translation), r_anchor);
    return rel;
}

}  // namespace

Tensor pointmap_loss(const std::vector<HeadOutputs>& preds,
                     const std::vector<FrameGroundTruth>& gt, int h, int w, double s_star,
                     double alpha, std::vector<double>* per_frame) {
    if (preds.empty() || preds.size() != gt.size())
        throw Error::contract("pointmap_loss: first frame missing or count mismatch");
    if (per_frame != nullptr) per_frame->assign(preds.size(), 0.0);

    const SE3Pose gt_anchor_inv = gt[0].pose.inverse();

    Tensor total;
    int included = 0;
    for (size_t t = 0; t < preds.size(); ++t) {
        const auto& g = gt[t];
        if (static_cast<int>(g.pointmap.size()) != h * w)
            throw Error::dimension("pointmap_loss: ground-truth map size mismatch");
        if (!any_valid(g.valid)) {
            std::cerr << "[slamformer] pointmap_loss: frame " << t
                      << " has no valid pixels, excluded\n";
            continue;
        }

        // Prediction side: P*_{t,1} = g1*^{-1} gt* P*_t through predicted poses.
        const RelPose rel = predicted_relative(preds[0], preds[t]);
        const Tensor r_rel = quat_rotation_matrix(rel.quat);
        Tensor aligned = add_rows(matmul(preds[t].pointmap, transpose(r_rel)), rel.trans);
        aligned = mul(aligned, static_cast<scalar>(s_star));

        // Reference side: ground-truth local pointmap moved into the first
        // frame with ground-truth poses; constant.
        const SE3Pose rel_gt = gt_anchor_inv * g.pose;
        std::vector<scalar> gt_common(static_cast<size_t>(h) * w * 3);
        for (size_t i = 0; i < g.pointmap.size(); ++i) {
            const Vec3 p = rel_gt.apply(g.pointmap[i]);
            for (int c = 0; c < 3; ++c) gt_common[i * 3 + c] = static_cast<scalar>(p[c]);
        }
        const Tensor gt_map = Tensor::from_data({h * w, 3}, std::move(gt_common));

        const Tensor conf = preds[t].confidence;  // [HW x 1]
        const Tensor vmask = mask_tensor(g.valid, {h * w, 1});

        const Tensor value_term = sum(mul(mul(conf, row_norms(sub(aligned, gt_map))), vmask));

        const Tensor pred_grid = reshape(aligned, {h, w, 3});
        const Tensor gt_grid = reshape(gt_map, {h, w, 3});
        const Tensor mask_x = mask_tensor(pair_valid(g.valid, h, w, true), {h * w, 1});
        const Tensor mask_y = mask_tensor(pair_valid(g.valid, h, w, false), {h * w, 1});
        const Tensor gx = reshape(sub(spatial_grad_x(pred_grid), spatial_grad_x(gt_grid)), {h * w, 3});
        const Tensor gy = reshape(sub(spatial_grad_y(pred_grid), spatial_grad_y(gt_grid)), {h * w, 3});
        const Tensor grad_term = add(sum(mul(mul(conf, row_norms(gx)), mask_x)),
                                     sum(mul(mul(conf, row_norms(gy)), mask_y)));

        const Tensor reg = mul(sum(mul(log(conf), vmask)), static_cast<scalar>(-alpha));

        const Tensor frame = add(add(value_term, grad_term), reg);
        if (per_frame != nullptr) (*per_frame)[t] = static_cast<double>(frame.item());
        total = included == 0 ? frame : add(total, frame);
        ++included;
    }
    if (included == 0) throw Error::contract("pointmap_loss: all frames invalid");
    return mul(total, static_cast<scalar>(1.0 / included));
}

Tensor camera_loss(const std::vector<HeadOutputs>& preds,
                   const std::vector<FrameGroundTruth>& gt, double s_star,
                   double epsilon_huber) {
    if (preds.size() < 2) throw Error::contract("camera_loss: need at least two frames");
    if (preds.size() != gt.size())
        throw Error::contract("camera_loss: prediction/ground-truth count mismatch");
    if (epsilon_huber <= 0) throw Error::config("camera_loss: epsilon must be positive");

    Tensor total;
    bool first = true;
    for (size_t i = 0; i < preds.size(); ++i) {
        for (size_t j = i + 1; j < preds.size(); ++j) {
            const RelPose rel = predicted_relative(preds[i], preds[j]);
            const SE3Pose rel_gt = relative_pose(gt[i].pose, gt[j].pose);

            const Tensor q_gt_conj = const_row({rel_gt.rotation.w, -rel_gt.rotation.x,
                                                -rel_gt.rotation.y, -rel_gt.rotation.z});
            const Tensor dq = quat_multiply(q_gt_conj, rel.quat);
            const Tensor rot_res = quat_geodesic_vec(dq);

            const Tensor t_gt = const_row({rel_gt.translation[0], rel_gt.translation[1],
                                           rel_gt.translation[2]});
            const Tensor trans_res = sub(mul(rel.trans, static_cast<scalar>(s_star)), t_gt);

            const Tensor pair = add(sum(huber(rot_res, epsilon_huber)),
                                    sum(huber(trans_res, epsilon_huber)));
            total = first ? pair : add(total, pair);
            first = false;
        }
    }
    return total;
}

double solve_window_scale(const std::vector<HeadOutputs>& preds,
                          const std::vector<FrameGroundTruth>& gt) {
    std::vector<Vec3> pred_pts, gt_pts;
    std::vector<double> depths;
    std::vector<uint8_t> valid;
    for (size_t t = 0; t < preds.size(); ++t) {
        const auto pm = preds[t].pointmap.data();
        for (size_t i = 0; i < gt[t].pointmap.size(); ++i) {
            pred_pts.push_back({static_cast<double>(pm[i * 3 + 0]),
                                static_cast<double>(pm[i * 3 + 1]),
                                static_cast<double>(pm[i * 3 + 2])});
            gt_pts.push_back(gt[t].pointmap[i]);
            depths.push_back(gt[t].depth[i]);
            valid.push_back(gt[t].valid[i]);
        }
    }
    return solve_scale(pred_pts, gt_pts, depths, &valid).s_star;
}

ModeLossResult mode_loss(const std::vector<HeadOutputs>& preds,
                         const std::vector<FrameGroundTruth>& gt, int h, int w,
                         const LossConfig& cfg) {
    cfg.validate();
    ModeLossResult out;
    out.s_star = solve_window_scale(preds, gt);
    const Tensor l_depth = depth_loss(preds, gt, h, w, out.s_star, cfg.alpha, &out.per_frame_depth);
    const Tensor l_pmap = pointmap_loss(preds, gt, h, w, out.s_star, cfg.alpha, &out.per_frame_pointmap);
    const Tensor l_cam = camera_loss(preds, gt, out.s_star, cfg.epsilon_huber);
    out.depth = static_cast<double>(l_depth.item());
    out.pointmap = static_cast<double>(l_pmap.item());
    out.camera = static_cast<double>(l_cam.item());
    out.total = add(add(l_depth, l_pmap), mul(l_cam, static_cast<scalar>(cfg.lambda)));
    return out;
}

Tensor joint_objective(const Tensor& l1, const Tensor& l2, const Tensor& l3, double beta) {
    if (l1.numel() != 1 || l2.numel() != 1 || l3.numel() != 1)
        throw Error::contract("joint_objective: losses must be scalars");
    return add(add(l1, l2), mul(l3, static_cast<scalar>(beta)));
}

std::string LossReport::to_kv_text() const {
    std::ostringstream os;
    os.precision(9);
    os << "loss_depth = " << depth << "\n";
    os << "loss_pmap = " << pmap << "\n";
    os << "loss_cam = " << cam << "\n";
    os << "loss_mode1 = " << mode1 << "\n";
    os << "loss_mode2 = " << mode2 << "\n";
    os << "loss_mode3 = " << mode3 << "\n";
    os << "loss_all = " << total << "\n";
    os << "s_star_mode1 = " << s_star1 << "\n";
    os << "s_star_mode2 = " << s_star2 << "\n";
    os << "s_star_mode3 = " << s_star3 << "\n";
    for (size_t i = 0; i < per_frame_depth.size(); ++i)
        os << "frame" << i << "_depth = " << per_frame_depth[i] << "\n";
    for (size_t i = 0; i < per_frame_pointmap.size(); ++i)
        os << "frame" << i << "_pmap = " << per_frame_pointmap[i] << "\n";
    return os.str();
}

// ------------------------------------------------- differentiable pose ops

Tensor quat_multiply(const Tensor& a, const Tensor& b) {
    if (a.numel() != 4 || b.numel() != 4)
        throw Error::dimension("quat_multiply: operands must have 4 elements");
    const auto ad = a.data();
    const auto bd = b.data();
    const double aw = ad[0], ax = ad[1], ay = ad[2], az = ad[3];
    const double bw = bd[0], bx = bd[1], by = bd[2], bz = bd[3];
    std::vector<scalar> out = {
        static_cast<scalar>(aw * bw - ax * bx - ay * by - az * bz),
        static_cast<scalar>(aw * bx + ax * bw + ay * bz - az * by),
        static_cast<scalar>(aw * by - ax * bz + ay * bw + az * bx),
        static_cast<scalar>(aw * bz + ax * by - ay * bx + az * bw),
    };
    Tape* tape = common_tape({&a, &b});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pa = a.on_tape() ? a.node() : -1;
        const int pb = b.on_tape() ? b.node() : -1;
        fn = [pa, pb, aw, ax, ay, az, bw, bx, by, bz](std::span<const scalar> g,
                                                      Tape::GradStore& gs) {
            const double gw = g[0], gx = g[1], gy = g[2], gz = g[3];
            if (pa >= 0) {
                auto ga = gs.of(pa);
                ga[0] += static_cast<scalar>(gw * bw + gx * bx + gy * by + gz * bz);
                ga[1] += static_cast<scalar>(-gw * bx + gx * bw - gy * bz + gz * by);
                ga[2] += static_cast<scalar>(-gw * by + gx * bz + gy * bw - gz * bx);
                ga[3] += static_cast<scalar>(-gw * bz - gx * by + gy * bx + gz * bw);
            }
            if (pb >= 0) {
                auto gb = gs.of(pb);
                gb[0] += static_cast<scalar>(gw * aw + gx * ax + gy * ay + gz * az);
                gb[1] += static_cast<scalar>(-gw * ax + gx * aw + gy * az - gz * ay);
                gb[2] += static_cast<scalar>(-gw * ay - gx * az + gy * aw + gz * ax);
                gb[3] += static_cast<scalar>(-gw * az + gx * ay - gy * ax + gz * aw);
            }
        };
    }
    return make_op({1, 4}, std::move(out), tape, std::move(fn), "quat_multiply");
}

Tensor quat_conjugate(const Tensor& q) {
    if (q.numel() != 4) throw Error::dimension("quat_conjugate: operand must have 4 elements");
    return mul(q, Tensor::from_data({1, 4}, {1, -1, -1, -1}));
}

Tensor quat_rotation_matrix(const Tensor& q) {
    if (q.numel() != 4) throw Error::dimension("quat_rotation_matrix: operand must have 4 elements");
    const auto d = q.data();
    const double w = d[0], x = d[1], y = d[2], z = d[3];
    std::vector<scalar> out = {
        static_cast<scalar>(1 - 2 * (y * y + z * z)), static_cast<scalar>(2 * (x * y - w * z)),
        static_cast<scalar>(2 * (x * z + w * y)),     static_cast<scalar>(2 * (x * y + w * z)),
        static_cast<scalar>(1 - 2 * (x * x + z * z)), static_cast<scalar>(2 * (y * z - w * x)),
        static_cast<scalar>(2 * (x * z - w * y)),     static_cast<scalar>(2 * (y * z + w * x)),
        static_cast<scalar>(1 - 2 * (x * x + y * y)),
    };
    Tape* tape = common_tape({&q});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pq = q.node();
        fn = [pq, w, x, y, z](std::span<const scalar> g, Tape::GradStore& gs) {
            auto gq = gs.of(pq);
            // dR/dq tables per entry, row-major.
            const double g00 = g[0], g01 = g[1], g02 = g[2];
            const double g10 = g[3], g11 = g[4], g12 = g[5];
            const double g20 = g[6], g21 = g[7], g22 = g[8];
            double dw = 0, dx = 0, dy = 0, dz = 0;
            dw += g01 * (-2 * z) + g02 * (2 * y) + g10 * (2 * z) + g12 * (-2 * x) +
                  g20 * (-2 * y) + g21 * (2 * x);
            dx += g01 * (2 * y) + g02 * (2 * z) + g10 * (2 * y) + g11 * (-4 * x) +
                  g12 * (-2 * w) + g20 * (2 * z) + g21 * (2 * w) + g22 * (-4 * x);
            dy += g00 * (-4 * y) + g01 * (2 * x) + g02 * (2 * w) + g10 * (2 * x) +
                  g12 * (2 * z) + g20 * (-2 * w) + g21 * (2 * z) + g22 * (-4 * y);
            dz += g00 * (-4 * z) + g01 * (-2 * w) + g02 * (2 * x) + g10 * (2 * w) +
                  g11 * (-4 * z) + g12 * (2 * y) + g20 * (2 * x) + g21 * (2 * y);
            gq[0] += static_cast<scalar>(dw);
            gq[1] += static_cast<scalar>(dx);
            gq[2] += static_cast<scalar>(dy);
            gq[3] += static_cast<scalar>(dz);
        };
    }
    return make_op({3, 3}, std::move(out), tape, std::move(fn), "quat_rotation_matrix");
}

Tensor quat_geodesic_vec(const Tensor& dq) {
    if (dq.numel() != 4) throw Error::dimension("quat_geodesic_vec: operand must have 4 elements");
    const auto d = dq.data();
    double w = d[0], x = d[1], y = d[2], z = d[3];
    const double qn = std::sqrt(w * w + x * x + y * y + z * z);
    if (qn < 1e-8) throw Error::numeric("quat_geodesic_vec: near-zero quaternion");
    // Canonical hemisphere keeps the angle in [0, pi]; the output is
    // invariant to the double cover.
    const double sgn = w >= 0 ? 1.0 : -1.0;
    w *= sgn; x *= sgn; y *= sgn; z *= sgn;
    const double n2 = x * x + y * y + z * z;
    const double n = std::sqrt(n2);
    const double q2 = w * w + n2;

    constexpr double kSmall = 1e-8;
    double f;
    if (n < kSmall) {
        f = 2.0 / w;  // small-angle limit of 2*atan2(n, w)/n
    } else {
        f = 2.0 * std::atan2(n, w) / n;
    }
    std::vector<scalar> out = {static_cast<scalar>(f * x), static_cast<scalar>(f * y),
                               static_cast<scalar>(f * z)};

    Tape* tape = common_tape({&dq});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pq = dq.node();
        fn = [pq, sgn, w, x, y, z, n, n2, q2, f](std::span<const scalar> g, Tape::GradStore& gs) {
            auto gq = gs.of(pq);
            const double v[3] = {x, y, z};
            const double gv[3] = {static_cast<double>(g[0]), static_cast<double>(g[1]),
                                  static_cast<double>(g[2])};
            double dvdw = 0.0;
            double dv[3] = {0, 0, 0};
            if (n < 1e-8) {
                for (int i = 0; i < 3; ++i) dv[i] = f * gv[i];
                // d out / dw ~ -2 v / w^2 -> negligible for n -> 0
            } else {
                const double df_dn = 2.0 * (w * n / q2 - std::atan2(n, w)) / n2;
                double gdotv = 0.0;
                for (int i = 0; i < 3; ++i) gdotv += gv[i] * v[i];
                for (int i = 0; i < 3; ++i)
                    dv[i] = f * gv[i] + df_dn * (v[i] / n) * gdotv;
                dvdw = (-2.0 / q2) * gdotv;
            }
            gq[0] += static_cast<scalar>(sgn * dvdw);
            gq[1] += static_cast<scalar>(sgn * dv[0]);
            gq[2] += static_cast<scalar>(sgn * dv[1]);
            gq[3] += static_cast<scalar>(sgn * dv[2]);
        };
    }
    return make_op({1, 3}, std::move(out), tape, std::move(fn), "quat_geodesic_vec");
}

}  // namespace slamformer
