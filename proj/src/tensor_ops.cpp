#include "slamformer/tensor_ops.hpp"

#include <cmath>

namespace slamformer {

using detail::common_tape;

namespace {

using detail::make_op;

Tensor finish(Shape shape, std::vector<scalar> out, Tape* tape, Tape::BackwardFn fn,
              const char* op) {
    return make_op(std::move(shape), std::move(out), tape, std::move(fn), op);
}

// Elementwise unary with value-and-derivative callback.
template <typename F>
Tensor unary_op(const Tensor& a, const char* name, F&& val_and_deriv) {
    const int64_t n = a.numel();
    const auto ad = a.data();
    std::vector<scalar> out(static_cast<size_t>(n));
    std::vector<scalar> deriv(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const auto [v, d] = val_and_deriv(static_cast<double>(ad[static_cast<size_t>(i)]));
        out[static_cast<size_t>(i)] = static_cast<scalar>(v);
        deriv[static_cast<size_t>(i)] = static_cast<scalar>(d);
    }
    Tape* tape = common_tape({&a});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pa = a.node();
        auto sd = std::make_shared<std::vector<scalar>>(std::move(deriv));
        fn = [n, pa, sd](std::span<const scalar> g, Tape::GradStore& gs) {
            auto ga = gs.of(pa);
            for (int64_t i = 0; i < n; ++i)
                ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * (*sd)[static_cast<size_t>(i)];
        };
    }
    return finish(a.shape(), std::move(out), tape, std::move(fn), name);
}

}  // namespace

Tensor transpose(const Tensor& a) {
    const int r = a.rows(), c = a.cols();
    const auto ad = a.data();
    std::vector<scalar> out(static_cast<size_t>(r) * c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(j) * r + i] = ad[static_cast<size_t>(i) * c + j];
    Tape* tape = common_tape({&a});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pa = a.node();
        fn = [r, c, pa](std::span<const scalar> g, Tape::GradStore& gs) {
            auto ga = gs.of(pa);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    ga[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j) * r + i];
        };
    }
    return finish({c, r}, std::move(out), tape, std::move(fn), "transpose");
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw Error::dimension("reshape: element count mismatch " + shape_str(a.shape()) +
                               " -> " + shape_str(shape));
    Tape* tape = common_tape({&a});
    int node = -1;
    if (tape != nullptr) {
        const int pa = a.node();
        const int64_t n = a.numel();
        node = tape->add_node(shape, [pa, n](std::span<const scalar> g, Tape::GradStore& gs) {
            auto ga = gs.of(pa);
            for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
        });
    }
    return Tensor::bound(std::move(shape), a.storage(), tape, node);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw Error::dimension("concat_rows: no inputs");
    const int c = parts.front().cols();
    int total = 0;
    for (const auto& p : parts) {
        if (p.cols() != c) throw Error::dimension("concat_rows: column count mismatch");
        total += p.rows();
    }
    std::vector<scalar> out;
    out.reserve(static_cast<size_t>(total) * c);
    for (const auto& p : parts) {
        const auto d = p.data();
        out.insert(out.end(), d.begin(), d.end());
    }
    std::vector<const Tensor*> ptrs;
    Tape* tape = nullptr;
    for (const auto& p : parts)
        if (p.on_tape()) {
            if (tape != nullptr && tape != p.tape())
                throw Error::contract("concat_rows: operands bound to different tapes");
            tape = p.tape();
        }
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        struct Piece { int node; int64_t offset; int64_t count; };
        std::vector<Piece> pieces;
        int64_t off = 0;
        for (const auto& p : parts) {
            const int64_t cnt = p.numel();
            if (p.on_tape()) pieces.push_back({p.node(), off, cnt});
            off += cnt;
        }
        fn = [pieces](std::span<const scalar> g, Tape::GradStore& gs) {
            for (const auto& pc : pieces) {
                auto gp = gs.of(pc.node);
                for (int64_t i = 0; i < pc.count; ++i)
                    gp[static_cast<size_t>(i)] += g[static_cast<size_t>(pc.offset + i)];
            }
        };
    }
    return finish({total, c}, std::move(out), tape, std::move(fn), "concat_rows");
}

Tensor slice_rows(const Tensor& a, int row0, int count) {
    const int r = a.rows(), c = a.cols();
    if (row0 < 0 || count < 0 || row0 + count > r)
        throw Error::bounds("slice_rows: range [" + std::to_string(row0) + ", " +
                            std::to_string(row0 + count) + ") outside " + std::to_string(r) + " rows");
    const auto ad = a.data();
    std::vector<scalar> out(ad.begin() + static_cast<size_t>(row0) * c,
                            ad.begin() + static_cast<size_t>(row0 + count) * c);
    Tape* tape = common_tape({&a});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pa = a.node();
        fn = [pa, row0, count, c](std::span<const scalar> g, Tape::GradStore& gs) {
            auto ga = gs.of(pa);
            for (int64_t i = 0; i < static_cast<int64_t>(count) * c; ++i)
                ga[static_cast<size_t>(row0) * c + static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
        };
    }
    return finish({count, c}, std::move(out), tape, std::move(fn), "slice_rows");
}

Tensor sum(const Tensor& a) {
    const int64_t n = a.numel();
    const auto ad = a.data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += ad[static_cast<size_t>(i)];
    Tape* tape = common_tape({&a});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pa = a.node();
        fn = [pa, n](std::span<const scalar> g, Tape::GradStore& gs) {
            auto ga = gs.of(pa);
            for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[0];
        };
    }
    return finish({1}, {static_cast<scalar>(acc)}, tape, std::move(fn), "sum");
}

Tensor add_rows(const Tensor& a, const Tensor& row) {
    const int r = a.rows(), c = a.cols();
    if (row.numel() != c)
        throw Error::dimension("add_rows: row vector must have " + std::to_string(c) + " elements");
    const auto ad = a.data();
    const auto rd = row.data();
    std::vector<scalar> out(static_cast<size_t>(r) * c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(i) * c + j] = ad[static_cast<size_t>(i) * c + j] + rd[static_cast<size_t>(j)];
    Tape* tape = common_tape({&a, &row});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pa = a.on_tape() ? a.node() : -1;
        const int pr = row.on_tape() ? row.node() : -1;
        fn = [r, c, pa, pr](std::span<const scalar> g, Tape::GradStore& gs) {
            if (pa >= 0) {
                auto ga = gs.of(pa);
                for (int64_t i = 0; i < static_cast<int64_t>(r) * c; ++i)
                    ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
            }
            if (pr >= 0) {
                auto gr = gs.of(pr);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        gr[static_cast<size_t>(j)] += g[static_cast<size_t>(i) * c + j];
            }
        };
    }
    return finish({r, c}, std::move(out), tape, std::move(fn), "add_rows");
}

Tensor gelu(const Tensor& a) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    return unary_op(a, "gelu", [](double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return std::pair<double, double>(x * cdf, cdf + x * pdf);
    });
}

Tensor exp(const Tensor& a) {
    return unary_op(a, "exp", [](double x) {
        const double v = std::exp(x);
        return std::pair<double, double>(v, v);
    });
}

Tensor log(const Tensor& a) {
    return unary_op(a, "log", [](double x) {
        if (x <= 0.0) throw Error::numeric("log: non-positive input");
        return std::pair<double, double>(std::log(x), 1.0 / x);
    });
}

Tensor sqrt(const Tensor& a) {
    return unary_op(a, "sqrt", [](double x) {
        if (x < 0.0) throw Error::numeric("sqrt: negative input");
        const double v = std::sqrt(x);
        // Subgradient convention at the origin keeps backward finite.
        const double d = v > 0.0 ? 0.5 / v : 0.0;
        return std::pair<double, double>(v, d);
    });
}

Tensor abs(const Tensor& a) {
    return unary_op(a, "abs", [](double x) {
        const double s = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
        return std::pair<double, double>(std::fabs(x), s);
    });
}

Tensor huber(const Tensor& a, double epsilon) {
    if (epsilon <= 0.0) throw Error::config("huber: epsilon must be positive");
    return unary_op(a, "huber", [epsilon](double x) {
        const double ax = std::fabs(x);
        if (ax <= epsilon) return std::pair<double, double>(0.5 * x * x, x);
        const double s = x > 0.0 ? 1.0 : -1.0;
        return std::pair<double, double>(epsilon * (ax - 0.5 * epsilon), epsilon * s);
    });
}

namespace {

// Shared machinery for the two difference directions. axis 0 = x (columns),
// axis 1 = y (rows).
Tensor spatial_grad(const Tensor& map, int axis, const char* name) {
    if (map.ndim() != 2 && map.ndim() != 3)
        throw Error::dimension(std::string(name) + " requires [H x W] or [H x W x C] input");
    const int h = map.dim(0), w = map.dim(1);
    const int ch = map.ndim() == 3 ? map.dim(2) : 1;
    if (h < 2 || w < 2) throw Error::dimension(std::string(name) + ": degenerate map dimensions");
    const auto md = map.data();
    auto at = [&](int y, int x, int c) -> scalar {
        return md[(static_cast<size_t>(y) * w + x) * ch + c];
    };
    std::vector<scalar> out(static_cast<size_t>(h) * w * ch, scalar(0));
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < ch; ++c) {
                scalar v = 0;
                if (axis == 0 && x + 1 < w) v = at(y, x + 1, c) - at(y, x, c);
                if (axis == 1 && y + 1 < h) v = at(y + 1, x, c) - at(y, x, c);
                out[(static_cast<size_t>(y) * w + x) * ch + c] = v;
            }
    Tape* tape = common_tape({&map});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pm = map.node();
        fn = [h, w, ch, axis, pm](std::span<const scalar> g, Tape::GradStore& gs) {
            auto gm = gs.of(pm);
            auto idx = [&](int y, int x, int c) { return (static_cast<size_t>(y) * w + x) * ch + c; };
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    for (int c = 0; c < ch; ++c) {
                        const scalar gv = g[idx(y, x, c)];
                        if (gv == scalar(0)) continue;
                        if (axis == 0 && x + 1 < w) {
                            gm[idx(y, x + 1, c)] += gv;
                            gm[idx(y, x, c)] -= gv;
                        }
                        if (axis == 1 && y + 1 < h) {
                            gm[idx(y + 1, x, c)] += gv;
                            gm[idx(y, x, c)] -= gv;
                        }
                    }
        };
    }
    Shape shape = map.shape();
    return finish(std::move(shape), std::move(out), tape, std::move(fn), name);
}

}  // namespace

Tensor spatial_grad_x(const Tensor& map) { return spatial_grad(map, 0, "spatial_grad_x"); }
Tensor spatial_grad_y(const Tensor& map) { return spatial_grad(map, 1, "spatial_grad_y"); }

Tensor gather(const Tensor& a, Shape out_shape, std::vector<int64_t> indices) {
    const int64_t n = shape_numel(out_shape);
    if (static_cast<int64_t>(indices.size()) != n)
        throw Error::dimension("gather: index count does not match output shape");
    const auto ad = a.data();
    const int64_t in_n = a.numel();
    std::vector<scalar> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const int64_t src = indices[static_cast<size_t>(i)];
        if (src < 0 || src >= in_n) throw Error::bounds("gather: index out of range");
        out[static_cast<size_t>(i)] = ad[static_cast<size_t>(src)];
    }
    Tape* tape = common_tape({&a});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pa = a.node();
        auto idx = std::make_shared<std::vector<int64_t>>(std::move(indices));
        fn = [pa, idx, n](std::span<const scalar> g, Tape::GradStore& gs) {
            auto ga = gs.of(pa);
            for (int64_t i = 0; i < n; ++i)
                ga[static_cast<size_t>((*idx)[static_cast<size_t>(i)])] += g[static_cast<size_t>(i)];
        };
    }
    return finish(std::move(out_shape), std::move(out), tape, std::move(fn), "gather");
}

}  // namespace slamformer
