#include "slamformer/tensor.hpp"

#include <cmath>
#include <cstring>

namespace slamformer {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(Shape shape) {
    return full(std::move(shape), scalar(0));
}

Tensor Tensor::full(Shape shape, scalar value) {
    const int64_t n = shape_numel(shape);
    if (n < 0) throw Error::dimension("negative dimension in shape " + shape_str(shape));
    auto storage = std::make_shared<std::vector<scalar>>(static_cast<size_t>(n), value);
    return bound(std::move(shape), std::move(storage), nullptr, -1);
}

Tensor Tensor::from_data(Shape shape, std::vector<scalar> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        throw Error::dimension("data length " + std::to_string(values.size()) +
                               " does not match shape " + shape_str(shape));
    auto storage = std::make_shared<std::vector<scalar>>(std::move(values));
    return bound(std::move(shape), std::move(storage), nullptr, -1);
}

Tensor Tensor::scalar_value(scalar v) {
    return from_data({1}, {v});
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    const int64_t n = shape_numel(shape);
    std::vector<scalar> v(static_cast<size_t>(n));
    for (auto& x : v) x = static_cast<scalar>(rng.normal(0.0, stddev));
    return from_data(std::move(shape), std::move(v));
}

Tensor Tensor::bound(Shape shape, std::shared_ptr<const std::vector<scalar>> storage,
                     Tape* tape, int node) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.storage_ = std::move(storage);
    if (tape != nullptr && node >= 0) {
        t.tape_ = tape;
        t.node_ = node;
        t.tape_gen_ = tape->generation_token();
        t.gen_seen_ = tape->generation();
    }
    return t;
}

int64_t Tensor::numel() const {
    return storage_ ? static_cast<int64_t>(storage_->size()) : 0;
}

std::span<const scalar> Tensor::data() const {
    if (!storage_) throw Error::contract("use of undefined tensor");
    return {storage_->data(), storage_->size()};
}

scalar Tensor::item() const {
    if (numel() != 1) throw Error::dimension("item() requires a single-element tensor, got " + shape_str(shape_));
    return (*storage_)[0];
}

int Tensor::rows() const {
    if (ndim() != 2) throw Error::dimension("rows() requires 2-D tensor, got " + shape_str(shape_));
    return shape_[0];
}

int Tensor::cols() const {
    if (ndim() != 2) throw Error::dimension("cols() requires 2-D tensor, got " + shape_str(shape_));
    return shape_[1];
}

scalar Tensor::at2(int r, int c) const {
    return data()[static_cast<size_t>(r) * cols() + c];
}

bool Tensor::on_tape() const {
    return tape_gen_ && *tape_gen_ == gen_seen_ && node_ >= 0;
}

Tensor Tensor::leaf(Tape& tape) const {
    if (!storage_) throw Error::contract("cannot register undefined tensor as leaf");
    const int node = tape.add_node(shape_, Tape::BackwardFn{});
    return bound(shape_, storage_, &tape, node);
}

Tensor Tensor::detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.storage_ = storage_;
    return t;
}

std::vector<scalar> Tensor::to_vector() const {
    auto d = data();
    return {d.begin(), d.end()};
}

// ------------------------------------------------------------- Gradients

bool Gradients::contains(const Tensor& t) const {
    if (!t.on_tape()) return false;
    if (!gen_ || t.tape()->generation_token() != gen_) return false;
    return by_node_.count(t.node()) > 0;
}

const Tensor& Gradients::at(const Tensor& t) const {
    // A tensor whose binding expired (tape reset) can never match gen_seen_.
    if (gen_ && t.node() >= 0) {
        auto it = by_node_.find(t.node());
        if (it != by_node_.end()) return it->second;
    }
    throw Error::contract("no gradient recorded for this tensor");
}

// ------------------------------------------------------------------ Tape

Tape::Tape() : gen_(std::make_shared<uint64_t>(1)) {}

Tape::~Tape() {
    ++*gen_;  // expire outstanding bindings
}

void Tape::reset() {
    ++*gen_;
    nodes_.clear();
}

int Tape::add_node(Shape out_shape, BackwardFn fn) {
    nodes_.push_back(NodeRec{std::move(out_shape), std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
}

std::span<scalar> Tape::GradStore::of(int node) {
    auto& g = grads_[static_cast<size_t>(node)];
    if (g.empty()) g.assign(static_cast<size_t>(shape_numel(tape_.nodes_[static_cast<size_t>(node)].shape)), scalar(0));
    return {g.data(), g.size()};
}

bool Tape::GradStore::has(int node) const {
    return !grads_[static_cast<size_t>(node)].empty();
}

std::span<const scalar> Tape::GradStore::view(int node) const {
    const auto& g = grads_[static_cast<size_t>(node)];
    return {g.data(), g.size()};
}

Gradients Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) throw Error::contract("backward requires a scalar loss");
    if (!loss.on_tape() || loss.tape() != this)
        throw Error::contract("loss is not a node of this tape");

    GradStore gs(*this);
    gs.grads_.resize(nodes_.size());
    gs.of(loss.node())[0] = scalar(1);

    // Every node is visited exactly once, in reverse registration order.
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        if (!gs.has(i)) continue;  // not reached from the loss
        const auto& rec = nodes_[static_cast<size_t>(i)];
        if (rec.fn) rec.fn(gs.view(i), gs);
    }

    Gradients out;
    out.gen_ = gen_;
    out.gen_seen_ = *gen_;
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (!gs.has(static_cast<int>(i))) continue;
        out.by_node_.emplace(static_cast<int>(i),
                             Tensor::from_data(nodes_[i].shape, std::move(gs.grads_[i])));
    }
    reset();
    return out;
}

// ------------------------------------------------------------------- ops

namespace detail {

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
    Tape* t = nullptr;
    for (const Tensor* x : ts) {
        if (!x->on_tape()) continue;
        if (t != nullptr && t != x->tape())
            throw Error::contract("operands bound to different tapes");
        t = x->tape();
    }
    return t;
}

void check_finite(std::span<const scalar> v, const char* op) {
    for (scalar x : v) {
        if (!std::isfinite(x))
            throw Error::numeric(std::string(op) + " produced a non-finite value");
    }
}

Tensor make_op(Shape shape, std::vector<scalar> data, Tape* tape, Tape::BackwardFn fn,
               const char* op) {
    check_finite({data.data(), data.size()}, op);
    auto storage = std::make_shared<std::vector<scalar>>(std::move(data));
    int node = -1;
    if (tape != nullptr) node = tape->add_node(shape, std::move(fn));
    return Tensor::bound(std::move(shape), std::move(storage), tape, node);
}

}  // namespace detail

using detail::check_finite;
using detail::common_tape;

namespace {

using Storage = std::shared_ptr<const std::vector<scalar>>;

Tensor finish(Shape shape, std::vector<scalar> out, Tape* tape, Tape::BackwardFn fn,
              const char* op) {
    return detail::make_op(std::move(shape), std::move(out), tape, std::move(fn), op);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw Error::dimension("matmul requires 2-D operands, got " + shape_str(a.shape()) +
                               " and " + shape_str(b.shape()));
    if (a.cols() != b.rows())
        throw Error::dimension("matmul inner dimensions differ: " + shape_str(a.shape()) +
                               " x " + shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<scalar> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p)
                acc += static_cast<double>(ad[static_cast<size_t>(i) * k + p]) *
                       static_cast<double>(bd[static_cast<size_t>(p) * n + j]);
            out[static_cast<size_t>(i) * n + j] = static_cast<scalar>(acc);
        }
    }

    Tape* tape = common_tape({&a, &b});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pa = a.on_tape() ? a.node() : -1;
        const int pb = b.on_tape() ? b.node() : -1;
        Storage sa = a.storage(), sb = b.storage();
        fn = [m, k, n, pa, pb, sa, sb](std::span<const scalar> g, Tape::GradStore& gs) {
            if (pa >= 0) {
                auto ga = gs.of(pa);
                const auto& B = *sb;
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j)
                            acc += static_cast<double>(g[static_cast<size_t>(i) * n + j]) *
                                   static_cast<double>(B[static_cast<size_t>(p) * n + j]);
                        ga[static_cast<size_t>(i) * k + p] += static_cast<scalar>(acc);
                    }
            }
            if (pb >= 0) {
                auto gb = gs.of(pb);
                const auto& A = *sa;
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i)
                            acc += static_cast<double>(A[static_cast<size_t>(i) * k + p]) *
                                   static_cast<double>(g[static_cast<size_t>(i) * n + j]);
                        gb[static_cast<size_t>(p) * n + j] += static_cast<scalar>(acc);
                    }
            }
        };
    }
    return finish({m, n}, std::move(out), tape, std::move(fn), "matmul");
}

namespace {

enum class EwKind { add, sub, mul, div };

Tensor elementwise_binary(const Tensor& a, const Tensor& b, EwKind kind, const char* name) {
    const bool a_scalar = a.is_scalar_like();
    const bool b_scalar = b.is_scalar_like();
    if (!a.same_shape(b) && !a_scalar && !b_scalar)
        throw Error::dimension(std::string(name) + ": incompatible shapes " +
                               shape_str(a.shape()) + " vs " + shape_str(b.shape()) +
                               " (only exact-shape and scalar broadcast supported)");
    const Shape out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
    const int64_t n = a_scalar && !b_scalar ? b.numel() : a.numel();
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<scalar> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const scalar x = ad[a_scalar ? 0 : static_cast<size_t>(i)];
        const scalar y = bd[b_scalar ? 0 : static_cast<size_t>(i)];
        scalar r = 0;
        switch (kind) {
            case EwKind::add: r = x + y; break;
            case EwKind::sub: r = x - y; break;
            case EwKind::mul: r = x * y; break;
            case EwKind::div:
                if (y == scalar(0)) throw Error::numeric("div: division by zero");
                r = x / y;
                break;
        }
        out[static_cast<size_t>(i)] = r;
    }

    Tape* tape = common_tape({&a, &b});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pa = a.on_tape() ? a.node() : -1;
        const int pb = b.on_tape() ? b.node() : -1;
        Storage sa = a.storage(), sb = b.storage();
        fn = [n, pa, pb, sa, sb, a_scalar, b_scalar, kind](std::span<const scalar> g,
                                                           Tape::GradStore& gs) {
            for (int64_t i = 0; i < n; ++i) {
                const scalar x = (*sa)[a_scalar ? 0 : static_cast<size_t>(i)];
                const scalar y = (*sb)[b_scalar ? 0 : static_cast<size_t>(i)];
                scalar da = 0, db = 0;
                switch (kind) {
                    case EwKind::add: da = g[i]; db = g[i]; break;
                    case EwKind::sub: da = g[i]; db = -g[i]; break;
                    case EwKind::mul: da = g[i] * y; db = g[i] * x; break;
                    case EwKind::div: da = g[i] / y; db = -g[i] * x / (y * y); break;
                }
                if (pa >= 0) gs.of(pa)[a_scalar ? 0 : static_cast<size_t>(i)] += da;
                if (pb >= 0) gs.of(pb)[b_scalar ? 0 : static_cast<size_t>(i)] += db;
            }
        };
    }
    return finish(out_shape, std::move(out), tape, std::move(fn), name);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, EwKind::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, EwKind::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, EwKind::mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise_binary(a, b, EwKind::div, "div"); }

Tensor add(const Tensor& a, scalar b) {
    const int64_t n = a.numel();
    const auto ad = a.data();
    std::vector<scalar> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = ad[static_cast<size_t>(i)] + b;
    Tape* tape = common_tape({&a});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pa = a.node();
        fn = [n, pa](std::span<const scalar> g, Tape::GradStore& gs) {
            auto ga = gs.of(pa);
            for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)];
        };
    }
    return finish(a.shape(), std::move(out), tape, std::move(fn), "add");
}

Tensor mul(const Tensor& a, scalar b) {
    const int64_t n = a.numel();
    const auto ad = a.data();
    std::vector<scalar> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = ad[static_cast<size_t>(i)] * b;
    Tape* tape = common_tape({&a});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int pa = a.node();
        fn = [n, pa, b](std::span<const scalar> g, Tape::GradStore& gs) {
            auto ga = gs.of(pa);
            for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * b;
        };
    }
    return finish(a.shape(), std::move(out), tape, std::move(fn), "scale");
}

BoolMask BoolMask::all(int r, int c, bool v) {
    BoolMask m;
    m.rows = r;
    m.cols = c;
    m.allow.assign(static_cast<size_t>(r) * c, v ? 1 : 0);
    return m;
}

Tensor softmax_rows(const Tensor& x, const BoolMask* mask) {
    if (x.ndim() != 2) throw Error::dimension("softmax_rows requires 2-D input");
    const int r = x.rows(), c = x.cols();
    if (mask != nullptr && (mask->rows != r || mask->cols != c))
        throw Error::dimension("softmax_rows mask shape mismatch");
    const auto xd = x.data();
    std::vector<scalar> out(static_cast<size_t>(r) * c, scalar(0));
    for (int i = 0; i < r; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j)
            if (mask == nullptr || mask->at(i, j))
                mx = std::max(mx, static_cast<double>(xd[static_cast<size_t>(i) * c + j]));
        if (!std::isfinite(mx))
            throw Error::contract("softmax_rows: row " + std::to_string(i) + " is fully masked");
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            if (mask != nullptr && !mask->at(i, j)) continue;
            const double e = std::exp(static_cast<double>(xd[static_cast<size_t>(i) * c + j]) - mx);
            out[static_cast<size_t>(i) * c + j] = static_cast<scalar>(e);
            sum += e;
        }
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(i) * c + j] = static_cast<scalar>(out[static_cast<size_t>(i) * c + j] / sum);
    }

    Tape* tape = common_tape({&x});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int px = x.node();
        auto sout = std::make_shared<std::vector<scalar>>(out);  // softmax values needed in backward
        fn = [r, c, px, sout](std::span<const scalar> g, Tape::GradStore& gs) {
            auto gx = gs.of(px);
            const auto& s = *sout;
            for (int i = 0; i < r; ++i) {
                double dot = 0.0;
                for (int j = 0; j < c; ++j)
                    dot += static_cast<double>(g[static_cast<size_t>(i) * c + j]) *
                           static_cast<double>(s[static_cast<size_t>(i) * c + j]);
                for (int j = 0; j < c; ++j) {
                    const size_t idx = static_cast<size_t>(i) * c + j;
                    gx[idx] += s[idx] * (g[idx] - static_cast<scalar>(dot));
                }
            }
        };
    }
    return finish({r, c}, std::move(out), tape, std::move(fn), "softmax_rows");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    if (x.ndim() != 2) throw Error::dimension("layer_norm requires 2-D input");
    const int r = x.rows(), d = x.cols();
    if (d == 0) throw Error::dimension("layer_norm: zero feature dimension");
    if (d < 2) throw Error::dimension("layer_norm requires feature dimension >= 2");
    if (gain.numel() != d || bias.numel() != d)
        throw Error::dimension("layer_norm gain/bias must have " + std::to_string(d) + " elements");
    constexpr double kEps = 1e-5;
    const auto xd = x.data();
    const auto gd = gain.data();
    const auto bd = bias.data();

    std::vector<scalar> out(static_cast<size_t>(r) * d);
    std::vector<double> inv_std(static_cast<size_t>(r));
    std::vector<double> means(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) {
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xd[static_cast<size_t>(i) * d + j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = xd[static_cast<size_t>(i) * d + j] - mean;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + kEps);
        means[static_cast<size_t>(i)] = mean;
        inv_std[static_cast<size_t>(i)] = inv;
        for (int j = 0; j < d; ++j) {
            const double xhat = (xd[static_cast<size_t>(i) * d + j] - mean) * inv;
            out[static_cast<size_t>(i) * d + j] =
                static_cast<scalar>(xhat * gd[static_cast<size_t>(j)] + bd[static_cast<size_t>(j)]);
        }
    }

    Tape* tape = common_tape({&x, &gain, &bias});
    Tape::BackwardFn fn;
    if (tape != nullptr) {
        const int px = x.on_tape() ? x.node() : -1;
        const int pg = gain.on_tape() ? gain.node() : -1;
        const int pb = bias.on_tape() ? bias.node() : -1;
        Storage sx = x.storage(), sg = gain.storage();
        auto sm = std::make_shared<std::vector<double>>(std::move(means));
        auto si = std::make_shared<std::vector<double>>(std::move(inv_std));
        fn = [r, d, px, pg, pb, sx, sg, sm, si](std::span<const scalar> g, Tape::GradStore& gs) {
            for (int i = 0; i < r; ++i) {
                const double mean = (*sm)[static_cast<size_t>(i)];
                const double inv = (*si)[static_cast<size_t>(i)];
                // dxhat_j = g_j * gain_j; reduce the two row means once.
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (int j = 0; j < d; ++j) {
                    const size_t idx = static_cast<size_t>(i) * d + j;
                    const double xhat = ((*sx)[idx] - mean) * inv;
                    const double dxhat = static_cast<double>(g[idx]) * (*sg)[static_cast<size_t>(j)];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                }
                mean_dxhat /= d;
                mean_dxhat_xhat /= d;
                for (int j = 0; j < d; ++j) {
                    const size_t idx = static_cast<size_t>(i) * d + j;
                    const double xhat = ((*sx)[idx] - mean) * inv;
                    const double dxhat = static_cast<double>(g[idx]) * (*sg)[static_cast<size_t>(j)];
                    if (px >= 0)
                        gs.of(px)[idx] += static_cast<scalar>((dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv);
                    if (pg >= 0)
                        gs.of(pg)[static_cast<size_t>(j)] += static_cast<scalar>(static_cast<double>(g[idx]) * xhat);
                    if (pb >= 0) gs.of(pb)[static_cast<size_t>(j)] += g[idx];
                }
            }
        };
    }
    return finish({r, d}, std::move(out), tape, std::move(fn), "layer_norm");
}

Gradients backward(const Tensor& loss, Tape& tape) {
    return tape.backward(loss);
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f,
                            const Tensor& x, double step) {
    if (step <= 0) throw Error::config("finite_diff_gradient: step must be positive");
    const int64_t n = x.numel();
    std::vector<scalar> base = x.to_vector();
    std::vector<scalar> grad(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        std::vector<scalar> hi = base, lo = base;
        hi[static_cast<size_t>(i)] = static_cast<scalar>(static_cast<double>(base[static_cast<size_t>(i)]) + step);
        lo[static_cast<size_t>(i)] = static_cast<scalar>(static_cast<double>(base[static_cast<size_t>(i)]) - step);
        const double fp = f(Tensor::from_data(x.shape(), std::move(hi)));
        const double fm = f(Tensor::from_data(x.shape(), std::move(lo)));
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw Error::numeric("finite_diff_gradient: non-finite function value");
        grad[static_cast<size_t>(i)] = static_cast<scalar>((fp - fm) / (2.0 * step));
    }
    return Tensor::from_data(x.shape(), std::move(grad));
}

}  // namespace slamformer
