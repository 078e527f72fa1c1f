#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "slamformer/error.hpp"
#include "slamformer/rng.hpp"

namespace slamformer {

// Baseline precision is float32; configure with -DSLAMFORMER_DOUBLE=ON to
// run the whole tensor stack in float64.
#ifdef SLAMFORMER_DOUBLE
using scalar = double;
#else
using scalar = float;
#endif

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Dense immutable tensor. Storage is shared between copies and never
// mutated after construction, so tensors are safe to read concurrently.
// A tensor may carry a binding to the tape node that produced it; the
// binding silently expires when the tape is reset or destroyed.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, scalar value);
    static Tensor from_data(Shape shape, std::vector<scalar> values);
    static Tensor scalar_value(scalar v);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);

    bool defined() const { return storage_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const;
    std::span<const scalar> data() const;
    scalar at(int64_t flat) const { return data()[static_cast<size_t>(flat)]; }
    scalar item() const;

    // 2-D conveniences; dimension error elsewhere.
    int rows() const;
    int cols() const;
    scalar at2(int r, int c) const;

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool is_scalar_like() const { return numel() == 1; }

    bool on_tape() const;
    Tape* tape() const { return on_tape() ? tape_ : nullptr; }
    int node() const { return node_; }

    // Registers a grad-enabled copy of this tensor as a tape leaf.
    Tensor leaf(Tape& tape) const;
    // Same storage, no tape association.
    Tensor detached() const;

    std::vector<scalar> to_vector() const;

    // Internal factory used by ops; node < 0 means no binding.
    static Tensor bound(Shape shape, std::shared_ptr<const std::vector<scalar>> storage,
                        Tape* tape, int node);

    const std::shared_ptr<const std::vector<scalar>>& storage() const { return storage_; }

private:
    std::shared_ptr<const std::vector<scalar>> storage_;
    Shape shape_;
    Tape* tape_ = nullptr;
    int node_ = -1;
    std::shared_ptr<const uint64_t> tape_gen_;
    uint64_t gen_seen_ = 0;
};

// Gradient map produced by one backward sweep. Keys are tape nodes, so
// lookups only work for tensors that were on the tape of that sweep;
// everything else is reported absent rather than zero.
class Gradients {
public:
    bool contains(const Tensor& t) const;
    const Tensor& at(const Tensor& t) const;
    size_t size() const { return by_node_.size(); }

private:
    friend class Tape;
    std::unordered_map<int, Tensor> by_node_;
    std::shared_ptr<const uint64_t> gen_;
    uint64_t gen_seen_ = 0;
};

// Reverse-mode tape. Nodes are appended in execution order, which is a
// valid topological order; backward sweeps the list once in reverse.
// Single-owner, single-threaded.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    class GradStore {
    public:
        // Gradient accumulator of a node, zero-initialized on first access.
        std::span<scalar> of(int node);
        bool has(int node) const;
        std::span<const scalar> view(int node) const;

    private:
        friend class Tape;
        explicit GradStore(Tape& t) : tape_(t) {}
        Tape& tape_;
        std::vector<std::vector<scalar>> grads_;
    };

    using BackwardFn = std::function<void(std::span<const scalar> out_grad, GradStore& gs)>;

    // fn may be empty (leaves). Returns the node id.
    int add_node(Shape out_shape, BackwardFn fn);

    // Seeds d(loss)/d(loss) = 1, sweeps all nodes once in reverse order and
    // returns gradients for every node reached. The tape is reset afterwards:
    // previously produced tensors silently lose their binding.
    Gradients backward(const Tensor& loss);

    size_t node_count() const { return nodes_.size(); }
    void reset();

    std::shared_ptr<const uint64_t> generation_token() const { return gen_; }
    uint64_t generation() const { return *gen_; }

private:
    struct NodeRec {
        Shape shape;
        BackwardFn fn;
    };
    std::vector<NodeRec> nodes_;
    std::shared_ptr<uint64_t> gen_;
};

// Boolean mask at token granularity for masked row softmax.
struct BoolMask {
    int rows = 0;
    int cols = 0;
    std::vector<uint8_t> allow;  // rows*cols, row-major

    bool at(int r, int c) const { return allow[static_cast<size_t>(r) * cols + c] != 0; }
    void set(int r, int c, bool v) { allow[static_cast<size_t>(r) * cols + c] = v ? 1 : 0; }
    static BoolMask all(int r, int c, bool v = true);
};

// ---- Core ops. Results register on the tape when any input is bound. ----

Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise; shapes must match exactly or one operand must have a single
// element (scalar broadcast). No other broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, scalar b);
Tensor mul(const Tensor& a, scalar b);  // scale

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, scalar b) { return add(a, b); }
inline Tensor operator*(const Tensor& a, scalar b) { return mul(a, b); }
inline Tensor operator*(scalar a, const Tensor& b) { return mul(b, a); }

// Row softmax with optional mask; masked entries are exactly zero and
// excluded from the max subtraction. A fully masked row is a contract error.
Tensor softmax_rows(const Tensor& x, const BoolMask* mask = nullptr);

// Per-row normalization over the last dimension (2-D input), epsilon 1e-5.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

// Scalar-loss reverse sweep; see Tape::backward.
Gradients backward(const Tensor& loss, Tape& tape);

// Central finite differences of f around x, the independent oracle for all
// gradient checks. Never touches the tape.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f,
                            const Tensor& x, double step);

namespace detail {
Tape* common_tape(std::initializer_list<const Tensor*> ts);
void check_finite(std::span<const scalar> v, const char* op);
// Finalizes an op result: finiteness check, optional node registration.
Tensor make_op(Shape shape, std::vector<scalar> data, Tape* tape, Tape::BackwardFn fn,
               const char* op);
}  // namespace detail

}  // namespace slamformer
