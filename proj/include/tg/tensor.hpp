#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <string>
#include <vector>

namespace tg {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

// 64-byte-aligned allocation for numeric storage. Vectorized kernels choose
// their loop peeling from the buffer address, so two heap placements of the
// same computation can round differently in the last ulp. Pinning the
// alignment makes every placement take the same code path, which keeps
// repeated runs bit-identical.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::size_t kAlignment = 64;

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlignment}));
    }
    void deallocate(T* p, std::size_t) noexcept {
        ::operator delete(p, std::align_val_t{kAlignment});
    }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
    template <class U>
    bool operator!=(const AlignedAllocator<U>&) const noexcept {
        return false;
    }
};

}  // namespace detail

// Storage for tensor values and gradients.
using Buffer = std::vector<double, detail::AlignedAllocator<double>>;

namespace detail {

struct Node {
    Shape shape;
    Buffer value;
    Buffer grad;  // empty until needed
    bool requires_grad{false};
    uint64_t seq{0};
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

std::shared_ptr<Node> new_node(Shape shape);
bool& grad_mode();

}  // namespace detail

// Scoped switch that disables tape recording (evaluation passes).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

// Dense row-major float64 value with an optional gradient, forming a node
// in a reverse-mode tape. Copies of a Tensor are handles to the same node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int axis) const { return node_->shape[static_cast<size_t>(axis)]; }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
    bool requires_grad() const { return node_->requires_grad; }

    const Buffer& data() const { return node_->value; }
    // Direct write access for parameter updates and deserialization.
    // Must not be used on tensors that already appear inside a live graph.
    Buffer& mutable_data() { return node_->value; }

    bool has_grad() const { return !node_->grad.empty(); }
    const Buffer& grad() const;
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    double item() const;

    // Reverse pass from a scalar node. Accumulates into the grad buffers
    // of every reachable tensor with requires_grad set.
    void backward() const;

    detail::Node* node() const { return node_.get(); }
    std::shared_ptr<detail::Node> node_ptr() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n);

private:
    std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Operations. All are pure functions of their inputs (plus the seed where one
// is taken) and record backward closures when grad mode is on.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

// bias shape must be a suffix of x's shape; broadcast over the leading dims.
Tensor add_bias(const Tensor& x, const Tensor& bias);

// matmul(a, b): if b is rank 2, contracts a's last dim with b (a is treated
// as a stack of row vectors). Otherwise both must have equal rank >= 3 with
// identical leading dims, contracted pairwise over the last two dims.
Tensor matmul(const Tensor& a, const Tensor& b);
// matmul_nt(a, b) == matmul(a, transpose_last2(b)) without the copy.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor transpose_last2(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len);
Tensor concat(const std::vector<Tensor>& parts, int axis);

Tensor softmax(const Tensor& x, int axis);
// Last-dim layer norm, population variance, epsilon 1e-5 inside the root.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor gelu(const Tensor& x);  // tanh approximation

// Gather rows of table (V x d) at ids; output shape id_shape + {d}.
Tensor embedding_lookup(const Tensor& table, const std::vector<int32_t>& ids,
                        const Shape& id_shape);

Tensor mean_pool(const Tensor& x, int axis);
Tensor mean_all(const Tensor& x);

// Mean negative log-likelihood over rows whose target != ignore_index.
// All rows ignored -> 0 with zero gradient.
Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets,
                     int32_t ignore_index);

// logits (B, S, V), targets length B*S. Per example: mean over positions with
// target != ignore_index; then mean over the batch. Examples with no valid
// position contribute 0.
Tensor sequence_cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets,
                              int32_t ignore_index);

// dot(a,b) / (||a|| * ||b||), norms floored at 1e-12, result clamped to [-1, 1].
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// Normalize the last dim to unit L2 norm, denominator floored at eps.
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);

// y_ij = x_ij / (eps + sum_j x_ij) over the last dim.
Tensor mass_normalize(const Tensor& x, double eps);

// Identity forward, zero backward.
Tensor stop_gradient(const Tensor& x);

// Forward: exact one-hot of the argmax over `axis` (ties to the lowest
// index). Backward: identity into the soft input.
Tensor straight_through_onehot(const Tensor& soft, int axis);

// Forward only; first maximum wins. Result indexed in row-major order of the
// remaining dims.
std::vector<int64_t> argmax(const Tensor& x, int axis);

// i.i.d. standard Gumbel samples, deterministic for a given seed.
Tensor gumbel_noise(const Shape& shape, uint64_t seed);

// matmul(x, weight) + bias.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

}  // namespace tg
