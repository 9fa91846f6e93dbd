#include "tg/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "tg/errors.hpp"
#include "tg/rng.hpp"

namespace tg {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;
using MapA = Eigen::Map<Eigen::ArrayXd>;
using CMapA = Eigen::Map<const Eigen::ArrayXd>;

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

namespace detail {

namespace {
uint64_t next_seq() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace

std::shared_ptr<Node> new_node(Shape shape) {
    auto n = std::make_shared<Node>();
    int64_t count = shape_numel(shape);
    if (count < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(count), 0.0);
    n->seq = next_seq();
    return n;
}

bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

using detail::Node;

namespace {

void check_shape(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

bool any_requires(std::initializer_list<const Tensor*> ts) {
    if (!grad_enabled()) return false;
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

// Decompose a shape around `axis` into (outer, len, inner) extents.
struct Lanes {
    int64_t outer, len, inner;
};

Lanes lanes_for(const Shape& s, int axis) {
    Lanes l{1, s[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) l.outer *= s[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) l.inner *= s[i];
    return l;
}

void check_axis(const Tensor& x, int axis, const char* op) {
    if (axis < 0 || axis >= x.rank())
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(x.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = detail::new_node(std::move(shape));
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = detail::new_node(std::move(shape));
    std::fill(n->value.begin(), n->value.end(), value);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    int64_t count = shape_numel(shape);
    if (static_cast<size_t>(count) != data.size())
        throw ShapeError("from_data: " + std::to_string(data.size()) +
                         " values for shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.assign(data.begin(), data.end());
    n->seq = detail::next_seq();
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

const Buffer& Tensor::grad() const {
    if (node_->grad.empty()) throw ShapeError("grad accessed before backward populated it");
    return node_->grad;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

void Tensor::backward() const {
    if (numel() != 1) throw ShapeError("backward() requires a scalar, got shape " + shape_str(shape()));
    if (!node_->requires_grad) return;

    // Gather the reachable grad-requiring subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    // Creation order is a topological order: parents always precede children.
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->seq > b->seq; });

    node_->ensure_grad();
    node_->grad[0] = 1.0;
    for (Node* n : order) {
        if (n->backward) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_shape(a.shape() == b.shape(),
                "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = detail::new_node(a.shape());
    CMapA av(a.data().data(), a.numel()), bv(b.data().data(), b.numel());
    MapA(out->value.data(), a.numel()) = av + bv;
    if (any_requires({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node_ptr(), b.node_ptr()};
        out->backward = [](Node& self) {
            CMapA g(self.grad.data(), static_cast<int64_t>(self.grad.size()));
            for (auto& p : self.parents) {
                if (!p->requires_grad) continue;
                p->ensure_grad();
                MapA(p->grad.data(), static_cast<int64_t>(p->grad.size())) += g;
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_shape(a.shape() == b.shape(),
                "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = detail::new_node(a.shape());
    CMapA av(a.data().data(), a.numel()), bv(b.data().data(), b.numel());
    MapA(out->value.data(), a.numel()) = av - bv;
    if (any_requires({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node_ptr(), b.node_ptr()};
        out->backward = [](Node& self) {
            CMapA g(self.grad.data(), static_cast<int64_t>(self.grad.size()));
            Node* pa = self.parents[0].get();
            Node* pb = self.parents[1].get();
            if (pa->requires_grad) {
                pa->ensure_grad();
                MapA(pa->grad.data(), static_cast<int64_t>(pa->grad.size())) += g;
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                MapA(pb->grad.data(), static_cast<int64_t>(pb->grad.size())) -= g;
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_shape(a.shape() == b.shape(),
                "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = detail::new_node(a.shape());
    CMapA av(a.data().data(), a.numel()), bv(b.data().data(), b.numel());
    MapA(out->value.data(), a.numel()) = av * bv;
    if (any_requires({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node_ptr(), b.node_ptr()};
        out->backward = [](Node& self) {
            CMapA g(self.grad.data(), static_cast<int64_t>(self.grad.size()));
            Node* pa = self.parents[0].get();
            Node* pb = self.parents[1].get();
            if (pa->requires_grad) {
                pa->ensure_grad();
                CMapA bv(pb->value.data(), static_cast<int64_t>(pb->value.size()));
                MapA(pa->grad.data(), static_cast<int64_t>(pa->grad.size())) += g * bv;
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                CMapA av(pa->value.data(), static_cast<int64_t>(pa->value.size()));
                MapA(pb->grad.data(), static_cast<int64_t>(pb->grad.size())) += g * av;
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor scale(const Tensor& a, double c) {
    auto out = detail::new_node(a.shape());
    CMapA av(a.data().data(), a.numel());
    MapA(out->value.data(), a.numel()) = av * c;
    if (any_requires({&a})) {
        out->requires_grad = true;
        out->parents = {a.node_ptr()};
        out->backward = [c](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            CMapA g(self.grad.data(), static_cast<int64_t>(self.grad.size()));
            MapA(p->grad.data(), static_cast<int64_t>(p->grad.size())) += g * c;
        };
    }
    return Tensor::wrap(out);
}

Tensor add_scalar(const Tensor& a, double c) {
    auto out = detail::new_node(a.shape());
    CMapA av(a.data().data(), a.numel());
    MapA(out->value.data(), a.numel()) = av + c;
    if (any_requires({&a})) {
        out->requires_grad = true;
        out->parents = {a.node_ptr()};
        out->backward = [](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            CMapA g(self.grad.data(), static_cast<int64_t>(self.grad.size()));
            MapA(p->grad.data(), static_cast<int64_t>(p->grad.size())) += g;
        };
    }
    return Tensor::wrap(out);
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    const Shape& xs = x.shape();
    const Shape& bs = bias.shape();
    check_shape(bs.size() <= xs.size() && !bs.empty(),
                "add_bias: bias shape " + shape_str(bs) + " vs input " + shape_str(xs));
    size_t off = xs.size() - bs.size();
    for (size_t i = 0; i < bs.size(); ++i)
        check_shape(xs[off + i] == bs[i], "add_bias: bias shape " + shape_str(bs) +
                                              " is not a suffix of " + shape_str(xs));
    int64_t bn = bias.numel();
    int64_t reps = x.numel() / std::max<int64_t>(bn, 1);
    auto out = detail::new_node(xs);
    const double* xp = x.data().data();
    const double* bp = bias.data().data();
    double* op = out->value.data();
    for (int64_t r = 0; r < reps; ++r) {
        CMapA xv(xp + r * bn, bn);
        MapA(op + r * bn, bn) = xv + CMapA(bp, bn);
    }
    if (any_requires({&x, &bias})) {
        out->requires_grad = true;
        out->parents = {x.node_ptr(), bias.node_ptr()};
        out->backward = [bn, reps](Node& self) {
            Node* px = self.parents[0].get();
            Node* pb = self.parents[1].get();
            if (px->requires_grad) {
                px->ensure_grad();
                CMapA g(self.grad.data(), static_cast<int64_t>(self.grad.size()));
                MapA(px->grad.data(), static_cast<int64_t>(px->grad.size())) += g;
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                MapA bg(pb->grad.data(), bn);
                for (int64_t r = 0; r < reps; ++r) bg += CMapA(self.grad.data() + r * bn, bn);
            }
        };
    }
    return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace {

enum class MulKind { RowsByMatrix, Batched };

MulKind classify_matmul(const Tensor& a, const Tensor& b, bool trans_b, const char* op) {
    if (b.rank() == 2 && a.rank() >= 2) {
        int64_t inner = a.shape().back();
        int64_t b_inner = trans_b ? b.dim(1) : b.dim(0);
        if (a.rank() == 2 || inner == b_inner) {
            check_shape(inner == b_inner, std::string(op) + ": inner dims disagree, " +
                                              shape_str(a.shape()) + " x " + shape_str(b.shape()));
            return MulKind::RowsByMatrix;
        }
    }
    check_shape(a.rank() == b.rank() && a.rank() >= 3,
                std::string(op) + ": incompatible ranks for shapes " + shape_str(a.shape()) +
                    " x " + shape_str(b.shape()));
    for (int i = 0; i + 2 < a.rank(); ++i)
        check_shape(a.dim(i) == b.dim(i), std::string(op) + ": leading dims disagree, " +
                                              shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t k_a = a.shape().back();
    int64_t k_b = trans_b ? b.shape().back() : b.dim(b.rank() - 2);
    check_shape(k_a == k_b, std::string(op) + ": inner dims disagree, " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
    return MulKind::Batched;
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, bool trans_b) {
    const char* op = trans_b ? "matmul_nt" : "matmul";
    MulKind kind = classify_matmul(a, b, trans_b, op);

    if (kind == MulKind::RowsByMatrix) {
        int64_t k = a.shape().back();
        int64_t n = trans_b ? b.dim(0) : b.dim(1);
        int64_t rows = a.numel() / k;
        Shape out_shape(a.shape().begin(), a.shape().end() - 1);
        out_shape.push_back(n);
        auto out = detail::new_node(out_shape);
        CMapM am(a.data().data(), rows, k);
        CMapM bm(b.data().data(), b.dim(0), b.dim(1));
        MapM om(out->value.data(), rows, n);
        if (trans_b)
            om.noalias() = am * bm.transpose();
        else
            om.noalias() = am * bm;
        if (any_requires({&a, &b})) {
            out->requires_grad = true;
            out->parents = {a.node_ptr(), b.node_ptr()};
            out->backward = [rows, k, n, trans_b](Node& self) {
                Node* pa = self.parents[0].get();
                Node* pb = self.parents[1].get();
                CMapM g(self.grad.data(), rows, n);
                CMapM bm(pb->value.data(), pb->shape[0], pb->shape[1]);
                CMapM am(pa->value.data(), rows, k);
                if (pa->requires_grad) {
                    pa->ensure_grad();
                    MapM ag(pa->grad.data(), rows, k);
                    if (trans_b)
                        ag.noalias() += g * bm;
                    else
                        ag.noalias() += g * bm.transpose();
                }
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    MapM bg(pb->grad.data(), pb->shape[0], pb->shape[1]);
                    if (trans_b)
                        bg.noalias() += g.transpose() * am;
                    else
                        bg.noalias() += am.transpose() * g;
                }
            };
        }
        return Tensor::wrap(out);
    }

    // Batched: a [*, m, k], b [*, k, n] (or [*, n, k] transposed).
    int r = a.rank();
    int64_t m = a.dim(r - 2);
    int64_t k = a.dim(r - 1);
    int64_t n = trans_b ? b.dim(r - 2) : b.dim(r - 1);
    int64_t batch = 1;
    for (int i = 0; i + 2 < r; ++i) batch *= a.dim(i);
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    auto out = detail::new_node(out_shape);
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    double* op_ = out->value.data();
    int64_t b_rows = trans_b ? n : k;
    int64_t b_cols = trans_b ? k : n;
    for (int64_t i = 0; i < batch; ++i) {
        CMapM am(ap + i * m * k, m, k);
        CMapM bm(bp + i * b_rows * b_cols, b_rows, b_cols);
        MapM om(op_ + i * m * n, m, n);
        if (trans_b)
            om.noalias() = am * bm.transpose();
        else
            om.noalias() = am * bm;
    }
    if (any_requires({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node_ptr(), b.node_ptr()};
        out->backward = [batch, m, k, n, b_rows, b_cols, trans_b](Node& self) {
            Node* pa = self.parents[0].get();
            Node* pb = self.parents[1].get();
            if (pa->requires_grad) pa->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            for (int64_t i = 0; i < batch; ++i) {
                CMapM g(self.grad.data() + i * m * n, m, n);
                CMapM am(pa->value.data() + i * m * k, m, k);
                CMapM bm(pb->value.data() + i * b_rows * b_cols, b_rows, b_cols);
                if (pa->requires_grad) {
                    MapM ag(pa->grad.data() + i * m * k, m, k);
                    if (trans_b)
                        ag.noalias() += g * bm;
                    else
                        ag.noalias() += g * bm.transpose();
                }
                if (pb->requires_grad) {
                    MapM bg(pb->grad.data() + i * b_rows * b_cols, b_rows, b_cols);
                    if (trans_b)
                        bg.noalias() += g.transpose() * am;
                    else
                        bg.noalias() += am.transpose() * g;
                }
            }
        };
    }
    return Tensor::wrap(out);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, true); }

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
    int r = x.rank();
    check_shape(static_cast<int>(axes.size()) == r, "permute: axes size != rank");
    std::vector<char> used(static_cast<size_t>(r), 0);
    for (int a : axes) {
        check_shape(a >= 0 && a < r && !used[static_cast<size_t>(a)], "permute: invalid axes");
        used[static_cast<size_t>(a)] = 1;
    }
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.dim(axes[static_cast<size_t>(i)]);

    std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * x.dim(i + 1);
    // stride in the input for a step along output dim d
    std::vector<int64_t> step(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) step[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];

    auto run = [r, out_shape, step](const double* src, double* dst, bool accumulate) {
        int64_t n = shape_numel(out_shape);
        if (n == 0) return;
        std::vector<int64_t> idx(static_cast<size_t>(r), 0);
        int64_t off = 0;
        for (int64_t o = 0;; ++o) {
            if (accumulate)
                dst[off] += src[o];
            else
                dst[o] = src[off];
            if (o + 1 == n) break;
            for (int d = r - 1; d >= 0; --d) {
                idx[static_cast<size_t>(d)]++;
                off += step[static_cast<size_t>(d)];
                if (idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
                idx[static_cast<size_t>(d)] = 0;
                off -= out_shape[static_cast<size_t>(d)] * step[static_cast<size_t>(d)];
            }
        }
    };

    auto out = detail::new_node(out_shape);
    run(x.data().data(), out->value.data(), false);
    if (any_requires({&x})) {
        out->requires_grad = true;
        out->parents = {x.node_ptr()};
        out->backward = [run](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            // walk output order again, accumulating into input offsets
            run(self.grad.data(), p->grad.data(), true);
        };
    }
    return Tensor::wrap(out);
}

Tensor transpose_last2(const Tensor& x) {
    check_shape(x.rank() >= 2, "transpose_last2: rank must be >= 2, got " + shape_str(x.shape()));
    std::vector<int> axes(static_cast<size_t>(x.rank()));
    for (int i = 0; i < x.rank(); ++i) axes[static_cast<size_t>(i)] = i;
    std::swap(axes[static_cast<size_t>(x.rank() - 1)], axes[static_cast<size_t>(x.rank() - 2)]);
    return permute(x, axes);
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    check_shape(shape_numel(new_shape) == x.numel(),
                "reshape: " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
    auto out = detail::new_node(new_shape);
    out->value = x.data();
    if (any_requires({&x})) {
        out->requires_grad = true;
        out->parents = {x.node_ptr()};
        out->backward = [](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            CMapA g(self.grad.data(), static_cast<int64_t>(self.grad.size()));
            MapA(p->grad.data(), static_cast<int64_t>(p->grad.size())) += g;
        };
    }
    return Tensor::wrap(out);
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
    check_axis(x, axis, "slice");
    int64_t extent = x.dim(axis);
    check_shape(start >= 0 && len >= 0 && start + len <= extent,
                "slice: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                    ") out of range for shape " + shape_str(x.shape()));
    Lanes l = lanes_for(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    auto out = detail::new_node(out_shape);
    const double* xp = x.data().data();
    double* op = out->value.data();
    for (int64_t o = 0; o < l.outer; ++o) {
        const double* src = xp + (o * extent + start) * l.inner;
        std::copy(src, src + len * l.inner, op + o * len * l.inner);
    }
    if (any_requires({&x})) {
        out->requires_grad = true;
        out->parents = {x.node_ptr()};
        out->backward = [l, extent, start, len](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            for (int64_t o = 0; o < l.outer; ++o) {
                const double* g = self.grad.data() + o * len * l.inner;
                double* dst = p->grad.data() + (o * extent + start) * l.inner;
                for (int64_t i = 0; i < len * l.inner; ++i) dst[i] += g[i];
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    check_shape(!parts.empty(), "concat: no inputs");
    const Shape& first = parts[0].shape();
    check_axis(parts[0], axis, "concat");
    int64_t total = 0;
    for (const Tensor& p : parts) {
        check_shape(p.rank() == parts[0].rank(), "concat: rank mismatch");
        for (int i = 0; i < p.rank(); ++i)
            check_shape(i == axis || p.dim(i) == first[static_cast<size_t>(i)],
                        "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(first));
        total += p.dim(axis);
    }
    Shape out_shape = first;
    out_shape[static_cast<size_t>(axis)] = total;
    auto out = detail::new_node(out_shape);
    Lanes l = lanes_for(out_shape, axis);
    double* op = out->value.data();
    std::vector<int64_t> extents;
    int64_t pos = 0;
    for (const Tensor& p : parts) {
        int64_t e = p.dim(axis);
        extents.push_back(e);
        const double* src = p.data().data();
        for (int64_t o = 0; o < l.outer; ++o) {
            std::copy(src + o * e * l.inner, src + (o + 1) * e * l.inner,
                      op + (o * total + pos) * l.inner);
        }
        pos += e;
    }
    bool needs = false;
    for (const Tensor& p : parts) needs = needs || p.requires_grad();
    if (grad_enabled() && needs) {
        out->requires_grad = true;
        for (const Tensor& p : parts) out->parents.push_back(p.node_ptr());
        out->backward = [l, total, extents](Node& self) {
            int64_t pos = 0;
            for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                Node* p = self.parents[pi].get();
                int64_t e = extents[pi];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int64_t o = 0; o < l.outer; ++o) {
                        const double* g = self.grad.data() + (o * total + pos) * l.inner;
                        double* dst = p->grad.data() + o * e * l.inner;
                        for (int64_t i = 0; i < e * l.inner; ++i) dst[i] += g[i];
                    }
                }
                pos += e;
            }
        };
    }
    return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalizations
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
    check_axis(x, axis, "softmax");
    Lanes l = lanes_for(x.shape(), axis);
    auto out = detail::new_node(x.shape());
    const double* xp = x.data().data();
    double* op = out->value.data();
    for (int64_t o = 0; o < l.outer; ++o) {
        for (int64_t ii = 0; ii < l.inner; ++ii) {
            int64_t base = o * l.len * l.inner + ii;
            double mx = xp[base];
            for (int64_t j = 1; j < l.len; ++j) mx = std::max(mx, xp[base + j * l.inner]);
            double sum = 0.0;
            for (int64_t j = 0; j < l.len; ++j) {
                double e = std::exp(xp[base + j * l.inner] - mx);
                op[base + j * l.inner] = e;
                sum += e;
            }
            for (int64_t j = 0; j < l.len; ++j) op[base + j * l.inner] /= sum;
        }
    }
    if (any_requires({&x})) {
        out->requires_grad = true;
        out->parents = {x.node_ptr()};
        out->backward = [l](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            const double* y = self.value.data();
            const double* g = self.grad.data();
            double* pg = p->grad.data();
            for (int64_t o = 0; o < l.outer; ++o) {
                for (int64_t ii = 0; ii < l.inner; ++ii) {
                    int64_t base = o * l.len * l.inner + ii;
                    double dot = 0.0;
                    for (int64_t j = 0; j < l.len; ++j)
                        dot += g[base + j * l.inner] * y[base + j * l.inner];
                    for (int64_t j = 0; j < l.len; ++j) {
                        int64_t at = base + j * l.inner;
                        pg[at] += y[at] * (g[at] - dot);
                    }
                }
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    check_shape(x.rank() >= 1, "layer_norm: rank must be >= 1");
    int64_t n = x.shape().back();
    check_shape(n > 0, "layer_norm: zero-length last dim in shape " + shape_str(x.shape()));
    check_shape(gain.numel() == n && bias.numel() == n,
                "layer_norm: gain/bias length must match last dim " + std::to_string(n));
    constexpr double kEps = 1e-5;
    int64_t rows = x.numel() / n;
    auto out = detail::new_node(x.shape());
    std::vector<double> mean(static_cast<size_t>(rows)), inv(static_cast<size_t>(rows));
    const double* xp = x.data().data();
    const double* gp = gain.data().data();
    const double* bp = bias.data().data();
    double* op = out->value.data();
    for (int64_t r = 0; r < rows; ++r) {
        CMapA row(xp + r * n, n);
        double mu = row.mean();
        double var = (row - mu).square().mean();
        double iv = 1.0 / std::sqrt(var + kEps);
        mean[static_cast<size_t>(r)] = mu;
        inv[static_cast<size_t>(r)] = iv;
        MapA(op + r * n, n) = ((row - mu) * iv) * CMapA(gp, n) + CMapA(bp, n);
    }
    if (any_requires({&x, &gain, &bias})) {
        out->requires_grad = true;
        out->parents = {x.node_ptr(), gain.node_ptr(), bias.node_ptr()};
        out->backward = [n, rows, mean = std::move(mean), inv = std::move(inv)](Node& self) {
            Node* px = self.parents[0].get();
            Node* pg = self.parents[1].get();
            Node* pb = self.parents[2].get();
            const double* xp = px->value.data();
            const double* gp = pg->value.data();
            const double* g = self.grad.data();
            if (px->requires_grad) px->ensure_grad();
            if (pg->requires_grad) pg->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            Eigen::ArrayXd xhat(n), dxhat(n);
            for (int64_t r = 0; r < rows; ++r) {
                double mu = mean[static_cast<size_t>(r)];
                double iv = inv[static_cast<size_t>(r)];
                CMapA row(xp + r * n, n);
                CMapA grow(g + r * n, n);
                xhat = (row - mu) * iv;
                if (pb->requires_grad) MapA(pb->grad.data(), n) += grow;
                if (pg->requires_grad) MapA(pg->grad.data(), n) += grow * xhat;
                if (px->requires_grad) {
                    dxhat = grow * CMapA(gp, n);
                    double m1 = dxhat.mean();
                    double m2 = (dxhat * xhat).mean();
                    MapA(px->grad.data() + r * n, n) += iv * (dxhat - m1 - xhat * m2);
                }
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor gelu(const Tensor& x) {
    constexpr double kSqrt2OverPi = 0.7978845608028654;
    constexpr double kCubic = 0.044715;
    auto out = detail::new_node(x.shape());
    const double* xp = x.data().data();
    double* op = out->value.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        double v = xp[i];
        double t = std::tanh(kSqrt2OverPi * (v + kCubic * v * v * v));
        op[i] = 0.5 * v * (1.0 + t);
    }
    if (any_requires({&x})) {
        out->requires_grad = true;
        out->parents = {x.node_ptr()};
        out->backward = [n](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            const double* xp = p->value.data();
            const double* g = self.grad.data();
            double* pg = p->grad.data();
            for (int64_t i = 0; i < n; ++i) {
                double v = xp[i];
                double u = kSqrt2OverPi * (v + kCubic * v * v * v);
                double t = std::tanh(u);
                double sech2 = 1.0 - t * t;
                double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
                pg[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du);
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int32_t>& ids,
                        const Shape& id_shape) {
    check_shape(table.rank() == 2, "embedding_lookup: table must be rank 2");
    check_shape(shape_numel(id_shape) == static_cast<int64_t>(ids.size()),
                "embedding_lookup: ids length does not match id_shape " + shape_str(id_shape));
    int64_t vocab = table.dim(0);
    int64_t d = table.dim(1);
    for (int32_t id : ids)
        check_shape(id >= 0 && id < vocab,
                    "embedding_lookup: id " + std::to_string(id) + " out of range [0, " +
                        std::to_string(vocab) + ")");
    Shape out_shape = id_shape;
    out_shape.push_back(d);
    auto out = detail::new_node(out_shape);
    const double* tp = table.data().data();
    double* op = out->value.data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(tp + static_cast<int64_t>(ids[i]) * d, tp + (static_cast<int64_t>(ids[i]) + 1) * d,
                  op + static_cast<int64_t>(i) * d);
    if (any_requires({&table})) {
        out->requires_grad = true;
        out->parents = {table.node_ptr()};
        out->backward = [ids, d](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            const double* g = self.grad.data();
            double* pg = p->grad.data();
            for (size_t i = 0; i < ids.size(); ++i) {
                double* dst = pg + static_cast<int64_t>(ids[i]) * d;
                const double* src = g + static_cast<int64_t>(i) * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor mean_pool(const Tensor& x, int axis) {
    check_axis(x, axis, "mean_pool");
    Lanes l = lanes_for(x.shape(), axis);
    check_shape(l.len > 0, "mean_pool: empty axis");
    Shape out_shape;
    for (int i = 0; i < x.rank(); ++i)
        if (i != axis) out_shape.push_back(x.dim(i));
    auto out = detail::new_node(out_shape);
    const double* xp = x.data().data();
    double* op = out->value.data();
    double invn = 1.0 / static_cast<double>(l.len);
    for (int64_t o = 0; o < l.outer; ++o) {
        for (int64_t ii = 0; ii < l.inner; ++ii) {
            double s = 0.0;
            int64_t base = o * l.len * l.inner + ii;
            for (int64_t j = 0; j < l.len; ++j) s += xp[base + j * l.inner];
            op[o * l.inner + ii] = s * invn;
        }
    }
    if (any_requires({&x})) {
        out->requires_grad = true;
        out->parents = {x.node_ptr()};
        out->backward = [l, invn](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            const double* g = self.grad.data();
            double* pg = p->grad.data();
            for (int64_t o = 0; o < l.outer; ++o) {
                for (int64_t ii = 0; ii < l.inner; ++ii) {
                    double gv = g[o * l.inner + ii] * invn;
                    int64_t base = o * l.len * l.inner + ii;
                    for (int64_t j = 0; j < l.len; ++j) pg[base + j * l.inner] += gv;
                }
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor mean_all(const Tensor& x) {
    int64_t n = x.numel();
    check_shape(n > 0, "mean_all: empty tensor");
    auto out = detail::new_node({});
    out->value[0] = CMapA(x.data().data(), n).mean();
    if (any_requires({&x})) {
        out->requires_grad = true;
        out->parents = {x.node_ptr()};
        out->backward = [n](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            double gv = self.grad[0] / static_cast<double>(n);
            MapA(p->grad.data(), n) += gv;
        };
    }
    return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// Losses and similarities
// ---------------------------------------------------------------------------

namespace {

// Shared masked softmax-CE kernel. weights[i] is the contribution factor of
// row i to the (scalar) loss; 0 marks ignored rows.
Tensor weighted_cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets,
                              std::vector<double> weights, int64_t rows, int64_t vocab) {
    const double* xp = logits.data().data();
    double loss = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        if (weights[static_cast<size_t>(r)] == 0.0) continue;
        int32_t t = targets[static_cast<size_t>(r)];
        CMapA row(xp + r * vocab, vocab);
        double mx = row.maxCoeff();
        double lse = mx + std::log((row - mx).exp().sum());
        loss += weights[static_cast<size_t>(r)] * (lse - row[t]);
    }
    auto out = detail::new_node({});
    out->value[0] = loss;
    if (any_requires({&logits})) {
        out->requires_grad = true;
        out->parents = {logits.node_ptr()};
        out->backward = [targets, weights = std::move(weights), rows, vocab](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            double g = self.grad[0];
            const double* xp = p->value.data();
            double* pg = p->grad.data();
            Eigen::ArrayXd prob(vocab);
            for (int64_t r = 0; r < rows; ++r) {
                double w = weights[static_cast<size_t>(r)];
                if (w == 0.0) continue;
                CMapA row(xp + r * vocab, vocab);
                double mx = row.maxCoeff();
                prob = (row - mx).exp();
                prob /= prob.sum();
                prob[targets[static_cast<size_t>(r)]] -= 1.0;
                MapA(pg + r * vocab, vocab) += (g * w) * prob;
            }
        };
    }
    return Tensor::wrap(out);
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets,
                     int32_t ignore_index) {
    check_shape(logits.rank() == 2, "cross_entropy: logits must be rank 2, got " +
                                        shape_str(logits.shape()));
    int64_t rows = logits.dim(0);
    int64_t vocab = logits.dim(1);
    check_shape(static_cast<int64_t>(targets.size()) == rows,
                "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                    std::to_string(rows) + " rows");
    int64_t valid = 0;
    for (int32_t t : targets) {
        if (t == ignore_index) continue;
        check_shape(t >= 0 && t < vocab,
                    "cross_entropy: target " + std::to_string(t) + " out of range [0, " +
                        std::to_string(vocab) + ")");
        ++valid;
    }
    std::vector<double> weights(targets.size(), 0.0);
    if (valid > 0) {
        double w = 1.0 / static_cast<double>(valid);
        for (size_t i = 0; i < targets.size(); ++i)
            if (targets[i] != ignore_index) weights[i] = w;
    }
    return weighted_cross_entropy(logits, targets, std::move(weights), rows, vocab);
}

Tensor sequence_cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets,
                              int32_t ignore_index) {
    check_shape(logits.rank() == 3, "sequence_cross_entropy: logits must be rank 3, got " +
                                        shape_str(logits.shape()));
    int64_t batch = logits.dim(0);
    int64_t steps = logits.dim(1);
    int64_t vocab = logits.dim(2);
    check_shape(static_cast<int64_t>(targets.size()) == batch * steps,
                "sequence_cross_entropy: targets length mismatch");
    std::vector<double> weights(targets.size(), 0.0);
    for (int64_t b = 0; b < batch; ++b) {
        int64_t len = 0;
        for (int64_t s = 0; s < steps; ++s) {
            int32_t t = targets[static_cast<size_t>(b * steps + s)];
            if (t == ignore_index) continue;
            check_shape(t >= 0 && t < vocab, "sequence_cross_entropy: target out of range");
            ++len;
        }
        if (len == 0) continue;
        double w = 1.0 / (static_cast<double>(batch) * static_cast<double>(len));
        for (int64_t s = 0; s < steps; ++s)
            if (targets[static_cast<size_t>(b * steps + s)] != ignore_index)
                weights[static_cast<size_t>(b * steps + s)] = w;
    }
    return weighted_cross_entropy(logits, targets, std::move(weights), batch * steps, vocab);
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    check_shape(a.shape() == b.shape(), "cosine_similarity: shape mismatch " +
                                            shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    constexpr double kFloor = 1e-12;
    int64_t n = a.numel();
    CMapA av(a.data().data(), n), bv(b.data().data(), n);
    double dot = (av * bv).sum();
    double norm_a = std::sqrt(av.square().sum());
    double norm_b = std::sqrt(bv.square().sum());
    double na = std::max(norm_a, kFloor);
    double nb = std::max(norm_b, kFloor);
    double raw = dot / (na * nb);
    auto out = detail::new_node({});
    out->value[0] = std::clamp(raw, -1.0, 1.0);
    if (any_requires({&a, &b})) {
        out->requires_grad = true;
        out->parents = {a.node_ptr(), b.node_ptr()};
        bool floored_a = norm_a < kFloor;
        bool floored_b = norm_b < kFloor;
        out->backward = [n, na, nb, raw, floored_a, floored_b](Node& self) {
            Node* pa = self.parents[0].get();
            Node* pb = self.parents[1].get();
            double g = self.grad[0];
            CMapA av(pa->value.data(), n), bv(pb->value.data(), n);
            if (pa->requires_grad) {
                pa->ensure_grad();
                MapA ag(pa->grad.data(), n);
                ag += g * (bv / (na * nb));
                if (!floored_a) ag -= g * (raw / (na * na)) * av;
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                MapA bg(pb->grad.data(), n);
                bg += g * (av / (na * nb));
                if (!floored_b) bg -= g * (raw / (nb * nb)) * bv;
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor l2_normalize(const Tensor& x, double eps) {
    check_shape(x.rank() >= 1, "l2_normalize: rank must be >= 1");
    int64_t n = x.shape().back();
    int64_t rows = x.numel() / n;
    auto out = detail::new_node(x.shape());
    std::vector<double> denom(static_cast<size_t>(rows));
    std::vector<char> floored(static_cast<size_t>(rows));
    const double* xp = x.data().data();
    double* op = out->value.data();
    for (int64_t r = 0; r < rows; ++r) {
        CMapA row(xp + r * n, n);
        double norm = std::sqrt(row.square().sum());
        double dn = std::max(norm, eps);
        denom[static_cast<size_t>(r)] = dn;
        floored[static_cast<size_t>(r)] = norm < eps;
        MapA(op + r * n, n) = row / dn;
    }
    if (any_requires({&x})) {
        out->requires_grad = true;
        out->parents = {x.node_ptr()};
        out->backward = [n, rows, denom = std::move(denom), floored = std::move(floored)](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            const double* g = self.grad.data();
            const double* y = self.value.data();
            double* pg = p->grad.data();
            for (int64_t r = 0; r < rows; ++r) {
                CMapA grow(g + r * n, n);
                CMapA yrow(y + r * n, n);
                double dn = denom[static_cast<size_t>(r)];
                if (floored[static_cast<size_t>(r)]) {
                    MapA(pg + r * n, n) += grow / dn;
                } else {
                    double dot = (grow * yrow).sum();
                    MapA(pg + r * n, n) += (grow - yrow * dot) / dn;
                }
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor mass_normalize(const Tensor& x, double eps) {
    check_shape(x.rank() >= 1, "mass_normalize: rank must be >= 1");
    int64_t n = x.shape().back();
    int64_t rows = x.numel() / n;
    auto out = detail::new_node(x.shape());
    std::vector<double> denom(static_cast<size_t>(rows));
    const double* xp = x.data().data();
    double* op = out->value.data();
    for (int64_t r = 0; r < rows; ++r) {
        CMapA row(xp + r * n, n);
        double dn = eps + row.sum();
        denom[static_cast<size_t>(r)] = dn;
        MapA(op + r * n, n) = row / dn;
    }
    if (any_requires({&x})) {
        out->requires_grad = true;
        out->parents = {x.node_ptr()};
        out->backward = [n, rows, denom = std::move(denom)](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            const double* g = self.grad.data();
            const double* y = self.value.data();
            double* pg = p->grad.data();
            for (int64_t r = 0; r < rows; ++r) {
                CMapA grow(g + r * n, n);
                CMapA yrow(y + r * n, n);
                double dot = (grow * yrow).sum();
                MapA(pg + r * n, n) += (grow - dot) / denom[static_cast<size_t>(r)];
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor stop_gradient(const Tensor& x) {
    auto out = detail::new_node(x.shape());
    out->value = x.data();
    return Tensor::wrap(out);  // constant: no parents, no grad
}

Tensor straight_through_onehot(const Tensor& soft, int axis) {
    check_axis(soft, axis, "straight_through_onehot");
    Lanes l = lanes_for(soft.shape(), axis);
    auto out = detail::new_node(soft.shape());
    const double* xp = soft.data().data();
    double* op = out->value.data();
    for (int64_t o = 0; o < l.outer; ++o) {
        for (int64_t ii = 0; ii < l.inner; ++ii) {
            int64_t base = o * l.len * l.inner + ii;
            int64_t best = 0;
            double bv = xp[base];
            for (int64_t j = 1; j < l.len; ++j) {
                double v = xp[base + j * l.inner];
                if (v > bv) {
                    bv = v;
                    best = j;
                }
            }
            op[base + best * l.inner] = 1.0;
        }
    }
    if (any_requires({&soft})) {
        out->requires_grad = true;
        out->parents = {soft.node_ptr()};
        out->backward = [](Node& self) {
            Node* p = self.parents[0].get();
            p->ensure_grad();
            CMapA g(self.grad.data(), static_cast<int64_t>(self.grad.size()));
            MapA(p->grad.data(), static_cast<int64_t>(p->grad.size())) += g;
        };
    }
    return Tensor::wrap(out);
}

std::vector<int64_t> argmax(const Tensor& x, int axis) {
    check_axis(x, axis, "argmax");
    Lanes l = lanes_for(x.shape(), axis);
    std::vector<int64_t> out(static_cast<size_t>(l.outer * l.inner));
    const double* xp = x.data().data();
    for (int64_t o = 0; o < l.outer; ++o) {
        for (int64_t ii = 0; ii < l.inner; ++ii) {
            int64_t base = o * l.len * l.inner + ii;
            int64_t best = 0;
            double bv = xp[base];
            for (int64_t j = 1; j < l.len; ++j) {
                double v = xp[base + j * l.inner];
                if (v > bv) {
                    bv = v;
                    best = j;
                }
            }
            out[static_cast<size_t>(o * l.inner + ii)] = best;
        }
    }
    return out;
}

Tensor gumbel_noise(const Shape& shape, uint64_t seed) {
    auto out = detail::new_node(shape);
    Rng rng(seed);
    for (double& v : out->value) v = rng.gumbel();
    return Tensor::wrap(out);
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return add_bias(matmul(x, weight), bias);
}

}  // namespace tg
