#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "i3css/errors.hpp"

namespace i3css {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {
inline thread_local bool grad_mode = true;
}

// While alive, operations on this thread record no graph.
class NoGradGuard {
  public:
    NoGradGuard() : prev_(detail::grad_mode) { detail::grad_mode = false; }
    ~NoGradGuard() { detail::grad_mode = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode; }

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    bool leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

// Handle to a node of the reverse-mode graph. Copies share storage.
template <typename T>
class Tensor {
  public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
        for (auto e : shape)
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        if (shape.empty()) throw DimensionError("tensor rank must be at least 1");
        if (shape_numel(shape) != data.size())
            throw DimensionError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                                 " values, got " + std::to_string(data.size()));
        node_ = std::make_shared<Node<T>>();
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }
    static Tensor full(Shape shape, T value) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value));
    }
    static Tensor scalar(T v) { return Tensor({1}, {v}); }
    static Tensor vector(std::vector<T> v) {
        auto n = v.size();
        return Tensor({n}, std::move(v));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> v) {
        return Tensor({rows, cols}, std::move(v));
    }
    static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
        std::vector<T> v;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (auto& r : rows) {
            if (r.size() != cols) throw DimensionError("ragged matrix literal");
            v.insert(v.end(), r.begin(), r.end());
        }
        return Tensor({rows.size(), cols}, std::move(v));
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    // Rank-1 tensors behave as a single row in row-wise operations.
    std::size_t rows() const { return rank() == 1 ? 1 : node_->shape[0]; }
    std::size_t cols() const { return node_->shape.back(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T> to_vector() const { return node_->data; }

    bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> grad() { return node_->grad; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    // Allocates the accumulator if needed and fills it with zeros.
    void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }
    T at(std::size_t i) const { return node_->data.at(i); }
    T at(std::size_t r, std::size_t c) const { return node_->data.at(r * cols() + c); }

    // Copy of the values, cut off from the graph.
    Tensor detach() const { return Tensor(node_->shape, node_->data); }

    const char* op() const { return node_->op; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

  private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Tensor<T> record(Shape shape, std::vector<T> data, const char* op, std::vector<NodePtr<T>> parents,
                 std::function<void(Node<T>&)> bw) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool needs = grad_mode && std::any_of(parents.begin(), parents.end(),
                                          [](const NodePtr<T>& p) { return p->requires_grad; });
    if (needs) {
        node->requires_grad = true;
        node->leaf = false;
        node->parents = std::move(parents);
        node->backward = std::move(bw);
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

template <typename T>
void require_rank2(const Tensor<T>& a, const char* op) {
    if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& a, const char* op, Fwd fwd, Deriv deriv) {
    std::vector<T> out(a.numel());
    auto in = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
    return record<T>(a.shape(), std::move(out), op, {a.node()}, [deriv](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i) p.grad[i] += self.grad[i] * deriv(p.data[i], self.data[i]);
    });
}

// C[m x n] (+)= A[m x k] * B[k x n], with optional transposes given in storage terms.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            T av = a[i * k + p];
            if (av == T(0)) continue;
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x k] += G[m x n] * B^T where B is [k x n].
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T* brow = b + p * n;
            T acc = 0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            c[i * k + p] += acc;
        }
    }
}

// C[k x n] += A^T * G where A is [m x k], G is [m x n].
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            T av = a[i * k + p];
            if (av == T(0)) continue;
            T* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
        }
    }
}

}  // namespace detail

// Matrix product. A rank-1 left operand is treated as a single row and the
// result stays rank-1.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() > 2 || b.rank() != 2 || a.cols() != b.shape()[0])
        throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<T> out(m * n, T(0));
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    Shape s = a.rank() == 1 ? Shape{n} : Shape{m, n};
    return detail::record<T>(std::move(s), std::move(out), "matmul", {a.node(), b.node()},
                             [m, k, n](Node<T>& self) {
                                 auto& pa = *self.parents[0];
                                 auto& pb = *self.parents[1];
                                 if (pa.requires_grad) {
                                     pa.ensure_grad();
                                     detail::gemm_nt(self.grad.data(), pb.data.data(), pa.grad.data(), m, n, k);
                                 }
                                 if (pb.requires_grad) {
                                     pb.ensure_grad();
                                     detail::gemm_tn(pa.data.data(), self.grad.data(), pb.grad.data(), m, k, n);
                                 }
                             });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_rank2(a, "transpose");
    std::size_t r = a.rows(), c = a.cols();
    std::vector<T> out(r * c);
    auto in = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
    return detail::record<T>({c, r}, std::move(out), "transpose", {a.node()}, [r, c](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[j * r + i];
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::record<T>(a.shape(), std::move(out), "add", {a.node(), b.node()}, [](Node<T>& self) {
        for (auto& pp : self.parents) {
            if (!pp->requires_grad) continue;
            pp->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pp->grad[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::record<T>(a.shape(), std::move(out), "sub", {a.node(), b.node()}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        }
    });
}

// Elementwise (Hadamard) product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::record<T>(a.shape(), std::move(out), "mul", {a.node(), b.node()}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
        }
    });
}

// Matrix plus row vector, broadcast over rows. `a` may also be rank-1.
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() > 2 || b.numel() != a.cols() || (b.rank() == 2 && b.rows() != 1))
        throw DimensionError("add_row: cannot broadcast " + shape_str(b.shape()) + " over rows of " +
                             shape_str(a.shape()));
    std::size_t r = a.rows(), c = a.cols();
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.data()[i * c + j] + b.data()[j];
    return detail::record<T>(a.shape(), std::move(out), "add_row", {a.node(), b.node()}, [r, c](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) pb.grad[j] += self.grad[i * c + j];
        }
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    return detail::unary<T>(a, "add_scalar", [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    return detail::unary<T>(a, "scale", [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::unary<T>(
        a, "sigmoid",
        [](T x) { return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
    return detail::unary<T>(a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary<T>(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    return detail::unary<T>(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = 0;
    for (auto v : a.data()) s += v;
    return detail::record<T>({1}, {s}, "sum", {a.node()}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (auto& g : p.grad) g += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Sum of equally shaped tensors.
template <typename T>
Tensor<T> add_n(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw ContractError("add_n: empty list");
    std::vector<T> out(xs[0].numel(), T(0));
    std::vector<detail::NodePtr<T>> parents;
    for (auto& x : xs) {
        detail::require_same_shape(x, xs[0], "add_n");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += x.data()[i];
        parents.push_back(x.node());
    }
    return detail::record<T>(xs[0].shape(), std::move(out), "add_n", std::move(parents), [](Node<T>& self) {
        for (auto& pp : self.parents) {
            if (!pp->requires_grad) continue;
            pp->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pp->grad[i] += self.grad[i];
        }
    });
}

// Mean over all elements of the squared difference.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mse");
    T s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        T d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    T n = static_cast<T>(a.numel());
    return detail::record<T>({1}, {s / n}, "mse", {a.node(), b.node()}, [n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        T g = self.grad[0] * T(2) / n;
        for (std::size_t i = 0; i < pa.data.size(); ++i) {
            T d = pa.data[i] - pb.data[i];
            if (pa.requires_grad) {
                pa.ensure_grad();
                pa.grad[i] += g * d;
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                pb.grad[i] -= g * d;
            }
        }
    });
}

namespace detail {

template <typename T>
void softmax_row(const T* in, T* out, std::size_t n) {
    T mx = *std::max_element(in, in + n);
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = std::exp(in[j] - mx);
        s += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= s;
}

template <typename T>
void softmax_row_backward(const T* y, const T* g, T* gin, std::size_t n) {
    T dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
    for (std::size_t j = 0; j < n; ++j) gin[j] += y[j] * (g[j] - dot);
}

}  // namespace detail

// Softmax of a vector, or of each row of a matrix.
template <typename T>
Tensor<T> softmax(const Tensor<T>& v) {
    if (v.rank() > 2) throw DimensionError("softmax: expected rank 1 or 2, got " + shape_str(v.shape()));
    std::size_t r = v.rows(), c = v.cols();
    std::vector<T> out(v.numel());
    for (std::size_t i = 0; i < r; ++i) detail::softmax_row(v.data().data() + i * c, out.data() + i * c, c);
    return detail::record<T>(v.shape(), std::move(out), "softmax", {v.node()}, [r, c](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            detail::softmax_row_backward(self.data.data() + i * c, self.grad.data() + i * c, p.grad.data() + i * c, c);
    });
}

// Row i of a square score matrix is normalized over columns j < i only.
// Masked entries, and the whole of row 0, are exactly zero.
template <typename T>
Tensor<T> causal_softmax(const Tensor<T>& s) {
    detail::require_rank2(s, "causal_softmax");
    if (s.rows() != s.cols()) throw DimensionError("causal_softmax: expected a square matrix, got " + shape_str(s.shape()));
    std::size_t n = s.rows();
    std::vector<T> out(n * n, T(0));
    for (std::size_t i = 1; i < n; ++i) detail::softmax_row(s.data().data() + i * n, out.data() + i * n, i);
    return detail::record<T>(s.shape(), std::move(out), "causal_softmax", {s.node()}, [n](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 1; i < n; ++i)
            detail::softmax_row_backward(self.data.data() + i * n, self.grad.data() + i * n, p.grad.data() + i * n, i);
    });
}

inline constexpr double kCosineEps = 1e-8;

// u.v / (max(|u|, eps) * max(|v|, eps)). Zero vectors give 0.
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& u, const Tensor<T>& v) {
    detail::require_same_shape(u, v, "cosine_similarity");
    const T eps = static_cast<T>(kCosineEps);
    T dot = 0, uu = 0, vv = 0;
    for (std::size_t i = 0; i < u.numel(); ++i) {
        dot += u.data()[i] * v.data()[i];
        uu += u.data()[i] * u.data()[i];
        vv += v.data()[i] * v.data()[i];
    }
    T nu = std::sqrt(uu), nv = std::sqrt(vv);
    T du = std::max(nu, eps), dv = std::max(nv, eps);
    T c = dot / (du * dv);
    return detail::record<T>({1}, {c}, "cosine_similarity", {u.node(), v.node()},
                             [nu, nv, du, dv, c, eps](Node<T>& self) {
                                 auto& pu = *self.parents[0];
                                 auto& pv = *self.parents[1];
                                 T g = self.grad[0];
                                 if (pu.requires_grad) {
                                     pu.ensure_grad();
                                     for (std::size_t i = 0; i < pu.data.size(); ++i) {
                                         T d = pv.data[i] / (du * dv);
                                         if (nu > eps) d -= c * pu.data[i] / (nu * nu);
                                         pu.grad[i] += g * d;
                                     }
                                 }
                                 if (pv.requires_grad) {
                                     pv.ensure_grad();
                                     for (std::size_t i = 0; i < pv.data.size(); ++i) {
                                         T d = pu.data[i] / (du * dv);
                                         if (nv > eps) d -= c * pv.data[i] / (nv * nv);
                                         pv.grad[i] += g * d;
                                     }
                                 }
                             });
}

// Each row divided by max(|row|, eps); the product of two such matrices
// holds guarded cosine similarities.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& a, T eps = static_cast<T>(kCosineEps)) {
    if (a.rank() > 2) throw DimensionError("normalize_rows: expected rank 1 or 2, got " + shape_str(a.shape()));
    std::size_t r = a.rows(), c = a.cols();
    std::vector<T> out(a.numel());
    std::vector<T> norms(r);
    for (std::size_t i = 0; i < r; ++i) {
        T s = 0;
        for (std::size_t j = 0; j < c; ++j) s += a.data()[i * c + j] * a.data()[i * c + j];
        norms[i] = std::sqrt(s);
        T d = std::max(norms[i], eps);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.data()[i * c + j] / d;
    }
    return detail::record<T>(a.shape(), std::move(out), "normalize_rows", {a.node()},
                             [r, c, norms, eps](Node<T>& self) {
                                 auto& p = *self.parents[0];
                                 if (!p.requires_grad) return;
                                 p.ensure_grad();
                                 for (std::size_t i = 0; i < r; ++i) {
                                     const T* y = self.data.data() + i * c;
                                     const T* g = self.grad.data() + i * c;
                                     if (norms[i] > eps) {
                                         T dot = 0;
                                         for (std::size_t j = 0; j < c; ++j) dot += y[j] * g[j];
                                         for (std::size_t j = 0; j < c; ++j)
                                             p.grad[i * c + j] += (g[j] - y[j] * dot) / norms[i];
                                     } else {
                                         for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += g[j] / eps;
                                     }
                                 }
                             });
}

// Parameter-free layer normalization of each row.
template <typename T>
Tensor<T> layer_norm_rows(const Tensor<T>& a, T eps = T(1e-5)) {
    if (a.rank() > 2) throw DimensionError("layer_norm_rows: expected rank 1 or 2, got " + shape_str(a.shape()));
    std::size_t r = a.rows(), c = a.cols();
    std::vector<T> out(a.numel());
    std::vector<T> inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        const T* x = a.data().data() + i * c;
        T mu = 0;
        for (std::size_t j = 0; j < c; ++j) mu += x[j];
        mu /= static_cast<T>(c);
        T var = 0;
        for (std::size_t j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<T>(c);
        inv_std[i] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (x[j] - mu) * inv_std[i];
    }
    return detail::record<T>(a.shape(), std::move(out), "layer_norm_rows", {a.node()},
                             [r, c, inv_std](Node<T>& self) {
                                 auto& p = *self.parents[0];
                                 if (!p.requires_grad) return;
                                 p.ensure_grad();
                                 for (std::size_t i = 0; i < r; ++i) {
                                     const T* y = self.data.data() + i * c;
                                     const T* g = self.grad.data() + i * c;
                                     T gm = 0, gy = 0;
                                     for (std::size_t j = 0; j < c; ++j) {
                                         gm += g[j];
                                         gy += g[j] * y[j];
                                     }
                                     gm /= static_cast<T>(c);
                                     gy /= static_cast<T>(c);
                                     for (std::size_t j = 0; j < c; ++j)
                                         p.grad[i * c + j] += inv_std[i] * (g[j] - gm - y[j] * gy);
                                 }
                             });
}

// [A | B] for matrices with equal row counts.
template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() > 2 || b.rank() > 2 || a.rows() != b.rows())
        throw DimensionError("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::size_t r = a.rows(), ca = a.cols(), cb = b.cols(), c = ca + cb;
    std::vector<T> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        std::copy_n(a.data().data() + i * ca, ca, out.data() + i * c);
        std::copy_n(b.data().data() + i * cb, cb, out.data() + i * c + ca);
    }
    Shape s = a.rank() == 1 && b.rank() == 1 ? Shape{c} : Shape{r, c};
    return detail::record<T>(std::move(s), std::move(out), "concat_cols", {a.node(), b.node()},
                             [r, ca, cb, c](Node<T>& self) {
                                 auto& pa = *self.parents[0];
                                 auto& pb = *self.parents[1];
                                 if (pa.requires_grad) {
                                     pa.ensure_grad();
                                     for (std::size_t i = 0; i < r; ++i)
                                         for (std::size_t j = 0; j < ca; ++j) pa.grad[i * ca + j] += self.grad[i * c + j];
                                 }
                                 if (pb.requires_grad) {
                                     pb.ensure_grad();
                                     for (std::size_t i = 0; i < r; ++i)
                                         for (std::size_t j = 0; j < cb; ++j)
                                             pb.grad[i * cb + j] += self.grad[i * c + ca + j];
                                 }
                             });
}

// Stacks rows (rank-1 parts count as one row) into a matrix.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: empty list");
    std::size_t c = parts[0].cols(), r = 0;
    std::vector<detail::NodePtr<T>> parents;
    std::vector<std::size_t> offsets;
    for (auto& p : parts) {
        if (p.rank() > 2 || p.cols() != c)
            throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) + " vs " +
                                 shape_str(p.shape()));
        offsets.push_back(r * c);
        r += p.rows();
        parents.push_back(p.node());
    }
    std::vector<T> out;
    out.reserve(r * c);
    for (auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return detail::record<T>({r, c}, std::move(out), "concat_rows", std::move(parents), [offsets](Node<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = *self.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[offsets[k] + i];
        }
    });
}

// Rows [begin, end) as a matrix.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
    detail::require_rank2(a, "slice_rows");
    if (begin >= end || end > a.rows())
        throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") outside " + shape_str(a.shape()));
    std::size_t c = a.cols();
    std::vector<T> out(a.data().begin() + begin * c, a.data().begin() + end * c);
    return detail::record<T>({end - begin, c}, std::move(out), "slice_rows", {a.node()}, [begin, c](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[begin * c + i] += self.grad[i];
    });
}

// Row i of a matrix as a vector.
template <typename T>
Tensor<T> row(const Tensor<T>& a, std::size_t i) {
    if (a.rank() == 1) {
        if (i != 0) throw DimensionError("row: index " + std::to_string(i) + " outside " + shape_str(a.shape()));
        return a;
    }
    auto s = slice_rows(a, i, i + 1);
    std::size_t c = a.cols();
    return detail::record<T>({c}, s.to_vector(), "row", {s.node()}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t j = 0; j < self.grad.size(); ++j) p.grad[j] += self.grad[j];
    });
}

// Embedding lookup: result row i is table row ids[i]. Repeated ids scatter-add.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& ids) {
    detail::require_rank2(table, "gather_rows");
    if (ids.empty()) throw ContractError("gather_rows: empty id list");
    std::size_t c = table.cols();
    std::vector<T> out(ids.size() * c);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= table.rows())
            throw ContractError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                                std::to_string(table.rows()) + " rows");
        std::copy_n(table.data().data() + ids[i] * c, c, out.data() + i * c);
    }
    return detail::record<T>({ids.size(), c}, std::move(out), "gather_rows", {table.node()}, [ids, c](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) p.grad[ids[i] * c + j] += self.grad[i * c + j];
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " into " + shape_str(shape));
    return detail::record<T>(std::move(shape), a.to_vector(), "reshape", {a.node()}, [](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    });
}

// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
// interior gradients are recomputed from scratch each call.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: loss must be a scalar, got " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("undefined tensor")));
    auto root = loss.node();
    if (!root->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (auto* n : order) {
        if (n->leaf)
            n->ensure_grad();
        else
            n->grad.assign(n->data.size(), T(0));
    }
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if (!(*it)->leaf && (*it)->backward) (*it)->backward(**it);
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace i3css
