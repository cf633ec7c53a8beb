#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tkgqa/errors.hpp"
#include "tkgqa/tensor.hpp"

namespace tkgqa {

// Define-by-run computation graph. Nodes are created by the forward ops
// below and hold the cached output plus a closure that scatters gradients
// to the inputs. Graphs are rebuilt every training step; parameter leaves
// persist across steps and accumulate gradients until zeroed.
struct Node;
using NodeRef = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation, same shape as value
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<NodeRef> inputs;
    std::function<void()> backprop;

    const Tensor& val() const { return value; }
};

inline NodeRef constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->op = "const";
    return n;
}

inline NodeRef leaf(Tensor t, bool requires_grad = true) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = requires_grad;
    return n;
}

// Shape-check helper; the message expression is only evaluated on failure.
#define TKGQA_REQUIRE(cond, msg) \
    do {                                           \
        if (!(cond)) throw ::tkgqa::ShapeError(msg); \
    } while (0)

namespace detail {

inline void ensure_grad(Node& n) {
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape);
}

// Accumulate into an input's gradient buffer; constants are skipped.
inline Tensor* grad_sink(const NodeRef& n) {
    if (!n->requires_grad) return nullptr;
    ensure_grad(*n);
    return &n->grad;
}

inline NodeRef make(Tensor value, const char* op, std::vector<NodeRef> inputs,
                    std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = op;
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in->requires_grad;
    n->requires_grad = rg;
    if (rg) {
        n->inputs = std::move(inputs);
        Node* self = n.get();
        n->backprop = [self, f = std::move(backprop)]() { f(*self); };
    }
    return n;
}

}  // namespace detail

// ---- elementwise and broadcast ops ----

inline NodeRef add(const NodeRef& a, const NodeRef& b) {
    TKGQA_REQUIRE(a->value.same_shape(b->value),
                    "add: shapes " + a->value.shape_str() + " vs " + b->value.shape_str());
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b->value.data[i];
    return detail::make(std::move(out), "add", {a, b}, [a, b](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
        if (Tensor* g = detail::grad_sink(b))
            for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
    });
}

inline NodeRef sub(const NodeRef& a, const NodeRef& b) {
    TKGQA_REQUIRE(a->value.same_shape(b->value),
                    "sub: shapes " + a->value.shape_str() + " vs " + b->value.shape_str());
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b->value.data[i];
    return detail::make(std::move(out), "sub", {a, b}, [a, b](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
        if (Tensor* g = detail::grad_sink(b))
            for (std::size_t i = 0; i < g->size(); ++i) g->data[i] -= self.grad.data[i];
    });
}

inline NodeRef mul(const NodeRef& a, const NodeRef& b) {
    TKGQA_REQUIRE(a->value.same_shape(b->value),
                    "mul: shapes " + a->value.shape_str() + " vs " + b->value.shape_str());
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b->value.data[i];
    return detail::make(std::move(out), "mul", {a, b}, [a, b](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i)
                g->data[i] += self.grad.data[i] * b->value.data[i];
        if (Tensor* g = detail::grad_sink(b))
            for (std::size_t i = 0; i < g->size(); ++i)
                g->data[i] += self.grad.data[i] * a->value.data[i];
    });
}

inline NodeRef scale(const NodeRef& a, double c) {
    Tensor out = a->value;
    for (double& v : out.data) v *= c;
    return detail::make(std::move(out), "scale", {a}, [a, c](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += c * self.grad.data[i];
    });
}

inline NodeRef add_const(const NodeRef& a, double c) {
    Tensor out = a->value;
    for (double& v : out.data) v += c;
    return detail::make(std::move(out), "add_const", {a}, [a](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
    });
}

// Multiply a tensor by a scalar node (e.g. a trainable mixing weight).
inline NodeRef mul_scalar(const NodeRef& a, const NodeRef& s) {
    TKGQA_REQUIRE(s->value.is_scalar(),
                    "mul_scalar: scale must be scalar, got " + s->value.shape_str());
    double sv = s->value.data[0];
    Tensor out = a->value;
    for (double& v : out.data) v *= sv;
    return detail::make(std::move(out), "mul_scalar", {a, s}, [a, s, sv](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += sv * self.grad.data[i];
        if (Tensor* g = detail::grad_sink(s)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                acc += self.grad.data[i] * a->value.data[i];
            g->data[0] += acc;
        }
    });
}

// M (n x d) + v (d) broadcast over rows.
inline NodeRef add_row(const NodeRef& m, const NodeRef& v) {
    TKGQA_REQUIRE(m->value.rank() == 2 && v->value.rank() == 1 &&
                        m->value.shape[1] == v->value.shape[0],
                    "add_row: " + m->value.shape_str() + " vs " + v->value.shape_str());
    Tensor out = m->value;
    std::size_t n = out.shape[0], d = out.shape[1];
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.data[i * d + j] += v->value.data[j];
    return detail::make(std::move(out), "add_row", {m, v}, [m, v, n, d](Node& self) {
        if (Tensor* g = detail::grad_sink(m))
            for (std::size_t i = 0; i < n * d; ++i) g->data[i] += self.grad.data[i];
        if (Tensor* g = detail::grad_sink(v))
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) g->data[j] += self.grad.data[i * d + j];
    });
}

// M (n x d) * v (d) broadcast over rows.
inline NodeRef mul_row(const NodeRef& m, const NodeRef& v) {
    TKGQA_REQUIRE(m->value.rank() == 2 && v->value.rank() == 1 &&
                        m->value.shape[1] == v->value.shape[0],
                    "mul_row: " + m->value.shape_str() + " vs " + v->value.shape_str());
    Tensor out = m->value;
    std::size_t n = out.shape[0], d = out.shape[1];
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.data[i * d + j] *= v->value.data[j];
    return detail::make(std::move(out), "mul_row", {m, v}, [m, v, n, d](Node& self) {
        if (Tensor* g = detail::grad_sink(m))
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    g->data[i * d + j] += self.grad.data[i * d + j] * v->value.data[j];
        if (Tensor* g = detail::grad_sink(v))
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    g->data[j] += self.grad.data[i * d + j] * m->value.data[i * d + j];
    });
}

// ---- matrix ops ----

// matmul supports (m,k)@(k,n), (m,k)@(k) -> (m), (k)@(k,n) -> (n).
inline NodeRef matmul(const NodeRef& a, const NodeRef& b) {
    const Tensor& A = a->value;
    const Tensor& B = b->value;
    auto fail = [&] {
        throw ShapeError("matmul: shapes " + A.shape_str() + " and " + B.shape_str() +
                         " do not conform");
    };
    if (A.rank() == 2 && B.rank() == 2) {
        if (A.shape[1] != B.shape[0]) fail();
        std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
        Tensor out({m, n});
        for (std::size_t i = 0; i < m; ++i) {
            const double* arow = &A.data[i * k];
            double* orow = &out.data[i * n];
            for (std::size_t p = 0; p < k; ++p) {
                double av = arow[p];
                if (av == 0.0) continue;
                const double* brow = &B.data[p * n];
                for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
        return detail::make(std::move(out), "matmul", {a, b}, [a, b, m, k, n](Node& self) {
            const Tensor& G = self.grad;
            if (Tensor* ga = detail::grad_sink(a)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        double gv = G.data[i * n + j];
                        if (gv == 0.0) continue;
                        const double* brow = &b->value.data[0] + j;
                        for (std::size_t p = 0; p < k; ++p)
                            ga->data[i * k + p] += gv * brow[p * n];
                    }
            }
            if (Tensor* gb = detail::grad_sink(b)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double av = a->value.data[i * k + p];
                        if (av == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j)
                            gb->data[p * n + j] += av * G.data[i * n + j];
                    }
            }
        });
    }
    if (A.rank() == 2 && B.rank() == 1) {
        if (A.shape[1] != B.shape[0]) fail();
        std::size_t m = A.shape[0], k = A.shape[1];
        Tensor out({m});
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += A.data[i * k + p] * B.data[p];
            out.data[i] = acc;
        }
        return detail::make(std::move(out), "matvec", {a, b}, [a, b, m, k](Node& self) {
            if (Tensor* ga = detail::grad_sink(a))
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p)
                        ga->data[i * k + p] += self.grad.data[i] * b->value.data[p];
            if (Tensor* gb = detail::grad_sink(b))
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p)
                        gb->data[p] += self.grad.data[i] * a->value.data[i * k + p];
        });
    }
    if (A.rank() == 1 && B.rank() == 2) {
        if (A.shape[0] != B.shape[0]) fail();
        std::size_t k = A.shape[0], n = B.shape[1];
        Tensor out({n});
        for (std::size_t p = 0; p < k; ++p) {
            double av = A.data[p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out.data[j] += av * B.data[p * n + j];
        }
        return detail::make(std::move(out), "vecmat", {a, b}, [a, b, k, n](Node& self) {
            if (Tensor* ga = detail::grad_sink(a))
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t j = 0; j < n; ++j)
                        ga->data[p] += self.grad.data[j] * b->value.data[p * n + j];
            if (Tensor* gb = detail::grad_sink(b))
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t j = 0; j < n; ++j)
                        gb->data[p * n + j] += a->value.data[p] * self.grad.data[j];
        });
    }
    fail();
    return nullptr;
}

inline NodeRef transpose(const NodeRef& a) {
    TKGQA_REQUIRE(a->value.rank() == 2, "transpose: need rank-2, got " + a->value.shape_str());
    std::size_t n = a->value.shape[0], d = a->value.shape[1];
    Tensor out({d, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.data[j * n + i] = a->value.data[i * d + j];
    return detail::make(std::move(out), "transpose", {a}, [a, n, d](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    g->data[i * d + j] += self.grad.data[j * n + i];
    });
}

inline NodeRef dot(const NodeRef& a, const NodeRef& b) {
    TKGQA_REQUIRE(a->value.rank() == 1 && b->value.rank() == 1 &&
                        a->value.shape[0] == b->value.shape[0],
                    "dot: shapes " + a->value.shape_str() + " vs " + b->value.shape_str());
    double acc = 0.0;
    for (std::size_t i = 0; i < a->value.size(); ++i) acc += a->value.data[i] * b->value.data[i];
    return detail::make(Tensor::scalar(acc), "dot", {a, b}, [a, b](Node& self) {
        double gv = self.grad.data[0];
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += gv * b->value.data[i];
        if (Tensor* g = detail::grad_sink(b))
            for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += gv * a->value.data[i];
    });
}

// ---- structural ops ----

inline NodeRef reshape(const NodeRef& a, std::vector<std::size_t> shape) {
    TKGQA_REQUIRE(Tensor::count(shape) == a->value.size(),
                    "reshape: " + a->value.shape_str() + " to incompatible " +
                        Tensor(shape).shape_str());
    Tensor out(std::move(shape), a->value.data);
    return detail::make(std::move(out), "reshape", {a}, [a](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
    });
}

inline NodeRef concat(const std::vector<NodeRef>& parts, int axis) {
    TKGQA_REQUIRE(!parts.empty(), "concat: empty input list");
    std::size_t rank = parts[0]->value.rank();
    for (const auto& p : parts)
        TKGQA_REQUIRE(p->value.rank() == rank, "concat: mixed ranks");
    std::vector<NodeRef> ins = parts;
    if (rank == 1) {
        TKGQA_REQUIRE(axis == 0, "concat: rank-1 tensors concatenate along axis 0");
        std::size_t total = 0;
        for (const auto& p : parts) total += p->value.shape[0];
        Tensor out({total});
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::copy(p->value.data.begin(), p->value.data.end(), out.data.begin() + off);
            off += p->value.shape[0];
        }
        return detail::make(std::move(out), "concat", std::move(ins), [parts](Node& self) {
            std::size_t off = 0;
            for (const auto& p : parts) {
                if (Tensor* g = detail::grad_sink(p))
                    for (std::size_t i = 0; i < p->value.size(); ++i)
                        g->data[i] += self.grad.data[off + i];
                off += p->value.size();
            }
        });
    }
    TKGQA_REQUIRE(rank == 2 && (axis == 0 || axis == 1), "concat: unsupported rank/axis");
    if (axis == 0) {
        std::size_t cols = parts[0]->value.shape[1], rows = 0;
        for (const auto& p : parts) {
            TKGQA_REQUIRE(p->value.shape[1] == cols,
                            "concat axis 0: column mismatch " + p->value.shape_str());
            rows += p->value.shape[0];
        }
        Tensor out({rows, cols});
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::copy(p->value.data.begin(), p->value.data.end(), out.data.begin() + off);
            off += p->value.size();
        }
        return detail::make(std::move(out), "concat", std::move(ins), [parts](Node& self) {
            std::size_t off = 0;
            for (const auto& p : parts) {
                if (Tensor* g = detail::grad_sink(p))
                    for (std::size_t i = 0; i < p->value.size(); ++i)
                        g->data[i] += self.grad.data[off + i];
                off += p->value.size();
            }
        });
    }
    std::size_t rows = parts[0]->value.shape[0], cols = 0;
    for (const auto& p : parts) {
        TKGQA_REQUIRE(p->value.shape[0] == rows,
                        "concat axis 1: row mismatch " + p->value.shape_str());
        cols += p->value.shape[1];
    }
    Tensor out({rows, cols});
    std::size_t coff = 0;
    for (const auto& p : parts) {
        std::size_t pc = p->value.shape[1];
        for (std::size_t i = 0; i < rows; ++i)
            std::copy(&p->value.data[i * pc], &p->value.data[i * pc] + pc,
                      &out.data[i * cols + coff]);
        coff += pc;
    }
    return detail::make(std::move(out), "concat", std::move(ins), [parts, rows, cols](Node& self) {
        std::size_t coff = 0;
        for (const auto& p : parts) {
            std::size_t pc = p->value.shape[1];
            if (Tensor* g = detail::grad_sink(p))
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < pc; ++j)
                        g->data[i * pc + j] += self.grad.data[i * cols + coff + j];
            coff += pc;
        }
    });
}

inline NodeRef stack_rows(const std::vector<NodeRef>& rows_in) {
    TKGQA_REQUIRE(!rows_in.empty(), "stack_rows: empty input list");
    std::size_t d = rows_in[0]->value.shape[0];
    for (const auto& r : rows_in)
        TKGQA_REQUIRE(r->value.rank() == 1 && r->value.shape[0] == d,
                        "stack_rows: row shape mismatch " + r->value.shape_str());
    Tensor out({rows_in.size(), d});
    for (std::size_t i = 0; i < rows_in.size(); ++i)
        std::copy(rows_in[i]->value.data.begin(), rows_in[i]->value.data.end(),
                  out.data.begin() + i * d);
    std::vector<NodeRef> ins = rows_in;
    return detail::make(std::move(out), "stack_rows", std::move(ins), [rows_in, d](Node& self) {
        for (std::size_t i = 0; i < rows_in.size(); ++i)
            if (Tensor* g = detail::grad_sink(rows_in[i]))
                for (std::size_t j = 0; j < d; ++j) g->data[j] += self.grad.data[i * d + j];
    });
}

// Gather rows of a matrix; duplicate indices accumulate gradient.
inline NodeRef rows(const NodeRef& m, std::vector<std::size_t> idx) {
    TKGQA_REQUIRE(m->value.rank() == 2, "rows: need rank-2, got " + m->value.shape_str());
    std::size_t d = m->value.shape[1];
    for (std::size_t i : idx)
        TKGQA_REQUIRE(i < m->value.shape[0],
                        "rows: index " + std::to_string(i) + " out of range for " +
                            m->value.shape_str());
    Tensor out({idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy(&m->value.data[idx[r] * d], &m->value.data[idx[r] * d] + d,
                  &out.data[r * d]);
    return detail::make(std::move(out), "rows", {m}, [m, idx = std::move(idx), d](Node& self) {
        if (Tensor* g = detail::grad_sink(m))
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < d; ++j)
                    g->data[idx[r] * d + j] += self.grad.data[r * d + j];
    });
}

inline NodeRef row(const NodeRef& m, std::size_t i) {
    TKGQA_REQUIRE(m->value.rank() == 2 && i < m->value.shape[0],
                    "row: index " + std::to_string(i) + " for " + m->value.shape_str());
    std::size_t d = m->value.shape[1];
    Tensor out({d});
    std::copy(&m->value.data[i * d], &m->value.data[i * d] + d, out.data.begin());
    return detail::make(std::move(out), "row", {m}, [m, i, d](Node& self) {
        if (Tensor* g = detail::grad_sink(m))
            for (std::size_t j = 0; j < d; ++j) g->data[i * d + j] += self.grad.data[j];
    });
}

// Contiguous column slice [c0, c1).
inline NodeRef slice_cols(const NodeRef& a, std::size_t c0, std::size_t c1) {
    const Tensor& A = a->value;
    TKGQA_REQUIRE(c0 < c1, "slice_cols: empty range");
    if (A.rank() == 1) {
        TKGQA_REQUIRE(c1 <= A.shape[0], "slice_cols: range beyond " + A.shape_str());
        Tensor out({c1 - c0});
        std::copy(&A.data[c0], &A.data[c1], out.data.begin());
        return detail::make(std::move(out), "slice", {a}, [a, c0, c1](Node& self) {
            if (Tensor* g = detail::grad_sink(a))
                for (std::size_t i = c0; i < c1; ++i) g->data[i] += self.grad.data[i - c0];
        });
    }
    TKGQA_REQUIRE(A.rank() == 2 && c1 <= A.shape[1],
                    "slice_cols: range beyond " + A.shape_str());
    std::size_t n = A.shape[0], d = A.shape[1], w = c1 - c0;
    Tensor out({n, w});
    for (std::size_t i = 0; i < n; ++i)
        std::copy(&A.data[i * d + c0], &A.data[i * d + c1], &out.data[i * w]);
    return detail::make(std::move(out), "slice", {a}, [a, c0, n, d, w](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    g->data[i * d + c0 + j] += self.grad.data[i * w + j];
    });
}

// out[r] = M[r, idx[r]]; used to pull gold-class log-probabilities.
inline NodeRef pick(const NodeRef& m, std::vector<std::size_t> idx) {
    TKGQA_REQUIRE(m->value.rank() == 2 && idx.size() == m->value.shape[0],
                    "pick: need one index per row of " + m->value.shape_str());
    std::size_t d = m->value.shape[1];
    Tensor out({idx.size()});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        TKGQA_REQUIRE(idx[r] < d, "pick: column index out of range");
        out.data[r] = m->value.data[r * d + idx[r]];
    }
    return detail::make(std::move(out), "pick", {m}, [m, idx = std::move(idx), d](Node& self) {
        if (Tensor* g = detail::grad_sink(m))
            for (std::size_t r = 0; r < idx.size(); ++r)
                g->data[r * d + idx[r]] += self.grad.data[r];
    });
}

// ---- nonlinearities ----

inline NodeRef relu(const NodeRef& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return detail::make(std::move(out), "relu", {a}, [a](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i)
                if (a->value.data[i] > 0.0) g->data[i] += self.grad.data[i];
    });
}

inline NodeRef tanh(const NodeRef& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = std::tanh(v);
    auto n = detail::make(std::move(out), "tanh", {a}, [a](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i) {
                double t = self.value.data[i];
                g->data[i] += self.grad.data[i] * (1.0 - t * t);
            }
    });
    return n;
}

inline NodeRef sigmoid(const NodeRef& a) {
    Tensor out = a->value;
    for (double& v : out.data) {
        if (v >= 0.0) {
            v = 1.0 / (1.0 + std::exp(-v));
        } else {
            double e = std::exp(v);
            v = e / (1.0 + e);
        }
    }
    return detail::make(std::move(out), "sigmoid", {a}, [a](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i) {
                double s = self.value.data[i];
                g->data[i] += self.grad.data[i] * s * (1.0 - s);
            }
    });
}

inline NodeRef log(const NodeRef& a) {
    Tensor out = a->value;
    for (double& v : out.data) {
        if (v <= 0.0) throw NumericError("log: non-positive input " + std::to_string(v));
        v = std::log(v);
    }
    return detail::make(std::move(out), "log", {a}, [a](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i)
                g->data[i] += self.grad.data[i] / a->value.data[i];
    });
}

// log(1 + exp(x)), overflow-safe.
inline NodeRef softplus(const NodeRef& a) {
    Tensor out = a->value;
    for (double& v : out.data) v = (v > 0.0 ? v : 0.0) + std::log1p(std::exp(-std::abs(v)));
    return detail::make(std::move(out), "softplus", {a}, [a](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i) {
                double x = a->value.data[i];
                double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                    : std::exp(x) / (1.0 + std::exp(x));
                g->data[i] += self.grad.data[i] * s;
            }
    });
}

// Elementwise x^p on positive inputs.
inline NodeRef pow_elem(const NodeRef& a, double p) {
    Tensor out = a->value;
    for (double& v : out.data) {
        if (v < 0.0) throw NumericError("pow_elem: negative base " + std::to_string(v));
        v = std::pow(v, p);
    }
    return detail::make(std::move(out), "pow", {a}, [a, p](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i)
                g->data[i] += self.grad.data[i] * p * std::pow(a->value.data[i], p - 1.0);
    });
}

// ---- softmax family ----

namespace detail {
inline void softmax_row(const double* x, double* p, std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i]);
    if (mx == -std::numeric_limits<double>::infinity())
        throw NumericError("softmax: all entries are -inf in one row");
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = std::exp(x[i] - mx);
        sum += p[i];
    }
    for (std::size_t i = 0; i < n; ++i) p[i] /= sum;
}
}  // namespace detail

// Softmax over the last axis (per row for matrices). -inf entries get
// exactly zero probability, which is how edge masks are realized.
inline NodeRef row_softmax(const NodeRef& a) {
    const Tensor& A = a->value;
    TKGQA_REQUIRE(A.rank() == 1 || A.rank() == 2,
                    "row_softmax: need rank 1 or 2, got " + A.shape_str());
    std::size_t n = A.rank() == 2 ? A.shape[0] : 1;
    std::size_t d = A.rank() == 2 ? A.shape[1] : A.shape[0];
    Tensor out(A.shape);
    for (std::size_t i = 0; i < n; ++i)
        detail::softmax_row(&A.data[i * d], &out.data[i * d], d);
    return detail::make(std::move(out), "row_softmax", {a}, [a, n, d](Node& self) {
        if (Tensor* g = detail::grad_sink(a)) {
            for (std::size_t i = 0; i < n; ++i) {
                const double* p = &self.value.data[i * d];
                const double* dy = &self.grad.data[i * d];
                double inner = 0.0;
                for (std::size_t j = 0; j < d; ++j) inner += dy[j] * p[j];
                for (std::size_t j = 0; j < d; ++j)
                    g->data[i * d + j] += p[j] * (dy[j] - inner);
            }
        }
    });
}

// Fused log-softmax keeps cross-entropy numerically stable.
inline NodeRef log_row_softmax(const NodeRef& a) {
    const Tensor& A = a->value;
    TKGQA_REQUIRE(A.rank() == 1 || A.rank() == 2,
                    "log_row_softmax: need rank 1 or 2, got " + A.shape_str());
    std::size_t n = A.rank() == 2 ? A.shape[0] : 1;
    std::size_t d = A.rank() == 2 ? A.shape[1] : A.shape[0];
    Tensor out(A.shape);
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = &A.data[i * d];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < d; ++j) mx = std::max(mx, x[j]);
        if (!std::isfinite(mx))
            throw NumericError("log_row_softmax: non-finite row maximum");
        double sum = 0.0;
        for (std::size_t j = 0; j < d; ++j) sum += std::exp(x[j] - mx);
        double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < d; ++j) out.data[i * d + j] = x[j] - lse;
    }
    return detail::make(std::move(out), "log_row_softmax", {a}, [a, n, d](Node& self) {
        if (Tensor* g = detail::grad_sink(a)) {
            for (std::size_t i = 0; i < n; ++i) {
                const double* lp = &self.value.data[i * d];
                const double* dy = &self.grad.data[i * d];
                double dsum = 0.0;
                for (std::size_t j = 0; j < d; ++j) dsum += dy[j];
                for (std::size_t j = 0; j < d; ++j)
                    g->data[i * d + j] += dy[j] - std::exp(lp[j]) * dsum;
            }
        }
    });
}

// out[i] = mask[i] != 0 ? value : x[i]. Gradient flows only through the
// unmasked entries.
inline NodeRef masked_fill(const NodeRef& a, const Tensor& mask, double value) {
    TKGQA_REQUIRE(a->value.same_shape(mask), "masked_fill: mask shape " + mask.shape_str() +
                                                 " vs " + a->value.shape_str());
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (mask.data[i] != 0.0) out.data[i] = value;
    return detail::make(std::move(out), "masked_fill", {a}, [a, mask](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i)
                if (mask.data[i] == 0.0) g->data[i] += self.grad.data[i];
    });
}

// ---- reductions ----

inline NodeRef sum_all(const NodeRef& a) {
    double acc = 0.0;
    for (double v : a->value.data) acc += v;
    return detail::make(Tensor::scalar(acc), "sum_all", {a}, [a](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[0];
    });
}

inline NodeRef mean_all(const NodeRef& a) {
    double acc = 0.0;
    for (double v : a->value.data) acc += v;
    double inv = 1.0 / static_cast<double>(a->value.size());
    return detail::make(Tensor::scalar(acc * inv), "mean_all", {a}, [a, inv](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[0] * inv;
    });
}

// axis 0 collapses rows (result length = cols), axis 1 collapses columns.
inline NodeRef sum_axis(const NodeRef& a, int axis) {
    const Tensor& A = a->value;
    TKGQA_REQUIRE(A.rank() == 2 && (axis == 0 || axis == 1),
                    "sum_axis: need rank-2, got " + A.shape_str());
    std::size_t n = A.shape[0], d = A.shape[1];
    if (axis == 0) {
        Tensor out({d});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) out.data[j] += A.data[i * d + j];
        return detail::make(std::move(out), "sum_axis0", {a}, [a, n, d](Node& self) {
            if (Tensor* g = detail::grad_sink(a))
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        g->data[i * d + j] += self.grad.data[j];
        });
    }
    Tensor out({n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.data[i] += A.data[i * d + j];
    return detail::make(std::move(out), "sum_axis1", {a}, [a, n, d](Node& self) {
        if (Tensor* g = detail::grad_sink(a))
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) g->data[i * d + j] += self.grad.data[i];
    });
}

inline NodeRef mean_axis(const NodeRef& a, int axis) {
    const Tensor& A = a->value;
    TKGQA_REQUIRE(A.rank() == 2 && (axis == 0 || axis == 1),
                    "mean_axis: need rank-2, got " + A.shape_str());
    double inv = 1.0 / static_cast<double>(axis == 0 ? A.shape[0] : A.shape[1]);
    return scale(sum_axis(a, axis), inv);
}

// ---- backward pass ----

namespace detail {
inline void topo_visit(Node* n, std::unordered_set<Node*>& seen, std::vector<Node*>& order) {
    // Iterative DFS post-order; recursion depth would scale with graph size.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(n, 0);
    seen.insert(n);
    while (!stack.empty()) {
        auto& [cur, next] = stack.back();
        if (next < cur->inputs.size()) {
            Node* child = cur->inputs[next++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(cur);
            stack.pop_back();
        }
    }
}
}  // namespace detail

// Reverse-mode sweep from a scalar loss. Gradients accumulate (sum) into
// every requires_grad node reachable from the loss.
inline void backward(const NodeRef& loss) {
    if (!loss->value.is_scalar())
        throw ShapeError("backward: loss must be scalar, got " + loss->value.shape_str());
    if (!loss->requires_grad) return;
    std::unordered_set<Node*> seen;
    std::vector<Node*> order;
    detail::topo_visit(loss.get(), seen, order);
    detail::ensure_grad(*loss);
    loss->grad.data[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad.size() == n->value.size()) n->backprop();
    }
}

}  // namespace tkgqa
