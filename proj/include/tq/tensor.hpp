#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tq/error.hpp"
#include "tq/rng.hpp"
#include "tq/util.hpp"

namespace tq {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// ------------------------------------------------------------------ graph
struct TensorData;
using TensorPtr = std::shared_ptr<TensorData>;

// One node of the define-by-run graph. A node without backward_fn is a leaf
// (parameter or constant). Gradients accumulate on leaves; node-local grads
// of interior nodes are reset at the start of each backward() call.
struct TensorData {
    Shape shape;
    std::vector<float> values;
    std::vector<float> grad;  // sized lazily; same shape as values
    bool requires_grad = false;
    std::vector<TensorPtr> parents;
    std::function<void(TensorData&)> backward_fn;
    const char* op = "leaf";

    // Row-granularity bookkeeping so optimizers can update embedding-style
    // parameters sparsely. Dense writers set grad_rows_dense.
    bool grad_rows_dense = false;
    std::vector<int> grad_rows;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.f);
    }
    void reset_grad() {
        grad.assign(values.size(), 0.f);
    }
    void note_dense() { grad_rows_dense = true; }
    void note_row(int r) { grad_rows.push_back(r); }
    void clear_grad_marks() {
        grad_rows_dense = false;
        grad_rows.clear();
    }
};

class Tensor {
public:
    TensorPtr d;

    Tensor() = default;
    explicit Tensor(TensorPtr p) : d(std::move(p)) {}
    Tensor(Shape shape, std::vector<float> vals, bool requires_grad = false) {
        if (int64_t(vals.size()) != numel(shape))
            throw usage_error("tensor: " + std::to_string(vals.size()) + " values for shape " + shape_str(shape));
        d = std::make_shared<TensorData>();
        d->shape = std::move(shape);
        d->values = std::move(vals);
        d->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<float> v(size_t(numel(shape)), 0.f);
        return Tensor(std::move(shape), std::move(v), requires_grad);
    }
    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    bool defined() const { return bool(d); }
    const Shape& shape() const { return d->shape; }
    int dim(int i) const { return d->shape[size_t(i)]; }
    int rows() const { return d->shape[0]; }
    int cols() const { return d->shape[1]; }
    int64_t size() const { return int64_t(d->values.size()); }
    bool requires_grad() const { return d->requires_grad; }

    std::vector<float>& vals() { return d->values; }
    const std::vector<float>& vals() const { return d->values; }
    float item() const {
        if (d->values.size() != 1) throw usage_error("item: tensor is not scalar " + shape_str(d->shape));
        return d->values[0];
    }
    std::vector<float>& grad() {
        d->ensure_grad();
        return d->grad;
    }
};

// Builds an op node. Parents are recorded (and a backward fn kept) only when
// some parent needs gradients, so constant subgraphs carry no history.
inline Tensor make_node(Shape shape, std::vector<float> vals, std::initializer_list<Tensor> parents,
                        std::function<void(TensorData&)> bwd, const char* op) {
    Tensor out(std::move(shape), std::move(vals), false);
    bool req = false;
    for (const Tensor& p : parents)
        if (p.defined() && p.d->requires_grad) req = true;
    if (req) {
        out.d->requires_grad = true;
        for (const Tensor& p : parents) out.d->parents.push_back(p.d);
        out.d->backward_fn = std::move(bwd);
        out.d->op = op;
    }
    return out;
}

// ------------------------------------------------------------------ kernels
// Raw accumulate-into kernels; C must be zeroed by the caller.
inline void mm_nn(const float* A, const float* B, float* C, int n, int m, int p) {
    for (int i = 0; i < n; ++i) {
        const float* a = A + size_t(i) * size_t(m);
        float* c = C + size_t(i) * size_t(p);
        for (int k = 0; k < m; ++k) {
            float av = a[k];
            const float* b = B + size_t(k) * size_t(p);
            for (int j = 0; j < p; ++j) c[j] += av * b[j];
        }
    }
}

// C[m x p] += A^T B with A [n x m], B [n x p].
inline void mm_tn(const float* A, const float* B, float* C, int n, int m, int p) {
    for (int i = 0; i < n; ++i) {
        const float* a = A + size_t(i) * size_t(m);
        const float* b = B + size_t(i) * size_t(p);
        for (int k = 0; k < m; ++k) {
            float av = a[k];
            float* c = C + size_t(k) * size_t(p);
            for (int j = 0; j < p; ++j) c[j] += av * b[j];
        }
    }
}

inline void transpose(const float* A, float* AT, int n, int m) {
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) AT[size_t(j) * size_t(n) + size_t(i)] = A[size_t(i) * size_t(m) + size_t(j)];
}

// C[n x p] += A B^T with A [n x m], B [p x m]. Goes through a transposed
// copy of B so the inner loops stay unit-stride.
inline void mm_nt(const float* A, const float* B, float* C, int n, int m, int p) {
    thread_local std::vector<float> scratch;
    scratch.resize(size_t(m) * size_t(p));
    transpose(B, scratch.data(), p, m);
    mm_nn(A, scratch.data(), C, n, m, p);
}

// ------------------------------------------------------------------ sparse
// Immutable CSR matrix. Participates in the graph only as a constant operand.
struct SparseMatrix {
    int rows = 0, cols = 0;
    std::vector<int64_t> row_ptr;  // size rows+1
    std::vector<int> col;
    std::vector<float> val;

    int64_t nnz() const { return int64_t(col.size()); }

    static SparseMatrix from_rows(int rows, int cols,
                                  const std::vector<std::vector<std::pair<int, float>>>& entries) {
        SparseMatrix s;
        s.rows = rows;
        s.cols = cols;
        s.row_ptr.assign(size_t(rows) + 1, 0);
        int64_t total = 0;
        for (int i = 0; i < rows; ++i) {
            total += int64_t(entries[size_t(i)].size());
            s.row_ptr[size_t(i) + 1] = total;
        }
        s.col.reserve(size_t(total));
        s.val.reserve(size_t(total));
        for (int i = 0; i < rows; ++i) {
            for (auto& [j, v] : entries[size_t(i)]) {
                if (j < 0 || j >= cols) throw data_error("sparse: column index out of range");
                s.col.push_back(j);
                s.val.push_back(v);
            }
        }
        return s;
    }

    std::vector<float> dense() const {
        std::vector<float> out(size_t(rows) * size_t(cols), 0.f);
        for (int i = 0; i < rows; ++i)
            for (int64_t k = row_ptr[size_t(i)]; k < row_ptr[size_t(i) + 1]; ++k)
                out[size_t(i) * size_t(cols) + size_t(col[size_t(k)])] += val[size_t(k)];
        return out;
    }
};

// ------------------------------------------------------------------ backward
inline void backward(const Tensor& loss) {
    if (!loss.defined() || numel(loss.shape()) != 1)
        throw usage_error("backward: loss must be a scalar tensor");
    if (!loss.d->requires_grad) return;

    // Iterative post-order DFS over parents; reverse gives topological order.
    std::vector<TensorData*> topo;
    std::unordered_set<TensorData*> seen;
    struct Frame {
        TensorData* n;
        size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.d.get()});
    seen.insert(loss.d.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            TensorData* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p});
            }
        } else {
            topo.push_back(f.n);
            stack.pop_back();
        }
    }

    // Interior node grads are transient per call; leaf grads accumulate.
    for (TensorData* n : topo)
        if (n->backward_fn) n->reset_grad();
    loss.d->ensure_grad();
    loss.d->grad[0] += 1.f;

    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ------------------------------------------------------------------ ops
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw usage_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<float> v(a.vals().size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.vals()[i] + b.vals()[i];
    auto pa = a.d, pb = b.d;
    return make_node(a.shape(), std::move(v), {a, b},
                     [pa, pb](TensorData& self) {
                         if (pa->requires_grad) {
                             pa->ensure_grad();
                             for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
                             pa->note_dense();
                         }
                         if (pb->requires_grad) {
                             pb->ensure_grad();
                             for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
                             pb->note_dense();
                         }
                     },
                     "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<float> v(a.vals().size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.vals()[i] - b.vals()[i];
    auto pa = a.d, pb = b.d;
    return make_node(a.shape(), std::move(v), {a, b},
                     [pa, pb](TensorData& self) {
                         if (pa->requires_grad) {
                             pa->ensure_grad();
                             for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
                             pa->note_dense();
                         }
                         if (pb->requires_grad) {
                             pb->ensure_grad();
                             for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
                             pb->note_dense();
                         }
                     },
                     "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<float> v(a.vals().size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.vals()[i] * b.vals()[i];
    auto pa = a.d, pb = b.d;
    return make_node(a.shape(), std::move(v), {a, b},
                     [pa, pb](TensorData& self) {
                         if (pa->requires_grad) {
                             pa->ensure_grad();
                             for (size_t i = 0; i < self.grad.size(); ++i)
                                 pa->grad[i] += self.grad[i] * pb->values[i];
                             pa->note_dense();
                         }
                         if (pb->requires_grad) {
                             pb->ensure_grad();
                             for (size_t i = 0; i < self.grad.size(); ++i)
                                 pb->grad[i] += self.grad[i] * pa->values[i];
                             pb->note_dense();
                         }
                     },
                     "mul");
}

inline Tensor scalar_mul(const Tensor& a, float c) {
    std::vector<float> v(a.vals().size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.vals()[i] * c;
    auto pa = a.d;
    return make_node(a.shape(), std::move(v), {a},
                     [pa, c](TensorData& self) {
                         pa->ensure_grad();
                         for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * c;
                         pa->note_dense();
                     },
                     "scalar_mul");
}

// Element-wise division by a scalar. Kept as a division (not multiplication
// by reciprocal) so the integer runtime reproduces the same bits.
inline Tensor scalar_div(const Tensor& a, float c) {
    std::vector<float> v(a.vals().size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.vals()[i] / c;
    auto pa = a.d;
    return make_node(a.shape(), std::move(v), {a},
                     [pa, c](TensorData& self) {
                         pa->ensure_grad();
                         for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] / c;
                         pa->note_dense();
                     },
                     "scalar_div");
}

// x [n x m] + row vector b [m], broadcast over rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    if (x.shape().size() != 2 || b.shape().size() != 1 || x.cols() != b.dim(0))
        throw usage_error("add_rowvec: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
    int n = x.rows(), m = x.cols();
    std::vector<float> v(x.vals().size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            v[size_t(i) * size_t(m) + size_t(j)] = x.vals()[size_t(i) * size_t(m) + size_t(j)] + b.vals()[size_t(j)];
    auto px = x.d, pb = b.d;
    return make_node(x.shape(), std::move(v), {x, b},
                     [px, pb, n, m](TensorData& self) {
                         if (px->requires_grad) {
                             px->ensure_grad();
                             for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
                             px->note_dense();
                         }
                         if (pb->requires_grad) {
                             pb->ensure_grad();
                             for (int i = 0; i < n; ++i)
                                 for (int j = 0; j < m; ++j)
                                     pb->grad[size_t(j)] += self.grad[size_t(i) * size_t(m) + size_t(j)];
                             pb->note_dense();
                         }
                     },
                     "add_rowvec");
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
        throw usage_error("matmul: inner dimensions disagree " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    int n = a.rows(), m = a.cols(), p = b.cols();
    std::vector<float> v(size_t(n) * size_t(p), 0.f);
    mm_nn(a.vals().data(), b.vals().data(), v.data(), n, m, p);
    auto pa = a.d, pb = b.d;
    return make_node({n, p}, std::move(v), {a, b},
                     [pa, pb, n, m, p](TensorData& self) {
                         if (pa->requires_grad) {
                             pa->ensure_grad();
                             mm_nt(self.grad.data(), pb->values.data(), pa->grad.data(), n, p, m);
                             pa->note_dense();
                         }
                         if (pb->requires_grad) {
                             pb->ensure_grad();
                             mm_tn(pa->values.data(), self.grad.data(), pb->grad.data(), n, m, p);
                             pb->note_dense();
                         }
                     },
                     "matmul");
}

// a [n x m] * b^T with b [p x m] -> [n x p].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.cols())
        throw usage_error("matmul_nt: inner dimensions disagree " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    int n = a.rows(), m = a.cols(), p = b.rows();
    std::vector<float> v(size_t(n) * size_t(p), 0.f);
    mm_nt(a.vals().data(), b.vals().data(), v.data(), n, m, p);
    auto pa = a.d, pb = b.d;
    return make_node({n, p}, std::move(v), {a, b},
                     [pa, pb, n, m, p](TensorData& self) {
                         if (pa->requires_grad) {
                             pa->ensure_grad();
                             mm_nn(self.grad.data(), pb->values.data(), pa->grad.data(), n, p, m);
                             pa->note_dense();
                         }
                         if (pb->requires_grad) {
                             pb->ensure_grad();
                             mm_tn(self.grad.data(), pa->values.data(), pb->grad.data(), n, p, m);
                             pb->note_dense();
                         }
                     },
                     "matmul_nt");
}

inline Tensor relu(const Tensor& x) {
    std::vector<float> v(x.vals().size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = x.vals()[i] > 0.f ? x.vals()[i] : 0.f;
    auto px = x.d;
    return make_node(x.shape(), std::move(v), {x},
                     [px](TensorData& self) {
                         px->ensure_grad();
                         for (size_t i = 0; i < self.grad.size(); ++i)
                             if (px->values[i] > 0.f) px->grad[i] += self.grad[i];
                         px->note_dense();
                     },
                     "relu");
}

// Shared row kernel: population variance, epsilon inside the sqrt, no learned
// scale/shift. Returns 1/sqrt(var+eps) for the backward rule and the runtime.
inline float layer_norm_row(const float* x, float* out, int d, float eps) {
    double mu = 0.0;
    for (int k = 0; k < d; ++k) mu += x[k];
    mu /= d;
    double var = 0.0;
    for (int k = 0; k < d; ++k) {
        double t = x[k] - mu;
        var += t * t;
    }
    var /= d;
    float inv = 1.0f / std::sqrt(float(var) + eps);
    float muf = float(mu);
    for (int k = 0; k < d; ++k) out[k] = (x[k] - muf) * inv;
    return inv;
}

// Parameter-free layer norm over the last axis.
inline Tensor layer_norm(const Tensor& x, float eps) {
    if (x.shape().empty()) throw usage_error("layer_norm: scalar input");
    int d = x.shape().back();
    if (d < 1) throw usage_error("layer_norm: empty last axis");
    int64_t nrows = numel(x.shape()) / d;
    std::vector<float> v(x.vals().size());
    std::vector<float> invs(static_cast<size_t>(nrows));
    for (int64_t r = 0; r < nrows; ++r)
        invs[size_t(r)] = layer_norm_row(x.vals().data() + r * d, v.data() + r * d, d, eps);
    auto px = x.d;
    return make_node(x.shape(), std::move(v), {x},
                     [px, d, nrows, invs](TensorData& self) {
                         px->ensure_grad();
                         for (int64_t r = 0; r < nrows; ++r) {
                             const float* g = self.grad.data() + r * d;
                             const float* y = self.values.data() + r * d;
                             float* gx = px->grad.data() + r * d;
                             double gmean = 0.0, gymean = 0.0;
                             for (int k = 0; k < d; ++k) {
                                 gmean += g[k];
                                 gymean += double(g[k]) * double(y[k]);
                             }
                             gmean /= d;
                             gymean /= d;
                             float inv = invs[size_t(r)];
                             for (int k = 0; k < d; ++k)
                                 gx[k] += inv * (g[k] - float(gmean) - y[k] * float(gymean));
                         }
                         px->note_dense();
                     },
                     "layer_norm");
}

// Softmax over the last axis (attention use).
inline Tensor softmax(const Tensor& x) {
    int d = x.shape().back();
    int64_t nrows = numel(x.shape()) / d;
    std::vector<float> v(x.vals().size());
    for (int64_t r = 0; r < nrows; ++r) {
        const float* in = x.vals().data() + r * d;
        float* out = v.data() + r * d;
        float mx = in[0];
        for (int k = 1; k < d; ++k) mx = std::max(mx, in[k]);
        double sum = 0.0;
        for (int k = 0; k < d; ++k) {
            out[k] = std::exp(in[k] - mx);
            sum += out[k];
        }
        float norm = float(sum);
        for (int k = 0; k < d; ++k) out[k] /= norm;
    }
    auto px = x.d;
    return make_node(x.shape(), std::move(v), {x},
                     [px, d, nrows](TensorData& self) {
                         px->ensure_grad();
                         for (int64_t r = 0; r < nrows; ++r) {
                             const float* g = self.grad.data() + r * d;
                             const float* y = self.values.data() + r * d;
                             float* gx = px->grad.data() + r * d;
                             double dot = 0.0;
                             for (int k = 0; k < d; ++k) dot += double(g[k]) * double(y[k]);
                             for (int k = 0; k < d; ++k) gx[k] += y[k] * (g[k] - float(dot));
                         }
                         px->note_dense();
                     },
                     "softmax");
}

// Mean over rows of -log softmax(logits)[label]; max-subtracted for stability.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.shape().size() != 2) throw usage_error("cross_entropy: logits must be 2-d");
    int n = logits.rows(), c = logits.cols();
    if (int(labels.size()) != n) throw usage_error("cross_entropy: label count mismatch");
    for (int i = 0; i < n; ++i)
        if (labels[size_t(i)] < 0 || labels[size_t(i)] >= c)
            throw data_error("cross_entropy: label " + std::to_string(labels[size_t(i)]) +
                             " out of range [0," + std::to_string(c) + ") at row " + std::to_string(i));
    std::vector<float> probs(logits.vals().size());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const float* in = logits.vals().data() + size_t(i) * size_t(c);
        float* p = probs.data() + size_t(i) * size_t(c);
        float mx = in[0];
        for (int k = 1; k < c; ++k) mx = std::max(mx, in[k]);
        double sum = 0.0;
        for (int k = 0; k < c; ++k) {
            p[k] = std::exp(in[k] - mx);
            sum += p[k];
        }
        float norm = float(sum);
        for (int k = 0; k < c; ++k) p[k] /= norm;
        loss -= double(in[labels[size_t(i)]] - mx) - std::log(sum);
    }
    loss /= n;
    auto pl = logits.d;
    return make_node({1}, {float(loss)}, {logits},
                     [pl, probs = std::move(probs), labels, n, c](TensorData& self) {
                         pl->ensure_grad();
                         float g = self.grad[0] / float(n);
                         for (int i = 0; i < n; ++i) {
                             const float* p = probs.data() + size_t(i) * size_t(c);
                             float* gx = pl->grad.data() + size_t(i) * size_t(c);
                             for (int k = 0; k < c; ++k)
                                 gx[k] += g * (p[k] - (k == labels[size_t(i)] ? 1.f : 0.f));
                         }
                         pl->note_dense();
                     },
                     "softmax_cross_entropy");
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (float v : x.vals()) s += v;
    auto px = x.d;
    return make_node({1}, {float(s)}, {x},
                     [px](TensorData& self) {
                         px->ensure_grad();
                         for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += self.grad[0];
                         px->note_dense();
                     },
                     "sum");
}

inline Tensor mean(const Tensor& x) {
    double s = 0.0;
    for (float v : x.vals()) s += v;
    float inv = 1.f / float(x.size());
    auto px = x.d;
    return make_node({1}, {float(s / double(x.size()))}, {x},
                     [px, inv](TensorData& self) {
                         px->ensure_grad();
                         for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += self.grad[0] * inv;
                         px->note_dense();
                     },
                     "mean");
}

// Same values, no graph ancestry: gradients never flow through the result.
inline Tensor detach(const Tensor& x) {
    return Tensor(x.shape(), x.vals(), false);
}

// Straight-through link: forward takes exactly the quantized values, backward
// passes gradients through unchanged. Equivalent to x + detach(q - x) with
// the forward value guaranteed bit-equal to q.
inline Tensor ste_passthrough(const Tensor& x, std::vector<float> quantized) {
    if (int64_t(quantized.size()) != numel(x.shape()))
        throw usage_error("ste_passthrough: value count mismatch");
    auto px = x.d;
    return make_node(x.shape(), std::move(quantized), {x},
                     [px](TensorData& self) {
                         px->ensure_grad();
                         for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
                         px->note_dense();
                     },
                     "ste");
}

// Select rows by index (embedding lookup, split selection).
inline Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
    if (x.shape().size() != 2) throw usage_error("gather_rows: input must be 2-d");
    int m = x.cols();
    for (int r : idx)
        if (r < 0 || r >= x.rows()) throw data_error("gather_rows: row index " + std::to_string(r) + " out of range");
    std::vector<float> v(idx.size() * size_t(m));
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(x.vals().data() + size_t(idx[i]) * size_t(m), m, v.data() + i * size_t(m));
    auto px = x.d;
    return make_node({int(idx.size()), m}, std::move(v), {x},
                     [px, idx, m](TensorData& self) {
                         px->ensure_grad();
                         for (size_t i = 0; i < idx.size(); ++i) {
                             const float* g = self.grad.data() + i * size_t(m);
                             float* gx = px->grad.data() + size_t(idx[i]) * size_t(m);
                             for (int j = 0; j < m; ++j) gx[j] += g[j];
                             px->note_row(idx[i]);
                         }
                     },
                     "gather_rows");
}

inline Tensor slice_rows(const Tensor& x, int r0, int r1) {
    if (x.shape().size() != 2 || r0 < 0 || r1 > x.rows() || r0 >= r1)
        throw usage_error("slice_rows: bad range");
    int m = x.cols();
    std::vector<float> v(size_t(r1 - r0) * size_t(m));
    std::copy_n(x.vals().data() + size_t(r0) * size_t(m), v.size(), v.data());
    auto px = x.d;
    return make_node({r1 - r0, m}, std::move(v), {x},
                     [px, r0, m](TensorData& self) {
                         px->ensure_grad();
                         float* gx = px->grad.data() + size_t(r0) * size_t(m);
                         for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
                         px->note_dense();
                     },
                     "slice_rows");
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
    if (x.shape().size() != 2 || c0 < 0 || c1 > x.cols() || c0 >= c1)
        throw usage_error("slice_cols: bad range");
    int n = x.rows(), m = x.cols(), w = c1 - c0;
    std::vector<float> v(size_t(n) * size_t(w));
    for (int i = 0; i < n; ++i)
        std::copy_n(x.vals().data() + size_t(i) * size_t(m) + size_t(c0), w, v.data() + size_t(i) * size_t(w));
    auto px = x.d;
    return make_node({n, w}, std::move(v), {x},
                     [px, c0, n, m, w](TensorData& self) {
                         px->ensure_grad();
                         for (int i = 0; i < n; ++i) {
                             const float* g = self.grad.data() + size_t(i) * size_t(w);
                             float* gx = px->grad.data() + size_t(i) * size_t(m) + size_t(c0);
                             for (int j = 0; j < w; ++j) gx[j] += g[j];
                         }
                         px->note_dense();
                     },
                     "slice_cols");
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw usage_error("concat_rows: empty");
    int m = parts[0].cols(), n = 0;
    for (const Tensor& t : parts) {
        if (t.shape().size() != 2 || t.cols() != m) throw usage_error("concat_rows: column mismatch");
        n += t.rows();
    }
    std::vector<float> v;
    v.reserve(size_t(n) * size_t(m));
    for (const Tensor& t : parts) v.insert(v.end(), t.vals().begin(), t.vals().end());
    Tensor out({n, m}, std::move(v), false);
    bool req = false;
    for (const Tensor& t : parts)
        if (t.requires_grad()) req = true;
    if (!req) return out;
    out.d->requires_grad = true;
    std::vector<TensorPtr> ps;
    for (const Tensor& t : parts) {
        out.d->parents.push_back(t.d);
        ps.push_back(t.d);
    }
    out.d->op = "concat_rows";
    out.d->backward_fn = [ps, m](TensorData& self) {
        size_t off = 0;
        for (const TensorPtr& p : ps) {
            size_t cnt = p->values.size();
            if (p->requires_grad) {
                p->ensure_grad();
                for (size_t i = 0; i < cnt; ++i) p->grad[i] += self.grad[off + i];
                p->note_dense();
            }
            off += cnt;
        }
    };
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw usage_error("concat_cols: empty");
    int n = parts[0].rows(), m = 0;
    for (const Tensor& t : parts) {
        if (t.shape().size() != 2 || t.rows() != n) throw usage_error("concat_cols: row mismatch");
        m += t.cols();
    }
    std::vector<float> v(size_t(n) * size_t(m));
    int c0 = 0;
    for (const Tensor& t : parts) {
        int w = t.cols();
        for (int i = 0; i < n; ++i)
            std::copy_n(t.vals().data() + size_t(i) * size_t(w), w, v.data() + size_t(i) * size_t(m) + size_t(c0));
        c0 += w;
    }
    Tensor out({n, m}, std::move(v), false);
    bool req = false;
    for (const Tensor& t : parts)
        if (t.requires_grad()) req = true;
    if (!req) return out;
    out.d->requires_grad = true;
    std::vector<TensorPtr> ps;
    for (const Tensor& t : parts) {
        out.d->parents.push_back(t.d);
        ps.push_back(t.d);
    }
    out.d->op = "concat_cols";
    out.d->backward_fn = [ps, n, m](TensorData& self) {
        int c0 = 0;
        for (const TensorPtr& p : ps) {
            int w = p->shape[1];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int i = 0; i < n; ++i) {
                    const float* g = self.grad.data() + size_t(i) * size_t(m) + size_t(c0);
                    float* gx = p->grad.data() + size_t(i) * size_t(w);
                    for (int j = 0; j < w; ++j) gx[j] += g[j];
                }
                p->note_dense();
            }
            c0 += w;
        }
    };
    return out;
}

// Inverted dropout. Identity (and no graph node) when disabled.
inline Tensor dropout(const Tensor& x, float p, Rng& rng, bool training) {
    if (!training || p <= 0.f) return x;
    if (p >= 1.f) throw usage_error("dropout: p must be < 1");
    float scale = 1.f / (1.f - p);
    std::vector<float> mask(x.vals().size());
    for (float& m : mask) m = rng.uniform01() < double(p) ? 0.f : scale;
    std::vector<float> v(x.vals().size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = x.vals()[i] * mask[i];
    auto px = x.d;
    return make_node(x.shape(), std::move(v), {x},
                     [px, mask = std::move(mask)](TensorData& self) {
                         px->ensure_grad();
                         for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i] * mask[i];
                         px->note_dense();
                     },
                     "dropout");
}

using SparsePtr = std::shared_ptr<const SparseMatrix>;

// S [n x m] * D [m x p] with S a constant sparse matrix.
inline Tensor spmm(SparsePtr sp, const Tensor& dns) {
    const SparseMatrix& s = *sp;
    if (dns.shape().size() != 2 || dns.rows() != s.cols)
        throw usage_error("spmm: shape mismatch sparse [" + std::to_string(s.rows) + "x" +
                          std::to_string(s.cols) + "] vs " + shape_str(dns.shape()));
    int p = dns.cols();
    std::vector<float> v(size_t(s.rows) * size_t(p), 0.f);
    for (int i = 0; i < s.rows; ++i) {
        float* out = v.data() + size_t(i) * size_t(p);
        for (int64_t k = s.row_ptr[size_t(i)]; k < s.row_ptr[size_t(i) + 1]; ++k) {
            float sv = s.val[size_t(k)];
            const float* drow = dns.vals().data() + size_t(s.col[size_t(k)]) * size_t(p);
            for (int j = 0; j < p; ++j) out[j] += sv * drow[j];
        }
    }
    auto pd = dns.d;
    return make_node({s.rows, p}, std::move(v), {dns},
                     [pd, sp, p](TensorData& self) {
                         pd->ensure_grad();
                         for (int i = 0; i < sp->rows; ++i) {
                             const float* g = self.grad.data() + size_t(i) * size_t(p);
                             for (int64_t k = sp->row_ptr[size_t(i)]; k < sp->row_ptr[size_t(i) + 1]; ++k) {
                                 int j = sp->col[size_t(k)];
                                 float sv = sp->val[size_t(k)];
                                 float* gd = pd->grad.data() + size_t(j) * size_t(p);
                                 for (int c = 0; c < p; ++c) gd[c] += sv * g[c];
                                 pd->note_row(j);
                             }
                         }
                     },
                     "spmm");
}

// S [n x m] * W^T with W [p x m]; the BitLinear fast path for sparse inputs.
inline Tensor spmm_nt(SparsePtr sp, const Tensor& w) {
    const SparseMatrix& s = *sp;
    if (w.shape().size() != 2 || w.cols() != s.cols)
        throw usage_error("spmm_nt: shape mismatch sparse [" + std::to_string(s.rows) + "x" +
                          std::to_string(s.cols) + "] vs " + shape_str(w.shape()));
    int p = w.rows(), m = s.cols;
    std::vector<float> v(size_t(s.rows) * size_t(p), 0.f);
    for (int i = 0; i < s.rows; ++i) {
        float* out = v.data() + size_t(i) * size_t(p);
        for (int64_t k = s.row_ptr[size_t(i)]; k < s.row_ptr[size_t(i) + 1]; ++k) {
            float sv = s.val[size_t(k)];
            size_t j = size_t(s.col[size_t(k)]);
            const float* wcol = w.vals().data() + j;
            for (int o = 0; o < p; ++o) out[o] += sv * wcol[size_t(o) * size_t(m)];
        }
    }
    auto pw = w.d;
    return make_node({s.rows, p}, std::move(v), {w},
                     [pw, sp, p, m](TensorData& self) {
                         pw->ensure_grad();
                         for (int i = 0; i < sp->rows; ++i) {
                             const float* g = self.grad.data() + size_t(i) * size_t(p);
                             for (int64_t k = sp->row_ptr[size_t(i)]; k < sp->row_ptr[size_t(i) + 1]; ++k) {
                                 size_t j = size_t(sp->col[size_t(k)]);
                                 float sv = sp->val[size_t(k)];
                                 float* gw = pw->grad.data() + j;
                                 for (int o = 0; o < p; ++o) gw[size_t(o) * size_t(m)] += sv * g[o];
                             }
                         }
                         pw->note_dense();
                     },
                     "spmm_nt");
}

// Row-parallel friendly argmax (first maximum wins).
inline int argmax_row(const float* row, int c) {
    int best = 0;
    for (int k = 1; k < c; ++k)
        if (row[k] > row[best]) best = k;
    return best;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
    int n = logits.rows(), c = logits.cols();
    std::vector<int> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out[size_t(i)] = argmax_row(logits.vals().data() + size_t(i) * size_t(c), c);
    return out;
}

}  // namespace tq
