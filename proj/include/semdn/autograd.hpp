#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "semdn/tensor.hpp"

namespace semdn {

struct ParamCollection;

// One learnable tensor. `owner` points at the collection it was registered
// with; freezing is decided at the collection level.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    ParamCollection* owner = nullptr;

    void zero_grad() {
        grad = Tensor::zeros(value.shape);
    }
};

// A named set of parameters belonging to one network (encoder, decoder,
// residual predictor, similarity predictor). Freezing is total: either every
// parameter in the collection receives gradients or none does.
struct ParamCollection {
    std::string name;
    bool frozen = false;
    std::vector<std::shared_ptr<Param>> params;

    ParamCollection() = default;
    explicit ParamCollection(std::string n) : name(std::move(n)) {}
    ParamCollection(const ParamCollection&) = delete;
    ParamCollection& operator=(const ParamCollection&) = delete;

    std::shared_ptr<Param> add(std::string pname, Tensor init) {
        auto p = std::make_shared<Param>();
        p->name = std::move(pname);
        p->value = std::move(init);
        p->grad = Tensor::zeros(p->value.shape);
        p->owner = this;
        params.push_back(p);
        return p;
    }

    void zero_grad() {
        for (auto& p : params) p->zero_grad();
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (auto& p : params) n += p->value.numel();
        return n;
    }

    // FNV-1a over the raw parameter bytes, in registration order. Used for
    // freeze-integrity checks and checkpoint identity.
    uint64_t hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](const void* ptr, size_t len) {
            const auto* b = static_cast<const unsigned char*>(ptr);
            for (size_t i = 0; i < len; ++i) {
                h ^= b[i];
                h *= 0x100000001b3ULL;
            }
        };
        for (const auto& p : params) {
            mix(p->name.data(), p->name.size());
            if (!p->value.data.empty())
                mix(p->value.data.data(), p->value.data.size() * sizeof(double));
        }
        return h;
    }
};

namespace ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backfn;  // pulls from this->grad into parents
    Param* bound = nullptr;             // leaf binding for parameters
};

// Lightweight handle; copying shares the node.
struct Value {
    NodePtr n;
    const Tensor& val() const { return n->val; }
    const std::vector<int>& shape() const { return n->val.shape; }
    int64_t numel() const { return n->val.numel(); }
    double scalar() const {
        if (n->val.numel() != 1) throw ShapeError("Value::scalar on non-scalar");
        return n->val.data[0];
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

// RAII guard disabling gradient tracking (inference mode).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
};

inline Value constant(Tensor t) {
    auto node = std::make_shared<Node>();
    node->val = std::move(t);
    return Value{node};
}

inline Value constant_scalar(double v) { return constant(Tensor::scalar(v)); }

// Leaf referencing a parameter. Gradients accumulate into param.grad unless
// the owning collection is frozen or grad mode is off.
inline Value leaf(Param& p) {
    auto node = std::make_shared<Node>();
    node->val = p.value;
    const bool frozen = p.owner != nullptr && p.owner->frozen;
    node->requires_grad = grad_mode_flag() && !frozen;
    if (node->requires_grad) node->bound = &p;
    return Value{node};
}

inline Tensor& ensure_grad(Node& n) {
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.val.shape);
    return n.grad;
}

inline Value make_node(Tensor val, std::vector<Value> parents, std::function<void(Node&)> back) {
    auto node = std::make_shared<Node>();
    node->val = std::move(val);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.n->requires_grad;
    rg = rg && grad_mode_flag();
    node->requires_grad = rg;
    if (rg) {
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.n);
        node->backfn = std::move(back);
    }
    return Value{node};
}

// Reverse-mode sweep from a scalar root. Parameter gradients accumulate into
// their Param::grad tensors, scaled by `seed` (use 1/batch for batch means).
inline void backward(const Value& root, double seed = 1.0) {
    if (root.n->val.numel() != 1) throw ShapeError("backward: root must be scalar");
    if (!root.n->requires_grad) throw RuntimeError("backward: graph does not require grad");

    // iterative post-order DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.n.get(), 0);
    visited.insert(root.n.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* parent = node->parents[idx].get();
            ++idx;
            if (parent->requires_grad && visited.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    ensure_grad(*root.n).data[0] += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->grad.data.empty()) continue;  // no gradient flowed here
        if (node->backfn) node->backfn(*node);
        if (node->bound) {
            Tensor& pg = node->bound->grad;
            if (pg.data.empty()) pg = Tensor::zeros(node->val.shape);
            for (size_t i = 0; i < pg.data.size(); ++i) pg.data[i] += node->grad.data[i];
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise / structural ops
// ---------------------------------------------------------------------------

inline Value add(Value a, Value b) {
    check_same_shape(a.val(), b.val(), "add");
    Tensor out = a.val();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.val().data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        for (int k = 0; k < 2; ++k) {
            Node& p = *n.parents[k];
            if (!p.requires_grad) continue;
            Tensor& g = ensure_grad(p);
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        }
    });
}

inline Value sub(Value a, Value b) {
    check_same_shape(a.val(), b.val(), "sub");
    Tensor out = a.val();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.val().data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) {
            Tensor& g = ensure_grad(*n.parents[0]);
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        }
        if (n.parents[1]->requires_grad) {
            Tensor& g = ensure_grad(*n.parents[1]);
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] -= n.grad.data[i];
        }
    });
}

inline Value mul(Value a, Value b) {
    check_same_shape(a.val(), b.val(), "mul");
    Tensor out = a.val();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.val().data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
            Tensor& g = ensure_grad(pa);
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * pb.val.data[i];
        }
        if (pb.requires_grad) {
            Tensor& g = ensure_grad(pb);
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * pa.val.data[i];
        }
    });
}

inline Value div(Value a, Value b) {
    check_same_shape(a.val(), b.val(), "div");
    Tensor out = a.val();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] /= b.val().data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
            Tensor& g = ensure_grad(pa);
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] / pb.val.data[i];
        }
        if (pb.requires_grad) {
            Tensor& g = ensure_grad(pb);
            for (size_t i = 0; i < g.data.size(); ++i) {
                const double bi = pb.val.data[i];
                g.data[i] -= n.grad.data[i] * pa.val.data[i] / (bi * bi);
            }
        }
    });
}

inline Value scale(Value a, double c) {
    Tensor out = a.val();
    for (auto& v : out.data) v *= c;
    return make_node(std::move(out), {a}, [c](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += c * n.grad.data[i];
    });
}

inline Value add_const(Value a, double c) {
    Tensor out = a.val();
    for (auto& v : out.data) v += c;
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
    });
}

// multiply a tensor by a scalar-shaped Value (broadcast)
inline Value scale_by(Value a, Value s) {
    if (s.numel() != 1) throw ShapeError("scale_by: scale must be scalar");
    const double sv = s.val().data[0];
    Tensor out = a.val();
    for (auto& v : out.data) v *= sv;
    return make_node(std::move(out), {a, s}, [sv](Node& n) {
        Node& pa = *n.parents[0];
        Node& ps = *n.parents[1];
        if (pa.requires_grad) {
            Tensor& g = ensure_grad(pa);
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += sv * n.grad.data[i];
        }
        if (ps.requires_grad) {
            Tensor& g = ensure_grad(ps);
            double acc = 0.0;
            for (size_t i = 0; i < n.grad.data.size(); ++i) acc += n.grad.data[i] * pa.val.data[i];
            g.data[0] += acc;
        }
    });
}

inline Value relu(Value a) {
    Tensor out = a.val();
    for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
    return make_node(std::move(out), {a}, [](Node& n) {
        Node& p = *n.parents[0];
        Tensor& g = ensure_grad(p);
        for (size_t i = 0; i < g.data.size(); ++i)
            if (p.val.data[i] > 0.0) g.data[i] += n.grad.data[i];
    });
}

inline Value sigmoid(Value a) {
    Tensor out = a.val();
    for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        for (size_t i = 0; i < g.data.size(); ++i) {
            const double y = n.val.data[i];
            g.data[i] += n.grad.data[i] * y * (1.0 - y);
        }
    });
}

inline Value gelu(Value a) {
    Tensor out = a.val();
    for (auto& v : out.data) v = 0.5 * v * (1.0 + std::erf(v / M_SQRT2));
    return make_node(std::move(out), {a}, [](Node& n) {
        Node& p = *n.parents[0];
        Tensor& g = ensure_grad(p);
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (size_t i = 0; i < g.data.size(); ++i) {
            const double x = p.val.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(x / M_SQRT2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
            g.data[i] += n.grad.data[i] * (cdf + x * pdf);
        }
    });
}

inline Value sqrt_v(Value a) {
    Tensor out = a.val();
    for (auto& v : out.data) v = std::sqrt(v);
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        for (size_t i = 0; i < g.data.size(); ++i)
            g.data[i] += n.grad.data[i] * 0.5 / n.val.data[i];
    });
}

inline Value pow_const(Value a, double e) {
    Tensor out = a.val();
    for (auto& v : out.data) v = std::pow(v, e);
    return make_node(std::move(out), {a}, [e](Node& n) {
        Node& p = *n.parents[0];
        Tensor& g = ensure_grad(p);
        for (size_t i = 0; i < g.data.size(); ++i)
            g.data[i] += n.grad.data[i] * e * std::pow(p.val.data[i], e - 1.0);
    });
}

inline Value sum(Value a) {
    Tensor out = Tensor::scalar(a.val().sum());
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        const double gv = n.grad.data[0];
        for (auto& v : g.data) v += gv;
    });
}

inline Value mean(Value a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    Tensor out = Tensor::scalar(a.val().sum() * inv);
    return make_node(std::move(out), {a}, [inv](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        const double gv = n.grad.data[0] * inv;
        for (auto& v : g.data) v += gv;
    });
}

inline Value dot(Value a, Value b) {
    check_same_shape(a.val(), b.val(), "dot");
    Tensor out = Tensor::scalar(a.val().dot(b.val()));
    return make_node(std::move(out), {a, b}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        const double gv = n.grad.data[0];
        if (pa.requires_grad) {
            Tensor& g = ensure_grad(pa);
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += gv * pb.val.data[i];
        }
        if (pb.requires_grad) {
            Tensor& g = ensure_grad(pb);
            for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += gv * pa.val.data[i];
        }
    });
}

inline Value reshape(Value a, std::vector<int> s) {
    Tensor out = a.val().reshaped(std::move(s));
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
    });
}

inline Value detach(Value a) { return constant(a.val()); }

// concat along the channel axis of {C,H,W} tensors
inline Value concat_channels(const std::vector<Value>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: empty input");
    const int h = xs[0].val().dim(1), w = xs[0].val().dim(2);
    int ctot = 0;
    for (const auto& x : xs) {
        if (x.val().rank() != 3 || x.val().dim(1) != h || x.val().dim(2) != w)
            throw ShapeError("concat_channels: spatial shape mismatch");
        ctot += x.val().dim(0);
    }
    Tensor out({ctot, h, w});
    int64_t off = 0;
    for (const auto& x : xs) {
        const auto& d = x.val().data;
        std::copy(d.begin(), d.end(), out.data.begin() + off);
        off += x.val().numel();
    }
    return make_node(std::move(out), xs, [](Node& n) {
        int64_t off = 0;
        for (auto& pp : n.parents) {
            Node& p = *pp;
            const int64_t len = p.val.numel();
            if (p.requires_grad) {
                Tensor& g = ensure_grad(p);
                for (int64_t i = 0; i < len; ++i) g.data[i] += n.grad.data[off + i];
            }
            off += len;
        }
    });
}

// scalar -> {1,h,w} plane (for similarity-score conditioning)
inline Value broadcast_plane(Value s, int h, int w) {
    if (s.numel() != 1) throw ShapeError("broadcast_plane: input must be scalar");
    Tensor out = Tensor::full({1, h, w}, s.val().data[0]);
    return make_node(std::move(out), {s}, [](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        double acc = 0.0;
        for (double v : n.grad.data) acc += v;
        g.data[0] += acc;
    });
}

// ---------------------------------------------------------------------------
// matrix ops (used by the attention backbone)
// ---------------------------------------------------------------------------

inline Value slice_rows(Value a, int r0, int r1) {
    if (a.val().rank() != 2) throw ShapeError("slice_rows: rank-2 input required");
    const int m = a.val().dim(0), k = a.val().dim(1);
    if (r0 < 0 || r1 > m || r0 >= r1) throw ShapeError("slice_rows: bad range");
    Tensor out({r1 - r0, k});
    std::copy(a.val().data.begin() + static_cast<int64_t>(r0) * k,
              a.val().data.begin() + static_cast<int64_t>(r1) * k, out.data.begin());
    return make_node(std::move(out), {a}, [r0, k](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        const int64_t off = static_cast<int64_t>(r0) * k;
        for (size_t i = 0; i < n.grad.data.size(); ++i) g.data[off + i] += n.grad.data[i];
    });
}

inline Value slice_cols(Value a, int c0, int c1) {
    if (a.val().rank() != 2) throw ShapeError("slice_cols: rank-2 input required");
    const int m = a.val().dim(0), k = a.val().dim(1);
    if (c0 < 0 || c1 > k || c0 >= c1) throw ShapeError("slice_cols: bad range");
    const int w = c1 - c0;
    Tensor out({m, w});
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < w; ++c)
            out.data[static_cast<int64_t>(r) * w + c] = a.val().data[static_cast<int64_t>(r) * k + c0 + c];
    return make_node(std::move(out), {a}, [c0, k, w, m](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < w; ++c)
                g.data[static_cast<int64_t>(r) * k + c0 + c] += n.grad.data[static_cast<int64_t>(r) * w + c];
    });
}

inline Value concat_cols(const std::vector<Value>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols: empty input");
    const int m = xs[0].val().dim(0);
    int ktot = 0;
    for (const auto& x : xs) {
        if (x.val().rank() != 2 || x.val().dim(0) != m) throw ShapeError("concat_cols: shape mismatch");
        ktot += x.val().dim(1);
    }
    Tensor out({m, ktot});
    int coff = 0;
    for (const auto& x : xs) {
        const int k = x.val().dim(1);
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < k; ++c)
                out.data[static_cast<int64_t>(r) * ktot + coff + c] = x.val().data[static_cast<int64_t>(r) * k + c];
        coff += k;
    }
    return make_node(std::move(out), xs, [m, ktot](Node& n) {
        int coff = 0;
        for (auto& pp : n.parents) {
            Node& p = *pp;
            const int k = p.val.dim(1);
            if (p.requires_grad) {
                Tensor& g = ensure_grad(p);
                for (int r = 0; r < m; ++r)
                    for (int c = 0; c < k; ++c)
                        g.data[static_cast<int64_t>(r) * k + c] +=
                            n.grad.data[static_cast<int64_t>(r) * ktot + coff + c];
            }
            coff += k;
        }
    });
}

inline Value concat_rows(const std::vector<Value>& xs) {
    if (xs.empty()) throw ShapeError("concat_rows: empty input");
    const int k = xs[0].val().dim(1);
    int mtot = 0;
    for (const auto& x : xs) {
        if (x.val().rank() != 2 || x.val().dim(1) != k) throw ShapeError("concat_rows: shape mismatch");
        mtot += x.val().dim(0);
    }
    Tensor out({mtot, k});
    int64_t off = 0;
    for (const auto& x : xs) {
        const auto& d = x.val().data;
        std::copy(d.begin(), d.end(), out.data.begin() + off);
        off += x.val().numel();
    }
    return make_node(std::move(out), xs, [](Node& n) {
        int64_t off = 0;
        for (auto& pp : n.parents) {
            Node& p = *pp;
            const int64_t len = p.val.numel();
            if (p.requires_grad) {
                Tensor& g = ensure_grad(p);
                for (int64_t i = 0; i < len; ++i) g.data[i] += n.grad.data[off + i];
            }
            off += len;
        }
    });
}

inline Value transpose(Value a) {
    if (a.val().rank() != 2) throw ShapeError("transpose: rank-2 input required");
    const int m = a.val().dim(0), k = a.val().dim(1);
    Tensor out({k, m});
    for (int r = 0; r < m; ++r)
        for (int c = 0; c < k; ++c) out.data[static_cast<int64_t>(c) * m + r] = a.val().data[static_cast<int64_t>(r) * k + c];
    return make_node(std::move(out), {a}, [m, k](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < k; ++c)
                g.data[static_cast<int64_t>(r) * k + c] += n.grad.data[static_cast<int64_t>(c) * m + r];
    });
}

inline Value softmax_rows(Value a) {
    if (a.val().rank() != 2) throw ShapeError("softmax_rows: rank-2 input required");
    const int m = a.val().dim(0), k = a.val().dim(1);
    Tensor out = a.val();
    for (int r = 0; r < m; ++r) {
        double* row = out.data.data() + static_cast<int64_t>(r) * k;
        double mx = row[0];
        for (int c = 1; c < k; ++c) mx = std::max(mx, row[c]);
        double s = 0.0;
        for (int c = 0; c < k; ++c) {
            row[c] = std::exp(row[c] - mx);
            s += row[c];
        }
        for (int c = 0; c < k; ++c) row[c] /= s;
    }
    return make_node(std::move(out), {a}, [m, k](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        for (int r = 0; r < m; ++r) {
            const double* y = n.val.data.data() + static_cast<int64_t>(r) * k;
            const double* gy = n.grad.data.data() + static_cast<int64_t>(r) * k;
            double dotv = 0.0;
            for (int c = 0; c < k; ++c) dotv += gy[c] * y[c];
            double* gx = g.data.data() + static_cast<int64_t>(r) * k;
            for (int c = 0; c < k; ++c) gx[c] += (gy[c] - dotv) * y[c];
        }
    });
}

// ---------------------------------------------------------------------------
// data-movement ops between {C,h,w} maps and token matrices
// ---------------------------------------------------------------------------

// {C,h,w} -> {C*s*s, h/s, w/s}, grouping each s x s spatial block into channels
inline Value space_to_depth(Value a, int s) {
    const Tensor& x = a.val();
    if (x.rank() != 3) throw ShapeError("space_to_depth: rank-3 input required");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % s != 0 || w % s != 0) throw ShapeError("space_to_depth: spatial dims not divisible");
    const int ho = h / s, wo = w / s, co = c * s * s;
    Tensor out({co, ho, wo});
    for (int ci = 0; ci < c; ++ci)
        for (int dy = 0; dy < s; ++dy)
            for (int dx = 0; dx < s; ++dx) {
                const int oc = (ci * s + dy) * s + dx;
                for (int y = 0; y < ho; ++y)
                    for (int xx = 0; xx < wo; ++xx)
                        out.data[(static_cast<int64_t>(oc) * ho + y) * wo + xx] =
                            x.data[(static_cast<int64_t>(ci) * h + y * s + dy) * w + xx * s + dx];
            }
    return make_node(std::move(out), {a}, [c, h, w, s, ho, wo](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        for (int ci = 0; ci < c; ++ci)
            for (int dy = 0; dy < s; ++dy)
                for (int dx = 0; dx < s; ++dx) {
                    const int oc = (ci * s + dy) * s + dx;
                    for (int y = 0; y < ho; ++y)
                        for (int xx = 0; xx < wo; ++xx)
                            g.data[(static_cast<int64_t>(ci) * h + y * s + dy) * w + xx * s + dx] +=
                                n.grad.data[(static_cast<int64_t>(oc) * ho + y) * wo + xx];
                }
    });
}

// exact inverse of space_to_depth
inline Value depth_to_space(Value a, int s) {
    const Tensor& x = a.val();
    if (x.rank() != 3) throw ShapeError("depth_to_space: rank-3 input required");
    const int co = x.dim(0), ho = x.dim(1), wo = x.dim(2);
    if (co % (s * s) != 0) throw ShapeError("depth_to_space: channels not divisible");
    const int c = co / (s * s), h = ho * s, w = wo * s;
    Tensor out({c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (int dy = 0; dy < s; ++dy)
            for (int dx = 0; dx < s; ++dx) {
                const int ic = (ci * s + dy) * s + dx;
                for (int y = 0; y < ho; ++y)
                    for (int xx = 0; xx < wo; ++xx)
                        out.data[(static_cast<int64_t>(ci) * h + y * s + dy) * w + xx * s + dx] =
                            x.data[(static_cast<int64_t>(ic) * ho + y) * wo + xx];
            }
    return make_node(std::move(out), {a}, [c, h, w, s, ho, wo](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        for (int ci = 0; ci < c; ++ci)
            for (int dy = 0; dy < s; ++dy)
                for (int dx = 0; dx < s; ++dx) {
                    const int ic = (ci * s + dy) * s + dx;
                    for (int y = 0; y < ho; ++y)
                        for (int xx = 0; xx < wo; ++xx)
                            g.data[(static_cast<int64_t>(ic) * ho + y) * wo + xx] +=
                                n.grad.data[(static_cast<int64_t>(ci) * h + y * s + dy) * w + xx * s + dx];
                }
    });
}

// {C,h,w} -> {nWindows*win*win, C} token matrix, windows in raster order,
// tokens raster-ordered inside each window
inline Value window_partition(Value a, int win) {
    const Tensor& x = a.val();
    if (x.rank() != 3) throw ShapeError("window_partition: rank-3 input required");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % win != 0 || w % win != 0)
        throw ShapeError("window_partition: spatial dims not divisible by window");
    const int gy = h / win, gx = w / win;
    const int ntok = gy * gx * win * win;
    Tensor out({ntok, c});
    int64_t t = 0;
    for (int wy = 0; wy < gy; ++wy)
        for (int wx = 0; wx < gx; ++wx)
            for (int iy = 0; iy < win; ++iy)
                for (int ix = 0; ix < win; ++ix, ++t) {
                    const int y = wy * win + iy, xx = wx * win + ix;
                    for (int ci = 0; ci < c; ++ci)
                        out.data[t * c + ci] = x.data[(static_cast<int64_t>(ci) * h + y) * w + xx];
                }
    return make_node(std::move(out), {a}, [c, h, w, win, gy, gx](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        int64_t t = 0;
        for (int wy = 0; wy < gy; ++wy)
            for (int wx = 0; wx < gx; ++wx)
                for (int iy = 0; iy < win; ++iy)
                    for (int ix = 0; ix < win; ++ix, ++t) {
                        const int y = wy * win + iy, xx = wx * win + ix;
                        for (int ci = 0; ci < c; ++ci)
                            g.data[(static_cast<int64_t>(ci) * h + y) * w + xx] += n.grad.data[t * c + ci];
                    }
    });
}

// inverse of window_partition back to a {C,h,w} map
inline Value window_merge(Value a, int c, int h, int w, int win) {
    const Tensor& x = a.val();
    if (x.rank() != 2 || x.dim(1) != c || x.dim(0) != h * w)
        throw ShapeError("window_merge: token matrix shape mismatch");
    const int gy = h / win, gx = w / win;
    Tensor out({c, h, w});
    int64_t t = 0;
    for (int wy = 0; wy < gy; ++wy)
        for (int wx = 0; wx < gx; ++wx)
            for (int iy = 0; iy < win; ++iy)
                for (int ix = 0; ix < win; ++ix, ++t) {
                    const int y = wy * win + iy, xx = wx * win + ix;
                    for (int ci = 0; ci < c; ++ci)
                        out.data[(static_cast<int64_t>(ci) * h + y) * w + xx] = x.data[t * c + ci];
                }
    return make_node(std::move(out), {a}, [c, h, w, win, gy, gx](Node& n) {
        Tensor& g = ensure_grad(*n.parents[0]);
        int64_t t = 0;
        for (int wy = 0; wy < gy; ++wy)
            for (int wx = 0; wx < gx; ++wx)
                for (int iy = 0; iy < win; ++iy)
                    for (int ix = 0; ix < win; ++ix, ++t) {
                        const int y = wy * win + iy, xx = wx * win + ix;
                        for (int ci = 0; ci < c; ++ci)
                            g.data[t * c + ci] += n.grad.data[(static_cast<int64_t>(ci) * h + y) * w + xx];
                    }
    });
}

}  // namespace ag
}  // namespace semdn
