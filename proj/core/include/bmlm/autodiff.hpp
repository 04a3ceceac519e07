#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <utility>
#include <vector>

#include "bmlm/errors.hpp"
#include "bmlm/rng.hpp"
#include "bmlm/tensor.hpp"

namespace bmlm {

// Handle into a Tape. Cheap to copy; only valid for the tape that issued it.
struct Var {
    std::uint32_t id = 0;
};

// Reverse-mode autodiff tape. Every op appends a node holding the forward
// value and a closure that scatters the node's output gradient into its
// parents' gradient buffers. Node ids increase in creation order, so walking
// ids from the loss down to zero is a valid reverse topological order.
template <class S>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor<S>&)>;

    Var leaf(Tensor<S> value, bool trainable = false) {
        return push(std::move(value), {}, nullptr, trainable);
    }

    Var constant(Tensor<S> value) { return leaf(std::move(value), false); }

    Var push(Tensor<S> value, std::vector<std::uint32_t> parents, BackwardFn backward,
             bool trainable = false) {
        Node node;
        node.value = std::move(value);
        node.parents = std::move(parents);
        node.backward = std::move(backward);
        node.trainable = trainable;
        nodes_.push_back(std::move(node));
        return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    std::size_t size() const { return nodes_.size(); }

    const Tensor<S>& value(Var v) const { return node(v.id).value; }
    const Tensor<S>& value(std::uint32_t id) const { return node(id).value; }

    bool has_grad(Var v) const { return node(v.id).has_grad; }

    const Tensor<S>& grad(Var v) const {
        const Node& n = node(v.id);
        if (!n.has_grad) throw ContractError("gradient requested for a node backward never reached");
        return n.grad;
    }

    // Gradient accumulation buffer, zero-initialized to the node's value
    // shape on first touch. Backward closures write here directly.
    Tensor<S>& grad_buffer(std::uint32_t id) {
        Node& n = node(id);
        if (!n.has_grad) {
            n.grad = Tensor<S>(n.value.shape);
            n.has_grad = true;
        }
        return n.grad;
    }

    // Propagates from a scalar loss. Resets any gradients from a previous
    // call first, so repeated backward passes on one tape do not mix.
    void backward(Var loss) {
        if (loss.id >= nodes_.size()) throw ContractError("backward: unknown node");
        if (node(loss.id).value.numel() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_string(node(loss.id).value));
        }
        for (Node& n : nodes_) {
            n.has_grad = false;
            n.grad = Tensor<S>();
        }
        grad_buffer(loss.id).data[0] = S(1);
        for (std::uint32_t id = loss.id + 1; id-- > 0;) {
            Node& n = node(id);
            if (n.has_grad && n.backward) {
                n.backward(*this, n.grad);
            }
        }
    }

private:
    struct Node {
        Tensor<S> value;
        Tensor<S> grad;
        std::vector<std::uint32_t> parents;
        BackwardFn backward;
        bool trainable = false;
        bool has_grad = false;
    };

    Node& node(std::uint32_t id) {
        if (id >= nodes_.size()) throw ContractError("invalid tape node id");
        return nodes_[id];
    }
    const Node& node(std::uint32_t id) const {
        if (id >= nodes_.size()) throw ContractError("invalid tape node id");
        return nodes_[id];
    }

    std::vector<Node> nodes_;
};

namespace ops {

template <class S>
void require_rank2(const Tensor<S>& t, const char* what) {
    if (t.rank() != 2) throw ShapeError(std::string(what) + " must be rank 2, got " + shape_string(t));
}

// C = A * B with A [m,k], B [k,n]. ikj loop order keeps the inner loop
// streaming over contiguous rows of B and C.
template <class S>
void matmul_into(const Tensor<S>& a, const Tensor<S>& b, Tensor<S>& c, bool accumulate) {
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    if (!accumulate) std::fill(c.data.begin(), c.data.end(), S(0));
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = &a.data[i * k];
        S* crow = &c.data[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const S av = arow[p];
            if (av == S(0)) continue;
            const S* brow = &b.data[p * n];
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C = A * B^T with A [m,k], B [n,k]. Rows of A against rows of B.
template <class S>
void matmul_nt_into(const Tensor<S>& a, const Tensor<S>& b, Tensor<S>& c, bool accumulate) {
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = &a.data[i * k];
        for (std::size_t j = 0; j < n; ++j) {
            const S* brow = &b.data[j * k];
            S acc = S(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            S& out = c.data[i * n + j];
            out = accumulate ? out + acc : acc;
        }
    }
}

// C = A^T * B with A [k,m], B [k,n].
template <class S>
void matmul_tn_into(const Tensor<S>& a, const Tensor<S>& b, Tensor<S>& c, bool accumulate) {
    const std::size_t k = a.shape[0], m = a.shape[1], n = b.shape[1];
    if (!accumulate) std::fill(c.data.begin(), c.data.end(), S(0));
    for (std::size_t p = 0; p < k; ++p) {
        const S* arow = &a.data[p * m];
        const S* brow = &b.data[p * n];
        for (std::size_t i = 0; i < m; ++i) {
            const S av = arow[i];
            if (av == S(0)) continue;
            S* crow = &c.data[i * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class S>
Var matmul(Tape<S>& t, Var a, Var b) {
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    require_rank2(av, "matmul lhs");
    require_rank2(bv, "matmul rhs");
    if (av.shape[1] != bv.shape[0]) {
        throw ShapeError("matmul: " + shape_string(av) + " x " + shape_string(bv));
    }
    Tensor<S> out({av.shape[0], bv.shape[1]});
    matmul_into(av, bv, out, false);
    return t.push(std::move(out), {a.id, b.id},
                  [a, b](Tape<S>& tp, const Tensor<S>& g) {
                      // dA += G * B^T, dB += A^T * G
                      matmul_nt_into(g, tp.value(b), tp.grad_buffer(a.id), true);
                      matmul_tn_into(tp.value(a), g, tp.grad_buffer(b.id), true);
                  });
}

// C = A * B^T; the natural layout for attention scores and the tied LM head.
template <class S>
Var matmul_nt(Tape<S>& t, Var a, Var b) {
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    require_rank2(av, "matmul_nt lhs");
    require_rank2(bv, "matmul_nt rhs");
    if (av.shape[1] != bv.shape[1]) {
        throw ShapeError("matmul_nt: " + shape_string(av) + " x " + shape_string(bv) + "^T");
    }
    Tensor<S> out({av.shape[0], bv.shape[0]});
    matmul_nt_into(av, bv, out, false);
    return t.push(std::move(out), {a.id, b.id},
                  [a, b](Tape<S>& tp, const Tensor<S>& g) {
                      // C = A B^T: dA += G * B, dB += G^T * A
                      matmul_into(g, tp.value(b), tp.grad_buffer(a.id), true);
                      matmul_tn_into(g, tp.value(a), tp.grad_buffer(b.id), true);
                  });
}

template <class S>
Var add(Tape<S>& t, Var a, Var b) {
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    if (!av.same_shape(bv)) {
        throw ShapeError("add: " + shape_string(av) + " vs " + shape_string(bv));
    }
    Tensor<S> out = av;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    return t.push(std::move(out), {a.id, b.id},
                  [a, b](Tape<S>& tp, const Tensor<S>& g) {
                      Tensor<S>& ga = tp.grad_buffer(a.id);
                      Tensor<S>& gb = tp.grad_buffer(b.id);
                      for (std::size_t i = 0; i < g.data.size(); ++i) {
                          ga.data[i] += g.data[i];
                          gb.data[i] += g.data[i];
                      }
                  });
}

// a [m,n] plus row vector b [n], broadcast over rows. Bias application.
template <class S>
Var add_rowvec(Tape<S>& t, Var a, Var b) {
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    require_rank2(av, "add_rowvec lhs");
    if (bv.rank() != 1 || bv.shape[0] != av.shape[1]) {
        throw ShapeError("add_rowvec: " + shape_string(av) + " vs " + shape_string(bv));
    }
    Tensor<S> out = av;
    const std::size_t m = av.shape[0], n = av.shape[1];
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += bv.data[j];
    return t.push(std::move(out), {a.id, b.id},
                  [a, b, m, n](Tape<S>& tp, const Tensor<S>& g) {
                      Tensor<S>& ga = tp.grad_buffer(a.id);
                      Tensor<S>& gb = tp.grad_buffer(b.id);
                      for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < n; ++j) {
                              ga.data[i * n + j] += g.data[i * n + j];
                              gb.data[j] += g.data[i * n + j];
                          }
                  });
}

template <class S>
Var scale(Tape<S>& t, Var a, double factor) {
    Tensor<S> out = t.value(a);
    const S f = static_cast<S>(factor);
    for (S& v : out.data) v *= f;
    return t.push(std::move(out), {a.id},
                  [a, f](Tape<S>& tp, const Tensor<S>& g) {
                      Tensor<S>& ga = tp.grad_buffer(a.id);
                      for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += f * g.data[i];
                  });
}

template <class S>
Var mul(Tape<S>& t, Var a, Var b) {
    const Tensor<S>& av = t.value(a);
    const Tensor<S>& bv = t.value(b);
    if (!av.same_shape(bv)) {
        throw ShapeError("mul: " + shape_string(av) + " vs " + shape_string(bv));
    }
    Tensor<S> out = av;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    return t.push(std::move(out), {a.id, b.id},
                  [a, b](Tape<S>& tp, const Tensor<S>& g) {
                      const Tensor<S>& av2 = tp.value(a);
                      const Tensor<S>& bv2 = tp.value(b);
                      Tensor<S>& ga = tp.grad_buffer(a.id);
                      Tensor<S>& gb = tp.grad_buffer(b.id);
                      for (std::size_t i = 0; i < g.data.size(); ++i) {
                          ga.data[i] += g.data[i] * bv2.data[i];
                          gb.data[i] += g.data[i] * av2.data[i];
                      }
                  });
}

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <class S>
Var gelu(Tape<S>& t, Var a) {
    const Tensor<S>& av = t.value(a);
    Tensor<S> out(av.shape);
    const double c = std::sqrt(2.0 / std::numbers::pi);
    for (std::size_t i = 0; i < av.data.size(); ++i) {
        const double x = static_cast<double>(av.data[i]);
        const double u = c * (x + 0.044715 * x * x * x);
        out.data[i] = static_cast<S>(0.5 * x * (1.0 + std::tanh(u)));
    }
    return t.push(std::move(out), {a.id},
                  [a, c](Tape<S>& tp, const Tensor<S>& g) {
                      const Tensor<S>& av2 = tp.value(a);
                      Tensor<S>& ga = tp.grad_buffer(a.id);
                      for (std::size_t i = 0; i < g.data.size(); ++i) {
                          const double x = static_cast<double>(av2.data[i]);
                          const double u = c * (x + 0.044715 * x * x * x);
                          const double th = std::tanh(u);
                          const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
                          const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                          ga.data[i] += g.data[i] * static_cast<S>(d);
                      }
                  });
}

// Per-row layer normalization with learned gain and bias.
template <class S>
Var layer_norm(Tape<S>& t, Var x, Var gain, Var bias, double eps = 1e-5) {
    const Tensor<S>& xv = t.value(x);
    const Tensor<S>& gv = t.value(gain);
    const Tensor<S>& bv = t.value(bias);
    require_rank2(xv, "layer_norm input");
    const std::size_t m = xv.shape[0], n = xv.shape[1];
    if (gv.rank() != 1 || gv.shape[0] != n || bv.rank() != 1 || bv.shape[0] != n) {
        throw ShapeError("layer_norm: gain/bias must be rank-1 of width " + std::to_string(n));
    }
    Tensor<S> out({m, n});
    // Normalized activations are saved for backward.
    auto xhat = std::make_shared<std::vector<S>>(m * n);
    auto inv_sigma = std::make_shared<std::vector<S>>(m);
    for (std::size_t i = 0; i < m; ++i) {
        const S* row = &xv.data[i * n];
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = row[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[i] = static_cast<S>(is);
        for (std::size_t j = 0; j < n; ++j) {
            const S xh = static_cast<S>((row[j] - mu) * is);
            (*xhat)[i * n + j] = xh;
            out.data[i * n + j] = xh * gv.data[j] + bv.data[j];
        }
    }
    return t.push(std::move(out), {x.id, gain.id, bias.id},
                  [x, gain, bias, m, n, xhat, inv_sigma](Tape<S>& tp, const Tensor<S>& g) {
                      const Tensor<S>& gv2 = tp.value(gain);
                      Tensor<S>& gx = tp.grad_buffer(x.id);
                      Tensor<S>& gg = tp.grad_buffer(gain.id);
                      Tensor<S>& gb = tp.grad_buffer(bias.id);
                      for (std::size_t i = 0; i < m; ++i) {
                          const S* grow = &g.data[i * n];
                          const S* xh = &(*xhat)[i * n];
                          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                          for (std::size_t j = 0; j < n; ++j) {
                              const double dxh = static_cast<double>(grow[j]) * gv2.data[j];
                              mean_dxh += dxh;
                              mean_dxh_xh += dxh * xh[j];
                              gg.data[j] += grow[j] * xh[j];
                              gb.data[j] += grow[j];
                          }
                          mean_dxh /= static_cast<double>(n);
                          mean_dxh_xh /= static_cast<double>(n);
                          const double is = static_cast<double>((*inv_sigma)[i]);
                          for (std::size_t j = 0; j < n; ++j) {
                              const double dxh = static_cast<double>(grow[j]) * gv2.data[j];
                              gx.data[i * n + j] +=
                                  static_cast<S>(is * (dxh - mean_dxh - xh[j] * mean_dxh_xh));
                          }
                      }
                  });
}

// Per-row softmax with max subtraction. A -1e9 additive mask entry underflows
// to an exact +0 here, which is what makes masked positions bit-invisible.
template <class S>
Var softmax(Tape<S>& t, Var a) {
    const Tensor<S>& av = t.value(a);
    require_rank2(av, "softmax input");
    const std::size_t m = av.shape[0], n = av.shape[1];
    Tensor<S> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const S* row = &av.data[i * n];
        S mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(static_cast<double>(row[j] - mx));
            out.data[i * n + j] = static_cast<S>(e);
            sum += e;
        }
        const S inv = static_cast<S>(1.0 / sum);
        for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] *= inv;
    }
    const std::uint32_t out_id = static_cast<std::uint32_t>(t.size());
    return t.push(std::move(out), {a.id},
                  [a, out_id, m, n](Tape<S>& tp, const Tensor<S>& g) {
                      const Tensor<S>& y = tp.value(out_id);
                      Tensor<S>& ga = tp.grad_buffer(a.id);
                      for (std::size_t i = 0; i < m; ++i) {
                          const S* yrow = &y.data[i * n];
                          const S* grow = &g.data[i * n];
                          double dot = 0.0;
                          for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(grow[j]) * yrow[j];
                          for (std::size_t j = 0; j < n; ++j) {
                              ga.data[i * n + j] += yrow[j] * static_cast<S>(grow[j] - dot);
                          }
                      }
                  });
}

// Rows of `table` selected by index; backward scatter-adds into the table.
// This is the embedding lookup, so repeated indices must accumulate.
template <class S>
Var gather_rows(Tape<S>& t, Var table, const std::vector<std::size_t>& indices) {
    const Tensor<S>& tv = t.value(table);
    require_rank2(tv, "gather_rows table");
    const std::size_t n = tv.shape[1];
    Tensor<S> out({indices.size(), n});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= tv.shape[0]) {
            throw DomainError("gather_rows: index " + std::to_string(indices[i]) +
                              " out of range for table with " + std::to_string(tv.shape[0]) + " rows");
        }
        std::copy_n(&tv.data[indices[i] * n], n, &out.data[i * n]);
    }
    return t.push(std::move(out), {table.id},
                  [table, indices, n](Tape<S>& tp, const Tensor<S>& g) {
                      Tensor<S>& gt = tp.grad_buffer(table.id);
                      for (std::size_t i = 0; i < indices.size(); ++i) {
                          S* dst = &gt.data[indices[i] * n];
                          const S* src = &g.data[i * n];
                          for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
                      }
                  });
}

// Column slice [offset, offset+width) of a rank-2 tensor.
template <class S>
Var slice_cols(Tape<S>& t, Var a, std::size_t offset, std::size_t width) {
    const Tensor<S>& av = t.value(a);
    require_rank2(av, "slice_cols input");
    const std::size_t m = av.shape[0], n = av.shape[1];
    if (width == 0 || offset + width > n) {
        throw ShapeError("slice_cols: [" + std::to_string(offset) + "," +
                         std::to_string(offset + width) + ") out of range for width " +
                         std::to_string(n));
    }
    Tensor<S> out({m, width});
    for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(&av.data[i * n + offset], width, &out.data[i * width]);
    }
    return t.push(std::move(out), {a.id},
                  [a, offset, width, m, n](Tape<S>& tp, const Tensor<S>& g) {
                      Tensor<S>& ga = tp.grad_buffer(a.id);
                      for (std::size_t i = 0; i < m; ++i) {
                          const S* src = &g.data[i * width];
                          S* dst = &ga.data[i * n + offset];
                          for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
                      }
                  });
}

// Row slice [offset, offset+count) of a rank-2 tensor.
template <class S>
Var slice_rows(Tape<S>& t, Var a, std::size_t offset, std::size_t count) {
    const Tensor<S>& av = t.value(a);
    require_rank2(av, "slice_rows input");
    const std::size_t m = av.shape[0], n = av.shape[1];
    if (count == 0 || offset + count > m) {
        throw ShapeError("slice_rows: [" + std::to_string(offset) + "," +
                         std::to_string(offset + count) + ") out of range for " +
                         std::to_string(m) + " rows");
    }
    Tensor<S> out({count, n});
    std::copy_n(&av.data[offset * n], count * n, out.data.data());
    return t.push(std::move(out), {a.id},
                  [a, offset, count, n](Tape<S>& tp, const Tensor<S>& g) {
                      Tensor<S>& ga = tp.grad_buffer(a.id);
                      for (std::size_t i = 0; i < count * n; ++i) {
                          ga.data[offset * n + i] += g.data[i];
                      }
                  });
}

// Horizontal concatenation of rank-2 tensors with equal row counts.
template <class S>
Var concat_cols(Tape<S>& t, const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t m = t.value(parts[0]).shape[0];
    std::size_t total = 0;
    for (Var p : parts) {
        const Tensor<S>& pv = t.value(p);
        require_rank2(pv, "concat_cols input");
        if (pv.shape[0] != m) throw ShapeError("concat_cols: row count mismatch");
        total += pv.shape[1];
    }
    Tensor<S> out({m, total});
    std::vector<std::uint32_t> parent_ids;
    std::vector<std::size_t> widths;
    std::size_t offset = 0;
    for (Var p : parts) {
        const Tensor<S>& pv = t.value(p);
        const std::size_t w = pv.shape[1];
        for (std::size_t i = 0; i < m; ++i) {
            std::copy_n(&pv.data[i * w], w, &out.data[i * total + offset]);
        }
        parent_ids.push_back(p.id);
        widths.push_back(w);
        offset += w;
    }
    return t.push(std::move(out), parent_ids,
                  [parent_ids, widths, m, total](Tape<S>& tp, const Tensor<S>& g) {
                      std::size_t off = 0;
                      for (std::size_t k = 0; k < parent_ids.size(); ++k) {
                          Tensor<S>& gp = tp.grad_buffer(parent_ids[k]);
                          const std::size_t w = widths[k];
                          for (std::size_t i = 0; i < m; ++i) {
                              const S* src = &g.data[i * total + off];
                              S* dst = &gp.data[i * w];
                              for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
                          }
                          off += w;
                      }
                  });
}

// Vertical concatenation of rank-2 tensors with equal column counts.
template <class S>
Var concat_rows(Tape<S>& t, const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t n = t.value(parts[0]).shape[1];
    std::size_t total = 0;
    for (Var p : parts) {
        const Tensor<S>& pv = t.value(p);
        require_rank2(pv, "concat_rows input");
        if (pv.shape[1] != n) throw ShapeError("concat_rows: column count mismatch");
        total += pv.shape[0];
    }
    Tensor<S> out({total, n});
    std::vector<std::uint32_t> parent_ids;
    std::vector<std::size_t> counts;
    std::size_t offset = 0;
    for (Var p : parts) {
        const Tensor<S>& pv = t.value(p);
        std::copy_n(pv.data.data(), pv.data.size(), &out.data[offset * n]);
        parent_ids.push_back(p.id);
        counts.push_back(pv.shape[0]);
        offset += pv.shape[0];
    }
    return t.push(std::move(out), parent_ids,
                  [parent_ids, counts, n](Tape<S>& tp, const Tensor<S>& g) {
                      std::size_t off = 0;
                      for (std::size_t k = 0; k < parent_ids.size(); ++k) {
                          Tensor<S>& gp = tp.grad_buffer(parent_ids[k]);
                          for (std::size_t i = 0; i < counts[k] * n; ++i) {
                              gp.data[i] += g.data[off * n + i];
                          }
                          off += counts[k];
                      }
                  });
}

template <class S>
Var sum(Tape<S>& t, Var a) {
    const Tensor<S>& av = t.value(a);
    double total = 0.0;
    for (S v : av.data) total += static_cast<double>(v);
    return t.push(Tensor<S>::scalar(static_cast<S>(total)), {a.id},
                  [a](Tape<S>& tp, const Tensor<S>& g) {
                      Tensor<S>& ga = tp.grad_buffer(a.id);
                      for (S& v : ga.data) v += g.data[0];
                  });
}

// Mean cross entropy over rows of `logits` [N,V] against integer targets.
// Optional per-row weights; the divisor is the weight sum, so zero-weight
// rows drop out of both the loss and the gradient entirely.
template <class S>
Var cross_entropy(Tape<S>& t, Var logits, const std::vector<std::size_t>& targets,
                  const std::vector<double>& weights = {}) {
    const Tensor<S>& lv = t.value(logits);
    require_rank2(lv, "cross_entropy logits");
    const std::size_t rows = lv.shape[0], vocab = lv.shape[1];
    if (targets.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " logit rows");
    }
    if (!weights.empty() && weights.size() != rows) {
        throw ShapeError("cross_entropy: weight count mismatch");
    }
    double weight_sum = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        weight_sum += weights.empty() ? 1.0 : weights[i];
    }
    if (weight_sum <= 0.0) throw ContractError("cross_entropy: weight sum must be positive");

    // Probabilities are kept for backward; log-sum-exp is fused here.
    auto probs = std::make_shared<std::vector<S>>(rows * vocab);
    double loss = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        if (targets[i] >= vocab) {
            throw DomainError("cross_entropy: target " + std::to_string(targets[i]) +
                              " out of range for vocab " + std::to_string(vocab));
        }
        const S* row = &lv.data[i * vocab];
        S mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        double sum_exp = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            const double e = std::exp(static_cast<double>(row[j] - mx));
            (*probs)[i * vocab + j] = static_cast<S>(e);
            sum_exp += e;
        }
        const double inv = 1.0 / sum_exp;
        for (std::size_t j = 0; j < vocab; ++j) (*probs)[i * vocab + j] *= static_cast<S>(inv);
        const double w = weights.empty() ? 1.0 : weights[i];
        const double log_p = static_cast<double>(row[targets[i]] - mx) - std::log(sum_exp);
        loss -= w * log_p;
    }
    loss /= weight_sum;
    return t.push(Tensor<S>::scalar(static_cast<S>(loss)), {logits.id},
                  [logits, targets, weights, weight_sum, probs, rows, vocab](
                      Tape<S>& tp, const Tensor<S>& g) {
                      Tensor<S>& gl = tp.grad_buffer(logits.id);
                      const S gout = g.data[0];
                      for (std::size_t i = 0; i < rows; ++i) {
                          const double w = weights.empty() ? 1.0 : weights[i];
                          if (w == 0.0) continue;
                          const S f = static_cast<S>(w / weight_sum) * gout;
                          const S* prow = &(*probs)[i * vocab];
                          S* grow = &gl.data[i * vocab];
                          for (std::size_t j = 0; j < vocab; ++j) grow[j] += f * prow[j];
                          grow[targets[i]] -= f;
                      }
                  });
}

// Inverted dropout; mask entries are 0 or 1/(1-p). p == 0 is the identity
// and adds no node.
template <class S>
Var dropout(Tape<S>& t, Var a, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw DomainError("dropout: p must be in [0, 1)");
    if (p == 0.0) return a;
    const Tensor<S>& av = t.value(a);
    const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
    auto mask = std::make_shared<std::vector<S>>(av.data.size());
    Tensor<S> out(av.shape);
    for (std::size_t i = 0; i < av.data.size(); ++i) {
        const S m = rng.uniform() < p ? S(0) : keep_scale;
        (*mask)[i] = m;
        out.data[i] = av.data[i] * m;
    }
    return t.push(std::move(out), {a.id},
                  [a, mask](Tape<S>& tp, const Tensor<S>& g) {
                      Tensor<S>& ga = tp.grad_buffer(a.id);
                      for (std::size_t i = 0; i < g.data.size(); ++i) {
                          ga.data[i] += g.data[i] * (*mask)[i];
                      }
                  });
}

}  // namespace ops

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace bmlm
