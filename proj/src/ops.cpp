#include "groupalign/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

namespace groupalign {

namespace {

// Gradient buffer of a parent, or nullptr when it takes no gradient.
std::vector<double>* grad_vec(const Tensor& t) {
    auto* im = t.impl();
    return im->grad.empty() ? nullptr : &im->grad;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(where) + ": shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

// add/sub/mul accept same-shape pairs or rank-2 a with rank-1 b spread
// across a's rows.
bool row_broadcast(const Tensor& a, const Tensor& b, const char* where) {
    if (a.shape() == b.shape()) return false;
    if (a.rank() == 2 && b.rank() == 1 && a.cols() == b.cols()) return true;
    throw DimensionError(std::string(where) + ": shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()) + " are not broadcast-compatible");
}

Tensor unary_op(const Tensor& a, const char* name, double (*fwd)(double),
                double (*dfdx)(double, double)) {
    Tensor pa = a;
    Tensor out = make_op_output(a.shape(), {a}, [pa, dfdx](detail::TensorImpl& o) {
        if (auto* ga = grad_vec(pa)) {
            const auto& x = pa.impl()->data;
            for (std::size_t i = 0; i < o.data.size(); ++i)
                (*ga)[i] += dfdx(x[i], o.data[i]) * o.grad[i];
        }
    });
    const auto& x = a.data();
    auto& y = out.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(x[i]);
    check_finite(out, name);
    return out;
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (b.rank() != 2) throw DimensionError("matmul: b must be rank-2, got " + shape_str(b.shape()));
    if (a.rank() > 2) throw DimensionError("matmul: a has shape " + shape_str(a.shape()));
    int m = a.rows(), k = a.cols(), n = b.cols();
    if (k != b.rows())
        throw DimensionError("matmul: inner dimensions " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    std::vector<int> out_shape = a.rank() == 1 ? std::vector<int>{n} : std::vector<int>{m, n};

    Tensor pa = a, pb = b;
    Tensor out = make_op_output(out_shape, {a, b}, [pa, pb, m, k, n](detail::TensorImpl& o) {
        const auto& av = pa.impl()->data;
        const auto& bv = pb.impl()->data;
        if (auto* ga = grad_vec(pa)) {
            // dA = dC * B^T
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < k; ++j) {
                    double s = 0.0;
                    for (int c = 0; c < n; ++c) s += o.grad[i * n + c] * bv[j * n + c];
                    (*ga)[i * k + j] += s;
                }
        }
        if (auto* gb = grad_vec(pb)) {
            // dB = A^T * dC
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < k; ++j) {
                    double aij = av[i * k + j];
                    for (int c = 0; c < n; ++c) gb->operator[](j * n + c) += aij * o.grad[i * n + c];
                }
        }
    });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& cv = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) {
            double aij = av[i * k + j];
            for (int c = 0; c < n; ++c) cv[i * n + c] += aij * bv[j * n + c];
        }
    check_finite(out, "matmul");
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose: rank-2 only, got " + shape_str(a.shape()));
    int m = a.rows(), n = a.cols();
    Tensor pa = a;
    Tensor out = make_op_output({n, m}, {a}, [pa, m, n](detail::TensorImpl& o) {
        if (auto* ga = grad_vec(pa))
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) (*ga)[i * n + j] += o.grad[j * m + i];
    });
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data()[j * m + i] = a.at(i, j);
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    bool bcast = row_broadcast(a, b, "add");
    int m = a.rows(), n = a.cols();
    Tensor pa = a, pb = b;
    Tensor out = make_op_output(a.shape(), {a, b}, [pa, pb, bcast, m, n](detail::TensorImpl& o) {
        if (auto* ga = grad_vec(pa))
            for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i];
        if (auto* gb = grad_vec(pb)) {
            if (bcast) {
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) (*gb)[j] += o.grad[i * n + j];
            } else {
                for (std::size_t i = 0; i < o.grad.size(); ++i) (*gb)[i] += o.grad[i];
            }
        }
    });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& yv = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) yv[i * n + j] = av[i * n + j] + bv[bcast ? j : i * n + j];
    check_finite(out, "add");
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    bool bcast = row_broadcast(a, b, "sub");
    int m = a.rows(), n = a.cols();
    Tensor pa = a, pb = b;
    Tensor out = make_op_output(a.shape(), {a, b}, [pa, pb, bcast, m, n](detail::TensorImpl& o) {
        if (auto* ga = grad_vec(pa))
            for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i];
        if (auto* gb = grad_vec(pb)) {
            if (bcast) {
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) (*gb)[j] -= o.grad[i * n + j];
            } else {
                for (std::size_t i = 0; i < o.grad.size(); ++i) (*gb)[i] -= o.grad[i];
            }
        }
    });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& yv = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) yv[i * n + j] = av[i * n + j] - bv[bcast ? j : i * n + j];
    check_finite(out, "sub");
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    bool bcast = row_broadcast(a, b, "mul");
    int m = a.rows(), n = a.cols();
    Tensor pa = a, pb = b;
    Tensor out = make_op_output(a.shape(), {a, b}, [pa, pb, bcast, m, n](detail::TensorImpl& o) {
        const auto& av = pa.impl()->data;
        const auto& bv = pb.impl()->data;
        if (auto* ga = grad_vec(pa))
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    (*ga)[i * n + j] += o.grad[i * n + j] * bv[bcast ? j : i * n + j];
        if (auto* gb = grad_vec(pb)) {
            if (bcast) {
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) (*gb)[j] += o.grad[i * n + j] * av[i * n + j];
            } else {
                for (std::size_t i = 0; i < o.grad.size(); ++i) (*gb)[i] += o.grad[i] * av[i];
            }
        }
    });
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& yv = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) yv[i * n + j] = av[i * n + j] * bv[bcast ? j : i * n + j];
    check_finite(out, "mul");
    return out;
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1)
        throw DimensionError("mul_scalar: s has shape " + shape_str(s.shape()));
    Tensor pa = a, ps = s;
    Tensor out = make_op_output(a.shape(), {a, s}, [pa, ps](detail::TensorImpl& o) {
        double sv = ps.impl()->data[0];
        const auto& av = pa.impl()->data;
        if (auto* ga = grad_vec(pa))
            for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i] * sv;
        if (auto* gs = grad_vec(ps)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * av[i];
            (*gs)[0] += acc;
        }
    });
    double sv = s.data()[0];
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * sv;
    check_finite(out, "mul_scalar");
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor pa = a;
    Tensor out = make_op_output(a.shape(), {a}, [pa, c](detail::TensorImpl& o) {
        if (auto* ga = grad_vec(pa))
            for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += c * o.grad[i];
    });
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = c * a.data()[i];
    check_finite(out, "scale");
    return out;
}

Tensor add_const(const Tensor& a, double c) {
    Tensor pa = a;
    Tensor out = make_op_output(a.shape(), {a}, [pa](detail::TensorImpl& o) {
        if (auto* ga = grad_vec(pa))
            for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i];
    });
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + c;
    check_finite(out, "add_const");
    return out;
}

Tensor square(const Tensor& a) {
    return unary_op(a, "square", [](double x) { return x * x; },
                    [](double x, double) { return 2.0 * x; });
}

Tensor exp(const Tensor& a) {
    return unary_op(a, "exp", [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(a, "log", [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(a, "tanh", [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(a, "sigmoid", &stable_sigmoid,
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
    // log(sigmoid(x)) = min(x, 0) - log1p(exp(-|x|)); d/dx = sigmoid(-x).
    return unary_op(a, "log_sigmoid",
                    [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); },
                    [](double x, double) { return stable_sigmoid(-x); });
}

Tensor gelu(const Tensor& a) {
    return unary_op(a, "gelu",
                    [](double x) {
                        double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
                        return 0.5 * x * (1.0 + t);
                    },
                    [](double x, double) {
                        double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
                        double dgdx = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
                        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dgdx;
                    });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo <= hi)) throw ContractError("clamp: lo > hi");
    Tensor pa = a;
    Tensor out = make_op_output(a.shape(), {a}, [pa, lo, hi](detail::TensorImpl& o) {
        if (auto* ga = grad_vec(pa)) {
            const auto& x = pa.impl()->data;
            for (std::size_t i = 0; i < o.grad.size(); ++i)
                if (x[i] >= lo && x[i] <= hi) (*ga)[i] += o.grad[i];
        }
    });
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data()[i] = std::min(std::max(a.data()[i], lo), hi);
    check_finite(out, "clamp");
    return out;
}

Tensor softmax(const Tensor& a) {
    int m = a.rows(), n = a.cols();
    if (n == 0) throw DimensionError("softmax: empty axis");
    Tensor pa = a;
    Tensor out = make_op_output(a.shape(), {a}, [pa, m, n](detail::TensorImpl& o) {
        // dx = y * (dy - <dy, y>) per row.
        if (auto* ga = grad_vec(pa))
            for (int i = 0; i < m; ++i) {
                double inner = 0.0;
                for (int j = 0; j < n; ++j) inner += o.grad[i * n + j] * o.data[i * n + j];
                for (int j = 0; j < n; ++j)
                    (*ga)[i * n + j] += o.data[i * n + j] * (o.grad[i * n + j] - inner);
            }
    });
    const auto& x = a.data();
    auto& y = out.data();
    for (int i = 0; i < m; ++i) {
        double mx = x[i * n];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            y[i * n + j] = std::exp(x[i * n + j] - mx);
            z += y[i * n + j];
        }
        for (int j = 0; j < n; ++j) y[i * n + j] /= z;
    }
    check_finite(out, "softmax");
    return out;
}

Tensor logsumexp(const Tensor& a) {
    if (a.rank() != 1) throw DimensionError("logsumexp: rank-1 only, got " + shape_str(a.shape()));
    int n = a.cols();
    if (n == 0) throw DimensionError("logsumexp: empty input");
    Tensor pa = a;
    Tensor out = make_op_output({1}, {a}, [pa, n](detail::TensorImpl& o) {
        if (auto* ga = grad_vec(pa)) {
            const auto& x = pa.impl()->data;
            double mx = x[0];
            for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
            double z = 0.0;
            for (int j = 0; j < n; ++j) z += std::exp(x[j] - mx);
            for (int j = 0; j < n; ++j) (*ga)[j] += o.grad[0] * std::exp(x[j] - mx) / z;
        }
    });
    const auto& x = a.data();
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    // For n == 1 this is mx + log(1) == x[0] exactly.
    out.data()[0] = mx + std::log(z);
    check_finite(out, "logsumexp");
    return out;
}

Tensor sum(const Tensor& a) {
    Tensor pa = a;
    Tensor out = make_op_output({1}, {a}, [pa](detail::TensorImpl& o) {
        if (auto* ga = grad_vec(pa))
            for (auto& g : *ga) g += o.grad[0];
    });
    double s = 0.0;
    for (double x : a.data()) s += x;
    out.data()[0] = s;
    check_finite(out, "sum");
    return out;
}

Tensor mean(const Tensor& a) {
    double inv = 1.0 / static_cast<double>(a.numel());
    return scale(sum(a), inv);
}

Tensor mean_axis0(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("mean_axis0: rank-2 only, got " + shape_str(a.shape()));
    int m = a.rows(), n = a.cols();
    double inv = 1.0 / static_cast<double>(m);
    Tensor pa = a;
    Tensor out = make_op_output({n}, {a}, [pa, m, n, inv](detail::TensorImpl& o) {
        if (auto* ga = grad_vec(pa))
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) (*ga)[i * n + j] += inv * o.grad[j];
    });
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data()[j] += inv * a.at(i, j);
    check_finite(out, "mean_axis0");
    return out;
}

Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1) throw DimensionError("dot: rank-1 inputs required");
    require_same_shape(a, b, "dot");
    Tensor pa = a, pb = b;
    Tensor out = make_op_output({1}, {a, b}, [pa, pb](detail::TensorImpl& o) {
        const auto& av = pa.impl()->data;
        const auto& bv = pb.impl()->data;
        if (auto* ga = grad_vec(pa))
            for (std::size_t i = 0; i < av.size(); ++i) (*ga)[i] += o.grad[0] * bv[i];
        if (auto* gb = grad_vec(pb))
            for (std::size_t i = 0; i < bv.size(); ++i) (*gb)[i] += o.grad[0] * av[i];
    });
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i] * b.data()[i];
    out.data()[0] = s;
    check_finite(out, "dot");
    return out;
}

Tensor add_n(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ContractError("add_n: empty input list");
    for (const auto& x : xs) require_same_shape(xs[0], x, "add_n");
    std::vector<Tensor> parents(xs.begin(), xs.end());
    Tensor out = make_op_output(xs[0].shape(), parents, [parents](detail::TensorImpl& o) {
        for (const auto& p : parents)
            if (auto* g = grad_vec(p))
                for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
    });
    for (const auto& x : xs)
        for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] += x.data()[i];
    check_finite(out, "add_n");
    return out;
}

Tensor concat(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ContractError("concat: empty input list");
    int rank = xs[0].rank();
    for (const auto& x : xs)
        if (x.rank() != rank) throw DimensionError("concat: mixed ranks");
    int m = xs[0].rows();
    int total = 0;
    for (const auto& x : xs) {
        if (rank == 2 && x.rows() != m) throw DimensionError("concat: row counts differ");
        total += x.cols();
    }
    std::vector<int> out_shape = rank == 1 ? std::vector<int>{total} : std::vector<int>{m, total};

    std::vector<Tensor> parents(xs.begin(), xs.end());
    Tensor out = make_op_output(out_shape, parents, [parents, m, total](detail::TensorImpl& o) {
        int off = 0;
        for (const auto& p : parents) {
            int w = p.cols();
            if (auto* g = grad_vec(p))
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j) (*g)[i * w + j] += o.grad[i * total + off + j];
            off += w;
        }
    });
    int off = 0;
    for (const auto& x : xs) {
        int w = x.cols();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) out.data()[i * total + off + j] = x.data()[i * w + j];
        off += w;
    }
    check_finite(out, "concat");
    return out;
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
    int m = a.rows(), n = a.cols();
    if (c0 < 0 || c1 > n || c0 >= c1)
        throw IndexError("slice_cols: [" + std::to_string(c0) + ", " + std::to_string(c1) +
                         ") of width " + std::to_string(n));
    int w = c1 - c0;
    std::vector<int> out_shape = a.rank() == 1 ? std::vector<int>{w} : std::vector<int>{m, w};
    Tensor pa = a;
    Tensor out = make_op_output(out_shape, {a}, [pa, m, n, c0, w](detail::TensorImpl& o) {
        if (auto* ga = grad_vec(pa))
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j) (*ga)[i * n + c0 + j] += o.grad[i * w + j];
    });
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) out.data()[i * w + j] = a.data()[i * n + c0 + j];
    return out;
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2)
        throw DimensionError("embedding_rows: table must be rank-2, got " + shape_str(table.shape()));
    if (ids.empty()) throw ContractError("embedding_rows: empty id list");
    int v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || id >= v)
            throw IndexError("embedding_rows: id " + std::to_string(id) + " outside table of " +
                             std::to_string(v));
    int m = static_cast<int>(ids.size());
    Tensor pt = table;
    Tensor out = make_op_output({m, d}, {table}, [pt, ids, d](detail::TensorImpl& o) {
        if (auto* gt = grad_vec(pt))
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < d; ++j) (*gt)[ids[i] * d + j] += o.grad[i * d + j];
    });
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) out.data()[i * d + j] = table.at(ids[i], j);
    check_finite(out, "embedding_rows");
    return out;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    Tensor pa = a;
    Tensor out = make_op_output(std::move(shape), {a}, [pa](detail::TensorImpl& o) {
        if (auto* ga = grad_vec(pa))
            for (std::size_t i = 0; i < o.grad.size(); ++i) (*ga)[i] += o.grad[i];
    });
    out.data() = a.data();
    return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    int m = x.rows(), n = x.cols();
    if (gain.rank() != 1 || gain.cols() != n || bias.rank() != 1 || bias.cols() != n)
        throw DimensionError("layernorm: gain/bias must be rank-1 of width " + std::to_string(n));

    std::vector<double> xh(static_cast<std::size_t>(m) * n);
    std::vector<double> inv(m);
    const auto& xv = x.data();
    for (int i = 0; i < m; ++i) {
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += xv[i * n + j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            double c = xv[i * n + j] - mu;
            var += c * c;
        }
        var /= n;
        inv[i] = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < n; ++j) xh[i * n + j] = (xv[i * n + j] - mu) * inv[i];
    }

    Tensor px = x, pg = gain, pb = bias;
    Tensor out = make_op_output(
        x.shape(), {x, gain, bias}, [px, pg, pb, xh, inv, m, n](detail::TensorImpl& o) {
            const auto& gv = pg.impl()->data;
            if (auto* gx = grad_vec(px))
                for (int i = 0; i < m; ++i) {
                    // dxh = dout * gain; dx = inv * (dxh - mean(dxh) - xh * mean(dxh*xh)).
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < n; ++j) {
                        double dxh = o.grad[i * n + j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xh[i * n + j];
                    }
                    m1 /= n;
                    m2 /= n;
                    for (int j = 0; j < n; ++j) {
                        double dxh = o.grad[i * n + j] * gv[j];
                        (*gx)[i * n + j] += inv[i] * (dxh - m1 - xh[i * n + j] * m2);
                    }
                }
            if (auto* gg = grad_vec(pg))
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) (*gg)[j] += o.grad[i * n + j] * xh[i * n + j];
            if (auto* gb = grad_vec(pb))
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) (*gb)[j] += o.grad[i * n + j];
        });
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data()[i * n + j] = gv[j] * xh[i * n + j] + bv[j];
    check_finite(out, "layernorm");
    return out;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1) throw DimensionError("cosine_similarity: rank-1 inputs required");
    require_same_shape(a, b, "cosine_similarity");
    const auto& av = a.data();
    const auto& bv = b.data();
    double na2 = 0.0, nb2 = 0.0, ab = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        na2 += av[i] * av[i];
        nb2 += bv[i] * bv[i];
        ab += av[i] * bv[i];
    }
    if (na2 == 0.0 || nb2 == 0.0)
        throw DegenerateInputError("cosine_similarity: zero-norm input");
    double denom = std::sqrt(na2 * nb2);
    double c = ab / denom;

    Tensor pa = a, pb = b;
    Tensor out = make_op_output({1}, {a, b}, [pa, pb, na2, nb2, denom, c](detail::TensorImpl& o) {
        const auto& av = pa.impl()->data;
        const auto& bv = pb.impl()->data;
        if (auto* ga = grad_vec(pa))
            for (std::size_t i = 0; i < av.size(); ++i)
                (*ga)[i] += o.grad[0] * (bv[i] / denom - c * av[i] / na2);
        if (auto* gb = grad_vec(pb))
            for (std::size_t i = 0; i < bv.size(); ++i)
                (*gb)[i] += o.grad[0] * (av[i] / denom - c * bv[i] / nb2);
    });
    out.data()[0] = c;
    check_finite(out, "cosine_similarity");
    return out;
}

}  // namespace groupalign
