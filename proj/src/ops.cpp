#include "dpt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "dpt/error.hpp"
#include "vmath.hpp"

namespace dpt {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::size_t normalize_axis(int axis, std::size_t rank) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    }
    return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
    std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.n = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcast-compatible");
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Maps linear indices of a broadcast result back into one operand.
class Indexer {
public:
    Indexer(const Shape& in, const Shape& out) {
        n_ = shape_numel(in);
        if (in == out) {
            kind_ = Kind::kSame;
            return;
        }
        Shape stripped = in;
        while (!stripped.empty() && stripped.front() == 1) stripped.erase(stripped.begin());
        if (stripped.size() <= out.size() && std::equal(stripped.rbegin(), stripped.rend(), out.rbegin())) {
            kind_ = Kind::kModulo;
            return;
        }
        kind_ = Kind::kGeneral;
        const std::size_t r = out.size();
        const std::size_t offset = r - in.size();
        std::vector<std::size_t> stride(r, 0);
        std::size_t s = 1;
        for (std::size_t i = in.size(); i-- > 0;) {
            stride[i + offset] = in[i] == 1 ? 0 : s;
            s *= in[i];
        }
        const std::size_t total = shape_numel(out);
        map_.resize(total);
        std::vector<std::size_t> idx(r, 0);
        std::size_t pos = 0;
        for (std::size_t k = 0; k < total; ++k) {
            map_[k] = pos;
            for (std::size_t d = r; d-- > 0;) {
                ++idx[d];
                pos += stride[d];
                if (idx[d] < out[d]) break;
                pos -= stride[d] * idx[d];
                idx[d] = 0;
            }
        }
    }

    bool same() const { return kind_ == Kind::kSame; }
    bool modulo() const { return kind_ == Kind::kModulo; }
    std::size_t size() const { return n_; }

    std::size_t operator()(std::size_t i) const {
        switch (kind_) {
            case Kind::kSame: return i;
            case Kind::kModulo: return i % n_;
            case Kind::kGeneral: return map_[i];
        }
        return i;
    }

private:
    enum class Kind { kSame, kModulo, kGeneral };
    Kind kind_ = Kind::kSame;
    std::size_t n_ = 0;
    std::vector<std::size_t> map_;
};

// Visits (out, a, b) linear index triples of a broadcast. The common
// layouts (equal shapes, bias-style trailing broadcast) avoid per-element
// index arithmetic.
template <class Fn>
void for_each_broadcast(const Indexer& ia, const Indexer& ib, std::size_t n, Fn&& fn) {
    if (ia.same() && ib.same()) {
        for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    } else if (ia.same() && ib.modulo()) {
        const std::size_t w = ib.size();
        for (std::size_t o = 0; o < n; o += w)
            for (std::size_t j = 0; j < w; ++j) fn(o + j, o + j, j);
    } else if (ia.modulo() && ib.same()) {
        const std::size_t w = ia.size();
        for (std::size_t o = 0; o < n; o += w)
            for (std::size_t j = 0; j < w; ++j) fn(o + j, j, o + j);
    } else {
        for (std::size_t i = 0; i < n; ++i) fn(i, ia(i), ib(i));
    }
}

// f(x, y) -> value; da(x, y) and db(x, y) -> local partials.
template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Indexer ia(a.shape(), out_shape);
    Indexer ib(b.shape(), out_shape);
    const std::size_t n = shape_numel(out_shape);
    std::vector<double> out(n);
    const double* x = a.data().data();
    const double* y = b.data().data();
    double* o = out.data();
    for_each_broadcast(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) { o[i] = f(x[j], y[k]); });
    return Tensor::make_result(std::move(out_shape), std::move(out), {a, b}, name,
                               [ia = std::move(ia), ib = std::move(ib), da, db](detail::Node& self) {
                                   detail::Node& pa = *self.parents[0];
                                   detail::Node& pb = *self.parents[1];
                                   const double* g = self.grad.data();
                                   const double* x = pa.data.data();
                                   const double* y = pb.data.data();
                                   const std::size_t n = self.grad.size();
                                   if (pa.requires_grad) {
                                       double* ga = pa.ensure_grad().data();
                                       for_each_broadcast(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
                                           ga[j] += g[i] * da(x[j], y[k]);
                                       });
                                   }
                                   if (pb.requires_grad) {
                                       double* gb = pb.ensure_grad().data();
                                       for_each_broadcast(ia, ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
                                           gb[k] += g[i] * db(x[j], y[k]);
                                       });
                                   }
                               });
}

// Accumulating kernels for the tiny per-head products in attention, where
// GEMM dispatch overhead dominates. Row-major; c must be zeroed or hold a
// running sum.
// c[m, n] += a[m, k] b[k, n]
void small_mm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c, Eigen::Index m,
                 Eigen::Index k, Eigen::Index n) {
    for (Eigen::Index i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (Eigen::Index p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* bp = b + p * n;
            for (Eigen::Index j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m, n] += a[m, k] b[n, k]^T
void small_mm_nt(const double* __restrict a, const double* __restrict b, double* __restrict c, Eigen::Index m,
                 Eigen::Index k, Eigen::Index n) {
    for (Eigen::Index i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        for (Eigen::Index j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (Eigen::Index p = 0; p < k; ++p) acc += ai[p] * bj[p];
            c[i * n + j] += acc;
        }
    }
}

// c[k, n] += a[m, k]^T b[m, n]
void small_mm_tn(const double* __restrict a, const double* __restrict b, double* __restrict c, Eigen::Index m,
                 Eigen::Index k, Eigen::Index n) {
    for (Eigen::Index i = 0; i < m; ++i) {
        const double* bi = b + i * n;
        for (Eigen::Index p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            double* cp = c + p * n;
            for (Eigen::Index j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const auto m = static_cast<Eigen::Index>(a.dim(0));
    const auto k = static_cast<Eigen::Index>(a.dim(1));
    const auto n = static_cast<Eigen::Index>(b.dim(1));
    std::vector<double> out(static_cast<std::size_t>(m * n));
    MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
    return Tensor::make_result({a.dim(0), b.dim(1)}, std::move(out), {a, b}, "matmul", [m, k, n](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        ConstMap dc(self.grad.data(), m, n);
        if (pa.requires_grad) {
            MutMap(pa.ensure_grad().data(), m, k).noalias() += dc * ConstMap(pb.data.data(), k, n).transpose();
        }
        if (pb.requires_grad) {
            MutMap(pb.ensure_grad().data(), k, n).noalias() += ConstMap(pa.data.data(), m, k).transpose() * dc;
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(0) || b.dim(0) != w.dim(1)) {
        throw DimensionError("linear shape mismatch: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()) +
                             ", b " + shape_str(b.shape()));
    }
    const auto m = static_cast<Eigen::Index>(x.dim(0));
    const auto k = static_cast<Eigen::Index>(x.dim(1));
    const auto n = static_cast<Eigen::Index>(w.dim(1));
    std::vector<double> out(static_cast<std::size_t>(m * n));
    MutMap y(out.data(), m, n);
    y.noalias() = ConstMap(x.data().data(), m, k) * ConstMap(w.data().data(), k, n);
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), n);
    return Tensor::make_result({x.dim(0), w.dim(1)}, std::move(out), {x, w, b}, "linear",
                               [m, k, n](detail::Node& self) {
                                   detail::Node& px = *self.parents[0];
                                   detail::Node& pw = *self.parents[1];
                                   detail::Node& pb = *self.parents[2];
                                   ConstMap dy(self.grad.data(), m, n);
                                   if (px.requires_grad) {
                                       MutMap(px.ensure_grad().data(), m, k).noalias() +=
                                           dy * ConstMap(pw.data.data(), k, n).transpose();
                                   }
                                   if (pw.requires_grad) {
                                       MutMap(pw.ensure_grad().data(), k, n).noalias() +=
                                           ConstMap(px.data.data(), m, k).transpose() * dy;
                                   }
                                   if (pb.requires_grad) {
                                       // Row by row, so the summation order never depends on alignment.
                                       double* gb = pb.ensure_grad().data();
                                       for (Eigen::Index i = 0; i < m; ++i) {
                                           const double* row = self.grad.data() + i * n;
                                           for (Eigen::Index j = 0; j < n; ++j) gb[j] += row[j];
                                       }
                                   }
                               });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
    const bool ok_rank = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0);
    const std::size_t inner_b = ok_rank ? (transpose_b ? b.dim(2) : b.dim(1)) : 0;
    if (!ok_rank || a.dim(2) != inner_b) {
        throw DimensionError("bmm shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                             (transpose_b ? " (transposed)" : ""));
    }
    const std::size_t g = a.dim(0);
    const auto m = static_cast<Eigen::Index>(a.dim(1));
    const auto k = static_cast<Eigen::Index>(a.dim(2));
    const auto n = static_cast<Eigen::Index>(transpose_b ? b.dim(1) : b.dim(2));
    const std::size_t sa = static_cast<std::size_t>(m * k), sb = static_cast<std::size_t>(k * n),
                      sc = static_cast<std::size_t>(m * n);
    std::vector<double> out(g * sc);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t i = 0; i < g; ++i) {
        if (transpose_b) {
            small_mm_nt(ad + i * sa, bd + i * sb, out.data() + i * sc, m, k, n);
        } else {
            small_mm_nn(ad + i * sa, bd + i * sb, out.data() + i * sc, m, k, n);
        }
    }
    return Tensor::make_result(
        {g, a.dim(1), static_cast<std::size_t>(n)}, std::move(out), {a, b}, "bmm",
        [=](detail::Node& self) {
            detail::Node& pa = *self.parents[0];
            detail::Node& pb = *self.parents[1];
            double* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
            double* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
            for (std::size_t i = 0; i < g; ++i) {
                const double* dc = self.grad.data() + i * sc;
                const double* x = pa.data.data() + i * sa;
                const double* y = pb.data.data() + i * sb;
                if (transpose_b) {
                    // c = x y^T: dx += dc y, dy += dc^T x
                    if (ga) small_mm_nn(dc, y, ga + i * sa, m, n, k);
                    if (gb) small_mm_tn(dc, x, gb + i * sb, m, n, k);
                } else {
                    // c = x y: dx += dc y^T, dy += x^T dc
                    if (ga) small_mm_nt(dc, y, ga + i * sa, m, n, k);
                    if (gb) small_mm_tn(x, dc, gb + i * sb, m, k, n);
                }
            }
        });
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor elementwise_max(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, "max", [](double x, double y) { return x >= y ? x : y; },
        [](double x, double y) { return x >= y ? 1.0 : 0.0; }, [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor scale(const Tensor& x, double factor) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v *= factor;
    return Tensor::make_result(x.shape(), std::move(out), {x}, "scale", [factor](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return Tensor::make_result({}, {s}, {x}, "sum", [](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (double& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw InvalidArgument("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    return Tensor::make_result(std::move(shape), std::move(out), {x}, "reshape", [](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        // Same layout: hand the buffer over when the input has no gradient yet.
        // Intermediate gradients are not kept after the backward pass anyway.
        if (p.grad.empty()) {
            p.grad = std::move(self.grad);
            self.grad.clear();
            return;
        }
        auto& g = p.grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t r = x.rank();
    if (perm.size() != r) throw DimensionError("permutation rank mismatch for shape " + shape_str(x.shape()));
    std::vector<bool> used(r, false);
    for (std::size_t p : perm) {
        if (p >= r || used[p]) throw DimensionError("invalid permutation for shape " + shape_str(x.shape()));
        used[p] = true;
    }
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.shape()[i];
    Shape out_shape(r);
    std::vector<std::size_t> stride(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = x.shape()[perm[i]];
        stride[i] = in_stride[perm[i]];
    }
    const std::size_t total = x.numel();
    std::vector<std::size_t> src(total);
    std::vector<std::size_t> idx(r, 0);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < total; ++k) {
        src[k] = pos;
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            pos += stride[d];
            if (idx[d] < out_shape[d]) break;
            pos -= stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    std::vector<double> out(total);
    auto in = x.data();
    for (std::size_t k = 0; k < total; ++k) out[k] = in[src[k]];
    return Tensor::make_result(std::move(out_shape), std::move(out), {x}, "permute",
                               [src = std::move(src)](detail::Node& self) {
                                   auto& g = self.parents[0]->ensure_grad();
                                   for (std::size_t k = 0; k < src.size(); ++k) g[src[k]] += self.grad[k];
                               });
}

Tensor broadcast_to(const Tensor& x, Shape shape) {
    if (broadcast_shape(x.shape(), shape) != shape) {
        throw DimensionError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    Indexer ix(x.shape(), shape);
    const std::size_t n = shape_numel(shape);
    std::vector<double> out(n);
    auto in = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = in[ix(i)];
    return Tensor::make_result(std::move(shape), std::move(out), {x}, "broadcast_to",
                               [ix = std::move(ix)](detail::Node& self) {
                                   auto& g = self.parents[0]->ensure_grad();
                                   for (std::size_t i = 0; i < self.grad.size(); ++i) g[ix(i)] += self.grad[i];
                               });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw InvalidArgument("concat of no tensors");
    const std::size_t ax = normalize_axis(axis, parts[0].rank());
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != out_shape.size()) throw DimensionError("concat rank mismatch: " + shape_str(s));
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != ax && s[i] != out_shape[i]) {
                throw DimensionError("concat shape mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(s));
            }
        }
        out_shape[ax] += s[ax];
    }
    const AxisSplit outer = split_at(out_shape, ax);
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.dim(ax) * outer.inner);
    const std::size_t row = out_shape[ax] * outer.inner;
    std::vector<double> out(shape_numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        auto in = parts[p].data();
        for (std::size_t o = 0; o < outer.outer; ++o) {
            std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * widths[p]), widths[p],
                        out.begin() + static_cast<std::ptrdiff_t>(o * row + offset));
        }
        offset += widths[p];
    }
    return Tensor::make_result(std::move(out_shape), std::move(out), parts, "concat",
                               [widths, row, outer_n = outer.outer](detail::Node& self) {
                                   std::size_t off = 0;
                                   for (std::size_t p = 0; p < widths.size(); ++p) {
                                       detail::Node& parent = *self.parents[p];
                                       if (parent.requires_grad) {
                                           auto& g = parent.ensure_grad();
                                           for (std::size_t o = 0; o < outer_n; ++o) {
                                               const double* src = self.grad.data() + o * row + off;
                                               double* dst = g.data() + o * widths[p];
                                               for (std::size_t i = 0; i < widths[p]; ++i) dst[i] += src[i];
                                           }
                                       }
                                       off += widths[p];
                                   }
                               });
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
    const std::size_t ax = normalize_axis(axis, x.rank());
    if (begin > end || end > x.dim(ax)) {
        throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                             shape_str(x.shape()));
    }
    const AxisSplit s = split_at(x.shape(), ax);
    Shape out_shape = x.shape();
    out_shape[ax] = end - begin;
    const std::size_t width = (end - begin) * s.inner;
    const std::size_t row = s.n * s.inner;
    const std::size_t start = begin * s.inner;
    std::vector<double> out(s.outer * width);
    auto in = x.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * row + start), width,
                    out.begin() + static_cast<std::ptrdiff_t>(o * width));
    }
    return Tensor::make_result(std::move(out_shape), std::move(out), {x}, "slice",
                               [width, row, start, outer_n = s.outer](detail::Node& self) {
                                   auto& g = self.parents[0]->ensure_grad();
                                   for (std::size_t o = 0; o < outer_n; ++o) {
                                       for (std::size_t i = 0; i < width; ++i) {
                                           g[o * row + start + i] += self.grad[o * width + i];
                                       }
                                   }
                               });
}

Tensor softmax(const Tensor& x, int axis) {
    const std::size_t ax = normalize_axis(axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < s.inner; ++j) {
            const std::size_t base = o * s.n * s.inner + j;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < s.n; ++i) {
                const double v = in[base + i * s.inner];
                if (std::isnan(v)) throw NumericError("softmax input contains NaN");
                mx = std::max(mx, v);
            }
            for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] = in[base + i * s.inner] - mx;
        }
    }
    vmath::exp_inplace(out.data(), out.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < s.inner; ++j) {
            const std::size_t base = o * s.n * s.inner + j;
            double z = 0.0;
            for (std::size_t i = 0; i < s.n; ++i) z += out[base + i * s.inner];
            const double inv = 1.0 / z;
            for (std::size_t i = 0; i < s.n; ++i) out[base + i * s.inner] *= inv;
        }
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, "softmax", [s](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        const auto& y = self.data;
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t j = 0; j < s.inner; ++j) {
                const std::size_t base = o * s.n * s.inner + j;
                double dot = 0.0;
                for (std::size_t i = 0; i < s.n; ++i) dot += self.grad[base + i * s.inner] * y[base + i * s.inner];
                for (std::size_t i = 0; i < s.n; ++i) {
                    const std::size_t k = base + i * s.inner;
                    g[k] += y[k] * (self.grad[k] - dot);
                }
            }
        }
    });
}

Tensor logsumexp(const Tensor& x, int axis) {
    const std::size_t ax = normalize_axis(axis, x.rank());
    const AxisSplit s = split_at(x.shape(), ax);
    if (s.n == 0) throw DimensionError("logsumexp over empty axis");
    auto in = x.data();
    std::vector<double> out(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < s.inner; ++j) {
            const std::size_t base = o * s.n * s.inner + j;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, in[base + i * s.inner]);
            double z = 0.0;
            for (std::size_t i = 0; i < s.n; ++i) z += std::exp(in[base + i * s.inner] - mx);
            out[o * s.inner + j] = mx + std::log(z);
        }
    }
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    return Tensor::make_result(std::move(out_shape), std::move(out), {x}, "logsumexp", [s](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        auto& g = p.ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t j = 0; j < s.inner; ++j) {
                const std::size_t base = o * s.n * s.inner + j;
                const double lse = self.data[o * s.inner + j];
                const double up = self.grad[o * s.inner + j];
                for (std::size_t i = 0; i < s.n; ++i) {
                    const std::size_t k = base + i * s.inner;
                    g[k] += up * std::exp(p.data[k] - lse);
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() == 0 || gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != x.shape().back() ||
        beta.dim(0) != x.shape().back()) {
        throw DimensionError("layer_norm shape mismatch: x " + shape_str(x.shape()) + ", gamma " +
                             shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
    }
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    auto in = x.data();
    auto gm = gamma.data();
    auto bt = beta.data();
    std::vector<double> xhat(in.size());
    std::vector<double> rstd(rows);
    std::vector<double> out(in.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * d;
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) mu += row[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + eps);
        rstd[r] = rs;
        for (std::size_t i = 0; i < d; ++i) {
            const double h = (row[i] - mu) * rs;
            xhat[r * d + i] = h;
            out[r * d + i] = h * gm[i] + bt[i];
        }
    }
    return Tensor::make_result(
        x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
        [xhat = std::move(xhat), rstd = std::move(rstd), d, rows](detail::Node& self) {
            detail::Node& px = *self.parents[0];
            detail::Node& pg = *self.parents[1];
            detail::Node& pb = *self.parents[2];
            const auto& dy = self.grad;
            if (pg.requires_grad) {
                auto& gg = pg.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < d; ++i) gg[i] += dy[r * d + i] * xhat[r * d + i];
            }
            if (pb.requires_grad) {
                auto& gb = pb.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < d; ++i) gb[i] += dy[r * d + i];
            }
            if (px.requires_grad) {
                auto& gx = px.ensure_grad();
                const auto& gm = pg.data;
                const double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t i = 0; i < d; ++i) {
                        const double dh = dy[r * d + i] * gm[i];
                        m1 += dh;
                        m2 += dh * xhat[r * d + i];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for (std::size_t i = 0; i < d; ++i) {
                        const double dh = dy[r * d + i] * gm[i];
                        gx[r * d + i] += rstd[r] * (dh - m1 - xhat[r * d + i] * m2);
                    }
                }
            }
        });
}

Tensor gelu(const Tensor& x) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    auto in = x.data();
    std::vector<double> out(in.size());
    std::vector<double> cdf(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) cdf[i] = in[i] * kInvSqrt2;
    vmath::erf_inplace(cdf.data(), cdf.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        cdf[i] = 0.5 * (1.0 + cdf[i]);
        out[i] = in[i] * cdf[i];
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, "gelu", [cdf = std::move(cdf)](detail::Node& self) {
        constexpr double kInvSqrt2Pi = 0.39894228040143267794;
        detail::Node& p = *self.parents[0];
        auto& g = p.ensure_grad();
        std::vector<double> pdf(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) pdf[i] = -0.5 * p.data[i] * p.data[i];
        vmath::exp_inplace(pdf.data(), pdf.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i] * (cdf[i] + p.data[i] * kInvSqrt2Pi * pdf[i]);
        }
    });
}

Tensor embedding_gather(const Tensor& table, std::span<const int> ids) {
    if (table.rank() != 2) throw DimensionError("embedding table must be 2-D, got " + shape_str(table.shape()));
    const std::size_t v = table.dim(0), d = table.dim(1);
    std::vector<int> rows(ids.begin(), ids.end());
    std::vector<double> out(rows.size() * d);
    auto t = table.data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || static_cast<std::size_t>(rows[r]) >= v) {
            throw InvalidArgument("embedding id " + std::to_string(rows[r]) + " outside table of " +
                                  std::to_string(v) + " rows");
        }
        std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(rows[r]) * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    Shape out_shape{rows.size(), d};
    return Tensor::make_result(std::move(out_shape), std::move(out), {table}, "embedding_gather",
                               [rows = std::move(rows), d](detail::Node& self) {
                                   auto& g = self.parents[0]->ensure_grad();
                                   for (std::size_t r = 0; r < rows.size(); ++r) {
                                       double* dst = g.data() + static_cast<std::size_t>(rows[r]) * d;
                                       const double* src = self.grad.data() + r * d;
                                       for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
                                   }
                               });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
    if (logits.rank() != 2) throw DimensionError("cross_entropy logits must be 2-D, got " + shape_str(logits.shape()));
    const std::size_t rows = logits.dim(0), k = logits.dim(1);
    if (targets.size() != rows || mask.size() != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(rows) + " logit rows but " +
                             std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                             " mask entries");
    }
    std::vector<std::size_t> picked;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= k) {
            throw InvalidArgument("cross_entropy target " + std::to_string(targets[r]) + " outside [0, " +
                                  std::to_string(k) + ")");
        }
        picked.push_back(r);
    }
    if (picked.empty()) throw InvalidArgument("cross_entropy mask selects no positions");
    auto in = logits.data();
    std::vector<double> probs(picked.size() * k);
    std::vector<int> tgt(picked.size());
    double total = 0.0;
    for (std::size_t p = 0; p < picked.size(); ++p) {
        const double* row = in.data() + picked[p] * k;
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            probs[p * k + j] = std::exp(row[j] - mx);
            z += probs[p * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) probs[p * k + j] /= z;
        tgt[p] = targets[picked[p]];
        total += (mx + std::log(z)) - row[tgt[p]];
    }
    const double inv = 1.0 / static_cast<double>(picked.size());
    return Tensor::make_result(
        {}, {total * inv}, {logits}, "cross_entropy",
        [picked = std::move(picked), probs = std::move(probs), tgt = std::move(tgt), k, inv](detail::Node& self) {
            auto& g = self.parents[0]->ensure_grad();
            const double up = self.grad[0] * inv;
            for (std::size_t p = 0; p < picked.size(); ++p) {
                double* row = g.data() + picked[p] * k;
                for (std::size_t j = 0; j < k; ++j) row[j] += up * probs[p * k + j];
                row[tgt[p]] -= up;
            }
        });
}

}  // namespace dpt
