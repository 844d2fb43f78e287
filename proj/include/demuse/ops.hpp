#pragma once

// Differentiable ops over Tensor. Forward kernels lean on Eigen maps over
// the tensors' own buffers; every backward is written out by hand and the
// whole set is validated against the finite-difference oracle in the tests.
//
// Determinism rule: every op must be a pure function of values and shapes,
// never of buffer addresses. Eigen is trusted for matrix products, single
// operation map expressions (one add/sub/mul/div per statement) and the
// fixed-block exp in detail::vexp_inplace. Sum-style reductions stay as
// plain sequential loops and a*b+c shapes stay as plain loops the compiler
// contracts uniformly, so alignment peeling can't shift low bits.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "demuse/tensor.hpp"

namespace demuse {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using ArrMap = Eigen::Map<Eigen::ArrayXd>;
using CArrMap = Eigen::Map<const Eigen::ArrayXd>;

inline MatMap mat(Tensor& t) { return MatMap(t.data().data(), t.rows(), t.cols()); }
inline CMatMap cmat(const Tensor& t) { return CMatMap(t.data().data(), t.rows(), t.cols()); }

namespace detail {

inline MatMap node_val(Tensor::Node& n) {
    int64_t c = n.shape.empty() ? 1 : n.shape.back();
    return MatMap(n.data->data(), n.size() / c, c);
}
inline MatMap node_grad(Tensor::Node& n) {
    n.ensure_grad();
    int64_t c = n.shape.empty() ? 1 : n.shape.back();
    return MatMap(n.grad.data(), n.size() / c, c);
}
inline ArrMap node_arr(Tensor::Node& n) { return ArrMap(n.data->data(), n.size()); }
inline ArrMap node_garr(Tensor::Node& n) {
    n.ensure_grad();
    return ArrMap(n.grad.data(), n.size());
}
inline CArrMap self_garr(Tensor::Node& n) {
    return CArrMap(n.grad.data(), static_cast<int64_t>(n.grad.size()));
}
inline bool wants(const Tensor::Node& n) { return n.requires_grad; }

inline void require_same_size(const Tensor& a, const Tensor& b, const char* op) {
    if (a.size() != b.size())
        throw RuntimeAbort(std::string(op) + ": size mismatch");
}

// Vectorized exp through a fixed-size aligned block. Results depend only on
// element values and array length, never on buffer addresses, so outputs stay
// bit-identical across allocator layouts and threads.
inline void vexp_inplace(double* p, int64_t n) {
    constexpr int64_t K = 64;
    alignas(64) double buf[K];
    using FixedArr = Eigen::Array<double, K, 1>;
    int64_t nb = (n / K) * K;
    for (int64_t i = 0; i < nb; i += K) {
        std::memcpy(buf, p + i, K * sizeof(double));
        Eigen::Map<FixedArr, Eigen::Aligned64> m(buf);
        m = m.exp();
        std::memcpy(p + i, buf, K * sizeof(double));
    }
    for (int64_t i = nb; i < n; ++i) p[i] = std::exp(p[i]);
}

// Per-thread scratch so hot backward passes don't reallocate every call.
inline std::vector<double>& tls_scratch() {
    thread_local std::vector<double> s;
    return s;
}

} // namespace detail

inline void check_finite(const Tensor& t, const char* what) {
    const auto& d = t.data();
    if (CArrMap(d.data(), d.size()).allFinite()) return;
    for (size_t i = 0; i < d.size(); ++i)
        if (!std::isfinite(d[i]))
            throw RuntimeAbort(std::string(what) + ": non-finite value at flat index " +
                               std::to_string(i));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_size(a, b, "add");
    Tensor out = make_op_result(a.shape(), {a, b}, [](Tensor::Node& self) {
        for (int i = 0; i < 2; ++i) {
            auto& p = *self.parents[i];
            if (!detail::wants(p)) continue;
            detail::node_garr(p) += detail::self_garr(self);
        }
    });
    detail::node_arr(*out.node()) =
        CArrMap(a.data().data(), a.size()) + CArrMap(b.data().data(), b.size());
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_size(a, b, "sub");
    Tensor out = make_op_result(a.shape(), {a, b}, [](Tensor::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (detail::wants(pa)) detail::node_garr(pa) += detail::self_garr(self);
        if (detail::wants(pb)) detail::node_garr(pb) -= detail::self_garr(self);
    });
    detail::node_arr(*out.node()) =
        CArrMap(a.data().data(), a.size()) - CArrMap(b.data().data(), b.size());
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_size(a, b, "mul");
    Tensor out = make_op_result(a.shape(), {a, b}, [](Tensor::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& av = *pa.data;
        const auto& bv = *pb.data;
        if (detail::wants(pa)) {
            pa.ensure_grad();
            for (size_t j = 0; j < self.grad.size(); ++j) pa.grad[j] += self.grad[j] * bv[j];
        }
        if (detail::wants(pb)) {
            pb.ensure_grad();
            for (size_t j = 0; j < self.grad.size(); ++j) pb.grad[j] += self.grad[j] * av[j];
        }
    });
    detail::node_arr(*out.node()) =
        CArrMap(a.data().data(), a.size()) * CArrMap(b.data().data(), b.size());
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = make_op_result(a.shape(), {a}, [s](Tensor::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (size_t j = 0; j < self.grad.size(); ++j) p.grad[j] += s * self.grad[j];
    });
    detail::node_arr(*out.node()) = s * CArrMap(a.data().data(), a.size());
    return out;
}

inline Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = make_op_result(a.shape(), {a}, [](Tensor::Node& self) {
        detail::node_garr(*self.parents[0]) += detail::self_garr(self);
    });
    detail::node_arr(*out.node()) = CArrMap(a.data().data(), a.size()) + s;
    return out;
}

// x: [R, C], b: [C] broadcast over rows
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    if (b.size() != x.cols()) throw RuntimeAbort("add_rowvec: bias width mismatch");
    Tensor out = make_op_result(x.shape(), {x, b}, [](Tensor::Node& self) {
        auto& px = *self.parents[0];
        auto& pb = *self.parents[1];
        int64_t C = self.shape.back();
        int64_t R = self.size() / C;
        if (detail::wants(px)) detail::node_garr(px) += detail::self_garr(self);
        if (detail::wants(pb)) {
            pb.ensure_grad();
            Eigen::Map<Eigen::RowVectorXd> bg(pb.grad.data(), C);
            for (int64_t r = 0; r < R; ++r)
                bg += Eigen::Map<const Eigen::RowVectorXd>(self.grad.data() + r * C, C);
        }
    });
    mat(out) = cmat(x).rowwise() + Eigen::Map<const Eigen::RowVectorXd>(b.data().data(),
                                                                        b.size());
    return out;
}

// a: [m, k], b: [k, n] -> [m, n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) throw RuntimeAbort("matmul: inner dim mismatch");
    Tensor out = make_op_result({a.rows(), b.cols()}, {a, b}, [](Tensor::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        auto A = detail::node_val(pa);
        auto B = detail::node_val(pb);
        int64_t m = A.rows(), n = B.cols();
        MatMap G(self.grad.data(), m, n);
        if (detail::wants(pa)) detail::node_grad(pa).noalias() += G * B.transpose();
        if (detail::wants(pb)) detail::node_grad(pb).noalias() += A.transpose() * G;
    });
    mat(out).noalias() = cmat(a) * cmat(b);
    return out;
}

// a: [m, k], b: [n, k] -> a * b^T, the natural layout for x * W^T with W [out, in]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) throw RuntimeAbort("matmul_nt: inner dim mismatch");
    Tensor out = make_op_result({a.rows(), b.rows()}, {a, b}, [](Tensor::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        auto A = detail::node_val(pa);
        auto B = detail::node_val(pb);
        MatMap G(self.grad.data(), A.rows(), B.rows());
        if (detail::wants(pa)) detail::node_grad(pa).noalias() += G * B;
        if (detail::wants(pb)) detail::node_grad(pb).noalias() += G.transpose() * A;
    });
    mat(out).noalias() = cmat(a) * cmat(b).transpose();
    return out;
}

// x [rows, in], W [out, in], b [out] -> x W^T + b, fused into one node
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.cols() != w.cols()) throw RuntimeAbort("linear: inner dim mismatch");
    if (b.size() != w.rows()) throw RuntimeAbort("linear: bias width mismatch");
    Tensor out = make_op_result({x.rows(), w.rows()}, {x, w, b}, [](Tensor::Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        auto X = detail::node_val(px);
        auto W = detail::node_val(pw);
        MatMap G(self.grad.data(), X.rows(), W.rows());
        if (detail::wants(px)) detail::node_grad(px).noalias() += G * W;
        if (detail::wants(pw)) detail::node_grad(pw).noalias() += G.transpose() * X;
        if (detail::wants(pb)) {
            pb.ensure_grad();
            Eigen::Map<Eigen::RowVectorXd> bg(pb.grad.data(), W.rows());
            for (int64_t r = 0; r < X.rows(); ++r) bg += G.row(r);
        }
    });
    auto O = mat(out);
    O.noalias() = cmat(x) * cmat(w).transpose();
    O.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), b.size());
    return out;
}

inline Tensor silu(const Tensor& x) {
    Tensor out = make_op_result(x.shape(), {x}, [](Tensor::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const auto& xv = *p.data;
        size_t n = self.grad.size();
        auto& e = detail::tls_scratch();
        e.resize(n);
        ArrMap em(e.data(), n);
        em = -detail::node_arr(p);
        detail::vexp_inplace(e.data(), n);
        for (size_t j = 0; j < n; ++j) {
            double s = 1.0 / (1.0 + e[j]);
            p.grad[j] += self.grad[j] * s * (1.0 + xv[j] * (1.0 - s));
        }
    });
    int64_t n = x.size();
    CArrMap xv(x.data().data(), n);
    ArrMap ov(out.data().data(), n);
    ov = -xv;
    detail::vexp_inplace(out.data().data(), n);
    ov = xv / (1.0 + ov);
    return out;
}

inline Tensor softmax_rows(const Tensor& x) {
    Tensor out = make_op_result(x.shape(), {x}, [](Tensor::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        auto Y = detail::node_val(self);
        int64_t R = Y.rows(), C = Y.cols();
        const double* y = self.data->data();
        for (int64_t r = 0; r < R; ++r) {
            double dot = 0.0;
            for (int64_t c = 0; c < C; ++c) dot += self.grad[r * C + c] * y[r * C + c];
            for (int64_t c = 0; c < C; ++c)
                p.grad[r * C + c] += y[r * C + c] * (self.grad[r * C + c] - dot);
        }
    });
    auto X = cmat(x);
    auto O = mat(out);
    int64_t R = x.rows(), C = x.cols();
    Eigen::VectorXd mx = X.rowwise().maxCoeff();
    O = X.colwise() - mx;
    detail::vexp_inplace(out.data().data(), R * C);
    double* ov = out.data().data();
    for (int64_t r = 0; r < R; ++r) {
        double sm = 0.0;
        for (int64_t c = 0; c < C; ++c) sm += ov[r * C + c];
        for (int64_t c = 0; c < C; ++c) ov[r * C + c] /= sm;
    }
    return out;
}

// Affine-free layer norm per row, biased variance. Errors carry the flat
// index of the first non-finite input.
inline Tensor layer_norm_rows(const Tensor& x, double eps = 1e-6) {
    const auto& xv = x.data();
    if (!CArrMap(xv.data(), xv.size()).allFinite())
        for (size_t i = 0; i < xv.size(); ++i)
            if (!std::isfinite(xv[i]))
                throw RuntimeAbort("layer_norm: non-finite input at flat index " +
                                   std::to_string(i));
    Tensor out = make_op_result(x.shape(), {x}, [eps](Tensor::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const double* xd = p.data->data();
        const double* yd = self.data->data();
        int64_t C = self.shape.back();
        int64_t R = self.size() / C;
        for (int64_t r = 0; r < R; ++r) {
            const double* xr = xd + r * C;
            const double* yr = yd + r * C;
            const double* gr = self.grad.data() + r * C;
            double mean = 0.0, var = 0.0;
            for (int64_t c = 0; c < C; ++c) mean += xr[c];
            mean /= C;
            for (int64_t c = 0; c < C; ++c) var += (xr[c] - mean) * (xr[c] - mean);
            var /= C;
            double inv = 1.0 / std::sqrt(var + eps);
            double gmean = 0.0, gdoty = 0.0;
            for (int64_t c = 0; c < C; ++c) {
                gmean += gr[c];
                gdoty += gr[c] * yr[c];
            }
            gmean /= C;
            gdoty /= C;
            for (int64_t c = 0; c < C; ++c)
                p.grad[r * C + c] += inv * (gr[c] - gmean - yr[c] * gdoty);
        }
    });
    auto& ov = out.data();
    int64_t R = x.rows(), C = x.cols();
    for (int64_t r = 0; r < R; ++r) {
        double mean = 0.0, var = 0.0;
        for (int64_t c = 0; c < C; ++c) mean += xv[r * C + c];
        mean /= C;
        for (int64_t c = 0; c < C; ++c) {
            double d = xv[r * C + c] - mean;
            var += d * d;
        }
        var /= C;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t c = 0; c < C; ++c) ov[r * C + c] = (xv[r * C + c] - mean) * inv;
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    Tensor out = make_op_result({1}, {x}, [](Tensor::Node& self) {
        detail::node_garr(*self.parents[0]) += self.grad[0];
    });
    double s = 0.0;
    for (double v : x.data()) s += v;
    out.data()[0] = s;
    return out;
}

inline Tensor mean(const Tensor& x) {
    int64_t n = x.size();
    Tensor out = make_op_result({1}, {x}, [n](Tensor::Node& self) {
        detail::node_garr(*self.parents[0]) += self.grad[0] / static_cast<double>(n);
    });
    double s = 0.0;
    for (double v : x.data()) s += v;
    out.data()[0] = s / static_cast<double>(n);
    return out;
}

// mean((pred - target)^2); target is data, not a graph node
inline Tensor mse(const Tensor& pred, const Tensor& target) {
    detail::require_same_size(pred, target, "mse");
    if (target.requires_grad()) throw RuntimeAbort("mse: target must not require grad");
    auto tgt = target.node()->data; // keep alive
    int64_t n = pred.size();
    Tensor out = make_op_result({1}, {pred}, [tgt, n](Tensor::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const auto& pv = *p.data;
        const auto& tv = *tgt;
        double g = 2.0 * self.grad[0] / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) p.grad[i] += g * (pv[i] - tv[i]);
    });
    const auto& pv = pred.data();
    const auto& tv = target.data();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = pv[i] - tv[i];
        s += d * d;
    }
    out.data()[0] = s / static_cast<double>(n);
    return out;
}

// out[r, :] = x[idx[r], :]
inline Tensor take_rows(const Tensor& x, std::shared_ptr<std::vector<int64_t>> idx) {
    int64_t C = x.cols();
    int64_t K = static_cast<int64_t>(idx->size());
    Tensor out = make_op_result({K, C}, {x}, [idx, C](Tensor::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        int64_t K2 = static_cast<int64_t>(idx->size());
        for (int64_t r = 0; r < K2; ++r) {
            double* dst = p.grad.data() + (*idx)[r] * C;
            const double* src = self.grad.data() + r * C;
            for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
        }
    });
    const auto& xv = x.data();
    auto& ov = out.data();
    int64_t R = x.rows();
    for (int64_t r = 0; r < K; ++r) {
        int64_t s = (*idx)[r];
        if (s < 0 || s >= R) throw RuntimeAbort("take_rows: index out of range");
        std::copy(xv.begin() + s * C, xv.begin() + (s + 1) * C, ov.begin() + r * C);
    }
    return out;
}

inline Tensor take_rows(const Tensor& x, const std::vector<int64_t>& idx) {
    return take_rows(x, std::make_shared<std::vector<int64_t>>(idx));
}

// adjoint of take_rows: out has total_rows rows, out[idx[r], :] += x[r, :]
inline Tensor scatter_rows(const Tensor& x, std::shared_ptr<std::vector<int64_t>> idx,
                           int64_t total_rows) {
    int64_t C = x.cols();
    Tensor out = make_op_result({total_rows, C}, {x}, [idx, C](Tensor::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        int64_t K = static_cast<int64_t>(idx->size());
        for (int64_t r = 0; r < K; ++r) {
            const double* src = self.grad.data() + (*idx)[r] * C;
            double* dst = p.grad.data() + r * C;
            for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
        }
    });
    const auto& xv = x.data();
    auto& ov = out.data();
    int64_t K = x.rows();
    for (int64_t r = 0; r < K; ++r) {
        int64_t d = (*idx)[r];
        if (d < 0 || d >= total_rows) throw RuntimeAbort("scatter_rows: index out of range");
        for (int64_t c = 0; c < C; ++c) ov[d * C + c] += xv[r * C + c];
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw RuntimeAbort("concat_cols: empty");
    int64_t R = parts[0].rows();
    int64_t C = 0;
    for (const auto& p : parts) {
        if (p.rows() != R) throw RuntimeAbort("concat_cols: row mismatch");
        C += p.cols();
    }
    std::vector<int64_t> widths;
    for (const auto& p : parts) widths.push_back(p.cols());
    Tensor out = make_op_result({R, C}, parts, [widths, R, C](Tensor::Node& self) {
        int64_t off = 0;
        for (size_t i = 0; i < self.parents.size(); ++i) {
            auto& p = *self.parents[i];
            int64_t w = widths[i];
            if (detail::wants(p)) {
                p.ensure_grad();
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t c = 0; c < w; ++c)
                        p.grad[r * w + c] += self.grad[r * C + off + c];
            }
            off += w;
        }
    });
    auto& ov = out.data();
    int64_t off = 0;
    for (const auto& p : parts) {
        const auto& pv = p.data();
        int64_t w = p.cols();
        for (int64_t r = 0; r < R; ++r)
            std::copy(pv.begin() + r * w, pv.begin() + (r + 1) * w, ov.begin() + r * C + off);
        off += w;
    }
    return out;
}

// route rows of several tensors into one output: out[dests[i][r], :] = parts[i][r, :]
inline Tensor place_rows(const std::vector<Tensor>& parts,
                         const std::vector<std::shared_ptr<std::vector<int64_t>>>& dests,
                         int64_t total_rows) {
    if (parts.empty() || parts.size() != dests.size())
        throw RuntimeAbort("place_rows: parts/dests mismatch");
    int64_t C = parts[0].cols();
    for (size_t i = 0; i < parts.size(); ++i) {
        if (parts[i].cols() != C) throw RuntimeAbort("place_rows: width mismatch");
        if (parts[i].rows() != static_cast<int64_t>(dests[i]->size()))
            throw RuntimeAbort("place_rows: row count mismatch");
    }
    Tensor out = make_op_result({total_rows, C}, parts, [dests, C](Tensor::Node& self) {
        for (size_t i = 0; i < self.parents.size(); ++i) {
            auto& p = *self.parents[i];
            if (!detail::wants(p)) continue;
            p.ensure_grad();
            const auto& idx = *dests[i];
            for (size_t r = 0; r < idx.size(); ++r) {
                const double* src = self.grad.data() + idx[r] * C;
                double* dst = p.grad.data() + static_cast<int64_t>(r) * C;
                for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
            }
        }
    });
    auto& ov = out.data();
    for (size_t i = 0; i < parts.size(); ++i) {
        const auto& pv = parts[i].data();
        const auto& idx = *dests[i];
        for (size_t r = 0; r < idx.size(); ++r) {
            int64_t d = idx[r];
            if (d < 0 || d >= total_rows) throw RuntimeAbort("place_rows: index out of range");
            std::copy(pv.begin() + static_cast<int64_t>(r) * C,
                      pv.begin() + static_cast<int64_t>(r + 1) * C, ov.begin() + d * C);
        }
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
    int64_t C = x.cols(), R = x.rows();
    if (c0 < 0 || c1 > C || c0 >= c1) throw RuntimeAbort("slice_cols: bad range");
    int64_t w = c1 - c0;
    Tensor out = make_op_result({R, w}, {x}, [c0, w, C, R](Tensor::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t r = 0; r < R; ++r)
            for (int64_t c = 0; c < w; ++c)
                p.grad[r * C + c0 + c] += self.grad[r * w + c];
    });
    const auto& xv = x.data();
    auto& ov = out.data();
    for (int64_t r = 0; r < R; ++r)
        std::copy(xv.begin() + r * C + c0, xv.begin() + r * C + c1, ov.begin() + r * w);
    return out;
}

// out[r, j] = x[r, map[j]]; used for patchify/unpatchify index plumbing
inline Tensor gather_flat(const Tensor& x, std::shared_ptr<std::vector<int64_t>> map) {
    int64_t R = x.rows(), M = x.cols();
    int64_t K = static_cast<int64_t>(map->size());
    Tensor out = make_op_result({R, K}, {x}, [map, M, K, R](Tensor::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        for (int64_t r = 0; r < R; ++r) {
            const double* src = self.grad.data() + r * K;
            double* dst = p.grad.data() + r * M;
            for (int64_t j = 0; j < K; ++j) dst[(*map)[j]] += src[j];
        }
    });
    const auto& xv = x.data();
    auto& ov = out.data();
    for (int64_t j = 0; j < K; ++j)
        if ((*map)[j] < 0 || (*map)[j] >= M) throw RuntimeAbort("gather_flat: index out of range");
    for (int64_t r = 0; r < R; ++r) {
        const double* src = xv.data() + r * M;
        double* dst = ov.data() + r * K;
        for (int64_t j = 0; j < K; ++j) dst[j] = src[(*map)[j]];
    }
    return out;
}

// out[r, 0] = x[r, cols[r]]
inline Tensor gather_elems(const Tensor& x, std::shared_ptr<std::vector<int64_t>> colsv) {
    int64_t R = x.rows(), C = x.cols();
    if (static_cast<int64_t>(colsv->size()) != R)
        throw RuntimeAbort("gather_elems: index count mismatch");
    Tensor out = make_op_result({R, 1}, {x}, [colsv, C](Tensor::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        int64_t R2 = static_cast<int64_t>(colsv->size());
        for (int64_t r = 0; r < R2; ++r)
            p.grad[r * C + (*colsv)[r]] += self.grad[r];
    });
    const auto& xv = x.data();
    auto& ov = out.data();
    for (int64_t r = 0; r < R; ++r) ov[r] = xv[r * C + (*colsv)[r]];
    return out;
}

// out[r, :] = x[r, :] * s[r]; s is [R, 1]
inline Tensor mul_colvec(const Tensor& x, const Tensor& s) {
    int64_t R = x.rows(), C = x.cols();
    if (s.size() != R) throw RuntimeAbort("mul_colvec: scale count mismatch");
    Tensor out = make_op_result(x.shape(), {x, s}, [R, C](Tensor::Node& self) {
        auto& px = *self.parents[0];
        auto& ps = *self.parents[1];
        const auto& xv = *px.data;
        const auto& sv = *ps.data;
        if (detail::wants(px)) {
            px.ensure_grad();
            for (int64_t r = 0; r < R; ++r)
                for (int64_t c = 0; c < C; ++c)
                    px.grad[r * C + c] += self.grad[r * C + c] * sv[r];
        }
        if (detail::wants(ps)) {
            ps.ensure_grad();
            for (int64_t r = 0; r < R; ++r) {
                double acc = 0.0;
                for (int64_t c = 0; c < C; ++c) acc += self.grad[r * C + c] * xv[r * C + c];
                ps.grad[r] += acc;
            }
        }
    });
    mat(out).array() = cmat(x).array().colwise() * CArrMap(s.data().data(), R);
    return out;
}

// x: [B*G, C] grouped by sample (G consecutive rows per sample),
// gamma/beta: [B, C]; out[r] = x[r] * gamma[r/G] + beta[r/G]
inline Tensor affine_rows_grouped(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                  int64_t group) {
    int64_t R = x.rows(), C = x.cols();
    if (R % group != 0) throw RuntimeAbort("affine_rows_grouped: rows not divisible by group");
    int64_t B = R / group;
    if (gamma.rows() != B || gamma.cols() != C || beta.rows() != B || beta.cols() != C)
        throw RuntimeAbort("affine_rows_grouped: modulation shape mismatch");
    Tensor out = make_op_result(x.shape(), {x, gamma, beta}, [R, C, group](Tensor::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& xv = *px.data;
        const auto& gv = *pg.data;
        if (detail::wants(px)) px.ensure_grad();
        if (detail::wants(pg)) pg.ensure_grad();
        if (detail::wants(pb)) pb.ensure_grad();
        for (int64_t r = 0; r < R; ++r) {
            int64_t b = r / group;
            for (int64_t c = 0; c < C; ++c) {
                double g = self.grad[r * C + c];
                if (detail::wants(px)) px.grad[r * C + c] += g * gv[b * C + c];
                if (detail::wants(pg)) pg.grad[b * C + c] += g * xv[r * C + c];
                if (detail::wants(pb)) pb.grad[b * C + c] += g;
            }
        }
    });
    auto& ov = out.data();
    for (int64_t b = 0; b * group < R; ++b) {
        CMatMap X(x.data().data() + b * group * C, group, C);
        Eigen::Map<const Eigen::RowVectorXd> gv(gamma.data().data() + b * C, C);
        Eigen::Map<const Eigen::RowVectorXd> bv(beta.data().data() + b * C, C);
        MatMap O(ov.data() + b * group * C, group, C);
        O.array() = X.array().rowwise() * gv.array();
        O.rowwise() += bv;
    }
    return out;
}

inline Tensor mean_rows(const Tensor& x) {
    int64_t R = x.rows(), C = x.cols();
    Tensor out = make_op_result({1, C}, {x}, [R, C](Tensor::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        Eigen::RowVectorXd g =
            Eigen::Map<const Eigen::RowVectorXd>(self.grad.data(), C) /
            static_cast<double>(R);
        detail::node_grad(p).rowwise() += g;
    });
    auto& ov = out.data();
    const auto& xv = x.data();
    for (int64_t c = 0; c < C; ++c) ov[c] = 0.0;
    Eigen::Map<Eigen::RowVectorXd> acc(ov.data(), C);
    for (int64_t r = 0; r < R; ++r)
        acc += Eigen::Map<const Eigen::RowVectorXd>(xv.data() + r * C, C);
    acc /= static_cast<double>(R);
    return out;
}

inline Tensor clampv(const Tensor& x, double lo, double hi) {
    Tensor out = make_op_result(x.shape(), {x}, [lo, hi](Tensor::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        const auto& xv = *p.data;
        for (size_t j = 0; j < self.grad.size(); ++j)
            if (xv[j] > lo && xv[j] < hi) p.grad[j] += self.grad[j];
    });
    const auto& xv = x.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::clamp(xv[i], lo, hi);
    return out;
}

// Bidirectional multi-head attention. q/k/v: [B*T, D], heads*dh = D.
// Softmax probabilities are cached for the backward pass.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int64_t B, int64_t heads) {
    int64_t D = q.cols();
    if (q.rows() % B != 0) throw RuntimeAbort("attention: rows not divisible by batch");
    int64_t T = q.rows() / B;
    if (D % heads != 0) throw RuntimeAbort("attention: head count must divide width");
    int64_t dh = D / heads;
    double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(B * heads * T * T));

    Tensor out = make_op_result(q.shape(), {q, k, v},
                                [probs, B, heads, T, dh, D, sc](Tensor::Node& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        if (detail::wants(pq)) pq.ensure_grad();
        if (detail::wants(pk)) pk.ensure_grad();
        if (detail::wants(pv)) pv.ensure_grad();
        using Stride = Eigen::OuterStride<>;
        using SMap = Eigen::Map<RowMat, 0, Stride>;
        using CSMap = Eigen::Map<const RowMat, 0, Stride>;
        RowMat dP(T, T), dS(T, T), Pm(T, T);
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t h = 0; h < heads; ++h) {
                int64_t off = b * T * D + h * dh;
                CSMap Q(pq.data->data() + off, T, dh, Stride(D));
                CSMap K(pk.data->data() + off, T, dh, Stride(D));
                CSMap V(pv.data->data() + off, T, dh, Stride(D));
                CSMap dO(self.grad.data() + off, T, dh, Stride(D));
                Pm = Eigen::Map<const RowMat>(probs->data() + (b * heads + h) * T * T, T, T);
                if (detail::wants(pv)) {
                    SMap dV(pv.grad.data() + off, T, dh, Stride(D));
                    dV.noalias() += Pm.transpose() * dO;
                }
                if (detail::wants(pq) || detail::wants(pk)) {
                    dP.noalias() = dO * V.transpose();
                    Eigen::ArrayXd dots = (dP.array() * Pm.array()).rowwise().sum();
                    dS.array() = Pm.array() * (dP.array().colwise() - dots);
                    if (detail::wants(pq)) {
                        SMap dQ(pq.grad.data() + off, T, dh, Stride(D));
                        dQ.noalias() += sc * (dS * K);
                    }
                    if (detail::wants(pk)) {
                        SMap dK(pk.grad.data() + off, T, dh, Stride(D));
                        dK.noalias() += sc * (dS.transpose() * Q);
                    }
                }
            }
        }
    });

    using Stride = Eigen::OuterStride<>;
    using CSMap = Eigen::Map<const RowMat, 0, Stride>;
    using SMap = Eigen::Map<RowMat, 0, Stride>;
    RowMat S(T, T);
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
            int64_t off = b * T * D + h * dh;
            CSMap Q(q.data().data() + off, T, dh, Stride(D));
            CSMap K(k.data().data() + off, T, dh, Stride(D));
            CSMap V(v.data().data() + off, T, dh, Stride(D));
            S.noalias() = sc * (Q * K.transpose());
            double* P = probs->data() + (b * heads + h) * T * T;
            Eigen::Map<RowMat> Pm2(P, T, T);
            Eigen::VectorXd mx = S.rowwise().maxCoeff();
            Pm2 = S.colwise() - mx;
            detail::vexp_inplace(P, T * T);
            for (int64_t i = 0; i < T; ++i) {
                double sm = 0.0;
                for (int64_t j = 0; j < T; ++j) sm += P[i * T + j];
                for (int64_t j = 0; j < T; ++j) P[i * T + j] /= sm;
            }
            SMap O(out.data().data() + off, T, dh, Stride(D));
            O.noalias() = Eigen::Map<const RowMat>(P, T, T) * V;
        }
    }
    return out;
}

} // namespace demuse
