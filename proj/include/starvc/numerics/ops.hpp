#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "starvc/numerics/tape.hpp"

namespace starvc::num {

namespace detail {

// C[MxN] += A[MxK] * B[KxN]
template <class T>
void gemm_acc(int M, int K, int N, const T* __restrict A, const T* __restrict B, T* __restrict C) {
    for (int i = 0; i < M; ++i) {
        T* __restrict c = C + static_cast<std::size_t>(i) * N;
        const T* a = A + static_cast<std::size_t>(i) * K;
        for (int k = 0; k < K; ++k) {
            const T av = a[k];
            const T* __restrict b = B + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

template <class T>
std::vector<T> transpose(int R, int C, const T* X) {
    std::vector<T> out(static_cast<std::size_t>(R) * C);
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) out[static_cast<std::size_t>(c) * R + r] = X[static_cast<std::size_t>(r) * C + c];
    return out;
}

template <class T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

template <class T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
    if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
}

}  // namespace detail

/// Matrix product. `a` is viewed as rows x K (leading axes flattened), `b` must be K x N.
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (bv.rank() != 2 || av.rank() < 1 || av.cols() != bv.dim(0))
        throw DimensionError("matmul: inner dimensions disagree: " + shape_str(av.shape()) + " x " +
                             shape_str(bv.shape()));
    const int M = av.rows(), K = av.cols(), N = bv.cols();
    Shape out_shape = av.shape();
    out_shape.back() = N;
    BasicTensor<T> out(out_shape);
    detail::gemm_acc(M, K, N, av.data(), bv.data(), out.data());
    const int ia = a.id, ib = b.id;
    return a.tape->record("matmul", std::move(out), {ia, ib}, [ia, ib, M, K, N](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.requires_grad(ia)) {
            auto bt = detail::transpose(K, N, t.value(ib).data());
            detail::gemm_acc(M, N, K, g.data(), bt.data(), t.grad_buffer(ia).data());
        }
        if (t.requires_grad(ib)) {
            auto at = detail::transpose(M, K, t.value(ia).data());
            detail::gemm_acc(K, M, N, at.data(), g.data(), t.grad_buffer(ib).data());
        }
    });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b);
    detail::require_same_shape("add", a, b);
    BasicTensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const int ia = a.id, ib = b.id;
    return a.tape->record("add", std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        for (int p : {ia, ib}) {
            if (!t.requires_grad(p)) continue;
            auto& d = t.grad_buffer(p);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        }
    });
}

/// x[rows x N] + b[N], broadcast over rows.
template <class T>
Var<T> add_bias(Var<T> x, Var<T> b) {
    detail::require_same_tape(x, b);
    const int N = x.cols();
    if (static_cast<int>(b.value().size()) != N)
        throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
    BasicTensor<T> out = x.value();
    const int R = out.rows();
    const auto& bv = b.value();
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < N; ++c) out(r, c) += bv[static_cast<std::size_t>(c)];
    const int ix = x.id, ib = b.id;
    return x.tape->record("add_bias", std::move(out), {ix, ib}, [ix, ib, R, N](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.requires_grad(ix)) {
            auto& d = t.grad_buffer(ix);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            auto& d = t.grad_buffer(ib);
            for (int c = 0; c < N; ++c) {
                double s = 0.0;
                for (int r = 0; r < R; ++r) s += g(r, c);
                d[static_cast<std::size_t>(c)] += static_cast<T>(s);
            }
        }
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same_tape(a, b);
    detail::require_same_shape("mul", a, b);
    BasicTensor<T> out = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    const int ia = a.id, ib = b.id;
    return a.tape->record("mul", std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.requires_grad(ia)) {
            auto& d = t.grad_buffer(ia);
            const auto& o = t.value(ib);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * o[i];
        }
        if (t.requires_grad(ib)) {
            auto& d = t.grad_buffer(ib);
            const auto& o = t.value(ia);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * o[i];
        }
    });
}

template <class T>
Var<T> scale(Var<T> x, double s) {
    BasicTensor<T> out = x.value();
    for (auto& v : out.values()) v = static_cast<T>(v * s);
    const int ix = x.id;
    return x.tape->record("scale", std::move(out), {ix}, [ix, s](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        auto& d = t.grad_buffer(ix);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += static_cast<T>(g[i] * s);
    });
}

template <class T>
Var<T> silu(Var<T> x) {
    const auto& xv = x.value();
    BasicTensor<T> out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = xv[i];
        out[i] = v / (T(1) + std::exp(-v));
    }
    const int ix = x.id;
    return x.tape->record("silu", std::move(out), {ix}, [ix](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        const auto& xv = t.value(ix);
        auto& d = t.grad_buffer(ix);
        for (std::size_t i = 0; i < d.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-xv[i]));
            d[i] += g[i] * (s * (T(1) + xv[i] * (T(1) - s)));
        }
    });
}

/// Softmax over the last axis, max-subtracted.
template <class T>
BasicTensor<T> softmax_values(const BasicTensor<T>& x) {
    BasicTensor<T> out(x.shape());
    const int R = x.rows(), C = x.cols();
    for (int r = 0; r < R; ++r) {
        T m = x(r, 0);
        for (int c = 1; c < C; ++c) m = std::max(m, x(r, c));
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += std::exp(static_cast<double>(x(r, c)) - m);
        for (int c = 0; c < C; ++c) out(r, c) = static_cast<T>(std::exp(static_cast<double>(x(r, c)) - m) / s);
    }
    return out;
}

template <class T>
Var<T> softmax(Var<T> x) {
    if (x.value().rank() < 1 || x.cols() < 1) throw DimensionError("softmax: last dimension must be >= 1");
    if (!x.value().all_finite()) throw NumericError("softmax: non-finite input");
    const int ix = x.id;
    return x.tape->record("softmax", softmax_values(x.value()), {ix}, [ix](Tape<T>& t, int self) {
        const auto& y = t.value(self);
        const auto& g = t.node(self).grad;
        auto& d = t.grad_buffer(ix);
        const int R = y.rows(), C = y.cols();
        for (int r = 0; r < R; ++r) {
            double dot = 0.0;
            for (int c = 0; c < C; ++c) dot += static_cast<double>(g(r, c)) * y(r, c);
            for (int c = 0; c < C; ++c) d(r, c) += static_cast<T>(y(r, c) * (g(r, c) - dot));
        }
    });
}

/// Mean negative log-softmax over unmasked rows of `logits` [T x C].
/// Throws DegenerateBatchError when every row is masked out.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
    const auto& lv = logits.value();
    const int R = lv.rows(), C = lv.cols();
    if (static_cast<int>(targets.size()) != R || static_cast<int>(mask.size()) != R)
        throw DimensionError("cross_entropy: " + std::to_string(R) + " logit rows but " +
                             std::to_string(targets.size()) + " targets / " + std::to_string(mask.size()) +
                             " mask entries");
    int count = 0;
    for (int r = 0; r < R; ++r) {
        if (!mask[static_cast<std::size_t>(r)]) continue;
        const int tg = targets[static_cast<std::size_t>(r)];
        if (tg < 0 || tg >= C)
            throw IndexError("cross_entropy: target " + std::to_string(tg) + " at row " + std::to_string(r) +
                             " outside [0, " + std::to_string(C) + ")");
        ++count;
    }
    if (count == 0) throw DegenerateBatchError("cross_entropy: every position is masked");
    BasicTensor<T> probs = softmax_values(lv);
    double total = 0.0;
    for (int r = 0; r < R; ++r) {
        if (!mask[static_cast<std::size_t>(r)]) continue;
        const int tg = targets[static_cast<std::size_t>(r)];
        double m = lv(r, 0);
        for (int c = 1; c < C; ++c) m = std::max(m, static_cast<double>(lv(r, c)));
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += std::exp(static_cast<double>(lv(r, c)) - m);
        total += (m + std::log(s)) - static_cast<double>(lv(r, tg));
    }
    const double loss = total / count;
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    const int il = logits.id;
    return logits.tape->record(
        "cross_entropy", BasicTensor<T>::scalar(static_cast<T>(loss)), {il},
        [il, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk), count, R, C](Tape<T>& t, int self) {
            const double g = t.node(self).grad[0];
            auto& d = t.grad_buffer(il);
            const double k = g / count;
            for (int r = 0; r < R; ++r) {
                if (!mk[static_cast<std::size_t>(r)]) continue;
                for (int c = 0; c < C; ++c) d(r, c) += static_cast<T>(k * probs(r, c));
                d(r, tg[static_cast<std::size_t>(r)]) -= static_cast<T>(k);
            }
        });
}

/// Like cross_entropy, but a fully masked input yields an exact 0 constant and
/// sets `degenerate`.
template <class T>
Var<T> cross_entropy_or_zero(Var<T> logits, std::span<const int> targets, std::span<const std::uint8_t> mask,
                             bool& degenerate) {
    degenerate = true;
    for (auto m : mask) degenerate = degenerate && !m;
    if (degenerate) return logits.tape->constant(BasicTensor<T>::scalar(T(0)));
    return cross_entropy(logits, targets, mask);
}

inline constexpr double kRmsNormEps = 1e-5;

/// x * rsqrt(mean(x^2) + eps) * gain, over the last axis.
template <class T>
Var<T> rms_norm(Var<T> x, Var<T> gain, double eps = kRmsNormEps) {
    detail::require_same_tape(x, gain);
    const auto& xv = x.value();
    const int R = xv.rows(), D = xv.cols();
    if (D < 1 || static_cast<int>(gain.value().size()) != D)
        throw DimensionError("rms_norm: gain " + shape_str(gain.shape()) + " vs input " + shape_str(xv.shape()));
    BasicTensor<T> out(xv.shape());
    std::vector<double> inv(static_cast<std::size_t>(R));
    const auto& gv = gain.value();
    for (int r = 0; r < R; ++r) {
        double ms = 0.0;
        for (int c = 0; c < D; ++c) ms += static_cast<double>(xv(r, c)) * xv(r, c);
        const double k = 1.0 / std::sqrt(ms / D + eps);
        inv[static_cast<std::size_t>(r)] = k;
        for (int c = 0; c < D; ++c) out(r, c) = static_cast<T>(xv(r, c) * k * gv[static_cast<std::size_t>(c)]);
    }
    const int ix = x.id, ig = gain.id;
    return x.tape->record("rms_norm", std::move(out), {ix, ig},
                          [ix, ig, R, D, inv = std::move(inv)](Tape<T>& t, int self) {
                              const auto& g = t.node(self).grad;
                              const auto& xv = t.value(ix);
                              const auto& gv = t.value(ig);
                              if (t.requires_grad(ig)) {
                                  auto& dg = t.grad_buffer(ig);
                                  for (int c = 0; c < D; ++c) {
                                      double s = 0.0;
                                      for (int r = 0; r < R; ++r)
                                          s += static_cast<double>(g(r, c)) * xv(r, c) * inv[static_cast<std::size_t>(r)];
                                      dg[static_cast<std::size_t>(c)] += static_cast<T>(s);
                                  }
                              }
                              if (t.requires_grad(ix)) {
                                  auto& dx = t.grad_buffer(ix);
                                  for (int r = 0; r < R; ++r) {
                                      const double k = inv[static_cast<std::size_t>(r)];
                                      double dot = 0.0;
                                      for (int c = 0; c < D; ++c)
                                          dot += static_cast<double>(g(r, c)) * gv[static_cast<std::size_t>(c)] * xv(r, c) * k;
                                      dot /= D;
                                      for (int c = 0; c < D; ++c) {
                                          const double xh = xv(r, c) * k;
                                          const double dxh = static_cast<double>(g(r, c)) * gv[static_cast<std::size_t>(c)];
                                          dx(r, c) += static_cast<T>(k * (dxh - xh * dot));
                                      }
                                  }
                              }
                          });
}

inline constexpr double kRopeBase = 10000.0;

/// Rotary position embedding over x viewed as [T x heads x head_dim]. Each
/// head may carry its own position track: `positions[h]` (or `positions[0]`
/// for every head when a single track is given) lists one position per row.
/// Adjacent feature pairs (2i, 2i+1) are rotated by pos * base^(-2i/head_dim).
template <class T>
Var<T> rope_apply(Var<T> x, int heads, const std::vector<std::vector<int>>& positions, double base = kRopeBase) {
    const auto& xv = x.value();
    const int R = xv.rows(), W = xv.cols();
    if (heads < 1 || W % heads != 0) throw ConfigError("rope_apply: width " + std::to_string(W) + " not divisible by heads");
    const int dh = W / heads;
    if (dh % 2 != 0) throw ConfigError("rope_apply: head dimension " + std::to_string(dh) + " is odd");
    if (positions.empty() || (positions.size() != 1 && static_cast<int>(positions.size()) != heads))
        throw DimensionError("rope_apply: need 1 or " + std::to_string(heads) + " position tracks");
    for (const auto& p : positions)
        if (static_cast<int>(p.size()) != R)
            throw DimensionError("rope_apply: " + std::to_string(p.size()) + " positions for " + std::to_string(R) + " rows");
    // cos/sin table laid out like x: [R x heads x dh/2]
    const int half = dh / 2;
    std::vector<double> cs(static_cast<std::size_t>(R) * heads * half), sn(cs.size());
    for (int r = 0; r < R; ++r)
        for (int h = 0; h < heads; ++h) {
            const double pos = positions[positions.size() == 1 ? 0 : static_cast<std::size_t>(h)][static_cast<std::size_t>(r)];
            for (int i = 0; i < half; ++i) {
                const double ang = pos * std::pow(base, -2.0 * i / dh);
                const std::size_t k = (static_cast<std::size_t>(r) * heads + h) * half + i;
                cs[k] = std::cos(ang);
                sn[k] = std::sin(ang);
            }
        }
    BasicTensor<T> out(xv.shape());
    for (int r = 0; r < R; ++r)
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < half; ++i) {
                const std::size_t k = (static_cast<std::size_t>(r) * heads + h) * half + i;
                const int c = h * dh + 2 * i;
                const double a = xv(r, c), b = xv(r, c + 1);
                out(r, c) = static_cast<T>(a * cs[k] - b * sn[k]);
                out(r, c + 1) = static_cast<T>(a * sn[k] + b * cs[k]);
            }
    const int ix = x.id;
    return x.tape->record("rope", std::move(out), {ix},
                          [ix, R, heads, dh, half, cs = std::move(cs), sn = std::move(sn)](Tape<T>& t, int self) {
                              const auto& g = t.node(self).grad;
                              auto& d = t.grad_buffer(ix);
                              for (int r = 0; r < R; ++r)
                                  for (int h = 0; h < heads; ++h)
                                      for (int i = 0; i < half; ++i) {
                                          const std::size_t k = (static_cast<std::size_t>(r) * heads + h) * half + i;
                                          const int c = h * dh + 2 * i;
                                          const double ga = g(r, c), gb = g(r, c + 1);
                                          d(r, c) += static_cast<T>(ga * cs[k] + gb * sn[k]);
                                          d(r, c + 1) += static_cast<T>(-ga * sn[k] + gb * cs[k]);
                                      }
                          });
}

template <class T>
Var<T> rope_apply(Var<T> x, int heads, const std::vector<int>& positions, double base = kRopeBase) {
    return rope_apply(x, heads, std::vector<std::vector<int>>{positions}, base);
}

/// Row gather from table [V x D]; backward scatter-adds into the table.
template <class T>
Var<T> embedding_lookup(Var<T> table, std::span<const int> ids) {
    const auto& tv = table.value();
    const int V = tv.rows(), D = tv.cols();
    BasicTensor<T> out({static_cast<int>(ids.size()), D});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || id >= V)
            throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside [0, " + std::to_string(V) + ")");
        std::copy_n(tv.data() + static_cast<std::size_t>(id) * D, D, out.data() + i * D);
    }
    const int it = table.id;
    std::vector<int> idv(ids.begin(), ids.end());
    return table.tape->record("embedding", std::move(out), {it}, [it, D, idv = std::move(idv)](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        auto& d = t.grad_buffer(it);
        for (std::size_t i = 0; i < idv.size(); ++i) {
            T* row = d.data() + static_cast<std::size_t>(idv[i]) * D;
            const T* gr = g.data() + i * D;
            for (int c = 0; c < D; ++c) row[c] += gr[c];
        }
    });
}

/// Concatenate 2-D inputs along rows (the time axis).
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const int C = parts[0].cols();
    int R = 0;
    for (const auto& p : parts) {
        detail::require_same_tape(p, parts[0]);
        if (p.cols() != C)
            throw DimensionError("concat_rows: width mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(parts[0].shape()));
        R += p.rows();
    }
    BasicTensor<T> out({R, C});
    std::vector<int> ids, offsets;
    int off = 0;
    for (const auto& p : parts) {
        std::copy(p.value().values().begin(), p.value().values().end(), out.data() + static_cast<std::size_t>(off) * C);
        ids.push_back(p.id);
        offsets.push_back(off);
        off += p.rows();
    }
    return parts[0].tape->record("concat_rows", std::move(out), ids, [ids, offsets, C](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (!t.requires_grad(ids[k])) continue;
            auto& d = t.grad_buffer(ids[k]);
            const T* src = g.data() + static_cast<std::size_t>(offsets[k]) * C;
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
        }
    });
}

/// Rows [start, start + count) of a 2-D input.
template <class T>
Var<T> slice_rows(Var<T> x, int start, int count) {
    const int R = x.rows(), C = x.cols();
    if (start < 0 || count < 1 || start + count > R)
        throw DimensionError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") outside " + std::to_string(R) + " rows");
    BasicTensor<T> out({count, C});
    std::copy_n(x.value().data() + static_cast<std::size_t>(start) * C, static_cast<std::size_t>(count) * C, out.data());
    const int ix = x.id;
    return x.tape->record("slice_rows", std::move(out), {ix}, [ix, start, C](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        auto& d = t.grad_buffer(ix);
        T* dst = d.data() + static_cast<std::size_t>(start) * C;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    });
}

/// 2-D transpose [R x C] -> [C x R].
template <class T>
Var<T> transpose(Var<T> x) {
    const int R = x.rows(), C = x.cols();
    BasicTensor<T> out({C, R});
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) out(c, r) = x.value()(r, c);
    const int ix = x.id;
    return x.tape->record("transpose", std::move(out), {ix}, [ix, R, C](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        auto& d = t.grad_buffer(ix);
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) d(r, c) += g(c, r);
    });
}

/// Mean over rows -> [1 x C] (temporal mean pooling).
template <class T>
Var<T> mean_rows(Var<T> x) {
    const int R = x.rows(), C = x.cols();
    BasicTensor<T> out({1, C});
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int r = 0; r < R; ++r) s += x.value()(r, c);
        out[static_cast<std::size_t>(c)] = static_cast<T>(s / R);
    }
    const int ix = x.id;
    return x.tape->record("mean_rows", std::move(out), {ix}, [ix, R, C](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        auto& d = t.grad_buffer(ix);
        for (int r = 0; r < R; ++r)
            for (int c = 0; c < C; ++c) d(r, c) += static_cast<T>(g[static_cast<std::size_t>(c)] / static_cast<double>(R));
    });
}

template <class T>
Var<T> sum(Var<T> x) {
    double s = 0.0;
    for (T v : x.value().values()) s += v;
    const int ix = x.id;
    return x.tape->record("sum", BasicTensor<T>::scalar(static_cast<T>(s)), {ix}, [ix](Tape<T>& t, int self) {
        const T g = t.node(self).grad[0];
        auto& d = t.grad_buffer(ix);
        for (auto& v : d.values()) v += g;
    });
}

template <class T>
Var<T> mean(Var<T> x) {
    const double n = static_cast<double>(x.value().size());
    double s = 0.0;
    for (T v : x.value().values()) s += v;
    const int ix = x.id;
    return x.tape->record("mean", BasicTensor<T>::scalar(static_cast<T>(s / n)), {ix}, [ix, n](Tape<T>& t, int self) {
        const T g = static_cast<T>(t.node(self).grad[0] / n);
        auto& d = t.grad_buffer(ix);
        for (auto& v : d.values()) v += g;
    });
}

/// Sliding-window unfold for 1-D convolution over time: x [T x C] ->
/// [ceil(T / stride) x kernel*C] with zero padding kernel/2 on each side.
template <class T>
Var<T> unfold_time(Var<T> x, int kernel, int stride) {
    if (kernel < 1 || stride < 1) throw ConfigError("unfold_time: kernel and stride must be positive");
    const int R = x.rows(), C = x.cols();
    const int pad = kernel / 2;
    const int out_rows = (R + 2 * pad - kernel) / stride + 1;
    if (out_rows < 1) throw DimensionError("unfold_time: input too short for kernel");
    BasicTensor<T> out({out_rows, kernel * C});
    const auto& xv = x.value();
    for (int o = 0; o < out_rows; ++o)
        for (int k = 0; k < kernel; ++k) {
            const int src = o * stride - pad + k;
            if (src < 0 || src >= R) continue;
            std::copy_n(xv.data() + static_cast<std::size_t>(src) * C, C, out.data() + (static_cast<std::size_t>(o) * kernel + k) * C);
        }
    const int ix = x.id;
    return x.tape->record("unfold_time", std::move(out), {ix}, [ix, R, C, kernel, stride, pad, out_rows](Tape<T>& t, int self) {
        const auto& g = t.node(self).grad;
        auto& d = t.grad_buffer(ix);
        for (int o = 0; o < out_rows; ++o)
            for (int k = 0; k < kernel; ++k) {
                const int src = o * stride - pad + k;
                if (src < 0 || src >= R) continue;
                const T* gr = g.data() + (static_cast<std::size_t>(o) * kernel + k) * C;
                T* dr = d.data() + static_cast<std::size_t>(src) * C;
                for (int c = 0; c < C; ++c) dr[c] += gr[c];
            }
    });
}

/// Multi-head scaled dot-product attention over rows of q, k, v [T x heads*dh].
/// With `causal`, row i attends to rows j <= i only.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads, bool causal) {
    detail::require_same_tape(q, k);
    detail::require_same_tape(q, v);
    detail::require_same_shape("attention", q, k);
    detail::require_same_shape("attention", q, v);
    const int R = q.rows(), W = q.cols();
    if (heads < 1 || W % heads != 0) throw ConfigError("attention: width not divisible by heads");
    const int dh = W / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto &qv = q.value(), &kv = k.value(), &vv = v.value();
    // probs laid out [heads x R x R]; zero above the diagonal when causal
    std::vector<T> probs(static_cast<std::size_t>(heads) * R * R, T(0));
    BasicTensor<T> out({R, W});
    std::vector<double> srow(static_cast<std::size_t>(R));
    for (int h = 0; h < heads; ++h) {
        const int off = h * dh;
        for (int i = 0; i < R; ++i) {
            const int jmax = causal ? i : R - 1;
            double m = -std::numeric_limits<double>::infinity();
            for (int j = 0; j <= jmax; ++j) {
                double s = 0.0;
                for (int c = 0; c < dh; ++c) s += static_cast<double>(qv(i, off + c)) * kv(j, off + c);
                s *= sc;
                srow[static_cast<std::size_t>(j)] = s;
                m = std::max(m, s);
            }
            double z = 0.0;
            for (int j = 0; j <= jmax; ++j) {
                srow[static_cast<std::size_t>(j)] = std::exp(srow[static_cast<std::size_t>(j)] - m);
                z += srow[static_cast<std::size_t>(j)];
            }
            T* prow = probs.data() + (static_cast<std::size_t>(h) * R + i) * R;
            T* orow = out.data() + static_cast<std::size_t>(i) * W + off;
            for (int j = 0; j <= jmax; ++j) {
                const T p = static_cast<T>(srow[static_cast<std::size_t>(j)] / z);
                prow[j] = p;
                const T* vr = vv.data() + static_cast<std::size_t>(j) * W + off;
                for (int c = 0; c < dh; ++c) orow[c] += p * vr[c];
            }
        }
    }
    const int iq = q.id, ik = k.id, iv = v.id;
    return q.tape->record(
        "attention", std::move(out), {iq, ik, iv},
        [iq, ik, iv, R, W, heads, dh, sc, causal, probs = std::move(probs)](Tape<T>& t, int self) {
            const auto& g = t.node(self).grad;
            const auto &qv = t.value(iq), &kv = t.value(ik), &vv = t.value(iv);
            const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
            BasicTensor<T> dq({R, W}), dk({R, W}), dv({R, W});
            std::vector<double> dp(static_cast<std::size_t>(R));
            for (int h = 0; h < heads; ++h) {
                const int off = h * dh;
                for (int i = 0; i < R; ++i) {
                    const int jmax = causal ? i : R - 1;
                    const T* prow = probs.data() + (static_cast<std::size_t>(h) * R + i) * R;
                    const T* gr = g.data() + static_cast<std::size_t>(i) * W + off;
                    double dot = 0.0;
                    for (int j = 0; j <= jmax; ++j) {
                        const T* vr = vv.data() + static_cast<std::size_t>(j) * W + off;
                        double s = 0.0;
                        for (int c = 0; c < dh; ++c) s += static_cast<double>(gr[c]) * vr[c];
                        dp[static_cast<std::size_t>(j)] = s;
                        dot += s * prow[j];
                        if (gv) {
                            T* dvr = dv.data() + static_cast<std::size_t>(j) * W + off;
                            for (int c = 0; c < dh; ++c) dvr[c] += prow[j] * gr[c];
                        }
                    }
                    for (int j = 0; j <= jmax; ++j) {
                        const T ds = static_cast<T>(prow[j] * (dp[static_cast<std::size_t>(j)] - dot) * sc);
                        if (gq) {
                            T* dqr = dq.data() + static_cast<std::size_t>(i) * W + off;
                            const T* kr = kv.data() + static_cast<std::size_t>(j) * W + off;
                            for (int c = 0; c < dh; ++c) dqr[c] += ds * kr[c];
                        }
                        if (gk) {
                            T* dkr = dk.data() + static_cast<std::size_t>(j) * W + off;
                            const T* qr = qv.data() + static_cast<std::size_t>(i) * W + off;
                            for (int c = 0; c < dh; ++c) dkr[c] += ds * qr[c];
                        }
                    }
                }
            }
            auto acc = [&t](int id, const BasicTensor<T>& src) {
                auto& d = t.grad_buffer(id);
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
            };
            if (gq) acc(iq, dq);
            if (gk) acc(ik, dk);
            if (gv) acc(iv, dv);
        });
}

}  // namespace starvc::num
