#pragma once

// Selective (input-dependent) state-space scan.
//
// Sequences are channel-first, [N, Di, L]. Per channel d and state s:
//   delta_t = softplus(delta_pre_t + delta_bias)
//   h_t     = exp(delta_t * A) h_{t-1} + delta_t * B_t * u_t,   h_0 = 0
//   y_t     = sum_s C_t h_t + D u_t
// with A = -exp(A_log) < 0.

#include <cmath>
#include <vector>

#include "module.hpp"
#include "scan_paths.hpp"

namespace cvmh {

enum class ScanKernel { Sequential, Blocked };

/// Zero-order hold for the state, Euler for the input: (exp(delta*a), delta*b).
template <typename T>
struct Discrete {
    T abar, bbar;
};

template <typename T>
Discrete<T> discretize(T delta, T a, T b) {
    return {std::exp(delta * a), delta * b};
}

/// Discretized coefficients for whole sequences: delta [N,Di,L], A [Di,Ns],
/// B [N,Ns,L] -> abar, bbar each [N,Di,Ns,L].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> discretize(const Tensor<T>& delta, const Tensor<T>& A, const Tensor<T>& B) {
    const std::size_t N = delta.dim(0), Di = delta.dim(1), L = delta.dim(2), Ns = A.dim(1);
    if (A.dim(0) != Di || B.dim(0) != N || B.dim(1) != Ns || B.dim(2) != L)
        throw ConfigError("discretize: inconsistent shapes");
    std::vector<T> abar(N * Di * Ns * L), bbar(abar.size());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t d = 0; d < Di; ++d)
            for (std::size_t s = 0; s < Ns; ++s)
                for (std::size_t t = 0; t < L; ++t) {
                    const auto r = discretize(delta[(n * Di + d) * L + t], A[d * Ns + s], B[(n * Ns + s) * L + t]);
                    const std::size_t i = ((n * Di + d) * Ns + s) * L + t;
                    abar[i] = r.abar;
                    bbar[i] = r.bbar;
                }
    return {Tensor<T>::from({N, Di, Ns, L}, std::move(abar)), Tensor<T>::from({N, Di, Ns, L}, std::move(bbar))};
}

namespace scan {

/// Raw views over one scan problem. delta is post-softplus, A is the negative
/// state matrix [Di,Ns].
template <typename T>
struct Problem {
    std::size_t N, Di, Ns, L;
    const T* u;      // [N,Di,L]
    const T* delta;  // [N,Di,L]
    const T* A;      // [Di,Ns]
    const T* B;      // [N,Ns,L]
    const T* C;      // [N,Ns,L]
    const T* D;      // [Di]
};

template <typename T>
void skip_term(const Problem<T>& p, std::size_t n, std::size_t d, T* y) {
    const T* u = p.u + (n * p.Di + d) * p.L;
    for (std::size_t t = 0; t < p.L; ++t) y[t] = p.D[d] * u[t];
}

/// y [N,Di,L]; hs, when non-null, receives every state [N,Di,Ns,L].
template <typename T>
void sequential(const Problem<T>& p, T* y, T* hs) {
    parallel_for(p.N, [&](std::size_t n) {
        for (std::size_t d = 0; d < p.Di; ++d) {
            const std::size_t row = (n * p.Di + d) * p.L;
            const T* u = p.u + row;
            const T* dt = p.delta + row;
            T* yr = y + row;
            skip_term(p, n, d, yr);
            for (std::size_t s = 0; s < p.Ns; ++s) {
                const T a = p.A[d * p.Ns + s];
                const T* B = p.B + (n * p.Ns + s) * p.L;
                const T* C = p.C + (n * p.Ns + s) * p.L;
                T* hrow = hs ? hs + ((n * p.Di + d) * p.Ns + s) * p.L : nullptr;
                T h = T(0);
                for (std::size_t t = 0; t < p.L; ++t) {
                    h = std::exp(dt[t] * a) * h + dt[t] * B[t] * u[t];
                    yr[t] += C[t] * h;
                    if (hrow) hrow[t] = h;
                }
            }
        }
    });
}

/// Same recurrence evaluated as independent block-local scans whose affine
/// summaries (a, b) are chained with (a2*a1, a2*b1 + b2) to get each block's
/// incoming state.
template <typename T>
void blocked(const Problem<T>& p, std::size_t block, T* y, T* hs) {
    if (block == 0) throw ConfigError("blocked scan: block length must be >= 1");
    const std::size_t nb = (p.L + block - 1) / block;
    parallel_for(p.N, [&](std::size_t n) {
        std::vector<T> sa(nb), sb(nb), carry(nb);
        for (std::size_t d = 0; d < p.Di; ++d) {
            const std::size_t row = (n * p.Di + d) * p.L;
            const T* u = p.u + row;
            const T* dt = p.delta + row;
            T* yr = y + row;
            skip_term(p, n, d, yr);
            for (std::size_t s = 0; s < p.Ns; ++s) {
                const T a = p.A[d * p.Ns + s];
                const T* B = p.B + (n * p.Ns + s) * p.L;
                const T* C = p.C + (n * p.Ns + s) * p.L;
                T* hrow = hs ? hs + ((n * p.Di + d) * p.Ns + s) * p.L : nullptr;
                // block summaries from a zero state
                for (std::size_t k = 0; k < nb; ++k) {
                    T ak = T(1), bk = T(0);
                    for (std::size_t t = k * block; t < std::min(p.L, (k + 1) * block); ++t) {
                        const T at = std::exp(dt[t] * a);
                        ak = at * ak;
                        bk = at * bk + dt[t] * B[t] * u[t];
                    }
                    sa[k] = ak;
                    sb[k] = bk;
                }
                // exclusive prefix over the summaries
                T h = T(0);
                for (std::size_t k = 0; k < nb; ++k) {
                    carry[k] = h;
                    h = sa[k] * h + sb[k];
                }
                for (std::size_t k = 0; k < nb; ++k) {
                    T hk = carry[k];
                    for (std::size_t t = k * block; t < std::min(p.L, (k + 1) * block); ++t) {
                        hk = std::exp(dt[t] * a) * hk + dt[t] * B[t] * u[t];
                        yr[t] += C[t] * hk;
                        if (hrow) hrow[t] = hk;
                    }
                }
            }
        }
    });
}

}  // namespace scan

/// Differentiable selective scan.
///   u, delta_pre: [N,Di,L]; delta_bias, D: [Di]; A_log: [Di,Ns]; B, C: [N,Ns,L]
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta_pre, const Tensor<T>& delta_bias,
                         const Tensor<T>& A_log, const Tensor<T>& B, const Tensor<T>& C, const Tensor<T>& D,
                         ScanKernel kernel = ScanKernel::Sequential, std::size_t block = 16) {
    if (u.rank() != 3) throw ConfigError("selective_scan: u must be [N,Di,L], got " + shape_str(u.shape()));
    const std::size_t N = u.dim(0), Di = u.dim(1), L = u.dim(2);
    const std::size_t Ns = A_log.rank() == 2 ? A_log.dim(1) : 0;
    if (delta_pre.shape() != u.shape() || delta_bias.numel() != Di || D.numel() != Di || A_log.rank() != 2 ||
        A_log.dim(0) != Di || B.shape() != Shape{N, Ns, L} || C.shape() != Shape{N, Ns, L})
        throw ConfigError("selective_scan: inconsistent shapes u" + shape_str(u.shape()) + " A_log" +
                          shape_str(A_log.shape()) + " B" + shape_str(B.shape()) + " C" + shape_str(C.shape()));
    if (L == 0) throw ConfigError("selective_scan: empty sequence");

    std::vector<T> delta(N * Di * L), A(Di * Ns);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t d = 0; d < Di; ++d)
            for (std::size_t t = 0; t < L; ++t) {
                const std::size_t i = (n * Di + d) * L + t;
                delta[i] = ops::detail::softplus_scalar(delta_pre[i] + delta_bias[d]);
            }
    for (std::size_t i = 0; i < A.size(); ++i) A[i] = -std::exp(A_log[i]);

    const bool record = grad_enabled() && (u.requires_grad() || delta_pre.requires_grad() ||
                                           delta_bias.requires_grad() || A_log.requires_grad() ||
                                           B.requires_grad() || C.requires_grad() || D.requires_grad());
    std::vector<T> y(N * Di * L);
    std::vector<T> hs(record ? N * Di * Ns * L : 0);
    const scan::Problem<T> prob{N,          Di,          Ns, L, u.values().data(), delta.data(), A.data(),
                                B.values().data(), C.values().data(), D.values().data()};
    if (kernel == ScanKernel::Blocked)
        scan::blocked(prob, block, y.data(), record ? hs.data() : nullptr);
    else
        scan::sequential(prob, y.data(), record ? hs.data() : nullptr);

    auto nu = u.node_ptr(), ndp = delta_pre.node_ptr(), ndb = delta_bias.node_ptr(), nal = A_log.node_ptr(),
         nB = B.node_ptr(), nC = C.node_ptr(), nD = D.node_ptr();
    return make_result<T>(
        {N, Di, L}, std::move(y), {u, delta_pre, delta_bias, A_log, B, C, D}, "selective_scan",
        [=, delta = std::move(delta), A = std::move(A), hs = std::move(hs)](Node<T>& o) {
            T* gu = grad_sink(nu);
            T* gdp = grad_sink(ndp);
            T* gdb = grad_sink(ndb);
            T* gal = grad_sink(nal);
            T* gB = grad_sink(nB);
            T* gC = grad_sink(nC);
            T* gD = grad_sink(nD);
            const T* uv = nu->data.data();
            const T* Bv = nB->data.data();
            const T* Cv = nC->data.data();
            const T* Dv = nD->data.data();
            const T* dpv = ndp->data.data();
            const T* dbv = ndb->data.data();
            const T* go = o.grad.data();
            // per-sample partials for the parameters shared across the batch
            std::vector<std::vector<T>> pA(N, std::vector<T>(gal ? Di * Ns : 0));
            std::vector<std::vector<T>> pD(N, std::vector<T>(gD ? Di : 0));
            std::vector<std::vector<T>> pdb(N, std::vector<T>(gdb ? Di : 0));
            parallel_for(N, [&](std::size_t n) {
                std::vector<T> gdelta(L);
                for (std::size_t d = 0; d < Di; ++d) {
                    const std::size_t row = (n * Di + d) * L;
                    const T* ur = uv + row;
                    const T* dt = delta.data() + row;
                    const T* gy = go + row;
                    std::fill(gdelta.begin(), gdelta.end(), T(0));
                    if (gD) {
                        T acc = T(0);
                        for (std::size_t t = 0; t < L; ++t) acc += gy[t] * ur[t];
                        pD[n][d] = acc;
                    }
                    if (gu)
                        for (std::size_t t = 0; t < L; ++t) gu[row + t] += gy[t] * Dv[d];
                    for (std::size_t s = 0; s < Ns; ++s) {
                        const T a = A[d * Ns + s];
                        const std::size_t srow = (n * Ns + s) * L;
                        const T* Br = Bv + srow;
                        const T* Cr = Cv + srow;
                        const T* hr = hs.data() + ((n * Di + d) * Ns + s) * L;
                        T gh = T(0);  // dL/dh_t, carried backwards
                        T ga = T(0);
                        for (std::size_t t = L; t-- > 0;) {
                            if (gC) gC[srow + t] += gy[t] * hr[t];
                            gh += Cr[t] * gy[t];
                            const T abar = std::exp(dt[t] * a);
                            const T hprev = t > 0 ? hr[t - 1] : T(0);
                            gdelta[t] += gh * (hprev * a * abar + Br[t] * ur[t]);
                            ga += gh * hprev * dt[t] * abar;
                            if (gB) gB[srow + t] += gh * dt[t] * ur[t];
                            if (gu) gu[row + t] += gh * dt[t] * Br[t];
                            gh *= abar;
                        }
                        if (gal) pA[n][d * Ns + s] = ga * a;  // dA/dA_log = A
                    }
                    T acc_b = T(0);
                    for (std::size_t t = 0; t < L; ++t) {
                        const T gpre = gdelta[t] * ops::detail::sigmoid_scalar(dpv[row + t] + dbv[d]);
                        if (gdp) gdp[row + t] += gpre;
                        acc_b += gpre;
                    }
                    if (gdb) pdb[n][d] = acc_b;
                }
            });
            if (gal) ops::detail::reduce_partials(pA, gal);
            if (gD) ops::detail::reduce_partials(pD, gD);
            if (gdb) ops::detail::reduce_partials(pdb, gdb);
        });
}

/// One direction's S6 parameters: x_proj (Di -> R + 2Ns), dt_proj (R -> Di),
/// delta bias, A_log, D.
template <typename T>
class S6 {
   public:
    S6() = default;
    S6(const std::string& name, std::size_t d_inner, std::size_t d_state, std::size_t dt_rank, Rng& rng)
        : Di_(d_inner), Ns_(d_state), R_(dt_rank) {
        x_proj_ = Linear<T>(join_name(name, "x_proj"), Di_, R_ + 2 * Ns_, false, rng);
        dt_proj_ = Linear<T>(join_name(name, "dt_proj"), R_, Di_, false, rng);
        {
            const double bound = 1.0 / std::sqrt(static_cast<double>(R_));
            for (auto& w : dt_proj_.weight().value.values()) w = static_cast<T>(rng.uniform(-bound, bound));
        }
        std::vector<T> bias(Di_);
        for (auto& b : bias) {
            // dt log-uniform in [1e-3, 1e-1], stored as softplus^-1(dt)
            double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            dt = std::max(dt, 1e-4);
            b = static_cast<T>(dt + std::log(-std::expm1(-dt)));
        }
        dt_bias_ = Parameter<T>(join_name(name, "dt_bias"), Tensor<T>::from({Di_}, std::move(bias)), true);
        std::vector<T> alog(Di_ * Ns_);
        for (std::size_t d = 0; d < Di_; ++d)
            for (std::size_t s = 0; s < Ns_; ++s) alog[d * Ns_ + s] = static_cast<T>(std::log(double(s + 1)));
        A_log_ = Parameter<T>(join_name(name, "A_log"), Tensor<T>::from({Di_, Ns_}, std::move(alog)), true);
        D_ = Parameter<T>(join_name(name, "D"), Tensor<T>::ones({Di_}), true);
    }

    /// u: [N,Di,L] -> [N,Di,L]
    Tensor<T> operator()(const Tensor<T>& u) const {
        auto proj = x_proj_.channels(u);
        auto dt_low = ops::slice(proj, 1, 0, R_);
        auto B = ops::slice(proj, 1, R_, Ns_);
        auto C = ops::slice(proj, 1, R_ + Ns_, Ns_);
        auto dpre = dt_proj_.channels(dt_low);
        return selective_scan(u, dpre, dt_bias_.value, A_log_.value, B, C, D_.value, kernel, block);
    }

    void collect(ParamSet<T>& out) {
        x_proj_.collect(out);
        dt_proj_.collect(out);
        out.add(dt_bias_);
        out.add(A_log_);
        out.add(D_);
    }

    Linear<T>& x_proj() { return x_proj_; }
    Linear<T>& dt_proj() { return dt_proj_; }
    Parameter<T>& dt_bias() { return dt_bias_; }
    Parameter<T>& A_log() { return A_log_; }
    Parameter<T>& D() { return D_; }

    ScanKernel kernel = ScanKernel::Sequential;
    std::size_t block = 16;

   private:
    std::size_t Di_ = 0, Ns_ = 0, R_ = 0;
    Linear<T> x_proj_, dt_proj_;
    Parameter<T> dt_bias_, A_log_, D_;
};

inline std::size_t default_dt_rank(std::size_t dim) { return (dim + 15) / 16; }

/// Four directional scans over an [N,Di,H,W] map, merged by summation.
template <typename T>
class DirectionalSsm {
   public:
    DirectionalSsm() = default;
    DirectionalSsm(const std::string& name, std::size_t d_inner, std::size_t d_state, std::size_t dt_rank,
                   ScanMode mode, Rng& rng)
        : mode_(mode) {
        for (std::size_t d = 0; d < 4; ++d)
            dirs_[d] = S6<T>(join_name(name, "dir" + std::to_string(d)), d_inner, d_state, dt_rank, rng);
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        auto paths = cached_paths(x.dim(2), x.dim(3), mode_);
        std::vector<Tensor<T>> ys;
        ys.reserve(4);
        for (std::size_t d = 0; d < 4; ++d) ys.push_back(dirs_[d](flatten_along(x, (*paths)[d])));
        return merge_directions(ys, *paths);
    }

    void collect(ParamSet<T>& out) {
        for (auto& s : dirs_) s.collect(out);
    }

    S6<T>& direction(std::size_t d) { return dirs_.at(d); }
    ScanMode mode() const { return mode_; }
    void set_mode(ScanMode m) { mode_ = m; }
    void set_kernel(ScanKernel k, std::size_t block) {
        for (auto& s : dirs_) s.kernel = k, s.block = block;
    }

   private:
    ScanMode mode_ = ScanMode::CS2D;
    std::array<S6<T>, 4> dirs_;
};

}  // namespace cvmh
