#pragma once

// Forward noising, deterministic DDIM sampling and the learned-variance
// objective. Everything here is per-scalar and mask-aware: unmasked entries
// pass through every transform bit-exactly.

#include <cstdint>
#include <functional>
#include <vector>

#include "demuse/ops.hpp"
#include "demuse/tensor.hpp"

namespace demuse {

struct DiffusionSchedule {
    std::vector<double> betas;
    std::vector<double> alphas_bar; // cumulative products of (1 - beta)

    int64_t num_steps() const { return static_cast<int64_t>(betas.size()); }

    double beta(int64_t k) const { return betas.at(static_cast<size_t>(k)); }
    double abar(int64_t k) const { return alphas_bar.at(static_cast<size_t>(k)); }
    double abar_prev(int64_t k) const { return k > 0 ? abar(k - 1) : 1.0; }

    // posterior variance of the reverse transition; defined for k >= 1
    double beta_tilde(int64_t k) const {
        return (1.0 - abar_prev(k)) / (1.0 - abar(k)) * beta(k);
    }

    // log posterior variance with the k = 0 slot clipped to k = 1's value,
    // so the learned-variance interpolation is well defined everywhere
    double log_beta_tilde_clipped(int64_t k) const {
        if (k == 0) return num_steps() > 1 ? std::log(beta_tilde(1)) : std::log(beta(0));
        return std::log(beta_tilde(k));
    }
};

inline DiffusionSchedule build_schedule(int64_t num_steps, double beta_start = 1e-4,
                                        double beta_end = 2e-2) {
    if (num_steps < 1) throw RuntimeAbort("build_schedule: num_steps must be >= 1");
    DiffusionSchedule s;
    s.betas.resize(static_cast<size_t>(num_steps));
    for (int64_t k = 0; k < num_steps; ++k)
        s.betas[k] = num_steps == 1
                         ? beta_start
                         : beta_start + (beta_end - beta_start) * static_cast<double>(k) /
                               static_cast<double>(num_steps - 1);
    s.alphas_bar.resize(static_cast<size_t>(num_steps));
    double prod = 1.0;
    for (int64_t k = 0; k < num_steps; ++k) {
        prod *= 1.0 - s.betas[k];
        s.alphas_bar[k] = prod;
    }
    return s;
}

// Joint denoising target: future frame latents and the action chunk, with a
// per-scalar mask (true = gets noised; false = stays clean bit-exactly).
struct JointTarget {
    std::vector<double> values;
    std::vector<uint8_t> mask;
};

struct NoisedSample {
    std::vector<double> w;   // values at step k
    std::vector<double> eps; // drawn noise; 0 at unmasked positions
    int64_t k = 0;
};

inline NoisedSample forward_noise(const JointTarget& target, int64_t k,
                                  const DiffusionSchedule& sched, Rng& rng) {
    if (k < 0 || k >= sched.num_steps()) throw RuntimeAbort("forward_noise: k out of range");
    if (target.mask.size() != target.values.size())
        throw RuntimeAbort("forward_noise: mask size mismatch");
    NoisedSample out;
    out.k = k;
    out.w = target.values;
    out.eps.assign(target.values.size(), 0.0);
    double sa = std::sqrt(sched.abar(k));
    double sb = std::sqrt(1.0 - sched.abar(k));
    for (size_t i = 0; i < target.values.size(); ++i) {
        if (!target.mask[i]) continue; // clean context: untouched, no draw
        double e = rng.normal();
        out.eps[i] = e;
        out.w[i] = sa * target.values[i] + sb * e;
    }
    return out;
}

// round(i * num_steps / ddim_steps) - 1 for i = 1..ddim_steps
inline std::vector<int64_t> ddim_indices(int64_t num_steps, int64_t ddim_steps) {
    if (ddim_steps < 1 || ddim_steps > num_steps)
        throw RuntimeAbort("ddim_indices: need 1 <= ddim_steps <= num_steps");
    std::vector<int64_t> idx(static_cast<size_t>(ddim_steps));
    for (int64_t i = 1; i <= ddim_steps; ++i) {
        double pos = static_cast<double>(i * num_steps) / static_cast<double>(ddim_steps);
        idx[i - 1] = static_cast<int64_t>(std::llround(pos)) - 1;
    }
    for (size_t i = 1; i < idx.size(); ++i)
        if (idx[i] <= idx[i - 1]) throw RuntimeAbort("ddim_indices: indices not increasing");
    if (idx.back() != num_steps - 1) throw RuntimeAbort("ddim_indices: last index mismatch");
    return idx;
}

inline double ddim_x0_scalar(double w, double eps_hat, double abar_k, double c_clip) {
    double x0 = (w - std::sqrt(1.0 - abar_k) * eps_hat) / std::sqrt(abar_k);
    return std::clamp(x0, -c_clip, c_clip);
}

// One eta = 0 step from k_from down to k_to (masked positions only).
inline std::vector<double> ddim_step(const std::vector<double>& w,
                                     const std::vector<double>& eps_hat,
                                     int64_t k_from, int64_t k_to,
                                     const DiffusionSchedule& sched, double c_clip,
                                     const std::vector<uint8_t>& mask) {
    if (k_to >= k_from) throw RuntimeAbort("ddim_step: k_to must be < k_from");
    if (k_from >= sched.num_steps() || k_to < 0) throw RuntimeAbort("ddim_step: k out of range");
    double abar_from = sched.abar(k_from);
    double abar_to = sched.abar(k_to);
    double sa = std::sqrt(abar_to);
    double sb = std::sqrt(1.0 - abar_to);
    std::vector<double> out = w;
    for (size_t i = 0; i < w.size(); ++i) {
        if (!mask[i]) continue;
        double x0 = ddim_x0_scalar(w[i], eps_hat[i], abar_from, c_clip);
        out[i] = sa * x0 + sb * eps_hat[i];
    }
    return out;
}

// Full deterministic sampler. denoiser(w, k) -> eps_hat over the same flat
// layout; unmasked entries of w_init ride through unchanged and the final
// output carries the clamped x0 prediction at the smallest retained index.
inline std::vector<double> ddim_sample(
    const std::function<std::vector<double>(const std::vector<double>&, int64_t)>& denoiser,
    const std::vector<double>& w_init, const DiffusionSchedule& sched, int64_t ddim_steps,
    double c_clip, const std::vector<uint8_t>& mask) {
    auto idx = ddim_indices(sched.num_steps(), ddim_steps);
    std::vector<double> w = w_init;
    for (size_t j = idx.size(); j-- > 1;) {
        std::vector<double> eps = denoiser(w, idx[j]);
        w = ddim_step(w, eps, idx[j], idx[j - 1], sched, c_clip, mask);
    }
    std::vector<double> eps = denoiser(w, idx[0]);
    double abar0 = sched.abar(idx[0]);
    for (size_t i = 0; i < w.size(); ++i)
        if (mask[i]) w[i] = ddim_x0_scalar(w[i], eps[i], abar0, c_clip);
    return w;
}

namespace detail {

inline double norm_cdf(double z) { return 0.5 * (1.0 + std::erf(z / std::sqrt(2.0))); }
inline double norm_pdf(double z) {
    return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
}

} // namespace detail

// Learned-variance objective, mean over all given positions (callers pass
// exactly the masked/future components). Per element with per-row step k:
//   k > 0: KL(q(w_{k-1} | w_k, w0) || p(w_{k-1} | w_k)) with the model mean
//          frozen (gradient reaches v_hat only)
//   k = 0: discretized Gaussian log-likelihood of w0 (bin width 1/127.5)
// Model log-variance interpolates: v*log(beta_k) + (1-v)*log(beta_tilde_k).
inline Tensor vb_loss(const Tensor& eps_hat, const Tensor& v_hat,
                      const std::vector<double>& w_k, const std::vector<double>& w0,
                      const std::vector<int64_t>& k_per_row, const DiffusionSchedule& sched) {
    int64_t R = v_hat.rows(), C = v_hat.cols();
    int64_t n = v_hat.size();
    if (eps_hat.size() != n || static_cast<int64_t>(w_k.size()) != n ||
        static_cast<int64_t>(w0.size()) != n || static_cast<int64_t>(k_per_row.size()) != R)
        throw RuntimeAbort("vb_loss: size mismatch");

    // grads flow into v_hat only; eps data is captured by value semantics
    auto eps_data = eps_hat.node()->data;
    auto dterm = std::make_shared<std::vector<double>>(static_cast<size_t>(n));

    Tensor out = make_op_result({1}, {v_hat}, [dterm, n](Tensor::Node& self) {
        auto& p = *self.parents[0];
        p.ensure_grad();
        double g = self.grad[0] / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) p.grad[i] += g * (*dterm)[i];
    });

    const auto& ev = *eps_data;
    const auto& vv = v_hat.data();
    double acc = 0.0;
    for (int64_t r = 0; r < R; ++r) {
        int64_t k = k_per_row[r];
        double beta = sched.beta(k);
        double abar = sched.abar(k);
        double abar_prev = sched.abar_prev(k);
        double alpha = 1.0 - beta;
        double log_bt = sched.log_beta_tilde_clipped(k);
        double c0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
        double c1 = std::sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar);
        for (int64_t c = 0; c < C; ++c) {
            int64_t i = r * C + c;
            double v = vv[i];
            double log_var_p = v * std::log(beta) + (1.0 - v) * log_bt;
            double dlv_dv = std::log(beta) - log_bt;
            double x0_hat = (w_k[i] - std::sqrt(1.0 - abar) * ev[i]) / std::sqrt(abar);
            double mu_p = c0 * x0_hat + c1 * w_k[i];
            double term, dterm_dlv;
            if (k > 0) {
                double var_q = sched.beta_tilde(k);
                double mu_q = c0 * w0[i] + c1 * w_k[i];
                double dmu2 = (mu_q - mu_p) * (mu_q - mu_p);
                double ratio = (var_q + dmu2) * std::exp(-log_var_p);
                term = 0.5 * (log_var_p - std::log(var_q) + ratio - 1.0);
                dterm_dlv = 0.5 * (1.0 - ratio);
            } else {
                // discretized decoder likelihood; mu_p equals x0_hat here
                // (c0 = 1, c1 = 0 when abar_prev = 1)
                double sigma = std::exp(0.5 * log_var_p);
                double delta = 1.0 / 127.5;
                double zp = (w0[i] + 0.5 * delta - mu_p) / sigma;
                double zm = (w0[i] - 0.5 * delta - mu_p) / sigma;
                double prob, dprob_dlv;
                if (w0[i] <= -0.999) {
                    prob = detail::norm_cdf(zp);
                    dprob_dlv = detail::norm_pdf(zp) * (-0.5 * zp);
                } else if (w0[i] >= 0.999) {
                    prob = 1.0 - detail::norm_cdf(zm);
                    dprob_dlv = -detail::norm_pdf(zm) * (-0.5 * zm);
                } else {
                    prob = detail::norm_cdf(zp) - detail::norm_cdf(zm);
                    dprob_dlv = detail::norm_pdf(zp) * (-0.5 * zp) -
                                detail::norm_pdf(zm) * (-0.5 * zm);
                }
                double p_cl = std::max(prob, 1e-12);
                term = -std::log(p_cl);
                dprob_dlv = prob > 1e-12 ? dprob_dlv : 0.0;
                dterm_dlv = -dprob_dlv / p_cl;
            }
            acc += term;
            (*dterm)[i] = dterm_dlv * dlv_dv;
        }
    }
    out.data()[0] = acc / static_cast<double>(n);
    return out;
}

} // namespace demuse
