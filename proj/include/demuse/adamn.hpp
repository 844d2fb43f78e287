#pragma once

#include <string>
#include <vector>

#include "demuse/diffusion.hpp"
#include "demuse/tokenizer.hpp"

namespace demuse {

// c = MLP(task_embedding + timestep_sinusoidal(k)), one row per sample
class ContextNet {
public:
    ContextNet(int64_t D, int64_t n_tasks, int64_t num_steps, ParamStore& ps,
               const std::string& prefix = "ctx.")
        : D_(D), n_tasks_(n_tasks), num_steps_(num_steps) {
        task_emb_ = ps.add(prefix + "task_emb", {n_tasks, D}, D);
        w1_ = ps.add(prefix + "w1", {D, D}, D);
        b1_ = ps.add_zeros(prefix + "b1", {1, D});
        w2_ = ps.add(prefix + "w2", {D, D}, D);
        b2_ = ps.add_zeros(prefix + "b2", {1, D});
    }

    Tensor forward(const std::vector<int64_t>& task_ids, const std::vector<int64_t>& ks) const {
        if (task_ids.size() != ks.size() || task_ids.empty())
            throw RuntimeAbort("context: batch size mismatch");
        int64_t B = static_cast<int64_t>(task_ids.size());
        for (int64_t t : task_ids)
            if (t < 0 || t >= n_tasks_)
                throw ConfigError("context: unknown task id " + std::to_string(t));
        Tensor sins = Tensor::zeros({B, D_});
        for (int64_t b = 0; b < B; ++b) {
            if (ks[b] < 0 || ks[b] >= num_steps_)
                throw RuntimeAbort("context: timestep out of range");
            auto e = sinusoidal_embedding(double(ks[b]), D_);
            std::copy(e.begin(), e.end(), sins.data().begin() + b * D_);
        }
        Tensor x = add(take_rows(task_emb_, task_ids), sins);
        return linear(silu(linear(x, w1_, b1_)), w2_, b2_);
    }

    int64_t n_tasks() const { return n_tasks_; }

private:
    int64_t D_, n_tasks_, num_steps_;
    Tensor task_emb_, w1_, b1_, w2_, b2_;
};

// modality-expert affine over LN(h), then a shared context modulation:
// out = (1 + dgamma) * (gamma_m * LN(h) + beta_m) + dbeta
class AdaMNLayer {
public:
    AdaMNLayer(int64_t D, int64_t n_modalities, ParamStore& ps, const std::string& prefix)
        : D_(D), n_mod_(n_modalities) {
        for (int64_t m = 0; m < n_modalities; ++m) {
            std::string p = prefix + "e" + std::to_string(m) + ".";
            ew1_.push_back(ps.add(p + "w1", {D, D}, D));
            eb1_.push_back(ps.add_zeros(p + "b1", {1, D}));
            ew2_.push_back(ps.add(p + "w2", {2 * D, D}, D));
            // near-identity start: gamma bias 1, beta bias 0
            eb2_.push_back(ps.add_custom(p + "b2", {1, 2 * D}, [D](std::vector<double>& d) {
                std::fill(d.begin(), d.begin() + D, 1.0);
            }));
        }
        // zero-initialized so the modulation path is silent until trained
        mod_w_ = ps.add_zeros(prefix + "mod.w", {2 * D, D});
        mod_b_ = ps.add_zeros(prefix + "mod.b", {1, 2 * D});
    }

    // h: [B*N, D]; ids: one modality per row, identical pattern per sample; c: [B, D]
    Tensor forward(const Tensor& h, const std::vector<int>& ids, const Tensor& c) const {
        int64_t R = h.rows(), B = c.rows();
        if (static_cast<int64_t>(ids.size()) != R)
            throw RuntimeAbort("adamn: modality id count mismatch");
        if (R % B != 0) throw RuntimeAbort("adamn: rows not divisible by batch");
        int64_t N = R / B;

        std::vector<std::vector<int64_t>> groups(n_mod_);
        for (int64_t i = 0; i < N; ++i) {
            int m = ids[i];
            if (m < 0 || m >= n_mod_)
                throw RuntimeAbort("adamn: unregistered modality " + std::to_string(m));
            groups[m].push_back(i);
        }
        for (int64_t b = 1; b < B; ++b)
            for (int64_t i = 0; i < N; ++i)
                if (ids[b * N + i] != ids[i])
                    throw RuntimeAbort("adamn: modality pattern differs across batch");

        Tensor ln = layer_norm_rows(h);

        std::vector<Tensor> parts;
        std::vector<std::shared_ptr<std::vector<int64_t>>> dests;
        for (int m = 0; m < n_mod_; ++m) {
            if (groups[m].empty()) continue;
            auto idx = std::make_shared<std::vector<int64_t>>();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i : groups[m]) idx->push_back(b * N + i);
            Tensor gb = linear(silu(linear(c, ew1_[m], eb1_[m])), ew2_[m], eb2_[m]);
            Tensor gamma = slice_cols(gb, 0, D_);
            Tensor beta = slice_cols(gb, D_, 2 * D_);
            int64_t n_m = static_cast<int64_t>(groups[m].size());
            parts.push_back(affine_rows_grouped(take_rows(ln, idx), gamma, beta, n_m));
            dests.push_back(idx);
        }
        Tensor tilde = place_rows(parts, dests, R);

        Tensor mod = linear(silu(c), mod_w_, mod_b_);
        Tensor dgamma = add_scalar(slice_cols(mod, 0, D_), 1.0);
        Tensor dbeta = slice_cols(mod, D_, 2 * D_);
        return affine_rows_grouped(tilde, dgamma, dbeta, N);
    }

private:
    int64_t D_, n_mod_;
    std::vector<Tensor> ew1_, eb1_, ew2_, eb2_;
    Tensor mod_w_, mod_b_;
};

} // namespace demuse
