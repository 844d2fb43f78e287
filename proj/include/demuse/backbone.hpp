#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "demuse/adamn.hpp"
#include "demuse/moe.hpp"

namespace demuse {

struct ModelConfig {
    ModelDims dims;
    int64_t layers = 6;
    int64_t heads = 4;
    int64_t moe_start = 3;
    int64_t n_experts = 4;
    int64_t top_k = 1;
    int64_t expert_ratio = 4;
    int64_t n_tasks = 2;
    int64_t num_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    int64_t ddim_steps = 16;
    double clip = 4.0;
    double lambda_v = 1.0;
    double lambda_a = 2.0;
    double alpha = 0.01;
    double vb_weight = 1.0;

    void validate() const {
        dims.validate(heads);
        if (layers < 1) throw ConfigError("config: layers must be >= 1");
        if (moe_start < 0 || moe_start > layers)
            throw ConfigError("config: moe_start outside [0, layers]");
        if (n_experts < 1) throw ConfigError("config: n_experts must be >= 1");
        if (top_k < 1 || top_k > n_experts) throw ConfigError("config: top_k out of range");
        if (expert_ratio < 1) throw ConfigError("config: expert_ratio must be >= 1");
        if (n_tasks < 1) throw ConfigError("config: n_tasks must be >= 1");
        if (num_steps < 1) throw ConfigError("config: num_steps must be >= 1");
        if (ddim_steps < 1 || ddim_steps > num_steps)
            throw ConfigError("config: ddim_steps outside [1, num_steps]");
        if (!(beta_start > 0) || !(beta_end > beta_start))
            throw ConfigError("config: beta range invalid");
        if (!(clip > 0)) throw ConfigError("config: clip must be positive");
        if (!(lambda_a > 0)) throw ConfigError("config: lambda_a must be positive");
        if (lambda_v < 0 || alpha < 0 || vb_weight < 0)
            throw ConfigError("config: loss weights must be non-negative");
    }
};

// flat joint vector: clean context latent, noised future latents, clean
// current state, noised action chunk
struct JointLayout {
    int64_t ctx_off = 0, ctx_len = 0;
    int64_t fut_off = 0, fut_len = 0;
    int64_t state_off = 0, state_len = 0;
    int64_t act_off = 0, act_len = 0;
    int64_t total = 0;
};

inline JointLayout joint_layout(const ModelDims& d) {
    JointLayout j;
    j.ctx_len = d.C_lat * d.S_lat * d.S_lat;
    j.fut_len = d.H * d.C_lat * d.S_lat * d.S_lat;
    j.state_len = d.A_dof;
    j.act_len = d.K * d.A_dof;
    j.ctx_off = 0;
    j.fut_off = j.ctx_len;
    j.state_off = j.fut_off + j.fut_len;
    j.act_off = j.state_off + j.state_len;
    j.total = j.act_off + j.act_len;
    return j;
}

inline std::vector<uint8_t> joint_mask(const ModelDims& d) {
    JointLayout j = joint_layout(d);
    std::vector<uint8_t> m(j.total, 0);
    std::fill(m.begin() + j.fut_off, m.begin() + j.fut_off + j.fut_len, 1);
    std::fill(m.begin() + j.act_off, m.begin() + j.act_off + j.act_len, 1);
    return m;
}

enum class Ablation { Full, RgbOnly, RgbD, RgbF, Conditioned };

inline Ablation parse_ablation(const std::string& s) {
    if (s == "full") return Ablation::Full;
    if (s == "rgb-only") return Ablation::RgbOnly;
    if (s == "rgb-d") return Ablation::RgbD;
    if (s == "rgb-f") return Ablation::RgbF;
    if (s == "conditioned") return Ablation::Conditioned;
    throw ConfigError("unknown ablation mode: " + s);
}

struct LayerTelemetry {
    int64_t layer = 0;
    std::vector<double> load;
    std::vector<double> mean_prob;
    double aux_value = 0; // pre-alpha
};

struct ForwardResult {
    Tensor eps_rgb; // [B, fut_len]
    Tensor v_rgb;   // [B, fut_len]
    Tensor eps_act; // [B, act_len]
    Tensor v_act;   // [B, act_len]
    std::vector<Tensor> aux; // per MoE layer, alpha-free
    std::vector<LayerTelemetry> telemetry;
    int64_t expert_calls = 0;
};

struct LossBreakdown {
    double mse_v = 0, vb_v = 0, mse_a = 0, vb_a = 0, aux = 0;
};

// one normalized training example
struct Sample {
    std::vector<double> joint;
    std::vector<double> depth; // S*S
    std::vector<double> force; // 6
    int64_t task_id = 0;
};

// normalized observation for closed-loop sampling
struct PolicyObs {
    std::vector<double> ctx;   // C*S*S
    std::vector<double> depth; // S*S
    std::vector<double> force; // 6
    std::vector<double> state; // A_dof
    int64_t task_id = 0;
};

struct TrainHyper {
    double lr_base = 1e-4;
    int64_t warmup = 400;
    int64_t total_steps = 5000;
    double weight_decay = 0.0;
    double ema_decay = 0.998;
};

struct StepMetrics {
    int64_t step = 0;
    double lr = 0, loss = 0, grad_norm = 0;
    LossBreakdown bd;
    std::vector<LayerTelemetry> telemetry;
};

class Backbone {
public:
    Backbone(const ModelConfig& cfg, ParamStore& ps) : cfg_(cfg), jl_(joint_layout(cfg.dims)) {
        cfg.validate();
        int64_t D = cfg.dims.D;
        tok_ = std::make_unique<Tokenizer>(cfg.dims, ps, "tok.");
        ctx_ = std::make_unique<ContextNet>(D, cfg.n_tasks, cfg.num_steps, ps, "ctx.");
        for (int64_t l = 0; l < cfg.layers; ++l) {
            std::string p = "blk" + std::to_string(l) + ".";
            Block b;
            b.ad1 = std::make_unique<AdaMNLayer>(D, 4, ps, p + "ad1.");
            b.ad2 = std::make_unique<AdaMNLayer>(D, 4, ps, p + "ad2.");
            b.wq = ps.add(p + "attn.wq", {D, D}, D);
            b.bq = ps.add_zeros(p + "attn.bq", {1, D});
            b.wk = ps.add(p + "attn.wk", {D, D}, D);
            b.bk = ps.add_zeros(p + "attn.bk", {1, D});
            b.wv = ps.add(p + "attn.wv", {D, D}, D);
            b.bv = ps.add_zeros(p + "attn.bv", {1, D});
            b.wo = ps.add(p + "attn.wo", {D, D}, D);
            b.bo = ps.add_zeros(p + "attn.bo", {1, D});
            if (l >= cfg.moe_start) {
                b.moe = std::make_unique<MoELayer>(D, cfg.n_experts, cfg.top_k,
                                                   cfg.expert_ratio, ps, p + "moe.");
            } else {
                b.fw1 = ps.add(p + "ffn.w1", {4 * D, D}, D);
                b.fb1 = ps.add_zeros(p + "ffn.b1", {1, 4 * D});
                b.fw2 = ps.add(p + "ffn.w2", {D, 4 * D}, 4 * D);
                b.fb2 = ps.add_zeros(p + "ffn.b2", {1, D});
            }
            blocks_.push_back(std::move(b));
        }
        final_ad_ = std::make_unique<AdaMNLayer>(D, 4, ps, "final.ad.");
        int64_t rgb_out = cfg.dims.p_rgb * cfg.dims.p_rgb * cfg.dims.H * cfg.dims.C_lat * 2;
        head_rgb_w_ = ps.add("head.rgb_w", {rgb_out, D}, D);
        head_rgb_b_ = ps.add_zeros("head.rgb_b", {1, rgb_out});
        head_act_w_ = ps.add("head.act_w", {2 * jl_.act_len, D}, D);
        head_act_b_ = ps.add_zeros("head.act_b", {1, 2 * jl_.act_len});
        build_head_maps();
    }

    const ModelConfig& config() const { return cfg_; }
    const JointLayout& layout() const { return jl_; }
    const Tokenizer& tokenizer() const { return *tok_; }

    ForwardResult forward(const Tensor& joint_w, const Tensor& depth, const Tensor& force,
                          const std::vector<int64_t>& task_ids, const std::vector<int64_t>& ks,
                          Ablation mode = Ablation::Full) const {
        const ModelDims& d = cfg_.dims;
        int64_t B = joint_w.rows();
        if (joint_w.cols() != jl_.total) throw RuntimeAbort("forward: joint width mismatch");
        if (depth.rows() != B || force.rows() != B)
            throw RuntimeAbort("forward: conditioning batch mismatch");
        if (static_cast<int64_t>(task_ids.size()) != B ||
            static_cast<int64_t>(ks.size()) != B)
            throw RuntimeAbort("forward: id batch mismatch");

        Tensor stacked = slice_cols(joint_w, 0, jl_.ctx_len + jl_.fut_len);
        Tensor act_in = slice_cols(joint_w, jl_.state_off, jl_.total);
        Tensor rgb_tok = tok_->embed_rgb(stacked);
        Tensor act_tok = tok_->embed_action(act_in);

        bool use_depth = mode == Ablation::Full || mode == Ablation::RgbD;
        bool use_force = mode == Ablation::Full || mode == Ablation::RgbF;

        Tensor c = ctx_->forward(task_ids, ks);
        if (mode == Ablation::Conditioned) {
            // depth and force enter only as modulation context
            Tensor dtok = tok_->embed_depth(depth); // [B*n_depth, D]
            Tensor pool = Tensor::zeros({B, B * d.n_depth()});
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < d.n_depth(); ++i)
                    pool.data()[b * (B * d.n_depth()) + b * d.n_depth() + i] =
                        1.0 / double(d.n_depth());
            Tensor dmean = matmul(pool, dtok); // [B, D]
            Tensor ftok = tok_->embed_force(force);
            c = add(c, add(dmean, ftok));
        }

        // sequence assembly in canonical order over the active modalities
        std::vector<Tensor> parts = {rgb_tok};
        std::vector<int64_t> counts = {d.n_rgb()};
        std::vector<int> mods = {MOD_RGB};
        if (use_depth) {
            parts.push_back(tok_->embed_depth(depth));
            counts.push_back(d.n_depth());
            mods.push_back(MOD_DEPTH);
        }
        if (use_force) {
            parts.push_back(tok_->embed_force(force));
            counts.push_back(1);
            mods.push_back(MOD_FORCE);
        }
        parts.push_back(act_tok);
        counts.push_back(1);
        mods.push_back(MOD_ACTION);

        int64_t N = 0;
        for (int64_t n : counts) N += n;
        std::vector<int> ids;
        ids.reserve(B * N);
        for (int64_t b = 0; b < B; ++b)
            for (size_t g = 0; g < counts.size(); ++g)
                for (int64_t i = 0; i < counts[g]; ++i) ids.push_back(mods[g]);
        std::vector<std::shared_ptr<std::vector<int64_t>>> dests;
        {
            int64_t off = 0;
            for (size_t g = 0; g < counts.size(); ++g) {
                auto idx = std::make_shared<std::vector<int64_t>>();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t i = 0; i < counts[g]; ++i)
                        idx->push_back(b * N + off + i);
                dests.push_back(idx);
                off += counts[g];
            }
        }
        Tensor h = place_rows(parts, dests, B * N);

        ForwardResult out;
        for (int64_t l = 0; l < cfg_.layers; ++l) {
            const Block& blk = blocks_[l];
            Tensor a1 = blk.ad1->forward(h, ids, c);
            Tensor at = attention(linear(a1, blk.wq, blk.bq), linear(a1, blk.wk, blk.bk),
                                  linear(a1, blk.wv, blk.bv), B, cfg_.heads);
            h = add(h, linear(at, blk.wo, blk.bo));
            Tensor a2 = blk.ad2->forward(h, ids, c);
            if (blk.moe) {
                MoEOutput mo = blk.moe->forward(a2, ids, 1.0); // alpha applied in Eq.3 only
                h = add(h, mo.y);
                out.aux.push_back(mo.aux);
                LayerTelemetry t;
                t.layer = l;
                t.load = mo.load;
                t.mean_prob = mo.mean_prob;
                t.aux_value = mo.aux.item();
                out.telemetry.push_back(std::move(t));
                out.expert_calls += mo.expert_calls;
            } else {
                h = add(h, linear(silu(linear(a2, blk.fw1, blk.fb1)), blk.fw2, blk.fb2));
            }
        }
        h = final_ad_->forward(h, ids, c);

        // heads read the rgb rows and the action row of each sample
        std::vector<int64_t> rgb_rows, act_rows;
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t i = 0; i < d.n_rgb(); ++i) rgb_rows.push_back(b * N + i);
            act_rows.push_back(b * N + N - 1);
        }
        Tensor rgb_head = linear(take_rows(h, rgb_rows), head_rgb_w_, head_rgb_b_);
        int64_t per_tok = head_rgb_w_.rows();
        Tensor rgb_flat = rgb_head.reshape({B, d.n_rgb() * per_tok});
        out.eps_rgb = gather_flat(rgb_flat, eps_map_);
        out.v_rgb = gather_flat(rgb_flat, v_map_);

        Tensor act_head = linear(take_rows(h, act_rows), head_act_w_, head_act_b_);
        out.eps_act = slice_cols(act_head, 0, jl_.act_len);
        out.v_act = slice_cols(act_head, jl_.act_len, 2 * jl_.act_len);
        return out;
    }

    // deterministic batched DDIM over the joint vector; per-episode noise seeds
    std::vector<std::vector<double>> sample_joint(const std::vector<PolicyObs>& obs,
                                                  const std::vector<uint64_t>& noise_seeds,
                                                  const DiffusionSchedule& sched,
                                                  Ablation mode = Ablation::Full) const {
        NoGradGuard ng;
        int64_t B = static_cast<int64_t>(obs.size());
        if (obs.empty() || noise_seeds.size() != obs.size())
            throw RuntimeAbort("sample_joint: seed count mismatch");
        std::vector<double> flat(B * jl_.total);
        std::vector<uint8_t> mask1 = joint_mask(cfg_.dims);
        std::vector<uint8_t> mask(B * jl_.total);
        for (int64_t b = 0; b < B; ++b) {
            const PolicyObs& o = obs[b];
            if (static_cast<int64_t>(o.ctx.size()) != jl_.ctx_len ||
                static_cast<int64_t>(o.state.size()) != jl_.state_len)
                throw RuntimeAbort("sample_joint: observation shape mismatch");
            double* w = flat.data() + b * jl_.total;
            std::copy(o.ctx.begin(), o.ctx.end(), w + jl_.ctx_off);
            std::copy(o.state.begin(), o.state.end(), w + jl_.state_off);
            Rng nr(noise_seeds[b]);
            for (int64_t i = 0; i < jl_.fut_len; ++i) w[jl_.fut_off + i] = nr.normal();
            for (int64_t i = 0; i < jl_.act_len; ++i) w[jl_.act_off + i] = nr.normal();
            std::copy(mask1.begin(), mask1.end(), mask.begin() + b * jl_.total);
        }

        Tensor depth = Tensor::zeros({B, cfg_.dims.S_lat * cfg_.dims.S_lat});
        Tensor force = Tensor::zeros({B, 6});
        std::vector<int64_t> tasks(B);
        for (int64_t b = 0; b < B; ++b) {
            std::copy(obs[b].depth.begin(), obs[b].depth.end(),
                      depth.data().begin() + b * depth.cols());
            std::copy(obs[b].force.begin(), obs[b].force.end(),
                      force.data().begin() + b * 6);
            tasks[b] = obs[b].task_id;
        }

        auto denoiser = [&](const std::vector<double>& w, int64_t k) {
            Tensor jw = Tensor::from_vector({B, jl_.total}, w);
            std::vector<int64_t> ks(B, k);
            ForwardResult fr = forward(jw, depth, force, tasks, ks, mode);
            std::vector<double> eps(B * jl_.total, 0.0);
            for (int64_t b = 0; b < B; ++b) {
                double* e = eps.data() + b * jl_.total;
                const double* er = fr.eps_rgb.data().data() + b * jl_.fut_len;
                const double* ea = fr.eps_act.data().data() + b * jl_.act_len;
                std::copy(er, er + jl_.fut_len, e + jl_.fut_off);
                std::copy(ea, ea + jl_.act_len, e + jl_.act_off);
            }
            return eps;
        };
        std::vector<double> out =
            ddim_sample(denoiser, flat, sched, cfg_.ddim_steps, cfg_.clip, mask);
        std::vector<std::vector<double>> res(B);
        for (int64_t b = 0; b < B; ++b)
            res[b].assign(out.begin() + b * jl_.total, out.begin() + (b + 1) * jl_.total);
        return res;
    }

    // copy dense FFN weights into every MoE block (shared exact, routed noisy)
    void upcycle_from(ParamStore& ps, const RecordMap& dense, double noise_scale, Rng& rng) {
        for (int64_t l = 0; l < cfg_.layers; ++l) {
            if (!blocks_[l].moe) continue;
            std::string p = "blk" + std::to_string(l) + ".ffn.";
            auto get = [&](const std::string& n) -> const std::vector<double>& {
                auto it = dense.find(p + n);
                if (it == dense.end())
                    throw RuntimeAbort("upcycle: donor checkpoint missing " + p + n);
                return it->second.data;
            };
            blocks_[l].moe->upcycle(ps, get("w1"), get("b1"), get("w2"), get("b2"),
                                    noise_scale, rng);
        }
    }

private:
    struct Block {
        std::unique_ptr<AdaMNLayer> ad1, ad2;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        std::unique_ptr<MoELayer> moe;
        Tensor fw1, fb1, fw2, fb2;
    };

    void build_head_maps() {
        const ModelDims& d = cfg_.dims;
        int64_t S = d.S_lat, p = d.p_rgb, g = d.rgb_grid();
        int64_t HC = d.H * d.C_lat, per_tok = p * p * HC * 2;
        eps_map_ = std::make_shared<std::vector<int64_t>>(jl_.fut_len);
        v_map_ = std::make_shared<std::vector<int64_t>>(jl_.fut_len);
        for (int64_t c = 0; c < HC; ++c)
            for (int64_t y = 0; y < S; ++y)
                for (int64_t x = 0; x < S; ++x) {
                    int64_t t = (y / p) * g + (x / p);
                    int64_t py = y % p, px = x % p;
                    int64_t dst = c * S * S + y * S + x;
                    (*eps_map_)[dst] = t * per_tok + (2 * c) * p * p + py * p + px;
                    (*v_map_)[dst] = t * per_tok + (2 * c + 1) * p * p + py * p + px;
                }
    }

    ModelConfig cfg_;
    JointLayout jl_;
    std::unique_ptr<Tokenizer> tok_;
    std::unique_ptr<ContextNet> ctx_;
    std::vector<Block> blocks_;
    std::unique_ptr<AdaMNLayer> final_ad_;
    Tensor head_rgb_w_, head_rgb_b_, head_act_w_, head_act_b_;
    std::shared_ptr<std::vector<int64_t>> eps_map_, v_map_;
};

// Eq.3 with the five-term breakdown; alpha multiplies the aux sum here only
inline Tensor total_loss(const ForwardResult& fr, const Tensor& eps_true_rgb,
                         const Tensor& eps_true_act, const std::vector<double>& w_fut,
                         const std::vector<double>& w0_fut, const std::vector<double>& w_act,
                         const std::vector<double>& w0_act, const std::vector<int64_t>& ks,
                         const DiffusionSchedule& sched, const ModelConfig& cfg,
                         LossBreakdown* bd = nullptr) {
    Tensor mse_v = mse(fr.eps_rgb, eps_true_rgb);
    Tensor mse_a = mse(fr.eps_act, eps_true_act);
    Tensor total = add(scale(mse_v, cfg.lambda_v), scale(mse_a, cfg.lambda_a));
    double vb_v_val = 0, vb_a_val = 0;
    if (cfg.vb_weight != 0.0) {
        Tensor vb_v = vb_loss(fr.eps_rgb, fr.v_rgb, w_fut, w0_fut, ks, sched);
        Tensor vb_a = vb_loss(fr.eps_act, fr.v_act, w_act, w0_act, ks, sched);
        total = add(total, add(scale(vb_v, cfg.lambda_v * cfg.vb_weight),
                               scale(vb_a, cfg.lambda_a * cfg.vb_weight)));
        vb_v_val = vb_v.item();
        vb_a_val = vb_a.item();
    }
    double aux_val = 0;
    if (!fr.aux.empty()) {
        Tensor aux_sum = fr.aux[0];
        for (size_t i = 1; i < fr.aux.size(); ++i) aux_sum = add(aux_sum, fr.aux[i]);
        total = add(total, scale(aux_sum, cfg.alpha));
        aux_val = aux_sum.item();
    }
    if (bd) {
        bd->mse_v = mse_v.item();
        bd->vb_v = vb_v_val;
        bd->mse_a = mse_a.item();
        bd->vb_a = vb_a_val;
        bd->aux = aux_val;
    }
    return total;
}

// one optimizer step over a batch; all randomness derives from (seed, step)
inline StepMetrics train_step(Backbone& model, ParamStore& ps,
                              const std::vector<const Sample*>& batch,
                              const DiffusionSchedule& sched, const TrainHyper& hp,
                              int64_t step, uint64_t seed) {
    const ModelConfig& cfg = model.config();
    const JointLayout& jl = model.layout();
    int64_t B = static_cast<int64_t>(batch.size());
    if (B == 0) throw RuntimeAbort("train_step: empty batch");
    std::vector<uint8_t> mask = joint_mask(cfg.dims);

    Rng rng(derive_seed(seed, 0x747261696e, step));
    Tensor joint_w = Tensor::zeros({B, jl.total});
    Tensor depth = Tensor::zeros({B, cfg.dims.S_lat * cfg.dims.S_lat});
    Tensor force = Tensor::zeros({B, 6});
    Tensor eps_rgb = Tensor::zeros({B, jl.fut_len});
    Tensor eps_act = Tensor::zeros({B, jl.act_len});
    std::vector<double> w_fut(B * jl.fut_len), w0_fut(B * jl.fut_len);
    std::vector<double> w_act(B * jl.act_len), w0_act(B * jl.act_len);
    std::vector<int64_t> ks(B), tasks(B);
    for (int64_t b = 0; b < B; ++b) {
        const Sample& s = *batch[b];
        if (static_cast<int64_t>(s.joint.size()) != jl.total)
            throw RuntimeAbort("train_step: sample joint size mismatch");
        ks[b] = rng.uniform_int(cfg.num_steps);
        tasks[b] = s.task_id;
        JointTarget t;
        t.values = s.joint;
        t.mask = mask;
        NoisedSample ns = forward_noise(t, ks[b], sched, rng);
        std::copy(ns.w.begin(), ns.w.end(), joint_w.data().begin() + b * jl.total);
        std::copy(s.depth.begin(), s.depth.end(), depth.data().begin() + b * depth.cols());
        std::copy(s.force.begin(), s.force.end(), force.data().begin() + b * 6);
        for (int64_t i = 0; i < jl.fut_len; ++i) {
            eps_rgb.data()[b * jl.fut_len + i] = ns.eps[jl.fut_off + i];
            w_fut[b * jl.fut_len + i] = ns.w[jl.fut_off + i];
            w0_fut[b * jl.fut_len + i] = s.joint[jl.fut_off + i];
        }
        for (int64_t i = 0; i < jl.act_len; ++i) {
            eps_act.data()[b * jl.act_len + i] = ns.eps[jl.act_off + i];
            w_act[b * jl.act_len + i] = ns.w[jl.act_off + i];
            w0_act[b * jl.act_len + i] = s.joint[jl.act_off + i];
        }
    }

    ps.zero_grad();
    ForwardResult fr = model.forward(joint_w, depth, force, tasks, ks);
    StepMetrics m;
    m.step = step;
    Tensor loss = total_loss(fr, eps_rgb, eps_act, w_fut, w0_fut, w_act, w0_act, ks, sched,
                             cfg, &m.bd);
    m.loss = loss.item();
    if (!std::isfinite(m.loss)) {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "train_step %lld: non-finite loss (mse_v=%g vb_v=%g mse_a=%g vb_a=%g "
                      "aux=%g)",
                      static_cast<long long>(step), m.bd.mse_v, m.bd.vb_v, m.bd.mse_a,
                      m.bd.vb_a, m.bd.aux);
        throw RuntimeAbort(buf);
    }
    loss.backward();
    m.grad_norm = ps.grad_norm();
    m.lr = lr_at(step, hp.lr_base, hp.warmup, hp.total_steps);
    ps.adamw_step(m.lr, step + 1, hp.weight_decay);
    ps.ema_update(hp.ema_decay);
    m.telemetry = fr.telemetry;
    return m;
}

} // namespace demuse
