#pragma once

#include <iostream>
#include <string>
#include <vector>

#include "demuse/tokenizer.hpp"

namespace demuse {

struct RoutingDecision {
    int64_t top_k = 1;
    std::vector<int64_t> idx;  // [N_tok * top_k], slot-major per token; slot 0 is argmax
    std::vector<double> prob;  // matching raw softmax probabilities
    Tensor logits;             // [N_tok, n_experts]
};

// L_aux = alpha * N * sum_i load_i * mean_prob_i over non-action tokens.
// load_i counts routing slots, mean_prob_i averages softmax mass; action
// tokens (modality 1) contribute to neither.
inline Tensor aux_balance_loss(const Tensor& logits, const std::vector<int64_t>& idx,
                               int64_t top_k, const std::vector<int>& modality_ids,
                               double alpha, std::vector<double>* load_out = nullptr,
                               std::vector<double>* mean_prob_out = nullptr) {
    int64_t N = logits.rows(), E = logits.cols();
    if (static_cast<int64_t>(modality_ids.size()) != N)
        throw RuntimeAbort("aux_balance_loss: modality id count mismatch");
    if (static_cast<int64_t>(idx.size()) != N * top_k)
        throw RuntimeAbort("aux_balance_loss: routing index count mismatch");
    std::vector<int64_t> keep;
    for (int64_t t = 0; t < N; ++t)
        if (modality_ids[t] != MOD_ACTION) keep.push_back(t);
    if (load_out) load_out->assign(E, 0.0);
    if (mean_prob_out) mean_prob_out->assign(E, 0.0);
    if (keep.empty()) {
        std::cerr << "aux_balance_loss: no non-action tokens, returning 0\n";
        return Tensor::zeros({1, 1});
    }
    std::vector<double> load(E, 0.0);
    for (int64_t t : keep)
        for (int64_t j = 0; j < top_k; ++j) load[idx[t * top_k + j]] += 1.0;
    for (auto& l : load) l /= double(keep.size() * top_k);

    Tensor probs = softmax_rows(take_rows(logits, keep));
    Tensor s = mean_rows(probs); // [1, E]
    Tensor load_t = Tensor::from_vector({1, E}, load);
    Tensor aux = scale(sum(mul(s, load_t)), alpha * double(E));

    if (load_out) *load_out = load;
    if (mean_prob_out) {
        NoGradGuard ng;
        *mean_prob_out = s.data();
    }
    return aux;
}

struct MoEOutput {
    Tensor y;   // [N_tok, D]
    Tensor aux; // scalar
    RoutingDecision routing;
    std::vector<double> load;
    std::vector<double> mean_prob;
    int64_t expert_calls = 0; // routed-expert row evaluations
};

class MoELayer {
public:
    MoELayer(int64_t D, int64_t n_experts, int64_t top_k, int64_t r, ParamStore& ps,
             const std::string& prefix)
        : D_(D), E_(n_experts), top_k_(top_k), r_(r), prefix_(prefix) {
        if (E_ < 1) throw ConfigError("moe: need at least one expert");
        if (top_k_ < 1 || top_k_ > E_) throw ConfigError("moe: top_k out of range");
        gate_ = ps.add(prefix + "gate", {E_, D}, D);
        sw1_ = ps.add(prefix + "shared.w1", {4 * D, D}, D);
        sb1_ = ps.add_zeros(prefix + "shared.b1", {1, 4 * D});
        sw2_ = ps.add(prefix + "shared.w2", {D, 4 * D}, 4 * D);
        sb2_ = ps.add_zeros(prefix + "shared.b2", {1, D});
        for (int64_t i = 0; i < E_; ++i) {
            std::string p = prefix + "e" + std::to_string(i) + ".";
            ew1_.push_back(ps.add(p + "w1", {r * D, D}, D));
            eb1_.push_back(ps.add_zeros(p + "b1", {1, r * D}));
            ew2_.push_back(ps.add(p + "w2", {D, r * D}, r * D));
            eb2_.push_back(ps.add_zeros(p + "b2", {1, D}));
        }
    }

    int64_t n_experts() const { return E_; }
    int64_t top_k() const { return top_k_; }

    RoutingDecision route(const Tensor& h) const {
        RoutingDecision rd;
        rd.top_k = top_k_;
        rd.logits = matmul_nt(h, gate_); // no gate bias
        int64_t N = h.rows();
        rd.idx.resize(N * top_k_);
        rd.prob.resize(N * top_k_);
        std::vector<double> probs_row(E_);
        for (int64_t t = 0; t < N; ++t) {
            const double* lr = rd.logits.data().data() + t * E_;
            double mx = lr[0];
            for (int64_t i = 1; i < E_; ++i) mx = std::max(mx, lr[i]);
            double z = 0;
            for (int64_t i = 0; i < E_; ++i) {
                probs_row[i] = std::exp(lr[i] - mx);
                z += probs_row[i];
            }
            for (int64_t i = 0; i < E_; ++i) probs_row[i] /= z;
            std::vector<uint8_t> taken(E_, 0);
            for (int64_t j = 0; j < top_k_; ++j) {
                int64_t best = -1;
                for (int64_t i = 0; i < E_; ++i)
                    if (!taken[i] && (best < 0 || lr[i] > lr[best])) best = i; // ties keep lowest
                taken[best] = 1;
                rd.idx[t * top_k_ + j] = best;
                rd.prob[t * top_k_ + j] = probs_row[best];
            }
        }
        return rd;
    }

    MoEOutput forward(const Tensor& h, const std::vector<int>& modality_ids,
                      double alpha) const {
        int64_t N = h.rows();
        MoEOutput out;
        out.routing = route(h);
        Tensor probs = softmax_rows(out.routing.logits);

        Tensor y = mlp(h, sw1_, sb1_, sw2_, sb2_);
        for (int64_t i = 0; i < E_; ++i) {
            auto sel = std::make_shared<std::vector<int64_t>>();
            for (int64_t t = 0; t < N; ++t)
                for (int64_t j = 0; j < top_k_; ++j)
                    if (out.routing.idx[t * top_k_ + j] == i) sel->push_back(t);
            if (sel->empty()) continue;
            out.expert_calls += static_cast<int64_t>(sel->size());
            Tensor hi = take_rows(h, sel);
            Tensor ei = mlp(hi, ew1_[i], eb1_[i], ew2_[i], eb2_[i]);
            auto cols = std::make_shared<std::vector<int64_t>>(sel->size(), i);
            Tensor pi = gather_elems(take_rows(probs, sel), cols); // [n_i, 1]
            y = add(y, scatter_rows(mul_colvec(ei, pi), sel, N));
        }
        out.y = y;
        out.aux = aux_balance_loss(out.routing.logits, out.routing.idx, top_k_, modality_ids,
                                   alpha, &out.load, &out.mean_prob);
        return out;
    }

    // sparse upcycling from a trained dense FFN of identical shape (needs r = 4):
    // shared expert copies it, routed experts copy plus Gaussian noise scaled
    // by noise_scale times the donor tensor's std
    void upcycle(ParamStore& ps, const std::vector<double>& w1, const std::vector<double>& b1,
                 const std::vector<double>& w2, const std::vector<double>& b2,
                 double noise_scale, Rng& rng) {
        if (r_ != 4) throw ConfigError("moe: upcycle requires expansion ratio 4");
        auto set = [&](const std::string& name, const std::vector<double>& src, bool noisy) {
            auto& dst = ps.by_name(name).value.data();
            if (dst.size() != src.size()) throw RuntimeAbort("moe: upcycle shape mismatch");
            double m = 0, s2 = 0;
            for (double v : src) m += v;
            m /= double(src.size());
            for (double v : src) s2 += (v - m) * (v - m);
            double sd = std::sqrt(s2 / double(src.size()));
            for (size_t i = 0; i < dst.size(); ++i)
                dst[i] = src[i] + (noisy ? rng.normal() * noise_scale * sd : 0.0);
        };
        set(prefix_ + "shared.w1", w1, false);
        set(prefix_ + "shared.b1", b1, false);
        set(prefix_ + "shared.w2", w2, false);
        set(prefix_ + "shared.b2", b2, false);
        for (int64_t i = 0; i < E_; ++i) {
            std::string p = prefix_ + "e" + std::to_string(i) + ".";
            set(p + "w1", w1, true);
            set(p + "b1", b1, true);
            set(p + "w2", w2, true);
            set(p + "b2", b2, true);
        }
    }

private:
    static Tensor mlp(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                      const Tensor& b2) {
        return linear(silu(linear(x, w1, b1)), w2, b2);
    }

    int64_t D_, E_, top_k_, r_;
    std::string prefix_;
    Tensor gate_, sw1_, sb1_, sw2_, sb2_;
    std::vector<Tensor> ew1_, eb1_, ew2_, eb2_;
};

// analytic multiply-accumulate counts for one forward pass of one sample;
// 1 MAC = 1 FLOP by convention, `flops_2x` reports the doubled figure
struct FlopsProfile {
    double attention = 0;
    double adamn = 0;
    double dense_ffn = 0;
    double moe = 0;
    double heads_macs = 0; // prediction heads
    double total = 0;
    double flops_2x = 0;
};

inline FlopsProfile flops_profile(const ModelDims& dims, int64_t layers, int64_t moe_start,
                                  int64_t n_experts, int64_t top_k, int64_t r,
                                  int64_t n_modalities = 4) {
    double D = double(dims.D);
    double N = double(dims.n_tok());
    FlopsProfile f;
    for (int64_t l = 0; l < layers; ++l) {
        f.attention += N * (4.0 * D * D + 2.0 * N * D);
        // two AdaMN instances: per-modality experts + shared modulation head,
        // plus two elementwise affine stages per token
        f.adamn += 2.0 * (double(n_modalities) * (D * D + 2.0 * D * D) + 2.0 * D * D +
                          N * 2.0 * D);
        if (l < moe_start) {
            f.dense_ffn += N * (2.0 * 4.0 * D * D);
        } else {
            double gate = D * double(n_experts);
            double shared = 2.0 * 4.0 * D * D;
            double routed = double(top_k) * 2.0 * double(r) * D * D;
            f.moe += N * (gate + shared + routed);
        }
    }
    double n_rgb = double(dims.n_rgb());
    double rgb_out = double(dims.p_rgb * dims.p_rgb * dims.H * dims.C_lat * 2);
    double act_out = double(2 * dims.K * dims.A_dof);
    f.heads_macs = n_rgb * D * rgb_out + D * act_out;
    f.total = f.attention + f.adamn + f.dense_ffn + f.moe + f.heads_macs;
    f.flops_2x = 2.0 * f.total;
    return f;
}

} // namespace demuse
