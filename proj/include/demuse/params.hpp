#pragma once

#include <cstdio>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "demuse/ops.hpp"
#include "demuse/tensor.hpp"

namespace demuse {

struct Parameter {
    std::string name;
    Tensor value;
    std::vector<double> ema; // shadow copy, updated post-step
    std::vector<double> m, v; // Adam moments, sized on first update
};

// Linear warmup to base, then cosine to exactly zero at the last step.
inline double lr_at(int64_t step, double base, int64_t warmup, int64_t total_steps) {
    if (warmup > 0 && step <= warmup)
        return base * static_cast<double>(step) / static_cast<double>(warmup);
    int64_t last = total_steps - 1;
    if (step >= last || last <= warmup) return 0.0;
    double t = static_cast<double>(step - warmup) / static_cast<double>(last - warmup);
    return base * 0.5 * (1.0 + std::cos(M_PI * t));
}

struct NamedArray {
    std::vector<int64_t> shape;
    std::vector<double> data;
};

using RecordMap = std::map<std::string, NamedArray>;

// Binary record container: magic, u32 version, u64 count, then per record
// u32 name length, name bytes, u32 rank, u64 extents, little-endian f64 data.
// std::map keys give the sorted-by-name ordering.
inline void save_records(const std::string& path, const RecordMap& records,
                         const char magic[4], uint32_t version = 1) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw RuntimeAbort("cannot open for write: " + path);
    std::fwrite(magic, 1, 4, f);
    std::fwrite(&version, 4, 1, f);
    uint64_t count = records.size();
    std::fwrite(&count, 8, 1, f);
    for (const auto& [name, arr] : records) {
        uint32_t nl = static_cast<uint32_t>(name.size());
        std::fwrite(&nl, 4, 1, f);
        std::fwrite(name.data(), 1, nl, f);
        uint32_t rank = static_cast<uint32_t>(arr.shape.size());
        std::fwrite(&rank, 4, 1, f);
        for (int64_t d : arr.shape) {
            uint64_t e = static_cast<uint64_t>(d);
            std::fwrite(&e, 8, 1, f);
        }
        std::fwrite(arr.data.data(), 8, arr.data.size(), f);
    }
    std::fclose(f);
}

inline RecordMap load_records(const std::string& path, const char magic[4]) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw RuntimeAbort("cannot open for read: " + path);
    auto fail = [&](const std::string& msg) {
        std::fclose(f);
        throw RuntimeAbort(path + ": " + msg);
    };
    char m[4];
    if (std::fread(m, 1, 4, f) != 4 || std::memcmp(m, magic, 4) != 0) fail("bad magic");
    uint32_t version;
    if (std::fread(&version, 4, 1, f) != 1 || version != 1) fail("unsupported version");
    uint64_t count;
    if (std::fread(&count, 8, 1, f) != 1) fail("truncated header");
    RecordMap out;
    for (uint64_t i = 0; i < count; ++i) {
        uint32_t nl;
        if (std::fread(&nl, 4, 1, f) != 1) fail("truncated record");
        std::string name(nl, '\0');
        if (nl && std::fread(name.data(), 1, nl, f) != nl) fail("truncated name");
        uint32_t rank;
        if (std::fread(&rank, 4, 1, f) != 1) fail("truncated rank");
        NamedArray arr;
        int64_t n = 1;
        for (uint32_t r = 0; r < rank; ++r) {
            uint64_t e;
            if (std::fread(&e, 8, 1, f) != 1) fail("truncated extents");
            arr.shape.push_back(static_cast<int64_t>(e));
            n *= static_cast<int64_t>(e);
        }
        arr.data.resize(static_cast<size_t>(n));
        if (n && std::fread(arr.data.data(), 8, static_cast<size_t>(n), f)
                     != static_cast<size_t>(n))
            fail("truncated data");
        out.emplace(std::move(name), std::move(arr));
    }
    std::fclose(f);
    return out;
}

class ParamStore {
public:
    explicit ParamStore(uint64_t init_seed) : rng_(init_seed) {}

    // centered uniform with half-width 1/sqrt(fan_in)
    Tensor add(const std::string& name, std::vector<int64_t> shape, int64_t fan_in) {
        double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
        return add_custom(name, std::move(shape),
                          [this, s](std::vector<double>& d) {
                              for (double& x : d) x = rng_.uniform(-s, s);
                          });
    }

    Tensor add_zeros(const std::string& name, std::vector<int64_t> shape) {
        return add_custom(name, std::move(shape), [](std::vector<double>&) {});
    }

    Tensor add_custom(const std::string& name, std::vector<int64_t> shape,
                      const std::function<void(std::vector<double>&)>& init) {
        if (index_.count(name)) throw RuntimeAbort("duplicate parameter: " + name);
        auto p = std::make_shared<Parameter>();
        p->name = name;
        p->value = Tensor::zeros(std::move(shape), true);
        init(p->value.data());
        p->ema = p->value.data();
        index_[name] = list_.size();
        list_.push_back(p);
        return p->value;
    }

    size_t size() const { return list_.size(); }
    Parameter& at(size_t i) { return *list_[i]; }
    Parameter& by_name(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw RuntimeAbort("unknown parameter: " + name);
        return *list_[it->second];
    }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& p : list_) n += p->value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : list_) {
            auto& g = p->value.grad();
            std::fill(g.begin(), g.end(), 0.0);
        }
    }

    double grad_norm() {
        double s = 0.0;
        for (auto& p : list_)
            for (double g : p->value.grad()) s += g * g;
        return std::sqrt(s);
    }

    // decoupled weight decay; step is 1-based for bias correction
    void adamw_step(double lr, int64_t step, double weight_decay = 0.0,
                    double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (auto& p : list_) {
            auto& w = p->value.data();
            auto& g = p->value.grad();
            if (p->m.empty()) {
                p->m.assign(w.size(), 0.0);
                p->v.assign(w.size(), 0.0);
            }
            for (size_t i = 0; i < w.size(); ++i) {
                p->m[i] = beta1 * p->m[i] + (1.0 - beta1) * g[i];
                p->v[i] = beta2 * p->v[i] + (1.0 - beta2) * g[i] * g[i];
                double mhat = p->m[i] / bc1;
                double vhat = p->v[i] / bc2;
                w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[i]);
            }
        }
    }

    void ema_update(double decay) {
        for (auto& p : list_) {
            const auto& w = p->value.data();
            for (size_t i = 0; i < w.size(); ++i)
                p->ema[i] = decay * p->ema[i] + (1.0 - decay) * w[i];
        }
    }

    void copy_ema_to_values() {
        for (auto& p : list_) p->value.data() = p->ema;
    }

    // Checkpoint layout: "<name>" value, "<name>.ema" shadow, "<name>.adam_m"/
    // "<name>.adam_v" moments once training has started, plus caller extras.
    RecordMap to_records() const {
        RecordMap rec;
        for (const auto& p : list_) {
            rec[p->name] = {p->value.shape(), p->value.data()};
            rec[p->name + ".ema"] = {p->value.shape(), p->ema};
            if (!p->m.empty()) {
                rec[p->name + ".adam_m"] = {p->value.shape(), p->m};
                rec[p->name + ".adam_v"] = {p->value.shape(), p->v};
            }
        }
        return rec;
    }

    void save(const std::string& path, RecordMap extra = {}) const {
        RecordMap rec = to_records();
        for (auto& [k, v] : extra) {
            if (rec.count(k)) throw RuntimeAbort("extra record collides with parameter: " + k);
            rec.emplace(k, std::move(v));
        }
        save_records(path, rec, "DMSE");
    }

    // Loads parameters (and ema/moments when present); returns records that
    // did not match any parameter so callers can pick up their own extras.
    RecordMap load(const std::string& path) {
        RecordMap rec = load_records(path, "DMSE");
        for (auto& p : list_) {
            auto it = rec.find(p->name);
            if (it == rec.end()) throw RuntimeAbort("checkpoint missing parameter: " + p->name);
            if (static_cast<int64_t>(it->second.data.size()) != p->value.size())
                throw RuntimeAbort("checkpoint shape mismatch for: " + p->name);
            p->value.data() = std::move(it->second.data);
            rec.erase(it);
            if (auto e = rec.find(p->name + ".ema"); e != rec.end()) {
                p->ema = std::move(e->second.data);
                rec.erase(e);
            }
            if (auto e = rec.find(p->name + ".adam_m"); e != rec.end()) {
                p->m = std::move(e->second.data);
                rec.erase(e);
            }
            if (auto e = rec.find(p->name + ".adam_v"); e != rec.end()) {
                p->v = std::move(e->second.data);
                rec.erase(e);
            }
        }
        return rec;
    }

    std::vector<std::shared_ptr<Parameter>>& all() { return list_; }

private:
    Rng rng_;
    std::vector<std::shared_ptr<Parameter>> list_;
    std::map<std::string, size_t> index_;
};

struct FdReport {
    double max_rel_err = 0.0;
    int64_t n_checked = 0;
    std::string worst;
    bool pass = true;
};

// Central-difference oracle. loss_fn must rebuild the graph deterministically
// on every call; rel err uses max(|analytic|, |numeric|, 1e-6) as denominator
// so near-zero gradients are compared on an absolute scale.
template <typename F>
FdReport finite_difference_check(F&& loss_fn, ParamStore& params, int64_t n_coords,
                                 uint64_t seed, double h = 1e-5, double rel_tol = 1e-4) {
    params.zero_grad();
    Tensor loss = loss_fn();
    loss.backward();

    std::vector<std::vector<double>> analytic;
    for (size_t i = 0; i < params.size(); ++i) analytic.push_back(params.at(i).value.grad());

    Rng rng(seed);
    int64_t total = params.scalar_count();
    FdReport rep;
    for (int64_t t = 0; t < n_coords; ++t) {
        int64_t flat = rng.uniform_int(total);
        size_t pi = 0;
        while (flat >= params.at(pi).value.size()) {
            flat -= params.at(pi).value.size();
            ++pi;
        }
        auto& w = params.at(pi).value.data();
        double x0 = w[flat];
        double lp, lm;
        {
            NoGradGuard ng;
            w[flat] = x0 + h;
            lp = loss_fn().item();
            w[flat] = x0 - h;
            lm = loss_fn().item();
            w[flat] = x0;
        }
        double num = (lp - lm) / (2.0 * h);
        double ana = analytic[pi][flat];
        double denom = std::max({std::fabs(num), std::fabs(ana), 1e-6});
        double rel = std::fabs(num - ana) / denom;
        if (rel > rel_tol) {
            // Small-gradient coordinates can be cancellation-limited at h.
            // A wrong backward stays wrong at 10h; noise shrinks with it.
            double h2 = 10.0 * h;
            NoGradGuard ng;
            w[flat] = x0 + h2;
            double lp2 = loss_fn().item();
            w[flat] = x0 - h2;
            double lm2 = loss_fn().item();
            w[flat] = x0;
            double num2 = (lp2 - lm2) / (2.0 * h2);
            double denom2 = std::max({std::fabs(num2), std::fabs(ana), 1e-6});
            rel = std::min(rel, std::fabs(num2 - ana) / denom2);
        }
        ++rep.n_checked;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst = params.at(pi).name + "[" + std::to_string(flat) + "]";
        }
    }
    rep.pass = rep.max_rel_err <= rel_tol;
    return rep;
}

} // namespace demuse
