#pragma once
// 2.5D tabletop push environment: scripted demonstrations, a frozen toy
// encoder, and dataset assembly for the policy trainer. The block is drawn
// only into the depth map, never into RGB, so contact-critical information
// lives in the depth and force channels by construction.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "demuse/backbone.hpp"
#include "demuse/sensorio.hpp"

namespace demuse {

// ---------------------------------------------------------------------------
// World

struct EnvConfig {
    double agent_radius = 0.06;
    double block_radius = 0.08;
    double move_scale = 0.04;   // agent displacement per tick at |action| = 1
    double k_spring = 20.0;     // contact force per unit penetration
    double resolve_frac = 0.8;  // fraction of the penetration the block yields per tick
    double lever_z = 0.1;       // contact sits this far below the wrist center
    double wrench_noise_std = 0.05;
    double success_dist = 0.05;
    int64_t max_ticks = 200;
    int64_t img_size = 32;

    void validate() const {
        if (agent_radius <= 0 || block_radius <= 0)
            throw ConfigError("env: radii must be positive");
        if (move_scale <= 0 || k_spring <= 0)
            throw ConfigError("env: move_scale and k_spring must be positive");
        if (resolve_frac <= 0 || resolve_frac > 1)
            throw ConfigError("env: resolve_frac must be in (0, 1]");
        if (wrench_noise_std < 0) throw ConfigError("env: noise std must be >= 0");
        if (success_dist <= 0) throw ConfigError("env: success_dist must be positive");
        if (max_ticks < 1) throw ConfigError("env: max_ticks must be >= 1");
        if (img_size < 4 || img_size % 2 != 0)
            throw ConfigError("env: img_size must be even and >= 4");
    }
};

struct WorldState {
    std::array<double, 2> agent{0.5, 0.5};
    std::array<double, 2> block{0.5, 0.5};
    std::array<double, 2> goal{0.5, 0.5};
    double grip = 0.0;
    bool contact = false;  // whether the step producing this state touched the block
};

struct StepOut {
    WorldState next;
    Wrench wrench;  // world frame, noisy
};

namespace detail {

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }
inline double clamp_unit(double v) { return v < -1.0 ? -1.0 : (v > 1.0 ? 1.0 : v); }

inline double dist2d(const std::array<double, 2>& a, const std::array<double, 2>& b) {
    double dx = b[0] - a[0], dy = b[1] - a[1];
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

// The agent moves first, then the spring force is read off the pre-resolve
// penetration and the block yields resolve_frac of it along the contact
// normal. Torque comes from the fixed lever r = (0, 0, -lever_z), so
// tau = (lever_z * f_y, -lever_z * f_x, 0). Gaussian noise is added to all
// six wrench channels every tick, contact or not, to keep the draw count
// independent of the trajectory.
inline StepOut env_step(const WorldState& s, const std::array<double, 4>& action,
                        const EnvConfig& cfg, Rng& rng) {
    for (double a : action)
        if (std::isnan(a)) throw RuntimeAbort("env_step: NaN action component");
    std::array<double, 4> a{};
    for (int i = 0; i < 4; ++i) a[i] = detail::clamp_unit(action[i]);

    StepOut out;
    WorldState& n = out.next;
    n = s;
    n.agent[0] = detail::clamp01(s.agent[0] + cfg.move_scale * a[0]);
    n.agent[1] = detail::clamp01(s.agent[1] + cfg.move_scale * a[1]);
    n.grip = 0.5 * (a[3] + 1.0);

    double r_sum = cfg.agent_radius + cfg.block_radius;
    double dx = s.block[0] - n.agent[0];
    double dy = s.block[1] - n.agent[1];
    double d = std::sqrt(dx * dx + dy * dy);
    n.contact = d < r_sum;
    std::array<double, 3> f{0, 0, 0}, tau{0, 0, 0};
    if (n.contact) {
        double pen = r_sum - d;
        double nx = d > 0 ? dx / d : 1.0;
        double ny = d > 0 ? dy / d : 0.0;
        f = {cfg.k_spring * pen * nx, cfg.k_spring * pen * ny, 0.0};
        tau = {cfg.lever_z * f[1], -cfg.lever_z * f[0], 0.0};
        n.block[0] = detail::clamp01(s.block[0] + cfg.resolve_frac * pen * nx);
        n.block[1] = detail::clamp01(s.block[1] + cfg.resolve_frac * pen * ny);
    }
    out.wrench.frame = Frame::World;
    for (int i = 0; i < 3; ++i)
        out.wrench.force[i] = f[i] + cfg.wrench_noise_std * rng.normal();
    for (int i = 0; i < 3; ++i)
        out.wrench.torque[i] = tau[i] + cfg.wrench_noise_std * rng.normal();
    return out;
}

// Idle sensor reading before the first step; same draw count as a step.
inline Wrench initial_wrench(const EnvConfig& cfg, Rng& rng) {
    Wrench w;
    w.frame = Frame::World;
    for (int i = 0; i < 3; ++i) w.force[i] = cfg.wrench_noise_std * rng.normal();
    for (int i = 0; i < 3; ++i) w.torque[i] = cfg.wrench_noise_std * rng.normal();
    return w;
}

// Task 0 pushes the block straight right, task 1 pushes it to a fixed corner.
// Task 1 is the contact-heavy one: the push direction varies per episode, so
// the block position has to come from depth or touch.
inline WorldState init_world(int64_t task_id, const EnvConfig& cfg, Rng& rng) {
    if (task_id < 0 || task_id > 1) throw ConfigError("init_world: task_id must be 0 or 1");
    WorldState s;
    s.agent = {rng.uniform(0.12, 0.88), rng.uniform(0.12, 0.88)};
    double r_sum = cfg.agent_radius + cfg.block_radius;
    for (;;) {
        s.block = {rng.uniform(0.30, 0.70), rng.uniform(0.30, 0.70)};
        if (task_id == 0)
            s.goal = {0.85, std::min(0.85, std::max(0.15, s.block[1]))};
        else
            s.goal = {0.82, 0.82};
        if (detail::dist2d(s.agent, s.block) < r_sum + 0.05) continue;
        if (detail::dist2d(s.block, s.goal) < 0.15) continue;
        break;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Rendering. Pixel (y, x) covers the world point ((x+0.5)/S, (y+0.5)/S).

inline constexpr std::array<double, 3> kBgColor{0.35, 0.40, 0.38};
inline constexpr std::array<double, 3> kAgentColor{0.85, 0.15, 0.10};
inline constexpr std::array<double, 3> kGoalColor{0.10, 0.30, 0.90};
inline constexpr double kGoalVisRadius = 0.05;
inline constexpr double kAgentHeight = 0.5;
inline constexpr double kBlockHeight = 1.0;

namespace detail {

inline bool in_disk(double px, double py, const std::array<double, 2>& c, double r) {
    double dx = px - c[0], dy = py - c[1];
    return dx * dx + dy * dy <= r * r;
}

}  // namespace detail

// Planar {3, S, S} image in [0, 1]. The goal marker is a flat visual decal
// and the agent is drawn over it; the block is deliberately absent here.
inline Tensor render_rgb(const WorldState& s, const EnvConfig& cfg) {
    int64_t S = cfg.img_size;
    Tensor img = Tensor::zeros({3, S, S});
    std::vector<double>& p = img.data();
    for (int64_t y = 0; y < S; ++y) {
        for (int64_t x = 0; x < S; ++x) {
            double px = (x + 0.5) / static_cast<double>(S);
            double py = (y + 0.5) / static_cast<double>(S);
            const std::array<double, 3>* col = &kBgColor;
            if (detail::in_disk(px, py, s.goal, kGoalVisRadius)) col = &kGoalColor;
            if (detail::in_disk(px, py, s.agent, cfg.agent_radius)) col = &kAgentColor;
            for (int64_t c = 0; c < 3; ++c) p[c * S * S + y * S + x] = (*col)[c];
        }
    }
    return img;
}

// {S, S} height map: table 0, agent 0.5, block 1.0; the taller body wins.
inline Tensor render_depth(const WorldState& s, const EnvConfig& cfg) {
    int64_t S = cfg.img_size;
    Tensor img = Tensor::zeros({S, S});
    std::vector<double>& p = img.data();
    for (int64_t y = 0; y < S; ++y) {
        for (int64_t x = 0; x < S; ++x) {
            double px = (x + 0.5) / static_cast<double>(S);
            double py = (y + 0.5) / static_cast<double>(S);
            double h = 0.0;
            if (detail::in_disk(px, py, s.agent, cfg.agent_radius)) h = kAgentHeight;
            if (detail::in_disk(px, py, s.block, cfg.block_radius)) h = kBlockHeight;
            p[y * S + x] = h;
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Scripted expert. It pushes only while its bearing sits within a tight cone
// behind the block; otherwise it circles the block on a non-contact orbit
// until the bearing is recovered. Near the goal the push slows down so the
// block cannot skip past the success disk. Phase 1 is everything before the
// first gated push, phase 2 everything after; the label only moves forward.

class ScriptedExpert {
  public:
    std::array<double, 4> act(const WorldState& s, const EnvConfig& cfg) {
        double gx = s.goal[0] - s.block[0];
        double gy = s.goal[1] - s.block[1];
        double gd = std::sqrt(gx * gx + gy * gy);
        if (gd < cfg.success_dist) return {0, 0, 0, 0};
        double dirx = gx / gd, diry = gy / gd;
        double r_sum = cfg.agent_radius + cfg.block_radius;
        double r_orbit = r_sum + 0.5 * cfg.agent_radius;

        // current bearing of the agent as seen from the block
        double ux = s.agent[0] - s.block[0];
        double uy = s.agent[1] - s.block[1];
        double dab = std::sqrt(ux * ux + uy * uy);
        if (dab > 1e-12) {
            ux /= dab;
            uy /= dab;
        } else {
            ux = 1.0;
            uy = 0.0;
        }
        // desired bearing: directly behind the block, opposite the goal
        double bx = -dirx, by = -diry;
        double cosang = ux * bx + uy * by;
        bool aligned = cosang > (pushing_ ? 0.95 : 0.98);

        if (aligned) {
            pushing_ = true;
            if (phase_ == 1) phase_ = 2;
            double reach = r_sum - 1.5 * cfg.agent_radius;
            double tox = s.block[0] - dirx * reach - s.agent[0];
            double toy = s.block[1] - diry * reach - s.agent[1];
            double scale = gd < 0.12 ? 0.5 : 1.0;
            return {detail::clamp_unit(scale * tox / cfg.move_scale),
                    detail::clamp_unit(scale * toy / cfg.move_scale), 0, 0};
        }
        pushing_ = false;

        double tx, ty;
        if (dab > r_orbit + 2.0 * cfg.agent_radius) {
            // far away: walk radially onto the orbit circle, never through the block
            tx = s.block[0] + ux * r_orbit;
            ty = s.block[1] + uy * r_orbit;
        } else {
            // rotate the bearing a bounded arc toward the back point, stay on circle
            double cross = ux * by - uy * bx;
            double ang = std::atan2(cross, cosang);
            double dth = std::clamp(ang, -0.35, 0.35);
            double c = std::cos(dth), sn = std::sin(dth);
            double rx = c * ux - sn * uy;
            double ry = sn * ux + c * uy;
            tx = s.block[0] + rx * r_orbit;
            ty = s.block[1] + ry * r_orbit;
        }
        return {detail::clamp_unit((tx - s.agent[0]) / cfg.move_scale),
                detail::clamp_unit((ty - s.agent[1]) / cfg.move_scale), 0, 0};
    }

    int phase() const { return phase_; }

  private:
    int phase_ = 1;
    bool pushing_ = false;
};

// ---------------------------------------------------------------------------
// Episodes

struct EpisodeFrame {
    Tensor image;  // {3, S, S}
    Tensor depth;  // {S, S}
    Wrench wrench;  // raw world-frame reading entering this tick
    std::array<double, 4> state{};   // agent_x, agent_y, grip, 0
    std::array<double, 4> action{};  // executed during this tick
    bool contact = false;            // whether that reading came from a contact step
};

struct Trajectory {
    int64_t task_id = 0;
    bool success = false;
    std::vector<EpisodeFrame> frames;
};

// Frame t records the observation before acting: the render of state_t, the
// wrench produced by step t-1 (an idle reading at t=0), and the action the
// expert takes from state_t. The episode ends on success or at max_ticks.
inline Trajectory gen_episode(int64_t task_id, uint64_t seed, const EnvConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    Trajectory traj;
    traj.task_id = task_id;
    WorldState s = init_world(task_id, cfg, rng);
    Wrench pending = initial_wrench(cfg, rng);
    bool pending_contact = false;
    ScriptedExpert expert;
    for (int64_t t = 0; t < cfg.max_ticks; ++t) {
        EpisodeFrame fr;
        fr.image = render_rgb(s, cfg);
        fr.depth = render_depth(s, cfg);
        fr.wrench = pending;
        fr.state = {s.agent[0], s.agent[1], s.grip, 0.0};
        fr.action = expert.act(s, cfg);
        fr.contact = pending_contact;
        traj.frames.push_back(std::move(fr));
        StepOut out = env_step(s, traj.frames.back().action, cfg, rng);
        s = out.next;
        pending = out.wrench;
        pending_contact = s.contact;
        if (detail::dist2d(s.block, s.goal) < cfg.success_dist) {
            traj.success = true;
            break;
        }
    }
    return traj;
}

// ---------------------------------------------------------------------------
// Frozen toy encoder: 2x2 average pooling followed by a fixed random 3->4
// channel mix, then per-channel z-scoring. Stands in for a pretrained VAE;
// never trained, so dataset and rollout see the exact same map.

namespace detail {

inline const std::array<double, 12>& vae_mix() {
    static const std::array<double, 12> w = [] {
        std::array<double, 12> m{};
        Rng r(0x70766165ULL);
        for (auto& v : m) v = r.normal();
        return m;
    }();
    return w;
}

// {C, S, S} -> {C, S/2, S/2} or {S, S} -> {S/2, S/2}, plain average of each
// 2x2 cell.
inline Tensor avg_pool2(const Tensor& img) {
    const auto& sh = img.shape();
    if (sh.size() != 2 && sh.size() != 3)
        throw RuntimeAbort("avg_pool2: expected a rank 2 or 3 tensor");
    int64_t C = sh.size() == 3 ? sh[0] : 1;
    int64_t S = sh[sh.size() - 2];
    if (sh[sh.size() - 1] != S || S % 2 != 0)
        throw RuntimeAbort("avg_pool2: expected a square map with even side");
    int64_t P = S / 2;
    Tensor out = sh.size() == 3 ? Tensor::zeros({C, P, P}) : Tensor::zeros({P, P});
    const std::vector<double>& src = img.data();
    std::vector<double>& dst = out.data();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t gy = 0; gy < P; ++gy)
            for (int64_t gx = 0; gx < P; ++gx) {
                const double* base = src.data() + c * S * S + 2 * gy * S + 2 * gx;
                dst[c * P * P + gy * P + gx] =
                    (base[0] + base[1] + base[S] + base[S + 1]) / 4.0;
            }
    return out;
}

}  // namespace detail

// {3, S, S} image -> {4, S/2, S/2} latent, planar. Empty stats mean identity.
inline Tensor pseudo_vae_encode(const Tensor& image, const ZStats& stats = {}) {
    const auto& sh = image.shape();
    if (sh.size() != 3 || sh[0] != 3 || sh[1] != sh[2] || sh[1] % 2 != 0)
        throw RuntimeAbort("pseudo_vae_encode: expected a {3, S, S} image with even S");
    if (!stats.empty() && stats.mean.size() != 4)
        throw ConfigError("pseudo_vae_encode: stats must cover 4 channels");
    Tensor pooled = detail::avg_pool2(image);
    int64_t P = sh[1] / 2;
    const auto& W = detail::vae_mix();
    Tensor out = Tensor::zeros({4, P, P});
    const std::vector<double>& src = pooled.data();
    std::vector<double>& dst = out.data();
    for (int64_t c = 0; c < 4; ++c)
        for (int64_t i = 0; i < P * P; ++i) {
            double v = W[c * 3 + 0] * src[0 * P * P + i] + W[c * 3 + 1] * src[1 * P * P + i] +
                       W[c * 3 + 2] * src[2 * P * P + i];
            dst[c * P * P + i] = zscore_one(v, stats, c);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset assembly

// Modality-dropout bits recorded in the dataset header. A dropped modality is
// zeroed column-wise but keeps its layout slot, so downstream shapes never
// change between ablation arms.
constexpr uint32_t kDropDepth = 1u;
constexpr uint32_t kDropForce = 2u;

struct PushDataset {
    ModelDims dims;
    ZStats latent_stats;  // 4 channels
    ZStats wrench_stats;  // 6 channels
    std::vector<Sample> samples;
    int64_t skipped_short = 0;   // trajectories too short for one anchor
    double coupling_ratio = 0.0; // contact / no-contact mean raw force norm
    uint32_t drop_mask = 0;      // kDropDepth | kDropForce
};

// Two passes. The first runs every frame through the frozen encoder and the
// wrench chain with identity stats to collect corpus statistics, and checks
// that contact actually shows up in the raw force channel. The second emits
// one sample per anchor tick t, pairing the observation at t with future
// latents at t + skip, t + 2*skip, t + 3*skip and the action chunk at
// t, t + skip, t + 2*skip.
inline PushDataset build_dataset(const std::vector<Trajectory>& trajs, const ModelDims& dims,
                                 const EnvConfig& cfg, int64_t skip_step = 4,
                                 uint32_t drop_mask = 0) {
    dims.validate(1);
    cfg.validate();
    if (skip_step < 1) throw ConfigError("build_dataset: skip_step must be >= 1");
    if (dims.C_lat != 4 || 2 * dims.S_lat != cfg.img_size)
        throw ConfigError("build_dataset: dims do not match the encoder output");
    if (dims.A_dof != 4) throw ConfigError("build_dataset: expected 4 action dofs");
    if ((drop_mask & ~(kDropDepth | kDropForce)) != 0)
        throw ConfigError("build_dataset: drop mask covers only depth and force");

    PushDataset ds;
    ds.dims = dims;
    ds.drop_mask = drop_mask;
    const int64_t lat_n = dims.S_lat * dims.S_lat;
    const int64_t horizon = dims.H * skip_step;
    const Mat3 eye{1, 0, 0, 0, 1, 0, 0, 0, 1};

    std::vector<std::vector<std::vector<double>>> raw_lat(trajs.size());
    std::vector<std::vector<std::array<double, 6>>> smooth_w(trajs.size());
    std::array<double, 4> lsum{}, lsq{};
    std::array<double, 6> wsum{}, wsq{};
    int64_t lat_count = 0, w_count = 0;
    double contact_sum = 0, free_sum = 0;
    int64_t contact_n = 0, free_n = 0;

    for (size_t e = 0; e < trajs.size(); ++e) {
        WrenchConditioner cond;  // identity stats: pre-z values for the corpus
        raw_lat[e].reserve(trajs[e].frames.size());
        smooth_w[e].reserve(trajs[e].frames.size());
        for (const EpisodeFrame& fr : trajs[e].frames) {
            Tensor lat = pseudo_vae_encode(fr.image);
            const std::vector<double>& lp = lat.data();
            for (int64_t c = 0; c < 4; ++c)
                for (int64_t i = 0; i < lat_n; ++i) {
                    double v = lp[c * lat_n + i];
                    lsum[c] += v;
                    lsq[c] += v * v;
                }
            lat_count += lat_n;
            raw_lat[e].push_back(lp);

            Wrench sm = cond.push(eye, fr.wrench);
            smooth_w[e].push_back({sm.force[0], sm.force[1], sm.force[2], sm.torque[0],
                                   sm.torque[1], sm.torque[2]});
            for (int c = 0; c < 6; ++c) {
                double v = smooth_w[e].back()[c];
                wsum[c] += v;
                wsq[c] += v * v;
            }
            ++w_count;

            double fn = wrench_norm(fr.wrench.force);
            if (fr.contact) {
                contact_sum += fn;
                ++contact_n;
            } else {
                free_sum += fn;
                ++free_n;
            }
        }
    }
    if (lat_count == 0) throw RuntimeAbort("build_dataset: no frames");
    if (contact_n == 0) throw RuntimeAbort("build_dataset: no contact frames in the corpus");

    double free_mean = free_n > 0 ? free_sum / free_n : 0.0;
    double contact_mean = contact_sum / contact_n;
    ds.coupling_ratio = free_mean > 0 ? contact_mean / free_mean : 1e300;
    if (ds.coupling_ratio < 10.0) {
        char buf[96];
        std::snprintf(buf, sizeof(buf),
                      "build_dataset: wrench/contact coupling %.2fx is below the 10x floor",
                      ds.coupling_ratio);
        throw RuntimeAbort(buf);
    }

    ds.latent_stats.mean.resize(4);
    ds.latent_stats.std.resize(4);
    for (int c = 0; c < 4; ++c) {
        double m = lsum[c] / lat_count;
        ds.latent_stats.mean[c] = m;
        ds.latent_stats.std[c] = std::sqrt(std::max(0.0, lsq[c] / lat_count - m * m));
    }
    ds.wrench_stats.mean.resize(6);
    ds.wrench_stats.std.resize(6);
    for (int c = 0; c < 6; ++c) {
        double m = wsum[c] / w_count;
        ds.wrench_stats.mean[c] = m;
        ds.wrench_stats.std[c] = std::sqrt(std::max(0.0, wsq[c] / w_count - m * m));
    }

    JointLayout jl = joint_layout(dims);
    for (size_t e = 0; e < trajs.size(); ++e) {
        int64_t T = static_cast<int64_t>(trajs[e].frames.size());
        if (T < horizon + 1) {
            ++ds.skipped_short;
            continue;
        }
        for (int64_t t = 0; t + horizon <= T - 1; ++t) {
            Sample smp;
            smp.task_id = trajs[e].task_id;
            smp.joint.assign(jl.total, 0.0);
            for (int64_t c = 0; c < 4; ++c)
                for (int64_t i = 0; i < lat_n; ++i)
                    smp.joint[jl.ctx_off + c * lat_n + i] =
                        zscore_one(raw_lat[e][t][c * lat_n + i], ds.latent_stats, c);
            for (int64_t h = 0; h < dims.H; ++h) {
                int64_t src = t + skip_step * (h + 1);
                for (int64_t c = 0; c < 4; ++c)
                    for (int64_t i = 0; i < lat_n; ++i)
                        smp.joint[jl.fut_off + (h * 4 + c) * lat_n + i] =
                            zscore_one(raw_lat[e][src][c * lat_n + i], ds.latent_stats, c);
            }
            const EpisodeFrame& fr = trajs[e].frames[t];
            for (int64_t i = 0; i < jl.state_len; ++i)
                smp.joint[jl.state_off + i] = fr.state[i];
            for (int64_t k = 0; k < dims.K; ++k) {
                const auto& act = trajs[e].frames[t + k * skip_step].action;
                for (int64_t i = 0; i < dims.A_dof; ++i)
                    smp.joint[jl.act_off + k * dims.A_dof + i] = act[i];
            }
            // Dropped modalities keep their slots but carry zeros; the stats
            // and the coupling gate above always see the raw sensor data.
            if (drop_mask & kDropDepth)
                smp.depth.assign(static_cast<size_t>(lat_n), 0.0);
            else
                smp.depth = detail::avg_pool2(fr.depth).data();
            smp.force.assign(6, 0.0);
            if (!(drop_mask & kDropForce))
                for (int c = 0; c < 6; ++c)
                    smp.force[c] = zscore_one(smooth_w[e][t][c], ds.wrench_stats, c);
            ds.samples.push_back(std::move(smp));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset file: "DMDS", little-endian throughout.

namespace detail {

inline void fput(const void* p, size_t n, std::FILE* f) {
    if (std::fwrite(p, 1, n, f) != n) throw RuntimeAbort("dataset write failed");
}

inline void fget(void* p, size_t n, std::FILE* f) {
    if (std::fread(p, 1, n, f) != n) throw RuntimeAbort("truncated dataset file");
}

inline void put_stats(const ZStats& st, std::FILE* f) {
    uint32_t c = static_cast<uint32_t>(st.mean.size());
    fput(&c, 4, f);
    for (double v : st.mean) fput(&v, 8, f);
    for (double v : st.std) fput(&v, 8, f);
}

inline ZStats get_stats(std::FILE* f, uint32_t expect) {
    uint32_t c = 0;
    fget(&c, 4, f);
    if (c != expect) throw RuntimeAbort("dataset stats channel count mismatch");
    ZStats st;
    st.mean.resize(c);
    st.std.resize(c);
    for (auto& v : st.mean) fget(&v, 8, f);
    for (auto& v : st.std) fget(&v, 8, f);
    return st;
}

}  // namespace detail

inline void save_dataset(const std::string& path, const PushDataset& ds) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw RuntimeAbort("cannot open dataset file for writing: " + path);
    struct Closer {
        std::FILE* f;
        ~Closer() { std::fclose(f); }
    } closer{f};

    detail::fput("DMDS", 4, f);
    uint32_t version = 1;
    detail::fput(&version, 4, f);
    const int64_t dim_fields[8] = {ds.dims.D,     ds.dims.S_lat, ds.dims.C_lat,
                                   ds.dims.p_rgb, ds.dims.p_depth, ds.dims.H,
                                   ds.dims.K,     ds.dims.A_dof};
    for (int64_t v : dim_fields) {
        uint32_t u = static_cast<uint32_t>(v);
        detail::fput(&u, 4, f);
    }
    detail::fput(&ds.drop_mask, 4, f);
    detail::put_stats(ds.latent_stats, f);
    detail::put_stats(ds.wrench_stats, f);
    uint64_t skipped = static_cast<uint64_t>(ds.skipped_short);
    detail::fput(&skipped, 8, f);
    detail::fput(&ds.coupling_ratio, 8, f);
    uint64_t n = ds.samples.size();
    detail::fput(&n, 8, f);
    for (const Sample& s : ds.samples) {
        uint32_t task = static_cast<uint32_t>(s.task_id);
        detail::fput(&task, 4, f);
        uint64_t len = s.joint.size() + s.depth.size() + s.force.size();
        detail::fput(&len, 8, f);
        detail::fput(s.joint.data(), 8 * s.joint.size(), f);
        detail::fput(s.depth.data(), 8 * s.depth.size(), f);
        detail::fput(s.force.data(), 8 * s.force.size(), f);
    }
}

inline PushDataset load_dataset(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw RuntimeAbort("cannot open dataset file: " + path);
    struct Closer {
        std::FILE* f;
        ~Closer() { std::fclose(f); }
    } closer{f};

    char magic[4] = {};
    detail::fget(magic, 4, f);
    if (std::memcmp(magic, "DMDS", 4) != 0) throw RuntimeAbort("dataset magic mismatch");
    uint32_t version = 0;
    detail::fget(&version, 4, f);
    if (version != 1) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "unsupported dataset version %u", version);
        throw RuntimeAbort(buf);
    }
    PushDataset ds;
    uint32_t dim_fields[8];
    for (auto& u : dim_fields) detail::fget(&u, 4, f);
    ds.dims.D = dim_fields[0];
    ds.dims.S_lat = dim_fields[1];
    ds.dims.C_lat = dim_fields[2];
    ds.dims.p_rgb = dim_fields[3];
    ds.dims.p_depth = dim_fields[4];
    ds.dims.H = dim_fields[5];
    ds.dims.K = dim_fields[6];
    ds.dims.A_dof = dim_fields[7];
    ds.dims.validate(1);
    detail::fget(&ds.drop_mask, 4, f);
    if ((ds.drop_mask & ~(kDropDepth | kDropForce)) != 0)
        throw RuntimeAbort("dataset drop mask has unknown bits");
    ds.latent_stats = detail::get_stats(f, 4);
    ds.wrench_stats = detail::get_stats(f, 6);
    uint64_t skipped = 0;
    detail::fget(&skipped, 8, f);
    ds.skipped_short = static_cast<int64_t>(skipped);
    detail::fget(&ds.coupling_ratio, 8, f);
    uint64_t n = 0;
    detail::fget(&n, 8, f);
    JointLayout jl = joint_layout(ds.dims);
    const uint64_t want =
        static_cast<uint64_t>(jl.total + ds.dims.S_lat * ds.dims.S_lat + 6);
    ds.samples.resize(n);
    for (uint64_t i = 0; i < n; ++i) {
        Sample& s = ds.samples[i];
        uint32_t task = 0;
        detail::fget(&task, 4, f);
        s.task_id = task;
        uint64_t len = 0;
        detail::fget(&len, 8, f);
        if (len != want) throw RuntimeAbort("dataset record length mismatch");
        s.joint.resize(jl.total);
        s.depth.resize(ds.dims.S_lat * ds.dims.S_lat);
        s.force.resize(6);
        detail::fget(s.joint.data(), 8 * s.joint.size(), f);
        detail::fget(s.depth.data(), 8 * s.depth.size(), f);
        detail::fget(s.force.data(), 8 * s.force.size(), f);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Closed-loop evaluation. Episodes run in lockstep: every replan batches the
// still-active episodes through one DDIM pass, then each episode executes its
// K actions, holding each for skip_step ticks.

struct EvalOptions {
    int64_t n_episodes = 100;
    int64_t task_id = 1;
    uint64_t seed = 0;
    Ablation mode = Ablation::Full;
    int64_t skip_step = 4;
};

struct EvalReport {
    std::vector<uint8_t> success;
    std::vector<int64_t> ticks;
    // Conditioned wrench per episode, one row per reading: the idle reading
    // at tick 0, then one per executed tick.
    std::vector<std::vector<std::array<double, 6>>> force_trace;
    double success_rate = 0.0;
    double mean_ticks = 0.0;
};

inline EvalReport eval_policy(const Backbone& model, const DiffusionSchedule& sched,
                              const ModelDims& dims, const ZStats& latent_stats,
                              const ZStats& wrench_stats, const EnvConfig& cfg,
                              const EvalOptions& opt) {
    cfg.validate();
    if (opt.n_episodes < 1) throw ConfigError("eval: n_episodes must be >= 1");
    if (opt.skip_step < 1) throw ConfigError("eval: skip_step must be >= 1");
    const Mat3 eye{1, 0, 0, 0, 1, 0, 0, 0, 1};
    const int64_t B = opt.n_episodes;
    JointLayout jl = joint_layout(dims);

    struct Lane {
        WorldState world;
        Rng rng{0};
        WrenchConditioner cond;
        Wrench latest;  // conditioned
        int64_t ticks = 0;
        bool active = true;
        bool success = false;
    };
    std::vector<Lane> lanes;
    lanes.reserve(B);
    for (int64_t b = 0; b < B; ++b) {
        Lane ln;
        ln.rng = Rng(derive_seed(opt.seed, 0x6576616cULL, static_cast<uint64_t>(b)));
        ln.cond = WrenchConditioner(20.0, 2.0, 5, 2, wrench_stats);
        ln.world = init_world(opt.task_id, cfg, ln.rng);
        ln.latest = ln.cond.push(eye, initial_wrench(cfg, ln.rng));
        lanes.push_back(std::move(ln));
    }

    EvalReport rep;
    rep.success.assign(B, 0);
    rep.ticks.assign(B, 0);
    rep.force_trace.resize(B);
    auto trace = [&rep](int64_t b, const Wrench& w) {
        rep.force_trace[b].push_back(
            {w.force[0], w.force[1], w.force[2], w.torque[0], w.torque[1], w.torque[2]});
    };
    for (int64_t b = 0; b < B; ++b) trace(b, lanes[b].latest);
    for (uint64_t round = 0;; ++round) {
        std::vector<int64_t> act_idx;
        for (int64_t b = 0; b < B; ++b)
            if (lanes[b].active) act_idx.push_back(b);
        if (act_idx.empty()) break;

        std::vector<PolicyObs> obs(act_idx.size());
        std::vector<uint64_t> seeds(act_idx.size());
        for (size_t i = 0; i < act_idx.size(); ++i) {
            Lane& ln = lanes[act_idx[i]];
            obs[i].ctx = pseudo_vae_encode(render_rgb(ln.world, cfg), latent_stats).data();
            obs[i].depth = detail::avg_pool2(render_depth(ln.world, cfg)).data();
            obs[i].force = {ln.latest.force[0],  ln.latest.force[1],  ln.latest.force[2],
                            ln.latest.torque[0], ln.latest.torque[1], ln.latest.torque[2]};
            obs[i].state = {ln.world.agent[0], ln.world.agent[1], ln.world.grip, 0.0};
            obs[i].task_id = opt.task_id;
            seeds[i] = derive_seed(opt.seed, 0x706c616eULL,
                                   (static_cast<uint64_t>(act_idx[i]) << 20) | round);
        }
        std::vector<std::vector<double>> joints =
            model.sample_joint(obs, seeds, sched, opt.mode);

        for (size_t i = 0; i < act_idx.size(); ++i) {
            Lane& ln = lanes[act_idx[i]];
            const double* act = joints[i].data() + jl.act_off;
            for (int64_t k = 0; k < dims.K && ln.active; ++k) {
                std::array<double, 4> a{};
                for (int64_t j = 0; j < dims.A_dof; ++j)
                    a[j] = detail::clamp_unit(act[k * dims.A_dof + j]);
                for (int64_t r = 0; r < opt.skip_step && ln.active; ++r) {
                    StepOut out = env_step(ln.world, a, cfg, ln.rng);
                    ln.world = out.next;
                    ln.latest = ln.cond.push(eye, out.wrench);
                    trace(act_idx[i], ln.latest);
                    ++ln.ticks;
                    if (detail::dist2d(ln.world.block, ln.world.goal) < cfg.success_dist) {
                        ln.success = true;
                        ln.active = false;
                    } else if (ln.ticks >= cfg.max_ticks) {
                        ln.active = false;
                    }
                }
            }
        }
    }

    double ticks_sum = 0;
    int64_t wins = 0;
    for (int64_t b = 0; b < B; ++b) {
        rep.success[b] = lanes[b].success ? 1 : 0;
        rep.ticks[b] = lanes[b].ticks;
        wins += rep.success[b];
        ticks_sum += static_cast<double>(lanes[b].ticks);
    }
    rep.success_rate = static_cast<double>(wins) / static_cast<double>(B);
    rep.mean_ticks = ticks_sum / static_cast<double>(B);
    return rep;
}

}  // namespace demuse
