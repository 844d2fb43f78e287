#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "demuse/ops.hpp"
#include "demuse/params.hpp"

namespace demuse {

enum Modality : int { MOD_RGB = 0, MOD_ACTION = 1, MOD_DEPTH = 2, MOD_FORCE = 3 };

struct ModelDims {
    int64_t D = 64;
    int64_t S_lat = 16;
    int64_t C_lat = 4;
    int64_t p_rgb = 2;
    int64_t p_depth = 8;
    int64_t H = 3; // future frames
    int64_t K = 3; // action steps
    int64_t A_dof = 4;

    int64_t rgb_grid() const { return S_lat / p_rgb; }
    int64_t depth_grid() const { return S_lat / p_depth; }
    int64_t n_rgb() const { return rgb_grid() * rgb_grid(); }
    int64_t n_depth() const { return depth_grid() * depth_grid(); }
    int64_t n_tok() const { return n_rgb() + n_depth() + 2; }
    int64_t stack_channels() const { return (1 + H) * C_lat; }
    int64_t rgb_patch_len() const { return p_rgb * p_rgb * stack_channels(); }
    int64_t depth_patch_len() const { return p_depth * p_depth; }
    int64_t action_len() const { return A_dof * (1 + K); }

    void validate(int64_t heads) const {
        if (D <= 0 || S_lat <= 0 || C_lat <= 0 || p_rgb <= 0 || H <= 0 || K <= 0 || A_dof <= 0)
            throw ConfigError("dims: all sizes must be positive");
        if (S_lat % p_rgb != 0) throw ConfigError("dims: S_lat not divisible by p_rgb");
        if (S_lat % p_depth != 0) throw ConfigError("dims: S_lat not divisible by p_depth");
        if (p_depth != 4 * p_rgb) throw ConfigError("dims: p_depth must equal 4*p_rgb");
        if (heads <= 0 || D % heads != 0) throw ConfigError("dims: D not divisible by heads");
        if (D % 2 != 0) throw ConfigError("dims: D must be even for sinusoidal rows");
    }
};

// canonical order: RGB, Depth, Force, Action
struct SequenceLayout {
    int64_t n_rgb = 0, n_depth = 0, n_tok = 0;
    int64_t rgb_off = 0, depth_off = 0, force_off = 0, action_off = 0;
    std::vector<int> modality_ids;

    explicit SequenceLayout(const ModelDims& d) {
        n_rgb = d.n_rgb();
        n_depth = d.n_depth();
        n_tok = d.n_tok();
        rgb_off = 0;
        depth_off = n_rgb;
        force_off = n_rgb + n_depth;
        action_off = n_rgb + n_depth + 1;
        modality_ids.assign(n_tok, MOD_RGB);
        for (int64_t i = 0; i < n_depth; ++i) modality_ids[depth_off + i] = MOD_DEPTH;
        modality_ids[force_off] = MOD_FORCE;
        modality_ids[action_off] = MOD_ACTION;
    }
};

// transformer frequency ladder: pair (sin, cos) at rate 10000^(-2i/D)
inline std::vector<double> sinusoidal_embedding(double pos, int64_t D) {
    std::vector<double> e(D);
    for (int64_t i = 0; i < D / 2; ++i) {
        double rate = std::pow(10000.0, -2.0 * double(i) / double(D));
        e[2 * i] = std::sin(pos * rate);
        e[2 * i + 1] = std::cos(pos * rate);
    }
    return e;
}

// flat source indices for each patch token, row-major over the patch grid;
// within a patch the order is (channel, py, px)
inline std::vector<int64_t> patch_index_map(int64_t C, int64_t S, int64_t p) {
    int64_t g = S / p;
    std::vector<int64_t> map;
    map.reserve(g * g * C * p * p);
    for (int64_t gy = 0; gy < g; ++gy)
        for (int64_t gx = 0; gx < g; ++gx)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t py = 0; py < p; ++py)
                    for (int64_t px = 0; px < p; ++px)
                        map.push_back(c * S * S + (gy * p + py) * S + (gx * p + px));
    return map;
}

// inverse of patch_index_map for a single channel block: for each flat
// spatial position, the (token, column) pair it came from
inline std::vector<int64_t> unpatch_index_map(int64_t C, int64_t S, int64_t p) {
    auto fwd = patch_index_map(C, S, p);
    std::vector<int64_t> inv(fwd.size());
    for (size_t j = 0; j < fwd.size(); ++j) inv[fwd[j]] = static_cast<int64_t>(j);
    return inv;
}

class Tokenizer {
public:
    Tokenizer(const ModelDims& dims, ParamStore& ps, const std::string& prefix = "tok.")
        : dims_(dims), layout_(dims) {
        int64_t D = dims.D;
        rgb_w_ = ps.add(prefix + "rgb_w", {D, dims.rgb_patch_len()}, dims.rgb_patch_len());
        rgb_b_ = ps.add_zeros(prefix + "rgb_b", {1, D});
        depth_w_ = ps.add(prefix + "depth_w", {D, dims.depth_patch_len()}, dims.depth_patch_len());
        depth_b_ = ps.add_zeros(prefix + "depth_b", {1, D});
        force_w_ = ps.add(prefix + "force_w", {D, 6}, 6);
        force_b_ = ps.add_zeros(prefix + "force_b", {1, D});
        action_w_ = ps.add(prefix + "action_w", {D, dims.action_len()}, dims.action_len());
        action_b_ = ps.add_zeros(prefix + "action_b", {1, D});
        rgb_pos_ = ps.add(prefix + "rgb_pos", {dims.n_rgb(), D}, D);

        rgb_map_ = std::make_shared<std::vector<int64_t>>(
            patch_index_map(dims.stack_channels(), dims.S_lat, dims.p_rgb));
        depth_map_ = std::make_shared<std::vector<int64_t>>(
            patch_index_map(1, dims.S_lat, dims.p_depth));

        // fixed 4x4 block mean over the RGB patch grid
        int64_t g = dims.rgb_grid(), gd = dims.depth_grid();
        pool_ = Tensor::zeros({gd * gd, g * g});
        auto& pv = pool_.data();
        for (int64_t dy = 0; dy < gd; ++dy)
            for (int64_t dx = 0; dx < gd; ++dx)
                for (int64_t by = 0; by < 4; ++by)
                    for (int64_t bx = 0; bx < 4; ++bx)
                        pv[(dy * gd + dx) * g * g + (dy * 4 + by) * g + (dx * 4 + bx)] = 1.0 / 16.0;

        auto fp = sinusoidal_embedding(double(dims.n_rgb() + dims.n_depth()), D);
        auto ap = sinusoidal_embedding(double(dims.n_rgb() + dims.n_depth() + 1), D);
        force_pos_ = Tensor::from_vector({1, D}, fp);
        action_pos_ = Tensor::from_vector({1, D}, ap);
    }

    const ModelDims& dims() const { return dims_; }
    const SequenceLayout& layout() const { return layout_; }

    Tensor depth_positional() const { return matmul(pool_, rgb_pos_); }

    // stacked: [B, (1+H)*C_lat*S*S] -> [B*n_rgb, D]
    Tensor embed_rgb(const Tensor& stacked) const {
        if (stacked.cols() != dims_.stack_channels() * dims_.S_lat * dims_.S_lat)
            throw RuntimeAbort("embed_rgb: input width mismatch");
        int64_t B = stacked.rows();
        Tensor patches = gather_flat(stacked, rgb_map_)
                             .reshape({B * dims_.n_rgb(), dims_.rgb_patch_len()});
        Tensor t = linear(patches, rgb_w_, rgb_b_);
        return add(t, take_rows(rgb_pos_, tile_index(B, dims_.n_rgb())));
    }

    // depth: [B, S*S] -> [B*n_depth, D]
    Tensor embed_depth(const Tensor& depth) const {
        if (depth.cols() != dims_.S_lat * dims_.S_lat)
            throw RuntimeAbort("embed_depth: input width mismatch");
        int64_t B = depth.rows();
        Tensor patches = gather_flat(depth, depth_map_)
                             .reshape({B * dims_.n_depth(), dims_.depth_patch_len()});
        Tensor t = linear(patches, depth_w_, depth_b_);
        return add(t, take_rows(depth_positional(), tile_index(B, dims_.n_depth())));
    }

    // f: [B, 6] -> [B, D]
    Tensor embed_force(const Tensor& f) const {
        if (f.cols() != 6) throw RuntimeAbort("embed_force: expected 6 columns");
        check_finite(f, "embed_force input");
        int64_t B = f.rows();
        return add(linear(f, force_w_, force_b_), take_rows(force_pos_, tile_index(B, 1)));
    }

    // state+actions: [B, A_dof*(1+K)] -> [B, D]
    Tensor embed_action(const Tensor& sa) const {
        if (sa.cols() != dims_.action_len())
            throw RuntimeAbort("embed_action: input width mismatch");
        int64_t B = sa.rows();
        return add(linear(sa, action_w_, action_b_), take_rows(action_pos_, tile_index(B, 1)));
    }

    // groups -> [B*n_tok, D] in canonical order per sample
    Tensor assemble(const Tensor& rgb, const Tensor& depth, const Tensor& force,
                    const Tensor& action, int64_t B) const {
        if (rgb.cols() != dims_.D || depth.cols() != dims_.D || force.cols() != dims_.D ||
            action.cols() != dims_.D)
            throw RuntimeAbort("assemble: token width mismatch");
        if (rgb.rows() != B * layout_.n_rgb || depth.rows() != B * layout_.n_depth ||
            force.rows() != B || action.rows() != B)
            throw RuntimeAbort("assemble: group row count mismatch");
        int64_t N = layout_.n_tok;
        auto d_rgb = std::make_shared<std::vector<int64_t>>();
        auto d_depth = std::make_shared<std::vector<int64_t>>();
        auto d_force = std::make_shared<std::vector<int64_t>>();
        auto d_action = std::make_shared<std::vector<int64_t>>();
        for (int64_t b = 0; b < B; ++b) {
            for (int64_t i = 0; i < layout_.n_rgb; ++i)
                d_rgb->push_back(b * N + layout_.rgb_off + i);
            for (int64_t i = 0; i < layout_.n_depth; ++i)
                d_depth->push_back(b * N + layout_.depth_off + i);
            d_force->push_back(b * N + layout_.force_off);
            d_action->push_back(b * N + layout_.action_off);
        }
        return place_rows({rgb, depth, force, action}, {d_rgb, d_depth, d_force, d_action},
                          B * N);
    }

    // modality id for every row of a [B*n_tok, D] batch
    std::vector<int> batch_modality_ids(int64_t B) const {
        std::vector<int> ids;
        ids.reserve(B * layout_.n_tok);
        for (int64_t b = 0; b < B; ++b)
            ids.insert(ids.end(), layout_.modality_ids.begin(), layout_.modality_ids.end());
        return ids;
    }

private:
    static std::vector<int64_t> tile_index(int64_t B, int64_t n) {
        std::vector<int64_t> idx;
        idx.reserve(B * n);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < n; ++i) idx.push_back(i);
        return idx;
    }

    ModelDims dims_;
    SequenceLayout layout_;
    Tensor rgb_w_, rgb_b_, depth_w_, depth_b_, force_w_, force_b_, action_w_, action_b_;
    Tensor rgb_pos_;
    Tensor pool_, force_pos_, action_pos_;
    std::shared_ptr<std::vector<int64_t>> rgb_map_, depth_map_;
};

} // namespace demuse
