#pragma once

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "demuse/backbone.hpp"
#include "demuse/envgen.hpp"
#include "demuse/sensorio.hpp"

namespace demuse {

// One flat bag for everything a command needs. Defaults are the desk preset;
// preset_paper_ref() swaps in the reference geometry (profile only, far too
// large to train here).
struct RunConfig {
    std::string preset = "desk";
    uint64_t seed = 0;
    std::string dataset = "dataset.dmds";
    std::string out_dir = "out";

    ModelConfig model;

    // train
    int64_t total_steps = 5000;
    int64_t batch = 16;
    double lr_base = 1e-4;
    int64_t warmup = 400;
    double weight_decay = 0.0;
    double ema_decay = 0.998;
    int64_t ckpt_interval = 1000;
    std::string resume;

    // gen
    int64_t episodes = 200;
    int64_t max_ticks = 200;
    int64_t skip_step = 4;
    uint32_t drop_mask = 0;

    // eval
    int64_t eval_episodes = 100;
    int64_t eval_task = -1;  // -1: every task, round-robin split
    std::string ablate = "full";

    // streams
    StreamSpec camera{30.0, 0.0, 0.0, 0.0};
    StreamSpec robot{100.0, 0.0, 0.0, 0.0};
    StreamSpec control{10.0, 0.0, 0.0, 0.0};
    double duration = 60.0;
    double dt_max = kAlignDtMax;

    void validate() const {
        if (preset != "desk" && preset != "paper-ref")
            throw ConfigError("config: unknown preset: " + preset);
        model.validate();
        if (!(beta_ok(model.beta_start) && beta_ok(model.beta_end)) ||
            model.beta_start > model.beta_end)
            throw ConfigError("config: betas must satisfy 0 < beta_start <= beta_end < 1");
        if (total_steps < 1) throw ConfigError("config: total_steps must be >= 1");
        if (batch < 1) throw ConfigError("config: batch must be >= 1");
        if (!(lr_base > 0.0)) throw ConfigError("config: lr_base must be positive");
        if (warmup < 0 || warmup >= total_steps)
            throw ConfigError("config: warmup outside [0, total_steps)");
        if (weight_decay < 0.0) throw ConfigError("config: weight_decay must be >= 0");
        if (!(ema_decay >= 0.0 && ema_decay < 1.0))
            throw ConfigError("config: ema_decay outside [0, 1)");
        if (ckpt_interval < 1) throw ConfigError("config: ckpt_interval must be >= 1");
        if (episodes < 1) throw ConfigError("config: episodes must be >= 1");
        if (max_ticks < 1) throw ConfigError("config: max_ticks must be >= 1");
        if (skip_step < 1) throw ConfigError("config: skip_step must be >= 1");
        if ((drop_mask & ~(kDropDepth | kDropForce)) != 0)
            throw ConfigError("config: drop covers only depth and force");
        if (eval_episodes < 1) throw ConfigError("config: eval episodes must be >= 1");
        if (eval_task < -1 || eval_task >= model.n_tasks)
            throw ConfigError("config: eval task out of range");
        parse_ablation(ablate);
        for (const StreamSpec* sp : {&camera, &robot, &control}) {
            if (!(sp->rate_hz > 0.0)) throw ConfigError("config: stream rate must be positive");
            if (sp->jitter_std < 0.0) throw ConfigError("config: stream jitter must be >= 0");
            if (!(sp->dropout_prob >= 0.0 && sp->dropout_prob < 1.0))
                throw ConfigError("config: stream dropout outside [0, 1)");
            if (!(1.0 - sp->drift_ppm * 1e-6 > 0.0))
                throw ConfigError("config: stream drift_ppm out of range");
        }
        if (!(duration > 0.0)) throw ConfigError("config: duration must be positive");
        if (!(dt_max > 0.0)) throw ConfigError("config: dt_max must be positive");
    }

    static RunConfig preset_desk() { return RunConfig{}; }

    // Reference geometry from the published configuration: 32x32 latents,
    // width 1152, 28 layers with experts in the top half. The training keys
    // carry the published budget for reference; `train` refuses to run it.
    static RunConfig preset_paper_ref() {
        RunConfig c;
        c.preset = "paper-ref";
        c.model.dims.D = 1152;
        c.model.dims.S_lat = 32;
        c.model.layers = 28;
        c.model.heads = 16;
        c.model.moe_start = 14;
        c.total_steps = 100000;
        c.batch = 64;
        c.warmup = 8000;
        return c;
    }

    static RunConfig preset_by_name(const std::string& name) {
        if (name == "desk") return preset_desk();
        if (name == "paper-ref") return preset_paper_ref();
        throw ConfigError("config: unknown preset: " + name);
    }

private:
    static bool beta_ok(double b) { return b > 0.0 && b < 1.0; }
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline int64_t parse_i64(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    long long x = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || errno != 0 || end != v.c_str() + v.size())
        throw ConfigError("config: bad integer for " + key + ": '" + v + "'");
    return static_cast<int64_t>(x);
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    if (!v.empty() && v[0] == '-')
        throw ConfigError("config: bad unsigned integer for " + key + ": '" + v + "'");
    unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (v.empty() || errno != 0 || end != v.c_str() + v.size())
        throw ConfigError("config: bad unsigned integer for " + key + ": '" + v + "'");
    return static_cast<uint64_t>(x);
}

inline double parse_f64(const std::string& key, const std::string& v) {
    errno = 0;
    char* end = nullptr;
    double x = std::strtod(v.c_str(), &end);
    if (v.empty() || errno != 0 || end != v.c_str() + v.size() || !std::isfinite(x))
        throw ConfigError("config: bad number for " + key + ": '" + v + "'");
    return x;
}

} // namespace detail

inline uint32_t parse_drop_list(const std::string& v) {
    uint32_t mask = 0;
    size_t pos = 0;
    while (pos <= v.size()) {
        size_t comma = v.find(',', pos);
        if (comma == std::string::npos) comma = v.size();
        std::string item = detail::trim(v.substr(pos, comma - pos));
        if (!item.empty()) {
            if (item == "depth") mask |= kDropDepth;
            else if (item == "force") mask |= kDropForce;
            else throw ConfigError("config: unknown drop modality: " + item);
        }
        pos = comma + 1;
    }
    return mask;
}

inline std::string drop_list_name(uint32_t mask) {
    std::string s;
    if (mask & kDropDepth) s = "depth";
    if (mask & kDropForce) s += (s.empty() ? "" : ",") + std::string("force");
    return s;
}

// Keyed field table: one row per config key, shared by the parser and the
// dump so the two can never drift apart.
namespace detail {

struct ConfigField {
    const char* section;
    const char* key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = [] {
        std::vector<ConfigField> f;
        auto add_i = [&f](const char* sec, const char* key, int64_t RunConfig::* p) {
            f.push_back({sec, key,
                         [p, key](RunConfig& c, const std::string& v) {
                             c.*p = parse_i64(key, v);
                         },
                         [p](const RunConfig& c) { return std::to_string(c.*p); }});
        };
        auto add_mi = [&f](const char* sec, const char* key, int64_t ModelConfig::* p) {
            f.push_back({sec, key,
                         [p, key](RunConfig& c, const std::string& v) {
                             c.model.*p = parse_i64(key, v);
                         },
                         [p](const RunConfig& c) { return std::to_string(c.model.*p); }});
        };
        auto add_di = [&f](const char* sec, const char* key, int64_t ModelDims::* p) {
            f.push_back({sec, key,
                         [p, key](RunConfig& c, const std::string& v) {
                             c.model.dims.*p = parse_i64(key, v);
                         },
                         [p](const RunConfig& c) { return std::to_string(c.model.dims.*p); }});
        };
        auto add_d = [&f](const char* sec, const char* key, double RunConfig::* p) {
            f.push_back({sec, key,
                         [p, key](RunConfig& c, const std::string& v) {
                             c.*p = parse_f64(key, v);
                         },
                         [p](const RunConfig& c) { return fmt_g17(c.*p); }});
        };
        auto add_md = [&f](const char* sec, const char* key, double ModelConfig::* p) {
            f.push_back({sec, key,
                         [p, key](RunConfig& c, const std::string& v) {
                             c.model.*p = parse_f64(key, v);
                         },
                         [p](const RunConfig& c) { return fmt_g17(c.model.*p); }});
        };
        auto add_s = [&f](const char* sec, const char* key, std::string RunConfig::* p) {
            f.push_back({sec, key,
                         [p](RunConfig& c, const std::string& v) { c.*p = v; },
                         [p](const RunConfig& c) { return c.*p; }});
        };
        auto add_sf = [&f](const char* key, StreamSpec RunConfig::* sp,
                           double StreamSpec::* dp) {
            f.push_back({"streams", key,
                         [sp, dp, key](RunConfig& c, const std::string& v) {
                             (c.*sp).*dp = parse_f64(key, v);
                         },
                         [sp, dp](const RunConfig& c) { return fmt_g17((c.*sp).*dp); }});
        };

        add_s("run", "preset", &RunConfig::preset);
        f.push_back({"run", "seed",
                     [](RunConfig& c, const std::string& v) {
                         c.seed = parse_u64("seed", v);
                     },
                     [](const RunConfig& c) { return std::to_string(c.seed); }});
        add_s("run", "dataset", &RunConfig::dataset);
        add_s("run", "out_dir", &RunConfig::out_dir);

        add_di("model", "d", &ModelDims::D);
        add_di("model", "s_lat", &ModelDims::S_lat);
        add_di("model", "c_lat", &ModelDims::C_lat);
        add_di("model", "p_rgb", &ModelDims::p_rgb);
        add_di("model", "p_depth", &ModelDims::p_depth);
        add_di("model", "h", &ModelDims::H);
        add_di("model", "k", &ModelDims::K);
        add_di("model", "a_dof", &ModelDims::A_dof);
        add_mi("model", "layers", &ModelConfig::layers);
        add_mi("model", "heads", &ModelConfig::heads);
        add_mi("model", "moe_start", &ModelConfig::moe_start);
        add_mi("model", "n_experts", &ModelConfig::n_experts);
        add_mi("model", "top_k", &ModelConfig::top_k);
        add_mi("model", "expert_ratio", &ModelConfig::expert_ratio);
        add_mi("model", "n_tasks", &ModelConfig::n_tasks);

        add_mi("diffusion", "num_steps", &ModelConfig::num_steps);
        add_md("diffusion", "beta_start", &ModelConfig::beta_start);
        add_md("diffusion", "beta_end", &ModelConfig::beta_end);
        add_mi("diffusion", "ddim_steps", &ModelConfig::ddim_steps);
        add_md("diffusion", "clip", &ModelConfig::clip);

        add_md("loss", "lambda_v", &ModelConfig::lambda_v);
        add_md("loss", "lambda_a", &ModelConfig::lambda_a);
        add_md("loss", "alpha", &ModelConfig::alpha);
        add_md("loss", "vb_weight", &ModelConfig::vb_weight);

        add_i("train", "total_steps", &RunConfig::total_steps);
        add_i("train", "batch", &RunConfig::batch);
        add_d("train", "lr_base", &RunConfig::lr_base);
        add_i("train", "warmup", &RunConfig::warmup);
        add_d("train", "weight_decay", &RunConfig::weight_decay);
        add_d("train", "ema_decay", &RunConfig::ema_decay);
        add_i("train", "ckpt_interval", &RunConfig::ckpt_interval);
        add_s("train", "resume", &RunConfig::resume);

        add_i("env", "episodes", &RunConfig::episodes);
        add_i("env", "max_ticks", &RunConfig::max_ticks);
        add_i("env", "skip_step", &RunConfig::skip_step);
        f.push_back({"env", "drop",
                     [](RunConfig& c, const std::string& v) { c.drop_mask = parse_drop_list(v); },
                     [](const RunConfig& c) { return drop_list_name(c.drop_mask); }});

        add_i("eval", "episodes", &RunConfig::eval_episodes);
        add_i("eval", "task", &RunConfig::eval_task);
        add_s("eval", "ablate", &RunConfig::ablate);

        add_sf("camera_rate", &RunConfig::camera, &StreamSpec::rate_hz);
        add_sf("camera_jitter", &RunConfig::camera, &StreamSpec::jitter_std);
        add_sf("camera_drift_ppm", &RunConfig::camera, &StreamSpec::drift_ppm);
        add_sf("camera_dropout", &RunConfig::camera, &StreamSpec::dropout_prob);
        add_sf("robot_rate", &RunConfig::robot, &StreamSpec::rate_hz);
        add_sf("robot_jitter", &RunConfig::robot, &StreamSpec::jitter_std);
        add_sf("robot_drift_ppm", &RunConfig::robot, &StreamSpec::drift_ppm);
        add_sf("robot_dropout", &RunConfig::robot, &StreamSpec::dropout_prob);
        add_sf("control_rate", &RunConfig::control, &StreamSpec::rate_hz);
        add_sf("control_jitter", &RunConfig::control, &StreamSpec::jitter_std);
        add_sf("control_drift_ppm", &RunConfig::control, &StreamSpec::drift_ppm);
        add_sf("control_dropout", &RunConfig::control, &StreamSpec::dropout_prob);
        add_d("streams", "duration", &RunConfig::duration);
        add_d("streams", "dt_max", &RunConfig::dt_max);
        return f;
    }();
    return fields;
}

} // namespace detail

// Flat INI-style text: [section] headers, key = value lines, '#'/';' comment
// lines. Unknown sections, unknown keys, duplicate keys and malformed lines
// are all hard errors; nothing is applied unless the whole file parses.
inline void apply_config_text(RunConfig& cfg, const std::string& text,
                              const std::string& origin = "config") {
    const auto& fields = detail::config_fields();
    std::set<std::string> valid_sections;
    for (const auto& fd : fields) valid_sections.insert(fd.section);

    RunConfig staged = cfg;
    std::set<std::string> seen;
    std::string section;
    std::istringstream in(text);
    std::string raw;
    int64_t lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        std::string line = detail::trim(raw);
        auto fail = [&](const std::string& what) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + what);
        };
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail("malformed section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            if (!valid_sections.count(section)) fail("unknown section [" + section + "]");
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos) fail("expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) fail("empty key");
        if (section.empty()) fail("key before any [section]");
        std::string full = section + "." + key;
        if (!seen.insert(full).second) fail("duplicate key " + full);
        const detail::ConfigField* hit = nullptr;
        for (const auto& fd : fields)
            if (section == fd.section && key == fd.key) {
                hit = &fd;
                break;
            }
        if (!hit) fail("unknown key " + full);
        hit->set(staged, value);
    }
    cfg = staged;
}

inline RunConfig parse_config_text(const std::string& text,
                                   const std::string& origin = "config") {
    // A bare `preset` line in [run] picks the starting point for every other
    // key, so scan for it first.
    std::string name = "desk";
    {
        std::istringstream in(text);
        std::string raw, section;
        while (std::getline(in, raw)) {
            std::string line = detail::trim(raw);
            if (line.empty() || line[0] == '#' || line[0] == ';') continue;
            if (line.front() == '[' && line.back() == ']') {
                section = detail::trim(line.substr(1, line.size() - 2));
                continue;
            }
            size_t eq = line.find('=');
            if (eq == std::string::npos) continue;
            if (section == "run" && detail::trim(line.substr(0, eq)) == "preset")
                name = detail::trim(line.substr(eq + 1));
        }
    }
    RunConfig cfg = RunConfig::preset_by_name(name);
    apply_config_text(cfg, text, origin);
    return cfg;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline RunConfig parse_config_file(const std::string& path) {
    return parse_config_text(read_text_file(path), path);
}

// Canonical text form; parse_config_text(dump_config(c)) reproduces c.
inline std::string dump_config(const RunConfig& cfg) {
    const auto& fields = detail::config_fields();
    std::string out;
    std::string section;
    for (const auto& fd : fields) {
        if (section != fd.section) {
            if (!out.empty()) out += "\n";
            section = fd.section;
            out += "[" + section + "]\n";
        }
        out += std::string(fd.key) + " = " + fd.get(cfg) + "\n";
    }
    return out;
}

} // namespace demuse
