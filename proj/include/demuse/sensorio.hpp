#pragma once

// Signal conditioning and the multi-rate dual-timestamp alignment pipeline.
// Pure functions plus a deterministic discrete-event stream simulator; the
// same conditioning code runs in live sessions, offline reprocessing and
// replay, so the three agree bit for bit.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <deque>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "demuse/common.hpp"
#include "demuse/tensor.hpp"

namespace demuse {

enum class Frame { World, EE };

struct Wrench {
    std::array<double, 3> force{0, 0, 0};
    std::array<double, 3> torque{0, 0, 0};
    Frame frame = Frame::World;
};

// Row-major 3x3 rotation.
using Mat3 = std::array<double, 9>;

inline double wrench_norm(const std::array<double, 3>& v) {
    return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}

// f_E = R^T f_W, tau_E = R^T tau_W, with R the EE orientation in world.
inline Wrench ee_frame_transform(const Wrench& w, const Mat3& R) {
    if (w.frame != Frame::World)
        throw RuntimeAbort("ee_frame_transform: input wrench must be in the world frame");
    // Orthonormality defect ||R^T R - I||_F and determinant check.
    double defect = 0.0;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double dot = 0.0;
            for (int k = 0; k < 3; ++k) dot += R[k * 3 + i] * R[k * 3 + j];
            double d = dot - (i == j ? 1.0 : 0.0);
            defect += d * d;
        }
    }
    defect = std::sqrt(defect);
    double det = R[0] * (R[4] * R[8] - R[5] * R[7]) - R[1] * (R[3] * R[8] - R[5] * R[6]) +
                 R[2] * (R[3] * R[7] - R[4] * R[6]);
    if (defect > 1e-9 || std::fabs(det - 1.0) > 1e-9) {
        char buf[128];
        std::snprintf(buf, sizeof(buf),
                      "ee_frame_transform: rotation defect %.3e, det %.12f", defect, det);
        throw RuntimeAbort(buf);
    }
    Wrench out;
    out.frame = Frame::EE;
    for (int i = 0; i < 3; ++i) {
        out.force[i] = R[0 * 3 + i] * w.force[0] + R[1 * 3 + i] * w.force[1] +
                       R[2 * 3 + i] * w.force[2];
        out.torque[i] = R[0 * 3 + i] * w.torque[0] + R[1 * 3 + i] * w.torque[1] +
                        R[2 * 3 + i] * w.torque[2];
    }
    return out;
}

inline Wrench clip_wrench(const Wrench& w, double f_max, double tau_max) {
    if (f_max <= 0.0 || tau_max <= 0.0)
        throw ConfigError("clip_wrench: bounds must be positive");
    Wrench out = w;
    for (int i = 0; i < 3; ++i) {
        out.force[i] = std::clamp(w.force[i], -f_max, f_max);
        out.torque[i] = std::clamp(w.torque[i], -tau_max, tau_max);
    }
    return out;
}

// Two-sensor baseline: mean of the left and right gripper wrenches.
inline Wrench average_wrench(const Wrench& a, const Wrench& b) {
    if (a.frame != b.frame) throw RuntimeAbort("average_wrench: frame mismatch");
    Wrench out;
    out.frame = a.frame;
    for (int i = 0; i < 3; ++i) {
        out.force[i] = 0.5 * (a.force[i] + b.force[i]);
        out.torque[i] = 0.5 * (a.torque[i] + b.torque[i]);
    }
    return out;
}

namespace detail {

// Hat matrix H = X (X^T X)^{-1} X^T for a least-squares polynomial of the
// given degree over offsets 0..len-1, row-major [len, len]. Row i holds the
// weights producing the smoothed value at position i. The systems are at
// most (order+1)^2, so a plain scalar elimination keeps the filter bit
// stable everywhere (no vectorized linear algebra on this path).
inline std::vector<double> sg_hat(int len, int degree) {
    int m = degree + 1;
    std::vector<double> X(static_cast<size_t>(len) * m);
    for (int i = 0; i < len; ++i) {
        double v = 1.0;
        for (int j = 0; j < m; ++j) {
            X[static_cast<size_t>(i) * m + j] = v;
            v *= static_cast<double>(i);
        }
    }
    // Normal equations N B = X^T with N = X^T X, B [m, len].
    std::vector<double> N(static_cast<size_t>(m) * m, 0.0);
    std::vector<double> B(static_cast<size_t>(m) * len, 0.0);
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b) {
            double acc = 0.0;
            for (int i = 0; i < len; ++i)
                acc += X[static_cast<size_t>(i) * m + a] * X[static_cast<size_t>(i) * m + b];
            N[static_cast<size_t>(a) * m + b] = acc;
        }
    for (int a = 0; a < m; ++a)
        for (int i = 0; i < len; ++i)
            B[static_cast<size_t>(a) * len + i] = X[static_cast<size_t>(i) * m + a];
    // Gauss-Jordan with partial pivoting.
    for (int col = 0; col < m; ++col) {
        int piv = col;
        for (int r = col + 1; r < m; ++r)
            if (std::fabs(N[static_cast<size_t>(r) * m + col]) >
                std::fabs(N[static_cast<size_t>(piv) * m + col]))
                piv = r;
        if (std::fabs(N[static_cast<size_t>(piv) * m + col]) < 1e-300)
            throw RuntimeAbort("savitzky_golay: singular normal equations");
        if (piv != col) {
            for (int c = 0; c < m; ++c)
                std::swap(N[static_cast<size_t>(piv) * m + c],
                          N[static_cast<size_t>(col) * m + c]);
            for (int c = 0; c < len; ++c)
                std::swap(B[static_cast<size_t>(piv) * len + c],
                          B[static_cast<size_t>(col) * len + c]);
        }
        double inv = 1.0 / N[static_cast<size_t>(col) * m + col];
        for (int c = 0; c < m; ++c) N[static_cast<size_t>(col) * m + c] *= inv;
        for (int c = 0; c < len; ++c) B[static_cast<size_t>(col) * len + c] *= inv;
        for (int r = 0; r < m; ++r) {
            if (r == col) continue;
            double f = N[static_cast<size_t>(r) * m + col];
            if (f == 0.0) continue;
            for (int c = 0; c < m; ++c)
                N[static_cast<size_t>(r) * m + c] -= f * N[static_cast<size_t>(col) * m + c];
            for (int c = 0; c < len; ++c)
                B[static_cast<size_t>(r) * len + c] -= f * B[static_cast<size_t>(col) * len + c];
        }
    }
    std::vector<double> H(static_cast<size_t>(len) * len);
    for (int i = 0; i < len; ++i)
        for (int j = 0; j < len; ++j) {
            double acc = 0.0;
            for (int a = 0; a < m; ++a)
                acc += X[static_cast<size_t>(i) * m + a] * B[static_cast<size_t>(a) * len + j];
            H[static_cast<size_t>(i) * len + j] = acc;
        }
    return H;
}

inline void sg_validate(int window, int order) {
    if (window < 1 || window % 2 == 0)
        throw ConfigError("savitzky_golay: window must be odd and positive");
    if (order < 0 || order >= window)
        throw ConfigError("savitzky_golay: order must satisfy 0 <= order < window");
}

} // namespace detail

// Interior convolution weights; for window 5 / order 2 these are
// (-3, 12, 17, 12, -3) / 35.
inline std::vector<double> sg_kernel(int window = 5, int order = 2) {
    detail::sg_validate(window, order);
    std::vector<double> H = detail::sg_hat(window, order);
    std::vector<double> k(window);
    for (int j = 0; j < window; ++j) k[j] = H[static_cast<size_t>(window / 2) * window + j];
    return k;
}

// Central-point least-squares smoothing; the first/last (window-1)/2 samples
// are the off-center evaluations of the polynomial fitted to the edge window.
// Series shorter than the window get a single whole-series fit of degree
// min(order, len-1).
inline std::vector<double> savitzky_golay(const std::vector<double>& series, int window = 5,
                                          int order = 2) {
    detail::sg_validate(window, order);
    int n = static_cast<int>(series.size());
    std::vector<double> out(series.size());
    if (n == 0) return out;
    if (n < window) {
        std::vector<double> H = detail::sg_hat(n, std::min(order, n - 1));
        for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += H[static_cast<size_t>(i) * n + j] * series[j];
            out[i] = acc;
        }
        return out;
    }
    std::vector<double> H = detail::sg_hat(window, order);
    int h = window / 2;
    for (int i = 0; i < n; ++i) {
        int w0;      // window start
        int row;     // evaluation offset inside the window
        if (i < h) {
            w0 = 0;
            row = i;
        } else if (i >= n - h) {
            w0 = n - window;
            row = window - (n - i);
        } else {
            w0 = i - h;
            row = h;
        }
        double acc = 0.0;
        for (int j = 0; j < window; ++j)
            acc += H[static_cast<size_t>(row) * window + j] * series[w0 + j];
        out[i] = acc;
    }
    return out;
}

// Causal variant: the smoothed value of the newest sample given only the
// prefix seen so far. Equals savitzky_golay(prefix).back() for every prefix
// length, so offline reprocessing reproduces live outputs exactly.
inline double sg_causal(const std::vector<double>& prefix, int window = 5, int order = 2) {
    detail::sg_validate(window, order);
    int n = static_cast<int>(prefix.size());
    if (n == 0) throw RuntimeAbort("sg_causal: empty prefix");
    if (n < window) {
        std::vector<double> H = detail::sg_hat(n, std::min(order, n - 1));
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += H[static_cast<size_t>(n - 1) * n + j] * prefix[j];
        return acc;
    }
    std::vector<double> H = detail::sg_hat(window, order);
    double acc = 0.0;
    for (int j = 0; j < window; ++j)
        acc += H[static_cast<size_t>(window - 1) * window + j] * prefix[n - window + j];
    return acc;
}

// Median with mirror (no edge duplication) padding: index -1 maps to 1,
// index S maps to S-2.
inline Tensor median_filter(const Tensor& depth, int window = 15) {
    if (window < 1 || window % 2 == 0)
        throw ConfigError("median_filter: window must be odd and positive");
    if (depth.shape().size() != 2 || depth.rows() != depth.cols())
        throw RuntimeAbort("median_filter: expected a square 2d map");
    int64_t S = depth.rows();
    int h = window / 2;
    if (h >= S) throw ConfigError("median_filter: window too large for map");
    Tensor out = Tensor::zeros({S, S});
    const auto& in = depth.data();
    auto& ov = out.data();
    std::vector<double> patch;
    patch.reserve(static_cast<size_t>(window) * window);
    auto reflect = [S](int64_t i) {
        if (i < 0) return -i;
        if (i >= S) return 2 * S - 2 - i;
        return i;
    };
    for (int64_t y = 0; y < S; ++y) {
        for (int64_t x = 0; x < S; ++x) {
            patch.clear();
            for (int dy = -h; dy <= h; ++dy)
                for (int dx = -h; dx <= h; ++dx)
                    patch.push_back(in[reflect(y + dy) * S + reflect(x + dx)]);
            auto mid = patch.begin() + patch.size() / 2;
            std::nth_element(patch.begin(), mid, patch.end());
            ov[y * S + x] = *mid;
        }
    }
    return out;
}

// Per-channel normalization stats; empty stats act as identity.
struct ZStats {
    std::vector<double> mean;
    std::vector<double> std;
    bool empty() const { return mean.empty(); }
};

constexpr double kZScoreFloor = 1e-6;

// values: row-major [n, channels].
inline ZStats compute_zstats(const std::vector<double>& values, int64_t channels) {
    if (channels <= 0 || values.size() % channels != 0)
        throw RuntimeAbort("compute_zstats: bad channel count");
    int64_t n = static_cast<int64_t>(values.size()) / channels;
    if (n == 0) throw RuntimeAbort("compute_zstats: empty corpus");
    ZStats st;
    st.mean.assign(channels, 0.0);
    st.std.assign(channels, 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < channels; ++c) st.mean[c] += values[i * channels + c];
    for (int64_t c = 0; c < channels; ++c) st.mean[c] /= static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < channels; ++c) {
            double d = values[i * channels + c] - st.mean[c];
            st.std[c] += d * d;
        }
    for (int64_t c = 0; c < channels; ++c)
        st.std[c] = std::sqrt(st.std[c] / static_cast<double>(n));
    return st;
}

inline double zscore_one(double x, const ZStats& st, int64_t c) {
    if (st.empty()) return x;
    return (x - st.mean[c]) / std::max(st.std[c], kZScoreFloor);
}

inline void apply_zscore(std::vector<double>& values, int64_t channels, const ZStats& st) {
    if (st.empty()) return;
    if (static_cast<int64_t>(st.mean.size()) != channels)
        throw RuntimeAbort("apply_zscore: stats channel mismatch");
    int64_t n = static_cast<int64_t>(values.size()) / channels;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < channels; ++c)
            values[i * channels + c] = zscore_one(values[i * channels + c], st, c);
}

// Dual-timestamped circular buffer. Monotonic timestamps order the entries;
// the optional hardware timestamp only deduplicates repeated frames. Guarded
// for one producer and one consumer; critical sections are one entry copy.
template <typename T>
class RingBuffer {
  public:
    struct Entry {
        double mono_ts = 0.0;
        std::optional<double> hw_ts;
        T payload{};
    };
    struct Hit {
        size_t index = 0;
        double mono_ts = 0.0;
        double residual = 0.0;
        T payload{};
    };

    explicit RingBuffer(size_t capacity) : capacity_(capacity) {
        if (capacity == 0) throw ConfigError("ring buffer: capacity must be positive");
    }

    // Returns false when the entry was dropped as a hardware-ts duplicate.
    bool push(double mono_ts, T payload, std::optional<double> hw_ts = {}) {
        std::lock_guard<std::mutex> lk(mu_);
        if (!entries_.empty() && mono_ts < entries_.back().mono_ts)
            throw RuntimeAbort("ring buffer: monotonic timestamp went backwards");
        if (hw_ts && !entries_.empty() && entries_.back().hw_ts &&
            *entries_.back().hw_ts == *hw_ts)
            return false;
        entries_.push_back(Entry{mono_ts, hw_ts, std::move(payload)});
        if (entries_.size() > capacity_) entries_.pop_front();
        return true;
    }

    size_t size() const {
        std::lock_guard<std::mutex> lk(mu_);
        return entries_.size();
    }
    size_t capacity() const { return capacity_; }

    Entry at(size_t i) const {
        std::lock_guard<std::mutex> lk(mu_);
        if (i >= entries_.size()) throw RuntimeAbort("ring buffer: index out of range");
        return entries_[i];
    }

    // Entry minimizing |mono_ts - ts|; ties resolve to the earlier entry.
    std::optional<Hit> nearest(double ts) const {
        std::lock_guard<std::mutex> lk(mu_);
        if (entries_.empty()) return std::nullopt;
        auto it = std::lower_bound(entries_.begin(), entries_.end(), ts,
                                   [](const Entry& e, double t) { return e.mono_ts < t; });
        size_t cand = (it == entries_.end()) ? entries_.size() - 1
                                             : static_cast<size_t>(it - entries_.begin());
        if (cand > 0 &&
            std::fabs(entries_[cand - 1].mono_ts - ts) <= std::fabs(entries_[cand].mono_ts - ts))
            cand -= 1;
        Hit h;
        h.index = cand;
        h.mono_ts = entries_[cand].mono_ts;
        h.residual = std::fabs(entries_[cand].mono_ts - ts);
        h.payload = entries_[cand].payload;
        return h;
    }

  private:
    size_t capacity_;
    mutable std::mutex mu_;
    std::deque<Entry> entries_;
};

constexpr double kAlignDtMax = 0.050;

// Stream simulation ------------------------------------------------------

enum StreamSource : int { SrcCamera = 0, SrcRobot = 1, SrcControl = 2 };

struct StreamSpec {
    double rate_hz = 0.0;
    double jitter_std = 0.0;
    double drift_ppm = 0.0;
    double dropout_prob = 0.0;
};

struct StreamEvent {
    int source = SrcCamera;
    double mono_ts = 0.0;
    double hw_ts = 0.0;
    std::vector<double> payload;
};

inline const char* stream_source_name(int s) {
    switch (s) {
        case SrcCamera: return "camera";
        case SrcRobot: return "robot";
        case SrcControl: return "control";
    }
    throw RuntimeAbort("unknown stream source");
}

inline int stream_source_from_name(const std::string& s) {
    if (s == "camera") return SrcCamera;
    if (s == "robot") return SrcRobot;
    if (s == "control") return SrcControl;
    throw RuntimeAbort("unknown stream source name: " + s);
}

// Robot event payload layout: EE rotation (row-major, 9), world-frame wrench
// (force 3, torque 3), then the proprioceptive state.
constexpr int kRobotPayloadR = 0;
constexpr int kRobotPayloadWrench = 9;
constexpr int kRobotPayloadState = 15;

namespace detail {

inline std::vector<double> robot_payload_at(double t) {
    std::vector<double> p(19);
    double a = 0.1 * t;
    // Rz(a), row-major.
    p[0] = std::cos(a); p[1] = -std::sin(a); p[2] = 0.0;
    p[3] = std::sin(a); p[4] = std::cos(a);  p[5] = 0.0;
    p[6] = 0.0;         p[7] = 0.0;          p[8] = 1.0;
    // World wrench with enough excursion to exercise the clipping stage.
    p[9] = 18.0 + 6.0 * std::sin(40.0 * t);
    p[10] = 4.0 * std::cos(3.0 * t);
    p[11] = -9.8 + std::sin(t);
    p[12] = 0.5 * std::sin(t);
    p[13] = 2.4 * std::cos(3.0 * t);
    p[14] = 0.2;
    p[15] = std::sin(t);
    p[16] = std::cos(t);
    p[17] = t - std::floor(t);
    p[18] = 1.0;
    return p;
}

} // namespace detail

// Deterministic discrete-event simulation of the three acquisition threads.
// Tick k of a source fires at true time k/rate (never accumulated, so the
// 30/100 Hz grids coincide bitwise at common instants); jitter is N(0, std)
// on the firing time, dropouts are Bernoulli. A drifting source stamps its
// events with its own scaled clock, mono_ts = (1 - drift_ppm * 1e-6) * t, so
// positive drift makes the stamps lag the reference. Events merge in true
// arrival order (what a shared host observes); a lagging stamp therefore
// shows up as a growing alignment residual, not as a reordered log.
inline std::vector<StreamEvent> simulate_streams(const StreamSpec& camera,
                                                 const StreamSpec& robot,
                                                 const StreamSpec& control, double duration,
                                                 uint64_t seed) {
    const StreamSpec* specs[3] = {&camera, &robot, &control};
    struct Pending {
        StreamEvent ev;
        double arrival;
        int64_t k;
    };
    std::vector<Pending> all;
    for (int src = 0; src < 3; ++src) {
        const StreamSpec& sp = *specs[src];
        if (sp.rate_hz <= 0.0) throw ConfigError("simulate_streams: rate must be positive");
        if (sp.dropout_prob < 0.0 || sp.dropout_prob >= 1.0)
            throw ConfigError("simulate_streams: dropout_prob must lie in [0, 1)");
        Rng rng(derive_seed(seed, 0x73747265616dULL, static_cast<uint64_t>(src)));
        double scale = 1.0 - sp.drift_ppm * 1e-6;
        if (scale <= 0.0) throw ConfigError("simulate_streams: drift_ppm out of range");
        std::vector<Pending> block;
        for (int64_t k = 0;; ++k) {
            double grid = static_cast<double>(k) / sp.rate_hz;
            if (grid >= duration) break;
            double t = grid;
            if (sp.jitter_std > 0.0) t += sp.jitter_std * rng.normal();
            if (sp.dropout_prob > 0.0 && rng.bernoulli(sp.dropout_prob)) continue;
            Pending p;
            p.arrival = t;
            p.k = k;
            p.ev.source = src;
            p.ev.hw_ts = grid;
            p.ev.mono_ts = scale * t;
            if (src == SrcCamera) p.ev.payload = {static_cast<double>(k)};
            else if (src == SrcRobot) p.ev.payload = detail::robot_payload_at(grid);
            block.push_back(std::move(p));
        }
        // Jitter may swap neighbouring samples; arrival order is what the
        // host sees, and stamps are monotone in it.
        std::sort(block.begin(), block.end(), [](const Pending& a, const Pending& b) {
            return a.arrival < b.arrival || (a.arrival == b.arrival && a.k < b.k);
        });
        for (auto& p : block) all.push_back(std::move(p));
    }
    std::stable_sort(all.begin(), all.end(),
                     [](const Pending& a, const Pending& b) { return a.arrival < b.arrival; });
    std::vector<StreamEvent> events;
    events.reserve(all.size());
    for (auto& p : all) events.push_back(std::move(p.ev));
    return events;
}

// Session log: one record per line, `source,mono_ts,hw_ts,payload_base64`
// with timestamps printed at full precision and the payload as little-endian
// 64-bit floats.
inline void write_session_log(const std::string& path, const std::vector<StreamEvent>& events) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw RuntimeAbort("cannot open session log for writing: " + path);
    for (const auto& ev : events) {
        std::string line = stream_source_name(ev.source);
        line += ',';
        line += fmt_g17(ev.mono_ts);
        line += ',';
        line += fmt_g17(ev.hw_ts);
        line += ',';
        auto bytes = doubles_to_bytes(ev.payload);
        line += base64_encode(bytes.data(), bytes.size());
        line += '\n';
        std::fwrite(line.data(), 1, line.size(), f);
    }
    std::fclose(f);
}

inline std::vector<StreamEvent> read_session_log(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw RuntimeAbort("cannot open session log: " + path);
    std::string text;
    char buf[4096];
    size_t got;
    while ((got = std::fread(buf, 1, sizeof(buf), f)) > 0) text.append(buf, got);
    std::fclose(f);
    std::vector<StreamEvent> events;
    size_t pos = 0;
    int64_t lineno = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        ++lineno;
        if (line.empty()) continue;
        size_t c1 = line.find(',');
        size_t c2 = (c1 == std::string::npos) ? std::string::npos : line.find(',', c1 + 1);
        size_t c3 = (c2 == std::string::npos) ? std::string::npos : line.find(',', c2 + 1);
        if (c3 == std::string::npos)
            throw RuntimeAbort("session log: malformed record at line " + std::to_string(lineno));
        StreamEvent ev;
        ev.source = stream_source_from_name(line.substr(0, c1));
        try {
            ev.mono_ts = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
            ev.hw_ts = std::stod(line.substr(c2 + 1, c3 - c2 - 1));
        } catch (const std::exception&) {
            throw RuntimeAbort("session log: bad timestamp at line " + std::to_string(lineno));
        }
        ev.payload = bytes_to_doubles(base64_decode(line.substr(c3 + 1)));
        events.push_back(std::move(ev));
    }
    return events;
}

// Live conditioning ------------------------------------------------------

// The per-sample wrench chain: EE transform -> clip -> causal SG -> z-score.
// Dataset build, live sessions and replay all push samples through this one
// class, which is what makes offline reprocessing bit-identical.
class WrenchConditioner {
  public:
    WrenchConditioner(double f_max = 20.0, double tau_max = 2.0, int window = 5,
                      int order = 2, ZStats stats = {})
        : f_max_(f_max), tau_max_(tau_max), window_(window), order_(order),
          stats_(std::move(stats)) {
        detail::sg_validate(window, order);
        if (!stats_.empty() && stats_.mean.size() != 6)
            throw ConfigError("wrench conditioner: stats must cover 6 channels");
    }

    Wrench push(const Mat3& R, const Wrench& raw_world) {
        Wrench ee = clip_wrench(ee_frame_transform(raw_world, R), f_max_, tau_max_);
        double ch[6] = {ee.force[0], ee.force[1], ee.force[2],
                        ee.torque[0], ee.torque[1], ee.torque[2]};
        Wrench out;
        out.frame = Frame::EE;
        for (int c = 0; c < 6; ++c) {
            auto& h = hist_[c];
            h.push_back(ch[c]);
            if (static_cast<int>(h.size()) > window_) h.erase(h.begin());
            double smooth = sg_causal(h, window_, order_);
            double v = zscore_one(smooth, stats_, c);
            if (c < 3) out.force[c] = v;
            else out.torque[c - 3] = v;
        }
        return out;
    }

    void reset() {
        for (auto& h : hist_) h.clear();
    }

  private:
    double f_max_, tau_max_;
    int window_, order_;
    ZStats stats_;
    std::array<std::vector<double>, 6> hist_;
};

// Alignment --------------------------------------------------------------

struct RobotSample {
    Wrench wrench;                // EE frame, filtered, normalized
    std::vector<double> state;
};

struct AlignedFrame {
    double cam_ts_mono = 0.0;
    Tensor latent;
    Tensor depth;
    Wrench wrench;
    std::vector<double> state;
    double residual_cam = 0.0;    // |tick - camera mono_ts|
    double residual_robot = 0.0;  // |camera mono_ts - robot mono_ts|
};

struct TickOutcome {
    double tick_ts = 0.0;
    bool accepted = false;
    double residual = 0.0;        // deciding residual (inf when no data)
    std::string reason;           // empty when accepted
};

struct SessionConfig {
    double dt_max = kAlignDtMax;
    size_t cam_capacity = 64;
    size_t robot_capacity = 256;
    double f_max = 20.0;
    double tau_max = 2.0;
    int sg_window = 5;
    int sg_order = 2;
    ZStats wrench_stats;
};

struct SessionResult {
    std::vector<AlignedFrame> frames;
    std::vector<TickOutcome> ticks;
    size_t duplicates_dropped = 0;
    // Filtered wrench per accepted robot push, in arrival order; lets tests
    // compare live conditioning against offline reprocessing directly.
    std::vector<Wrench> robot_trace;
};

// Feed a time-ordered event log through the buffers; every control tick
// retrieves the nearest camera frame and aligns the robot stream to it. Both
// residuals must stay within dt_max for the frame to be emitted.
inline SessionResult run_session(const std::vector<StreamEvent>& events,
                                 const SessionConfig& cfg) {
    RingBuffer<std::vector<double>> cam_buf(cfg.cam_capacity);
    RingBuffer<RobotSample> robot_buf(cfg.robot_capacity);
    WrenchConditioner cond(cfg.f_max, cfg.tau_max, cfg.sg_window, cfg.sg_order,
                           cfg.wrench_stats);
    SessionResult res;
    for (const auto& ev : events) {
        if (ev.source == SrcCamera) {
            if (!cam_buf.push(ev.mono_ts, ev.payload, ev.hw_ts)) ++res.duplicates_dropped;
        } else if (ev.source == SrcRobot) {
            if (static_cast<int>(ev.payload.size()) < kRobotPayloadState)
                throw RuntimeAbort("run_session: short robot payload");
            Mat3 R;
            std::copy_n(ev.payload.begin() + kRobotPayloadR, 9, R.begin());
            Wrench raw;
            for (int i = 0; i < 3; ++i) {
                raw.force[i] = ev.payload[kRobotPayloadWrench + i];
                raw.torque[i] = ev.payload[kRobotPayloadWrench + 3 + i];
            }
            RobotSample s;
            s.wrench = cond.push(R, raw);
            s.state.assign(ev.payload.begin() + kRobotPayloadState, ev.payload.end());
            res.robot_trace.push_back(s.wrench);
            robot_buf.push(ev.mono_ts, std::move(s));
        } else {
            TickOutcome tk;
            tk.tick_ts = ev.mono_ts;
            auto cam = cam_buf.nearest(ev.mono_ts);
            if (!cam) {
                tk.residual = std::numeric_limits<double>::infinity();
                tk.reason = "no camera data";
                res.ticks.push_back(std::move(tk));
                continue;
            }
            if (cam->residual > cfg.dt_max) {
                tk.residual = cam->residual;
                tk.reason = "camera residual exceeds threshold";
                res.ticks.push_back(std::move(tk));
                continue;
            }
            auto rob = robot_buf.nearest(cam->mono_ts);
            if (!rob) {
                tk.residual = std::numeric_limits<double>::infinity();
                tk.reason = "no robot data";
                res.ticks.push_back(std::move(tk));
                continue;
            }
            if (rob->residual > cfg.dt_max) {
                tk.residual = rob->residual;
                tk.reason = "robot residual exceeds threshold";
                res.ticks.push_back(std::move(tk));
                continue;
            }
            AlignedFrame fr;
            fr.cam_ts_mono = cam->mono_ts;
            fr.latent = Tensor::from_vector({static_cast<int64_t>(cam->payload.size())},
                                            cam->payload);
            fr.depth = Tensor::zeros({0});
            fr.wrench = rob->payload.wrench;
            fr.state = rob->payload.state;
            fr.residual_cam = cam->residual;
            fr.residual_robot = rob->residual;
            tk.accepted = true;
            tk.residual = std::max(cam->residual, rob->residual);
            res.frames.push_back(std::move(fr));
            res.ticks.push_back(std::move(tk));
        }
    }
    return res;
}

inline bool aligned_frames_equal(const AlignedFrame& a, const AlignedFrame& b) {
    if (a.cam_ts_mono != b.cam_ts_mono) return false;
    if (a.latent.data() != b.latent.data() || a.depth.data() != b.depth.data()) return false;
    if (a.wrench.frame != b.wrench.frame || a.wrench.force != b.wrench.force ||
        a.wrench.torque != b.wrench.torque)
        return false;
    if (a.state != b.state) return false;
    return a.residual_cam == b.residual_cam && a.residual_robot == b.residual_robot;
}

} // namespace demuse
