#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "demuse/adamn.hpp"

using namespace demuse;

namespace {

double silu_s(double x) { return x / (1.0 + std::exp(-x)); }

// y = W2 * silu(W1 x + b1) + b2, all scalar loops
std::vector<double> mlp2_oracle(const std::vector<double>& x, const std::vector<double>& w1,
                                const std::vector<double>& b1, const std::vector<double>& w2,
                                const std::vector<double>& b2, int64_t D, int64_t out) {
    std::vector<double> h(D), y(out);
    for (int64_t i = 0; i < D; ++i) {
        double a = b1[i];
        for (int64_t j = 0; j < D; ++j) a += w1[i * D + j] * x[j];
        h[i] = silu_s(a);
    }
    for (int64_t i = 0; i < out; ++i) {
        double a = b2[i];
        for (int64_t j = 0; j < D; ++j) a += w2[i * D + j] * h[j];
        y[i] = a;
    }
    return y;
}

std::vector<double> ln_oracle(const std::vector<double>& row, double eps = 1e-6) {
    int64_t n = static_cast<int64_t>(row.size());
    double m = 0;
    for (double v : row) m += v;
    m /= n;
    double var = 0;
    for (double v : row) var += (v - m) * (v - m);
    var /= n;
    std::vector<double> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = (row[i] - m) / std::sqrt(var + eps);
    return out;
}

Tensor randt(std::vector<int64_t> shape, Rng& rng) {
    Tensor t = Tensor::zeros(shape);
    for (auto& v : t.data()) v = rng.normal();
    return t;
}

} // namespace

TEST_CASE("context is deterministic and validates its inputs") {
    ParamStore ps(3);
    ContextNet ctx(16, 2, 1000, ps);
    NoGradGuard ng;
    Tensor a = ctx.forward({1}, {400});
    Tensor b = ctx.forward({1}, {400});
    CHECK(a.data() == b.data());
    Tensor c = ctx.forward({1}, {401});
    CHECK(a.data() != c.data());
    CHECK_THROWS_AS(ctx.forward({2}, {400}), ConfigError);
    CHECK_THROWS_AS(ctx.forward({-1}, {400}), ConfigError);
    CHECK_THROWS_AS(ctx.forward({0}, {1000}), RuntimeAbort);
    CHECK_THROWS_AS(ctx.forward({0}, {-1}), RuntimeAbort);
}

TEST_CASE("context with zero weights collapses to the output bias") {
    ParamStore ps(4);
    ContextNet ctx(8, 3, 1000, ps);
    std::fill(ps.by_name("ctx.w1").value.data().begin(), ps.by_name("ctx.w1").value.data().end(), 0.0);
    std::fill(ps.by_name("ctx.w2").value.data().begin(), ps.by_name("ctx.w2").value.data().end(), 0.0);
    Rng rng(5);
    for (auto& v : ps.by_name("ctx.b2").value.data()) v = rng.normal();
    NoGradGuard ng;
    Tensor a = ctx.forward({0}, {17});
    Tensor b = ctx.forward({2}, {903});
    CHECK(a.data() == ps.by_name("ctx.b2").value.data());
    CHECK(a.data() == b.data());
}

TEST_CASE("timestep sinusoids are pairwise distinct over the full ladder") {
    int64_t D = 64;
    std::vector<std::vector<double>> e;
    e.reserve(1000);
    for (int64_t k = 0; k < 1000; ++k) e.push_back(sinusoidal_embedding(double(k), D));
    double min_d2 = 1e300;
    for (int64_t i = 0; i < 1000; ++i)
        for (int64_t j = i + 1; j < 1000; ++j) {
            double d2 = 0;
            for (int64_t c = 0; c < D; ++c) {
                double df = e[i][c] - e[j][c];
                d2 += df * df;
            }
            if (d2 < min_d2) min_d2 = d2;
        }
    CHECK(min_d2 > 1e-8);
}

TEST_CASE("identity configuration reduces to plain layer norm") {
    int64_t D = 12;
    ParamStore ps(6);
    ContextNet ctx(D, 1, 1000, ps);
    AdaMNLayer layer(D, 4, ps, "ad.");
    for (int m = 0; m < 4; ++m) {
        auto& w2 = ps.by_name("ad.e" + std::to_string(m) + ".w2").value.data();
        std::fill(w2.begin(), w2.end(), 0.0); // phi output collapses to (1, 0)
    }
    Rng rng(7);
    Tensor h = randt({2 * 5, D}, rng);
    std::vector<int> ids = {0, 1, 2, 3, 0, 0, 1, 2, 3, 0};
    NoGradGuard ng;
    Tensor c = ctx.forward({0, 0}, {10, 700});
    Tensor out = layer.forward(h, ids, c);
    Tensor ln = layer_norm_rows(h);
    REQUIRE(out.size() == ln.size());
    for (int64_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == ln.data()[i]);
}

TEST_CASE("experts bifurcate equal tokens with different modalities") {
    int64_t D = 10;
    ParamStore ps(8);
    ContextNet ctx(D, 1, 1000, ps);
    AdaMNLayer layer(D, 4, ps, "ad.");
    Rng rng(9);
    std::vector<double> row(D);
    for (auto& v : row) v = rng.normal();
    Tensor h = Tensor::zeros({2, D});
    std::copy(row.begin(), row.end(), h.data().begin());
    std::copy(row.begin(), row.end(), h.data().begin() + D);
    NoGradGuard ng;
    Tensor c = ctx.forward({0}, {55});
    Tensor out = layer.forward(h, {0, 2}, c);
    double diff = 0;
    for (int64_t i = 0; i < D; ++i)
        diff = std::max(diff, std::fabs(out.data()[i] - out.data()[D + i]));
    CHECK(diff > 1e-6);

    // same modality instead: identical rows in, identical rows out
    Tensor out2 = layer.forward(h, {2, 2}, c);
    for (int64_t i = 0; i < D; ++i) CHECK(out2.data()[i] == out2.data()[D + i]);
}

TEST_CASE("permutation equivariance over tokens") {
    int64_t D = 8, N = 7;
    ParamStore ps(10);
    ContextNet ctx(D, 1, 1000, ps);
    AdaMNLayer layer(D, 4, ps, "ad.");
    Rng rng(11);
    Tensor h = randt({N, D}, rng);
    std::vector<int> ids = {0, 2, 1, 3, 0, 2, 0};
    std::vector<int64_t> perm = {4, 0, 6, 2, 5, 1, 3};
    NoGradGuard ng;
    Tensor c = ctx.forward({0}, {123});
    Tensor base = layer.forward(h, ids, c);

    Tensor hp = take_rows(h, perm);
    std::vector<int> idsp(N);
    for (int64_t i = 0; i < N; ++i) idsp[i] = ids[perm[i]];
    Tensor outp = layer.forward(hp, idsp, c);
    for (int64_t i = 0; i < N; ++i)
        for (int64_t d = 0; d < D; ++d)
            CHECK(outp.data()[i * D + d] == base.data()[perm[i] * D + d]);
}

TEST_CASE("forward matches the literal per-token oracle") {
    int64_t D = 14, N = 6, B = 2;
    ParamStore ps(12);
    ContextNet ctx(D, 3, 1000, ps);
    AdaMNLayer layer(D, 4, ps, "ad.");
    Rng rng(13);
    Tensor h = randt({B * N, D}, rng);
    std::vector<int> pattern = {0, 1, 2, 3, 0, 2};
    std::vector<int> ids;
    for (int64_t b = 0; b < B; ++b) ids.insert(ids.end(), pattern.begin(), pattern.end());
    NoGradGuard ng;
    Tensor c = ctx.forward({1, 2}, {42, 977});
    Tensor out = layer.forward(h, ids, c);

    auto P = [&](const std::string& n) -> const std::vector<double>& {
        return ps.by_name(n).value.data();
    };
    for (int64_t b = 0; b < B; ++b) {
        std::vector<double> cb(c.data().begin() + b * D, c.data().begin() + (b + 1) * D);
        // shared modulation: silu(c) through the zero-initialized head
        std::vector<double> sc(D);
        for (int64_t i = 0; i < D; ++i) sc[i] = silu_s(cb[i]);
        std::vector<double> mod(2 * D);
        for (int64_t i = 0; i < 2 * D; ++i) {
            double a = P("ad.mod.b")[i];
            for (int64_t j = 0; j < D; ++j) a += P("ad.mod.w")[i * D + j] * sc[j];
            mod[i] = a;
        }
        for (int64_t t = 0; t < N; ++t) {
            int m = pattern[t];
            std::string e = "ad.e" + std::to_string(m) + ".";
            auto gb = mlp2_oracle(cb, P(e + "w1"), P(e + "b1"), P(e + "w2"), P(e + "b2"), D,
                                  2 * D);
            std::vector<double> row(h.data().begin() + (b * N + t) * D,
                                    h.data().begin() + (b * N + t + 1) * D);
            auto ln = ln_oracle(row);
            for (int64_t d = 0; d < D; ++d) {
                double tilde = gb[d] * ln[d] + gb[D + d];
                double expect = (1.0 + mod[d]) * tilde + mod[D + d];
                CHECK(out.data()[(b * N + t) * D + d] ==
                      doctest::Approx(expect).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("zero-initialized modulation path contributes nothing at start") {
    int64_t D = 8;
    ParamStore ps(14);
    ContextNet ctx(D, 1, 1000, ps);
    AdaMNLayer layer(D, 4, ps, "ad.");
    const auto& mw = ps.by_name("ad.mod.w").value.data();
    const auto& mb = ps.by_name("ad.mod.b").value.data();
    for (double v : mw) CHECK(v == 0.0);
    for (double v : mb) CHECK(v == 0.0);
}

TEST_CASE("unregistered modality raises an error naming the id") {
    int64_t D = 8;
    ParamStore ps(15);
    ContextNet ctx(D, 1, 1000, ps);
    AdaMNLayer layer(D, 4, ps, "ad.");
    Rng rng(16);
    Tensor h = randt({2, D}, rng);
    NoGradGuard ng;
    Tensor c = ctx.forward({0}, {5});
    try {
        layer.forward(h, {0, 7}, c);
        FAIL("expected an error");
    } catch (const RuntimeAbort& e) {
        CHECK(std::string(e.what()).find("7") != std::string::npos);
    }
        CHECK_THROWS_AS(layer.forward(h, {0}, c), RuntimeAbort);
}

TEST_CASE("mismatched modality pattern across batch is rejected") {
    int64_t D = 8;
    ParamStore ps(17);
    ContextNet ctx(D, 1, 1000, ps);
    AdaMNLayer layer(D, 4, ps, "ad.");
    Rng rng(18);
    Tensor h = randt({4, D}, rng);
    NoGradGuard ng;
    Tensor c = ctx.forward({0, 0}, {5, 6});
    CHECK_THROWS_AS(layer.forward(h, {0, 1, 1, 0}, c), RuntimeAbort);
}

TEST_CASE("gradients reach an expert only when its modality is present") {
    int64_t D = 8;
    ParamStore ps(19);
    ContextNet ctx(D, 2, 1000, ps);
    AdaMNLayer layer(D, 4, ps, "ad.");
    Rng rng(20);
    Tensor h = randt({4, D}, rng);
    h.node()->requires_grad = false;
    std::vector<int> ids = {0, 2, 1, 0}; // modality 3 absent
    ps.zero_grad();
    Tensor c = ctx.forward({1}, {321});
    Tensor loss = mean(layer.forward(h, ids, c));
    loss.backward();
    auto norm_of = [&](const std::string& n) {
        double s = 0;
        for (double g : ps.by_name(n).value.grad()) s += g * g;
        return s;
    };
    CHECK(norm_of("ad.e3.w1") == 0.0);
    CHECK(norm_of("ad.e3.w2") == 0.0);
    CHECK(norm_of("ad.e3.b2") == 0.0);
    CHECK(norm_of("ad.e0.w2") > 0.0);
    CHECK(norm_of("ad.e1.w2") > 0.0);
    CHECK(norm_of("ad.e2.w2") > 0.0);
    CHECK(norm_of("ctx.task_emb") > 0.0);
}

TEST_CASE("layer gradients pass finite differences") {
    int64_t D = 6, N = 5, B = 2;
    ParamStore ps(21);
    ContextNet ctx(D, 2, 1000, ps);
    AdaMNLayer layer(D, 4, ps, "ad.");
    Rng rng(22);
    Tensor h = randt({B * N, D}, rng);
    h.node()->requires_grad = false;
    std::vector<int> ids;
    std::vector<int> pattern = {0, 1, 2, 3, 0};
    for (int64_t b = 0; b < B; ++b) ids.insert(ids.end(), pattern.begin(), pattern.end());
    Tensor target = randt({B * N, D}, rng);
    target.node()->requires_grad = false;
    auto loss_fn = [&]() {
        Tensor c = ctx.forward({0, 1}, {31, 870});
        return mse(layer.forward(h, ids, c), target);
    };
    auto rep = finite_difference_check(loss_fn, ps, 200, 23);
    INFO("worst ", rep.worst, " err ", rep.max_rel_err);
    CHECK(rep.pass);
}
