#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "text2ct/nn.hpp"
#include "text2ct/tensor.hpp"

using namespace text2ct;

namespace {

// Direct O(n^6) convolution oracle, same-padding semantics.
Tensor conv3d_naive(const Tensor& x, const nn::Conv3d& conv) {
    const int64_t cin = x.dim(0), X = x.dim(1), Y = x.dim(2), Z = x.dim(3);
    const int k = conv.k, s = conv.stride, p = conv.k / 2;
    const int64_t Xo = nn::Conv3d::out_extent(X, k, s);
    const int64_t Yo = nn::Conv3d::out_extent(Y, k, s);
    const int64_t Zo = nn::Conv3d::out_extent(Z, k, s);
    Tensor y = Tensor::zeros({conv.cout, Xo, Yo, Zo});
    for (int co = 0; co < conv.cout; co++)
        for (int64_t ox = 0; ox < Xo; ox++)
            for (int64_t oy = 0; oy < Yo; oy++)
                for (int64_t oz = 0; oz < Zo; oz++) {
                    double acc = conv.has_bias ? conv.bias.w.at(co) : 0.0;
                    for (int64_t ci = 0; ci < cin; ci++)
                        for (int dx = 0; dx < k; dx++)
                            for (int dy = 0; dy < k; dy++)
                                for (int dz = 0; dz < k; dz++) {
                                    const int64_t ix = ox * s + dx - p;
                                    const int64_t iy = oy * s + dy - p;
                                    const int64_t iz = oz * s + dz - p;
                                    if (ix < 0 || ix >= X || iy < 0 || iy >= Y || iz < 0 ||
                                        iz >= Z)
                                        continue;
                                    const float w = conv.weight.w.at(
                                        co * conv.weight.w.dim(1) +
                                        ((ci * k + dx) * k + dy) * k + dz);
                                    acc += double(w) * x.at(((ci * X + ix) * Y + iy) * Z + iz);
                                }
                    y.at(((int64_t(co) * Xo + ox) * Yo + oy) * Zo + oz) =
                        static_cast<float>(acc);
                }
    return y;
}

// Central-difference gradient of `loss` w.r.t. param element.
double numeric_grad(nn::Param& p, int64_t idx, const std::function<double()>& loss,
                    float h = 1e-3f) {
    const float orig = p.w.at(idx);
    p.w.at(idx) = orig + h;
    const double lp = loss();
    p.w.at(idx) = orig - h;
    const double lm = loss();
    p.w.at(idx) = orig;
    return (lp - lm) / (2.0 * double(h));
}

double rel_err(double a, double b) {
    const double d = std::fabs(a - b);
    const double m = std::max(std::fabs(a), std::fabs(b));
    return m > 1e-12 ? d / m : d;
}

}  // namespace

TEST_CASE("conv3d matches the direct convolution oracle") {
    Rng rng(42);
    for (auto [cin, cout, k, s, X, Y, Z] :
         {std::tuple{1, 3, 3, 1, 7, 6, 5}, std::tuple{2, 4, 5, 1, 6, 6, 6},
          std::tuple{3, 2, 3, 2, 8, 6, 4}, std::tuple{2, 2, 1, 1, 5, 5, 5}}) {
        nn::Conv3d conv;
        conv.init("t", cin, cout, k, s, rng);
        for (int64_t i = 0; i < conv.bias.w.numel(); i++)
            conv.bias.w.at(i) = rng.normalf() * 0.1f;
        Tensor x = Tensor::randn({cin, X, Y, Z}, rng);
        Tensor got = conv.forward(x);
        Tensor want = conv3d_naive(x, conv);
        CHECK(max_abs_diff(got, want) < 2e-4f);
    }
}

TEST_CASE("conv3d backward matches finite differences") {
    Rng rng(7);
    nn::Conv3d conv;
    conv.init("t", 2, 3, 3, 1, rng);
    Tensor x = Tensor::randn({2, 5, 4, 4}, rng);
    Tensor target = Tensor::randn(conv.out_dims(x), rng);

    auto loss_fn = [&] {
        Tensor y = conv.forward(x);
        double s = 0.0;
        for (int64_t i = 0; i < y.numel(); i++) {
            const double d = y.at(i) - target.at(i);
            s += d * d;
        }
        return s / y.numel();
    };
    conv.weight.zero_grad();
    conv.bias.zero_grad();
    Tensor y = conv.forward(x);
    Tensor dy(y.dims());
    for (int64_t i = 0; i < y.numel(); i++)
        dy.at(i) = 2.0f * (y.at(i) - target.at(i)) / y.numel();
    Tensor dx = conv.backward(x, dy);

    Rng pick(3);
    for (int trial = 0; trial < 10; trial++) {
        const int64_t wi = static_cast<int64_t>(pick.uniform_int(conv.weight.w.numel()));
        CHECK(rel_err(conv.weight.g.at(wi), numeric_grad(conv.weight, wi, loss_fn)) < 1e-2);
    }
    // dx via finite differences on a few inputs
    for (int trial = 0; trial < 5; trial++) {
        const int64_t xi = static_cast<int64_t>(pick.uniform_int(x.numel()));
        const float orig = x.at(xi);
        const float h = 1e-3f;
        x.at(xi) = orig + h;
        const double lp = loss_fn();
        x.at(xi) = orig - h;
        const double lm = loss_fn();
        x.at(xi) = orig;
        CHECK(rel_err(dx.at(xi), (lp - lm) / (2.0 * h)) < 1e-2);
    }
}

TEST_CASE("groupnorm backward matches finite differences") {
    Rng rng(11);
    nn::GroupNorm gn;
    gn.init("g", 4, 2);
    for (int i = 0; i < 4; i++) {
        gn.gamma.w.at(i) = 1.0f + 0.3f * rng.normalf();
        gn.beta.w.at(i) = 0.2f * rng.normalf();
    }
    Tensor x = Tensor::randn({4, 3, 3, 2}, rng);
    Tensor target = Tensor::randn(x.dims(), rng);

    auto loss_fn = [&] {
        nn::GroupNorm::Saved sv;
        Tensor y = gn.forward(x, sv);
        double s = 0.0;
        for (int64_t i = 0; i < y.numel(); i++) {
            const double d = y.at(i) - target.at(i);
            s += d * d;
        }
        return s / y.numel();
    };
    gn.gamma.zero_grad();
    gn.beta.zero_grad();
    nn::GroupNorm::Saved sv;
    Tensor y = gn.forward(x, sv);
    Tensor dy(y.dims());
    for (int64_t i = 0; i < y.numel(); i++) dy.at(i) = 2.0f * (y.at(i) - target.at(i)) / y.numel();
    Tensor dx = gn.backward(x, sv, dy);

    for (int i = 0; i < 4; i++) {
        CHECK(rel_err(gn.gamma.g.at(i), numeric_grad(gn.gamma, i, loss_fn)) < 1e-2);
        CHECK(rel_err(gn.beta.g.at(i), numeric_grad(gn.beta, i, loss_fn)) < 1e-2);
    }
    Rng pick(5);
    for (int trial = 0; trial < 6; trial++) {
        const int64_t xi = static_cast<int64_t>(pick.uniform_int(x.numel()));
        const float orig = x.at(xi);
        const float h = 1e-3f;
        x.at(xi) = orig + h;
        const double lp = loss_fn();
        x.at(xi) = orig - h;
        const double lm = loss_fn();
        x.at(xi) = orig;
        CHECK(rel_err(dx.at(xi), (lp - lm) / (2.0 * h)) < 2e-2);
    }
}

TEST_CASE("linear and embedding backward") {
    Rng rng(13);
    nn::Linear lin;
    lin.init("l", 6, 4, rng);
    Tensor x = Tensor::randn({3, 6}, rng);
    Tensor target = Tensor::randn({3, 4}, rng);
    auto loss_fn = [&] {
        Tensor y = lin.forward(x);
        double s = 0.0;
        for (int64_t i = 0; i < y.numel(); i++) {
            const double d = y.at(i) - target.at(i);
            s += d * d;
        }
        return s;
    };
    lin.weight.zero_grad();
    lin.bias.zero_grad();
    Tensor y = lin.forward(x);
    Tensor dy(y.dims());
    for (int64_t i = 0; i < y.numel(); i++) dy.at(i) = 2.0f * (y.at(i) - target.at(i));
    lin.backward(x, dy);
    for (int64_t wi : {0L, 5L, 11L, 23L})
        CHECK(rel_err(lin.weight.g.at(wi), numeric_grad(lin.weight, wi, loss_fn)) < 1e-2);

    nn::Embedding emb;
    emb.init("e", 10, 4, rng);
    std::vector<int> ids{1, 3, 3, 7};
    Tensor out = emb.forward(ids);
    CHECK(out.dim(0) == 4);
    emb.table.zero_grad();
    Tensor d = Tensor::full({4, 4}, 1.0f);
    emb.backward(ids, d);
    CHECK(emb.table.g.at(3 * 4 + 0) == doctest::Approx(2.0f));  // id 3 hit twice
    CHECK(emb.table.g.at(1 * 4 + 0) == doctest::Approx(1.0f));
}

TEST_CASE("upsample nearest round trip and backward consistency") {
    Rng rng(17);
    Tensor x = Tensor::randn({2, 3, 4, 2}, rng);
    Tensor y = nn::upsample_nearest2x(x);
    CHECK(y.dims() == std::vector<int64_t>{2, 6, 8, 4});
    for (int64_t c = 0; c < 2; c++)
        CHECK(y.at(((c * 6 + 1) * 8 + 3) * 4 + 1) == x.at(((c * 3 + 0) * 4 + 1) * 2 + 0));
    Tensor dy = Tensor::full(y.dims(), 1.0f);
    Tensor dx = nn::upsample_nearest2x_backward(dy);
    CHECK(dx.at(0) == doctest::Approx(8.0f));
}

TEST_CASE("adam reduces a quadratic and poly lr hits zero") {
    nn::Param p;
    p.name = "p";
    p.init_shape({4});
    for (int i = 0; i < 4; i++) p.w.at(i) = 2.0f + i;
    nn::Adam opt({&p}, 0.05f);
    for (int step = 0; step < 400; step++) {
        opt.zero_grad();
        for (int i = 0; i < 4; i++) p.g.at(i) = 2.0f * p.w.at(i);
        opt.step();
    }
    for (int i = 0; i < 4; i++) CHECK(std::fabs(p.w.at(i)) < 0.05f);

    CHECK(nn::poly_lr(1e-3f, 100, 100, 1.0f) == doctest::Approx(0.0f));
    CHECK(nn::poly_lr(1e-3f, 0, 100, 1.0f) == doctest::Approx(1e-3f));
    CHECK(nn::poly_lr(1e-3f, 50, 100, 1.0f) == doctest::Approx(5e-4f));
}

TEST_CASE("memory tracking sees tensor lifetimes") {
    memtrack::reset_peak();
    const size_t before = memtrack::current_bytes();
    {
        Tensor t({64, 64, 64});
        CHECK(memtrack::current_bytes() >= before + 64 * 64 * 64 * 4);
    }
    CHECK(memtrack::current_bytes() == before);
    CHECK(memtrack::peak_bytes() >= before + 64 * 64 * 64 * 4);
}
