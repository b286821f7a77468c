#include <catch2/catch_amalgamated.hpp>

#include "ctdn/nn.hpp"
#include "support/gradcheck.hpp"

using namespace ctdn;
using namespace ctdn::nn;
using ctdn::testing::fd_check;

namespace {

Tensor random_like(const Tensor& t, uint64_t seed) {
    Rng rng(seed);
    Tensor r = Tensor::zeros_like(t);
    rng.fill_normal(r);
    return r;
}

// Projection loss sum(y * r) turns backward(r) into a checkable gradient.
double proj_loss(const Tensor& y, const Tensor& r) {
    double s = 0;
    for (size_t i = 0; i < y.v.size(); ++i) s += double(y.v[i]) * r.v[i];
    return s;
}

std::vector<Param*> params_of(auto& layer) {
    std::vector<Param*> ps;
    layer.visit("p", [&](const std::string&, Param& p) { ps.push_back(&p); });
    return ps;
}

}  // namespace

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(42);
    Conv2d conv(3, 5, 3, 1, 1, rng);
    Tensor x(2, 5, 4, 3);
    rng.fill_normal(x);
    const Tensor r = random_like(conv.apply(x), 7);

    conv.forward(x);
    auto ps = params_of(conv);
    zero_grads(ps);
    const Tensor gx = conv.backward(r);

    auto loss = [&] { return proj_loss(conv.apply(x), r); };
    CHECK(fd_check(x, gx, loss).ok);
    CHECK(fd_check(conv.w.w, conv.w.g, loss).ok);
    CHECK(fd_check(conv.b.w, conv.b.g, loss).ok);
}

TEST_CASE("strided conv2d gradients") {
    Rng rng(43);
    Conv2d conv(4, 6, 3, 2, 1, rng);
    Tensor x(1, 6, 6, 4);
    rng.fill_normal(x);
    const Tensor r = random_like(conv.apply(x), 11);
    conv.forward(x);
    auto ps = params_of(conv);
    zero_grads(ps);
    const Tensor gx = conv.backward(r);
    auto loss = [&] { return proj_loss(conv.apply(x), r); };
    CHECK(fd_check(x, gx, loss).ok);
    CHECK(fd_check(conv.w.w, conv.w.g, loss).ok);
}

TEST_CASE("groupnorm gradients") {
    Rng rng(44);
    GroupNorm gn(6, 3);
    Tensor x(2, 3, 3, 6);
    rng.fill_normal(x);
    const Tensor r = random_like(gn.apply(x), 13);
    gn.forward(x);
    auto ps = params_of(gn);
    zero_grads(ps);
    const Tensor gx = gn.backward(r);
    auto loss = [&] { return proj_loss(gn.apply(x), r); };
    CHECK(fd_check(x, gx, loss, 2e-3).ok);
    CHECK(fd_check(gn.gamma.w, gn.gamma.g, loss, 2e-3).ok);
    CHECK(fd_check(gn.beta.w, gn.beta.g, loss, 2e-3).ok);
}

TEST_CASE("silu and tanh gradients") {
    Rng rng(45);
    Tensor x(1, 2, 2, 4);
    rng.fill_normal(x);
    SiLU act;
    const Tensor r = random_like(x, 17);
    act.forward(x);
    const Tensor gx = act.backward(r);
    auto loss = [&] { return proj_loss(act.apply(x), r); };
    CHECK(fd_check(x, gx, loss).ok);

    Tanh th;
    th.forward(x);
    const Tensor gt = th.backward(r);
    auto loss_t = [&] { return proj_loss(th.apply(x), r); };
    CHECK(fd_check(x, gt, loss_t).ok);
}

TEST_CASE("linear gradients") {
    Rng rng(46);
    Linear lin(5, 7, rng);
    Tensor x(1, 3, 1, 5);
    rng.fill_normal(x);
    const Tensor r = random_like(lin.apply(x), 19);
    lin.forward(x);
    auto ps = params_of(lin);
    zero_grads(ps);
    const Tensor gx = lin.backward(r);
    auto loss = [&] { return proj_loss(lin.apply(x), r); };
    CHECK(fd_check(x, gx, loss).ok);
    CHECK(fd_check(lin.w.w, lin.w.g, loss).ok);
    CHECK(fd_check(lin.b.w, lin.b.g, loss).ok);
}

TEST_CASE("self-attention gradients") {
    Rng rng(47);
    Attention attn(4, 4, 2, true, rng);
    Tensor x(2, 2, 3, 4);
    rng.fill_normal(x);
    const Tensor r = random_like(attn.apply(x), 23);
    attn.forward(x);
    auto ps = params_of(attn);
    zero_grads(ps);
    const Tensor gx = attn.backward(r);
    auto loss = [&] { return proj_loss(attn.apply(x), r); };
    CHECK(fd_check(x, gx, loss).ok);
    for (auto* p : ps) CHECK(fd_check(p->w, p->g, loss).ok);
}

TEST_CASE("cross-attention gradients flow into context") {
    Rng rng(48);
    Attention attn(4, 6, 1, false, rng);
    Tensor x(1, 2, 2, 4);
    Tensor ctx(1, 5, 1, 6);
    rng.fill_normal(x);
    rng.fill_normal(ctx);
    const Tensor r = random_like(attn.apply(x, ctx), 29);
    attn.forward(x, ctx);
    auto ps = params_of(attn);
    zero_grads(ps);
    Tensor gctx = Tensor::zeros_like(ctx);
    const Tensor gx = attn.backward(r, &gctx);
    auto loss = [&] { return proj_loss(attn.apply(x, ctx), r); };
    CHECK(fd_check(x, gx, loss).ok);
    CHECK(fd_check(ctx, gctx, loss).ok);
    for (auto* p : ps) CHECK(fd_check(p->w, p->g, loss).ok);
}

TEST_CASE("upsample gradients") {
    Rng rng(49);
    Upsample2x up;
    Tensor x(1, 3, 2, 2);
    rng.fill_normal(x);
    const Tensor r = random_like(up.apply(x), 31);
    up.forward(x);
    const Tensor gx = up.backward(r);
    auto loss = [&] { return proj_loss(up.apply(x), r); };
    CHECK(fd_check(x, gx, loss).ok);
}

TEST_CASE("resblock gradients with timestep embedding") {
    Rng rng(50);
    ResBlock rb(3, 5, 6, rng);
    Tensor x(2, 4, 4, 3);
    Tensor temb(2, 1, 1, 6);
    rng.fill_normal(x);
    rng.fill_normal(temb);
    const Tensor r = random_like(rb.apply(x, &temb), 37);
    rb.forward(x, &temb);
    auto ps = params_of(rb);
    zero_grads(ps);
    Tensor gtemb = Tensor::zeros_like(temb);
    const Tensor gx = rb.backward(r, &gtemb);
    auto loss = [&] { return proj_loss(rb.apply(x, &temb), r); };
    CHECK(fd_check(x, gx, loss).ok);
    CHECK(fd_check(temb, gtemb, loss).ok);
    for (auto* p : ps) CHECK(fd_check(p->w, p->g, loss, 5e-3, 3e-2, 3e-3).ok);
}

TEST_CASE("concat/split round-trip") {
    Rng rng(51);
    Tensor a(1, 2, 2, 3), b(1, 2, 2, 2);
    rng.fill_normal(a);
    rng.fill_normal(b);
    const Tensor y = concat_channels(a, b);
    auto [a2, b2] = split_channels(y, 3);
    REQUIRE(a2.v == a.v);
    REQUIRE(b2.v == b.v);
}

TEST_CASE("adam decreases a quadratic") {
    Rng rng(52);
    Param p;
    p.init(1, 1, 1, 8);
    rng.fill_normal(p.w);
    std::vector<Param*> ps{&p};
    Adam opt;
    opt.lr = 0.05;
    double first = 0;
    for (int it = 0; it < 200; ++it) {
        zero_grads(ps);
        double loss = 0;
        for (size_t i = 0; i < p.w.v.size(); ++i) {
            loss += 0.5 * double(p.w.v[i]) * p.w.v[i];
            p.g.v[i] = p.w.v[i];
        }
        if (it == 0) first = loss;
        opt.step(ps);
    }
    double last = 0;
    for (float v : p.w.v) last += 0.5 * double(v) * v;
    REQUIRE(last < first * 0.01);
}

TEST_CASE("inference path is cache-free and matches forward") {
    Rng rng(53);
    Conv2d conv(2, 3, 3, 1, 1, rng);
    Tensor x(1, 4, 4, 2);
    rng.fill_normal(x);
    const Tensor y1 = conv.forward(x);
    const Tensor y2 = conv.apply(x);
    REQUIRE(y1.v == y2.v);
}
