#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "redec/gradcheck.hpp"
#include "redec/ops.hpp"
#include "redec/optim.hpp"
#include "redec/rng.hpp"

using namespace redec;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool rg = false) {
    Tensor t = Tensor::zeros(std::move(shape), rg);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

// Independent nested-loop cross-correlation, kept free of the im2col path.
Tensor conv2d_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int F = w.dim(0), k = w.dim(2);
    const int OH = (H + 2 * pad - k) / stride + 1, OW = (W + 2 * pad - k) / stride + 1;
    Tensor y = Tensor::zeros({B, F, OH, OW});
    for (int bi = 0; bi < B; ++bi)
        for (int f = 0; f < F; ++f)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    double acc = b.data()[f];
                    for (int c = 0; c < C; ++c)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += x.data()[((bi * C + c) * H + iy) * W + ix] *
                                       w.data()[((f * C + c) * k + ky) * k + kx];
                            }
                    y.data()[((bi * F + f) * OH + oy) * OW + ox] = acc;
                }
    return y;
}

}  // namespace

TEST_CASE("conv2d scalar product") {
    Tensor x = Tensor::from({1, 1, 1, 1}, {2.0});
    Tensor w = Tensor::from({1, 1, 1, 1}, {3.0});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv2d(nullptr, x, w, b, 1, 0);
    CHECK(y.item() == doctest::Approx(6.0));
}

TEST_CASE("conv2d overlap counting with padding") {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor b = Tensor::zeros({1});
    Tensor y = conv2d(nullptr, x, w, b, 1, 1);
    CHECK(y.data()[4] == doctest::Approx(9.0));   // center
    CHECK(y.data()[1] == doctest::Approx(6.0));   // edge midpoint
    CHECK(y.data()[0] == doctest::Approx(4.0));   // corner
}

TEST_CASE("conv2d matches nested-loop oracle") {
    Rng rng(42);
    Tensor x = rand_tensor({1, 2, 5, 5}, rng);
    Tensor w = rand_tensor({3, 2, 3, 3}, rng);
    Tensor b = rand_tensor({3}, rng);
    for (int stride : {1, 2}) {
        for (int pad : {0, 1}) {
            if ((5 + 2 * pad - 3) % stride != 0) continue;
            Tensor y = conv2d(nullptr, x, w, b, stride, pad);
            Tensor ref = conv2d_oracle(x, w, b, stride, pad);
            REQUIRE(y.shape() == ref.shape());
            for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("conv2d padding correctness on zero input") {
    Rng rng(7);
    Tensor x = Tensor::zeros({2, 3, 6, 6});
    Tensor w = rand_tensor({4, 3, 3, 3}, rng);
    Tensor b = Tensor::zeros({4});
    Tensor y = conv2d(nullptr, x, w, b, 1, 1);
    CHECK(y.shape() == Shape{2, 4, 6, 6});
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
}

TEST_CASE("conv2d contract errors") {
    Tensor x = Tensor::zeros({1, 2, 4, 4});
    Tensor w = Tensor::zeros({1, 3, 3, 3});  // channel mismatch
    Tensor b = Tensor::zeros({1});
    CHECK_THROWS_AS(conv2d(nullptr, x, w, b, 1, 1), ContractError);
    Tensor w2 = Tensor::zeros({1, 2, 3, 3});
    CHECK_THROWS_AS(conv2d(nullptr, x, w2, b, 2, 0), ConfigError);  // (4-3)%2 != 0
}

TEST_CASE("maxpool forced maximum and tie-break") {
    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    auto [y, idx] = maxpool_with_indices(nullptr, x, 2);
    CHECK(y.item() == doctest::Approx(4.0));
    CHECK(idx.index[0] == 3);

    Tensor ties = Tensor::full({1, 1, 2, 2}, 5.0);
    auto [y2, idx2] = maxpool_with_indices(nullptr, ties, 2);
    CHECK(y2.item() == doctest::Approx(5.0));
    CHECK(idx2.index[0] == 0);  // first-wins
}

TEST_CASE("maxpool matches per-window scan oracle") {
    Rng rng(9);
    Tensor x = rand_tensor({1, 1, 8, 8}, rng);
    auto [y, idx] = maxpool_with_indices(nullptr, x, 2);
    for (int oy = 0; oy < 4; ++oy)
        for (int ox = 0; ox < 4; ++ox) {
            double best = -1e300;
            for (int wy = 0; wy < 2; ++wy)
                for (int wx = 0; wx < 2; ++wx) best = std::max(best, x.data()[(oy * 2 + wy) * 8 + ox * 2 + wx]);
            CHECK(y.data()[oy * 4 + ox] == best);  // exact copy of the window max
        }
    Tensor bad = Tensor::zeros({1, 1, 5, 5});
    CHECK_THROWS_AS(maxpool_with_indices(nullptr, bad, 2), ConfigError);
}

TEST_CASE("unpool placement and round trip") {
    Tensor base = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    auto [pooled, idx] = maxpool_with_indices(nullptr, base, 2);
    Tensor restored = unpool_with_indices(nullptr, pooled, idx);
    CHECK(restored.vec() == std::vector<double>{0, 0, 0, 4});

    // pool/unpool duality on random inputs
    Rng rng(11);
    for (int it = 0; it < 50; ++it) {
        Tensor x = rand_tensor({2, 3, 4, 6}, rng);
        auto [p, ix] = maxpool_with_indices(nullptr, x, 2);
        Tensor u = unpool_with_indices(nullptr, p, ix);
        int64_t nonzero = 0;
        for (int64_t i = 0; i < u.numel(); ++i)
            if (u.data()[i] != 0.0) ++nonzero;
        CHECK(nonzero == p.numel());
        // each window max sits at its original coordinate
        for (int64_t i = 0; i < u.numel(); ++i)
            if (u.data()[i] != 0.0) CHECK(u.data()[i] == x.data()[i]);
    }
}

TEST_CASE("unpool gradient of sum is all-ones") {
    Rng rng(13);
    Tensor base = rand_tensor({1, 2, 4, 4}, rng);
    auto idx = maxpool_with_indices(nullptr, base, 2).second;
    Tensor y = rand_tensor({1, 2, 2, 2}, rng, -1, 1, true);
    Tape tape;
    Tensor s = sum(&tape, unpool_with_indices(&tape, y, idx));
    backward(s, tape);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.grad()[i] == doctest::Approx(1.0));
}

TEST_CASE("unpool dimension mismatch is a contract violation") {
    Tensor base = Tensor::zeros({1, 1, 4, 4});
    auto idx = maxpool_with_indices(nullptr, base, 2).second;
    Tensor wrong = Tensor::zeros({1, 1, 3, 3});
    CHECK_THROWS_AS(unpool_with_indices(nullptr, wrong, idx), ContractError);
}

TEST_CASE("avgpool mean and oracle") {
    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(avgpool(nullptr, x, 2).item() == doctest::Approx(2.5));

    Tensor c = Tensor::full({1, 2, 4, 4}, 0.37);
    Tensor yc = avgpool(nullptr, c, 4);
    for (int64_t i = 0; i < yc.numel(); ++i) CHECK(yc.data()[i] == doctest::Approx(0.37));

    Rng rng(15);
    Tensor r = rand_tensor({1, 1, 4, 4}, rng);
    double s = 0;
    for (int64_t i = 0; i < 16; ++i) s += r.data()[i];
    CHECK(avgpool(nullptr, r, 4).item() == doctest::Approx(s / 16.0).epsilon(1e-12));
    CHECK_THROWS_AS(avgpool(nullptr, Tensor::zeros({1, 1, 5, 5}), 2), ConfigError);
}

TEST_CASE("activation values") {
    Tensor x = Tensor::from({1, 4}, {-2, 3, 0, 0});
    Tensor r = activation(nullptr, x, Act::Relu);
    CHECK(r.data()[0] == 0.0);
    CHECK(r.data()[1] == 3.0);
    CHECK(activation(nullptr, x, Act::Sigmoid).data()[2] == doctest::Approx(0.5));
    CHECK(activation(nullptr, x, Act::Tanh).data()[3] == doctest::Approx(0.0));
}

TEST_CASE("linear identity, closed form, oracle") {
    Tensor x = Tensor::from({1, 2}, {2, 3});
    Tensor wi = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor b0 = Tensor::zeros({2});
    Tensor y = linear(nullptr, x, wi, b0);
    CHECK(y.data()[0] == doctest::Approx(2.0));
    CHECK(y.data()[1] == doctest::Approx(3.0));

    Tensor w = Tensor::from({1, 2}, {1, 1});
    Tensor b = Tensor::from({1}, {1});
    CHECK(linear(nullptr, x, w, b).item() == doctest::Approx(6.0));

    Rng rng(17);
    Tensor xr = rand_tensor({3, 5}, rng), wr = rand_tensor({4, 5}, rng), br = rand_tensor({4}, rng);
    Tensor yr = linear(nullptr, xr, wr, br);
    for (int bi = 0; bi < 3; ++bi)
        for (int e = 0; e < 4; ++e) {
            double acc = br.data()[e];
            for (int d = 0; d < 5; ++d) acc += xr.data()[bi * 5 + d] * wr.data()[e * 5 + d];
            CHECK(yr.data()[bi * 4 + e] == doctest::Approx(acc).epsilon(1e-12));
        }
    CHECK_THROWS_AS(linear(nullptr, xr, rand_tensor({4, 6}, rng), br), ContractError);
}

TEST_CASE("batchnorm zero-variance channel and standardized values") {
    Tensor x = Tensor::full({2, 1, 2, 2}, 3.0);
    Tensor g = Tensor::full({1}, 1.0);
    Tensor b = Tensor::full({1}, 0.7);
    Tensor y = batchnorm2d(nullptr, x, g, b, 1e-5);
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(0.7));

    Tensor x2 = Tensor::from({2, 1, 1, 1}, {-1, 1});
    Tensor y2 = batchnorm2d(nullptr, x2, g, Tensor::zeros({1}), 1e-5);
    CHECK(y2.data()[0] == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(y2.data()[1] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("batchnorm moment check") {
    Rng rng(19);
    Tensor x = rand_tensor({4, 3, 5, 5}, rng, -3, 5);
    Tensor g = Tensor::full({3}, 1.0);
    Tensor b = Tensor::zeros({3});
    Tensor y = batchnorm2d(nullptr, x, g, b, 1e-12);
    const int64_t n = 4 * 5 * 5;
    for (int c = 0; c < 3; ++c) {
        double m = 0, v = 0;
        for (int bi = 0; bi < 4; ++bi)
            for (int64_t i = 0; i < 25; ++i) m += y.data()[(bi * 3 + c) * 25 + i];
        m /= n;
        for (int bi = 0; bi < 4; ++bi)
            for (int64_t i = 0; i < 25; ++i) {
                double d = y.data()[(bi * 3 + c) * 25 + i] - m;
                v += d * d;
            }
        v /= n;
        CHECK(std::abs(m) < 1e-10);
        CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("dropout identity modes and mask statistics") {
    Rng rng(21);
    Tensor x = rand_tensor({1, 10000}, rng, 0.5, 1.5);
    Rng r0(1);
    Tensor same = dropout(nullptr, x, 0.0, Mode::Train, r0);
    CHECK(same.vec() == x.vec());
    Rng r1(1);
    Tensor ev = dropout(nullptr, x, 0.4, Mode::Eval, r1);
    CHECK(ev.vec() == x.vec());

    Rng r2(99);
    Tensor y = dropout(nullptr, x, 0.4, Mode::Train, r2);
    int64_t zeros = 0;
    for (int64_t i = 0; i < y.numel(); ++i) {
        if (y.data()[i] == 0.0)
            ++zeros;
        else
            CHECK(y.data()[i] == doctest::Approx(x.data()[i] / 0.6).epsilon(1e-12));
    }
    const double frac = static_cast<double>(zeros) / 10000.0;
    CHECK(frac == doctest::Approx(0.4).epsilon(0.05));  // +-0.02 absolute
    CHECK(std::abs(frac - 0.4) <= 0.02);

    Rng r3(5);
    CHECK_THROWS_AS(dropout(nullptr, x, 1.0, Mode::Train, r3), ConfigError);
}

TEST_CASE("softmax uniform, closed form, normalization") {
    Tensor eq = Tensor::full({1, 8, 2, 2}, 0.3);
    Tensor p = softmax_channels(nullptr, eq);
    for (int64_t i = 0; i < p.numel(); ++i) CHECK(p.data()[i] == doctest::Approx(0.125).epsilon(1e-12));

    Tensor two = Tensor::from({1, 2, 1, 1}, {0.0, std::log(3.0)});
    Tensor p2 = softmax_channels(nullptr, two);
    CHECK(p2.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(p2.data()[1] == doctest::Approx(0.75).epsilon(1e-12));

    Rng rng(23);
    Tensor logits = rand_tensor({2, 5, 4, 4}, rng, -4, 4);
    Tensor pr = softmax_channels(nullptr, logits);
    for (int b = 0; b < 2; ++b)
        for (int64_t i = 0; i < 16; ++i) {
            double s = 0;
            for (int c = 0; c < 5; ++c) s += pr.data()[(b * 5 + c) * 16 + i];
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
}

TEST_CASE("pixel cross entropy values and label validation") {
    // one-hot correct
    Tensor onehot = Tensor::zeros({1, 3, 2, 2});
    LabelMap target(1, 2, 2);
    target.values = {0, 1, 2, 1};
    for (int64_t i = 0; i < 4; ++i) onehot.data()[target.values[static_cast<size_t>(i)] * 4 + i] = 1.0;
    CHECK(pixel_cross_entropy(nullptr, onehot, target).item() <= 1e-11);

    Tensor uniform = Tensor::full({1, 8, 2, 2}, 0.125);
    LabelMap t2(1, 2, 2);
    CHECK(pixel_cross_entropy(nullptr, uniform, t2).item() == doctest::Approx(std::log(8.0)).epsilon(1e-12));

    LabelMap bad(1, 2, 2);
    bad.values = {0, 0, 0, 9};
    CHECK_THROWS_AS(pixel_cross_entropy(nullptr, uniform, bad), DataError);
}

TEST_CASE("euclidean loss values and analytic gradient") {
    Tensor a = Tensor::from({1, 2}, {3, 4});
    Tensor z = Tensor::zeros({1, 2});
    CHECK(euclidean_loss(nullptr, a, a.detached_copy()).item() == doctest::Approx(0.0));
    CHECK(euclidean_loss(nullptr, a, z).item() == doctest::Approx(12.5));

    Rng rng(25);
    Tensor p = rand_tensor({4, 6}, rng, -1, 1, true);
    Tensor q = rand_tensor({4, 6}, rng);
    Tape tape;
    Tensor l = euclidean_loss(&tape, p, q);
    backward(l, tape);
    for (int64_t i = 0; i < p.numel(); ++i)
        CHECK(p.grad()[i] == doctest::Approx((p.data()[i] - q.data()[i]) / 4.0).epsilon(1e-12));
    CHECK_THROWS_AS(euclidean_loss(nullptr, p, Tensor::zeros({4, 5})), ContractError);
}

TEST_CASE("concat shapes, identity, gradient routing") {
    Rng rng(27);
    Tensor a = rand_tensor({1, 1, 4, 4}, rng, -1, 1, true);
    Tensor b = rand_tensor({1, 3, 4, 4}, rng, -1, 1, true);
    Tensor y = concat_channels(nullptr, {a, b});
    CHECK(y.shape() == Shape{1, 4, 4, 4});

    Tensor solo = concat_channels(nullptr, {a});
    CHECK(solo.vec() == a.vec());

    Tape tape;
    Tensor s = sum(&tape, concat_channels(&tape, {a, b}));
    backward(s, tape);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.grad()[i] == doctest::Approx(1.0));
    for (int64_t i = 0; i < b.numel(); ++i) CHECK(b.grad()[i] == doctest::Approx(1.0));

    CHECK_THROWS_AS(concat_channels(nullptr, {a, Tensor::zeros({1, 1, 3, 3})}), ContractError);
}

TEST_CASE("backward basics") {
    Rng rng(29);
    Tensor x = rand_tensor({2, 5}, rng, -2, 2, true);
    {
        Tape tape;
        Tensor s = sum(&tape, x);
        backward(s, tape);
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(1.0));
    }
    x.zero_grad();
    {
        // 0.5*||x||^2 via the euclidean loss with B=1 row
        Tensor flat = Tensor::from({1, 10}, x.vec(), true);
        Tape tape;
        Tensor l = euclidean_loss(&tape, flat, Tensor::zeros({1, 10}));
        backward(l, tape);
        for (int64_t i = 0; i < 10; ++i) CHECK(flat.grad()[i] == doctest::Approx(flat.data()[i]));
    }
    // unreachable leaf keeps zero grads
    Tensor unused = Tensor::zeros({3}, true);
    for (int i = 0; i < 3; ++i) CHECK(unused.grad()[i] == 0.0);

    // non-scalar loss rejected
    Tape tape;
    Tensor y = add(&tape, x, x);
    CHECK_THROWS_AS(backward(y, tape), ContractError);
}

TEST_CASE("backward is reproducible after grad reset") {
    Rng rng(31);
    Tensor x = rand_tensor({1, 2, 4, 4}, rng, -1, 1, true);
    Tensor w = rand_tensor({2, 2, 3, 3}, rng, -1, 1, true);
    Tensor b = rand_tensor({2}, rng, -1, 1, true);
    std::vector<double> first;
    for (int pass = 0; pass < 2; ++pass) {
        x.zero_grad();
        w.zero_grad();
        b.zero_grad();
        Tape tape;
        Tensor loss = sum(&tape, activation(&tape, conv2d(&tape, x, w, b, 1, 1), Act::Tanh));
        backward(loss, tape);
        if (pass == 0) {
            first.assign(w.grad(), w.grad() + w.numel());
        } else {
            for (int64_t i = 0; i < w.numel(); ++i) CHECK(w.grad()[i] == first[static_cast<size_t>(i)]);
        }
    }
}

TEST_CASE("sgd momentum recurrence") {
    // plain step
    std::vector<Tensor> p1 = {Tensor::zeros({1}, true)};
    p1[0].grad()[0] = 1.0;
    OptimizerState st;
    st.momentum = 0.0;
    st.init(p1);
    sgd_momentum_step(p1, st, 0.01);
    CHECK(p1[0].data()[0] == doctest::Approx(-0.01));

    // two consecutive unit gradients with momentum 0.9
    std::vector<Tensor> p2 = {Tensor::zeros({1}, true)};
    OptimizerState st2;
    st2.momentum = 0.9;
    st2.init(p2);
    p2[0].grad()[0] = 1.0;
    sgd_momentum_step(p2, st2, 0.01);
    CHECK(p2[0].data()[0] == doctest::Approx(-0.01));
    p2[0].zero_grad();
    p2[0].grad()[0] = 1.0;
    sgd_momentum_step(p2, st2, 0.01);
    CHECK(p2[0].data()[0] == doctest::Approx(-0.01 - 0.019));

    // zero gradient forever: velocity decays geometrically by 0.9
    p2[0].zero_grad();
    double v_prev = std::abs(st2.velocity[0].data()[0]);
    for (int i = 0; i < 5; ++i) {
        sgd_momentum_step(p2, st2, 0.01);
        const double v = std::abs(st2.velocity[0].data()[0]);
        CHECK(v == doctest::Approx(0.9 * v_prev).epsilon(1e-12));
        v_prev = v;
    }
}

TEST_CASE("optimizer determinism") {
    for (int run = 0; run < 2; ++run) {
        static std::vector<double> reference;
        Rng rng(77);
        std::vector<Tensor> params = {rand_tensor({8}, rng, -1, 1, true)};
        OptimizerState st;
        st.init(params);
        for (int step = 0; step < 20; ++step) {
            for (int i = 0; i < 8; ++i) params[0].grad()[i] = rng.normal();
            sgd_momentum_step(params, st, lr_at_epoch(step, st));
            params[0].zero_grad();
        }
        if (run == 0) {
            reference = params[0].vec();
        } else {
            CHECK(params[0].vec() == reference);  // bit-identical trajectories
        }
    }
}

TEST_CASE("learning-rate schedule") {
    OptimizerState st;
    CHECK(lr_at_epoch(0, st) == doctest::Approx(0.01));
    CHECK(lr_at_epoch(9, st) == doctest::Approx(0.01));
    CHECK(lr_at_epoch(10, st) == doctest::Approx(0.008));
    CHECK(lr_at_epoch(25, st) == doctest::Approx(0.0064));
    CHECK_THROWS_AS(lr_at_epoch(-1, st), ContractError);
}

TEST_CASE("gradient suite over all ops (reduced instance count)") {
    auto results = run_gradcheck(gradcheck_op_names(), 1e-4, 8, 1234);
    for (const auto& r : results) {
        INFO(r.op, " max_rel_err=", r.max_rel_err);
        CHECK(r.pass);
    }
}
