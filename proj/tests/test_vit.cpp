// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "support.hpp"

using namespace tgr;
using namespace tgr::testing;

namespace {

double loss_of(const ViTModel& m, const Tensor& img, std::size_t y) { return cross_entropy(logits(m, img), y).loss; }

ViTModel perturbed_random(const ViTConfig& cfg, std::uint64_t seed) {
    // Non-trivial LayerNorm affines and biases so every path carries gradient.
    ViTModel m = ViTModel::random(cfg, seed);
    Rng rng(seed + 1000);
    m.mutable_params().for_each([&](const std::string& name, Tensor& t) {
        if (name.ends_with("bias") || name.ends_with("beta"))
            for (double& v : t.data()) v = 0.1 * rng.normal();
        if (name.ends_with("gamma"))
            for (double& v : t.data()) v = 1.0 + 0.1 * rng.normal();
    });
    return m;
}

}  // namespace

TEST(Patchify, LayoutAndRoundTrip) {
    Rng rng(1);
    const Tensor img = random_tensor({3, 8, 12}, rng);
    const Tensor p = patchify(img, 4);
    ASSERT_EQ(p.shape(), (Shape{6, 48}));
    // Patch (1, 2) is row 1 * 3 + 2; pixel (dy, dx) = (3, 1) channel 2.
    EXPECT_EQ(p.at(5, (3 * 4 + 1) * 3 + 2), img.at(2, 4 + 3, 8 + 1));
    EXPECT_TRUE(bit_equal(unpatchify(p, 4, 3, 8, 12), img));
    EXPECT_THROW(patchify(img, 5), DimensionError);
}

TEST(Forward, MatchesStraightLineReference) {
    Rng rng(2);
    for (bool cls : {true, false})
        for (std::size_t heads : {1u, 2u, 4u}) {
            const ViTConfig cfg = tiny_config(2, heads, cls);
            const ViTModel m = perturbed_random(cfg, 10 + heads);
            const Tensor img = random_image(cfg, rng);
            const Tensor got = logits(m, img);
            const auto want = ref::vit_logits(m, img);
            for (std::size_t i = 0; i < want.size(); ++i) EXPECT_LT(rel_err(got[i], want[i], 1e-9), 1e-10);
        }
}

TEST(Forward, ZooArchitectureMatchesReference) {
    const auto zoo = default_zoo();
    Rng rng(3);
    const ViTModel m = ViTModel::random(zoo[2].config, 5);
    const Tensor img = random_image(zoo[2].config, rng);
    const Tensor got = logits(m, img);
    const auto want = ref::vit_logits(m, img);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_LT(rel_err(got[i], want[i], 1e-9), 1e-10);
}

TEST(Forward, ZeroModelGivesZeroLogits) {
    const ViTModel m = ViTModel::zeros(tiny_config());
    Rng rng(4);
    const Tensor l = logits(m, random_image(m.config(), rng));
    for (double v : l.data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, RejectsWrongImageShape) {
    const ViTModel m = ViTModel::random(tiny_config(), 1);
    EXPECT_THROW(forward(m, Tensor({3, 4, 4})), DimensionError);
}

TEST(Backward, InputGradientMatchesFiniteDifferences) {
    Rng rng(5);
    for (bool cls : {true, false}) {
        const ViTConfig cfg = tiny_config(2, 2, cls);
        const ViTModel m = perturbed_random(cfg, 21);
        const Tensor img = random_image(cfg, rng);
        const std::size_t y = 1;
        const auto fwd = forward(m, img);
        const Tensor g = backward(m, fwd.cache, cross_entropy(fwd.logits, y).grad).input_grad;
        for (std::size_t i = 0; i < img.size(); ++i) {
            const double n = central_difference([&](const Tensor& x) { return loss_of(m, x, y); }, img, i);
            EXPECT_LT(rel_err(g[i], n, 1e-7), 1e-6) << "pixel " << i << " cls=" << cls;
        }
    }
}

TEST(Backward, ParameterGradientsMatchFiniteDifferences) {
    const ViTConfig cfg = tiny_config(2, 2, true);
    const ViTModel m = perturbed_random(cfg, 31);
    Rng rng(6);
    const Tensor img = random_image(cfg, rng);
    const std::size_t y = 2;
    const auto fwd = forward(m, img);
    ViTParams grads = ViTParams::zeros(cfg);
    backward(m, fwd.cache, cross_entropy(fwd.logits, y).grad, {}, &grads);

    std::vector<std::pair<std::string, const Tensor*>> analytic;
    grads.for_each([&](const std::string& name, const Tensor& t) { analytic.emplace_back(name, &t); });
    // Key biases shift every score in a row equally, so their gradient is
    // zero and the difference quotient is pure roundoff; hence the floor.
    std::size_t slot = 0;
    ViTModel probe = m;
    probe.mutable_params().for_each([&](const std::string& name, Tensor& t) {
        const Tensor& a = *analytic[slot++].second;
        for (int trial = 0; trial < 3; ++trial) {
            const std::size_t i = rng.below(t.size());
            const double x0 = t[i], h = 1e-5;
            t[i] = x0 + h;
            const double fp = loss_of(ViTModel(cfg, probe.params()), img, y);
            t[i] = x0 - h;
            const double fm = loss_of(ViTModel(cfg, probe.params()), img, y);
            t[i] = x0;
            EXPECT_LT(rel_err(a[i], (fp - fm) / (2 * h), 1e-4), 1e-6) << name << "[" << i << "]";
        }
    });
}

TEST(Backward, HooksRunInReverseBlockOrderWithDocumentedShapes) {
    const ViTConfig cfg = tiny_config(3, 2, true);
    const ViTModel m = ViTModel::random(cfg, 2);
    Rng rng(7);
    const auto fwd = forward(m, random_image(cfg, rng));
    std::vector<std::pair<Component, std::size_t>> seen;
    const auto res = backward(m, fwd.cache, cross_entropy(fwd.logits, 0).grad, [&](const ModuleGradient& g) {
        seen.emplace_back(g.kind, g.block_index);
        const std::size_t S = cfg.seq_len(), D = cfg.embed_dim;
        if (g.kind == Component::Attention) EXPECT_EQ(g.grad.shape(), (Shape{cfg.num_heads, S, S}));
        else EXPECT_EQ(g.grad.shape(), (Shape{S, D}));
        return g.grad;
    });
    std::vector<std::pair<Component, std::size_t>> want;
    for (std::size_t l = 3; l-- > 0;)
        for (Component c : {Component::MLP, Component::Attention, Component::QKV}) want.emplace_back(c, l);
    EXPECT_EQ(seen, want);
    ASSERT_EQ(res.module_grads.size(), 9u);
    for (std::size_t i = 0; i < 9; ++i) {
        EXPECT_EQ(res.module_grads[i].kind, want[i].first);
        EXPECT_EQ(res.module_grads[i].block_index, want[i].second);
    }
}

TEST(Backward, IdentityHookIsBitIdenticalToNoHook) {
    const ViTConfig cfg = tiny_config();
    const ViTModel m = perturbed_random(cfg, 3);
    Rng rng(8);
    const auto fwd = forward(m, random_image(cfg, rng));
    const Tensor lg = cross_entropy(fwd.logits, 3).grad;
    const auto a = backward(m, fwd.cache, lg);
    const auto b = backward(m, fwd.cache, lg, [](const ModuleGradient& g) { return g.grad; });
    EXPECT_TRUE(bit_equal(a.input_grad, b.input_grad));
}

TEST(Backward, HookChangingShapeThrows) {
    const ViTConfig cfg = tiny_config();
    const ViTModel m = ViTModel::random(cfg, 5);
    Rng rng(10);
    const auto fwd = forward(m, random_image(cfg, rng));
    EXPECT_THROW(backward(m, fwd.cache, cross_entropy(fwd.logits, 0).grad,
                          [](const ModuleGradient&) { return Tensor({1}); }),
                 DimensionError);
}

TEST(Backward, StaleCacheIsRejected) {
    const ViTConfig cfg = tiny_config();
    ViTModel m = ViTModel::random(cfg, 6);
    Rng rng(11);
    const auto fwd = forward(m, random_image(cfg, rng));
    const Tensor lg = cross_entropy(fwd.logits, 0).grad;
    EXPECT_NO_THROW(backward(m, fwd.cache, lg));
    m.mutable_params().head_b[0] += 1.0;
    EXPECT_THROW(backward(m, fwd.cache, lg), ContractError);
    const ViTModel copy = m;
    const auto fwd2 = forward(m, random_image(cfg, rng));
    EXPECT_THROW(backward(copy, fwd2.cache, lg), ContractError);
    EXPECT_THROW(backward(m, fwd2.cache, Tensor({3})), DimensionError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
    Rng rng(12);
    const Tensor z = random_tensor({6}, rng, 3.0);
    const auto r = cross_entropy(z, 4);
    for (std::size_t i = 0; i < 6; ++i) {
        const double n = central_difference([](const Tensor& t) { return cross_entropy(t, 4).loss; }, z, i);
        EXPECT_LT(rel_err(r.grad[i], n, 1e-9), 1e-7);
    }
    EXPECT_NEAR(cross_entropy(Tensor({4}, 0.0), 0).loss, std::log(4.0), 1e-15);
    EXPECT_THROW(cross_entropy(z, 6), DomainError);
}

TEST(ModelFile, RoundTripIsBitExact) {
    const ViTModel m = perturbed_random(tiny_config(2, 2, false), 7);
    const auto bytes = serialize_model(m);
    const ViTModel back = deserialize_model(bytes);
    EXPECT_EQ(back.config(), m.config());
    EXPECT_EQ(serialize_model(back), bytes);
}

TEST(ModelFile, RejectsCorruptionAndTruncation) {
    const auto bytes = serialize_model(ViTModel::random(tiny_config(), 8));
    auto bad = bytes;
    bad[bad.size() / 2] ^= 0x01;
    EXPECT_THROW(deserialize_model(bad), ParseError);
    auto magic = bytes;
    magic[0] = 'X';
    EXPECT_THROW(deserialize_model(magic), ParseError);
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + 100);
    try {
        deserialize_model(cut);
        FAIL() << "truncated model accepted";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos) << e.what();
    }
}

TEST(ViTConfig, ValidationAndDerivedSizes) {
    ViTConfig c;
    EXPECT_EQ(c.num_patches(), 64u);
    EXPECT_EQ(c.seq_len(), 65u);
    c.embed_dim = 63;
    EXPECT_THROW(c.validate(), ConfigError);
    c = ViTConfig{};
    c.image_size = 30;
    EXPECT_THROW(c.validate(), ConfigError);
}
