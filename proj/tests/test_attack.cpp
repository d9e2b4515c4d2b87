// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "support.hpp"

using namespace tgr;
using namespace tgr::testing;

TEST(SelectExtremes, HandExample) {
    const std::vector<double> v{0.5, -2.0, 0.1, 3.0};
    EXPECT_EQ(select_extreme_tokens(v, 1), (std::vector<std::size_t>{1, 3}));
    EXPECT_TRUE(select_extreme_tokens(v, 0).empty());
    EXPECT_EQ(select_extreme_tokens(v, 1, SelectionMode::MagnitudeExtremes), (std::vector<std::size_t>{2, 3}));
}

TEST(SelectExtremes, TiesGoToLowestIndex) {
    const std::vector<double> v{1.0, 1.0, 0.0, 0.0, 0.5};
    EXPECT_EQ(select_extreme_tokens(v, 1), (std::vector<std::size_t>{0, 2}));
    const std::vector<double> flat(7, 2.0);
    EXPECT_EQ(select_extreme_tokens(flat, 2), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(SelectExtremes, MatchesFullSortOracle) {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> v(50);
        for (double& x : v) x = std::round(rng.normal() * 4.0) / 4.0;  // plenty of ties
        const std::size_t k = 1 + rng.below(10);
        for (auto mode : {SelectionMode::SignedExtremes, SelectionMode::MagnitudeExtremes})
            EXPECT_EQ(select_extreme_tokens(v, k, mode), brute_extremes(v, k, mode));
    }
}

TEST(SelectExtremes, RejectsOversizedK) {
    const std::vector<double> v(6, 0.0);
    EXPECT_NO_THROW(select_extreme_tokens(v, 2));
    EXPECT_THROW(select_extreme_tokens(v, 3), ConfigError);
}

TEST(TokenRule, HandExample) {
    TgrConfig cfg;
    const Tensor g({3, 1}, std::vector<double>{1.0, -5.0, 2.0});
    const Tensor out = regularize_token_matrix(g, cfg, 0.5);
    EXPECT_TRUE(bit_equal(out, Tensor({3, 1}, std::vector<double>{0.5, 0.0, 0.0})));
}

TEST(TokenRule, KZeroUnitScaleIsIdentity) {
    Rng rng(2);
    TgrConfig cfg;
    cfg.k = 0;
    const Tensor g = random_tensor({9, 5}, rng);
    EXPECT_TRUE(bit_equal(regularize_token_matrix(g, cfg, 1.0), g));
    const Tensor a = random_tensor({2, 9, 9}, rng);
    EXPECT_TRUE(bit_equal(regularize_attention_map(a, cfg, 1.0), a));
}

TEST(TokenRule, PerChannelZeroesTwoEntriesPerChannel) {
    Rng rng(3);
    TgrConfig cfg;
    const Tensor g = random_tensor({12, 7}, rng);
    const Tensor out = regularize_token_matrix(g, cfg, 0.75);
    for (std::size_t c = 0; c < 7; ++c) {
        std::size_t zeros = 0;
        for (std::size_t r = 0; r < 12; ++r) zeros += out.at(r, c) == 0.0;
        EXPECT_EQ(zeros, 2u);
    }
    EXPECT_LT(sum_squares(out), sum_squares(g * 0.75));
}

TEST(AttentionRule, HandExample) {
    TgrConfig cfg;
    // Unique max at (0, 2), unique min at (1, 1).
    const Tensor g({1, 3, 3}, std::vector<double>{0.1, 0.2, 9.0, 0.3, -7.0, 0.4, 0.5, 0.6, 0.7});
    const Tensor out = regularize_attention_map(g, cfg, 1.0);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) {
            const bool survives = r == 2 && c == 0;
            EXPECT_EQ(out.at(0, r, c), survives ? g.at(0, r, c) : 0.0) << r << "," << c;
        }
}

TEST(ClassToken, ExcludedRowIsScaledButNeverRanked) {
    TgrConfig cfg;
    // Row 0 holds both extremes; with it excluded, rows 1 and 3 are picked.
    const Tensor g({4, 1}, std::vector<double>{100.0, 5.0, 1.0, -3.0});
    const Tensor out = regularize_token_matrix(g, cfg, 0.5, 1);
    EXPECT_EQ(out[0], 50.0);
    EXPECT_EQ(out[1], 0.0);
    EXPECT_EQ(out[2], 0.5);
    EXPECT_EQ(out[3], 0.0);
    const Tensor a({1, 3, 3}, std::vector<double>{9.0, 9.0, 9.0, 9.0, 2.0, 1.0, 9.0, 3.0, 4.0});
    const Tensor ao = regularize_attention_map(a, TgrConfig{.k = 0}, 1.0, 1);
    EXPECT_TRUE(bit_equal(ao, a));
    EXPECT_THROW(regularize_attention_map(a, cfg, 1.0, 1), ConfigError);  // 2k = 2 is not < 2
}

TEST(ClassToken, AttackConfigOffset) {
    AttackConfig c = config::attack_config_from_kv({{"tgr", "on"}});
    EXPECT_EQ(c.tgr_first_token(ViTConfig{}), 0u);
    c.tgr->class_token = false;
    EXPECT_EQ(c.tgr_first_token(ViTConfig{}), 1u);
    ViTConfig no_cls;
    no_cls.use_class_token = false;
    EXPECT_EQ(c.tgr_first_token(no_cls), 0u);
    const AttackConfig parsed = config::attack_config_from_kv({{"tgr.class_token", "off"}});
    ASSERT_TRUE(parsed.tgr);
    EXPECT_FALSE(parsed.tgr->class_token);
}

class MaskOracle : public ::testing::TestWithParam<std::tuple<SelectionMode, EliminationMode>> {};

TEST_P(MaskOracle, RandomGradientsMatchBruteForce) {
    const auto [sel, elim] = GetParam();
    Rng rng(4 + static_cast<unsigned>(sel) * 2 + static_cast<unsigned>(elim));
    for (int trial = 0; trial < 300; ++trial) {
        TgrConfig cfg;
        cfg.selection = sel;
        cfg.elimination = elim;
        const std::size_t S = 5 + rng.below(12), C = 1 + rng.below(9), M = 1 + rng.below(3);
        const std::size_t first = rng.below(2);
        cfg.k = rng.below((S - first - 1) / 2 + 1);
        const double s = rng.uniform();
        const Tensor tok = random_tensor({S, C}, rng);
        EXPECT_TRUE(bit_equal(regularize_token_matrix(tok, cfg, s, first), brute_token_rule(tok, cfg, s, first)));
        const Tensor att = random_tensor({M, S, S}, rng);
        EXPECT_TRUE(
            bit_equal(regularize_attention_map(att, cfg, s, first), brute_attention_rule(att, cfg, s, first)));
    }
}

INSTANTIATE_TEST_SUITE_P(AllModes, MaskOracle,
                         ::testing::Combine(::testing::Values(SelectionMode::SignedExtremes,
                                                              SelectionMode::MagnitudeExtremes),
                                            ::testing::Values(EliminationMode::PerChannelEntry,
                                                              EliminationMode::GlobalTokenRow)));

TEST(Hook, DisabledComponentsPassThroughBitIdentically) {
    Rng rng(5);
    TgrConfig cfg;
    cfg.enabled = ComponentSet{};
    cfg.enabled.insert(Component::Attention);
    const GradientHook hook = tgr_hook(cfg);
    const ModuleGradient q{Component::QKV, 0, random_tensor({9, 4}, rng)};
    const ModuleGradient m{Component::MLP, 0, random_tensor({9, 4}, rng)};
    const ModuleGradient a{Component::Attention, 0, random_tensor({2, 9, 9}, rng)};
    EXPECT_TRUE(bit_equal(hook(q), q.grad));
    EXPECT_TRUE(bit_equal(hook(m), m.grad));
    EXPECT_TRUE(bit_equal(hook(a), brute_attention_rule(a.grad, cfg, cfg.s_attention)));
    cfg.enabled = ComponentSet{};
    const GradientHook none = tgr_hook(cfg);
    EXPECT_TRUE(bit_equal(none(a), a.grad));
}

TEST(Hook, FullConfigMatchesReplayOracle) {
    // Backward once per component, substituting externally edited gradients
    // for the components already visited, then compare the final replay with
    // the hooked backward pass.
    const ViTConfig cfg = tiny_config(1, 2, true);
    const ViTModel m = ViTModel::random(cfg, 9);
    Rng rng(6);
    const Tensor img = random_image(cfg, rng);
    const auto fwd = forward(m, img);
    const Tensor lg = cross_entropy(fwd.logits, 1).grad;
    const TgrConfig tc;

    std::vector<Tensor> edited;
    for (std::size_t stage = 0; stage < 3; ++stage) {
        std::size_t pos = 0;
        backward(m, fwd.cache, lg, [&](const ModuleGradient& g) -> Tensor {
            const std::size_t i = pos++;
            if (i < edited.size()) return edited[i];
            if (i == stage) {
                const double s = tc.scale_for(g.kind);
                edited.push_back(g.kind == Component::Attention ? brute_attention_rule(g.grad, tc, s)
                                                                : brute_token_rule(g.grad, tc, s));
            }
            return g.grad;
        });
    }
    std::size_t pos = 0;
    const auto replay = backward(m, fwd.cache, lg, [&](const ModuleGradient&) { return edited[pos++]; });
    const auto hooked = backward(m, fwd.cache, lg, tgr_hook(tc));
    EXPECT_TRUE(bit_equal(replay.input_grad, hooked.input_grad));
}

TEST(MimStep, NormalizesByL1) {
    Rng rng(7);
    const Tensor g = random_tensor({3, 4, 4}, rng);
    const Tensor m1 = mim_step(Tensor(g.shape()), g, 1.0);
    EXPECT_NEAR(l1_norm(m1), 1.0, 1e-14);
    const Tensor prev = random_tensor(g.shape(), rng);
    const Tensor m0 = mim_step(prev, g, 0.0);
    EXPECT_TRUE(bit_equal(m0, m1));
    // Two steps with mu = 1 equal the hand-accumulated sum.
    const Tensor g2 = random_tensor(g.shape(), rng);
    const Tensor m2 = mim_step(m1, g2, 1.0);
    const double l1a = l1_norm(g), l1b = l1_norm(g2);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_DOUBLE_EQ(m2[i], g[i] / l1a + g2[i] / l1b);
    const Tensor zero(g.shape());
    EXPECT_TRUE(bit_equal(mim_step(prev, zero, 1.0), prev));
}

TEST(PatchOut, MaskCountsAndDeterminism) {
    const ViTConfig cfg;
    for (std::size_t num : {1u, 17u, 43u, 64u}) {
        Rng a(11), b(11);
        const Tensor ma = patchout_mask(cfg, num, a), mb = patchout_mask(cfg, num, b);
        EXPECT_TRUE(bit_equal(ma, mb));
        EXPECT_EQ(sum(ma), static_cast<double>(num * 16 * 3));
        for (double v : ma.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
    }
    Rng r(12);
    const Tensor all = patchout_mask(cfg, 64, r);
    for (double v : all.data()) EXPECT_EQ(v, 1.0);
    EXPECT_THROW(patchout_mask(cfg, 0, r), ConfigError);
    EXPECT_THROW(patchout_mask(cfg, 65, r), ConfigError);
    EXPECT_EQ(default_patchout_patches(64), 43u);
    EXPECT_EQ(default_patchout_patches(196), 130u);
}

TEST(PatchOut, UnsetCountMeansDefaultRatio) {
    const AttackConfig c = config::attack_config_from_kv({{"patchout", "on"}});
    ASSERT_TRUE(c.patchout);
    EXPECT_NO_THROW(c.validate(ViTConfig{}));
    EXPECT_EQ(c.patchout->count_for(64), 43u);
    EXPECT_EQ((PatchOutConfig{7, 0}.count_for(64)), 7u);
    AttackConfig big = c;
    big.patchout->num_patches = 65;
    EXPECT_THROW(big.validate(ViTConfig{}), ConfigError);
}

TEST(PatchOut, IndicesAreDistinctAndUniform) {
    Rng r(13);
    std::vector<int> hits(64, 0);
    for (int t = 0; t < 4000; ++t) {
        auto idx = patchout_indices(64, 43, r);
        std::sort(idx.begin(), idx.end());
        ASSERT_TRUE(std::adjacent_find(idx.begin(), idx.end()) == idx.end());
        for (auto i : idx) ++hits[i];
    }
    const double expect = 4000.0 * 43.0 / 64.0;
    for (int h : hits) EXPECT_NEAR(h, expect, 0.06 * expect);
}

TEST(ClipProject, BoxIsRespectedEntryWise) {
    Rng rng(14);
    const double eps = 16.0 / 255.0;
    Tensor x({3, 8, 8}), xa({3, 8, 8});
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = rng.uniform();
        xa[i] = rng.uniform(-0.5, 1.5);
    }
    const Tensor out = clip_project(xa, x, eps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_LE(std::abs(out[i] - x[i]), eps);
        EXPECT_GE(out[i], 0.0);
        EXPECT_LE(out[i], 1.0);
        if (std::abs(xa[i] - x[i]) <= eps && xa[i] >= 0.0 && xa[i] <= 1.0) {
            EXPECT_EQ(out[i], xa[i]);
        }
    }
    EXPECT_TRUE(bit_equal(clip_project(x, x, eps), x));
    EXPECT_EQ(clip_project(Tensor({1}, 1.0), Tensor({1}, 0.0), eps)[0], eps);
}

namespace {

struct AttackFixture : ::testing::Test {
    ViTConfig cfg = tiny_config(2, 2, true);
    ViTModel model = ViTModel::random(cfg, 17);
    Tensor x;
    void SetUp() override {
        Rng rng(15);
        x = random_image(cfg, rng);
    }
};

}  // namespace

TEST_F(AttackFixture, ZeroStepsReturnsInput) {
    AttackConfig c;
    c.steps = 0;
    const auto r = attack(model, x, 0, c);
    EXPECT_TRUE(bit_equal(r.x_adv, x));
    EXPECT_EQ(r.success_on_source, predict(model, x) != 0);
}

TEST_F(AttackFixture, SingleStepMatchesClosedForm) {
    AttackConfig c;
    c.steps = 1;
    const auto fwd = forward(model, x);
    const Tensor g = backward(model, fwd.cache, cross_entropy(fwd.logits, 2).grad).input_grad;
    Tensor want = x;
    for (std::size_t i = 0; i < x.size(); ++i) want[i] += c.alpha_unit() * sign(g[i]);
    want = clip_project(want, x, c.epsilon_unit());
    EXPECT_TRUE(bit_equal(attack(model, x, 2, c).x_adv, want));
}

TEST_F(AttackFixture, BoxSignStepAndDeterminism) {
    AttackConfig c = tgr_attack_config();
    c.patchout = PatchOutConfig{2, 99};
    c.seed = 5;
    const auto r = attack(model, x, 1, c);
    EXPECT_EQ(r.per_step_loss.size(), 10u);
    EXPECT_LE(max_abs(r.x_adv - x), c.epsilon_unit() + 1e-12);
    for (double v : r.x_adv.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_TRUE(bit_equal(attack(model, x, 1, c).x_adv, r.x_adv));
    c.seed = 6;
    EXPECT_FALSE(bit_equal(attack(model, x, 1, c).x_adv, r.x_adv));

    // Before projection every pixel moves by 0 or +-alpha.
    AttackConfig one;
    one.steps = 1;
    one.epsilon = 255.0;
    one.alpha = 1.6;
    const auto s = attack(model, Tensor(x.shape(), 0.5), 1, one);
    for (double v : s.x_adv.data()) {
        const double d = std::abs(v - 0.5);
        EXPECT_TRUE(d == 0.0 || std::abs(d - 1.6 / 255.0) < 1e-15) << d;
    }
}

TEST_F(AttackFixture, DegenerateTgrIsBitIdenticalToMim) {
    AttackConfig tgr = tgr_attack_config();
    tgr.tgr->k = 0;
    tgr.tgr->s_attention = tgr.tgr->s_qkv = tgr.tgr->s_mlp = 1.0;
    AttackConfig empty = tgr_attack_config();
    empty.tgr->enabled = ComponentSet{};
    const AttackConfig mim = mim_attack_config();
    for (std::size_t y = 0; y < 4; ++y) {
        const Tensor ref = attack(model, x, y, mim).x_adv;
        EXPECT_TRUE(bit_equal(attack(model, x, y, tgr).x_adv, ref));
        EXPECT_TRUE(bit_equal(attack(model, x, y, empty).x_adv, ref));
    }
}

TEST_F(AttackFixture, ObserverSeesPostHookGradients) {
    const AttackConfig c = tgr_attack_config();
    std::size_t calls = 0;
    attack(model, x, 0, c, [&](std::size_t, const BackwardResult& b) {
        ++calls;
        ASSERT_EQ(b.module_grads.size(), 6u);
        // Post-hook QKV gradients carry two zeros per channel.
        const Tensor& q = b.module_grads[2].grad;
        for (std::size_t ch = 0; ch < q.dim(1); ++ch) {
            std::size_t z = 0;
            for (std::size_t r = 0; r < q.dim(0); ++r) z += q.at(r, ch) == 0.0;
            EXPECT_GE(z, 2u);
        }
    });
    EXPECT_EQ(calls, c.steps);
}

TEST_F(AttackFixture, InvalidConfigsNameTheKey) {
    AttackConfig c = tgr_attack_config();
    c.tgr->k = 3;  // 2k = 6 >= S = 5
    try {
        attack(model, x, 0, c);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(std::string(e.what()).rfind("tgr.k", 0), 0u) << e.what();
    }
    c = tgr_attack_config();
    c.tgr->s_qkv = 1.5;
    EXPECT_THROW(attack(model, x, 0, c), ConfigError);
    c = mim_attack_config();
    c.patchout = PatchOutConfig{5, 0};
    EXPECT_THROW(attack(model, x, 0, c), ConfigError);
    EXPECT_THROW(attack(model, x, 4, mim_attack_config()), DomainError);
}

TEST(AttackConfig, DefaultsAndStepSize) {
    const AttackConfig c = tgr_attack_config();
    EXPECT_DOUBLE_EQ(c.alpha_pixels(), 1.6);
    EXPECT_DOUBLE_EQ(c.epsilon_unit(), 16.0 / 255.0);
    EXPECT_EQ(c.tgr->k, 1u);
    EXPECT_EQ(c.tgr->s_attention, 0.25);
    EXPECT_EQ(c.tgr->s_qkv, 0.75);
    EXPECT_EQ(c.tgr->s_mlp, 0.25);
    EXPECT_EQ(c.mu, 1.0);
}

TEST(ComponentSet, TextForm) {
    EXPECT_EQ(ComponentSet{}.str(), "none");
    EXPECT_EQ(ComponentSet::all().str(), "Attention,QKV,MLP");
    EXPECT_EQ(ComponentSet::from_bits(6).str(), "QKV,MLP");
}
