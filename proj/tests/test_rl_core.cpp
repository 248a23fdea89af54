#include "turnrl/random.hpp"
#include "turnrl/rl_core.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace turnrl;

namespace {

using Mask = std::vector<std::uint8_t>;
using Vec = std::vector<double>;

Trajectory traj(Mask mask, Vec rewards) {
    Trajectory t;
    t.tokens.assign(mask.size(), 0);
    t.action_mask = std::move(mask);
    t.rewards = std::move(rewards);
    t.old_logprobs.assign(t.tokens.size(), 0.0);
    t.values.assign(t.tokens.size(), 0.0);
    return t;
}

} // namespace

TEST(MaskedGae, HandExamples) {
    auto a = masked_gae(Vec{0, 1}, Vec{0.5, 0.25}, Mask{1, 1}, 1.0, 1.0);
    EXPECT_DOUBLE_EQ(a.advantages[0], 0.5);
    EXPECT_DOUBLE_EQ(a.advantages[1], 0.75);
    EXPECT_DOUBLE_EQ(a.returns[0], 1.0);
    EXPECT_DOUBLE_EQ(a.returns[1], 1.0);

    auto z = masked_gae(Vec{0, 0, 0}, Vec{0, 0, 0}, Mask{1, 1, 1}, 0.9, 0.95);
    for (double x : z.advantages) EXPECT_EQ(x, 0.0);

    auto g0 = masked_gae(Vec{1, 1}, Vec{0.3, 0.4}, Mask{1, 1}, 0.0, 0.95);
    EXPECT_NEAR(g0.advantages[0], 0.7, 1e-15);
    EXPECT_NEAR(g0.advantages[1], 0.6, 1e-15);
}

TEST(MaskedGae, CondensesOverEnvironmentTokens) {
    auto full = masked_gae(Vec{0.2, 0, 1}, Vec{0.1, 9.0, 0.3}, Mask{1, 0, 1}, 0.9, 0.8);
    auto cond = masked_gae(Vec{0.2, 1}, Vec{0.1, 0.3}, Mask{1, 1}, 0.9, 0.8);
    EXPECT_EQ(full.advantages[0], cond.advantages[0]);
    EXPECT_EQ(full.advantages[2], cond.advantages[1]);
    EXPECT_EQ(full.advantages[1], 0.0);
    EXPECT_EQ(full.defined_mask, (Mask{1, 0, 1}));
}

TEST(MaskedGae, DisabledRunsOverAllPositions) {
    auto off = masked_gae(Vec{0.2, 0, 1}, Vec{0.1, 9.0, 0.3}, Mask{1, 0, 1}, 0.9, 0.8, false);
    auto all = masked_gae(Vec{0.2, 0, 1}, Vec{0.1, 9.0, 0.3}, Mask{1, 1, 1}, 0.9, 0.8);
    EXPECT_EQ(off.advantages, all.advantages);
    EXPECT_EQ(off.defined_mask, (Mask{1, 1, 1}));
}

TEST(MaskedGae, Errors) {
    EXPECT_THROW(masked_gae(Vec{0, 0}, Vec{0, 0}, Mask{0, 0}, 1, 1), EmptyMaskError);
    EXPECT_THROW(masked_gae(Vec{0, 0}, Vec{0}, Mask{1, 1}, 1, 1), DimensionError);
    EXPECT_THROW(masked_gae(Vec{NAN, 0}, Vec{0, 0}, Mask{1, 1}, 1, 1), NumericalError);
}

TEST(MaskedGae, LambdaOneIsMonteCarlo) {
    Rng rng(17);
    for (int n = 0; n < 200; ++n) {
        const std::size_t len = 1 + rng.below(16);
        Vec r(len), v(len);
        Mask m(len);
        for (std::size_t i = 0; i < len; ++i) {
            m[i] = rng.bernoulli(0.6);
            r[i] = m[i] ? rng.uniform(-1, 1) : 0.0;
            v[i] = rng.uniform(-1, 1);
        }
        m[rng.below(len)] = 1;
        const double gamma = 0.7;
        auto a = masked_gae(r, v, m, gamma, 1.0);
        for (std::size_t i = 0; i < len; ++i) {
            if (!m[i]) continue;
            double g = 0.0, disc = 1.0;
            for (std::size_t k = i; k < len; ++k)
                if (m[k]) g += disc * r[k], disc *= gamma;
            EXPECT_NEAR(a.advantages[i], g - v[i], 1e-10);
        }
    }
}

TEST(Grpo, Examples) {
    auto a = grpo_advantages(Vec{1, 0});
    EXPECT_NEAR(a[0], 1.0, 1e-7);
    EXPECT_NEAR(a[1], -1.0, 1e-7);
    for (double x : grpo_advantages(Vec{0.3, 0.3, 0.3})) EXPECT_EQ(x, 0.0);
    auto p = grpo_advantages(Vec{0.5, -1, 2});
    auto q = grpo_advantages(Vec{2, 0.5, -1});
    EXPECT_EQ(p[0], q[1]);
    EXPECT_EQ(p[1], q[2]);
    EXPECT_EQ(p[2], q[0]);
    EXPECT_THROW(grpo_advantages(Vec{1}), GroupSizeError);
}

TEST(Rloo, Examples) {
    auto a = rloo_advantages(Vec{1, 0, 0, 1});
    EXPECT_EQ(a, (Vec{2.0 / 3, -2.0 / 3, -2.0 / 3, 2.0 / 3}));
    for (double x : rloo_advantages(Vec{4, 4, 4})) EXPECT_EQ(x, 0.0);
    EXPECT_EQ(rloo_advantages(Vec{0.75, 0.25}), (Vec{0.5, -0.5}));
    EXPECT_THROW(rloo_advantages(Vec{1}), GroupSizeError);
}

TEST(ReinforcePP, Examples) {
    std::vector<Trajectory> one{traj({1}, {1.0})};
    std::vector<std::size_t> g1{0};
    EXPECT_EQ(reinforce_pp_advantages(one, g1, 1.0, false, 1e-8)[0][0], 0.0);

    std::vector<Trajectory> two{traj({1}, {1.0}), traj({1}, {0.0})};
    std::vector<std::size_t> g2{0, 0};
    auto pre = reinforce_pp_returns(two, g2, 1.0, true);
    EXPECT_EQ(pre[0][0], 0.5);
    EXPECT_EQ(pre[1][0], -0.5);

    std::vector<Trajectory> zeros{traj({0, 1, 1}, {0, 0, 0}), traj({1, 1}, {0, 0})};
    std::vector<std::size_t> gz{0, 1};
    for (const auto& row : reinforce_pp_advantages(zeros, gz, 0.9, false, 1e-8))
        for (double x : row) EXPECT_EQ(x, 0.0);

    std::vector<Trajectory> empty;
    EXPECT_THROW(reinforce_pp_advantages(empty, {}, 1.0, false, 1e-8), EmptyBatchError);
}

TEST(ReinforcePP, RewardToGoAndWhitening) {
    std::vector<Trajectory> b{traj({0, 1, 0, 1}, {0, 0.5, 0, 2.0})};
    std::vector<std::size_t> g{0};
    auto pre = reinforce_pp_returns(b, g, 0.5, false);
    EXPECT_EQ(pre[0][1], 0.5 + 0.5 * 2.0);
    EXPECT_EQ(pre[0][3], 2.0);
    EXPECT_EQ(pre[0][0], 0.0);
    auto post = reinforce_pp_advantages(b, g, 0.5, false, 0.0);
    EXPECT_NEAR(post[0][1], -1.0, 1e-12);
    EXPECT_NEAR(post[0][3], 1.0, 1e-12);
    EXPECT_EQ(post[0][0], 0.0);
}

TEST(ActorLoss, Examples) {
    auto r1 = actor_loss(Vec{-1, -2}, Vec{-1, -2}, Vec{1, -1}, Mask{1, 1}, 0.2);
    EXPECT_EQ(r1.loss, 0.0);
    auto r2 = actor_loss(Vec{0.0}, Vec{std::log(2.0)}, Vec{1.0}, Mask{1}, 0.2);
    EXPECT_NEAR(r2.loss, -1.2, 1e-15);
    EXPECT_EQ(r2.grad[0], 0.0);  // clipped branch has no gradient
    EXPECT_THROW(actor_loss(Vec{0}, Vec{0}, Vec{1}, Mask{0}, 0.2), EmptyMaskError);
}

TEST(ActorLoss, ExcludedPositionsIgnored) {
    Vec old{-1, -0.5, -2}, now{-0.9, -0.7, -1.5}, adv{0.3, -1, 2};
    Mask m{1, 0, 1};
    auto base = actor_loss(old, now, adv, m, 0.2);
    Vec old2 = old, now2 = now, adv2 = adv;
    old2[1] = 5;
    now2[1] = -40;
    adv2[1] = 1e6;
    auto moved = actor_loss(old2, now2, adv2, m, 0.2);
    EXPECT_EQ(base.loss, moved.loss);
    EXPECT_EQ(base.grad, moved.grad);
    EXPECT_EQ(base.grad[1], 0.0);
    auto diluted = actor_loss(old, now, adv, m, 0.2, false);
    EXPECT_NE(diluted.grad[1], 0.0);
}

TEST(ActorLoss, ClipInactiveEqualsSurrogate) {
    Vec old{-1, -2, -0.5}, now{-0.95, -2.1, -0.45}, adv{1, -2, 0.5};
    auto r = actor_loss(old, now, adv, Mask{1, 1, 1}, 0.2);
    double s = 0.0;
    for (int i = 0; i < 3; ++i) s += std::exp(now[i] - old[i]) * adv[i];
    EXPECT_NEAR(r.loss, -s / 3, 1e-15);
}

TEST(ActorLoss, GradientMatchesFiniteDifferences) {
    Rng rng(4);
    for (int n = 0; n < 100; ++n) {
        const std::size_t len = 1 + rng.below(8);
        Vec old(len), now(len), adv(len);
        Mask m(len);
        for (std::size_t i = 0; i < len; ++i) {
            old[i] = rng.uniform(-3, 0);
            now[i] = old[i] + rng.uniform(-0.5, 0.5);
            adv[i] = rng.uniform(-2, 2);
            m[i] = rng.bernoulli(0.7);
        }
        m[0] = 1;
        auto r = actor_loss(old, now, adv, m, 0.2);
        for (std::size_t i = 0; i < len; ++i) {
            const double ratio = std::exp(now[i] - old[i]);
            if (std::abs(ratio - 0.8) < 1e-3 || std::abs(ratio - 1.2) < 1e-3) continue;  // kink
            const double h = 1e-6;
            Vec up = now, dn = now;
            up[i] += h;
            dn[i] -= h;
            const double fd = (actor_loss(old, up, adv, m, 0.2).loss - actor_loss(old, dn, adv, m, 0.2).loss) / (2 * h);
            EXPECT_LE(std::abs(fd - r.grad[i]), 1e-6 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST(CriticLoss, Examples) {
    auto perfect = critic_loss(Vec{0.5, 1}, Vec{0.5, 1}, Mask{1, 1});
    EXPECT_EQ(perfect.loss, 0.0);
    auto one = critic_loss(Vec{0}, Vec{1}, Mask{1});
    EXPECT_EQ(one.loss, 1.0);
    EXPECT_EQ(one.grad[0], -2.0);
    auto a = critic_loss(Vec{0.2, 7, 0.1}, Vec{0, -3, 1}, Mask{1, 0, 1});
    auto b = critic_loss(Vec{0.2, -9, 0.1}, Vec{0, 4, 1}, Mask{1, 0, 1});
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(a.grad[1], 0.0);
    EXPECT_THROW(critic_loss(Vec{0}, Vec{0}, Mask{0}), EmptyMaskError);
}

TEST(Broadcast, Examples) {
    Mask m{0, 1, 1};
    EXPECT_EQ(broadcast_scalar_advantage(m, 0.0), (Vec{0, 0, 0}));
    EXPECT_EQ(broadcast_scalar_advantage(m, 2.0), (Vec{0, 2, 2}));
    EXPECT_EQ(broadcast_scalar_advantage(m, 2.0, false), (Vec{2, 2, 2}));
}

TEST(KlPenalty, ZeroAtIdentity) {
    auto k = kl_penalty(Vec{-1, -2}, Vec{-1, -2}, Mask{1, 1});
    EXPECT_EQ(k.loss, 0.0);
    EXPECT_EQ(k.grad, (Vec{0, 0}));
    auto k2 = kl_penalty(Vec{-1, -2}, Vec{-0.5, -2.5}, Mask{1, 1});
    EXPECT_GT(k2.loss, 0.0);
}

TEST(RLConfig, Validation) {
    RLConfig c;
    EXPECT_NO_THROW(c.validate());
    c.gamma = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = RLConfig{};
    c.algorithm = Algorithm::grpo;
    c.group_size = 1;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_EQ(algorithm_from_string("reinforce_pp_baseline"), Algorithm::reinforce_pp_baseline);
    EXPECT_THROW(algorithm_from_string("sac"), ConfigError);
}
