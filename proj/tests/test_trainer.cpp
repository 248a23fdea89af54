#include "turnrl/trainer.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace turnrl;

namespace {

RunConfig tiny(Algorithm alg = Algorithm::ppo) {
    RunConfig c;
    c.task.hop.n_entities = 8;
    c.task.hop.n_relations = 4;
    c.task.hop.n_distractors = 2;
    c.rl.algorithm = alg;
    c.rl.group_size = 4;
    c.policy.window = 8;
    c.policy.embed = 4;
    c.policy.hidden = 8;
    c.optimizer.epochs = 1;
    c.optimizer.minibatch_size = 8;
    c.schedule.updates = 3;
    c.schedule.episodes_per_update = 16;
    c.schedule.eval_interval = 2;
    c.schedule.eval_size = 10;
    c.warm_start.episodes = 32;
    c.warm_start.epochs = 1;
    return c;
}

// answers without ever opening a span
struct Mute {
    TokenId t;
    TokenDecision decide(std::span<const TokenId>, const Decoding&, Rng&) const { return {t, 0.0, 0.0}; }
    double value(std::span<const TokenId>) const { return 0.0; }
};

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST(RunConfig, JsonRoundTrip) {
    RunConfig c = tiny(Algorithm::grpo);
    c.env.process_reward_enabled = true;
    c.seeds.ablation = {7, 9};
    const auto j = to_json(c);
    const RunConfig back = run_config_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(to_json(back).dump(), j.dump());
    EXPECT_EQ(back.rl.algorithm, Algorithm::grpo);
    EXPECT_EQ(back.seeds.ablation, (std::vector<std::uint64_t>{7, 9}));
}

TEST(RunConfig, MissingKeysKeepDefaults) {
    const RunConfig c = run_config_from_json(nlohmann::json::parse(R"({"rl": {"algorithm": "rloo"}})"));
    EXPECT_EQ(c.rl.algorithm, Algorithm::rloo);
    EXPECT_EQ(c.schedule.updates, RunConfig{}.schedule.updates);
}

TEST(RunConfig, Validation) {
    auto c = tiny(Algorithm::grpo);
    c.schedule.episodes_per_update = 10;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny();
    c.seeds.eval = c.seeds.train;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny();
    c.temperature = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny();
    c.env.limits.max_turns = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Evaluate, ScriptedAgentScoresOne) {
    auto c = tiny();
    c.task.hop.hops = 2;
    const auto vocab = c.vocabulary();
    const auto set = make_eval_set(c, vocab);
    ASSERT_EQ(set.size(), 10u);
    ScriptedPolicy oracle{hopqa::ScriptedAgent(vocab)};
    EXPECT_EQ(evaluate(oracle, set, vocab, c.env).mean_em, 1.0);
    EXPECT_EQ(evaluate(oracle, set, vocab, c.env, 5, 4).mean_em, 1.0);
    EXPECT_EQ(evaluate(oracle, std::span(set.data(), 1), vocab, c.env).mean_em, 1.0);
}

TEST(Evaluate, NeverAnsweringScoresZero) {
    auto c = tiny();
    const auto vocab = c.vocabulary();
    const auto set = make_eval_set(c, vocab);
    const auto rep = evaluate(Mute{vocab.id("e1")}, set, vocab, c.env);
    EXPECT_EQ(rep.mean_em, 0.0);
    for (const auto& r : rep.records) EXPECT_FALSE(r.predicted);
    EXPECT_THROW(evaluate(Mute{0}, std::span<const hopqa::Instance>{}, vocab, c.env), PreconditionError);
}

TEST(Evaluate, SetIsSeparateFromTraining) {
    auto c = tiny();
    const auto vocab = c.vocabulary();
    auto a = make_eval_set(c, vocab);
    auto b = make_eval_set(c, vocab);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].seed, b[i].seed);
    for (int u = 0; u < 100; ++u)
        for (const auto& e : a) EXPECT_NE(stream_seed(c.seeds.train, stream::train, u), e.seed);
}

TEST(Ablation, Arms) {
    EXPECT_EQ(ablation_arms(Algorithm::ppo).size(), 3u);
    EXPECT_EQ(ablation_arms(Algorithm::grpo).size(), 2u);
    EXPECT_THROW(ablation_arms(Algorithm::rloo), ConfigError);
    const auto ppo = ablation_arms(Algorithm::ppo);
    EXPECT_TRUE(ppo[0].loss_mask && ppo[0].advantage_mask);
    EXPECT_TRUE(ppo[1].loss_mask && !ppo[1].advantage_mask);
    EXPECT_TRUE(!ppo[2].loss_mask && !ppo[2].advantage_mask);
}

TEST(Ablation, MedianAndCsv) {
    AblationReport r;
    r.algorithm = Algorithm::grpo;
    r.arms = ablation_arms(Algorithm::grpo);
    for (double em : {0.5, 0.1, 0.3}) r.rows.push_back({"loss_mask", true, true, 1, em});
    for (double em : {0.2, 0.4}) r.rows.push_back({"loss_mask_disabled", false, true, 1, em});
    EXPECT_EQ(r.median("loss_mask"), 0.3);
    EXPECT_DOUBLE_EQ(r.median("loss_mask_disabled"), 0.3);
    std::ostringstream os;
    write_ablation_csv(os, r);
    EXPECT_NE(os.str().find("grpo,loss_mask,1,1,median,,0.3\n"), std::string::npos);
}

TEST(Train, DeterministicMetrics) {
    const auto a = train(tiny());
    const auto b = train(tiny());
    std::ostringstream sa, sb;
    write_metrics_csv(sa, a.metrics);
    write_metrics_csv(sb, b.metrics);
    EXPECT_EQ(sa.str(), sb.str());
    EXPECT_TRUE(a.params == b.params);
    ASSERT_EQ(a.metrics.size(), 3u);
    EXPECT_TRUE(a.metrics[1].eval_em);
    EXPECT_FALSE(a.metrics[0].eval_em);
    EXPECT_TRUE(a.metrics[2].eval_em);
    EXPECT_TRUE(a.random_init_eval_em && a.untrained_eval_em);
}

TEST(Train, ThreadCountDoesNotChangeResults) {
    auto c = tiny();
    const auto a = train(c);
    c.threads = 4;
    const auto b = train(c);
    EXPECT_TRUE(a.params == b.params);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
    auto c = tiny();
    c.optimizer.learning_rate = 0.0;
    c.warm_start.enabled = false;
    const auto r = train(c);
    EXPECT_TRUE(r.params == init_params(c.seeds.train, c.dims()));
}

TEST(Train, CriticOnlyForPpo) {
    const auto ppo = train(tiny(Algorithm::ppo));
    const auto grpo = train(tiny(Algorithm::grpo));
    EXPECT_GT(ppo.critic_loss_calls, 0u);
    EXPECT_EQ(grpo.critic_loss_calls, 0u);
    for (const auto& m : grpo.metrics) EXPECT_FALSE(m.critic_loss);
    for (const auto& m : ppo.metrics) EXPECT_TRUE(m.critic_loss);
}

TEST(Train, OtherEstimatorsRun) {
    for (auto alg : {Algorithm::rloo, Algorithm::reinforce_pp, Algorithm::reinforce_pp_baseline}) {
        const auto r = train(tiny(alg));
        for (const auto& m : r.metrics) {
            EXPECT_TRUE(std::isfinite(m.actor_loss));
            EXPECT_GE(m.mean_episode_reward, -1.0);
            EXPECT_LE(m.mean_episode_reward, 1.0);
        }
    }
}

TEST(Train, WritesArtifacts) {
    const auto dir = std::filesystem::temp_directory_path() / "turnrl_test_train";
    std::filesystem::remove_all(dir);
    TrainOptions opts;
    opts.out_dir = dir;
    opts.dump_trajectories = true;
    auto c = tiny();
    const auto r = train(c, opts);
    for (const char* f : {"metrics.csv", "timing.csv", "checkpoint.txt", "eval.jsonl", "eval_instances.jsonl",
                          "config.json", "trajectories.jsonl"})
        EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;

    const auto vocab = c.vocabulary();
    std::ifstream in(dir / "trajectories.jsonl");
    std::string line;
    std::vector<double> rewards;
    while (std::getline(in, line)) {
        const auto t = trajectory_from_json(nlohmann::json::parse(line), vocab);
        EXPECT_NO_THROW(validate(t));
        rewards.push_back(t.total_reward());
    }
    ASSERT_EQ(rewards.size(), 48u);
    for (int u = 0; u < 3; ++u) {
        double s = 0.0;
        for (int i = 0; i < 16; ++i) s += rewards[u * 16 + i];
        EXPECT_NEAR(s / 16, r.metrics[u].mean_episode_reward, 1e-12);
    }
    const auto header = slurp(dir / "metrics.csv").substr(0, slurp(dir / "metrics.csv").find('\n'));
    EXPECT_EQ(header.find("wall"), std::string::npos);
    std::stringstream ck(slurp(dir / "checkpoint.txt"));
    EXPECT_TRUE(load_checkpoint(ck).first == r.params);
    std::filesystem::remove_all(dir);
}
