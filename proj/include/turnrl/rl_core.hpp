#pragma once

// Advantage estimators and losses for token-level policy optimization with
// action masks.
//
// Loss mask: the actor loss averages only over agent-generated tokens.
// Advantage mask: the GAE recursion runs over the condensed sequence of
// agent-generated tokens, so prompt and environment tokens never enter the
// value bootstrap and receive zero advantage.

#include "turnrl/errors.hpp"
#include "turnrl/token_mdp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace turnrl {

enum class Algorithm { ppo, grpo, reinforce_pp, reinforce_pp_baseline, rloo };

inline const char* to_string(Algorithm a) {
    switch (a) {
        case Algorithm::ppo: return "ppo";
        case Algorithm::grpo: return "grpo";
        case Algorithm::reinforce_pp: return "reinforce_pp";
        case Algorithm::reinforce_pp_baseline: return "reinforce_pp_baseline";
        case Algorithm::rloo: return "rloo";
    }
    return "ppo";
}

inline Algorithm algorithm_from_string(const std::string& s) {
    for (auto a : {Algorithm::ppo, Algorithm::grpo, Algorithm::reinforce_pp,
                   Algorithm::reinforce_pp_baseline, Algorithm::rloo})
        if (s == to_string(a)) return a;
    throw ConfigError("unknown algorithm '" + s + "'");
}

struct RLConfig {
    Algorithm algorithm = Algorithm::ppo;
    double gamma = 1.0;
    double lambda = 0.95;
    double clip_eps = 0.2;
    int group_size = 8;
    double norm_eps = 1e-8;
    bool loss_mask_enabled = true;
    bool advantage_mask_enabled = true;
    bool whiten_advantages = true;  // ppo only; group methods are already normalized
    double kl_coef = 0.0;           // penalty toward the rollout policy; off by default
    double value_coef = 0.5;

    bool uses_groups() const noexcept {
        return algorithm == Algorithm::grpo || algorithm == Algorithm::rloo ||
               algorithm == Algorithm::reinforce_pp_baseline;
    }
    bool uses_critic() const noexcept { return algorithm == Algorithm::ppo; }

    void validate() const {
        if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
        if (!(clip_eps > 0.0)) throw ConfigError("clip_eps must be positive");
        if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
        if (uses_groups() && group_size < 2)
            throw ConfigError(std::string(to_string(algorithm)) + " needs group_size >= 2");
        if (kl_coef < 0.0 || value_coef < 0.0) throw ConfigError("coefficients must be >= 0");
    }
};

struct AdvantageBatch {
    std::vector<double> advantages;
    std::vector<double> returns;
    std::vector<std::uint8_t> defined_mask;
};

namespace detail {

inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw DimensionError(std::string(what) + ": arrays differ in length");
}

inline void require_finite(std::span<const double> xs, const char* what) {
    for (double x : xs)
        if (!std::isfinite(x)) throw NumericalError(std::string(what) + ": non-finite input");
}

} // namespace detail

// GAE over the positions selected by `mask` (advantage mask enabled) or
// over every position (disabled). gamma = 0 is accepted here so that the
// one-step case can be checked directly; RLConfig restricts training runs.
inline AdvantageBatch masked_gae(std::span<const double> rewards, std::span<const double> values,
                                 std::span<const std::uint8_t> mask, double gamma, double lambda,
                                 bool advantage_mask_enabled = true) {
    const std::size_t n = rewards.size();
    detail::require_same_length(n, values.size(), "masked_gae");
    detail::require_same_length(n, mask.size(), "masked_gae");
    detail::require_finite(rewards, "masked_gae rewards");
    detail::require_finite(values, "masked_gae values");
    if (std::find(mask.begin(), mask.end(), std::uint8_t{1}) == mask.end())
        throw EmptyMaskError("masked_gae needs at least one action position");

    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i)
        if (!advantage_mask_enabled || mask[i]) idx.push_back(i);

    AdvantageBatch out;
    out.advantages.assign(n, 0.0);
    out.returns.assign(n, 0.0);
    out.defined_mask.assign(n, 0);
    double running = 0.0;
    double next_value = 0.0;
    for (std::size_t j = idx.size(); j-- > 0;) {
        const std::size_t i = idx[j];
        const double delta = rewards[i] + gamma * next_value - values[i];
        running = delta + gamma * lambda * running;
        out.advantages[i] = running;
        out.returns[i] = running + values[i];
        out.defined_mask[i] = 1;
        next_value = values[i];
    }
    return out;
}

inline double mean_of(std::span<const double> xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

// Population standard deviation.
inline double std_of(std::span<const double> xs) {
    const double m = mean_of(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(xs.size()));
}

inline std::vector<double> grpo_advantages(std::span<const double> group_rewards,
                                           double norm_eps = 1e-8) {
    if (group_rewards.size() < 2) throw GroupSizeError("grpo needs a group of at least 2");
    detail::require_finite(group_rewards, "grpo_advantages");
    const double m = mean_of(group_rewards);
    const double sd = std_of(group_rewards);
    std::vector<double> out;
    out.reserve(group_rewards.size());
    for (double r : group_rewards) out.push_back((r - m) / (sd + norm_eps));
    return out;
}

// A_i = r_i - mean of the other rewards, computed as (G r_i - sum) / (G - 1).
inline std::vector<double> rloo_advantages(std::span<const double> group_rewards) {
    const std::size_t g = group_rewards.size();
    if (g < 2) throw GroupSizeError("rloo needs a group of at least 2");
    detail::require_finite(group_rewards, "rloo_advantages");
    double total = 0.0;
    for (double r : group_rewards) total += r;
    std::vector<double> out;
    out.reserve(g);
    for (double r : group_rewards)
        out.push_back((static_cast<double>(g) * r - total) / static_cast<double>(g - 1));
    return out;
}

// Scalar at action positions (every position when the advantage mask is off).
inline std::vector<double> broadcast_scalar_advantage(std::span<const std::uint8_t> mask,
                                                      double scalar,
                                                      bool advantage_mask_enabled = true) {
    std::vector<double> out(mask.size(), 0.0);
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (!advantage_mask_enabled || mask[i]) out[i] = scalar;
    return out;
}

inline std::vector<double> broadcast_scalar_advantage(const Trajectory& traj, double scalar,
                                                      bool advantage_mask_enabled = true) {
    return broadcast_scalar_advantage(traj.action_mask, scalar, advantage_mask_enabled);
}

// Discounted reward-to-go per position of each trajectory (over action
// positions only when the advantage mask is on), minus the mean total
// reward of the trajectory's group when a baseline is requested.
inline std::vector<std::vector<double>> reinforce_pp_returns(std::span<const Trajectory> batch,
                                                             std::span<const std::size_t> group_ids,
                                                             double gamma, bool use_group_baseline,
                                                             bool advantage_mask_enabled = true) {
    if (batch.empty()) throw EmptyBatchError("reinforce++ needs a non-empty batch");
    detail::require_same_length(batch.size(), group_ids.size(), "reinforce_pp group ids");
    std::vector<double> baseline(batch.size(), 0.0);
    if (use_group_baseline) {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            double s = 0.0;
            std::size_t n = 0;
            for (std::size_t j = 0; j < batch.size(); ++j)
                if (group_ids[j] == group_ids[i]) {
                    s += batch[j].total_reward();
                    ++n;
                }
            baseline[i] = s / static_cast<double>(n);
        }
    }
    std::vector<std::vector<double>> out;
    out.reserve(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& t = batch[b];
        detail::require_same_length(t.rewards.size(), t.action_mask.size(), "reinforce_pp");
        std::vector<double> g(t.size(), 0.0);
        double running = 0.0;
        for (std::size_t i = t.size(); i-- > 0;) {
            if (advantage_mask_enabled && !t.action_mask[i]) continue;
            running = t.rewards[i] + gamma * running;
            g[i] = running - baseline[b];
        }
        out.push_back(std::move(g));
    }
    return out;
}

// (x - mean) / (std + eps) across the selected positions of all rows.
inline void whiten(std::vector<std::vector<double>>& rows,
                   const std::vector<std::vector<std::uint8_t>>& selected, double norm_eps) {
    std::vector<double> pool;
    for (std::size_t b = 0; b < rows.size(); ++b)
        for (std::size_t i = 0; i < rows[b].size(); ++i)
            if (selected[b][i]) pool.push_back(rows[b][i]);
    if (pool.empty()) return;
    const double m = mean_of(pool);
    const double sd = std_of(pool);
    for (std::size_t b = 0; b < rows.size(); ++b)
        for (std::size_t i = 0; i < rows[b].size(); ++i)
            rows[b][i] = selected[b][i] ? (rows[b][i] - m) / (sd + norm_eps) : 0.0;
}

inline std::vector<std::vector<double>> reinforce_pp_advantages(
    std::span<const Trajectory> batch, std::span<const std::size_t> group_ids, double gamma,
    bool use_group_baseline, double norm_eps, bool advantage_mask_enabled = true) {
    auto rows = reinforce_pp_returns(batch, group_ids, gamma, use_group_baseline,
                                     advantage_mask_enabled);
    std::vector<std::vector<std::uint8_t>> selected;
    for (const auto& t : batch)
        selected.push_back(advantage_mask_enabled ? t.action_mask
                                                  : std::vector<std::uint8_t>(t.size(), 1));
    whiten(rows, selected, norm_eps);
    return rows;
}

struct LossResult {
    double loss = 0.0;
    std::vector<double> grad;  // d loss / d input, per position
    std::size_t included = 0;
};

// Clipped surrogate: loss = -mean over included positions of
// min(ratio*A, clip(ratio, 1-eps, 1+eps)*A), ratio = exp(new - old).
inline LossResult actor_loss(std::span<const double> old_logprobs,
                             std::span<const double> new_logprobs,
                             std::span<const double> advantages,
                             std::span<const std::uint8_t> mask, double clip_eps,
                             bool loss_mask_enabled = true) {
    const std::size_t n = new_logprobs.size();
    detail::require_same_length(n, old_logprobs.size(), "actor_loss");
    detail::require_same_length(n, advantages.size(), "actor_loss");
    detail::require_same_length(n, mask.size(), "actor_loss");
    LossResult out;
    out.grad.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) out.included += (!loss_mask_enabled || mask[i]) ? 1 : 0;
    if (out.included == 0) throw EmptyMaskError("actor_loss has no included positions");
    const double inv = 1.0 / static_cast<double>(out.included);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (loss_mask_enabled && !mask[i]) continue;
        const double ratio = std::exp(new_logprobs[i] - old_logprobs[i]);
        const double a = advantages[i];
        const double unclipped = ratio * a;
        const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * a;
        if (unclipped <= clipped) {
            sum += unclipped;
            out.grad[i] = -unclipped * inv;  // d(ratio)/d(new) = ratio
        } else {
            sum += clipped;
        }
    }
    out.loss = -sum * inv;
    return out;
}

// Mean squared error over the included positions.
inline LossResult critic_loss(std::span<const double> values_new, std::span<const double> returns,
                              std::span<const std::uint8_t> mask) {
    const std::size_t n = values_new.size();
    detail::require_same_length(n, returns.size(), "critic_loss");
    detail::require_same_length(n, mask.size(), "critic_loss");
    LossResult out;
    out.grad.assign(n, 0.0);
    for (auto m : mask) out.included += m ? 1 : 0;
    if (out.included == 0) throw EmptyMaskError("critic_loss has no included positions");
    const double inv = 1.0 / static_cast<double>(out.included);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        const double diff = values_new[i] - returns[i];
        sum += diff * diff;
        out.grad[i] = 2.0 * diff * inv;
    }
    out.loss = sum * inv;
    return out;
}

// k3 estimate of KL(old || new) averaged over included positions.
inline LossResult kl_penalty(std::span<const double> old_logprobs,
                             std::span<const double> new_logprobs,
                             std::span<const std::uint8_t> mask, bool loss_mask_enabled = true) {
    const std::size_t n = new_logprobs.size();
    detail::require_same_length(n, old_logprobs.size(), "kl_penalty");
    detail::require_same_length(n, mask.size(), "kl_penalty");
    LossResult out;
    out.grad.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) out.included += (!loss_mask_enabled || mask[i]) ? 1 : 0;
    if (out.included == 0) throw EmptyMaskError("kl_penalty has no included positions");
    const double inv = 1.0 / static_cast<double>(out.included);
    for (std::size_t i = 0; i < n; ++i) {
        if (loss_mask_enabled && !mask[i]) continue;
        const double d = old_logprobs[i] - new_logprobs[i];
        out.loss += (std::exp(d) - d - 1.0) * inv;
        out.grad[i] = (1.0 - std::exp(d)) * inv;
    }
    return out;
}

} // namespace turnrl
