#pragma once

// Tiny autoregressive actor-critic over a fixed token window.
//
//   x      = concat_p(token_embedding[ctx_p] + position_embedding[p])   (W*d)
//   hidden = tanh(W1 x + b1)                                            (h)
//   logits = W_logit hidden + b_logit                                   (|V|)
//   value  = w_value . hidden_v + b_value
//
// hidden_v is the actor's hidden layer (shared trunk) or the hidden layer
// of a separate critic trunk with its own embeddings.

#include "turnrl/errors.hpp"
#include "turnrl/random.hpp"
#include "turnrl/vocabulary.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace turnrl {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct PolicyDims {
    int window = 32;
    int embed = 16;
    int hidden = 64;
    int vocab = 0;
    bool separate_critic = false;

    int input_size() const noexcept { return window * embed; }

    void validate() const {
        if (window <= 0 || embed <= 0 || hidden <= 0 || vocab <= 0)
            throw DimensionError("policy dimensions must be positive (W=" + std::to_string(window) +
                                 ", d=" + std::to_string(embed) + ", h=" + std::to_string(hidden) +
                                 ", |V|=" + std::to_string(vocab) + ")");
    }

    bool operator==(const PolicyDims&) const = default;
};

struct Trunk {
    MatrixXd token_embedding;     // |V| x d
    MatrixXd position_embedding;  // W x d
    MatrixXd w1;                  // h x W*d
    MatrixXd b1;                  // h x 1

    static Trunk zeros(const PolicyDims& dims) {
        return Trunk{MatrixXd::Zero(dims.vocab, dims.embed), MatrixXd::Zero(dims.window, dims.embed),
                     MatrixXd::Zero(dims.hidden, dims.input_size()), MatrixXd::Zero(dims.hidden, 1)};
    }
};

// Also used as the gradient type: same shape as the parameters.
struct PolicyParams {
    PolicyDims dims;
    Trunk actor;
    std::optional<Trunk> critic;
    MatrixXd logit_w;  // |V| x h
    MatrixXd logit_b;  // |V| x 1
    MatrixXd value_w;  // 1 x h
    MatrixXd value_b;  // 1 x 1

    static PolicyParams zeros(const PolicyDims& dims) {
        dims.validate();
        PolicyParams p;
        p.dims = dims;
        p.actor = Trunk::zeros(dims);
        if (dims.separate_critic) p.critic = Trunk::zeros(dims);
        p.logit_w = MatrixXd::Zero(dims.vocab, dims.hidden);
        p.logit_b = MatrixXd::Zero(dims.vocab, 1);
        p.value_w = MatrixXd::Zero(1, dims.hidden);
        p.value_b = MatrixXd::Zero(1, 1);
        return p;
    }

    // Parameter blocks in a fixed order (checkpoints, optimizers, tests).
    std::vector<std::pair<std::string, MatrixXd*>> blocks() {
        std::vector<std::pair<std::string, MatrixXd*>> out = {
            {"actor.token_embedding", &actor.token_embedding},
            {"actor.position_embedding", &actor.position_embedding},
            {"actor.w1", &actor.w1},
            {"actor.b1", &actor.b1}};
        if (critic) {
            out.push_back({"critic.token_embedding", &critic->token_embedding});
            out.push_back({"critic.position_embedding", &critic->position_embedding});
            out.push_back({"critic.w1", &critic->w1});
            out.push_back({"critic.b1", &critic->b1});
        }
        out.push_back({"logit_w", &logit_w});
        out.push_back({"logit_b", &logit_b});
        out.push_back({"value_w", &value_w});
        out.push_back({"value_b", &value_b});
        return out;
    }

    std::vector<std::pair<std::string, const MatrixXd*>> blocks() const {
        std::vector<std::pair<std::string, const MatrixXd*>> out;
        for (auto& [name, m] : const_cast<PolicyParams*>(this)->blocks()) out.push_back({name, m});
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, m] : blocks()) n += static_cast<std::size_t>(m->size());
        return n;
    }

    double squared_norm() const {
        double s = 0.0;
        for (const auto& [name, m] : blocks()) s += m->squaredNorm();
        return s;
    }

    bool all_finite() const {
        for (const auto& [name, m] : blocks())
            if (!m->allFinite()) return false;
        return true;
    }

    void scale(double c) {
        for (auto& [name, m] : blocks()) *m *= c;
    }

    // this += c * other
    void add_scaled(const PolicyParams& other, double c) {
        if (!(dims == other.dims)) throw DimensionError("parameter shapes differ");
        auto mine = blocks();
        auto theirs = other.blocks();
        for (std::size_t i = 0; i < mine.size(); ++i) *mine[i].second += c * *theirs[i].second;
    }

    bool operator==(const PolicyParams& o) const {
        if (!(dims == o.dims)) return false;
        auto a = blocks();
        auto b = o.blocks();
        for (std::size_t i = 0; i < a.size(); ++i)
            if (*a[i].second != *b[i].second) return false;
        return true;
    }
};

using PolicyGradient = PolicyParams;

inline PolicyParams init_params(std::uint64_t seed, const PolicyDims& dims, double scale = 0.08) {
    PolicyParams p = PolicyParams::zeros(dims);
    Rng rng(seed);
    for (auto& [name, m] : p.blocks())
        for (Eigen::Index c = 0; c < m->cols(); ++c)
            for (Eigen::Index r = 0; r < m->rows(); ++r) (*m)(r, c) = rng.uniform(-scale, scale);
    return p;
}

// The W tokens preceding position `pos` of `sequence`, left-padded.
inline TokenSeq context_window(std::span<const TokenId> sequence, std::size_t pos, int window,
                               TokenId pad) {
    TokenSeq ctx(static_cast<std::size_t>(window), pad);
    const std::size_t take = std::min<std::size_t>(pos, static_cast<std::size_t>(window));
    for (std::size_t k = 0; k < take; ++k) ctx[window - take + k] = sequence[pos - take + k];
    return ctx;
}

struct PolicyOutput {
    VectorXd logits;
    double value = 0.0;
};

namespace detail {

struct TrunkCache {
    VectorXd x;
    VectorXd hidden;
};

inline void check_window(const PolicyDims& dims, std::span<const TokenId> ctx) {
    if (static_cast<int>(ctx.size()) != dims.window)
        throw DimensionError("context has " + std::to_string(ctx.size()) + " tokens, window is " +
                             std::to_string(dims.window));
    for (auto t : ctx)
        if (static_cast<int>(t) >= dims.vocab)
            throw InvalidToken("token " + std::to_string(t) + " outside vocabulary of size " +
                               std::to_string(dims.vocab));
}

inline TrunkCache trunk_forward(const Trunk& trunk, const PolicyDims& dims,
                                std::span<const TokenId> ctx) {
    TrunkCache c;
    c.x.resize(dims.input_size());
    for (int p = 0; p < dims.window; ++p)
        c.x.segment(p * dims.embed, dims.embed) =
            (trunk.token_embedding.row(ctx[p]) + trunk.position_embedding.row(p)).transpose();
    c.hidden = (trunk.w1 * c.x + trunk.b1.col(0)).array().tanh().matrix();
    return c;
}

inline void trunk_backward(const Trunk& trunk, const PolicyDims& dims, std::span<const TokenId> ctx,
                           const TrunkCache& c, const VectorXd& d_hidden, Trunk& grad) {
    const VectorXd d_pre = d_hidden.array() * (1.0 - c.hidden.array().square());
    grad.w1.noalias() += d_pre * c.x.transpose();
    grad.b1.col(0) += d_pre;
    const VectorXd dx = trunk.w1.transpose() * d_pre;
    for (int p = 0; p < dims.window; ++p) {
        const auto seg = dx.segment(p * dims.embed, dims.embed).transpose();
        grad.token_embedding.row(ctx[p]) += seg;
        grad.position_embedding.row(p) += seg;
    }
}

inline double log_sum_exp(const VectorXd& v) {
    const double m = v.maxCoeff();
    return m + std::log((v.array() - m).exp().sum());
}

} // namespace detail

inline PolicyOutput forward(const PolicyParams& params, std::span<const TokenId> ctx) {
    detail::check_window(params.dims, ctx);
    const auto a = detail::trunk_forward(params.actor, params.dims, ctx);
    PolicyOutput out;
    out.logits = params.logit_w * a.hidden + params.logit_b.col(0);
    if (params.critic) {
        const auto c = detail::trunk_forward(*params.critic, params.dims, ctx);
        out.value = params.value_w.row(0).dot(c.hidden) + params.value_b(0, 0);
    } else {
        out.value = params.value_w.row(0).dot(a.hidden) + params.value_b(0, 0);
    }
    return out;
}

inline void check_finite(const VectorXd& logits) {
    if (!logits.allFinite()) throw NumericalError("non-finite logits");
}

// log softmax(logits)[token], max-subtracted.
inline double logprob(const VectorXd& logits, TokenId token) {
    if (static_cast<Eigen::Index>(token) >= logits.size())
        throw InvalidToken("token " + std::to_string(token) + " outside logits of size " +
                           std::to_string(logits.size()));
    return logits(token) - detail::log_sum_exp(logits);
}

inline VectorXd softmax(const VectorXd& logits) {
    const VectorXd e = (logits.array() - logits.maxCoeff()).exp().matrix();
    return e / e.sum();
}

// Greedy decoding breaks ties toward the lowest index.
inline TokenId greedy_token(const VectorXd& logits) {
    check_finite(logits);
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < logits.size(); ++i)
        if (logits(i) > logits(best)) best = i;
    return static_cast<TokenId>(best);
}

inline TokenId sample_token(const VectorXd& logits, double temperature, Rng& rng) {
    if (!(temperature > 0.0) || !std::isfinite(temperature))
        throw PreconditionError("temperature must be a positive finite scalar");
    check_finite(logits);
    const VectorXd p = softmax(logits / temperature);
    const double u = rng.uniform();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        acc += p(i);
        if (u < acc) return static_cast<TokenId>(i);
    }
    // rounding left u above the final cumulative sum
    for (Eigen::Index i = p.size() - 1; i > 0; --i)
        if (p(i) > 0.0) return static_cast<TokenId>(i);
    return 0;
}

struct Decoding {
    double temperature = 1.0;
    bool greedy = false;
};

inline TokenId decode(const VectorXd& logits, const Decoding& dec, Rng& rng) {
    return dec.greedy ? greedy_token(logits) : sample_token(logits, dec.temperature, rng);
}

// One upstream seed pair per (context, token): d objective / d logprob of
// `token`, and d objective / d value.
struct BackwardSample {
    TokenSeq context;
    TokenId token = 0;
    double d_logprob = 0.0;
    double d_value = 0.0;
};

inline PolicyGradient backward(const PolicyParams& params, std::span<const BackwardSample> batch) {
    PolicyGradient grad = PolicyParams::zeros(params.dims);
    for (const auto& s : batch) {
        detail::check_window(params.dims, s.context);
        if (static_cast<int>(s.token) >= params.dims.vocab)
            throw DimensionError("target token outside the logit head");
        if (!std::isfinite(s.d_logprob) || !std::isfinite(s.d_value))
            throw NumericalError("non-finite upstream gradient");
        if (s.d_logprob == 0.0 && s.d_value == 0.0) continue;

        const auto a = detail::trunk_forward(params.actor, params.dims, s.context);
        VectorXd d_hidden = VectorXd::Zero(params.dims.hidden);
        if (s.d_logprob != 0.0) {
            const VectorXd logits = params.logit_w * a.hidden + params.logit_b.col(0);
            VectorXd d_logits = -s.d_logprob * softmax(logits);
            d_logits(s.token) += s.d_logprob;
            grad.logit_w.noalias() += d_logits * a.hidden.transpose();
            grad.logit_b.col(0) += d_logits;
            d_hidden.noalias() += params.logit_w.transpose() * d_logits;
        }
        if (s.d_value != 0.0) {
            if (params.critic) {
                const auto c = detail::trunk_forward(*params.critic, params.dims, s.context);
                grad.value_w.row(0) += s.d_value * c.hidden.transpose();
                grad.value_b(0, 0) += s.d_value;
                const VectorXd d_hidden_v = s.d_value * params.value_w.row(0).transpose();
                detail::trunk_backward(*params.critic, params.dims, s.context, c, d_hidden_v,
                                       *grad.critic);
            } else {
                grad.value_w.row(0) += s.d_value * a.hidden.transpose();
                grad.value_b(0, 0) += s.d_value;
                d_hidden += s.d_value * params.value_w.row(0).transpose();
            }
        }
        detail::trunk_backward(params.actor, params.dims, s.context, a, d_hidden, grad.actor);
    }
    return grad;
}

// Descent step on a loss gradient with global-norm clipping; returns the
// pre-clip norm. clip_norm <= 0 disables clipping.
inline double sgd_step(PolicyParams& params, const PolicyGradient& grad, double learning_rate,
                       double clip_norm) {
    const double norm = std::sqrt(grad.squared_norm());
    if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm");
    double scale = learning_rate;
    if (clip_norm > 0.0 && norm > clip_norm) scale *= clip_norm / norm;
    params.add_scaled(grad, -scale);
    return norm;
}

// Versioned text checkpoint.
struct CheckpointHeader {
    int version = 1;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
};

inline void save_checkpoint(std::ostream& os, const PolicyParams& params,
                            const CheckpointHeader& header) {
    const auto& d = params.dims;
    os << "turnrl-checkpoint " << header.version << "\n";
    os << "W " << d.window << " d " << d.embed << " h " << d.hidden << " V " << d.vocab
       << " separate_critic " << (d.separate_critic ? 1 : 0) << " seed " << header.seed << " step "
       << header.step << "\n";
    os.precision(17);
    for (const auto& [name, m] : params.blocks()) {
        os << "block " << name << " " << m->rows() << " " << m->cols() << "\n";
        for (Eigen::Index r = 0; r < m->rows(); ++r) {
            for (Eigen::Index c = 0; c < m->cols(); ++c) os << (c ? " " : "") << (*m)(r, c);
            os << "\n";
        }
    }
}

inline std::pair<PolicyParams, CheckpointHeader> load_checkpoint(std::istream& is) {
    auto expect = [&](const std::string& word) {
        std::string got;
        if (!(is >> got) || got != word)
            throw FormatError("checkpoint: expected '" + word + "', got '" + got + "'");
    };
    CheckpointHeader header;
    PolicyDims dims;
    int separate = 0;
    expect("turnrl-checkpoint");
    is >> header.version;
    if (header.version != 1)
        throw FormatError("unsupported checkpoint version " + std::to_string(header.version));
    expect("W"); is >> dims.window;
    expect("d"); is >> dims.embed;
    expect("h"); is >> dims.hidden;
    expect("V"); is >> dims.vocab;
    expect("separate_critic"); is >> separate;
    expect("seed"); is >> header.seed;
    expect("step"); is >> header.step;
    if (!is) throw FormatError("checkpoint: malformed header");
    dims.separate_critic = separate != 0;
    PolicyParams params = PolicyParams::zeros(dims);
    for (auto& [name, m] : params.blocks()) {
        expect("block");
        expect(name);
        Eigen::Index rows = 0, cols = 0;
        is >> rows >> cols;
        if (rows != m->rows() || cols != m->cols())
            throw FormatError("checkpoint: block " + name + " has wrong shape");
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) is >> (*m)(r, c);
        if (!is) throw FormatError("checkpoint: truncated block " + name);
    }
    return {std::move(params), header};
}

} // namespace turnrl
