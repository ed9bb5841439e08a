#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "starvc/numerics.hpp"

// Small building blocks shared by the encoders, oracles and the stream LM.
namespace starvc::nn {

using num::BasicTensor;
using num::Param;
using num::Tape;
using num::Var;

/// Owning, address-stable collection of named parameters.
template <class T>
class ParamSet {
public:
    ParamSet() = default;
    ParamSet(const ParamSet&) = delete;
    ParamSet& operator=(const ParamSet&) = delete;
    ParamSet(ParamSet&&) noexcept = default;
    ParamSet& operator=(ParamSet&&) noexcept = default;

    Param<T>* add(const std::string& name, BasicTensor<T> value) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
        params_.push_back(std::make_unique<Param<T>>(name, std::move(value)));
        index_[name] = params_.back().get();
        return params_.back().get();
    }

    Param<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : it->second;
    }

    std::vector<Param<T>*> all() const {
        std::vector<Param<T>*> out;
        for (const auto& p : params_) out.push_back(p.get());
        return out;
    }

    std::size_t size() const noexcept { return params_.size(); }
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->value.size();
        return n;
    }

    void set_frozen(bool f) {
        for (auto& p : params_) p->frozen = f;
    }
    bool frozen() const {
        for (const auto& p : params_)
            if (!p->frozen) return false;
        return !params_.empty();
    }
    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }
    double grad_norm() const {
        double s = 0.0;
        for (const auto& p : params_)
            for (T g : p->grad.values()) s += static_cast<double>(g) * g;
        return std::sqrt(s);
    }

private:
    std::vector<std::unique_ptr<Param<T>>> params_;
    std::map<std::string, Param<T>*> index_;
};

template <class T>
struct Linear {
    Param<T>* weight = nullptr;  // in x out
    Param<T>* bias = nullptr;    // out, optional

    Linear() = default;
    Linear(ParamSet<T>& ps, const std::string& name, int in, int out, Rng& rng, bool with_bias = true, double gain = 1.0) {
        auto w = BasicTensor<T>::randn({in, out}, rng);
        const double s = gain / std::sqrt(static_cast<double>(in));
        for (auto& v : w.values()) v = static_cast<T>(v * s);
        weight = ps.add(name + ".w", std::move(w));
        if (with_bias) bias = ps.add(name + ".b", BasicTensor<T>({out}));
    }

    int in() const { return weight->value.dim(0); }
    int out() const { return weight->value.dim(1); }

    Var<T> operator()(Tape<T>& t, Var<T> x) const {
        auto y = num::matmul(x, t.param(*weight));
        return bias ? num::add_bias(y, t.param(*bias)) : y;
    }
};

/// Classification head scoring rows by scaled cosine to one learned
/// prototype per class, with an additive margin subtracted from the true
/// class during training. Training with it shapes the embedding so that
/// cosine similarity separates classes.
template <class T>
struct AngularHead {
    Param<T>* prototypes = nullptr;  // classes x dim
    double scale = 16.0;
    double margin = 0.2;

    AngularHead() = default;
    AngularHead(ParamSet<T>& ps, const std::string& name, int dim, int classes, Rng& rng, double scale_ = 16.0, double margin_ = 0.2)
        : scale(scale_), margin(margin_) {
        prototypes = ps.add(name + ".prototypes", BasicTensor<T>::randn({classes, dim}, rng));
    }

    int classes() const { return prototypes->value.dim(0); }

    /// Cosines [rows x classes] between L2-normalized rows and prototypes.
    Var<T> cosines(Tape<T>& t, Var<T> x) const {
        const int dim = prototypes->value.dim(1);
        const auto ones = t.constant(BasicTensor<T>({dim}, T(1)));
        const double unit = 1.0 / std::sqrt(static_cast<double>(dim));
        auto normalize = [&](Var<T> v) { return num::scale(num::rms_norm(v, ones), unit); };
        return num::matmul(normalize(x), num::transpose(normalize(t.param(*prototypes))));
    }

    /// Margin-penalized cross-entropy of rows `x` against `labels`.
    Var<T> loss(Tape<T>& t, Var<T> x, const std::vector<int>& labels) const {
        auto cos = cosines(t, x);
        BasicTensor<T> penalty({cos.rows(), classes()});
        for (std::size_t r = 0; r < labels.size(); ++r) penalty(static_cast<int>(r), labels[r]) = static_cast<T>(-margin);
        const std::vector<std::uint8_t> mask(labels.size(), 1);
        return num::cross_entropy(num::scale(num::add(cos, t.constant(std::move(penalty))), scale), labels, mask);
    }
};

template <class T>
struct RmsNorm {
    Param<T>* gain = nullptr;

    RmsNorm() = default;
    RmsNorm(ParamSet<T>& ps, const std::string& name, int dim) : gain(ps.add(name + ".g", BasicTensor<T>({dim}, T(1)))) {}

    Var<T> operator()(Tape<T>& t, Var<T> x) const { return num::rms_norm(x, t.param(*gain)); }
};

template <class T>
struct Mlp {
    Linear<T> first, second;

    Mlp() = default;
    Mlp(ParamSet<T>& ps, const std::string& name, int in, int hidden, int out, Rng& rng)
        : first(ps, name + ".0", in, hidden, rng), second(ps, name + ".1", hidden, out, rng) {}

    Var<T> operator()(Tape<T>& t, Var<T> x) const { return second(t, num::silu(first(t, x))); }
};

/// Pre-norm transformer block: x + attn(norm(x)), then x + ffn(norm(x)).
template <class T>
struct Block {
    RmsNorm<T> attn_norm, ffn_norm;
    Linear<T> q, k, v, o;
    Mlp<T> ffn;
    int heads = 1;

    Block() = default;
    Block(ParamSet<T>& ps, const std::string& name, int dim, int n_heads, int hidden, Rng& rng, int depth = 1)
        : attn_norm(ps, name + ".attn_norm", dim),
          ffn_norm(ps, name + ".ffn_norm", dim),
          q(ps, name + ".q", dim, dim, rng, false),
          k(ps, name + ".k", dim, dim, rng, false),
          v(ps, name + ".v", dim, dim, rng, false),
          o(ps, name + ".o", dim, dim, rng, false, 1.0 / std::sqrt(2.0 * depth)),
          heads(n_heads) {
        ffn.first = Linear<T>(ps, name + ".ffn.0", dim, hidden, rng);
        ffn.second = Linear<T>(ps, name + ".ffn.1", hidden, dim, rng, true, 1.0 / std::sqrt(2.0 * depth));
    }

    /// `positions`: one track shared by all heads or one per head; empty = no rotation.
    Var<T> operator()(Tape<T>& t, Var<T> x, bool causal, const std::vector<std::vector<int>>& positions) const {
        auto h = attn_norm(t, x);
        auto qq = q(t, h), kk = k(t, h), vv = v(t, h);
        if (!positions.empty()) {
            qq = num::rope_apply(qq, heads, positions);
            kk = num::rope_apply(kk, heads, positions);
        }
        x = num::add(x, o(t, num::attention(qq, kk, vv, heads, causal)));
        return num::add(x, ffn(t, ffn_norm(t, x)));
    }
};

inline std::vector<std::vector<int>> iota_positions(int n) {
    std::vector<int> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    return {p};
}

/// Row-wise argmax; ties go to the lower index.
template <class T>
std::vector<int> argmax_rows(const BasicTensor<T>& logits) {
    std::vector<int> out;
    for (int r = 0; r < logits.rows(); ++r) {
        int best = 0;
        for (int c = 1; c < logits.cols(); ++c)
            if (logits(r, c) > logits(r, best)) best = c;
        out.push_back(best);
    }
    return out;
}

/// Average of scalar losses, summed in order.
template <class T>
Var<T> mean_of(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw DimensionError("mean_of: no inputs");
    Var<T> acc = xs.front();
    for (std::size_t i = 1; i < xs.size(); ++i) acc = num::add(acc, xs[i]);
    return num::scale(acc, 1.0 / static_cast<double>(xs.size()));
}

struct FitOptions {
    int steps = 1000;
    num::AdamConfig adam{};
    const char* what = "training";
};

/// Generic optimization loop: `loss_fn(tape, step)` builds the loss.
/// Non-finite values abort with a TrainingError naming the last finite step.
template <class LossFn>
std::vector<double> fit(ParamSet<float>& ps, const FitOptions& opt, LossFn&& loss_fn) {
    std::vector<num::Param<float>*> trainable;
    for (auto* p : ps.all())
        if (!p->frozen) trainable.push_back(p);
    num::Adam adam(trainable, opt.adam);
    std::vector<double> history;
    for (int step = 0; step < opt.steps; ++step) {
        Tape<float> tape;
        ps.zero_grad();
        double lv = 0.0;
        try {
            auto loss = loss_fn(tape, step);
            lv = loss.value().item();
            tape.backward(loss);
            adam.step();
        } catch (const NumericError& e) {
            throw TrainingError(std::string(opt.what) + " diverged at step " + std::to_string(step) +
                                " (last finite step " + std::to_string(step - 1) + "): " + e.what());
        }
        history.push_back(lv);
    }
    return history;
}

}  // namespace starvc::nn
