#pragma once

#include <cmath>
#include <vector>

#include "starvc/numerics/tape.hpp"

namespace starvc::num {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    int warmup_steps = 100;
    double clip_norm = 1.0;  // <= 0 disables clipping
};

/// Adam with linear warmup and global-norm clipping. Parameters whose
/// `touched` flag is down are skipped entirely: no moment decay, no update.
class Adam {
public:
    struct StepInfo {
        double grad_norm = 0.0;
        bool clipped = false;
        double lr = 0.0;
    };

    Adam(std::vector<Param<float>*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (auto* p : params_) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
            t_.push_back(0);
        }
    }

    const AdamConfig& config() const noexcept { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    long long step_count() const noexcept { return steps_; }

    double current_lr() const {
        if (cfg_.warmup_steps <= 0) return cfg_.lr;
        const double f = std::min(1.0, static_cast<double>(steps_ + 1) / cfg_.warmup_steps);
        return cfg_.lr * f;
    }

    StepInfo step() {
        StepInfo info;
        double sq = 0.0;
        for (auto* p : params_)
            if (p->touched)
                for (float g : p->grad.values()) sq += static_cast<double>(g) * g;
        info.grad_norm = std::sqrt(sq);
        if (!std::isfinite(info.grad_norm)) throw NumericError("optimizer: non-finite gradient norm");
        double k = 1.0;
        if (cfg_.clip_norm > 0.0 && info.grad_norm > cfg_.clip_norm) {
            k = cfg_.clip_norm / info.grad_norm;
            info.clipped = true;
        }
        info.lr = current_lr();
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto* p = params_[i];
            if (!p->touched || p->frozen) continue;
            const long long t = ++t_[i];
            const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < p->value.size(); ++j) {
                const double g = p->grad[j] * k;
                m[j] = static_cast<float>(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g);
                v[j] = static_cast<float>(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g);
                const double upd = info.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
                p->value[j] = static_cast<float>(p->value[j] - upd);
            }
        }
        ++steps_;
        return info;
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    // Moment buffers exposed for checkpointing.
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }
    std::vector<long long>& param_steps() { return t_; }
    void set_step_count(long long s) { steps_ = s; }

private:
    std::vector<Param<float>*> params_;
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::vector<long long> t_;
    long long steps_ = 0;
};

}  // namespace starvc::num
