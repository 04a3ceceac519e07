#include "bmlm/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "bmlm/errors.hpp"

namespace bmlm {

void AdamWConfig::validate() const {
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("betas must lie in [0, 1)");
    }
    if (epsilon <= 0.0) throw ConfigError("epsilon must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (peak_lr <= 0.0) throw ConfigError("peak_lr must be positive");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be non-negative");
}

void Schedule::validate(const AdamWConfig& config) const {
    if (warmup_steps == 0 || warmup_steps >= total_steps) {
        throw ConfigError("schedule requires 0 < warmup_steps < total_steps");
    }
    if (floor_lr < 0.0 || floor_lr >= config.peak_lr) {
        throw ConfigError("schedule requires 0 <= floor_lr < peak_lr");
    }
}

double lr_at(std::size_t step, const Schedule& schedule, const AdamWConfig& config) {
    schedule.validate(config);
    if (step > schedule.total_steps) {
        throw ContractError("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                            std::to_string(schedule.total_steps));
    }
    if (step <= schedule.warmup_steps) {
        return config.peak_lr * static_cast<double>(step) /
               static_cast<double>(schedule.warmup_steps);
    }
    const double progress = static_cast<double>(step - schedule.warmup_steps) /
                            static_cast<double>(schedule.total_steps - schedule.warmup_steps);
    return schedule.floor_lr +
           0.5 * (config.peak_lr - schedule.floor_lr) * (1.0 + std::cos(progress * std::numbers::pi));
}

template <class S>
AdamW<S>::AdamW(AdamWConfig config) : config_(std::move(config)) {
    config_.validate();
}

template <class S>
void AdamW<S>::step(const std::vector<ParamRef<S>>& params, double lr) {
    // Reject the whole step before touching any state: a half-applied update
    // would desynchronize parameters from moments.
    double sq_norm = 0.0;
    for (const ParamRef<S>& p : params) {
        if (p.param == nullptr || p.grad == nullptr) {
            throw ContractError("adamw step: null parameter or gradient for '" + p.name + "'");
        }
        if (!p.param->same_shape(*p.grad)) {
            throw ShapeError("adamw step: gradient shape mismatch for '" + p.name + "'");
        }
        for (const S g : p.grad->data) {
            const double gd = static_cast<double>(g);
            if (!std::isfinite(gd)) {
                throw DomainError("non-finite gradient in '" + p.name + "', step rejected");
            }
            sq_norm += gd * gd;
        }
    }
    double grad_scale = 1.0;
    if (config_.clip_norm > 0.0) {
        const double norm = std::sqrt(sq_norm);
        if (norm > config_.clip_norm) grad_scale = config_.clip_norm / norm;
    }

    t_ += 1;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (const ParamRef<S>& p : params) {
        Slot& slot = slots_[p.name];
        if (slot.m.numel() == 1 && slot.m.shape.empty() && !p.param->shape.empty()) {
            slot.m = Tensor<S>(p.param->shape);
            slot.v = Tensor<S>(p.param->shape);
        }
        if (!slot.m.same_shape(*p.param)) {
            throw ShapeError("adamw step: state shape mismatch for '" + p.name + "'");
        }
        const bool decay = config_.weight_decay > 0.0 && !config_.no_decay_names.count(p.name);
        for (std::size_t i = 0; i < p.param->data.size(); ++i) {
            const double g = static_cast<double>(p.grad->data[i]) * grad_scale;
            const double m = config_.beta1 * static_cast<double>(slot.m.data[i]) +
                             (1.0 - config_.beta1) * g;
            const double v = config_.beta2 * static_cast<double>(slot.v.data[i]) +
                             (1.0 - config_.beta2) * g * g;
            slot.m.data[i] = static_cast<S>(m);
            slot.v.data[i] = static_cast<S>(v);
            const double m_hat = m / bc1;
            const double v_hat = v / bc2;
            double value = static_cast<double>(p.param->data[i]);
            value -= lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
            if (decay) value -= lr * config_.weight_decay * static_cast<double>(p.param->data[i]);
            p.param->data[i] = static_cast<S>(value);
        }
    }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace bmlm
