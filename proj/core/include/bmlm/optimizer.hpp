#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include "bmlm/tensor.hpp"

namespace bmlm {

struct AdamWConfig {
    double peak_lr = 1.6e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double epsilon = 1e-8;
    double weight_decay = 1.6e-5;
    // 0 disables clipping; otherwise gradients are rescaled so their global
    // L2 norm does not exceed this.
    double clip_norm = 0.0;
    // Parameter names exempt from weight decay (typically norm gains/biases).
    std::unordered_set<std::string> no_decay_names;

    void validate() const;
};

// Warmup-cosine schedule: linear from 0 to peak over warmup_steps, then a
// half-cosine from peak down to floor_lr at total_steps.
struct Schedule {
    std::size_t warmup_steps = 100;
    std::size_t total_steps = 0;
    double floor_lr = 0.0;

    void validate(const AdamWConfig& config) const;
};

// Throws ContractError when step > total_steps. Continuous at the warmup
// boundary: both branches give peak_lr at step == warmup_steps.
double lr_at(std::size_t step, const Schedule& schedule, const AdamWConfig& config);

// A named parameter tensor paired with its gradient for one update.
template <class S>
struct ParamRef {
    std::string name;
    Tensor<S>* param = nullptr;
    const Tensor<S>* grad = nullptr;
};

// Decoupled AdamW: weight decay is applied directly to the parameter, not
// folded into the gradient. Moment slots are keyed by parameter name and
// created on first use; per-element math runs in double regardless of S.
template <class S>
class AdamW {
public:
    struct Slot {
        Tensor<S> m;
        Tensor<S> v;
    };

    explicit AdamW(AdamWConfig config);

    // One update over every listed parameter. All gradients are checked
    // finite before anything mutates; a bad gradient rejects the whole step.
    void step(const std::vector<ParamRef<S>>& params, double lr);

    std::size_t step_count() const { return t_; }
    void set_step_count(std::size_t t) { t_ = t; }

    const AdamWConfig& config() const { return config_; }

    // Ordered by name so serialization is deterministic.
    const std::map<std::string, Slot>& slots() const { return slots_; }
    std::map<std::string, Slot>& mutable_slots() { return slots_; }

private:
    AdamWConfig config_;
    std::map<std::string, Slot> slots_;
    std::size_t t_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace bmlm
