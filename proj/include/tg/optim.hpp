#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tg/tensor.hpp"

namespace tg {

// AdamW with decoupled weight decay and bias-corrected moments.
// Parameters are registered once with a stable name; step() reads each
// parameter's populated gradient buffer and updates values in place.
class AdamW {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
    };

    explicit AdamW(Options opts) : opts_(opts) {}

    void add_param(const std::string& name, const Tensor& t);

    // Per-call learning rate override (schedules mutate this, not Options).
    void set_lr(double lr) { opts_.lr = lr; }
    double lr() const { return opts_.lr; }

    // One update over all registered params. Throws NumericError if any
    // registered parameter has no gradient buffer.
    void step();
    void zero_grad();

    int64_t t() const { return t_; }

    struct Slot {
        std::string name;
        Tensor param;
        std::vector<double> m, v;
    };
    const std::vector<Slot>& slots() const { return slots_; }

private:
    Options opts_;
    std::vector<Slot> slots_;
    int64_t t_ = 0;
};

// Linear warmup to lr_max over warmup_steps, then cosine decay to zero at
// total_steps. step is 0-based.
double lr_at_step(int64_t step, int64_t warmup_steps, int64_t total_steps, double lr_max);

}  // namespace tg
