#include "tg/optim.hpp"

#include <cmath>

#include "tg/errors.hpp"

namespace tg {

void AdamW::add_param(const std::string& name, const Tensor& t) {
    if (!t.requires_grad())
        throw ConfigError("optimizer param '" + name + "' does not require grad");
    for (const Slot& s : slots_)
        if (s.name == name) throw ConfigError("duplicate optimizer param '" + name + "'");
    Slot s;
    s.name = name;
    s.param = t;
    s.m.assign(static_cast<size_t>(t.numel()), 0.0);
    s.v.assign(static_cast<size_t>(t.numel()), 0.0);
    slots_.push_back(std::move(s));
}

void AdamW::step() {
    ++t_;
    double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (Slot& s : slots_) {
        if (!s.param.has_grad())
            throw NumericError("no gradient for optimizer param '" + s.name + "'");
        const Buffer& g = s.param.grad();
        Buffer& w = s.param.mutable_data();
        for (size_t i = 0; i < w.size(); ++i) {
            s.m[i] = opts_.beta1 * s.m[i] + (1.0 - opts_.beta1) * g[i];
            s.v[i] = opts_.beta2 * s.v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
            double mhat = s.m[i] / bc1;
            double vhat = s.v[i] / bc2;
            w[i] -= opts_.lr * (mhat / (std::sqrt(vhat) + opts_.eps) + opts_.weight_decay * w[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (Slot& s : slots_) s.param.zero_grad();
}

double lr_at_step(int64_t step, int64_t warmup_steps, int64_t total_steps, double lr_max) {
    if (warmup_steps > 0 && step < warmup_steps)
        return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (step >= total_steps) return 0.0;
    double denom = static_cast<double>(total_steps - warmup_steps);
    double progress = denom > 0 ? static_cast<double>(step - warmup_steps) / denom : 1.0;
    constexpr double kPi = 3.14159265358979323846;
    return lr_max * 0.5 * (1.0 + std::cos(kPi * progress));
}

}  // namespace tg
