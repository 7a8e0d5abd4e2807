#include <cmath>

#include "geofuse/trainer.hpp"

namespace geofuse {

void Adam::step(double lr, const ParamRefs& params, const std::map<std::string, Tensor>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (const auto& [path, param] : params) {
        auto git = grads.find(path);
        if (git == grads.end()) continue;  // parameter unused this step
        const Tensor& g = git->second;
        Tensor& m = m_.try_emplace(path, Tensor(param->shape())).first->second;
        Tensor& v = v_.try_emplace(path, Tensor(param->shape())).first->second;
        for (int i = 0; i < param->size(); ++i) {
            const double gi = g.at(i);
            m.at(i) = cfg_.beta1 * m.at(i) + (1.0 - cfg_.beta1) * gi;
            v.at(i) = cfg_.beta2 * v.at(i) + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = m.at(i) / bc1;
            const double vhat = v.at(i) / bc2;
            param->at(i) -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

std::string to_string(Schedule s) { return s == Schedule::WarmupCosine ? "WarmupCosine" : "Constant"; }

Schedule schedule_from_string(const std::string& s) {
    if (s == "WarmupCosine") return Schedule::WarmupCosine;
    if (s == "Constant") return Schedule::Constant;
    throw_contract_error("unknown schedule '" + s + "'");
}

double lr_at(const TrainConfig& cfg, int step) {
    if (cfg.schedule == Schedule::Constant) return cfg.lr_peak;
    if (step < cfg.warmup_steps) {
        return cfg.lr_peak * static_cast<double>(step) / cfg.warmup_steps;
    }
    const int decay_span = cfg.steps - 1 - cfg.warmup_steps;
    if (decay_span <= 0) return cfg.lr_peak;
    const double frac = static_cast<double>(step - cfg.warmup_steps) / decay_span;
    return cfg.lr_peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

}  // namespace geofuse
