#pragma once

#include <cmath>
#include <functional>

#include "stitch/params.hpp"
#include "stitch/tensor.hpp"

namespace stitch {

// AdamW with decoupled weight decay and linear learning-rate warm-up.
template <typename S>
class AdamW {
public:
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int warmup_steps = 0;

    AdamW() = default;
    AdamW(double lr_, double wd, int warmup) : lr(lr_), weight_decay(wd), warmup_steps(warmup) {}

    int64_t step_count() const { return t_; }

    double effective_lr() const {
        double warm = warmup_steps > 0 ? std::min(1.0, (double)(t_) / warmup_steps) : 1.0;
        return lr * warm;
    }

    void step(const std::vector<Parameter<S>*>& params) {
        if (slots_.size() < params.size()) slots_.resize(params.size());
        ++t_;
        double lr_t = effective_lr();
        double bc1 = 1.0 - std::pow(beta1, (double)t_);
        double bc2 = 1.0 - std::pow(beta2, (double)t_);
        for (size_t pi = 0; pi < params.size(); ++pi) {
            Parameter<S>& p = *params[pi];
            if (!p.trainable()) continue;
            auto& slot = slots_[pi];
            size_t n = (size_t)p.value.numel();
            if (slot.m.size() != n) {
                slot.m.assign(n, S(0));
                slot.v.assign(n, S(0));
            }
            p.value.node()->ensure_grad();
            S* w = p.value.data();
            const S* g = p.value.grad().data();
            for (size_t i = 0; i < n; ++i) {
                double gi = (double)g[i];
                double m = slot.m[i] = (S)(beta1 * slot.m[i] + (1 - beta1) * gi);
                double v = slot.v[i] = (S)(beta2 * slot.v[i] + (1 - beta2) * gi * gi);
                double mh = m / bc1, vh = v / bc2;
                // decay on the value itself, not through the moments
                w[i] -= (S)(lr_t * (mh / (std::sqrt(vh) + eps) + weight_decay * (double)w[i]));
            }
        }
    }

private:
    struct Slot {
        std::vector<S> m, v;
    };
    std::vector<Slot> slots_;
    int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0;
    int64_t checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    bool aborted = false;
    std::string message;

    double worst() const {
        double w = 0;
        for (auto& e : entries) w = std::max(w, e.max_rel_err);
        return w;
    }
    bool ok(double tol) const { return !aborted && worst() < tol; }
};

// Compares backprop gradients of a scalar-loss fragment against central
// finite differences. The fragment must be pure: repeated calls with the same
// parameter values produce the same loss. Frozen parameters are skipped.
// max_checks_per_param > 0 subsamples large tensors (deterministic stride).
template <typename S>
GradCheckReport grad_check(const std::function<Tensor<S>()>& loss_fn,
                           const std::vector<Parameter<S>*>& params, double h,
                           int64_t max_checks_per_param = 0) {
    GradCheckReport report;

    Tensor<S> loss = loss_fn();
    if (!std::isfinite((double)loss.item())) {
        report.aborted = true;
        report.message = "non-finite loss in gradient check";
        return report;
    }
    for (auto* p : params) p->value.zero_grad();
    backward(loss);

    std::vector<std::vector<S>> analytic;
    for (auto* p : params) {
        p->value.node()->ensure_grad();
        analytic.push_back(p->value.grad());
    }

    double floor_scale = 0;
    for (auto& g : analytic)
        for (S v : g) floor_scale = std::max(floor_scale, std::abs((double)v));
    double floor = (std::is_same<S, float>::value ? 1e-2 : 1e-8) * std::max(1.0, floor_scale);

    NoGradGuard ng;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter<S>& p = *params[pi];
        if (!p.trainable()) continue;
        GradCheckEntry entry;
        entry.name = p.name;
        int64_t n = p.value.numel();
        int64_t stride = 1;
        if (max_checks_per_param > 0 && n > max_checks_per_param)
            stride = (n + max_checks_per_param - 1) / max_checks_per_param;
        S* w = p.value.data();
        for (int64_t i = 0; i < n; i += stride) {
            S keep = w[i];
            w[i] = keep + (S)h;
            double lp = (double)loss_fn().item();
            w[i] = keep - (S)h;
            double lm = (double)loss_fn().item();
            w[i] = keep;
            if (!std::isfinite(lp) || !std::isfinite(lm)) {
                report.aborted = true;
                report.message = "non-finite loss while perturbing " + p.name;
                return report;
            }
            double fd = (lp - lm) / (2 * h);
            double ag = (double)analytic[pi][i];
            double denom = std::max({std::abs(ag), std::abs(fd), floor});
            entry.max_rel_err = std::max(entry.max_rel_err, std::abs(ag - fd) / denom);
            ++entry.checked;
        }
        report.entries.push_back(entry);
    }
    return report;
}

}  // namespace stitch
