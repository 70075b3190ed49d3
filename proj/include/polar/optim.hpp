#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "polar/linalg.hpp"
#include "polar/tape.hpp"

namespace polar {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;  // decoupled, off by default
};

// Adam with f64 moments over a fixed list of f32 parameter tensors.
// Parameter order is fixed at construction; step() consumes gradients in
// the same order.
class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    // Registers a parameter and returns its slot index.
    int add_param(size_t n_entries) {
        m_.emplace_back(n_entries, 0.0);
        v_.emplace_back(n_entries, 0.0);
        return static_cast<int>(m_.size() - 1);
    }

    void step(std::vector<Matrix*> params, const std::vector<const GradBuf*>& grads) {
        if (params.size() != m_.size() || grads.size() != m_.size()) {
            throw std::invalid_argument("adam: parameter/gradient count mismatch");
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (size_t p = 0; p < params.size(); ++p) {
            Matrix& w = *params[p];
            std::vector<double>& m = m_[p];
            std::vector<double>& v = v_[p];
            const GradBuf* g = grads[p];
            for (size_t i = 0; i < w.data.size(); ++i) {
                double gi = (g && !g->empty()) ? (*g)[i] : 0.0;
                if (cfg_.weight_decay != 0.0) gi += cfg_.weight_decay * w.data[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w.data[i] = static_cast<float>(w.data[i] -
                                               cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon));
            }
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

}  // namespace polar
