#pragma once

// Limited-memory BFGS with an Armijo backtracking line search. Every accepted
// step strictly decreases the objective.

#include "calibra/core.hpp"

#include <cmath>
#include <deque>
#include <vector>

namespace calibra {

struct LbfgsOptions {
    int max_iters = 1000;
    double tol = 1e-6;  // relative change of the objective
    int memory = 10;
    int max_backtracks = 60;
    double armijo = 1e-4;
};

struct LbfgsResult {
    Vector x;
    double f_initial = 0.0;
    double f = 0.0;
    int iterations = 0;
    bool converged = false;
    std::vector<double> trace;  // objective after every accepted step
};

/// Minimizes f. `fg(x, grad)` returns f(x) and writes its gradient into grad.
template <typename Objective>
LbfgsResult minimize_lbfgs(Objective&& fg, Vector x, const LbfgsOptions& opts = {})
{
    LbfgsResult res;
    Vector g(x.size());
    double f = fg(x, g);
    if (!std::isfinite(f) || !g.allFinite()) throw NumericalError("objective is not finite at the starting point");
    res.f_initial = f;
    res.trace.push_back(f);

    std::deque<Vector> s_hist, y_hist;
    std::deque<double> rho_hist;
    Vector g_new(x.size());

    for (int iter = 0; iter < opts.max_iters; ++iter) {
        // Two-loop recursion for the search direction.
        Vector d = -g;
        std::vector<double> alpha(s_hist.size());
        for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
            alpha[i] = rho_hist[i] * s_hist[i].dot(d);
            d -= alpha[i] * y_hist[i];
        }
        if (!s_hist.empty()) d *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
        for (std::size_t i = 0; i < s_hist.size(); ++i) {
            const double beta = rho_hist[i] * y_hist[i].dot(d);
            d += (alpha[i] - beta) * s_hist[i];
        }
        double slope = g.dot(d);
        if (!(slope < 0.0)) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = -g;
            slope = -g.squaredNorm();
            if (slope == 0.0) {
                res.converged = true;
                break;
            }
        }

        double step = s_hist.empty() ? std::min(1.0, 1.0 / std::sqrt(g.squaredNorm())) : 1.0;
        bool accepted = false;
        Vector x_new;
        double f_new = f;
        for (int bt = 0; bt < opts.max_backtracks; ++bt) {
            x_new = x + step * d;
            f_new = fg(x_new, g_new);
            if (std::isfinite(f_new) && g_new.allFinite() && f_new <= f + opts.armijo * step * slope && f_new < f) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            if (s_hist.empty()) break;  // no descent even along the gradient
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            continue;
        }

        const Vector s = x_new - x;
        const Vector y = g_new - g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            s_hist.push_back(s);
            y_hist.push_back(y);
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > opts.memory) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }

        const double change = std::abs(f - f_new);
        x = x_new;
        g = g_new;
        const double f_old = f;
        f = f_new;
        res.iterations = iter + 1;
        res.trace.push_back(f);
        if (change <= opts.tol * std::max(1.0, std::abs(f_old))) {
            res.converged = true;
            break;
        }
    }
    res.x = std::move(x);
    res.f = f;
    return res;
}

}  // namespace calibra
