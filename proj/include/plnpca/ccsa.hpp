#ifndef PLNPCA_CCSA_HPP
#define PLNPCA_CCSA_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

/**
 * @file ccsa.hpp
 * @brief Box-constrained first-order maximizers.
 *
 * `maximize_mma` is a conservative convex separable approximation method with
 * moving asymptotes. Around the current point `x` each coordinate of the
 * (minimized) objective `f = -J` is replaced by
 *
 *     (sigma^2 g t + (sigma |g| + rho / 2) t^2) / (sigma^2 - t^2),   t = y - x,
 *
 * which matches `f` to first order, is convex on `|t| < sigma` and grows
 * without bound at the asymptotes `x +- sigma`. The separable subproblem has
 * a closed-form minimizer. A candidate is accepted only if the approximation
 * is conservative there (`f(y) <= approx(y)`); otherwise `rho` is raised and
 * the subproblem is solved again. Accepted iterates therefore never decrease J.
 * Between outer iterations the asymptote distances `sigma` grow where a
 * coordinate keeps moving in the same direction and shrink where it oscillates.
 *
 * `maximize_projected_gradient` is projected gradient ascent with Armijo
 * backtracking, kept as a simple reference with the same monotone contract.
 */

namespace plnpca {

struct AscentOptions {
    int max_iterations = 5000;
    /// Stop once `|J_new - J_old| <= ftol_rel |J_new|` holds this many accepted iterates in a row.
    double ftol_rel = 1e-6;
    int ftol_patience = 5;
    /// Stop once every coordinate moved by at most `xtol_rel * max(|x_j|, 1)`.
    double xtol_rel = 1e-10;
    /// Stop once the sup-norm of the projected gradient falls below this.
    double gtol = 1e-8;
    /// Conservativeness retries (or Armijo halvings) before giving up on an iteration.
    int max_inner = 60;
    bool record_trajectory = true;
};

enum class AscentStatus { ftol_reached, xtol_reached, gtol_reached, max_iterations, stalled };

inline const char* to_string(AscentStatus s) {
    switch (s) {
    case AscentStatus::ftol_reached:
        return "objective tolerance reached";
    case AscentStatus::xtol_reached:
        return "parameter tolerance reached";
    case AscentStatus::gtol_reached:
        return "gradient tolerance reached";
    case AscentStatus::max_iterations:
        return "maximum number of iterations reached";
    case AscentStatus::stalled:
        return "no admissible step could be found";
    }
    return "unknown";
}

struct AscentResult {
    Eigen::VectorXd x;
    double value = 0;
    Eigen::VectorXd gradient;
    int iterations = 0;
    int evaluations = 0;
    AscentStatus status = AscentStatus::max_iterations;
    std::string message;
    /// Objective at every accepted iterate, starting point included.
    std::vector<double> trajectory;

    bool converged() const {
        return status == AscentStatus::ftol_reached || status == AscentStatus::xtol_reached ||
               status == AscentStatus::gtol_reached;
    }
};

namespace internal {

inline double projected_gradient_norm(const Eigen::VectorXd& x, const Eigen::VectorXd& grad,
                                      const Eigen::VectorXd& lower, const Eigen::VectorXd& upper) {
    double out = 0;
    for (Eigen::Index j = 0; j < x.size(); ++j) {
        double g = grad(j);
        if ((x(j) <= lower(j) && g < 0) || (x(j) >= upper(j) && g > 0)) {
            continue;
        }
        out = std::max(out, std::abs(g));
    }
    return out;
}

/**
 * Shared stopping logic of both maximizers.
 */
class StoppingRule {
public:
    explicit StoppingRule(const AscentOptions& options) : options_(options) {}

    bool check(double previous, double current, const Eigen::VectorXd& x_old, const Eigen::VectorXd& x_new,
               double pgnorm, AscentStatus& status) {
        if (pgnorm <= options_.gtol) {
            status = AscentStatus::gtol_reached;
            return true;
        }
        if (std::abs(current - previous) <= options_.ftol_rel * std::abs(current)) {
            if (++streak_ >= options_.ftol_patience) {
                status = AscentStatus::ftol_reached;
                return true;
            }
        } else {
            streak_ = 0;
        }
        bool small = true;
        for (Eigen::Index j = 0; j < x_new.size() && small; ++j) {
            small = std::abs(x_new(j) - x_old(j)) <= options_.xtol_rel * std::max(std::abs(x_new(j)), 1.0);
        }
        if (small) {
            status = AscentStatus::xtol_reached;
            return true;
        }
        return false;
    }

private:
    const AscentOptions& options_;
    int streak_ = 0;
};

} // namespace internal

/**
 * Maximize `objective` over the box `[lower, upper]`.
 *
 * `objective(x, grad)` returns J at `x` and writes its gradient to `grad`. It may
 * throw `OverflowError`, which is treated as a rejected trial point.
 */
template<class Objective_>
AscentResult maximize_mma(Objective_&& objective, Eigen::VectorXd x, const Eigen::VectorXd& lower,
                          const Eigen::VectorXd& upper, const AscentOptions& options = {}) {
    const auto n = x.size();
    if (lower.size() != n || upper.size() != n) {
        throw DimensionError("bounds and starting point differ in size");
    }
    x = x.cwiseMax(lower).cwiseMin(upper);

    constexpr double rho_min = 1e-5;
    constexpr double sigma_grow = 1.2;
    constexpr double sigma_shrink = 0.7;

    Eigen::VectorXd sigma(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        bool bounded = std::isfinite(lower(j)) && std::isfinite(upper(j));
        sigma(j) = bounded ? 0.5 * (upper(j) - lower(j)) : 1.0;
    }

    AscentResult out;
    Eigen::VectorXd grad(n), trial_grad(n), trial(n), step(n);
    double value = objective(x, grad);
    out.evaluations = 1;
    if (!std::isfinite(value)) {
        throw OverflowError("objective is not finite at the starting point");
    }
    if (options.record_trajectory) {
        out.trajectory.push_back(value);
    }

    Eigen::VectorXd x_prev = x, x_prev2 = x;
    double rho = 1.0;
    internal::StoppingRule stopping(options);
    out.status = AscentStatus::max_iterations;

    if (internal::projected_gradient_norm(x, grad, lower, upper) <= options.gtol) {
        out.status = AscentStatus::gtol_reached;
    } else {
        for (int iter = 1; iter <= options.max_iterations; ++iter) {
            bool accepted = false;
            double trial_value = 0;
            for (int inner = 0; inner < options.max_inner; ++inner) {
                // Closed-form minimizer of the separable approximation of f = -J.
                double approx = -value;
                double w = 0;
                for (Eigen::Index j = 0; j < n; ++j) {
                    double g = -grad(j);
                    double s = sigma(j);
                    double c = s * std::abs(g) + 0.5 * rho;
                    double t = 0;
                    if (g != 0) {
                        double disc = std::max(c * c - g * g * s * s, 0.0);
                        t = -g * s * s / (c + std::sqrt(disc));
                    }
                    t = std::clamp(t, -0.9 * s, 0.9 * s);
                    double y = std::clamp(x(j) + t, lower(j), upper(j));
                    t = y - x(j);
                    trial(j) = y;
                    step(j) = t;
                    double t2 = t * t;
                    double denom = 1.0 / (s * s - t2);
                    approx += (s * s * g * t + s * std::abs(g) * t2 + 0.5 * rho * t2) * denom;
                    w += 0.5 * t2 * denom;
                }

                bool overflow = false;
                try {
                    trial_value = objective(trial, trial_grad);
                    overflow = !std::isfinite(trial_value);
                } catch (const OverflowError&) {
                    overflow = true;
                }
                ++out.evaluations;

                if (overflow) {
                    rho *= 10;
                    continue;
                }
                double f_trial = -trial_value;
                if (f_trial <= approx && trial_value >= value) {
                    accepted = true;
                    break;
                }
                if (w <= 0) {
                    break;
                }
                if (f_trial <= approx) {
                    // Conservative but lost to rounding; shorten the step.
                    rho *= 2;
                    continue;
                }
                rho = std::min(10 * rho, 1.1 * (rho + (f_trial - approx) / w));
            }

            if (!accepted) {
                out.status = AscentStatus::stalled;
                break;
            }

            x_prev2 = x_prev;
            x_prev = x;
            x = trial;
            double previous = value;
            value = trial_value;
            grad.swap(trial_grad);
            out.iterations = iter;
            if (options.record_trajectory) {
                out.trajectory.push_back(value);
            }

            if (iter >= 2) {
                for (Eigen::Index j = 0; j < n; ++j) {
                    double turn = (x(j) - x_prev(j)) * (x_prev(j) - x_prev2(j));
                    if (turn < 0) {
                        sigma(j) *= sigma_shrink;
                    } else if (turn > 0) {
                        sigma(j) *= sigma_grow;
                    }
                    bool bounded = std::isfinite(lower(j)) && std::isfinite(upper(j));
                    double width = bounded ? upper(j) - lower(j) : 1.0;
                    sigma(j) = std::clamp(sigma(j), 1e-8 * width, bounded ? 10 * width : 1e4);
                }
            }
            rho = std::max(0.1 * rho, rho_min);

            double pg = internal::projected_gradient_norm(x, grad, lower, upper);
            if (stopping.check(previous, value, x_prev, x, pg, out.status)) {
                break;
            }
        }
    }

    out.x = std::move(x);
    out.value = value;
    out.gradient = std::move(grad);
    out.message = to_string(out.status);
    return out;
}

/**
 * Projected gradient ascent with Armijo backtracking on the projection arc.
 */
template<class Objective_>
AscentResult maximize_projected_gradient(Objective_&& objective, Eigen::VectorXd x, const Eigen::VectorXd& lower,
                                         const Eigen::VectorXd& upper, const AscentOptions& options = {}) {
    const auto n = x.size();
    if (lower.size() != n || upper.size() != n) {
        throw DimensionError("bounds and starting point differ in size");
    }
    x = x.cwiseMax(lower).cwiseMin(upper);
    constexpr double armijo = 1e-4;

    AscentResult out;
    Eigen::VectorXd grad(n), trial_grad(n), trial(n);
    double value = objective(x, grad);
    out.evaluations = 1;
    if (!std::isfinite(value)) {
        throw OverflowError("objective is not finite at the starting point");
    }
    if (options.record_trajectory) {
        out.trajectory.push_back(value);
    }

    double step = 1.0 / std::max(grad.lpNorm<Eigen::Infinity>(), 1.0);
    internal::StoppingRule stopping(options);
    out.status = AscentStatus::max_iterations;

    if (internal::projected_gradient_norm(x, grad, lower, upper) <= options.gtol) {
        out.status = AscentStatus::gtol_reached;
    } else {
        for (int iter = 1; iter <= options.max_iterations; ++iter) {
            bool accepted = false;
            double trial_value = 0;
            for (int inner = 0; inner < options.max_inner; ++inner) {
                trial = (x + step * grad).cwiseMax(lower).cwiseMin(upper);
                double gain = grad.dot(trial - x);
                bool overflow = false;
                try {
                    trial_value = objective(trial, trial_grad);
                    overflow = !std::isfinite(trial_value);
                } catch (const OverflowError&) {
                    overflow = true;
                }
                ++out.evaluations;
                if (!overflow && trial_value >= value + armijo * gain) {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if (!accepted) {
                out.status = AscentStatus::stalled;
                break;
            }

            Eigen::VectorXd x_old = x;
            x = trial;
            double previous = value;
            value = trial_value;
            grad.swap(trial_grad);
            out.iterations = iter;
            step *= 2;
            if (options.record_trajectory) {
                out.trajectory.push_back(value);
            }

            double pg = internal::projected_gradient_norm(x, grad, lower, upper);
            if (stopping.check(previous, value, x_old, x, pg, out.status)) {
                break;
            }
        }
    }

    out.x = std::move(x);
    out.value = value;
    out.gradient = std::move(grad);
    out.message = to_string(out.status);
    return out;
}

} // namespace plnpca

#endif
