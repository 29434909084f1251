#ifndef PLNPCA_NEF_HPP
#define PLNPCA_NEF_HPP

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>

#include "errors.hpp"
#include "quadrature.hpp"

/**
 * @file nef.hpp
 * @brief Natural exponential families and their Gaussian expectations.
 *
 * A family has density `exp(y * x - b(x) - a(y))` in the canonical parameter `x`.
 * The fitting code only ever needs `E[b(a + cU)]`, `E[b'(a + cU)]` and
 * `E[b''(a + cU)]` for `U ~ N(0, 1)`; these are available in closed form for
 * the Poisson and unit-variance Gaussian families and by Gauss-Hermite
 * quadrature for anything else.
 */

namespace plnpca {

/**
 * User-supplied kernel for a family without closed-form Gaussian expectations.
 * `b`, `b1` and `b2` are the log-partition and its first two derivatives,
 * `base_measure` is `a(y)` and `link` is the inverse of `b1`.
 */
struct Kernel {
    std::string name = "generic";
    std::function<double(double)> b;
    std::function<double(double)> b1;
    std::function<double(double)> b2;
    std::function<double(double)> base_measure;
    std::function<double(double)> link;
    std::function<void(double)> check_observation;
    double domain_lower = -std::numeric_limits<double>::infinity();
    double domain_upper = std::numeric_limits<double>::infinity();
};

/**
 * The three expectations `E[b(a + cU)]`, `E[b'(a + cU)]`, `E[b''(a + cU)]`.
 */
struct GaussMoments {
    double e0 = 0;
    double e1 = 0;
    double e2 = 0;
};

namespace internal {

inline double finite_or_throw(double value, const char* what) {
    if (!std::isfinite(value)) {
        throw OverflowError(std::string("non-finite value in ") + what);
    }
    return value;
}

inline void check_count(double y) {
    if (!std::isfinite(y) || y < 0 || std::floor(y) != y) {
        throw DomainError("Poisson observations must be nonnegative integers, got " + std::to_string(y));
    }
}

} // namespace internal

class Family {
public:
    enum class Kind { poisson, gaussian_unit_variance, generic_quadrature };

    /// Default quadrature size for the generic family.
    static constexpr std::size_t default_nodes = 40;

    static Family poisson() {
        return Family(Kind::poisson, poisson_kernel(), 0);
    }

    /**
     * Unit-variance Gaussian with `b(x) = x^2 / 2`; the normalizing constant
     * `log(2 pi) / 2` goes into the base measure.
     */
    static Family gaussian_unit_variance() {
        return Family(Kind::gaussian_unit_variance, gaussian_kernel(), 0);
    }

    static Family generic(Kernel kernel, std::size_t nodes = default_nodes) {
        if (!kernel.b || !kernel.b1 || !kernel.b2) {
            throw DomainError("generic family needs b, b' and b''");
        }
        return Family(Kind::generic_quadrature, std::move(kernel), nodes);
    }

    static Kernel poisson_kernel() {
        Kernel k;
        k.name = "poisson";
        k.b = [](double x) { return std::exp(x); };
        k.b1 = k.b;
        k.b2 = k.b;
        k.base_measure = [](double y) { return std::lgamma(y + 1); };
        k.link = [](double mu) { return std::log(mu); };
        k.check_observation = internal::check_count;
        return k;
    }

    static Kernel gaussian_kernel() {
        Kernel k;
        k.name = "gaussian";
        k.b = [](double x) { return 0.5 * x * x; };
        k.b1 = [](double x) { return x; };
        k.b2 = [](double) { return 1.0; };
        k.base_measure = [](double y) { return 0.5 * y * y + 0.5 * std::log(2 * std::numbers::pi); };
        k.link = [](double mu) { return mu; };
        k.check_observation = [](double y) {
            if (!std::isfinite(y)) {
                throw DomainError("Gaussian observations must be finite");
            }
        };
        return k;
    }

    Kind kind() const { return kind_; }
    const std::string& name() const { return kernel_.name; }
    std::size_t node_count() const { return rule_ ? rule_->size() : 0; }

    double b(double x) const {
        check_domain(x);
        return internal::finite_or_throw(kernel_.b(x), "log-partition");
    }

    double b_prime(double x) const {
        check_domain(x);
        return internal::finite_or_throw(kernel_.b1(x), "log-partition derivative");
    }

    double b_second(double x) const {
        check_domain(x);
        return internal::finite_or_throw(kernel_.b2(x), "log-partition second derivative");
    }

    double base_measure(double y) const {
        check_observation(y);
        return kernel_.base_measure(y);
    }

    double link(double mean) const {
        return kernel_.link(mean);
    }

    void check_observation(double y) const {
        if (kernel_.check_observation) {
            kernel_.check_observation(y);
        }
    }

    /**
     * `E[b^(order)(a + cU)]` for `U ~ N(0, 1)` and `order` in {0, 1, 2}.
     */
    double gauss_expectation(double a, double c, int order) const {
        if (order < 0 || order > 2) {
            throw DomainError("expectation order must be 0, 1 or 2");
        }
        auto m = gauss_moments(a, c);
        return order == 0 ? m.e0 : (order == 1 ? m.e1 : m.e2);
    }

    /**
     * All three expectations at once. The generic family shares the node
     * evaluations between them.
     */
    GaussMoments gauss_moments(double a, double c) const {
        if (!(c >= 0)) {
            throw DomainError("scale of a Gaussian expectation must be nonnegative");
        }
        GaussMoments out;
        switch (kind_) {
        case Kind::poisson: {
            double v = internal::finite_or_throw(std::exp(a + 0.5 * c * c), "Poisson expectation");
            out.e0 = v;
            out.e1 = v;
            out.e2 = v;
            break;
        }
        case Kind::gaussian_unit_variance:
            out.e0 = internal::finite_or_throw(0.5 * (a * a + c * c), "Gaussian expectation");
            out.e1 = a;
            out.e2 = 1;
            break;
        case Kind::generic_quadrature: {
            const auto& nodes = rule_->nodes();
            const auto& weights = rule_->weights();
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                double x = a + c * nodes[k];
                check_domain(x);
                out.e0 += weights[k] * kernel_.b(x);
                out.e1 += weights[k] * kernel_.b1(x);
                out.e2 += weights[k] * kernel_.b2(x);
            }
            internal::finite_or_throw(out.e0 + out.e1 + out.e2, "quadrature expectation");
            break;
        }
        }
        return out;
    }

private:
    Kind kind_;
    Kernel kernel_;
    std::shared_ptr<const GaussHermiteRule> rule_;

    Family(Kind kind, Kernel kernel, std::size_t nodes) : kind_(kind), kernel_(std::move(kernel)) {
        if (kind_ == Kind::generic_quadrature) {
            rule_ = std::make_shared<const GaussHermiteRule>(nodes);
        }
    }

    void check_domain(double x) const {
        if (!(x >= kernel_.domain_lower && x <= kernel_.domain_upper)) {
            throw DomainError("canonical parameter " + std::to_string(x) + " outside the family domain");
        }
    }
};

} // namespace plnpca

#endif
