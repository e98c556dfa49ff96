#pragma once

#include <functional>
#include <stdexcept>
#include <string>

#include "advshield/tensor.hpp"

namespace advshield {

class NonFiniteError : public std::runtime_error {
   public:
    NonFiniteError(const std::string& what, std::size_t index) : std::runtime_error(what), index_(index) {}
    std::size_t index() const { return index_; }

   private:
    std::size_t index_;
};

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
};

// Compares the analytic gradient of a scalar function against central
// differences, coordinate by coordinate:
//   rel = |a - n| / max(1e-12, |a| + |n|)
inline GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5) {
    if (!(eps > 0)) throw std::invalid_argument("grad_check: eps must be positive");
    Tensor leaf = x.detach();
    leaf.set_requires_grad(true);
    Tensor y = f(leaf);
    if (!std::isfinite(y.item())) throw NonFiniteError("grad_check: f(x) is not finite", 0);
    backward(y);
    std::vector<double> analytic = leaf.grad();

    GradCheckResult r;
    std::vector<double> probe = x.values();
    for (std::size_t i = 0; i < probe.size(); ++i) {
        double orig = probe[i];
        probe[i] = orig + eps;
        double fp = f(Tensor(x.shape(), probe)).item();
        probe[i] = orig - eps;
        double fm = f(Tensor(x.shape(), probe)).item();
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NonFiniteError("grad_check: non-finite value at coordinate " + std::to_string(i), i);
        double numeric = (fp - fm) / (2 * eps);
        double rel = std::fabs(analytic[i] - numeric) / std::max(1e-12, std::fabs(analytic[i]) + std::fabs(numeric));
        if (rel > r.max_rel_err) {
            r.max_rel_err = rel;
            r.worst_index = i;
        }
    }
    return r;
}

}  // namespace advshield
