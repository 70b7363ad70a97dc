#pragma once

// Central finite-difference gradient checking, double precision only.
// Perturbs every entry of every watched matrix and accepts it once
// |a - fd| <= atol + rtol*max(|a|,|fd|) holds and, for entries at or above
// sig_floor, the relative error is within rtol as well; the atol floor
// absorbs the O(eps^2) truncation error that dominates entries whose true
// gradient is negligible. worst_rel_err is reported over entries with
// magnitude >= sig_floor.
//
// An entry that misses tolerance at the default stencil is re-probed with
// the stencil shrunk 4x per step down to 1024x. Truncation error falls 16x
// per rung, so curvature artifacts converge; a stencil that straddles a relu
// kink shows a half-slope artifact (fd ~ analytic/2) that likewise vanishes
// once the stencil clears the kink, while a real defect persists at every
// stencil width. At the smallest rung the roundoff floor of the central
// difference is still orders of magnitude below atol for losses of order 1.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace gradcheck {

using Mat = Eigen::MatrixXd;

struct Result {
    bool ok = true;
    double worst_abs_err = 0.0;
    double worst_rel_err = 0.0;
    std::string where;
};

// f: evaluates the scalar objective from the current contents of *inputs.
// grads: analytic gradients for each input, already computed by the caller.
inline Result check(const std::function<double()>& f, std::vector<Mat*> inputs,
                    const std::vector<Mat>& grads, double eps = 1e-3,
                    double rtol = 1e-4, double atol = 1e-6,
                    double sig_floor = 1e-4) {
    Result res;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        Mat& x = *inputs[i];
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            for (Eigen::Index c = 0; c < x.cols(); ++c) {
                const double orig = x(r, c);
                const double an = grads[i](r, c);
                double fd = 0.0;
                bool entry_ok = false;
                for (double h : {eps, eps / 4.0, eps / 16.0, eps / 64.0,
                                 eps / 256.0, eps / 1024.0}) {
                    x(r, c) = orig + h;
                    const double fp = f();
                    x(r, c) = orig - h;
                    const double fm = f();
                    x(r, c) = orig;
                    fd = (fp - fm) / (2.0 * h);
                    const double mag = std::max(std::abs(an), std::abs(fd));
                    const bool abs_ok = std::abs(an - fd) <= atol + rtol * mag;
                    const bool rel_ok =
                        mag < sig_floor || std::abs(an - fd) <= rtol * mag;
                    if (abs_ok && rel_ok) {
                        entry_ok = true;
                        break;
                    }
                }
                const double abs_err = std::abs(an - fd);
                const double rel_err = abs_err / std::max({std::abs(an), std::abs(fd), 1e-12});
                if (!entry_ok) {
                    res.ok = false;
                    if (abs_err > res.worst_abs_err)
                        res.where = "input " + std::to_string(i) + " (" +
                                    std::to_string(r) + "," + std::to_string(c) +
                                    ") analytic=" + std::to_string(an) +
                                    " fd=" + std::to_string(fd);
                }
                res.worst_abs_err = std::max(res.worst_abs_err, abs_err);
                if (std::max(std::abs(an), std::abs(fd)) >= sig_floor)
                    res.worst_rel_err = std::max(res.worst_rel_err, rel_err);
            }
        }
    }
    return res;
}

inline Mat random_mat(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                      double scale = 1.0) {
    Mat m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = scale * cortex::normal01(rng);
    return m;
}

}  // namespace gradcheck
