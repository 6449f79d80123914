#pragma once

// Compact generalized non-local block with a linear (dot-product) kernel.
//
// For a feature map A (R x D) the block forms Theta = A theta, Phi = A phi and
// G = A g, splits the channels into `groups` blocks of width Dg, and for each
// block treats the R x Dg slices as vectors of length R * Dg. The dense
// non-local response K g_vec with K = theta_vec phi_vec^T collapses to
//
//     y_vec = theta_vec * (phi_vec . g_vec) * scale,   scale = 1 / (R * Dg)
//
// so no R*Dg square matrix is ever formed. The output is A + Y z.

#include <stdexcept>
#include <string>
#include <vector>

#include "nn.hpp"
#include "tensor.hpp"

namespace mlcvnet {

class CgnlBlock {
public:
    CgnlBlock() = default;

    /// theta/phi/g drawn Xavier-uniform; z starts at zero so the block is the identity.
    CgnlBlock(std::size_t channels, std::size_t groups, Rng& rng) : groups_(groups) {
        if (groups == 0 || channels % groups != 0)
            throw std::invalid_argument("CgnlBlock: " + std::to_string(channels) + " channels not divisible into " +
                                        std::to_string(groups) + " groups");
        theta_ = xavier_uniform(channels, channels, rng).set_requires_grad();
        phi_ = xavier_uniform(channels, channels, rng).set_requires_grad();
        g_ = xavier_uniform(channels, channels, rng).set_requires_grad();
        z_ = Tensor::zeros({channels, channels}).set_requires_grad();
    }

    std::size_t channels() const { return z_.dim(0); }
    std::size_t groups() const { return groups_; }

    Tensor& theta() { return theta_; }
    Tensor& phi() { return phi_; }
    Tensor& g() { return g_; }
    Tensor& z() { return z_; }
    const Tensor& theta() const { return theta_; }
    const Tensor& phi() const { return phi_; }
    const Tensor& g() const { return g_; }
    const Tensor& z() const { return z_; }

    /// The attention response Y (before the output map and residual).
    Tensor response(const Tensor& a) const {
        if (a.rank() != 2 || a.dim(1) != channels())
            throw std::invalid_argument("cgnl: feature map " + shape_str(a.shape()) + " does not match " +
                                        std::to_string(channels()) + " channels");
        const std::size_t rows = a.dim(0);
        const std::size_t width = channels() / groups_;
        const double norm = 1.0 / static_cast<double>(rows * width);
        Tensor th = matmul(a, theta_);
        Tensor ph = matmul(a, phi_);
        Tensor gv = matmul(a, g_);
        std::vector<Tensor> blocks;
        for (std::size_t k = 0; k < groups_; ++k) {
            const std::size_t lo = k * width, hi = lo + width;
            // phi_vec . g_vec; the sum is order-invariant so row permutations are exact.
            Tensor similarity = sum_order_invariant(mul(slice_cols(ph, lo, hi), slice_cols(gv, lo, hi)));
            blocks.push_back(mul_scalar(slice_cols(th, lo, hi), scale(similarity, norm)));
        }
        return groups_ == 1 ? blocks.front() : concat(blocks, 1);
    }

    Tensor forward(const Tensor& a) const { return add(a, matmul(response(a), z_)); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".theta", theta_, true});
        out.push_back({prefix + ".phi", phi_, true});
        out.push_back({prefix + ".g", g_, true});
        out.push_back({prefix + ".z", z_, true});
    }

private:
    Tensor theta_, phi_, g_, z_;
    std::size_t groups_ = 1;
};

}  // namespace mlcvnet
