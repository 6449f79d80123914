#pragma once

// Layers shared by every network stage: linear maps, batch norm, shared MLPs,
// and the flat named-parameter list used by the optimizer and checkpoints.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace mlcvnet {

enum class Mode { train, eval };

struct NamedTensor {
    std::string name;
    Tensor tensor;
    bool trainable = true;  // false for running statistics
};

using ParamList = std::vector<NamedTensor>;

inline std::vector<Tensor> trainable(const ParamList& params) {
    std::vector<Tensor> out;
    for (const auto& p : params)
        if (p.trainable) out.push_back(p.tensor);
    return out;
}

using Rng = std::mt19937_64;

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> w(fan_in * fan_out);
    for (auto& v : w) v = dist(rng);
    return Tensor({fan_in, fan_out}, std::move(w));
}

struct Linear {
    Tensor weight;  // in x out
    Tensor bias;    // out

    static Linear init(std::size_t in, std::size_t out, Rng& rng) {
        return {xavier_uniform(in, out, rng).set_requires_grad(), Tensor::zeros({out}).set_requires_grad()};
    }
    static Linear zeros(std::size_t in, std::size_t out) {
        return {Tensor::zeros({in, out}).set_requires_grad(), Tensor::zeros({out}).set_requires_grad()};
    }

    std::size_t in_width() const { return weight.dim(0); }
    std::size_t out_width() const { return weight.dim(1); }

    Tensor forward(const Tensor& x) const { return add(matmul(x, weight), bias); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".weight", weight, true});
        out.push_back({prefix + ".bias", bias, true});
    }
};

struct BatchNorm {
    Tensor gamma, beta;
    Tensor running_mean, running_var;

    static BatchNorm init(std::size_t width) {
        return {Tensor::full({width}, 1.0).set_requires_grad(), Tensor::zeros({width}).set_requires_grad(),
                Tensor::zeros({width}), Tensor::full({width}, 1.0)};
    }

    Tensor forward(const Tensor& x, Mode mode) {
        return batch_norm_1d(x, gamma, beta, running_mean, running_var, mode == Mode::train);
    }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".gamma", gamma, true});
        out.push_back({prefix + ".beta", beta, true});
        out.push_back({prefix + ".running_mean", running_mean, false});
        out.push_back({prefix + ".running_var", running_var, false});
    }
};

/// Per-row MLP. Hidden layers are linear -> batch norm -> relu; the last layer
/// is the same when `head` is false, and a bare linear map when it is true.
class SharedMlp {
public:
    SharedMlp() = default;
    SharedMlp(std::size_t in, const std::vector<std::size_t>& widths, Rng& rng, bool head = false,
              bool batch_norm = true)
        : head_(head) {
        if (widths.empty()) throw std::invalid_argument("SharedMlp: widths must be non-empty");
        std::size_t prev = in;
        for (std::size_t i = 0; i < widths.size(); ++i) {
            layers_.push_back(Linear::init(prev, widths[i], rng));
            const bool last = i + 1 == widths.size();
            if (batch_norm && !(last && head)) norms_.push_back(BatchNorm::init(widths[i]));
            prev = widths[i];
        }
        has_norm_ = batch_norm;
    }

    Tensor forward(Tensor x, Mode mode) {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            x = layers_[i].forward(x);
            const bool last = i + 1 == layers_.size();
            if (last && head_) break;
            if (has_norm_) x = norms_[i].forward(x, mode);
            x = relu(x);
        }
        return x;
    }

    std::size_t out_width() const { return layers_.back().out_width(); }
    std::vector<Linear>& layers() { return layers_; }
    const std::vector<Linear>& layers() const { return layers_; }
    std::vector<BatchNorm>& norms() { return norms_; }

    void collect(const std::string& prefix, ParamList& out) const {
        for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(prefix + ".fc" + std::to_string(i), out);
        for (std::size_t i = 0; i < norms_.size(); ++i) norms_[i].collect(prefix + ".bn" + std::to_string(i), out);
    }

private:
    std::vector<Linear> layers_;
    std::vector<BatchNorm> norms_;
    bool head_ = false;
    bool has_norm_ = true;
};

}  // namespace mlcvnet
