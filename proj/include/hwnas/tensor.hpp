#ifndef HWNAS_TENSOR_HPP
#define HWNAS_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "hwnas/archgraph.hpp"
#include "hwnas/random.hpp"

namespace hwnas {

/// Dense row-major parameter tensor.
struct Tensor {
    std::vector<int> dims;
    std::vector<double> values;

    Tensor() = default;
    explicit Tensor(std::vector<int> d, double fill = 0.0) : dims(std::move(d)), values(count(dims), fill) {}

    static std::size_t count(const std::vector<int>& d)
    {
        return std::accumulate(d.begin(), d.end(), std::size_t{1},
                               [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    }
    std::size_t size() const noexcept { return values.size(); }
    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }
    double* data() noexcept { return values.data(); }
    const double* data() const noexcept { return values.data(); }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Parameter tensor names. A standard conv owns "kernel" [out, in, kh, kw];
// a separable conv owns "dw_kernel" [in, kh, kw] and "pw_kernel" [out, in].
// BN running statistics live alongside the learned tensors but are never
// touched by the optimizer.
namespace pname {
inline constexpr const char* kernel = "kernel";
inline constexpr const char* dw_kernel = "dw_kernel";
inline constexpr const char* pw_kernel = "pw_kernel";
inline constexpr const char* bias = "bias";
inline constexpr const char* bn_gamma = "bn_gamma";
inline constexpr const char* bn_beta = "bn_beta";
inline constexpr const char* bn_mean = "bn_mean";
inline constexpr const char* bn_var = "bn_var";
inline constexpr const char* dense_w = "dense_w";
inline constexpr const char* dense_b = "dense_b";
} // namespace pname

inline bool is_running_stat(const std::string& name) { return name == pname::bn_mean || name == pname::bn_var; }

using LayerParams = std::map<std::string, Tensor>;

/// Parameters of a network keyed by node id and tensor name.
struct WeightStore {
    std::map<NodeId, LayerParams> layers;

    bool has(NodeId id, const std::string& name) const
    {
        auto it = layers.find(id);
        return it != layers.end() && it->second.count(name) != 0;
    }
    Tensor& at(NodeId id, const std::string& name)
    {
        auto it = layers.find(id);
        if (it == layers.end() || !it->second.count(name))
            throw Error(Errc::UnknownNode, "no tensor '" + name + "' for node " + std::to_string(id));
        return it->second.at(name);
    }
    const Tensor& at(NodeId id, const std::string& name) const
    {
        auto it = layers.find(id);
        if (it == layers.end() || !it->second.count(name))
            throw Error(Errc::UnknownNode, "no tensor '" + name + "' for node " + std::to_string(id));
        return it->second.at(name);
    }

    /// Visits every learned tensor (running statistics excluded) in key order.
    template <typename Fn>
    void for_each_trainable(Fn&& fn)
    {
        for (auto& [id, params] : layers)
            for (auto& [name, t] : params)
                if (!is_running_stat(name))
                    fn(id, name, t);
    }
    template <typename Fn>
    void for_each_trainable(Fn&& fn) const
    {
        for (const auto& [id, params] : layers)
            for (const auto& [name, t] : params)
                if (!is_running_stat(name))
                    fn(id, name, t);
    }

    /// Same layout, all zeros.
    WeightStore zeros_like() const
    {
        WeightStore z;
        for (const auto& [id, params] : layers)
            for (const auto& [name, t] : params)
                z.layers[id][name] = Tensor(t.dims, 0.0);
        return z;
    }

    friend bool operator==(const WeightStore&, const WeightStore&) = default;
};

/// Tensor layout a node needs, given the graph it lives in.
inline LayerParams param_layout(const ArchGraph& g, NodeId id)
{
    const auto& n = g.node(id);
    LayerParams p;
    if (n.is_conv()) {
        const auto& c = n.conv();
        const int cin = g.input_shape(id).channels;
        if (c.separable) {
            p[pname::dw_kernel] = Tensor({cin, c.kernel_h, c.kernel_w});
            p[pname::pw_kernel] = Tensor({c.out_channels, cin});
        } else {
            p[pname::kernel] = Tensor({c.out_channels, cin, c.kernel_h, c.kernel_w});
        }
        p[pname::bias] = Tensor({c.out_channels});
        if (n.batchnorm) {
            p[pname::bn_gamma] = Tensor({c.out_channels}, 1.0);
            p[pname::bn_beta] = Tensor({c.out_channels}, 0.0);
            p[pname::bn_mean] = Tensor({c.out_channels}, 0.0);
            p[pname::bn_var] = Tensor({c.out_channels}, 1.0);
        }
    } else if (n.is_head()) {
        const int k = std::get<DenseHead>(n.kind).num_classes;
        const int cin = g.input_shape(id).channels;
        p[pname::dense_w] = Tensor({k, cin});
        p[pname::dense_b] = Tensor({k});
    }
    return p;
}

inline void he_normal(Tensor& t, std::size_t fan_in, Rng& rng)
{
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.values)
        v = sd * normal(rng);
}

/// He-normal kernels, zero biases, identity batch normalization.
inline WeightStore init_weights(const ArchGraph& g, Rng& rng)
{
    WeightStore w;
    for (NodeId id : g.order()) {
        const auto& n = g.node(id);
        if (!n.is_weighted())
            continue;
        LayerParams p = param_layout(g, id);
        const int cin = g.input_shape(id).channels;
        if (n.is_conv()) {
            const auto& c = n.conv();
            const std::size_t taps = static_cast<std::size_t>(c.kernel_h * c.kernel_w);
            if (c.separable) {
                he_normal(p.at(pname::dw_kernel), taps, rng);
                he_normal(p.at(pname::pw_kernel), static_cast<std::size_t>(cin), rng);
            } else {
                he_normal(p.at(pname::kernel), taps * static_cast<std::size_t>(cin), rng);
            }
        } else {
            auto& dw = p.at(pname::dense_w);
            const double sd = std::sqrt(1.0 / static_cast<double>(cin));
            for (double& v : dw.values)
                v = sd * normal(rng);
        }
        w.layers[id] = std::move(p);
    }
    return w;
}

/// Checks that every weighted node has exactly the tensors its layout requires.
inline void check_layout(const ArchGraph& g, const WeightStore& w)
{
    for (NodeId id : g.order()) {
        if (!g.node(id).is_weighted())
            continue;
        const auto want = param_layout(g, id);
        auto it = w.layers.find(id);
        if (it == w.layers.end())
            throw Error(Errc::ShapeMismatch, "missing weights for node " + std::to_string(id));
        for (const auto& [name, t] : want) {
            auto jt = it->second.find(name);
            if (jt == it->second.end() || jt->second.dims != t.dims || jt->second.values.size() != t.values.size())
                throw Error(Errc::ShapeMismatch, "tensor '" + name + "' of node " + std::to_string(id) +
                                                     " does not match the graph");
        }
        if (it->second.size() != want.size())
            throw Error(Errc::ShapeMismatch, "unexpected tensors for node " + std::to_string(id));
    }
}

} // namespace hwnas

#endif // HWNAS_TENSOR_HPP
