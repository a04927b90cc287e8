#ifndef HWNAS_QUANT_HPP
#define HWNAS_QUANT_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hwnas/dataset.hpp"
#include "hwnas/mutation.hpp"
#include "hwnas/nnengine.hpp"

namespace hwnas {

inline constexpr int kDefaultBits = 8;
inline constexpr std::size_t kCalibrationSamples = 512;
inline constexpr int kScanMinExponent = -16;
inline constexpr int kScanMaxExponent = 8;

enum class QuantMethod { MaxRange, MinPQE };

inline std::string quant_method_name(QuantMethod m) { return m == QuantMethod::MaxRange ? "maxrange" : "minpqe"; }

inline QuantMethod parse_quant_method(const std::string& s)
{
    if (s == "maxrange")
        return QuantMethod::MaxRange;
    if (s == "minpqe")
        return QuantMethod::MinPQE;
    throw Error(Errc::InvalidArgument, "unknown quantization method '" + s + "' (expected maxrange or minpqe)");
}

inline std::int64_t code_min(int bits) { return -(std::int64_t{1} << (bits - 1)); }
inline std::int64_t code_max(int bits) { return (std::int64_t{1} << (bits - 1)) - 1; }

inline void check_bits(int bits)
{
    if (bits < 2 || bits > 32)
        throw Error(Errc::InvalidArgument, "bit width must be in [2, 32], got " + std::to_string(bits));
}

/// Integer code of `x` on the grid with step `delta`: round half away from zero, then clip.
inline std::int64_t quantize_code(double x, double delta, int bits)
{
    const double r = std::round(x / delta);
    const double lo = static_cast<double>(code_min(bits)), hi = static_cast<double>(code_max(bits));
    return static_cast<std::int64_t>(std::clamp(r, lo, hi));
}

inline double quantize_value(double x, double delta, int bits)
{
    if (!(delta > 0.0))
        throw Error(Errc::InvalidArgument, "step size must be positive");
    check_bits(bits);
    return static_cast<double>(quantize_code(x, delta, bits)) * delta;
}

/// Step size covering max|x| with the largest positive code. An all-zero tensor gets 2^(1-B).
inline double maxrange_step(double max_abs, int bits)
{
    check_bits(bits);
    if (!(max_abs > 0.0))
        return std::ldexp(1.0, 1 - bits);
    return max_abs / static_cast<double>(code_max(bits));
}

inline double max_abs(std::span<const double> v)
{
    double m = 0.0;
    for (double x : v)
        m = std::max(m, std::abs(x));
    return m;
}

/// Per-layer step sizes: weights and biases of weighted layers, and the
/// activation step of every feature map written to memory (input, conv, add).
struct FixedPointFormat {
    int bits = kDefaultBits;
    std::map<NodeId, double> weight_step;
    std::map<NodeId, double> bias_step;
    std::map<NodeId, double> act_step;

    friend bool operator==(const FixedPointFormat&, const FixedPointFormat&) = default;
};

inline bool has_act_format(const LayerNode& n) { return n.is_input() || n.is_conv() || n.is_add(); }

/// Weight tensors of a layer after folding (bias excluded).
inline std::vector<std::string> weight_names(const LayerNode& n)
{
    if (n.is_head())
        return {pname::dense_w};
    if (n.conv().separable)
        return {pname::dw_kernel, pname::pw_kernel};
    return {pname::kernel};
}

inline std::string bias_name(const LayerNode& n) { return n.is_head() ? pname::dense_b : pname::bias; }

struct QuantizedModel {
    ArchGraph graph;              ///< batch norm folded away
    QuantMethod method = QuantMethod::MinPQE;
    FixedPointFormat format;
    WeightStore weights;          ///< codes times step, what the quantized forward uses
    std::map<NodeId, std::map<std::string, std::vector<std::int64_t>>> codes;
};

/// Folds inference-mode batch norm into the preceding conv's kernel and bias.
inline std::pair<ArchGraph, WeightStore> fold_batchnorm(const ArchGraph& g, const WeightStore& w)
{
    std::vector<LayerNode> nodes = g.node_list();
    WeightStore out;
    for (auto& n : nodes) {
        if (!n.is_weighted())
            continue;
        LayerParams p = w.layers.at(n.id);
        if (n.batchnorm) {
            const auto& gamma = p.at(pname::bn_gamma);
            const auto& beta = p.at(pname::bn_beta);
            const auto& mean = p.at(pname::bn_mean);
            const auto& var = p.at(pname::bn_var);
            auto& k = p.at(n.conv().separable ? pname::pw_kernel : pname::kernel);
            auto& b = p.at(pname::bias);
            const std::size_t cout = b.size(), row = k.size() / cout;
            for (std::size_t o = 0; o < cout; ++o) {
                const double s = gamma[o] / std::sqrt(var[o] + kBnEps);
                for (std::size_t i = 0; i < row; ++i)
                    k[o * row + i] *= s;
                b[o] = (b[o] - mean[o]) * s + beta[o];
            }
            for (const char* name : {pname::bn_gamma, pname::bn_beta, pname::bn_mean, pname::bn_var})
                p.erase(name);
            n.batchnorm = false;
        }
        out.layers[n.id] = std::move(p);
    }
    return {ArchGraph(std::move(nodes), g.input_id(), g.output_id()), std::move(out)};
}

/// Receives the integer codes of a feature map (whole batch) before they are written back.
using CodeHook = std::function<void(NodeId, std::span<std::int64_t>, std::size_t)>;

/// Quantizes weights and biases with `format` and returns the model.
inline QuantizedModel make_quantized_model(const ArchGraph& folded, const WeightStore& folded_w,
                                           const FixedPointFormat& format, QuantMethod method)
{
    check_bits(format.bits);
    QuantizedModel qm;
    qm.graph = folded;
    qm.method = method;
    qm.format = format;
    for (const auto& [id, n] : folded.nodes()) {
        if (has_act_format(n) && !format.act_step.contains(id))
            throw Error(Errc::MissingFormat, "no activation step for node " + std::to_string(id));
        if (!n.is_weighted())
            continue;
        if (n.batchnorm)
            throw Error(Errc::InvalidArgument, "fold batch norm before quantizing");
        if (!format.weight_step.contains(id) || !format.bias_step.contains(id))
            throw Error(Errc::MissingFormat, "no weight or bias step for node " + std::to_string(id));
        LayerParams p = folded_w.layers.at(id);
        auto quant = [&](const std::string& name, double step) {
            auto& t = p.at(name);
            auto& c = qm.codes[id][name];
            c.resize(t.size());
            for (std::size_t i = 0; i < t.size(); ++i) {
                c[i] = quantize_code(t[i], step, format.bits);
                t[i] = static_cast<double>(c[i]) * step;
            }
        };
        for (const auto& name : weight_names(n))
            quant(name, format.weight_step.at(id));
        quant(bias_name(n), format.bias_step.at(id));
        qm.weights.layers[id] = std::move(p);
    }
    return qm;
}

/// Forward pass that rounds every stored feature map onto its grid. `tamper`
/// may alter the integer codes (fault injection) before they are consumed.
inline std::vector<double> quantized_forward(const QuantizedModel& qm, std::span<const double> x, std::size_t n,
                                             const CodeHook& tamper = {})
{
    const int bits = qm.format.bits;
    std::vector<std::int64_t> codes;
    OutputHook hook = [&](NodeId id, std::span<double> out, std::size_t batch) {
        const auto it = qm.format.act_step.find(id);
        if (it == qm.format.act_step.end()) {
            if (has_act_format(qm.graph.node(id)))
                throw Error(Errc::MissingFormat, "no activation step for node " + std::to_string(id));
            return;
        }
        const double step = it->second;
        codes.resize(out.size());
        for (std::size_t i = 0; i < out.size(); ++i)
            codes[i] = quantize_code(out[i], step, bits);
        if (tamper)
            tamper(id, codes, batch);
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = static_cast<double>(codes[i]) * step;
    };
    return forward(qm.graph, qm.weights, x, n, hook);
}

inline std::vector<int> quantized_predict(const QuantizedModel& qm, const Dataset& d, const CodeHook& tamper = {},
                                          std::size_t chunk = 64)
{
    const std::size_t S = d.shape.size();
    const std::size_t K = num_classes(qm.graph);
    std::vector<int> out;
    out.reserve(d.size());
    for (std::size_t b = 0; b < d.size(); b += chunk) {
        const std::size_t m = std::min(chunk, d.size() - b);
        const auto logits =
            quantized_forward(qm, std::span<const double>(d.values.data() + b * S, m * S), m, tamper);
        for (std::size_t s = 0; s < m; ++s) {
            const double* l = logits.data() + s * K;
            out.push_back(static_cast<int>(std::max_element(l, l + K) - l));
        }
    }
    return out;
}

inline double quantized_error_rate(const QuantizedModel& qm, const Dataset& d)
{
    if (d.size() == 0)
        throw Error(Errc::EmptyInput, "empty evaluation set");
    const auto p = quantized_predict(qm, d);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        wrong += p[i] != d.labels[i];
    return static_cast<double>(wrong) / static_cast<double>(d.size());
}

namespace detail {

/// One layer of a graph as a standalone two-node graph fed by its input feature map.
struct LayerProbe {
    ArchGraph graph;
    WeightStore weights;
    NodeId layer = 0;

    LayerProbe(const ArchGraph& g, const WeightStore& w, NodeId id)
    {
        const auto& n = g.node(id);
        const Shape is = g.input_shape(id);
        GraphBuilder b(is.height, is.width, is.channels);
        if (n.is_head()) {
            layer = b.head(b.input(), std::get<DenseHead>(n.kind).num_classes);
        } else {
            const auto& c = n.conv();
            layer = b.conv(b.input(), c.kernel_h, c.out_channels, n.batchnorm, n.activation == Activation::ReLU,
                           n.pool_factor == kMaxPoolFactor, c.separable);
        }
        graph = b.build(layer);
        weights.layers[layer] = w.layers.at(id);
    }

    std::vector<double> run(std::span<const double> x, std::size_t batch) const
    {
        return forward(graph, weights, x, batch);
    }
};

inline double squared_distance(std::span<const double> a, std::span<const double> b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

inline void quantize_in_place(std::span<double> v, double step, int bits)
{
    for (double& x : v)
        x = static_cast<double>(quantize_code(x, step, bits)) * step;
}

/// A quantity whose step MinPQE selects: the weights, bias or output feature map of one node.
struct Quantity {
    enum Kind { Weight, Bias, Act } kind;
    NodeId node;
    friend auto operator<=>(const Quantity&, const Quantity&) = default;
};

/// Where a feature map is consumed: the consumer and, per consumer input, the
/// channel ranges of that input that carry the map.
struct Use {
    NodeId consumer;
    std::vector<std::pair<NodeId, std::vector<int>>> inputs; // (pred, channels holding the map)
};

inline std::vector<Use> uses_of(const ArchGraph& g, NodeId f)
{
    std::vector<NodeId> consumers;
    std::vector<NodeId> stack(g.successors(f).begin(), g.successors(f).end());
    while (!stack.empty()) {
        NodeId s = stack.back();
        stack.pop_back();
        if (g.node(s).is_concat()) {
            for (NodeId t : g.successors(s))
                stack.push_back(t);
        } else if (std::find(consumers.begin(), consumers.end(), s) == consumers.end()) {
            consumers.push_back(s);
        }
    }
    std::sort(consumers.begin(), consumers.end());
    std::vector<Use> uses;
    for (NodeId c : consumers) {
        Use u{c, {}};
        for (NodeId p : g.node(c).preds) {
            std::vector<int> ch;
            const auto sl = output_slices(g, p);
            for (std::size_t i = 0; i < sl.size(); ++i)
                if (sl[i].src == f)
                    ch.push_back(static_cast<int>(i));
            u.inputs.emplace_back(p, std::move(ch));
        }
        uses.push_back(std::move(u));
    }
    return uses;
}

} // namespace detail

/// MaxRange: every step covers the largest magnitude of its tensor or feature map.
inline FixedPointFormat maxrange_format(const ArchGraph& folded, const WeightStore& folded_w, const Dataset& calib,
                                        int bits = kDefaultBits)
{
    check_bits(bits);
    if (calib.size() == 0)
        throw Error(Errc::CalibrationEmpty, "calibration set is empty");
    FixedPointFormat f;
    f.bits = bits;
    std::map<NodeId, double> amax;
    OutputHook hook = [&](NodeId id, std::span<double> out, std::size_t) {
        if (has_act_format(folded.node(id)))
            amax[id] = std::max(amax[id], max_abs(out));
    };
    const std::size_t S = calib.shape.size(), chunk = 64;
    for (std::size_t b = 0; b < calib.size(); b += chunk) {
        const std::size_t m = std::min(chunk, calib.size() - b);
        (void)forward(folded, folded_w, std::span<const double>(calib.values.data() + b * S, m * S), m, hook);
    }
    for (const auto& [id, n] : folded.nodes()) {
        if (has_act_format(n))
            f.act_step[id] = maxrange_step(amax[id], bits);
        if (!n.is_weighted())
            continue;
        double wm = 0.0;
        for (const auto& name : weight_names(n))
            wm = std::max(wm, max_abs(folded_w.at(id, name).values));
        f.weight_step[id] = maxrange_step(wm, bits);
        f.bias_step[id] = maxrange_step(max_abs(folded_w.at(id, bias_name(n)).values), bits);
    }
    return f;
}

struct MinPqeOptions {
    int z_min = kScanMinExponent;
    int z_max = kScanMaxExponent;
    int z_limit = 48;          ///< widening stops at 2^(+-z_limit)
    std::size_t chunk = 64;    ///< calibration samples per pass
};

/// MinPQE: each step is the power of two minimizing the squared error of the
/// layer outputs it influences, with only that one quantity quantized and
/// everything else at reference precision. Ties go to the larger step.
inline FixedPointFormat minpqe_format(const ArchGraph& folded, const WeightStore& folded_w, const Dataset& calib,
                                      int bits = kDefaultBits, const MinPqeOptions& opt = {})
{
    using detail::Quantity;
    check_bits(bits);
    if (calib.size() == 0)
        throw Error(Errc::CalibrationEmpty, "calibration set is empty");

    std::map<NodeId, detail::LayerProbe> probes;
    std::map<NodeId, std::vector<detail::Use>> uses;
    std::map<Quantity, std::vector<int>> pending; // exponents still to evaluate
    std::map<Quantity, std::map<int, double>> err;
    std::map<Quantity, double> fixed;              // all-zero quantities
    std::vector<int> initial;
    for (int z = opt.z_min; z <= opt.z_max; ++z)
        initial.push_back(z);

    for (const auto& [id, n] : folded.nodes()) {
        if (n.is_weighted()) {
            probes.emplace(id, detail::LayerProbe(folded, folded_w, id));
            double wm = 0.0;
            for (const auto& name : weight_names(n))
                wm = std::max(wm, max_abs(folded_w.at(id, name).values));
            Quantity qw{Quantity::Weight, id}, qb{Quantity::Bias, id};
            if (wm > 0.0)
                pending[qw] = initial;
            else
                fixed[qw] = maxrange_step(0.0, bits);
            if (max_abs(folded_w.at(id, bias_name(n)).values) > 0.0)
                pending[qb] = initial;
            else
                fixed[qb] = maxrange_step(0.0, bits);
        }
        if (has_act_format(n)) {
            uses[id] = detail::uses_of(folded, id);
            if (uses[id].empty())
                fixed[{Quantity::Act, id}] = maxrange_step(0.0, bits);
            else
                pending[{Quantity::Act, id}] = initial;
        }
    }

    std::map<NodeId, double> amax;
    const std::size_t S = calib.shape.size();
    auto pass = [&] {
        for (std::size_t b = 0; b < calib.size(); b += opt.chunk) {
            const std::size_t m = std::min(opt.chunk, calib.size() - b);
            std::vector<NodeId> all;
            for (NodeId id : folded.order())
                all.push_back(id);
            ForwardOptions fo;
            fo.capture = all;
            const auto ref =
                run_forward(folded, folded_w, std::span<const double>(calib.values.data() + b * S, m * S), m, fo)
                    .out;
            for (const auto& [id, v] : ref)
                if (has_act_format(folded.node(id)))
                    amax[id] = std::max(amax[id], max_abs(v));
            for (const auto& [q, zs] : pending) {
                auto& e = err[q];
                if (q.kind != Quantity::Act) {
                    const auto& n = folded.node(q.node);
                    const auto& probe = probes.at(q.node);
                    const auto& x = ref.at(n.preds[0]);
                    const auto& y = ref.at(q.node);
                    for (int z : zs) {
                        const double step = std::ldexp(1.0, z);
                        detail::LayerProbe p = probe;
                        auto& lp = p.weights.layers.at(p.layer);
                        if (q.kind == Quantity::Weight)
                            for (const auto& name : weight_names(n))
                                detail::quantize_in_place(lp.at(name).values, step, bits);
                        else
                            detail::quantize_in_place(lp.at(bias_name(n)).values, step, bits);
                        e[z] += detail::squared_distance(p.run(x, m), y);
                    }
                    continue;
                }
                for (const auto& use : uses.at(q.node)) {
                    const auto& cn = folded.node(use.consumer);
                    const auto& y = ref.at(use.consumer);
                    for (int z : zs) {
                        const double step = std::ldexp(1.0, z);
                        std::vector<std::vector<double>> in;
                        for (const auto& [pred, chans] : use.inputs) {
                            auto v = ref.at(pred);
                            const Shape ps = folded.shape(pred);
                            const std::size_t P = ps.plane(), per = ps.size();
                            for (std::size_t s = 0; s < m; ++s)
                                for (int c : chans)
                                    detail::quantize_in_place(
                                        std::span<double>(v.data() + s * per + static_cast<std::size_t>(c) * P, P),
                                        step, bits);
                            in.push_back(std::move(v));
                        }
                        std::vector<double> out;
                        if (cn.is_add()) {
                            out.resize(in[0].size());
                            for (std::size_t i = 0; i < out.size(); ++i) {
                                const double s = in[0][i] + in[1][i];
                                out[i] = cn.activation == Activation::ReLU && s < 0.0 ? 0.0 : s;
                            }
                        } else {
                            out = probes.at(use.consumer).run(in[0], m);
                        }
                        e[z] += detail::squared_distance(out, y);
                    }
                }
            }
        }
    };

    FixedPointFormat f;
    f.bits = bits;
    while (!pending.empty()) {
        pass();
        std::map<Quantity, std::vector<int>> next;
        for (const auto& [q, zs] : pending) {
            (void)zs;
            const auto& e = err.at(q);
            int best = e.begin()->first;
            for (const auto& [z, v] : e)
                if (v <= e.at(best))
                    best = z; // ascending z, so ties resolve to the larger step
            if (q.kind == Quantity::Act && !(amax[q.node] > 0.0)) {
                f.act_step[q.node] = maxrange_step(0.0, bits); // dead on the calibration data
                continue;
            }
            // Widen only while the error still falls towards the boundary.
            const int lo = e.begin()->first, hi = e.rbegin()->first;
            std::vector<int> more;
            if (best == lo && lo > -opt.z_limit && e.size() > 1 && e.at(lo) < e.at(lo + 1))
                for (int z = std::max(-opt.z_limit, lo - 8); z < lo; ++z)
                    more.push_back(z);
            if (best == hi && hi < opt.z_limit && e.size() > 1 && e.at(hi) < e.at(hi - 1))
                for (int z = hi + 1; z <= std::min(opt.z_limit, hi + 8); ++z)
                    more.push_back(z);
            if (!more.empty()) {
                next[q] = std::move(more);
                continue;
            }
            const double step = std::ldexp(1.0, best);
            (q.kind == Quantity::Weight ? f.weight_step : q.kind == Quantity::Bias ? f.bias_step : f.act_step)[q.node] =
                step;
        }
        pending = std::move(next);
    }
    for (const auto& [q, step] : fixed)
        (q.kind == Quantity::Weight ? f.weight_step : q.kind == Quantity::Bias ? f.bias_step : f.act_step)[q.node] =
            step;
    return f;
}

/// Folds batch norm, selects step sizes on `calib` and quantizes the weights.
inline QuantizedModel quantize(const ArchGraph& g, const WeightStore& w, const Dataset& calib, QuantMethod method,
                               int bits = kDefaultBits)
{
    auto [fg, fw] = fold_batchnorm(g, w);
    const auto f = method == QuantMethod::MaxRange ? maxrange_format(fg, fw, calib, bits)
                                                   : minpqe_format(fg, fw, calib, bits);
    return make_quantized_model(fg, fw, f, method);
}

} // namespace hwnas

#endif
