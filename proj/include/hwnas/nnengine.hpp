#ifndef HWNAS_NNENGINE_HPP
#define HWNAS_NNENGINE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <vector>

#include "hwnas/archgraph.hpp"
#include "hwnas/dataset.hpp"
#include "hwnas/error.hpp"
#include "hwnas/random.hpp"
#include "hwnas/tensor.hpp"

namespace hwnas {

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

enum class Mode { Inference, Training };

/// Called once per node after its output (post activation, post pooling) is
/// computed; may rewrite the values in place. Arguments: node, values, batch size.
using OutputHook = std::function<void(NodeId, std::span<double>, std::size_t)>;

namespace detail {

inline double dot(const double* a, const double* b, std::size_t n) noexcept
{
    double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i)
        s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

inline void axpy(double a, const double* x, double* y, std::size_t n) noexcept
{
    for (std::size_t i = 0; i < n; ++i)
        y[i] += a * x[i];
}

inline double sum(const double* x, std::size_t n) noexcept
{
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        s += x[i];
    return s;
}

/// SAME-padded patch matrix: row (c*kh+dy)*kw+dx, column y*W+x.
inline void im2col(const double* in, int C, int H, int W, int kh, int kw, double* col)
{
    const int ph = kh / 2, pw = kw / 2;
    for (int c = 0; c < C; ++c)
        for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx) {
                double* row = col + static_cast<std::size_t>((c * kh + dy) * kw + dx) * H * W;
                const double* src = in + static_cast<std::size_t>(c) * H * W;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + dy - ph;
                    double* r = row + y * W;
                    if (sy < 0 || sy >= H) {
                        std::fill(r, r + W, 0.0);
                        continue;
                    }
                    for (int x = 0; x < W; ++x) {
                        const int sx = x + dx - pw;
                        r[x] = (sx >= 0 && sx < W) ? src[sy * W + sx] : 0.0;
                    }
                }
            }
}

inline void col2im(const double* col, int C, int H, int W, int kh, int kw, double* in)
{
    const int ph = kh / 2, pw = kw / 2;
    for (int c = 0; c < C; ++c)
        for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx) {
                const double* row = col + static_cast<std::size_t>((c * kh + dy) * kw + dx) * H * W;
                double* dst = in + static_cast<std::size_t>(c) * H * W;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + dy - ph;
                    if (sy < 0 || sy >= H)
                        continue;
                    for (int x = 0; x < W; ++x) {
                        const int sx = x + dx - pw;
                        if (sx >= 0 && sx < W)
                            dst[sy * W + sx] += row[y * W + x];
                    }
                }
            }
}

/// Valid x range [lo, hi) for a tap offset so that x + off stays inside [0, W).
inline std::pair<int, int> tap_range(int off, int W) noexcept { return {std::max(0, -off), std::min(W, W - off)}; }

inline void depthwise_forward(const double* in, const double* k, int C, int H, int W, int kh, int kw, double* out)
{
    const int ph = kh / 2, pw = kw / 2;
    for (int c = 0; c < C; ++c) {
        const double* src = in + static_cast<std::size_t>(c) * H * W;
        double* dst = out + static_cast<std::size_t>(c) * H * W;
        std::fill(dst, dst + H * W, 0.0);
        for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx) {
                const double wv = k[(c * kh + dy) * kw + dx];
                const auto [y0, y1] = tap_range(dy - ph, H);
                const auto [x0, x1] = tap_range(dx - pw, W);
                for (int y = y0; y < y1; ++y)
                    axpy(wv, src + (y + dy - ph) * W + x0 + dx - pw, dst + y * W + x0,
                         static_cast<std::size_t>(std::max(0, x1 - x0)));
            }
    }
}

inline void depthwise_backward(const double* in, const double* k, const double* dout, int C, int H, int W, int kh,
                               int kw, double* dk, double* din)
{
    const int ph = kh / 2, pw = kw / 2;
    for (int c = 0; c < C; ++c) {
        const double* src = in + static_cast<std::size_t>(c) * H * W;
        const double* g = dout + static_cast<std::size_t>(c) * H * W;
        double* dsrc = din ? din + static_cast<std::size_t>(c) * H * W : nullptr;
        for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx) {
                const int ki = (c * kh + dy) * kw + dx;
                const auto [y0, y1] = tap_range(dy - ph, H);
                const auto [x0, x1] = tap_range(dx - pw, W);
                const auto len = static_cast<std::size_t>(std::max(0, x1 - x0));
                double acc = 0.0;
                for (int y = y0; y < y1; ++y) {
                    const int so = (y + dy - ph) * W + x0 + dx - pw;
                    acc += dot(g + y * W + x0, src + so, len);
                    if (dsrc)
                        axpy(k[ki], g + y * W + x0, dsrc + so, len);
                }
                dk[ki] += acc;
            }
    }
}

inline bool all_finite(std::span<const double> v) noexcept
{
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

} // namespace detail

/// Everything a forward pass keeps for the backward pass, per node.
struct NodeTape {
    std::vector<double> dw;         ///< separable depthwise intermediate
    std::vector<double> xhat;       ///< normalized pre-activation (BN layers)
    std::vector<double> bn_mean;    ///< statistics used for normalization
    std::vector<double> bn_invstd;
    std::vector<double> bn_batch_var; ///< unbiased batch variance, training mode
    std::vector<double> act;        ///< post-activation, pre-pool (pooled layers)
    std::vector<std::uint32_t> argmax;
    std::vector<double> gap;        ///< head: globally pooled features
};

struct Tape {
    Mode mode = Mode::Inference;
    std::size_t batch = 0;
    std::map<NodeId, std::vector<double>> out; ///< node outputs still alive
    std::map<NodeId, NodeTape> nodes;
};

struct ForwardOptions {
    Mode mode = Mode::Inference;
    bool record = false;            ///< keep all state required by backward()
    std::vector<NodeId> capture;    ///< also keep these node outputs
    const OutputHook* hook = nullptr;
};

/// Runs the graph on `n` samples laid out [n][c][h][w]. The returned tape
/// always holds the output node's values.
inline Tape run_forward(const ArchGraph& g, const WeightStore& w, std::span<const double> x, std::size_t n,
                        const ForwardOptions& opt = {})
{
    const Shape in_shape = g.shape(g.input_id());
    if (x.size() != n * in_shape.size())
        throw Error(Errc::ShapeMismatch, "batch holds " + std::to_string(x.size()) + " values, expected " +
                                             std::to_string(n * in_shape.size()));
    Tape t;
    t.mode = opt.mode;
    t.batch = n;
    std::map<NodeId, std::size_t> pending;
    for (NodeId id : g.order())
        pending[id] = g.successors(id).size();
    auto keep = [&](NodeId id) {
        return opt.record || id == g.output_id() ||
               std::find(opt.capture.begin(), opt.capture.end(), id) != opt.capture.end();
    };

    for (NodeId id : g.order()) {
        const auto& node = g.node(id);
        const Shape os = g.shape(id);
        std::vector<double> out;
        NodeTape nt;

        if (node.is_input()) {
            out.assign(x.begin(), x.end());
        } else if (node.is_conv()) {
            const auto& c = node.conv();
            const Shape is = g.input_shape(id);
            const auto& in = t.out.at(node.preds[0]);
            const int H = is.height, W = is.width;
            const std::size_t P = static_cast<std::size_t>(H) * W;
            const std::size_t cin = static_cast<std::size_t>(is.channels);
            const std::size_t cout = static_cast<std::size_t>(c.out_channels);
            const auto& bias = w.at(id, pname::bias);
            std::vector<double> pre(n * cout * P);
            if (c.separable) {
                const auto& dk = w.at(id, pname::dw_kernel);
                const auto& pk = w.at(id, pname::pw_kernel);
                std::vector<double> dw(n * cin * P);
                for (std::size_t s = 0; s < n; ++s) {
                    double* d = dw.data() + s * cin * P;
                    detail::depthwise_forward(in.data() + s * cin * P, dk.data(), is.channels, H, W, c.kernel_h,
                                              c.kernel_w, d);
                    for (std::size_t co = 0; co < cout; ++co) {
                        double* o = pre.data() + (s * cout + co) * P;
                        std::fill(o, o + P, bias[co]);
                        for (std::size_t ci = 0; ci < cin; ++ci)
                            detail::axpy(pk[co * cin + ci], d + ci * P, o, P);
                    }
                }
                if (opt.record)
                    nt.dw = std::move(dw);
            } else {
                const auto& k = w.at(id, pname::kernel);
                const std::size_t K = cin * static_cast<std::size_t>(c.kernel_h * c.kernel_w);
                const bool pointwise = c.kernel_h == 1 && c.kernel_w == 1;
                std::vector<double> col(pointwise ? 0 : K * P);
                for (std::size_t s = 0; s < n; ++s) {
                    const double* src = in.data() + s * cin * P;
                    if (!pointwise) {
                        detail::im2col(src, is.channels, H, W, c.kernel_h, c.kernel_w, col.data());
                        src = col.data();
                    }
                    for (std::size_t co = 0; co < cout; ++co) {
                        double* o = pre.data() + (s * cout + co) * P;
                        std::fill(o, o + P, bias[co]);
                        const double* kr = k.data() + co * K;
                        for (std::size_t kk = 0; kk < K; ++kk)
                            detail::axpy(kr[kk], src + kk * P, o, P);
                    }
                }
            }

            if (node.batchnorm) {
                const auto& gamma = w.at(id, pname::bn_gamma);
                const auto& beta = w.at(id, pname::bn_beta);
                nt.bn_mean.assign(cout, 0.0);
                nt.bn_invstd.assign(cout, 0.0);
                if (opt.mode == Mode::Training) {
                    nt.bn_batch_var.assign(cout, 0.0);
                    const double M = static_cast<double>(n * P);
                    for (std::size_t co = 0; co < cout; ++co) {
                        double m = 0.0;
                        for (std::size_t s = 0; s < n; ++s)
                            m += detail::sum(pre.data() + (s * cout + co) * P, P);
                        m /= M;
                        double v = 0.0;
                        for (std::size_t s = 0; s < n; ++s) {
                            const double* p = pre.data() + (s * cout + co) * P;
                            for (std::size_t i = 0; i < P; ++i)
                                v += (p[i] - m) * (p[i] - m);
                        }
                        nt.bn_batch_var[co] = M > 1 ? v / (M - 1) : 0.0;
                        v /= M;
                        nt.bn_mean[co] = m;
                        nt.bn_invstd[co] = 1.0 / std::sqrt(v + kBnEps);
                    }
                } else {
                    const auto& rm = w.at(id, pname::bn_mean);
                    const auto& rv = w.at(id, pname::bn_var);
                    for (std::size_t co = 0; co < cout; ++co) {
                        nt.bn_mean[co] = rm[co];
                        nt.bn_invstd[co] = 1.0 / std::sqrt(rv[co] + kBnEps);
                    }
                }
                if (opt.record)
                    nt.xhat.resize(pre.size());
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t co = 0; co < cout; ++co) {
                        double* p = pre.data() + (s * cout + co) * P;
                        const double m = nt.bn_mean[co], is_ = nt.bn_invstd[co];
                        for (std::size_t i = 0; i < P; ++i) {
                            const double xh = (p[i] - m) * is_;
                            if (opt.record)
                                nt.xhat[(s * cout + co) * P + i] = xh;
                            p[i] = gamma[co] * xh + beta[co];
                        }
                    }
            }
            if (node.activation == Activation::ReLU)
                for (double& v : pre)
                    v = v > 0.0 ? v : 0.0;

            if (node.pool_factor == kMaxPoolFactor) {
                const int oh = H / 2, ow = W / 2;
                out.resize(n * cout * static_cast<std::size_t>(oh * ow));
                if (opt.record)
                    nt.argmax.resize(out.size());
                for (std::size_t sc = 0; sc < n * cout; ++sc) {
                    const double* p = pre.data() + sc * P;
                    for (int y = 0; y < oh; ++y)
                        for (int xx = 0; xx < ow; ++xx) {
                            const int base = 2 * y * W + 2 * xx;
                            const int cand[4] = {base, base + 1, base + W, base + W + 1};
                            int best = cand[0];
                            for (int q = 1; q < 4; ++q)
                                if (p[cand[q]] > p[best])
                                    best = cand[q];
                            const std::size_t oi = sc * static_cast<std::size_t>(oh * ow) + y * ow + xx;
                            out[oi] = p[best];
                            if (opt.record)
                                nt.argmax[oi] = static_cast<std::uint32_t>(best);
                        }
                }
                if (opt.record)
                    nt.act = std::move(pre);
            } else {
                out = std::move(pre);
            }
        } else if (node.is_add()) {
            const auto& a = t.out.at(node.preds[0]);
            const auto& b = t.out.at(node.preds[1]);
            out.resize(a.size());
            for (std::size_t i = 0; i < a.size(); ++i)
                out[i] = a[i] + b[i];
            if (node.activation == Activation::ReLU)
                for (double& v : out)
                    v = v > 0.0 ? v : 0.0;
        } else if (node.is_concat()) {
            const auto& a = t.out.at(node.preds[0]);
            const auto& b = t.out.at(node.preds[1]);
            const std::size_t sa = g.shape(node.preds[0]).size(), sb = g.shape(node.preds[1]).size();
            out.reserve(a.size() + b.size());
            for (std::size_t s = 0; s < n; ++s) {
                out.insert(out.end(), a.begin() + static_cast<std::ptrdiff_t>(s * sa),
                           a.begin() + static_cast<std::ptrdiff_t>((s + 1) * sa));
                out.insert(out.end(), b.begin() + static_cast<std::ptrdiff_t>(s * sb),
                           b.begin() + static_cast<std::ptrdiff_t>((s + 1) * sb));
            }
        } else { // head
            const Shape is = g.input_shape(id);
            const auto& in = t.out.at(node.preds[0]);
            const std::size_t C = static_cast<std::size_t>(is.channels), P = is.plane();
            const std::size_t K = static_cast<std::size_t>(os.channels);
            const auto& dw = w.at(id, pname::dense_w);
            const auto& db = w.at(id, pname::dense_b);
            std::vector<double> gap(n * C);
            for (std::size_t i = 0; i < n * C; ++i)
                gap[i] = detail::sum(in.data() + i * P, P) / static_cast<double>(P);
            out.resize(n * K);
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t k = 0; k < K; ++k)
                    out[s * K + k] = db[k] + detail::dot(dw.data() + k * C, gap.data() + s * C, C);
            if (opt.record)
                nt.gap = std::move(gap);
        }

        if (opt.hook && *opt.hook)
            (*opt.hook)(id, out, n);
        if (!detail::all_finite(out))
            throw Error(Errc::NonFiniteActivation, "non-finite activation at node " + std::to_string(id));
        t.out[id] = std::move(out);
        if (opt.record)
            t.nodes[id] = std::move(nt);
        for (NodeId p : node.preds)
            if (--pending[p] == 0 && !keep(p))
                t.out.erase(p);
    }
    return t;
}

/// Output of the graph's output node (logits for a classifier) in inference mode.
inline std::vector<double> forward(const ArchGraph& g, const WeightStore& w, std::span<const double> x, std::size_t n,
                                   const OutputHook& hook = {})
{
    ForwardOptions opt;
    opt.hook = &hook;
    auto t = run_forward(g, w, x, n, opt);
    return std::move(t.out.at(g.output_id()));
}

/// Post-activation, post-pool feature map of every node (the values written to memory).
inline std::map<NodeId, std::vector<double>> capture_activations(const ArchGraph& g, const WeightStore& w,
                                                                 std::span<const double> x, std::size_t n)
{
    ForwardOptions opt;
    opt.capture = g.order();
    return run_forward(g, w, x, n, opt).out;
}

/// Accumulates parameter gradients into `grad` given output gradients seeded at
/// arbitrary nodes. `tape` must come from a recording forward pass.
inline void backward(const ArchGraph& g, const WeightStore& w, const Tape& t,
                     std::map<NodeId, std::vector<double>> seed, WeightStore& grad)
{
    const std::size_t n = t.batch;
    const auto& order = g.order();
    auto dslot = [&](NodeId p) -> std::vector<double>& {
        auto& v = seed[p];
        if (v.empty())
            v.assign(n * g.shape(p).size(), 0.0);
        return v;
    };
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const NodeId id = *it;
        auto sit = seed.find(id);
        if (sit == seed.end() || sit->second.empty())
            continue;
        const auto& node = g.node(id);
        if (node.is_input())
            continue;
        std::vector<double> dout = std::move(sit->second);
        seed.erase(sit);
        const NodeTape& nt = t.nodes.at(id);

        if (node.is_conv()) {
            const auto& c = node.conv();
            const Shape is = g.input_shape(id);
            const int H = is.height, W = is.width;
            const std::size_t P = static_cast<std::size_t>(H) * W;
            const std::size_t cin = static_cast<std::size_t>(is.channels);
            const std::size_t cout = static_cast<std::size_t>(c.out_channels);
            std::vector<double> d(n * cout * P, 0.0);
            if (node.pool_factor == kMaxPoolFactor) {
                const std::size_t op = P / 4;
                for (std::size_t sc = 0; sc < n * cout; ++sc)
                    for (std::size_t i = 0; i < op; ++i)
                        d[sc * P + nt.argmax[sc * op + i]] += dout[sc * op + i];
                if (node.activation == Activation::ReLU)
                    for (std::size_t i = 0; i < d.size(); ++i)
                        if (!(nt.act[i] > 0.0))
                            d[i] = 0.0;
            } else {
                d = std::move(dout);
                if (node.activation == Activation::ReLU) {
                    const auto& o = t.out.at(id);
                    for (std::size_t i = 0; i < d.size(); ++i)
                        if (!(o[i] > 0.0))
                            d[i] = 0.0;
                }
            }
            if (node.batchnorm) {
                const auto& gamma = w.at(id, pname::bn_gamma);
                auto& dgamma = grad.at(id, pname::bn_gamma);
                auto& dbeta = grad.at(id, pname::bn_beta);
                const double M = static_cast<double>(n * P);
                for (std::size_t co = 0; co < cout; ++co) {
                    double sd = 0.0, sdx = 0.0;
                    for (std::size_t s = 0; s < n; ++s) {
                        const std::size_t off = (s * cout + co) * P;
                        sd += detail::sum(d.data() + off, P);
                        sdx += detail::dot(d.data() + off, nt.xhat.data() + off, P);
                    }
                    dgamma[co] += sdx;
                    dbeta[co] += sd;
                    const double gi = gamma[co] * nt.bn_invstd[co];
                    for (std::size_t s = 0; s < n; ++s) {
                        double* p = d.data() + (s * cout + co) * P;
                        const double* xh = nt.xhat.data() + (s * cout + co) * P;
                        if (t.mode == Mode::Training) {
                            for (std::size_t i = 0; i < P; ++i)
                                p[i] = gi * (p[i] - sd / M - xh[i] * sdx / M);
                        } else {
                            for (std::size_t i = 0; i < P; ++i)
                                p[i] *= gi;
                        }
                    }
                }
            }
            auto& dbias = grad.at(id, pname::bias);
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t co = 0; co < cout; ++co)
                    dbias[co] += detail::sum(d.data() + (s * cout + co) * P, P);

            const NodeId pred = node.preds[0];
            const bool need_din = !g.node(pred).is_input();
            std::vector<double>* din = need_din ? &dslot(pred) : nullptr;
            const auto& in = t.out.at(pred);
            if (c.separable) {
                const auto& dk = w.at(id, pname::dw_kernel);
                const auto& pk = w.at(id, pname::pw_kernel);
                auto& gdk = grad.at(id, pname::dw_kernel);
                auto& gpk = grad.at(id, pname::pw_kernel);
                std::vector<double> ddw(cin * P);
                for (std::size_t s = 0; s < n; ++s) {
                    const double* dws = nt.dw.data() + s * cin * P;
                    const double* ds = d.data() + s * cout * P;
                    std::fill(ddw.begin(), ddw.end(), 0.0);
                    for (std::size_t co = 0; co < cout; ++co)
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            gpk[co * cin + ci] += detail::dot(ds + co * P, dws + ci * P, P);
                            detail::axpy(pk[co * cin + ci], ds + co * P, ddw.data() + ci * P, P);
                        }
                    detail::depthwise_backward(in.data() + s * cin * P, dk.data(), ddw.data(), is.channels, H, W,
                                               c.kernel_h, c.kernel_w, gdk.data(),
                                               din ? din->data() + s * cin * P : nullptr);
                }
            } else {
                const auto& k = w.at(id, pname::kernel);
                auto& gk = grad.at(id, pname::kernel);
                const std::size_t K = cin * static_cast<std::size_t>(c.kernel_h * c.kernel_w);
                const bool pointwise = c.kernel_h == 1 && c.kernel_w == 1;
                std::vector<double> col(pointwise ? 0 : K * P), dcol(K * P);
                for (std::size_t s = 0; s < n; ++s) {
                    const double* src = in.data() + s * cin * P;
                    if (!pointwise) {
                        detail::im2col(src, is.channels, H, W, c.kernel_h, c.kernel_w, col.data());
                        src = col.data();
                    }
                    const double* ds = d.data() + s * cout * P;
                    for (std::size_t co = 0; co < cout; ++co)
                        for (std::size_t kk = 0; kk < K; ++kk)
                            gk[co * K + kk] += detail::dot(ds + co * P, src + kk * P, P);
                    if (!din)
                        continue;
                    double* target = pointwise ? din->data() + s * cin * P : dcol.data();
                    if (!pointwise)
                        std::fill(dcol.begin(), dcol.end(), 0.0);
                    for (std::size_t co = 0; co < cout; ++co)
                        for (std::size_t kk = 0; kk < K; ++kk)
                            detail::axpy(k[co * K + kk], ds + co * P, target + kk * P, P);
                    if (!pointwise)
                        detail::col2im(dcol.data(), is.channels, H, W, c.kernel_h, c.kernel_w,
                                       din->data() + s * cin * P);
                }
            }
        } else if (node.is_add()) {
            if (node.activation == Activation::ReLU) {
                const auto& o = t.out.at(id);
                for (std::size_t i = 0; i < dout.size(); ++i)
                    if (!(o[i] > 0.0))
                        dout[i] = 0.0;
            }
            for (NodeId p : node.preds) {
                if (g.node(p).is_input())
                    continue;
                auto& dp = dslot(p);
                for (std::size_t i = 0; i < dout.size(); ++i)
                    dp[i] += dout[i];
            }
        } else if (node.is_concat()) {
            const std::size_t sa = g.shape(node.preds[0]).size(), sb = g.shape(node.preds[1]).size();
            for (int side = 0; side < 2; ++side) {
                const NodeId p = node.preds[static_cast<std::size_t>(side)];
                if (g.node(p).is_input())
                    continue;
                auto& dp = dslot(p);
                const std::size_t len = side == 0 ? sa : sb, off = side == 0 ? 0 : sa;
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t i = 0; i < len; ++i)
                        dp[s * len + i] += dout[s * (sa + sb) + off + i];
            }
        } else { // head
            const Shape is = g.input_shape(id);
            const std::size_t C = static_cast<std::size_t>(is.channels), P = is.plane();
            const std::size_t K = static_cast<std::size_t>(g.shape(id).channels);
            const auto& dw = w.at(id, pname::dense_w);
            auto& gdw = grad.at(id, pname::dense_w);
            auto& gdb = grad.at(id, pname::dense_b);
            const NodeId pred = node.preds[0];
            std::vector<double>* din = g.node(pred).is_input() ? nullptr : &dslot(pred);
            for (std::size_t s = 0; s < n; ++s) {
                for (std::size_t k = 0; k < K; ++k) {
                    const double gk = dout[s * K + k];
                    gdb[k] += gk;
                    detail::axpy(gk, nt.gap.data() + s * C, gdw.data() + k * C, C);
                }
                if (!din)
                    continue;
                for (std::size_t c = 0; c < C; ++c) {
                    double gsum = 0.0;
                    for (std::size_t k = 0; k < K; ++k)
                        gsum += dw[k * C + c] * dout[s * K + k];
                    const double v = gsum / static_cast<double>(P);
                    double* dst = din->data() + (s * C + c) * P;
                    for (std::size_t i = 0; i < P; ++i)
                        dst[i] += v;
                }
            }
        }
    }
}

/// Mean softmax cross-entropy; writes d(loss)/d(logits) when `dlogits` is given.
inline double softmax_cross_entropy(std::span<const double> logits, std::span<const int> labels, std::size_t classes,
                                    std::vector<double>* dlogits = nullptr)
{
    const std::size_t n = labels.size();
    if (logits.size() != n * classes)
        throw Error(Errc::ShapeMismatch, "logit count does not match labels");
    if (dlogits)
        dlogits->assign(logits.size(), 0.0);
    double loss = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        const double* z = logits.data() + s * classes;
        const double m = *std::max_element(z, z + classes);
        double den = 0.0;
        for (std::size_t k = 0; k < classes; ++k)
            den += std::exp(z[k] - m);
        const auto y = static_cast<std::size_t>(labels[s]);
        loss += std::log(den) - (z[y] - m);
        if (dlogits)
            for (std::size_t k = 0; k < classes; ++k)
                (*dlogits)[s * classes + k] =
                    (std::exp(z[k] - m) / den - (k == y ? 1.0 : 0.0)) / static_cast<double>(n);
    }
    return loss / static_cast<double>(n);
}

inline std::size_t num_classes(const ArchGraph& g)
{
    const auto& out = g.node(g.output_id());
    if (!out.is_head())
        throw Error(Errc::InvalidArgument, "graph has no classifier head");
    return static_cast<std::size_t>(std::get<DenseHead>(out.kind).num_classes);
}

/// Training-mode loss and gradients of all learned tensors for one batch.
inline double loss_and_gradient(const ArchGraph& g, const WeightStore& w, std::span<const double> x,
                                std::span<const int> labels, WeightStore& grad, Tape* tape_out = nullptr)
{
    ForwardOptions opt;
    opt.mode = Mode::Training;
    opt.record = true;
    Tape t = run_forward(g, w, x, labels.size(), opt);
    std::vector<double> dlogits;
    const double loss = softmax_cross_entropy(t.out.at(g.output_id()), labels, num_classes(g), &dlogits);
    grad = w.zeros_like();
    backward(g, w, t, {{g.output_id(), std::move(dlogits)}}, grad);
    if (tape_out)
        *tape_out = std::move(t);
    return loss;
}

/// Folds the batch statistics of a training-mode tape into the running statistics.
inline void update_running_stats(const ArchGraph& g, WeightStore& w, const Tape& t, double momentum = kBnMomentum)
{
    for (NodeId id : g.order()) {
        const auto& node = g.node(id);
        if (!node.is_conv() || !node.batchnorm)
            continue;
        const auto& nt = t.nodes.at(id);
        auto& rm = w.at(id, pname::bn_mean);
        auto& rv = w.at(id, pname::bn_var);
        for (std::size_t c = 0; c < rm.size(); ++c) {
            rm[c] = (1.0 - momentum) * rm[c] + momentum * nt.bn_mean[c];
            rv[c] = (1.0 - momentum) * rv[c] + momentum * nt.bn_batch_var[c];
        }
    }
}

/// Cosine-annealed learning rate; exactly eta0 at t = 0 and exactly 0 for t >= T.
inline double cosine_lr(double eta0, std::size_t t, std::size_t T) noexcept
{
    if (T == 0 || t >= T)
        return 0.0;
    return eta0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(T)));
}

struct TrainConfig {
    int epochs = 5;
    int batch_size = 32;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    bool augment = true;  ///< random crop with zero padding
    int crop_padding = 2;
    bool hflip = false;   ///< random horizontal flips
    std::uint64_t seed = 0;

    void validate() const
    {
        if (epochs < 0 || batch_size < 1 || !(learning_rate > 0.0) || momentum < 0.0 || momentum >= 1.0 ||
            weight_decay < 0.0 || crop_padding < 0)
            throw Error(Errc::ConfigError, "invalid training configuration");
    }
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double train_error = 0.0;
    double val_error = 0.0;
};

struct TrainResult {
    WeightStore weights;
    std::vector<EpochStats> history;
    double val_error = 0.0;
};

inline std::vector<int> predict(const ArchGraph& g, const WeightStore& w, std::span<const double> x, std::size_t n,
                                const OutputHook& hook = {})
{
    const auto logits = forward(g, w, x, n, hook);
    const std::size_t K = logits.size() / std::max<std::size_t>(n, 1);
    std::vector<int> out(n);
    for (std::size_t s = 0; s < n; ++s) {
        const double* z = logits.data() + s * K;
        out[s] = static_cast<int>(std::max_element(z, z + K) - z);
    }
    return out;
}

/// Predicted labels for a whole dataset, evaluated in chunks.
inline std::vector<int> predict(const ArchGraph& g, const WeightStore& w, const Dataset& d,
                                const OutputHook& hook = {}, std::size_t chunk = 64)
{
    std::vector<int> out;
    out.reserve(d.size());
    const std::size_t S = d.shape.size();
    for (std::size_t b = 0; b < d.size(); b += chunk) {
        const std::size_t m = std::min(chunk, d.size() - b);
        auto p = predict(g, w, std::span<const double>(d.values.data() + b * S, m * S), m, hook);
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

/// Fraction of misclassified samples.
inline double error_rate(const ArchGraph& g, const WeightStore& w, const Dataset& d, const OutputHook& hook = {})
{
    if (d.size() == 0)
        throw Error(Errc::EmptyInput, "empty evaluation set");
    const auto p = predict(g, w, d, hook);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        wrong += p[i] != d.labels[i];
    return static_cast<double>(wrong) / static_cast<double>(d.size());
}

namespace detail {

template <typename Fn>
auto diverged_on_nonfinite(Fn&& fn)
{
    try {
        return fn();
    } catch (const Error& err) {
        if (err.code() == Errc::NonFiniteActivation)
            throw Error(Errc::DivergenceDetected, std::string("training diverged: ") + err.what());
        throw;
    }
}

/// Random shift with zero fill and optional horizontal flip, in place per sample.
inline void augment(std::span<double> sample, const Shape& s, int pad, bool flip, Rng& rng)
{
    const int dy = pad > 0 ? static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(2 * pad + 1))) - pad : 0;
    const int dx = pad > 0 ? static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(2 * pad + 1))) - pad : 0;
    const bool f = flip && uniform_index(rng, 2) == 1;
    if (dy == 0 && dx == 0 && !f)
        return;
    std::vector<double> src(sample.begin(), sample.end());
    const int H = s.height, W = s.width;
    for (int c = 0; c < s.channels; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int sy = y + dy;
                int sx = x + dx;
                if (f)
                    sx = W - 1 - sx;
                sample[static_cast<std::size_t>((c * H + y) * W + x)] =
                    (sy >= 0 && sy < H && sx >= 0 && sx < W) ? src[static_cast<std::size_t>((c * H + sy) * W + sx)]
                                                             : 0.0;
            }
}

} // namespace detail

/// SGD with momentum, weight decay and a per-step cosine schedule.
/// Deterministic for a given (graph, weights, data, config).
inline TrainResult train(const ArchGraph& g, WeightStore w, const Dataset& train_set, const Dataset& val_set,
                         const TrainConfig& cfg)
{
    cfg.validate();
    check_layout(g, w);
    if (train_set.size() == 0 && cfg.epochs > 0)
        throw Error(Errc::EmptyInput, "empty training set");
    TrainResult r;
    Rng rng(cfg.seed);
    const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t steps_per_epoch = (train_set.size() + B - 1) / B;
    const std::size_t T = steps_per_epoch * static_cast<std::size_t>(cfg.epochs);
    WeightStore velocity = w.zeros_like();
    const std::size_t S = train_set.shape.size();
    std::vector<std::size_t> idx(train_set.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::size_t step = 0;
    std::vector<double> xb;
    std::vector<int> yb;
    for (int e = 0; e < cfg.epochs; ++e) {
        shuffle(idx, rng);
        EpochStats st;
        st.epoch = e + 1;
        std::size_t wrong = 0;
        for (std::size_t b = 0; b < idx.size(); b += B) {
            const std::size_t m = std::min(B, idx.size() - b);
            xb.resize(m * S);
            yb.resize(m);
            for (std::size_t i = 0; i < m; ++i) {
                auto src = train_set.sample(idx[b + i]);
                std::copy(src.begin(), src.end(), xb.begin() + static_cast<std::ptrdiff_t>(i * S));
                yb[i] = train_set.labels[idx[b + i]];
                if (cfg.augment || cfg.hflip)
                    detail::augment(std::span<double>(xb.data() + i * S, S), train_set.shape,
                                    cfg.augment ? cfg.crop_padding : 0, cfg.hflip, rng);
            }
            WeightStore grad;
            Tape tape;
            const double loss = detail::diverged_on_nonfinite([&] { return loss_and_gradient(g, w, xb, yb, grad, &tape); });
            if (!std::isfinite(loss))
                throw Error(Errc::DivergenceDetected, "training loss became non-finite");
            const auto& logits = tape.out.at(g.output_id());
            const std::size_t K = logits.size() / m;
            for (std::size_t i = 0; i < m; ++i) {
                const double* z = logits.data() + i * K;
                wrong += static_cast<int>(std::max_element(z, z + K) - z) != yb[i];
            }
            st.train_loss += loss * static_cast<double>(m);
            const double lr = cosine_lr(cfg.learning_rate, step, T);
            for (auto& [id, params] : w.layers)
                for (auto& [name, t] : params) {
                    if (is_running_stat(name))
                        continue;
                    auto& gt = grad.layers.at(id).at(name).values;
                    auto& vt = velocity.layers.at(id).at(name).values;
                    for (std::size_t i = 0; i < t.size(); ++i) {
                        vt[i] = cfg.momentum * vt[i] + gt[i] + cfg.weight_decay * t.values[i];
                        t.values[i] -= lr * vt[i];
                    }
                }
            update_running_stats(g, w, tape);
            ++step;
        }
        st.train_loss /= static_cast<double>(idx.size());
        st.train_error = static_cast<double>(wrong) / static_cast<double>(idx.size());
        st.val_error =
            val_set.size() ? detail::diverged_on_nonfinite([&] { return error_rate(g, w, val_set); }) : 0.0;
        r.history.push_back(st);
    }
    r.val_error = r.history.empty() ? (val_set.size() ? error_rate(g, w, val_set) : 0.0) : r.history.back().val_error;
    r.weights = std::move(w);
    return r;
}

namespace detail {

/// Fingerprint of every ReLU on/off state and max-pool winner of a recorded pass.
/// Two passes with equal fingerprints lie in the same smooth piece of the loss.
inline std::uint64_t kink_pattern(const ArchGraph& g, const Tape& t)
{
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&](std::uint64_t v) {
        h ^= v;
        h *= 0x100000001b3ull;
    };
    for (NodeId id : g.order()) {
        const auto& node = g.node(id);
        if (node.activation == Activation::ReLU) {
            const auto& v = node.pool_factor == kMaxPoolFactor ? t.nodes.at(id).act : t.out.at(id);
            for (double x : v)
                mix(x > 0.0);
        }
        if (node.pool_factor == kMaxPoolFactor)
            for (auto a : t.nodes.at(id).argmax)
                mix(a);
    }
    return h;
}

} // namespace detail

struct GradientCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;  ///< parameters compared
    std::size_t skipped = 0;  ///< parameters whose probe crossed a ReLU or max-pool kink
};

/// Compares analytic gradients of the training-mode loss with central finite
/// differences. Relative error is |a - f| / max(|a|, |f|, floor) so vanishing
/// gradients compare absolutely. A probe whose +-step perturbation changes any
/// ReLU state or pooling winner straddles a non-differentiable point where
/// central differences are meaningless; such parameters are counted as skipped.
inline GradientCheckReport gradient_check_report(const ArchGraph& g, const WeightStore& w,
                                                 std::span<const double> x, std::span<const int> labels,
                                                 double step = 1e-3, double floor = 1e-3)
{
    WeightStore grad;
    Tape base;
    (void)loss_and_gradient(g, w, x, labels, grad, &base);
    const std::uint64_t pattern = detail::kink_pattern(g, base);
    WeightStore probe = w;
    const std::size_t K = num_classes(g);
    bool smooth = true;
    auto loss_at = [&] {
        ForwardOptions opt;
        opt.mode = Mode::Training;
        opt.record = true;
        auto t = run_forward(g, probe, x, labels.size(), opt);
        smooth = smooth && detail::kink_pattern(g, t) == pattern;
        return softmax_cross_entropy(t.out.at(g.output_id()), labels, K);
    };
    GradientCheckReport r;
    for (auto& [id, params] : probe.layers)
        for (auto& [name, t] : params) {
            if (is_running_stat(name))
                continue;
            const auto& ga = grad.layers.at(id).at(name).values;
            for (std::size_t i = 0; i < t.size(); ++i) {
                const double orig = t.values[i];
                smooth = true;
                t.values[i] = orig + step;
                const double lp = loss_at();
                t.values[i] = orig - step;
                const double lm = loss_at();
                t.values[i] = orig;
                if (!smooth) {
                    ++r.skipped;
                    continue;
                }
                const double fd = (lp - lm) / (2.0 * step);
                const double rel = std::abs(ga[i] - fd) / std::max({std::abs(ga[i]), std::abs(fd), floor});
                r.max_rel_error = std::max(r.max_rel_error, rel);
                ++r.checked;
            }
        }
    return r;
}

/// Largest relative gradient error; see gradient_check_report().
inline double gradient_check(const ArchGraph& g, const WeightStore& w, std::span<const double> x,
                             std::span<const int> labels, double step = 1e-3, double floor = 1e-3)
{
    return gradient_check_report(g, w, x, labels, step, floor).max_rel_error;
}

} // namespace hwnas

#endif // HWNAS_NNENGINE_HPP
