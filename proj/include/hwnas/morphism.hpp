#ifndef HWNAS_MORPHISM_HPP
#define HWNAS_MORPHISM_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "hwnas/dataset.hpp"
#include "hwnas/mutation.hpp"
#include "hwnas/nnengine.hpp"
#include "hwnas/tensor.hpp"

namespace hwnas {

namespace detail {

/// Child input channel -> (parent input channel, coefficient). Channels with
/// no counterpart in the parent layer start with zero incoming weights.
struct SliceRef {
    Slice parent;
    double coef = 1.0;
};

class Transfer {
public:
    Transfer(const ArchGraph& pg, const WeightStore& pw, const ArchGraph& cg, const Mutation& m)
        : pg_(pg), pw_(pw), cg_(cg), m_(m), rng_(m.seed)
    {
        if (pg.contains(m.target))
            target_slices_ = output_slices(pg, m.target);
        if (m.kind == MutationKind::Widen)
            init_widen();
        if (m.kind == MutationKind::Prune)
            init_prune();
    }

    /// Weights for the child; `affected` receives layers whose tensors are not verbatim copies.
    WeightStore run(std::set<NodeId>& affected)
    {
        WeightStore cw;
        for (NodeId id : cg_.order()) {
            const auto& node = cg_.node(id);
            if (!node.is_weighted())
                continue;
            LayerParams p = param_layout(cg_, id);
            const bool fresh = std::find(m_.new_ids.begin(), m_.new_ids.end(), id) != m_.new_ids.end();
            if (fresh) {
                init_new(id, p);
                affected.insert(id);
            } else if (copy_layer(id, p)) {
                affected.insert(id);
            }
            cw.layers[id] = std::move(p);
        }
        return cw;
    }

private:
    std::optional<SliceRef> map_slice(Slice s) const
    {
        switch (m_.kind) {
        case MutationKind::InsertConv:
            if (s.src == m_.new_ids[0])
                return SliceRef{target_slices_[static_cast<std::size_t>(s.channel)], 1.0};
            break;
        case MutationKind::AddSkip:
            if (m_.add_merge && s.src == m_.new_ids[1])
                return SliceRef{target_slices_[static_cast<std::size_t>(s.channel)], 1.0};
            break;
        case MutationKind::Widen:
            if (s.src == m_.target)
                return SliceRef{{m_.target, widen_src_[static_cast<std::size_t>(s.channel)]},
                                widen_coef_[static_cast<std::size_t>(s.channel)]};
            break;
        case MutationKind::Prune:
            if (s.src == m_.target)
                return SliceRef{{m_.target, kept_[static_cast<std::size_t>(s.channel)]}, 1.0};
            break;
        case MutationKind::Remove: {
            const auto& r = pg_.node(m_.target);
            if (!r.is_conv() && !r.is_add())
                break;
            const auto src = output_slices(pg_, r.preds[0]);
            const auto it = std::find(src.begin(), src.end(), s);
            if (it != src.end())
                return SliceRef{{m_.target, static_cast<int>(it - src.begin())}, 1.0};
            break;
        }
        default:
            break;
        }
        return SliceRef{s, 1.0};
    }

    /// Parent output channel feeding each child output channel of `id`.
    std::vector<int> out_map(NodeId id) const
    {
        const int c = cg_.shape(id).channels;
        std::vector<int> map(static_cast<std::size_t>(c));
        for (int j = 0; j < c; ++j) {
            if (id == m_.target && m_.kind == MutationKind::Widen)
                map[static_cast<std::size_t>(j)] = widen_src_[static_cast<std::size_t>(j)];
            else if (id == m_.target && m_.kind == MutationKind::Prune)
                map[static_cast<std::size_t>(j)] = kept_[static_cast<std::size_t>(j)];
            else
                map[static_cast<std::size_t>(j)] = j;
        }
        return map;
    }

    /// Copies a surviving layer; returns true if anything had to be remapped.
    bool copy_layer(NodeId id, LayerParams& p)
    {
        const auto& node = cg_.node(id);
        const auto& pp = pw_.layers.at(id);
        bool changed = (id == m_.target && (m_.kind == MutationKind::Widen || m_.kind == MutationKind::Prune ||
                                            m_.kind == MutationKind::Separable));

        // Input channel correspondence.
        const auto cs = input_slices(cg_, id);
        const auto ps = input_slices(pg_, id);
        std::map<Slice, std::size_t> pindex;
        for (std::size_t i = 0; i < ps.size(); ++i)
            pindex[ps[i]] = i;
        std::vector<std::optional<std::pair<std::size_t, double>>> in(cs.size());
        for (std::size_t j = 0; j < cs.size(); ++j) {
            // A remapped channel the parent layer never read (e.g. a layer that
            // consumed the removed node's input directly) falls back to itself.
            auto ref = map_slice(cs[j]);
            auto it = ref ? pindex.find(ref->parent) : pindex.end();
            if (it != pindex.end())
                in[j] = std::make_pair(it->second, ref->coef);
            else if ((it = pindex.find(cs[j])) != pindex.end())
                in[j] = std::make_pair(it->second, 1.0);
            if (!in[j] || in[j]->first != j || in[j]->second != 1.0)
                changed = true;
        }
        if (cs.size() != ps.size())
            changed = true;
        const auto om = out_map(id);

        // Per-output-channel vectors.
        for (const char* name : {pname::bias, pname::bn_gamma, pname::bn_beta, pname::bn_mean, pname::bn_var,
                                 pname::dense_b}) {
            if (!p.count(name))
                continue;
            auto& dst = p.at(name);
            const auto& src = pp.at(name);
            for (std::size_t j = 0; j < dst.size(); ++j)
                dst[j] = src[static_cast<std::size_t>(om[j])];
        }

        if (node.is_head()) {
            auto& dst = p.at(pname::dense_w);
            const auto& src = pp.at(pname::dense_w);
            const std::size_t K = static_cast<std::size_t>(dst.dims[0]), Cc = cs.size(), Cp = ps.size();
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t j = 0; j < Cc; ++j)
                    dst[k * Cc + j] = in[j] ? in[j]->second * src[k * Cp + in[j]->first] : 0.0;
            return changed;
        }

        const auto& c = node.conv();
        const std::size_t taps = static_cast<std::size_t>(c.kernel_h * c.kernel_w);
        const std::size_t Cc = cs.size(), Cp = ps.size();
        const bool parent_sep = pg_.node(id).conv().separable;
        if (!c.separable) {
            auto& dst = p.at(pname::kernel);
            const auto& src = pp.at(pname::kernel);
            for (std::size_t co = 0; co < om.size(); ++co)
                for (std::size_t j = 0; j < Cc; ++j)
                    for (std::size_t t = 0; t < taps; ++t)
                        dst[(co * Cc + j) * taps + t] =
                            in[j] ? in[j]->second *
                                        src[(static_cast<std::size_t>(om[co]) * Cp + in[j]->first) * taps + t]
                                  : 0.0;
        } else if (parent_sep) {
            auto& dk = p.at(pname::dw_kernel);
            auto& pk = p.at(pname::pw_kernel);
            const auto& sdk = pp.at(pname::dw_kernel);
            const auto& spk = pp.at(pname::pw_kernel);
            const double sd = std::sqrt(2.0 / static_cast<double>(taps));
            for (std::size_t j = 0; j < Cc; ++j)
                for (std::size_t t = 0; t < taps; ++t)
                    dk[j * taps + t] = in[j] ? sdk[in[j]->first * taps + t] : sd * normal(rng_);
            for (std::size_t co = 0; co < om.size(); ++co)
                for (std::size_t j = 0; j < Cc; ++j)
                    pk[co * Cc + j] =
                        in[j] ? in[j]->second * spk[static_cast<std::size_t>(om[co]) * Cp + in[j]->first] : 0.0;
        } else {
            separable_from_dense(pp.at(pname::kernel), Cp, taps, p);
        }
        return changed;
    }

    /// Best rank-1 factorization per input channel of a dense kernel.
    static void separable_from_dense(const Tensor& k, std::size_t cin, std::size_t taps, LayerParams& p)
    {
        auto& dk = p.at(pname::dw_kernel);
        auto& pk = p.at(pname::pw_kernel);
        const std::size_t cout = static_cast<std::size_t>(k.dims[0]);
        for (std::size_t ci = 0; ci < cin; ++ci) {
            auto M = [&](std::size_t co, std::size_t t) { return k[(co * cin + ci) * taps + t]; };
            std::vector<double> v(taps, 1.0 / std::sqrt(static_cast<double>(taps))), u(cout);
            for (int it = 0; it < 100; ++it) {
                for (std::size_t co = 0; co < cout; ++co) {
                    double s = 0.0;
                    for (std::size_t t = 0; t < taps; ++t)
                        s += M(co, t) * v[t];
                    u[co] = s;
                }
                std::vector<double> nv(taps, 0.0);
                for (std::size_t co = 0; co < cout; ++co)
                    for (std::size_t t = 0; t < taps; ++t)
                        nv[t] += M(co, t) * u[co];
                double norm = 0.0;
                for (double x : nv)
                    norm += x * x;
                norm = std::sqrt(norm);
                if (norm == 0.0)
                    break;
                for (std::size_t t = 0; t < taps; ++t)
                    v[t] = nv[t] / norm;
            }
            for (std::size_t t = 0; t < taps; ++t)
                dk[ci * taps + t] = v[t];
            for (std::size_t co = 0; co < cout; ++co) {
                double s = 0.0;
                for (std::size_t t = 0; t < taps; ++t)
                    s += M(co, t) * v[t];
                pk[co * cin + ci] = s;
            }
        }
    }

    void init_new(NodeId id, LayerParams& p)
    {
        const auto& node = cg_.node(id);
        if (m_.kind == MutationKind::InsertConv) {
            // Dirac kernel and a BN that is exactly the identity at inference.
            const auto& c = node.conv();
            auto& k = p.at(pname::kernel);
            const std::size_t C = static_cast<std::size_t>(c.out_channels), taps = static_cast<std::size_t>(c.kernel_h * c.kernel_w);
            const std::size_t centre = static_cast<std::size_t>((c.kernel_h / 2) * c.kernel_w + c.kernel_w / 2);
            for (std::size_t o = 0; o < C; ++o)
                k[(o * C + o) * taps + centre] = 1.0;
            auto& var = p.at(pname::bn_var);
            std::fill(var.values.begin(), var.values.end(), 1.0 - kBnEps);
        }
        // The Add-skip branch conv keeps its all-zero layout: it contributes nothing.
    }

    void init_widen()
    {
        const int old = pg_.node(m_.target).conv().out_channels;
        const int now = m_.new_channels;
        widen_src_.resize(static_cast<std::size_t>(now));
        widen_coef_.assign(static_cast<std::size_t>(now), 0.0);
        std::vector<double> total(static_cast<std::size_t>(old), 0.0);
        for (int j = 0; j < now; ++j) {
            widen_src_[static_cast<std::size_t>(j)] = j % old;
            widen_coef_[static_cast<std::size_t>(j)] = uniform(rng_, 0.5, 1.5);
            total[static_cast<std::size_t>(j % old)] += widen_coef_[static_cast<std::size_t>(j)];
        }
        for (int j = 0; j < now; ++j)
            widen_coef_[static_cast<std::size_t>(j)] /= total[static_cast<std::size_t>(j % old)];
    }

    void init_prune()
    {
        const auto& pp = pw_.layers.at(m_.target);
        const int old = pg_.node(m_.target).conv().out_channels;
        std::vector<std::pair<double, int>> l1;
        const Tensor& k = pp.count(pname::kernel) ? pp.at(pname::kernel) : pp.at(pname::pw_kernel);
        const std::size_t row = k.size() / static_cast<std::size_t>(old);
        for (int o = 0; o < old; ++o) {
            double s = std::abs(pp.at(pname::bias)[static_cast<std::size_t>(o)]);
            for (std::size_t i = 0; i < row; ++i)
                s += std::abs(k[static_cast<std::size_t>(o) * row + i]);
            l1.emplace_back(-s, o); // largest first, lower index on ties
        }
        std::sort(l1.begin(), l1.end());
        for (int j = 0; j < m_.new_channels; ++j)
            kept_.push_back(l1[static_cast<std::size_t>(j)].second);
        std::sort(kept_.begin(), kept_.end());
    }

    const ArchGraph& pg_;
    const WeightStore& pw_;
    const ArchGraph& cg_;
    const Mutation& m_;
    Rng rng_;
    std::vector<Slice> target_slices_;
    std::vector<int> widen_src_;
    std::vector<double> widen_coef_;
    std::vector<int> kept_;
};

} // namespace detail

/// Child weights that reproduce the parent's function exactly (up to rounding)
/// for mutations 1-3: identity insertion, filter duplication with compensated
/// consumers, and zero-contribution skip branches.
inline WeightStore morphism_init(const ArchGraph& parent, const WeightStore& parent_w, const Mutation& m,
                                 const MutationLimits& lim = {})
{
    if (!is_morphism(m.kind))
        throw Error(Errc::NotAMorphism, std::string(mutation_name(m.kind)) + " cannot be framed as a network morphism");
    const ArchGraph child = apply_mutation(parent, m, lim);
    std::set<NodeId> affected;
    return detail::Transfer(parent, parent_w, child, m).run(affected);
}

struct ApproxConfig {
    int budget = 50; ///< fitting batches
    int batch_size = 32;
    double learning_rate = 1e-2; ///< Adam step size
};

struct ApproxResult {
    WeightStore weights;
    std::vector<NodeId> affected;   ///< layers that were re-initialized and fitted
    std::vector<NodeId> anchors;    ///< nodes whose outputs were matched to the parent
    double initial_deviation = 0.0; ///< mean squared deviation at the anchors before fitting
    double final_deviation = 0.0;
    int batches_used = 0;
    bool budget_exhausted = false;  ///< fitting stopped at the budget, not at zero deviation
};

/// Weights for mutations 4-6: unaffected layers are copied verbatim, affected
/// layers are fitted with Adam to the parent's outputs at the affected nodes
/// (inference-mode BN) over `cfg.budget` batches of `data`.
inline ApproxResult approx_morphism_init(const ArchGraph& parent, const WeightStore& parent_w, const Mutation& m,
                                         const Dataset& data, const ApproxConfig& cfg = {},
                                         const MutationLimits& lim = {})
{
    if (is_morphism(m.kind))
        throw Error(Errc::InvalidArgument, "exact morphisms are initialized by morphism_init");
    const ArchGraph child = apply_mutation(parent, m, lim);
    ApproxResult r;
    std::set<NodeId> affected;
    r.weights = detail::Transfer(parent, parent_w, child, m).run(affected);

    // Layers that can compensate for the edit.
    if (m.kind == MutationKind::Remove || m.kind == MutationKind::Prune)
        for (NodeId c : weighted_consumers(parent, m.target))
            if (child.contains(c))
                affected.insert(c);
    if (m.kind != MutationKind::Remove)
        affected.insert(m.target);
    for (NodeId id : affected)
        if (child.contains(id) && parent.contains(id) && child.shape(id) == parent.shape(id))
            r.anchors.push_back(id);
    r.affected.assign(affected.begin(), affected.end());
    if (r.anchors.empty() || data.size() == 0)
        return r;

    const std::size_t S = data.shape.size();
    const std::size_t B = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), data.size());
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(m.seed, 0x6170));
    shuffle(order, rng);
    std::size_t cursor = 0;
    auto next_batch = [&] {
        std::vector<double> x(B * S);
        for (std::size_t i = 0; i < B; ++i) {
            if (cursor == order.size())
                cursor = 0;
            auto s = data.sample(order[cursor++]);
            std::copy(s.begin(), s.end(), x.begin() + static_cast<std::ptrdiff_t>(i * S));
        }
        return x;
    };

    WeightStore m1 = r.weights.zeros_like(), m2 = r.weights.zeros_like();
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ForwardOptions popt;
    popt.capture = r.anchors;
    ForwardOptions copt;
    copt.record = true;
    for (int step = 0; step < cfg.budget; ++step) {
        const auto x = next_batch();
        const auto pt = run_forward(parent, parent_w, x, B, popt);
        const auto ct = run_forward(child, r.weights, x, B, copt);
        double dev = 0.0;
        std::map<NodeId, std::vector<double>> seed;
        for (NodeId a : r.anchors) {
            const auto& want = pt.out.at(a);
            const auto& got = ct.out.at(a);
            std::vector<double> d(got.size());
            double s = 0.0;
            for (std::size_t i = 0; i < got.size(); ++i) {
                const double e = got[i] - want[i];
                s += e * e;
                d[i] = 2.0 * e / static_cast<double>(got.size());
            }
            dev += s / static_cast<double>(got.size());
            seed[a] = std::move(d);
        }
        if (step == 0)
            r.initial_deviation = dev;
        r.final_deviation = dev;
        if (dev == 0.0)
            return r;
        WeightStore grad = r.weights.zeros_like();
        backward(child, r.weights, ct, std::move(seed), grad);
        const double t = static_cast<double>(step + 1);
        const double lr = cfg.learning_rate * std::sqrt(1.0 - std::pow(b2, t)) / (1.0 - std::pow(b1, t));
        for (NodeId id : r.affected) {
            auto it = r.weights.layers.find(id);
            if (it == r.weights.layers.end())
                continue;
            for (auto& [name, tw] : it->second) {
                if (is_running_stat(name))
                    continue;
                auto& g = grad.at(id, name).values;
                auto& a = m1.at(id, name).values;
                auto& v = m2.at(id, name).values;
                for (std::size_t i = 0; i < tw.size(); ++i) {
                    a[i] = b1 * a[i] + (1 - b1) * g[i];
                    v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
                    tw.values[i] -= lr * a[i] / (std::sqrt(v[i]) + eps);
                }
            }
        }
        r.batches_used = step + 1;
    }
    // Deviation after the last update.
    const auto x = next_batch();
    const auto pt = run_forward(parent, parent_w, x, B, popt);
    ForwardOptions eopt;
    eopt.capture = r.anchors;
    const auto ct = run_forward(child, r.weights, x, B, eopt);
    double dev = 0.0;
    for (NodeId a : r.anchors) {
        const auto& want = pt.out.at(a);
        const auto& got = ct.out.at(a);
        double s = 0.0;
        for (std::size_t i = 0; i < got.size(); ++i)
            s += (got[i] - want[i]) * (got[i] - want[i]);
        dev += s / static_cast<double>(got.size());
    }
    if (cfg.budget <= 0)
        r.initial_deviation = dev;
    r.final_deviation = dev;
    r.budget_exhausted = true;
    return r;
}

/// Child weights for any mutation: exact morphism for 1-3, fitted approximation for 4-6.
inline WeightStore inherit_weights(const ArchGraph& parent, const WeightStore& parent_w, const Mutation& m,
                                   const Dataset& data, const ApproxConfig& cfg = {}, const MutationLimits& lim = {})
{
    if (is_morphism(m.kind))
        return morphism_init(parent, parent_w, m, lim);
    return approx_morphism_init(parent, parent_w, m, data, cfg, lim).weights;
}

} // namespace hwnas

#endif // HWNAS_MORPHISM_HPP
