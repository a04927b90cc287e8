#ifndef HWNAS_MUTATION_HPP
#define HWNAS_MUTATION_HPP

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hwnas/archgraph.hpp"
#include "hwnas/error.hpp"
#include "hwnas/random.hpp"

namespace hwnas {

enum class MutationKind : int {
    InsertConv = 1, ///< conv+BN+ReLU on an existing edge, identity initialized
    Widen = 2,      ///< multiply the filters of a conv by 2 or 4
    AddSkip = 3,    ///< new Add or Concat merge between two compatible points
    Remove = 4,     ///< drop a conv layer or a merge node
    Prune = 5,      ///< drop 1/2 or 1/4 of the filters of a conv
    Separable = 6,  ///< replace a conv by its depthwise-separable counterpart
};

inline constexpr std::array<MutationKind, 6> kAllMutations = {MutationKind::InsertConv, MutationKind::Widen,
                                                              MutationKind::AddSkip,    MutationKind::Remove,
                                                              MutationKind::Prune,      MutationKind::Separable};

inline const char* mutation_name(MutationKind k)
{
    switch (k) {
    case MutationKind::InsertConv: return "insert";
    case MutationKind::Widen: return "widen";
    case MutationKind::AddSkip: return "skip";
    case MutationKind::Remove: return "remove";
    case MutationKind::Prune: return "prune";
    case MutationKind::Separable: return "separable";
    }
    return "?";
}

/// Mutations 1-3 admit an exact function-preserving weight initialization.
inline bool is_morphism(MutationKind k) noexcept { return static_cast<int>(k) <= 3; }

/// Complete description of a graph edit; apply_mutation() replays it exactly.
struct Mutation {
    MutationKind kind = MutationKind::InsertConv;
    NodeId target = 0;   ///< insert: edge source; skip: merge point v; others: the edited node
    NodeId consumer = 0; ///< insert / skip: the edge target whose input is rewired
    NodeId source = 0;   ///< skip: origin u of the new branch
    bool add_merge = false; ///< skip: Add (true) or Concat (false)
    int kernel = 0;      ///< insert / Add-skip branch conv kernel size
    int new_channels = 0; ///< widen / prune: resulting filter count
    std::uint64_t seed = 0; ///< randomness used by the weight initialization
    std::vector<NodeId> new_ids;

    std::string describe() const
    {
        std::string s = mutation_name(kind);
        auto num = [](auto v) { return std::to_string(v); };
        switch (kind) {
        case MutationKind::InsertConv:
            return s + "(" + num(target) + "->" + num(consumer) + ",k" + num(kernel) + ")";
        case MutationKind::Widen:
        case MutationKind::Prune:
            return s + "(" + num(target) + ",c" + num(new_channels) + ")";
        case MutationKind::AddSkip:
            return s + (add_merge ? "-add(" : "-concat(") + num(source) + "->" + num(target) + "->" + num(consumer) +
                   ")";
        default:
            return s + "(" + num(target) + ")";
        }
    }

    friend bool operator==(const Mutation&, const Mutation&) = default;
};

struct MutationLimits {
    int min_filters = 15;
    int max_filters = 1100;
    int max_attempts = 100;
    std::vector<int> kernels{3, 5, 7, 9};
};

/// One input channel of a weighted layer, traced through Concat nodes to the
/// node that produced it.
struct Slice {
    NodeId src = 0;
    int channel = 0;
    friend auto operator<=>(const Slice&, const Slice&) = default;
};

/// Channels a node writes, Concat nodes expanded recursively to their sources.
inline std::vector<Slice> output_slices(const ArchGraph& g, NodeId id)
{
    std::vector<Slice> out;
    auto expand = [&](auto&& self, NodeId n) -> void {
        const auto& node = g.node(n);
        if (node.is_concat()) {
            self(self, node.preds[0]);
            self(self, node.preds[1]);
            return;
        }
        for (int c = 0; c < g.shape(n).channels; ++c)
            out.push_back({n, c});
    };
    expand(expand, id);
    return out;
}

/// Input channels of a node in order, Concat inputs expanded recursively.
inline std::vector<Slice> input_slices(const ArchGraph& g, NodeId id)
{
    const auto& node = g.node(id);
    if (node.preds.empty())
        return {};
    return output_slices(g, node.preds[0]);
}

/// True if the node's output is provably nonnegative (ReLU-terminated).
inline bool nonnegative_output(const ArchGraph& g, NodeId id)
{
    const auto& n = g.node(id);
    if (n.is_conv() || n.is_add())
        return n.activation == Activation::ReLU;
    if (n.is_concat())
        return nonnegative_output(g, n.preds[0]) && nonnegative_output(g, n.preds[1]);
    return false;
}

/// Weighted nodes fed by `id`, looking through merge nodes.
inline std::vector<NodeId> weighted_consumers(const ArchGraph& g, NodeId id)
{
    std::set<NodeId> out, seen;
    std::vector<NodeId> stack(g.successors(id).begin(), g.successors(id).end());
    while (!stack.empty()) {
        NodeId s = stack.back();
        stack.pop_back();
        if (!seen.insert(s).second)
            continue;
        if (g.node(s).is_weighted()) {
            out.insert(s);
        } else {
            for (NodeId t : g.successors(s))
                stack.push_back(t);
        }
    }
    return {out.begin(), out.end()};
}

namespace detail {

inline void replace_pred(LayerNode& n, NodeId from, NodeId to)
{
    for (auto& p : n.preds)
        if (p == from)
            p = to;
}

inline LayerNode& find_node(std::vector<LayerNode>& nodes, NodeId id)
{
    for (auto& n : nodes)
        if (n.id == id)
            return n;
    throw Error(Errc::UnknownNode, "node " + std::to_string(id));
}

[[noreturn]] inline void infeasible(const std::string& why) { throw Error(Errc::NoFeasibleMutation, why); }

/// Drops nodes that no longer reach the output.
inline void drop_dead(std::vector<LayerNode>& nodes, NodeId output)
{
    std::set<NodeId> live{output};
    bool changed = true;
    while (changed) {
        changed = false;
        for (const auto& n : nodes)
            if (live.count(n.id))
                for (NodeId p : n.preds)
                    changed |= live.insert(p).second;
    }
    std::erase_if(nodes, [&](const LayerNode& n) { return !live.count(n.id); });
}

} // namespace detail

/// Replays a mutation on `g`. Throws NoFeasibleMutation when the edit violates
/// the search constraints or produces an invalid graph.
inline ArchGraph apply_mutation(const ArchGraph& g, const Mutation& m, const MutationLimits& lim = {})
{
    auto nodes = g.node_list();
    NodeId output = g.output_id();
    auto conv_target = [&]() -> LayerNode& {
        if (!g.contains(m.target) || !g.node(m.target).is_conv())
            detail::infeasible("target is not a conv layer");
        return detail::find_node(nodes, m.target);
    };

    switch (m.kind) {
    case MutationKind::InsertConv: {
        if (!g.contains(m.target) || !g.contains(m.consumer))
            detail::infeasible("unknown edge");
        const auto& succ = g.successors(m.target);
        if (std::find(succ.begin(), succ.end(), m.consumer) == succ.end())
            detail::infeasible("no such edge");
        if (!nonnegative_output(g, m.target))
            detail::infeasible("identity insertion needs a nonnegative input");
        if (std::find(lim.kernels.begin(), lim.kernels.end(), m.kernel) == lim.kernels.end())
            detail::infeasible("kernel size not allowed");
        if (m.new_ids.size() != 1)
            detail::infeasible("insert needs one new id");
        const int c = g.shape(m.target).channels;
        if (c < lim.min_filters || c > lim.max_filters)
            detail::infeasible("inserted layer width out of range");
        LayerNode n;
        n.id = m.new_ids[0];
        n.kind = ConvLayer{m.kernel, m.kernel, c, false};
        n.batchnorm = true;
        n.activation = Activation::ReLU;
        n.preds = {m.target};
        detail::replace_pred(detail::find_node(nodes, m.consumer), m.target, n.id);
        nodes.push_back(std::move(n));
        break;
    }
    case MutationKind::Widen:
    case MutationKind::Prune: {
        auto& t = conv_target();
        const int old = t.conv().out_channels;
        if (m.new_channels < lim.min_filters || m.new_channels > lim.max_filters)
            detail::infeasible("filter count out of range");
        if (m.kind == MutationKind::Widen ? m.new_channels <= old : m.new_channels >= old)
            detail::infeasible("filter count does not move in the mutation's direction");
        t.conv().out_channels = m.new_channels;
        break;
    }
    case MutationKind::Separable: {
        auto& t = conv_target();
        if (t.conv().separable || t.conv().kernel_h < 3)
            detail::infeasible("already separable or pointwise");
        t.conv().separable = true;
        break;
    }
    case MutationKind::AddSkip: {
        if (!g.contains(m.source) || !g.contains(m.target) || !g.contains(m.consumer))
            detail::infeasible("unknown skip endpoints");
        const auto& succ = g.successors(m.target);
        if (std::find(succ.begin(), succ.end(), m.consumer) == succ.end())
            detail::infeasible("no such edge");
        if (m.source == m.target || !g.reaches(m.source, m.target))
            detail::infeasible("skip source must be a strict ancestor");
        const Shape su = g.shape(m.source), sv = g.shape(m.target);
        if (su.height != sv.height || su.width != sv.width)
            detail::infeasible("skip endpoints differ in spatial size");
        if (m.add_merge) {
            if (!nonnegative_output(g, m.target))
                detail::infeasible("Add skip needs a nonnegative merge point");
            if (m.new_ids.size() != 2)
                detail::infeasible("Add skip needs two new ids");
            if (sv.channels < lim.min_filters || sv.channels > lim.max_filters)
                detail::infeasible("skip branch width out of range");
            LayerNode q;
            q.id = m.new_ids[0];
            q.kind = ConvLayer{m.kernel, m.kernel, sv.channels, false};
            q.preds = {m.source};
            LayerNode a;
            a.id = m.new_ids[1];
            a.kind = AddMerge{};
            a.activation = Activation::ReLU;
            a.preds = {m.target, q.id};
            detail::replace_pred(detail::find_node(nodes, m.consumer), m.target, a.id);
            nodes.push_back(std::move(q));
            nodes.push_back(std::move(a));
        } else {
            if (m.new_ids.size() != 1)
                detail::infeasible("Concat skip needs one new id");
            LayerNode c;
            c.id = m.new_ids[0];
            c.kind = ConcatMerge{};
            c.preds = {m.target, m.source};
            detail::replace_pred(detail::find_node(nodes, m.consumer), m.target, c.id);
            nodes.push_back(std::move(c));
        }
        break;
    }
    case MutationKind::Remove: {
        if (!g.contains(m.target))
            detail::infeasible("unknown node");
        const auto& r = g.node(m.target);
        if (!(r.is_conv() || r.is_merge()) || m.target == output)
            detail::infeasible("only inner conv layers and merges can be removed");
        const NodeId keep = r.preds[0];
        for (auto& n : nodes)
            detail::replace_pred(n, m.target, keep);
        std::erase_if(nodes, [&](const LayerNode& n) { return n.id == m.target; });
        detail::drop_dead(nodes, output);
        break;
    }
    }

    ArchGraph child;
    try {
        child = ArchGraph(std::move(nodes), g.input_id(), output);
    } catch (const Error& e) {
        detail::infeasible(std::string("invalid child: ") + e.what());
    }
    if (std::none_of(child.nodes().begin(), child.nodes().end(), [](const auto& kv) { return kv.second.is_conv(); }))
        detail::infeasible("child has no conv layer left");
    // Weight transfer identifies input channels by their producing node, so
    // no layer may read the same channel twice.
    for (const auto& [id, n] : child.nodes()) {
        if (!n.is_weighted())
            continue;
        auto sl = input_slices(child, id);
        std::sort(sl.begin(), sl.end());
        if (std::adjacent_find(sl.begin(), sl.end()) != sl.end())
            detail::infeasible("a layer would read the same channel twice");
    }
    return child;
}

namespace detail {

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng)
{
    return v[static_cast<std::size_t>(uniform_index(rng, v.size()))];
}

/// Draws the internal choices of one mutation class; nullopt if the class has
/// no candidate site at all.
inline std::optional<Mutation> draw(const ArchGraph& g, MutationKind kind, Rng& rng, const MutationLimits& lim)
{
    Mutation m;
    m.kind = kind;
    std::vector<NodeId> convs, merges;
    std::vector<std::pair<NodeId, NodeId>> edges;
    for (NodeId id : g.order()) {
        const auto& n = g.node(id);
        if (n.is_conv())
            convs.push_back(id);
        if (n.is_merge())
            merges.push_back(id);
        for (NodeId s : g.successors(id))
            edges.emplace_back(id, s);
    }
    const NodeId next = g.next_free_id();
    switch (kind) {
    case MutationKind::InsertConv: {
        std::vector<std::pair<NodeId, NodeId>> ok;
        for (auto e : edges)
            if (nonnegative_output(g, e.first))
                ok.push_back(e);
        if (ok.empty())
            return std::nullopt;
        std::tie(m.target, m.consumer) = pick(ok, rng);
        m.kernel = pick(lim.kernels, rng);
        m.new_ids = {next};
        break;
    }
    case MutationKind::Widen:
    case MutationKind::Prune: {
        if (convs.empty())
            return std::nullopt;
        m.target = pick(convs, rng);
        const int c = g.node(m.target).conv().out_channels;
        const int f = uniform_index(rng, 2) == 0 ? 2 : 4;
        m.new_channels = kind == MutationKind::Widen ? c * f : c - c / f;
        break;
    }
    case MutationKind::Separable: {
        if (convs.empty())
            return std::nullopt;
        m.target = pick(convs, rng);
        break;
    }
    case MutationKind::AddSkip: {
        std::vector<std::pair<NodeId, NodeId>> ok;
        for (auto e : edges)
            if (!g.node(e.first).is_input())
                ok.push_back(e);
        if (ok.empty())
            return std::nullopt;
        std::tie(m.target, m.consumer) = pick(ok, rng);
        std::vector<NodeId> sources;
        for (NodeId id : g.order())
            if (id != m.target && g.reaches(id, m.target))
                sources.push_back(id);
        if (sources.empty())
            return std::nullopt;
        m.source = pick(sources, rng);
        m.add_merge = uniform_index(rng, 2) == 0;
        if (m.add_merge) {
            m.kernel = pick(lim.kernels, rng);
            m.new_ids = {next, next + 1};
        } else {
            m.new_ids = {next};
        }
        break;
    }
    case MutationKind::Remove: {
        std::vector<NodeId> cand;
        for (NodeId id : convs)
            if (id != g.output_id())
                cand.push_back(id);
        cand.insert(cand.end(), merges.begin(), merges.end());
        if (cand.empty())
            return std::nullopt;
        m.target = pick(cand, rng);
        break;
    }
    }
    m.seed = rng();
    return m;
}

} // namespace detail

struct MutationResult {
    Mutation mutation;
    ArchGraph child;
};

/// Uniform over the six classes, then uniform over class-internal choices;
/// infeasible draws are resampled up to `lim.max_attempts` times.
inline MutationResult mutate(const ArchGraph& g, Rng& rng, const MutationLimits& lim = {},
                             const std::vector<MutationKind>& allowed = {kAllMutations.begin(), kAllMutations.end()})
{
    if (allowed.empty())
        throw Error(Errc::InvalidArgument, "no mutation classes allowed");
    for (int attempt = 0; attempt < lim.max_attempts; ++attempt) {
        const MutationKind kind = detail::pick(allowed, rng);
        auto m = detail::draw(g, kind, rng, lim);
        if (!m)
            continue;
        try {
            auto child = apply_mutation(g, *m, lim);
            return {std::move(*m), std::move(child)};
        } catch (const Error& e) {
            if (e.code() != Errc::NoFeasibleMutation)
                throw;
        }
    }
    throw Error(Errc::NoFeasibleMutation,
                "no feasible mutation after " + std::to_string(lim.max_attempts) + " attempts");
}

/// Mutation class drawn with probability proportional to `weights` (indexed by
/// kind - 1), then uniform over class-internal choices; infeasible draws are resampled.
inline MutationResult mutate(const ArchGraph& g, Rng& rng, const MutationLimits& lim,
                             const std::array<double, 6>& weights)
{
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0))
            throw Error(Errc::InvalidArgument, "mutation weights must be nonnegative");
        total += w;
    }
    if (!(total > 0.0))
        throw Error(Errc::InvalidArgument, "all mutation weights are zero");
    for (int attempt = 0; attempt < lim.max_attempts; ++attempt) {
        double r = uniform01(rng) * total;
        std::size_t k = 0;
        while (k + 1 < weights.size() && (weights[k] == 0.0 || r >= weights[k])) {
            r -= weights[k];
            ++k;
        }
        while (weights[k] == 0.0)
            --k;
        auto m = detail::draw(g, kAllMutations[k], rng, lim);
        if (!m)
            continue;
        try {
            auto child = apply_mutation(g, *m, lim);
            return {std::move(*m), std::move(child)};
        } catch (const Error& e) {
            if (e.code() != Errc::NoFeasibleMutation)
                throw;
        }
    }
    throw Error(Errc::NoFeasibleMutation,
                "no feasible mutation after " + std::to_string(lim.max_attempts) + " attempts");
}

} // namespace hwnas

#endif // HWNAS_MUTATION_HPP
