#ifndef HWNAS_OBJECTIVES_HPP
#define HWNAS_OBJECTIVES_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "hwnas/archgraph.hpp"

namespace hwnas {

/// Topology-only objectives. All are minimized.
struct CheapObjectives {
    double asi = 0.0;
    std::uint64_t latency_ops = 0;
    std::uint64_t energy_transfers = 0;
    double adcr = 0.0;

    std::array<double, 4> as_array() const noexcept
    {
        return {asi, static_cast<double>(latency_ops), static_cast<double>(energy_transfers), adcr};
    }
    friend bool operator==(const CheapObjectives&, const CheapObjectives&) = default;
};

struct ObjectiveVector {
    std::optional<double> val_error; ///< expensive objective, present once trained
    CheapObjectives cheap;

    /// (val_error, asi, ops, transfers, adcr). Requires val_error.
    std::vector<double> full() const
    {
        if (!val_error)
            throw Error(Errc::InvalidArgument, "objective vector has no validation error yet");
        auto c = cheap.as_array();
        return {*val_error, c[0], c[1], c[2], c[3]};
    }
};

/// Layers that count as neuron layers in the objective sums. The input node
/// is outside the accelerator's fault and transfer model; concatenations are
/// pure address remapping.
inline bool counts_as_layer(const LayerNode& n) noexcept { return !n.is_input() && !n.is_concat(); }

/// Consumers of `id`, looking through concatenations.
inline std::vector<NodeId> effective_successors(const ArchGraph& g, NodeId id)
{
    std::vector<NodeId> out;
    std::vector<NodeId> stack(g.successors(id).rbegin(), g.successors(id).rend());
    while (!stack.empty()) {
        NodeId s = stack.back();
        stack.pop_back();
        if (g.node(s).is_concat()) {
            const auto& next = g.successors(s);
            stack.insert(stack.end(), next.rbegin(), next.rend());
        } else if (std::find(out.begin(), out.end(), s) == out.end()) {
            out.push_back(s);
        }
    }
    return out;
}

/// Pooling factor of the succeeding layer (largest among consumers).
inline int succeeding_pool_factor(const ArchGraph& g, NodeId id)
{
    int lambda = 1;
    for (NodeId s : effective_successors(g, id))
        lambda = std::max(lambda, g.node(s).pool_factor);
    return lambda;
}

/// 2 if the layer feeds an element-wise add, else 1.
inline int merge_factor(const ArchGraph& g, NodeId id)
{
    for (NodeId s : effective_successors(g, id))
        if (g.node(s).is_add())
            return 2;
    return 1;
}

namespace detail {
inline void require_layers(const ArchGraph& g)
{
    for (const auto& [id, n] : g.nodes())
        if (counts_as_layer(n))
            return;
    throw Error(Errc::EmptyGraph, "graph has no neuron layers");
}
} // namespace detail

/// Architecture sensitivity index: sum over layers of lambda * zeta / n_outputs.
inline double asi(const ArchGraph& g)
{
    detail::require_layers(g);
    double total = 0.0;
    for (NodeId id : g.order()) {
        const auto& n = g.node(id);
        if (!counts_as_layer(n))
            continue;
        const auto outputs = layer_costs(g, id).n_outputs;
        if (outputs == 0)
            throw Error(Errc::DivisionByZero, "layer " + std::to_string(id) + " has no outputs");
        total += static_cast<double>(succeeding_pool_factor(g, id) * merge_factor(g, id)) / static_cast<double>(outputs);
    }
    return total;
}

/// Operations per frame.
inline std::uint64_t latency(const ArchGraph& g)
{
    detail::require_layers(g);
    std::uint64_t total = 0;
    for (NodeId id : g.order())
        if (counts_as_layer(g.node(id)))
            total += layer_costs(g, id).n_op;
    return total;
}

/// Data words moved per frame: every input and parameter loaded once, every output written once.
inline std::uint64_t energy(const ArchGraph& g)
{
    detail::require_layers(g);
    std::uint64_t total = 0;
    for (NodeId id : g.order()) {
        if (!counts_as_layer(g.node(id)))
            continue;
        const auto c = layer_costs(g, id);
        total += c.n_inputs + c.n_outputs + c.n_params;
    }
    return total;
}

/// Accumulated data-computation ratio.
inline double adcr(const ArchGraph& g)
{
    detail::require_layers(g);
    double total = 0.0;
    for (NodeId id : g.order()) {
        if (!counts_as_layer(g.node(id)))
            continue;
        const auto c = layer_costs(g, id);
        if (c.n_op == 0)
            throw Error(Errc::DivisionByZero, "layer " + std::to_string(id) + " reports zero operations");
        total += static_cast<double>(c.n_inputs + c.n_outputs + c.n_params) / static_cast<double>(c.n_op);
    }
    return total;
}

inline CheapObjectives cheap_objectives(const ArchGraph& g)
{
    return {asi(g), latency(g), energy(g), adcr(g)};
}

/// Learned parameter count over the whole graph.
inline std::uint64_t parameter_count(const ArchGraph& g)
{
    std::uint64_t total = 0;
    for (NodeId id : g.order())
        total += layer_costs(g, id).n_params;
    return total;
}

} // namespace hwnas

#endif // HWNAS_OBJECTIVES_HPP
