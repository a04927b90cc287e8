// Shared fixtures for the unit and acceptance suites: random graph generation
// and an independent per-layer recount of the hardware objectives.
#ifndef HWNAS_TESTS_SUPPORT_HPP
#define HWNAS_TESTS_SUPPORT_HPP

#include <cstdint>
#include <map>
#include <vector>

#include "hwnas/archgraph.hpp"
#include "hwnas/random.hpp"
#include "hwnas/tensor.hpp"

namespace hwnas::fixtures {

/// Random valid graph with chains, pooling, diamonds and long skips.
inline ArchGraph random_graph(Rng& rng, bool with_head = true, int max_stages = 6)
{
    const int kernels[] = {1, 3, 5, 7, 9};
    GraphBuilder b(16, 16, uniform_index(rng, 2) == 0 ? 1 : 3);
    NodeId cur = b.input();
    int h = 16;
    int ch = 0;
    std::map<NodeId, std::pair<int, int>> shapes; // id -> (channels, height)
    std::vector<NodeId> history;
    const int stages = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(max_stages)));
    for (int s = 0; s < stages; ++s) {
        const int k = kernels[uniform_index(rng, 5)];
        const int c = 4 + static_cast<int>(uniform_index(rng, 29));
        const bool pool = h >= 4 && uniform_index(rng, 3) == 0;
        const bool sep = uniform_index(rng, 4) == 0;
        const auto choice = uniform_index(rng, 10);
        if (choice < 2) {
            // diamond: two parallel convs merged
            NodeId a = b.conv(cur, k, c, uniform_index(rng, 2) == 0);
            if (uniform_index(rng, 2) == 0) {
                NodeId d = b.conv(cur, kernels[uniform_index(rng, 5)], c);
                cur = b.add(a, d, uniform_index(rng, 2) == 0);
                ch = c;
            } else {
                const int c2 = 4 + static_cast<int>(uniform_index(rng, 29));
                NodeId d = b.conv(cur, kernels[uniform_index(rng, 5)], c2, true, true, false, sep);
                cur = b.concat(a, d);
                ch = c + c2;
            }
        } else {
            cur = b.conv(cur, k, c, uniform_index(rng, 2) == 0, true, pool, sep);
            ch = c;
            if (pool)
                h /= 2;
        }
        shapes[cur] = {ch, h};
        // long skip back to an earlier node of matching geometry
        if (uniform_index(rng, 4) == 0) {
            for (auto it = history.rbegin(); it != history.rend(); ++it) {
                auto [pc, ph] = shapes[*it];
                if (ph != h)
                    continue;
                if (pc == ch && uniform_index(rng, 2) == 0) {
                    cur = b.add(cur, *it);
                } else {
                    cur = b.concat(cur, *it);
                    ch += pc;
                }
                shapes[cur] = {ch, h};
                break;
            }
        }
        history.push_back(cur);
    }
    if (with_head)
        return b.build(b.head(cur, 4));
    return b.build(cur);
}

/// He-initialized weights with nontrivial biases, BN affine parameters and
/// running statistics, so that no tensor sits at a convenient special value.
inline WeightStore random_weights(const ArchGraph& g, Rng& rng)
{
    auto w = init_weights(g, rng);
    for (auto& [id, params] : w.layers)
        for (auto& [name, t] : params)
            for (double& v : t.values) {
                if (name == pname::bias || name == pname::dense_b || name == pname::bn_beta ||
                    name == pname::bn_mean)
                    v = 0.2 * normal(rng);
                else if (name == pname::bn_gamma || name == pname::bn_var)
                    v = uniform(rng, 0.5, 1.5);
            }
    return w;
}

struct RecountedCosts {
    std::uint64_t ops = 0;
    std::uint64_t transfers = 0;
    double asi = 0.0;
    double adcr = 0.0;
};

/// Brute-force recount that re-derives shapes and per-layer counts from the
/// raw node list without calling layer_costs or the objective functions.
inline RecountedCosts recount(const ArchGraph& g)
{
    struct Geo {
        std::uint64_t c, h, w;
    };
    std::map<NodeId, Geo> pre;   // before pooling
    std::map<NodeId, Geo> post;  // after pooling
    std::map<NodeId, std::vector<NodeId>> consumers;
    for (const auto& [id, n] : g.nodes())
        for (NodeId p : n.preds)
            consumers[p].push_back(id);

    // repeated relaxation instead of a topological sort
    bool progress = true;
    while (progress) {
        progress = false;
        for (const auto& [id, n] : g.nodes()) {
            if (post.count(id))
                continue;
            bool ready = true;
            for (NodeId p : n.preds)
                ready = ready && post.count(p);
            if (!ready)
                continue;
            Geo gpre{};
            if (auto* in = std::get_if<InputLayer>(&n.kind)) {
                gpre = {std::uint64_t(in->channels), std::uint64_t(in->height), std::uint64_t(in->width)};
            } else if (auto* cv = std::get_if<ConvLayer>(&n.kind)) {
                gpre = {std::uint64_t(cv->out_channels), post[n.preds[0]].h, post[n.preds[0]].w};
            } else if (auto* hd = std::get_if<DenseHead>(&n.kind)) {
                gpre = {std::uint64_t(hd->num_classes), 1, 1};
            } else if (std::holds_alternative<AddMerge>(n.kind)) {
                gpre = post[n.preds[0]];
            } else {
                gpre = post[n.preds[0]];
                gpre.c += post[n.preds[1]].c;
            }
            pre[id] = gpre;
            post[id] = n.pool_factor == 4 ? Geo{gpre.c, gpre.h / 2, gpre.w / 2} : gpre;
            progress = true;
        }
    }

    RecountedCosts r;
    for (const auto& [id, n] : g.nodes()) {
        if (std::holds_alternative<InputLayer>(n.kind) || std::holds_alternative<ConcatMerge>(n.kind))
            continue;
        std::uint64_t in = 0, out = post[id].c * post[id].h * post[id].w, params = 0, ops = 0;
        for (NodeId p : n.preds)
            in += post[p].c * post[p].h * post[p].w;
        std::uint64_t cin = 0;
        for (NodeId p : n.preds)
            cin += post[p].c;
        const Geo& src = post[n.preds[0]];
        if (auto* cv = std::get_if<ConvLayer>(&n.kind)) {
            std::uint64_t kk = std::uint64_t(cv->kernel_h) * std::uint64_t(cv->kernel_w);
            std::uint64_t co = std::uint64_t(cv->out_channels);
            if (cv->separable) {
                params = kk * cin + cin * co + co;
                ops = 2 * kk * cin * src.h * src.w + 2 * cin * co * src.h * src.w;
            } else {
                params = kk * cin * co + co;
                ops = 2 * kk * cin * co * src.h * src.w;
            }
            if (n.batchnorm)
                params += 2 * co;
        } else if (auto* hd = std::get_if<DenseHead>(&n.kind)) {
            params = cin * std::uint64_t(hd->num_classes) + std::uint64_t(hd->num_classes);
            ops = cin * src.h * src.w + 2 * cin * std::uint64_t(hd->num_classes);
        } else {
            ops = out;
        }
        r.ops += ops;
        r.transfers += in + out + params;
        r.adcr += double(in + out + params) / double(ops);

        // sensitivity: walk consumers through concatenations
        int lambda = 1, zeta = 1;
        std::vector<NodeId> frontier = consumers[id];
        while (!frontier.empty()) {
            NodeId s = frontier.back();
            frontier.pop_back();
            const auto& sn = g.nodes().at(s);
            if (std::holds_alternative<ConcatMerge>(sn.kind)) {
                for (NodeId t : consumers[s])
                    frontier.push_back(t);
                continue;
            }
            if (sn.pool_factor > lambda)
                lambda = sn.pool_factor;
            if (std::holds_alternative<AddMerge>(sn.kind))
                zeta = 2;
        }
        r.asi += double(lambda * zeta) / double(out);
    }
    return r;
}

} // namespace hwnas::fixtures

#endif // HWNAS_TESTS_SUPPORT_HPP
