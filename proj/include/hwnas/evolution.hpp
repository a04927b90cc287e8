#ifndef HWNAS_EVOLUTION_HPP
#define HWNAS_EVOLUTION_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hwnas/morphism.hpp"
#include "hwnas/nnengine.hpp"
#include "hwnas/objectives.hpp"
#include "hwnas/parallel.hpp"
#include "hwnas/pareto.hpp"

namespace hwnas {

struct SearchConfig {
    int iterations = 300;
    int parents = 10;            ///< parents drawn per iteration (with replacement)
    int children_per_parent = 2;
    int subset = 8;              ///< children trained per iteration; 0 disables training
    int init_population = 15;
    TrainConfig seed_train{};    ///< training of the initial trivial networks
    TrainConfig finetune{};      ///< per-child fine-tuning
    std::array<double, 6> mutation_weights{1, 1, 1, 1, 1, 1};
    MutationLimits limits{};
    ApproxConfig approx{};
    std::uint64_t seed = 0;
    std::size_t threads = 0;

    SearchConfig()
    {
        seed_train.epochs = 10;
        seed_train.learning_rate = 0.05;
        finetune.epochs = 5;
        finetune.learning_rate = 0.01;
    }

    int children() const noexcept { return parents * children_per_parent; }

    void validate(const std::string& prefix = "search.") const
    {
        auto fail = [&](const std::string& field, const std::string& why) {
            throw Error(Errc::ConfigError, prefix + field + ": " + why);
        };
        if (iterations < 0)
            fail("iterations", "must be >= 0");
        if (parents < 1)
            fail("parents", "must be >= 1");
        if (children_per_parent < 1)
            fail("children_per_parent", "must be >= 1");
        if (subset < 0 || subset > children())
            fail("subset", "must be in [0, parents * children_per_parent]");
        if (init_population < 1)
            fail("init_population", "must be >= 1");
        for (double w : mutation_weights)
            if (!(w >= 0.0) || !std::isfinite(w))
                fail("mutation_weights", "entries must be finite and >= 0");
        if (std::all_of(mutation_weights.begin(), mutation_weights.end(), [](double w) { return w == 0.0; }))
            fail("mutation_weights", "at least one entry must be positive");
        if (limits.min_filters < 1 || limits.max_filters < limits.min_filters)
            fail("limits", "need 1 <= min_filters <= max_filters");
        if (approx.budget < 0 || approx.batch_size < 1 || !(approx.learning_rate > 0.0))
            fail("approx", "need budget >= 0, batch_size >= 1, learning_rate > 0");
        try {
            seed_train.validate();
        } catch (const Error& e) {
            fail("seed_train", e.what());
        }
        try {
            finetune.validate();
        } catch (const Error& e) {
            fail("finetune", e.what());
        }
    }
};

struct Candidate {
    std::uint64_t id = 0;
    ArchGraph graph;
    WeightStore weights;
    ObjectiveVector objectives;
    std::optional<std::uint64_t> parent;
    std::optional<Mutation> mutation;
    int born = 0; ///< iteration; 0 for the initial population

    FrontEntry front_entry() const { return {id, objectives.full()}; }
};

enum class CandidateStatus { Seed, Evaluated, Unevaluated, Duplicate, Diverged };

inline const char* status_name(CandidateStatus s)
{
    switch (s) {
    case CandidateStatus::Seed: return "seed";
    case CandidateStatus::Evaluated: return "evaluated";
    case CandidateStatus::Unevaluated: return "unevaluated";
    case CandidateStatus::Duplicate: return "duplicate";
    case CandidateStatus::Diverged: return "diverged";
    }
    return "unknown";
}

/// One line of the run log. Seeds carry their graph; children carry the
/// parent id and mutation, from which their graph replays exactly.
struct CandidateRecord {
    std::uint64_t id = 0;
    int iteration = 0;
    CandidateStatus status = CandidateStatus::Seed;
    std::optional<std::uint64_t> parent;
    std::optional<Mutation> mutation;
    std::optional<ArchGraph> graph;
    CheapObjectives cheap;
    std::optional<double> inherited_error; ///< validation error before fine-tuning
    std::optional<double> val_error;
    bool in_population = false; ///< member of the front right after its iteration
};

struct SearchState {
    int iteration = 0; ///< last completed iteration
    std::uint64_t next_id = 0;
    std::vector<Candidate> population;
    std::vector<double> hv_reference;
    std::vector<double> hv_trace; ///< entry i: hypervolume after iteration i
};

struct SearchObserver {
    /// Called once per candidate in id order; `trained` is set for seeds and
    /// evaluated children.
    std::function<void(const CandidateRecord&, const Candidate* trained)> on_record;
    std::function<void(const SearchState&)> on_iteration;
};

/// Coordinates for the density model: log(1 + x) of the cheap objectives.
inline std::vector<double> density_features(const CheapObjectives& c)
{
    auto a = c.as_array();
    return {std::log1p(a[0]), std::log1p(a[1]), std::log1p(a[2]), std::log1p(a[3])};
}

/// Space for the hypervolume trace: val_error and log10(1 + x) of the cheap objectives.
inline std::vector<double> hv_features(const ObjectiveVector& o)
{
    auto f = o.full();
    for (std::size_t i = 1; i < f.size(); ++i)
        f[i] = std::log10(1.0 + f[i]);
    return f;
}

inline double population_hypervolume(const std::vector<Candidate>& pop, const std::vector<double>& ref)
{
    std::vector<std::vector<double>> pts;
    for (const auto& c : pop)
        pts.push_back(hv_features(c.objectives));
    return hypervolume(pts, ref);
}

/// Trivial chain of `depth` convs with BN and ReLU; the first two convs pool
/// while the map stays at least 4x4.
inline ArchGraph seed_architecture(const Shape& in, int classes, int depth, Rng& rng)
{
    static constexpr int kernels[] = {3, 5, 7};
    static constexpr int widths[] = {16, 24, 32};
    GraphBuilder b(in.height, in.width, in.channels);
    NodeId cur = b.input();
    int h = in.height, w = in.width;
    for (int i = 0; i < depth; ++i) {
        const int k = kernels[uniform_index(rng, 3)];
        const int c = widths[uniform_index(rng, 3)];
        const bool pool = i < 2 && h % 2 == 0 && w % 2 == 0 && h >= 8 && w >= 8;
        cur = b.conv(cur, k, c, true, true, pool);
        if (pool) {
            h /= 2;
            w /= 2;
        }
    }
    return b.build(b.head(cur, classes));
}

namespace detail {

inline bool is_divergence(const Error& e)
{
    return e.code() == Errc::DivergenceDetected || e.code() == Errc::NonFiniteActivation;
}

inline std::optional<DensityModel> try_fit(const std::vector<Candidate>& pop)
{
    std::vector<std::vector<double>> f;
    for (const auto& c : pop)
        f.push_back(density_features(c.objectives.cheap));
    try {
        return fit_density(f);
    } catch (const Error& e) {
        if (e.code() != Errc::DegenerateDensity)
            throw;
        return std::nullopt;
    }
}

/// Index drawn with probability proportional to `w`.
inline std::size_t draw_weighted(const std::vector<double>& w, Rng& rng)
{
    double r = uniform01(rng);
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
        if (r < w[i])
            return i;
        r -= w[i];
    }
    return w.size() - 1;
}

inline std::vector<Candidate> front_of(std::vector<Candidate> pool)
{
    std::vector<FrontEntry> entries;
    for (const auto& c : pool)
        entries.push_back(c.front_entry());
    const auto front = pareto_front(entries);
    std::vector<Candidate> out;
    std::size_t j = 0;
    for (auto& c : pool)
        if (j < front.size() && front[j].id == c.id) {
            out.push_back(std::move(c));
            ++j;
        }
    return out;
}

} // namespace detail

/// Builds and trains the initial population, then reduces it to its Pareto front.
inline SearchState initial_population(const Dataset& train_set, const Dataset& val_set, const SearchConfig& cfg,
                                      const SearchObserver& obs = {})
{
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, 0, 0x73656564));
    const std::size_t n = static_cast<std::size_t>(cfg.init_population);
    std::vector<Candidate> seeds(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& c = seeds[i];
        c.id = i;
        c.graph = seed_architecture(train_set.shape, train_set.num_classes, 1 + static_cast<int>(i % 5), rng);
        c.objectives.cheap = cheap_objectives(c.graph);
    }
    std::vector<char> ok(n, 1);
    parallel_for(
        n,
        [&](std::size_t i) {
            auto& c = seeds[i];
            Rng init(derive_seed(cfg.seed, 0, 1000 + i));
            TrainConfig tc = cfg.seed_train;
            tc.seed = derive_seed(cfg.seed, 0, 2000 + i);
            try {
                auto r = train(c.graph, init_weights(c.graph, init), train_set, val_set, tc);
                c.weights = std::move(r.weights);
                c.objectives.val_error = r.val_error;
            } catch (const Error& e) {
                if (!detail::is_divergence(e))
                    throw;
                ok[i] = 0;
            }
        },
        cfg.threads);
    std::vector<Candidate> trained;
    for (std::size_t i = 0; i < n; ++i)
        if (ok[i])
            trained.push_back(seeds[i]);
    if (trained.empty())
        throw Error(Errc::DivergenceDetected, "every initial network diverged");
    SearchState st;
    st.next_id = n;
    st.population = detail::front_of(trained);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& c = seeds[i];
        CandidateRecord r;
        r.id = c.id;
        r.status = ok[i] ? CandidateStatus::Seed : CandidateStatus::Diverged;
        r.graph = c.graph;
        r.cheap = c.objectives.cheap;
        r.val_error = c.objectives.val_error;
        r.in_population = std::any_of(st.population.begin(), st.population.end(),
                                      [&](const Candidate& p) { return p.id == c.id; });
        if (obs.on_record)
            obs.on_record(r, ok[i] ? &c : nullptr);
    }
    // Reference point: worst error, and one decade beyond the worst seed in each cost.
    st.hv_reference.assign(5, 0.0);
    for (const auto& c : trained) {
        const auto f = hv_features(c.objectives);
        for (std::size_t d = 1; d < 5; ++d)
            st.hv_reference[d] = std::max(st.hv_reference[d], f[d] + 1.0);
    }
    st.hv_reference[0] = 1.0 + 1e-9;
    st.hv_trace.push_back(population_hypervolume(st.population, st.hv_reference));
    if (obs.on_iteration)
        obs.on_iteration(st);
    return st;
}

/// One evolutionary iteration on `st`.
inline void search_step(SearchState& st, const Dataset& train_set, const Dataset& val_set, const SearchConfig& cfg,
                        const SearchObserver& obs = {})
{
    const int iter = st.iteration + 1;
    auto& pop = st.population;
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(iter), 0x70617265));
    const auto model = detail::try_fit(pop);

    // (a, b) parents, anti-proportional to the population density
    std::vector<double> pw(pop.size(), 1.0 / static_cast<double>(pop.size()));
    if (model) {
        std::vector<std::vector<double>> f;
        for (const auto& c : pop)
            f.push_back(density_features(c.objectives.cheap));
        pw = anti_proportional_weights(*model, f);
    }
    std::vector<std::size_t> parent_of;
    for (int p = 0; p < cfg.parents; ++p) {
        const std::size_t k = detail::draw_weighted(pw, rng);
        for (int c = 0; c < cfg.children_per_parent; ++c)
            parent_of.push_back(k);
    }

    // (c, d) children and their cheap objectives
    const std::size_t nc = parent_of.size();
    std::vector<std::optional<MutationResult>> mutated(nc);
    parallel_for(
        nc,
        [&](std::size_t k) {
            Rng crng(derive_seed(cfg.seed, static_cast<std::uint64_t>(iter), k));
            try {
                mutated[k] = mutate(pop[parent_of[k]].graph, crng, cfg.limits, cfg.mutation_weights);
            } catch (const Error& e) {
                if (e.code() != Errc::NoFeasibleMutation)
                    throw;
            }
        },
        cfg.threads);
    struct Child {
        std::size_t slot = 0;
        CandidateRecord rec;
        Candidate cand;
    };
    std::vector<Child> children;
    std::vector<CheapObjectives> seen;
    for (const auto& c : pop)
        seen.push_back(c.objectives.cheap);
    for (std::size_t k = 0; k < nc; ++k) {
        if (!mutated[k])
            continue;
        Child ch;
        ch.slot = k;
        const auto& parent = pop[parent_of[k]];
        ch.cand.id = st.next_id++;
        ch.cand.graph = std::move(mutated[k]->child);
        ch.cand.parent = parent.id;
        ch.cand.mutation = mutated[k]->mutation;
        ch.cand.born = iter;
        ch.cand.objectives.cheap = cheap_objectives(ch.cand.graph);
        ch.rec.id = ch.cand.id;
        ch.rec.iteration = iter;
        ch.rec.parent = parent.id;
        ch.rec.mutation = ch.cand.mutation;
        ch.rec.cheap = ch.cand.objectives.cheap;
        const bool dup = std::find(seen.begin(), seen.end(), ch.rec.cheap) != seen.end();
        ch.rec.status = dup ? CandidateStatus::Duplicate : CandidateStatus::Unevaluated;
        if (!dup)
            seen.push_back(ch.rec.cheap);
        children.push_back(std::move(ch));
    }

    // (e) subset for expensive evaluation, again anti-proportional to density
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < children.size(); ++i)
        if (children[i].rec.status == CandidateStatus::Unevaluated)
            eligible.push_back(i);
    const std::size_t want = std::min(eligible.size(), static_cast<std::size_t>(cfg.subset));
    std::vector<std::size_t> chosen;
    if (want > 0) {
        if (model) {
            std::vector<std::vector<double>> f;
            for (std::size_t i : eligible)
                f.push_back(density_features(children[i].rec.cheap));
            for (std::size_t j : sample_anti_proportional(*model, f, want, rng))
                chosen.push_back(eligible[j]);
        } else {
            auto order = eligible;
            shuffle(order, rng);
            chosen.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(want));
        }
        std::sort(chosen.begin(), chosen.end());
    }

    // (f) inherit weights and fine-tune the subset
    parallel_for(
        chosen.size(),
        [&](std::size_t j) {
            auto& ch = children[chosen[j]];
            const auto& parent = pop[parent_of[ch.slot]];
            const auto& m = *ch.cand.mutation;
            try {
                ch.cand.weights = inherit_weights(parent.graph, parent.weights, m, train_set, cfg.approx, cfg.limits);
                ch.rec.inherited_error = error_rate(ch.cand.graph, ch.cand.weights, val_set);
                TrainConfig tc = cfg.finetune;
                tc.seed = derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(iter), ch.slot), 0x74756e65);
                auto r = train(ch.cand.graph, std::move(ch.cand.weights), train_set, val_set, tc);
                ch.cand.weights = std::move(r.weights);
                ch.cand.objectives.val_error = r.val_error;
                ch.rec.val_error = r.val_error;
                ch.rec.status = CandidateStatus::Evaluated;
            } catch (const Error& e) {
                if (!detail::is_divergence(e))
                    throw;
                ch.cand.weights = {};
                ch.rec.status = CandidateStatus::Diverged;
            }
        },
        cfg.threads);

    // (g) new population: front of the old one and the evaluated children
    std::vector<Candidate> pool = pop;
    for (const auto& ch : children)
        if (ch.rec.status == CandidateStatus::Evaluated)
            pool.push_back(ch.cand);
    pop = detail::front_of(std::move(pool));
    for (const auto& ch : children) {
        auto rec = ch.rec;
        rec.in_population = std::any_of(pop.begin(), pop.end(), [&](const Candidate& p) { return p.id == rec.id; });
        if (obs.on_record)
            obs.on_record(rec, rec.status == CandidateStatus::Evaluated ? &ch.cand : nullptr);
    }
    st.iteration = iter;
    st.hv_trace.push_back(population_hypervolume(pop, st.hv_reference));
    if (obs.on_iteration)
        obs.on_iteration(st);
}

/// Runs iterations st.iteration + 1 .. cfg.iterations.
inline void run_search(SearchState& st, const Dataset& train_set, const Dataset& val_set, const SearchConfig& cfg,
                       const SearchObserver& obs = {})
{
    cfg.validate();
    while (st.iteration < cfg.iterations)
        search_step(st, train_set, val_set, cfg, obs);
}

/// Search from a trained initial population.
inline SearchState search(std::vector<Candidate> init, const Dataset& train_set, const Dataset& val_set,
                          const SearchConfig& cfg, const SearchObserver& obs = {})
{
    cfg.validate();
    if (init.empty())
        throw Error(Errc::EmptyInput, "initial population is empty");
    SearchState st;
    for (const auto& c : init) {
        if (!c.objectives.val_error)
            throw Error(Errc::InvalidArgument, "initial candidate " + std::to_string(c.id) + " is untrained");
        st.next_id = std::max(st.next_id, c.id + 1);
    }
    st.population = detail::front_of(std::move(init));
    st.hv_reference.assign(5, 0.0);
    for (const auto& c : st.population) {
        const auto f = hv_features(c.objectives);
        for (std::size_t d = 1; d < 5; ++d)
            st.hv_reference[d] = std::max(st.hv_reference[d], f[d] + 1.0);
    }
    st.hv_reference[0] = 1.0 + 1e-9;
    st.hv_trace.push_back(population_hypervolume(st.population, st.hv_reference));
    run_search(st, train_set, val_set, cfg, obs);
    return st;
}

struct FinalSelection {
    std::vector<Candidate> models;
    bool truncated = false; ///< fewer candidates than requested
};

/// The top_k candidates by validation error; ties go to the lower worst
/// objective score over the population, then to the lower id.
inline FinalSelection select_final(const std::vector<Candidate>& population, std::size_t top_k)
{
    std::vector<FrontEntry> entries;
    for (const auto& c : population)
        entries.push_back(c.front_entry());
    std::vector<std::size_t> idx(population.size());
    std::vector<double> score(population.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
        score[i] = worst_objective_score(entries[i], entries);
    }
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const double ea = *population[a].objectives.val_error, eb = *population[b].objectives.val_error;
        if (ea != eb)
            return ea < eb;
        if (score[a] != score[b])
            return score[a] < score[b];
        return population[a].id < population[b].id;
    });
    FinalSelection out;
    out.truncated = top_k > population.size();
    for (std::size_t i = 0; i < std::min(top_k, idx.size()); ++i)
        out.models.push_back(population[idx[i]]);
    return out;
}

} // namespace hwnas

#endif
