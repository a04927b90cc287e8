#ifndef HWNAS_FAULTSIM_HPP
#define HWNAS_FAULTSIM_HPP

#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "hwnas/parallel.hpp"
#include "hwnas/quant.hpp"
#include "hwnas/random.hpp"

namespace hwnas {

inline constexpr double kReferenceBer = 0.003;
inline constexpr std::size_t kDefaultTrials = 50;

struct FaultConfig {
    double ber = kReferenceBer;
    std::size_t trials = kDefaultTrials;
    std::uint64_t seed = 0;
    std::vector<NodeId> targets; ///< empty: every conv and add output
    std::size_t threads = 0;     ///< 0: hardware concurrency

    void validate() const
    {
        if (!(ber >= 0.0 && ber <= 1.0))
            throw Error(Errc::InvalidArgument, "bit error rate must be in [0, 1]");
        if (trials < 1)
            throw Error(Errc::InvalidArgument, "at least one trial is required");
    }
};

/// Feature maps written to memory after activation and pooling.
inline std::vector<NodeId> default_fault_targets(const ArchGraph& g)
{
    std::vector<NodeId> t;
    for (NodeId id : g.order())
        if (g.node(id).is_conv() || g.node(id).is_add())
            t.push_back(id);
    return t;
}

/// Per-sample flip pattern: one B-bit XOR mask per value of each targeted map.
struct FaultMask {
    int bits = kDefaultBits;
    std::map<NodeId, std::vector<std::uint32_t>> flips;

    std::size_t flipped_bits() const
    {
        std::size_t c = 0;
        for (const auto& [id, v] : flips)
            for (auto m : v)
                c += static_cast<std::size_t>(std::popcount(m));
        return c;
    }
};

/// Flips bits of a B-bit two's-complement code and reinterprets the result.
inline std::int64_t flip_code(std::int64_t code, std::uint32_t mask, int bits)
{
    const std::uint64_t span = std::uint64_t{1} << bits;
    std::uint64_t u = (static_cast<std::uint64_t>(code) & (span - 1)) ^ (mask & (span - 1));
    return (u >> (bits - 1)) & 1 ? static_cast<std::int64_t>(u) - static_cast<std::int64_t>(span)
                                 : static_cast<std::int64_t>(u);
}

inline void require_quantized(const QuantizedModel& qm)
{
    if (qm.format.act_step.empty())
        throw Error(Errc::NotQuantized, "model has no fixed-point format");
}

/// Each bit of each targeted value flips independently with probability `ber`.
/// Bit i flips when its uniform draw is below `ber`, so masks drawn from the
/// same seed are nested across bit error rates.
inline FaultMask sample_fault_mask(const QuantizedModel& qm, double ber, Rng& rng,
                                   const std::vector<NodeId>& targets = {})
{
    require_quantized(qm);
    FaultMask m;
    m.bits = qm.format.bits;
    const auto t = targets.empty() ? default_fault_targets(qm.graph) : targets;
    for (NodeId id : t) {
        auto& v = m.flips[id];
        v.assign(qm.graph.shape(id).size(), 0);
        for (auto& word : v)
            for (int b = 0; b < m.bits; ++b)
                if (uniform01(rng) < ber)
                    word |= std::uint32_t{1} << b;
    }
    return m;
}

/// Quantized forward with the mask applied to every sample of the batch.
inline CodeHook fault_hook(const FaultMask& mask)
{
    return [&mask](NodeId id, std::span<std::int64_t> codes, std::size_t batch) {
        const auto it = mask.flips.find(id);
        if (it == mask.flips.end())
            return;
        const auto& f = it->second;
        const std::size_t per = f.size();
        if (codes.size() != per * batch)
            throw Error(Errc::ShapeMismatch, "fault mask does not match feature map " + std::to_string(id));
        for (std::size_t s = 0; s < batch; ++s)
            for (std::size_t i = 0; i < per; ++i)
                if (f[i])
                    codes[s * per + i] = flip_code(codes[s * per + i], f[i], mask.bits);
    };
}

inline std::vector<double> inject_forward(const QuantizedModel& qm, std::span<const double> x, std::size_t n,
                                          const FaultMask& mask)
{
    require_quantized(qm);
    if (mask.bits != qm.format.bits)
        throw Error(Errc::InvalidArgument, "fault mask bit width differs from the model's");
    return quantized_forward(qm, x, n, fault_hook(mask));
}

struct FaultTrialReport {
    std::string model;
    std::string method;
    double ber = 0.0;
    std::vector<double> ccr; ///< per trial
    double mean = 0.0;
    double std_error = 0.0;
};

namespace detail {

inline void summarize(FaultTrialReport& r)
{
    const double n = static_cast<double>(r.ccr.size());
    r.mean = std::accumulate(r.ccr.begin(), r.ccr.end(), 0.0) / n;
    double ss = 0.0;
    for (double c : r.ccr)
        ss += (c - r.mean) * (c - r.mean);
    r.std_error = r.ccr.size() > 1 ? std::sqrt(ss / (n - 1)) / std::sqrt(n) : 0.0;
}

inline std::uint64_t trial_seed(std::uint64_t seed, std::size_t trial) { return derive_seed(seed, trial, 0x666C6970); }

} // namespace detail

/// Fraction of test samples whose predicted class changes under faults, per trial.
inline FaultTrialReport measure_ccr(const QuantizedModel& qm, const Dataset& test_set, const FaultConfig& cfg,
                                    const std::string& model_id = "")
{
    cfg.validate();
    require_quantized(qm);
    if (test_set.size() == 0)
        throw Error(Errc::EmptyTestSet, "fault injection needs a nonempty test set");
    FaultTrialReport r;
    r.model = model_id;
    r.method = quant_method_name(qm.method);
    r.ber = cfg.ber;
    r.ccr.assign(cfg.trials, 0.0);
    if (cfg.ber > 0.0) {
        const auto clean = quantized_predict(qm, test_set);
        parallel_for(
            cfg.trials,
            [&](std::size_t t) {
                Rng rng(detail::trial_seed(cfg.seed, t));
                const auto mask = sample_fault_mask(qm, cfg.ber, rng, cfg.targets);
                if (mask.flipped_bits() == 0)
                    return;
                const auto faulty = quantized_predict(qm, test_set, fault_hook(mask));
                std::size_t changed = 0;
                for (std::size_t i = 0; i < clean.size(); ++i)
                    changed += faulty[i] != clean[i];
                r.ccr[t] = static_cast<double>(changed) / static_cast<double>(clean.size());
            },
            cfg.threads);
    }
    detail::summarize(r);
    return r;
}

/// One report per bit error rate; trial t uses the same seed at every rate.
inline std::vector<FaultTrialReport> ber_sweep(const QuantizedModel& qm, const Dataset& test_set,
                                               const std::vector<double>& bers, const FaultConfig& cfg,
                                               const std::string& model_id = "")
{
    if (bers.empty())
        throw Error(Errc::InvalidArgument, "no bit error rates given");
    if (!std::is_sorted(bers.begin(), bers.end()))
        throw Error(Errc::InvalidArgument, "bit error rates must be sorted ascending");
    std::vector<FaultTrialReport> out;
    for (double b : bers) {
        FaultConfig c = cfg;
        c.ber = b;
        out.push_back(measure_ccr(qm, test_set, c, model_id));
    }
    return out;
}

struct Regression {
    double slope = 0.0;
    double intercept = 0.0;
    double r = 0.0; ///< Pearson correlation
};

/// Ordinary least squares of CCR on ASI. R is 0 when all CCR values are equal.
inline Regression asi_ccr_regression(const std::vector<std::pair<double, double>>& points)
{
    if (points.size() < 3)
        throw Error(Errc::DegenerateInput, "regression needs at least 3 models");
    const double n = static_cast<double>(points.size());
    double mx = 0.0, my = 0.0;
    for (const auto& [x, y] : points) {
        mx += x;
        my += y;
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (const auto& [x, y] : points) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if (!(sxx > 0.0))
        throw Error(Errc::DegenerateInput, "all ASI values are equal");
    Regression g;
    g.slope = sxy / sxx;
    g.intercept = my - g.slope * mx;
    g.r = syy > 0.0 ? sxy / std::sqrt(sxx * syy) : 0.0;
    return g;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y)
{
    if (x.size() != y.size() || x.size() < 2)
        throw Error(Errc::DegenerateInput, "rank correlation needs two equally long series");
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < idx.size();) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]])
                ++j;
            for (std::size_t k = i; k <= j; ++k)
                r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
            i = j + 1;
        }
        return r;
    };
    const auto rx = ranks(x), ry = ranks(y);
    std::vector<std::pair<double, double>> p;
    for (std::size_t i = 0; i < rx.size(); ++i)
        p.emplace_back(rx[i], ry[i]);
    double mx = 0, my = 0;
    for (auto [a, b] : p) {
        mx += a;
        my += b;
    }
    mx /= static_cast<double>(p.size());
    my /= static_cast<double>(p.size());
    double sxx = 0, syy = 0, sxy = 0;
    for (auto [a, b] : p) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    return sxx > 0 && syy > 0 ? sxy / std::sqrt(sxx * syy) : 0.0;
}

/// Delimited export: one row per trial plus `mean` and `stderr` rows per report.
inline void write_fault_csv(std::ostream& os, const std::vector<FaultTrialReport>& reports)
{
    os << "model,method,ber,trial,ccr\n";
    os.precision(10);
    for (const auto& r : reports) {
        for (std::size_t t = 0; t < r.ccr.size(); ++t)
            os << r.model << ',' << r.method << ',' << r.ber << ',' << t << ',' << r.ccr[t] << '\n';
        os << r.model << ',' << r.method << ',' << r.ber << ",mean," << r.mean << '\n';
        os << r.model << ',' << r.method << ',' << r.ber << ",stderr," << r.std_error << '\n';
    }
}

} // namespace hwnas

#endif
