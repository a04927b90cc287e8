#ifndef HWNAS_PARETO_HPP
#define HWNAS_PARETO_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include "hwnas/error.hpp"
#include "hwnas/random.hpp"

namespace hwnas {

/// One point of a minimization problem.
struct FrontEntry {
    std::uint64_t id = 0;
    std::vector<double> objectives;
};

/// a dominates b: no worse anywhere, strictly better somewhere.
inline bool dominates(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size())
        throw Error(Errc::DimensionMismatch,
                    "comparing " + std::to_string(a.size()) + "-d and " + std::to_string(b.size()) + "-d vectors");
    bool strict = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] > b[i])
            return false;
        if (a[i] < b[i])
            strict = true;
    }
    return strict;
}

/// Non-dominated subset in input order. Of several identical vectors only the
/// first one survives.
inline std::vector<FrontEntry> pareto_front(std::span<const FrontEntry> entries)
{
    if (entries.empty())
        throw Error(Errc::EmptyInput, "pareto_front of an empty set");
    const std::size_t dim = entries.front().objectives.size();
    std::vector<FrontEntry> out;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& a = entries[i].objectives;
        if (a.size() != dim)
            throw Error(Errc::DimensionMismatch, "entry " + std::to_string(entries[i].id) + " has wrong dimension");
        for (double v : a)
            if (!std::isfinite(v))
                throw Error(Errc::InvalidArgument, "entry " + std::to_string(entries[i].id) + " is not finite");
        bool keep = true;
        for (std::size_t j = 0; j < entries.size() && keep; ++j) {
            if (j == i)
                continue;
            const auto& b = entries[j].objectives;
            if (dominates(b, a) || (j < i && b == a))
                keep = false;
        }
        if (keep)
            out.push_back(entries[i]);
    }
    return out;
}

/// Componentwise minimum over the front.
inline std::vector<double> ideal_point(std::span<const FrontEntry> front)
{
    if (front.empty())
        throw Error(Errc::EmptyInput, "ideal point of an empty front");
    std::vector<double> y = front.front().objectives;
    for (const auto& e : front) {
        if (e.objectives.size() != y.size())
            throw Error(Errc::DimensionMismatch, "ragged front");
        for (std::size_t i = 0; i < y.size(); ++i)
            y[i] = std::min(y[i], e.objectives[i]);
    }
    return y;
}

namespace detail {
inline std::vector<double> nadir_point(std::span<const FrontEntry> front)
{
    std::vector<double> y = front.front().objectives;
    for (const auto& e : front)
        for (std::size_t i = 0; i < y.size(); ++i)
            y[i] = std::max(y[i], e.objectives[i]);
    return y;
}

inline std::vector<double> normalize_one(std::span<const double> v, const std::vector<double>& lo,
                                         const std::vector<double>& hi)
{
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = hi[i] > lo[i] ? (v[i] - lo[i]) / (hi[i] - lo[i]) : 0.0;
    return out;
}
} // namespace detail

/// Min-max normalization per dimension over the front. A constant dimension maps to 0.
inline std::vector<std::vector<double>> normalize(std::span<const FrontEntry> front)
{
    const auto lo = ideal_point(front);
    const auto hi = detail::nadir_point(front);
    std::vector<std::vector<double>> out;
    out.reserve(front.size());
    for (const auto& e : front)
        out.push_back(detail::normalize_one(e.objectives, lo, hi));
    return out;
}

/// Infinity norm of the normalized objective vector, in [0, 1] for front members.
inline double worst_objective_score(std::span<const double> objectives, std::span<const FrontEntry> front)
{
    const auto lo = ideal_point(front);
    const auto hi = detail::nadir_point(front);
    if (objectives.size() != lo.size())
        throw Error(Errc::DimensionMismatch, "entry and front differ in dimension");
    const auto norm = detail::normalize_one(objectives, lo, hi);
    return *std::max_element(norm.begin(), norm.end());
}

inline double worst_objective_score(const FrontEntry& entry, std::span<const FrontEntry> front)
{
    return worst_objective_score(std::span<const double>(entry.objectives), front);
}

// ---------------------------------------------------------------------------
// Hypervolume (test and monitoring metric only)

namespace detail {

inline double hv_recursive(std::vector<std::vector<double>> pts, std::span<const double> ref, std::size_t dims)
{
    if (pts.empty())
        return 0.0;
    const std::size_t last = dims - 1;
    if (dims == 1) {
        double best = ref[0];
        for (const auto& p : pts)
            best = std::min(best, p[0]);
        return ref[0] - best;
    }
    std::sort(pts.begin(), pts.end(), [&](const auto& a, const auto& b) { return a[last] < b[last]; });
    if (dims == 2) {
        double vol = 0.0;
        double best_x = ref[0];
        for (std::size_t i = 0; i < pts.size(); ++i) {
            best_x = std::min(best_x, pts[i][0]);
            const double next = i + 1 < pts.size() ? pts[i + 1][1] : ref[1];
            vol += (ref[0] - best_x) * (next - pts[i][1]);
        }
        return vol;
    }
    double vol = 0.0;
    std::vector<std::vector<double>> slice;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        // Keep the slice non-dominated in the remaining dimensions to bound the recursion.
        const auto& p = pts[i];
        bool dominated = false;
        for (const auto& q : slice) {
            bool all_le = true;
            for (std::size_t d = 0; d < last && all_le; ++d)
                all_le = q[d] <= p[d];
            if (all_le) {
                dominated = true;
                break;
            }
        }
        if (!dominated) {
            std::erase_if(slice, [&](const auto& q) {
                for (std::size_t d = 0; d < last; ++d)
                    if (p[d] > q[d])
                        return false;
                return true;
            });
            slice.push_back(p);
        }
        const double next = i + 1 < pts.size() ? pts[i + 1][last] : ref[last];
        const double height = next - p[last];
        if (height > 0.0)
            vol += height * hv_recursive(slice, ref, last);
    }
    return vol;
}

} // namespace detail

/// Exact hypervolume dominated by `points` and bounded by `ref` (minimization).
/// Points that do not strictly dominate the reference contribute nothing.
inline double hypervolume(std::span<const std::vector<double>> points, std::span<const double> ref)
{
    std::vector<std::vector<double>> inside;
    for (const auto& p : points) {
        if (p.size() != ref.size())
            throw Error(Errc::DimensionMismatch, "point and reference differ in dimension");
        bool ok = true;
        for (std::size_t i = 0; i < p.size() && ok; ++i)
            ok = p[i] < ref[i];
        if (ok)
            inside.push_back(p);
    }
    if (ref.empty())
        return 0.0;
    return detail::hv_recursive(std::move(inside), ref, ref.size());
}

// ---------------------------------------------------------------------------
// Density-steered sampling

/// Gaussian product-kernel density on samples rescaled to [0,1] per dimension.
class DensityModel {
public:
    DensityModel(std::vector<double> lo, std::vector<double> hi, std::vector<double> bandwidth,
                 std::vector<std::vector<double>> scaled)
        : lo_(std::move(lo)), hi_(std::move(hi)), bandwidth_(std::move(bandwidth)), samples_(std::move(scaled))
    {
    }

    std::size_t dimension() const noexcept { return lo_.size(); }
    const std::vector<double>& bandwidth() const noexcept { return bandwidth_; }
    const std::vector<std::vector<double>>& samples() const noexcept { return samples_; }

    /// Maps a raw point into the unit box spanned by the reference samples.
    std::vector<double> rescale(std::span<const double> x) const
    {
        if (x.size() != dimension())
            throw Error(Errc::DimensionMismatch, "density query has wrong dimension");
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
            out[i] = hi_[i] > lo_[i] ? (x[i] - lo_[i]) / (hi_[i] - lo_[i]) : x[i] - lo_[i];
        return out;
    }

    /// Natural log of the density at a raw (unscaled) point.
    double log_density(std::span<const double> x) const
    {
        const auto z = rescale(x);
        double log_norm = 0.0;
        for (double h : bandwidth_)
            log_norm += -std::log(h) - 0.5 * std::log(2.0 * std::numbers::pi);
        std::vector<double> terms(samples_.size());
        for (std::size_t s = 0; s < samples_.size(); ++s) {
            double e = 0.0;
            for (std::size_t i = 0; i < z.size(); ++i) {
                const double u = (z[i] - samples_[s][i]) / bandwidth_[i];
                e -= 0.5 * u * u;
            }
            terms[s] = e;
        }
        const double m = *std::max_element(terms.begin(), terms.end());
        double acc = 0.0;
        for (double t : terms)
            acc += std::exp(t - m);
        return m + std::log(acc) + log_norm - std::log(static_cast<double>(samples_.size()));
    }

    double density(std::span<const double> x) const { return std::exp(log_density(x)); }

private:
    std::vector<double> lo_, hi_, bandwidth_;
    std::vector<std::vector<double>> samples_;
};

/// Bandwidth floor (unit-box scale) for dimensions in which all samples agree.
inline constexpr double kMinBandwidth = 0.05;

/// Fits the kernel density with Scott's rule, sigma_j * n^(-1/(d+4)), per dimension.
inline DensityModel fit_density(std::span<const std::vector<double>> samples)
{
    if (samples.size() < 2)
        throw Error(Errc::DegenerateDensity, "need at least two samples");
    const std::size_t d = samples.front().size();
    if (d == 0)
        throw Error(Errc::DimensionMismatch, "zero-dimensional samples");
    std::vector<double> lo(samples.front()), hi(samples.front());
    for (const auto& s : samples) {
        if (s.size() != d)
            throw Error(Errc::DimensionMismatch, "ragged density samples");
        for (std::size_t i = 0; i < d; ++i) {
            if (!std::isfinite(s[i]))
                throw Error(Errc::InvalidArgument, "non-finite density sample");
            lo[i] = std::min(lo[i], s[i]);
            hi[i] = std::max(hi[i], s[i]);
        }
    }
    bool any_spread = false;
    for (std::size_t i = 0; i < d; ++i)
        any_spread = any_spread || hi[i] > lo[i];
    if (!any_spread)
        throw Error(Errc::DegenerateDensity, "all density samples are identical");

    std::vector<std::vector<double>> scaled;
    scaled.reserve(samples.size());
    for (const auto& s : samples) {
        std::vector<double> z(d);
        for (std::size_t i = 0; i < d; ++i)
            z[i] = hi[i] > lo[i] ? (s[i] - lo[i]) / (hi[i] - lo[i]) : 0.0;
        scaled.push_back(std::move(z));
    }
    const double n = static_cast<double>(samples.size());
    const double factor = std::pow(n, -1.0 / (static_cast<double>(d) + 4.0));
    std::vector<double> bw(d);
    for (std::size_t i = 0; i < d; ++i) {
        double mean = 0.0;
        for (const auto& z : scaled)
            mean += z[i];
        mean /= n;
        double var = 0.0;
        for (const auto& z : scaled)
            var += (z[i] - mean) * (z[i] - mean);
        var /= (n - 1.0);
        bw[i] = std::max(std::sqrt(var) * factor, kMinBandwidth * factor);
    }
    return DensityModel(std::move(lo), std::move(hi), std::move(bw), std::move(scaled));
}

/// Single-draw selection probabilities, proportional to 1 / density.
inline std::vector<double> anti_proportional_weights(const DensityModel& model,
                                                     std::span<const std::vector<double>> candidates)
{
    std::vector<double> neg_log(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i)
        neg_log[i] = -model.log_density(candidates[i]);
    if (neg_log.empty())
        return {};
    const double m = *std::max_element(neg_log.begin(), neg_log.end());
    std::vector<double> w(neg_log.size());
    double total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i)
        total += w[i] = std::exp(neg_log[i] - m);
    for (double& x : w)
        x /= total;
    return w;
}

/// Draws `count` distinct candidates, each draw proportional to 1/density over
/// the ones still available. Returns indices in draw order.
inline std::vector<std::size_t> sample_anti_proportional(const DensityModel& model,
                                                         std::span<const std::vector<double>> candidates,
                                                         std::size_t count, Rng& rng)
{
    if (count > candidates.size())
        throw Error(Errc::InvalidArgument, "cannot draw " + std::to_string(count) + " of " +
                                               std::to_string(candidates.size()) + " candidates");
    std::vector<std::size_t> picked;
    if (count == candidates.size()) {
        picked.resize(count);
        std::iota(picked.begin(), picked.end(), std::size_t{0});
        return picked;
    }
    std::vector<double> neg_log(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i)
        neg_log[i] = -model.log_density(candidates[i]);
    std::vector<bool> taken(candidates.size(), false);
    for (std::size_t k = 0; k < count; ++k) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < candidates.size(); ++i)
            if (!taken[i])
                m = std::max(m, neg_log[i]);
        std::vector<double> w(candidates.size(), 0.0);
        double total = 0.0;
        for (std::size_t i = 0; i < candidates.size(); ++i)
            if (!taken[i])
                total += w[i] = std::exp(neg_log[i] - m);
        double r = uniform01(rng) * total;
        std::size_t choice = candidates.size();
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            if (taken[i])
                continue;
            choice = i;
            if (r < w[i])
                break;
            r -= w[i];
        }
        taken[choice] = true;
        picked.push_back(choice);
    }
    return picked;
}

} // namespace hwnas

#endif // HWNAS_PARETO_HPP
