#ifndef HWNAS_REPORT_HPP
#define HWNAS_REPORT_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "hwnas/objectives.hpp"
#include "hwnas/pareto.hpp"

namespace hwnas {

/// Shortest round-trip decimal, independent of the C locale.
inline std::string fmt(double v)
{
    if (std::isnan(v))
        return "nan";
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string fmt(std::uint64_t v) { return std::to_string(v); }

/// Parses a number written by fmt; "nan" and empty fields give NaN.
inline double parse_double(std::string_view s)
{
    if (s.empty() || s == "nan")
        return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
        throw Error(Errc::ParseError, "not a number: '" + std::string(s) + "'");
    return v;
}

/// Minimal delimited-text table with a fixed column order.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::string str() const
    {
        std::string out;
        auto line = [&](const std::vector<std::string>& cells) {
            for (std::size_t i = 0; i < cells.size(); ++i) {
                if (i)
                    out += ',';
                out += cells[i];
            }
            out += '\n';
        };
        line(header);
        for (const auto& r : rows)
            line(r);
        return out;
    }

    static Table parse(std::string_view text)
    {
        Table t;
        bool first = true;
        while (!text.empty()) {
            const auto nl = text.find('\n');
            const auto line = text.substr(0, nl);
            text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
            if (line.empty())
                continue;
            std::vector<std::string> cells;
            std::size_t start = 0;
            for (std::size_t i = 0; i <= line.size(); ++i)
                if (i == line.size() || line[i] == ',') {
                    cells.emplace_back(line.substr(start, i - start));
                    start = i + 1;
                }
            if (first)
                t.header = std::move(cells);
            else
                t.rows.push_back(std::move(cells));
            first = false;
        }
        return t;
    }

    std::size_t column(const std::string& name) const
    {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end())
            throw Error(Errc::ParseError, "missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    }
};

/// A selected model with its search-time objectives.
struct ModelRow {
    std::uint64_t id = 0;
    double val_error = 0.0;
    CheapObjectives cheap;

    std::vector<double> full() const
    {
        auto c = cheap.as_array();
        return {val_error, c[0], c[1], c[2], c[3]};
    }
};

struct NamedModel {
    std::string name;
    std::uint64_t id = 0;
};

inline constexpr const char* kNamedRows[] = {"WorstASI", "BestASI", "BestValErr", "BestEfficiency", "BestADCR", "BalOpt"};

/// The six summary rows. BestEfficiency minimizes latency, then energy.
/// BalOpt minimizes the worst normalized objective over the given set. Ties
/// go to the lower id.
inline std::vector<NamedModel> named_models(const std::vector<ModelRow>& models)
{
    if (models.empty())
        throw Error(Errc::EmptyInput, "no models to summarize");
    std::vector<FrontEntry> entries;
    for (const auto& m : models)
        entries.push_back({m.id, m.full()});
    auto best = [&](auto less) {
        std::size_t b = 0;
        for (std::size_t i = 1; i < models.size(); ++i)
            if (less(models[i], models[b]) || (!less(models[b], models[i]) && models[i].id < models[b].id))
                b = i;
        return models[b].id;
    };
    std::vector<double> score(models.size());
    for (std::size_t i = 0; i < models.size(); ++i)
        score[i] = worst_objective_score(entries[i], entries);
    std::size_t bal = 0;
    for (std::size_t i = 1; i < models.size(); ++i)
        if (score[i] < score[bal] || (score[i] == score[bal] && models[i].id < models[bal].id))
            bal = i;
    return {
        {"WorstASI", best([](const ModelRow& a, const ModelRow& b) { return a.cheap.asi > b.cheap.asi; })},
        {"BestASI", best([](const ModelRow& a, const ModelRow& b) { return a.cheap.asi < b.cheap.asi; })},
        {"BestValErr", best([](const ModelRow& a, const ModelRow& b) { return a.val_error < b.val_error; })},
        {"BestEfficiency", best([](const ModelRow& a, const ModelRow& b) {
             if (a.cheap.latency_ops != b.cheap.latency_ops)
                 return a.cheap.latency_ops < b.cheap.latency_ops;
             return a.cheap.energy_transfers < b.cheap.energy_transfers;
         })},
        {"BestADCR", best([](const ModelRow& a, const ModelRow& b) { return a.cheap.adcr < b.cheap.adcr; })},
        {"BalOpt", models[bal].id},
    };
}

// ---------------------------------------------------------------------------
// SVG plots

struct Series {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

struct PlotSpec {
    std::string title;
    std::string x_label;
    std::string y_label;
    bool log_x = false;
    bool lines = false; ///< connect points in order
};

namespace detail {

inline std::string escape_xml(const std::string& s)
{
    std::string o;
    for (char c : s) {
        switch (c) {
        case '<': o += "&lt;"; break;
        case '>': o += "&gt;"; break;
        case '&': o += "&amp;"; break;
        default: o += c;
        }
    }
    return o;
}

inline std::string fixed(double v, int digits = 3)
{
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, digits);
    return std::string(buf, r.ptr);
}

} // namespace detail

/// Scatter or line plot with linear axes (optionally log x), one color per series.
inline std::string svg_plot(const std::vector<Series>& series, const PlotSpec& spec)
{
    static constexpr const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
    constexpr double W = 480, H = 360, L = 60, R = 20, T = 30, B = 50;
    auto tx = [&](double x) { return spec.log_x ? std::log10(x) : x; };
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            if (!std::isfinite(tx(x)) || !std::isfinite(y))
                continue;
            x0 = std::min(x0, tx(x));
            x1 = std::max(x1, tx(x));
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    if (!(x0 <= x1)) {
        x0 = 0;
        x1 = 1;
        y0 = 0;
        y1 = 1;
    }
    if (x1 == x0)
        x1 = x0 + 1;
    if (y1 == y0)
        y1 = y0 + 1;
    auto px = [&](double x) { return L + (tx(x) - x0) / (x1 - x0) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">"
      << detail::escape_xml(spec.title) << "</text>\n";
    o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
        const double sx = L + (W - L - R) * i / 4.0, sy = H - B - (H - T - B) * i / 4.0;
        o << "<text x=\"" << detail::fixed(sx) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"10\">"
          << (spec.log_x ? "1e" + detail::fixed(fx) : detail::fixed(fx)) << "</text>\n";
        o << "<text x=\"" << L - 4 << "\" y=\"" << detail::fixed(sy + 3) << "\" text-anchor=\"end\" font-size=\"10\">"
          << detail::fixed(fy) << "</text>\n";
    }
    o << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << detail::escape_xml(spec.x_label) << "</text>\n";
    o << "<text x=\"14\" y=\"" << H / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
      << H / 2 << ")\">" << detail::escape_xml(spec.y_label) << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* c = colors[s % 6];
        std::vector<std::pair<double, double>> pts;
        for (auto [x, y] : series[s].points)
            if (std::isfinite(tx(x)) && std::isfinite(y))
                pts.emplace_back(px(x), py(y));
        if (spec.lines && pts.size() > 1) {
            o << "<polyline fill=\"none\" stroke=\"" << c << "\" points=\"";
            for (auto [x, y] : pts)
                o << detail::fixed(x, 5) << ',' << detail::fixed(y, 5) << ' ';
            o << "\"/>\n";
        }
        for (auto [x, y] : pts)
            o << "<circle cx=\"" << detail::fixed(x, 5) << "\" cy=\"" << detail::fixed(y, 5) << "\" r=\"3\" fill=\"" << c
              << "\"/>\n";
        o << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 * (s + 1) << "\" text-anchor=\"end\" font-size=\"10\" fill=\""
          << c << "\">" << detail::escape_xml(series[s].label) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

} // namespace hwnas

#endif
