#ifndef HWNAS_PIPELINE_HPP
#define HWNAS_PIPELINE_HPP

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "hwnas/checkpoint.hpp"
#include "hwnas/evolution.hpp"
#include "hwnas/faultsim.hpp"
#include "hwnas/report.hpp"

namespace hwnas {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct DatasetConfig {
    std::string kind = "synthetic"; ///< "synthetic" or "files"
    std::size_t train = 1000, val = 500, test = 500;
    SyntheticSpec synthetic;
    std::string train_path, val_path, test_path;
};

struct SelectConfig {
    std::size_t top_k = 50;
    bool fill_from_log = false; ///< top up a small front with the best other evaluated candidates
};

struct QuantConfig {
    int bits = kDefaultBits;
    std::size_t calibration_samples = kCalibrationSamples;
};

struct FaultSettings {
    std::vector<double> bers{kReferenceBer, 0.005};
    std::size_t trials = kDefaultTrials;
    std::vector<double> sweep_bers{1e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1};
    std::size_t sweep_trials = 20;
    std::size_t test_samples = 0; ///< 0: the whole test set
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "run";
    std::size_t threads = 0;
    DatasetConfig dataset;
    SearchConfig search;
    SelectConfig select;
    TrainConfig retrain;
    QuantConfig quant;
    FaultSettings fault;

    RunConfig() { retrain.epochs = 10; retrain.learning_rate = 0.05; }
};

namespace detail {

/// Reads one JSON object, tracking consumed keys so unknown ones can be reported
/// with their full path.
class ObjectReader {
public:
    ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object())
            fail("", "must be an object");
    }

    [[noreturn]] void fail(const std::string& key, const std::string& why) const
    {
        throw Error(Errc::ConfigError, path_ + key + ": " + why);
    }

    template <typename T>
    void get(const std::string& key, T& out)
    {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end())
            return;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean())
                    fail(key, "expected a boolean");
            } else if constexpr (std::is_integral_v<T>) {
                if (!it->is_number_integer())
                    fail(key, "expected an integer");
                if (std::is_unsigned_v<T> && it->template get<std::int64_t>() < 0)
                    fail(key, "must be >= 0");
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!it->is_number())
                    fail(key, "expected a number");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!it->is_string())
                    fail(key, "expected a string");
            }
            out = it->template get<T>();
        } catch (const nlohmann::json::exception&) {
            fail(key, "has the wrong type");
        }
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    ObjectReader child(const std::string& key)
    {
        seen_.insert(key);
        static const nlohmann::json empty = nlohmann::json::object();
        const auto it = j_.find(key);
        return ObjectReader(it == j_.end() ? empty : *it, path_ + key + ".");
    }

    void finish() const
    {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k))
                fail(k, "unknown key");
    }

    const std::string& path() const { return path_; }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void read_train(ObjectReader r, TrainConfig& t)
{
    r.get("epochs", t.epochs);
    r.get("batch_size", t.batch_size);
    r.get("learning_rate", t.learning_rate);
    r.get("momentum", t.momentum);
    r.get("weight_decay", t.weight_decay);
    r.get("augment", t.augment);
    r.get("crop_padding", t.crop_padding);
    r.get("hflip", t.hflip);
    r.finish();
    try {
        t.validate();
    } catch (const Error& e) {
        r.fail("", e.what());
    }
}

} // namespace detail

inline RunConfig parse_run_config(std::string_view text)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(Errc::ConfigError, std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig c;
    detail::ObjectReader r(j, "");
    r.get("seed", c.seed);
    r.get("output_dir", c.output_dir);
    r.get("threads", c.threads);
    {
        auto d = r.child("dataset");
        d.get("kind", c.dataset.kind);
        if (c.dataset.kind == "synthetic") {
            d.get("train", c.dataset.train);
            d.get("val", c.dataset.val);
            d.get("test", c.dataset.test);
            d.get("height", c.dataset.synthetic.height);
            d.get("width", c.dataset.synthetic.width);
            d.get("noise", c.dataset.synthetic.noise);
            d.get("distractors", c.dataset.synthetic.distractors);
            if (c.dataset.train < 2 || c.dataset.val < 1 || c.dataset.test < 1)
                d.fail("train", "need train >= 2, val >= 1, test >= 1 samples");
            if (c.dataset.synthetic.height < 8 || c.dataset.synthetic.width < 8)
                d.fail("height", "synthetic images must be at least 8x8");
        } else if (c.dataset.kind == "files") {
            d.get("train", c.dataset.train_path);
            d.get("val", c.dataset.val_path);
            d.get("test", c.dataset.test_path);
            if (c.dataset.train_path.empty() || c.dataset.val_path.empty() || c.dataset.test_path.empty())
                d.fail("train", "file datasets need train, val and test paths");
        } else {
            d.fail("kind", "must be \"synthetic\" or \"files\"");
        }
        d.finish();
    }
    {
        auto s = r.child("search");
        auto& sc = c.search;
        s.get("iterations", sc.iterations);
        s.get("parents", sc.parents);
        s.get("children_per_parent", sc.children_per_parent);
        s.get("subset", sc.subset);
        s.get("init_population", sc.init_population);
        if (s.has("mutation_weights")) {
            std::vector<double> w;
            s.get("mutation_weights", w);
            if (w.size() != 6)
                s.fail("mutation_weights", "needs exactly 6 entries");
            std::copy(w.begin(), w.end(), sc.mutation_weights.begin());
        }
        s.get("min_filters", sc.limits.min_filters);
        s.get("max_filters", sc.limits.max_filters);
        s.get("kernels", sc.limits.kernels);
        {
            auto a = s.child("approx");
            a.get("budget", sc.approx.budget);
            a.get("batch_size", sc.approx.batch_size);
            a.get("learning_rate", sc.approx.learning_rate);
            a.finish();
        }
        detail::read_train(s.child("seed_train"), sc.seed_train);
        detail::read_train(s.child("finetune"), sc.finetune);
        s.finish();
        sc.validate("search.");
    }
    {
        auto s = r.child("select");
        s.get("top_k", c.select.top_k);
        s.get("fill_from_log", c.select.fill_from_log);
        if (c.select.top_k < 1)
            s.fail("top_k", "must be >= 1");
        s.finish();
    }
    detail::read_train(r.child("retrain"), c.retrain);
    {
        auto q = r.child("quant");
        q.get("bits", c.quant.bits);
        q.get("calibration_samples", c.quant.calibration_samples);
        if (c.quant.bits < 2 || c.quant.bits > 32)
            q.fail("bits", "must be in [2, 32]");
        if (c.quant.calibration_samples < 1)
            q.fail("calibration_samples", "must be >= 1");
        q.finish();
    }
    {
        auto f = r.child("fault");
        f.get("bers", c.fault.bers);
        f.get("trials", c.fault.trials);
        f.get("sweep_bers", c.fault.sweep_bers);
        f.get("sweep_trials", c.fault.sweep_trials);
        f.get("test_samples", c.fault.test_samples);
        auto check = [&](const std::string& key, const std::vector<double>& v) {
            if (v.empty())
                f.fail(key, "must not be empty");
            for (double b : v)
                if (!(b >= 0.0 && b <= 1.0))
                    f.fail(key, "bit error rates must be in [0, 1]");
            if (!std::is_sorted(v.begin(), v.end()))
                f.fail(key, "must be sorted ascending");
        };
        check("bers", c.fault.bers);
        check("sweep_bers", c.fault.sweep_bers);
        if (c.fault.trials < 1)
            f.fail("trials", "must be >= 1");
        if (c.fault.sweep_trials < 1)
            f.fail("sweep_trials", "must be >= 1");
        f.finish();
    }
    r.finish();
    c.search.seed = derive_seed(c.seed, 0x736561726368);
    c.search.threads = c.threads;
    return c;
}

/// Output directory after the environment override.
inline std::string resolve_output_dir(const RunConfig& c)
{
    if (const char* env = std::getenv("HWNAS_OUTPUT_DIR"); env && *env)
        return env;
    return c.output_dir;
}

// ---------------------------------------------------------------------------
// Run directory

inline constexpr const char* kStages[] = {"data", "search", "select", "retrain", "quantize", "inject", "sweep", "report"};

using LogFn = std::function<void(const std::string&)>;

class RunDir {
public:
    explicit RunDir(fs::path root) : root_(std::move(root)) {}

    const fs::path& root() const { return root_; }
    fs::path path(const std::string& rel) const { return root_ / rel; }

    std::string read(const std::string& rel) const
    {
        if (!fs::exists(path(rel)))
            throw Error(Errc::IoError, "missing file " + path(rel).string());
        return detail::read_file(path(rel).string());
    }

    void write(const std::string& rel, std::string_view bytes) const
    {
        fs::create_directories(path(rel).parent_path());
        detail::write_file(path(rel).string(), bytes);
    }

    /// True if the stage's marker exists and every listed output still has its checksum.
    bool complete(const std::string& stage) const
    {
        const auto marker = path("stages/" + stage + ".done");
        if (!fs::exists(marker))
            return false;
        try {
            const auto j = nlohmann::json::parse(detail::read_file(marker.string()));
            for (const auto& [rel, sum] : j.at("outputs").items())
                if (!fs::exists(path(rel)) || file_checksum(path(rel).string()) != sum.get<std::string>())
                    return false;
            return true;
        } catch (const std::exception&) {
            return false;
        }
    }

    void mark_complete(const std::string& stage, const std::vector<std::string>& outputs) const
    {
        nlohmann::ordered_json j;
        j["stage"] = stage;
        auto& o = j["outputs"] = nlohmann::ordered_json::object();
        auto sorted = outputs;
        std::sort(sorted.begin(), sorted.end());
        for (const auto& rel : sorted)
            o[rel] = file_checksum(path(rel).string());
        write("stages/" + stage + ".done", j.dump(1) + "\n");
    }

    void require(std::initializer_list<const char*> stages) const
    {
        std::string missing;
        for (const char* s : stages)
            if (!complete(s))
                missing += (missing.empty() ? "" : ", ") + std::string(s);
        if (!missing.empty())
            throw Error(Errc::IncompleteRun, "run directory " + root_.string() + " is missing stages: " + missing);
    }

private:
    fs::path root_;
};

/// Creates or reopens a run directory. The config snapshot is stored verbatim;
/// reopening with a different config is refused.
inline RunDir open_run(const std::string& config_text, const RunConfig& cfg)
{
    RunDir run(resolve_output_dir(cfg));
    fs::create_directories(run.root());
    const auto snap = run.path("config.json");
    if (fs::exists(snap)) {
        if (detail::read_file(snap.string()) != config_text)
            throw Error(Errc::ConfigError, "run directory " + run.root().string() + " was created with a different config");
    } else {
        run.write("config.json", config_text);
    }
    return run;
}

/// Reopens an existing run directory from its snapshot.
inline std::pair<RunDir, RunConfig> load_run(const std::string& dir)
{
    RunDir run(dir);
    const auto text = run.read("config.json");
    return {run, parse_run_config(text)};
}

// ---------------------------------------------------------------------------
// Serialization of search records

inline nlohmann::ordered_json mutation_to_json(const Mutation& m)
{
    nlohmann::ordered_json j;
    j["kind"] = mutation_name(m.kind);
    j["describe"] = m.describe();
    j["target"] = m.target;
    j["consumer"] = m.consumer;
    j["source"] = m.source;
    j["add_merge"] = m.add_merge;
    j["kernel"] = m.kernel;
    j["new_channels"] = m.new_channels;
    j["seed"] = m.seed;
    j["new_ids"] = m.new_ids;
    return j;
}

inline Mutation mutation_from_json(const nlohmann::json& j)
{
    Mutation m;
    const auto kind = j.at("kind").get<std::string>();
    bool found = false;
    for (auto k : kAllMutations)
        if (kind == mutation_name(k)) {
            m.kind = k;
            found = true;
        }
    if (!found)
        throw Error(Errc::ParseError, "unknown mutation kind '" + kind + "'");
    m.target = j.at("target").get<NodeId>();
    m.consumer = j.at("consumer").get<NodeId>();
    m.source = j.at("source").get<NodeId>();
    m.add_merge = j.at("add_merge").get<bool>();
    m.kernel = j.at("kernel").get<int>();
    m.new_channels = j.at("new_channels").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.new_ids = j.at("new_ids").get<std::vector<NodeId>>();
    return m;
}

inline std::string checkpoint_stem(std::uint64_t id) { return "checkpoints/c" + std::to_string(id); }

inline nlohmann::ordered_json record_to_json(const CandidateRecord& r, bool has_checkpoint)
{
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["iteration"] = r.iteration;
    j["status"] = status_name(r.status);
    j["parent"] = r.parent ? nlohmann::ordered_json(*r.parent) : nlohmann::ordered_json(nullptr);
    j["mutation"] = r.mutation ? mutation_to_json(*r.mutation) : nlohmann::ordered_json(nullptr);
    if (r.graph)
        j["graph"] = to_json(*r.graph);
    j["asi"] = r.cheap.asi;
    j["latency_ops"] = r.cheap.latency_ops;
    j["energy_transfers"] = r.cheap.energy_transfers;
    j["adcr"] = r.cheap.adcr;
    j["inherited_error"] = r.inherited_error ? nlohmann::ordered_json(*r.inherited_error) : nullptr;
    j["val_error"] = r.val_error ? nlohmann::ordered_json(*r.val_error) : nullptr;
    j["in_population"] = r.in_population;
    j["checkpoint"] = has_checkpoint ? nlohmann::ordered_json(checkpoint_stem(r.id)) : nullptr;
    return j;
}

inline std::vector<nlohmann::json> read_candidate_log(const RunDir& run)
{
    std::vector<nlohmann::json> out;
    std::istringstream in(run.read("search/candidates.jsonl"));
    for (std::string line; std::getline(in, line);)
        if (!line.empty())
            out.push_back(nlohmann::json::parse(line));
    return out;
}

inline Candidate load_candidate(const RunDir& run, std::uint64_t id)
{
    Candidate c;
    c.id = id;
    c.graph = load_graph(run.path(checkpoint_stem(id) + ".graph.json").string());
    c.weights = load_weights(run.path(checkpoint_stem(id) + ".hwnw").string());
    c.objectives.cheap = cheap_objectives(c.graph);
    return c;
}

// ---------------------------------------------------------------------------
// Stages

struct Data {
    Dataset train, val, test;
};

inline void stage_data(const RunDir& run, const RunConfig& cfg, const LogFn& log)
{
    if (run.complete("data"))
        return;
    Data d;
    if (cfg.dataset.kind == "synthetic") {
        d.train = make_synthetic(cfg.dataset.train, derive_seed(cfg.seed, 0x64617461, 0), cfg.dataset.synthetic);
        d.val = make_synthetic(cfg.dataset.val, derive_seed(cfg.seed, 0x64617461, 1), cfg.dataset.synthetic);
        d.test = make_synthetic(cfg.dataset.test, derive_seed(cfg.seed, 0x64617461, 2), cfg.dataset.synthetic);
    } else {
        d.train = load_dataset(cfg.dataset.train_path);
        d.val = load_dataset(cfg.dataset.val_path);
        d.test = load_dataset(cfg.dataset.test_path);
    }
    run.write("data/train.hwnd", encode_dataset(d.train));
    run.write("data/val.hwnd", encode_dataset(d.val));
    run.write("data/test.hwnd", encode_dataset(d.test));
    run.mark_complete("data", {"data/train.hwnd", "data/val.hwnd", "data/test.hwnd"});
    log("data: " + std::to_string(d.train.size()) + " train, " + std::to_string(d.val.size()) + " val, " +
        std::to_string(d.test.size()) + " test samples");
}

inline Data load_data(const RunDir& run)
{
    run.require({"data"});
    return {decode_dataset(run.read("data/train.hwnd")), decode_dataset(run.read("data/val.hwnd")),
            decode_dataset(run.read("data/test.hwnd"))};
}

namespace detail {

inline std::string front_csv(const std::vector<Candidate>& pop)
{
    Table t{{"id", "parent", "born", "val_error", "asi", "latency_ops", "energy_transfers", "adcr"}, {}};
    for (const auto& c : pop)
        t.rows.push_back({fmt(c.id), c.parent ? fmt(*c.parent) : "", std::to_string(c.born),
                          fmt(*c.objectives.val_error), fmt(c.objectives.cheap.asi),
                          fmt(c.objectives.cheap.latency_ops), fmt(c.objectives.cheap.energy_transfers),
                          fmt(c.objectives.cheap.adcr)});
    return t.str();
}

inline std::string iter_name(int i)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "search/fronts/iter_%04d.csv", i);
    return buf;
}

} // namespace detail

/// Search with per-iteration state so an interrupted run resumes at the last
/// completed iteration.
inline void stage_search(const RunDir& run, const RunConfig& cfg, const LogFn& log)
{
    if (run.complete("search"))
        return;
    const auto d = load_data(run);
    const auto log_path = run.path("search/candidates.jsonl");
    fs::create_directories(run.path("search/fronts"));
    fs::create_directories(run.path("checkpoints"));
    std::vector<std::string> outputs;
    std::set<std::string> written;

    SearchState st;
    bool resumed = false;
    if (fs::exists(run.path("search/state.json"))) {
        const auto j = nlohmann::json::parse(run.read("search/state.json"));
        st.iteration = j.at("iteration").get<int>();
        st.next_id = j.at("next_id").get<std::uint64_t>();
        st.hv_reference = j.at("hv_reference").get<std::vector<double>>();
        st.hv_trace = j.at("hv_trace").get<std::vector<double>>();
        for (const auto& m : j.at("population")) {
            auto c = load_candidate(run, m.at("id").get<std::uint64_t>());
            c.objectives.val_error = m.at("val_error").get<double>();
            c.born = m.at("born").get<int>();
            if (!m.at("parent").is_null())
                c.parent = m.at("parent").get<std::uint64_t>();
            if (!m.at("mutation").is_null())
                c.mutation = mutation_from_json(m.at("mutation"));
            st.population.push_back(std::move(c));
        }
        fs::resize_file(log_path, j.at("log_bytes").get<std::uintmax_t>());
        resumed = true;
        log("search: resuming after iteration " + std::to_string(st.iteration));
    } else {
        std::ofstream(log_path, std::ios::trunc);
    }

    std::ofstream out(log_path, std::ios::app | std::ios::binary);
    SearchObserver obs;
    obs.on_record = [&](const CandidateRecord& r, const Candidate* trained) {
        if (trained) {
            save_graph(run.path(checkpoint_stem(r.id) + ".graph.json").string(), trained->graph);
            save_weights(run.path(checkpoint_stem(r.id) + ".hwnw").string(), trained->weights);
        }
        out << record_to_json(r, trained != nullptr).dump() << '\n';
    };
    obs.on_iteration = [&](const SearchState& s) {
        out.flush();
        run.write(detail::iter_name(s.iteration), detail::front_csv(s.population));
        nlohmann::ordered_json j;
        j["iteration"] = s.iteration;
        j["next_id"] = s.next_id;
        j["hv_reference"] = s.hv_reference;
        j["hv_trace"] = s.hv_trace;
        auto& p = j["population"] = nlohmann::ordered_json::array();
        for (const auto& c : s.population) {
            nlohmann::ordered_json m;
            m["id"] = c.id;
            m["val_error"] = *c.objectives.val_error;
            m["born"] = c.born;
            m["parent"] = c.parent ? nlohmann::ordered_json(*c.parent) : nullptr;
            m["mutation"] = c.mutation ? mutation_to_json(*c.mutation) : nlohmann::ordered_json(nullptr);
            p.push_back(m);
        }
        j["log_bytes"] = fs::file_size(log_path);
        run.write("search/state.json", j.dump(1) + "\n");
        log("search: iteration " + std::to_string(s.iteration) + "/" + std::to_string(cfg.search.iterations) +
            ", front " + std::to_string(s.population.size()) + ", hypervolume " + fmt(s.hv_trace.back()));
    };
    if (!resumed)
        st = initial_population(d.train, d.val, cfg.search, obs);
    run_search(st, d.train, d.val, cfg.search, obs);
    out.close();

    Table hv{{"iteration", "hypervolume"}, {}};
    for (std::size_t i = 0; i < st.hv_trace.size(); ++i)
        hv.rows.push_back({std::to_string(i), fmt(st.hv_trace[i])});
    run.write("search/hypervolume.csv", hv.str());
    run.write("search/population.csv", detail::front_csv(st.population));
    outputs = {"search/candidates.jsonl", "search/hypervolume.csv", "search/population.csv", "search/state.json"};
    for (int i = 0; i <= st.iteration; ++i)
        outputs.push_back(detail::iter_name(i));
    for (const auto& e : fs::directory_iterator(run.path("checkpoints")))
        outputs.push_back("checkpoints/" + e.path().filename().string());
    run.mark_complete("search", outputs);
}

/// Top-k of the final front by validation error; optionally topped up with the
/// best other evaluated candidates when the front is smaller than k.
inline void stage_select(const RunDir& run, const RunConfig& cfg, const LogFn& log)
{
    if (run.complete("select"))
        return;
    run.require({"search"});
    const auto records = read_candidate_log(run);
    std::map<std::uint64_t, nlohmann::json> by_id;
    for (const auto& r : records)
        by_id[r.at("id").get<std::uint64_t>()] = r;
    std::vector<Candidate> pop;
    const auto popt = Table::parse(run.read("search/population.csv"));
    for (const auto& row : popt.rows) {
        Candidate c;
        c.id = std::stoull(row[0]);
        c.objectives.val_error = parse_double(row[popt.column("val_error")]);
        c.objectives.cheap.asi = parse_double(row[popt.column("asi")]);
        c.objectives.cheap.latency_ops = std::stoull(row[popt.column("latency_ops")]);
        c.objectives.cheap.energy_transfers = std::stoull(row[popt.column("energy_transfers")]);
        c.objectives.cheap.adcr = parse_double(row[popt.column("adcr")]);
        pop.push_back(std::move(c));
    }
    auto sel = select_final(pop, cfg.select.top_k);
    Table t{{"rank", "id", "source", "val_error", "asi", "latency_ops", "energy_transfers", "adcr"}, {}};
    auto add = [&](const Candidate& c, const char* source) {
        t.rows.push_back({std::to_string(t.rows.size() + 1), fmt(c.id), source, fmt(*c.objectives.val_error),
                          fmt(c.objectives.cheap.asi), fmt(c.objectives.cheap.latency_ops),
                          fmt(c.objectives.cheap.energy_transfers), fmt(c.objectives.cheap.adcr)});
    };
    for (const auto& c : sel.models)
        add(c, "front");
    if (sel.truncated && cfg.select.fill_from_log) {
        std::vector<Candidate> rest;
        std::set<std::uint64_t> taken;
        std::vector<CheapObjectives> seen;
        for (const auto& c : sel.models) {
            taken.insert(c.id);
            seen.push_back(c.objectives.cheap);
        }
        for (const auto& r : records) {
            if (r.at("checkpoint").is_null() || taken.count(r.at("id").get<std::uint64_t>()))
                continue;
            Candidate c;
            c.id = r.at("id").get<std::uint64_t>();
            c.objectives.val_error = r.at("val_error").get<double>();
            c.objectives.cheap = {r.at("asi").get<double>(), r.at("latency_ops").get<std::uint64_t>(),
                                  r.at("energy_transfers").get<std::uint64_t>(), r.at("adcr").get<double>()};
            rest.push_back(std::move(c));
        }
        std::stable_sort(rest.begin(), rest.end(), [](const Candidate& a, const Candidate& b) {
            return *a.objectives.val_error < *b.objectives.val_error;
        });
        for (const auto& c : rest) {
            if (t.rows.size() >= cfg.select.top_k)
                break;
            if (std::find(seen.begin(), seen.end(), c.objectives.cheap) != seen.end())
                continue;
            seen.push_back(c.objectives.cheap);
            add(c, "log");
        }
    }
    run.write("select/selected.csv", t.str());
    run.mark_complete("select", {"select/selected.csv"});
    log("select: " + std::to_string(t.rows.size()) + " models" +
        (sel.truncated ? " (front has only " + std::to_string(pop.size()) + ")" : ""));
}

inline std::vector<ModelRow> selected_models(const RunDir& run)
{
    const auto t = Table::parse(run.read("select/selected.csv"));
    std::vector<ModelRow> out;
    for (const auto& r : t.rows)
        out.push_back({std::stoull(r[t.column("id")]), parse_double(r[t.column("val_error")]),
                       {parse_double(r[t.column("asi")]), std::stoull(r[t.column("latency_ops")]),
                        std::stoull(r[t.column("energy_transfers")]), parse_double(r[t.column("adcr")])}});
    return out;
}

inline std::string model_name(std::uint64_t id) { return "m" + std::to_string(id); }

inline Dataset concat(const Dataset& a, const Dataset& b)
{
    if (!(a.shape == b.shape) || a.num_classes != b.num_classes)
        throw Error(Errc::ShapeMismatch, "datasets differ in shape or classes");
    Dataset d = a;
    d.values.insert(d.values.end(), b.values.begin(), b.values.end());
    d.labels.insert(d.labels.end(), b.labels.begin(), b.labels.end());
    return d;
}

/// Retrains every selected architecture from scratch on train + val.
inline void stage_retrain(const RunDir& run, const RunConfig& cfg, const LogFn& log)
{
    if (run.complete("retrain"))
        return;
    run.require({"select"});
    fs::create_directories(run.path("retrain"));
    const auto d = load_data(run);
    const auto models = selected_models(run);
    const auto full = concat(d.train, d.val);
    std::vector<double> test_err(models.size());
    parallel_for(
        models.size(),
        [&](std::size_t i) {
            const auto id = models[i].id;
            const auto g = load_graph(run.path(checkpoint_stem(id) + ".graph.json").string());
            Rng init(derive_seed(cfg.seed, 0x7265, id));
            TrainConfig tc = cfg.retrain;
            tc.seed = derive_seed(cfg.seed, 0x7274, id);
            auto r = train(g, init_weights(g, init), full, Dataset{d.test.shape, d.test.num_classes, {}, {}}, tc);
            test_err[i] = error_rate(g, r.weights, d.test);
            save_graph(run.path("retrain/" + model_name(id) + ".graph.json").string(), g);
            save_weights(run.path("retrain/" + model_name(id) + ".hwnw").string(), r.weights);
        },
        cfg.threads);
    Table t{{"id", "val_error", "test_error"}, {}};
    std::vector<std::string> outputs{"retrain/metrics.csv"};
    for (std::size_t i = 0; i < models.size(); ++i) {
        t.rows.push_back({fmt(models[i].id), fmt(models[i].val_error), fmt(test_err[i])});
        outputs.push_back("retrain/" + model_name(models[i].id) + ".graph.json");
        outputs.push_back("retrain/" + model_name(models[i].id) + ".hwnw");
    }
    run.write("retrain/metrics.csv", t.str());
    run.mark_complete("retrain", outputs);
    log("retrain: " + std::to_string(models.size()) + " models");
}

inline constexpr QuantMethod kMethods[] = {QuantMethod::MinPQE, QuantMethod::MaxRange};

inline std::string quant_file(std::uint64_t id, QuantMethod m)
{
    return "quantize/" + model_name(id) + "_" + quant_method_name(m) + ".json";
}

inline void stage_quantize(const RunDir& run, const RunConfig& cfg, const LogFn& log)
{
    if (run.complete("quantize"))
        return;
    run.require({"retrain"});
    fs::create_directories(run.path("quantize"));
    const auto d = load_data(run);
    const auto models = selected_models(run);
    const auto calib = d.train.head(cfg.quant.calibration_samples);
    std::vector<std::array<double, 2>> err(models.size());
    std::vector<double> float_err(models.size());
    parallel_for(
        models.size(),
        [&](std::size_t i) {
            const auto id = models[i].id;
            const auto g = load_graph(run.path("retrain/" + model_name(id) + ".graph.json").string());
            const auto w = load_weights(run.path("retrain/" + model_name(id) + ".hwnw").string());
            float_err[i] = error_rate(g, w, d.test);
            for (std::size_t k = 0; k < 2; ++k) {
                const auto qm = quantize(g, w, calib, kMethods[k], cfg.quant.bits);
                err[i][k] = quantized_error_rate(qm, d.test);
                save_quantized(run.path(quant_file(id, kMethods[k])).string(), qm);
            }
        },
        cfg.threads);
    Table t{{"id", "float_test_error", "minpqe_test_error", "maxrange_test_error"}, {}};
    std::vector<std::string> outputs{"quantize/metrics.csv"};
    for (std::size_t i = 0; i < models.size(); ++i) {
        t.rows.push_back({fmt(models[i].id), fmt(float_err[i]), fmt(err[i][0]), fmt(err[i][1])});
        for (auto m : kMethods)
            outputs.push_back(quant_file(models[i].id, m));
    }
    run.write("quantize/metrics.csv", t.str());
    run.mark_complete("quantize", outputs);
    log("quantize: " + std::to_string(models.size()) + " models, 2 methods");
}

inline Dataset fault_test_set(const Data& d, const RunConfig& cfg)
{
    return cfg.fault.test_samples ? d.test.head(cfg.fault.test_samples) : d.test;
}

inline std::string summary_csv(const std::vector<FaultTrialReport>& reports, const std::map<std::string, double>& asi)
{
    Table t{{"model", "method", "ber", "asi", "mean_ccr", "stderr"}, {}};
    for (const auto& r : reports)
        t.rows.push_back({r.model, r.method, fmt(r.ber), fmt(asi.at(r.model)), fmt(r.mean), fmt(r.std_error)});
    return t.str();
}

inline std::string fault_csv(const std::vector<FaultTrialReport>& reports)
{
    std::ostringstream os;
    os.imbue(std::locale::classic());
    write_fault_csv(os, reports);
    return os.str();
}

/// CCR of every selected model under both quantizers at each configured BER.
/// Trials share their seeds across models, so all models see the same
/// per-trial random stream.
inline void stage_inject(const RunDir& run, const RunConfig& cfg, const LogFn& log)
{
    if (run.complete("inject"))
        return;
    run.require({"quantize"});
    const auto d = load_data(run);
    const auto test = fault_test_set(d, cfg);
    const auto models = selected_models(run);
    std::vector<FaultTrialReport> reports;
    std::map<std::string, double> asi;
    for (const auto& m : models) {
        asi[model_name(m.id)] = m.cheap.asi;
        for (auto method : kMethods) {
            const auto qm = load_quantized(run.path(quant_file(m.id, method)).string());
            for (double ber : cfg.fault.bers) {
                FaultConfig fc;
                fc.ber = ber;
                fc.trials = cfg.fault.trials;
                fc.seed = derive_seed(cfg.seed, 0x696E6A656374);
                fc.threads = cfg.threads;
                reports.push_back(measure_ccr(qm, test, fc, model_name(m.id)));
            }
        }
        log("inject: " + model_name(m.id) + " done");
    }
    run.write("inject/ccr.csv", fault_csv(reports));
    run.write("inject/summary.csv", summary_csv(reports, asi));
    run.mark_complete("inject", {"inject/ccr.csv", "inject/summary.csv"});
}

/// Distinct ids of the named summary rows, in row order.
inline std::vector<std::uint64_t> named_ids(const std::vector<NamedModel>& named)
{
    std::vector<std::uint64_t> ids;
    for (const auto& n : named)
        if (std::find(ids.begin(), ids.end(), n.id) == ids.end())
            ids.push_back(n.id);
    return ids;
}

inline void stage_sweep(const RunDir& run, const RunConfig& cfg, const LogFn& log)
{
    if (run.complete("sweep"))
        return;
    run.require({"quantize"});
    const auto d = load_data(run);
    const auto test = fault_test_set(d, cfg);
    const auto models = selected_models(run);
    std::map<std::string, double> asi;
    for (const auto& m : models)
        asi[model_name(m.id)] = m.cheap.asi;
    std::vector<FaultTrialReport> reports;
    for (auto id : named_ids(named_models(models))) {
        for (auto method : kMethods) {
            const auto qm = load_quantized(run.path(quant_file(id, method)).string());
            FaultConfig fc;
            fc.trials = cfg.fault.sweep_trials;
            fc.seed = derive_seed(cfg.seed, 0x7377656570);
            fc.threads = cfg.threads;
            auto r = ber_sweep(qm, test, cfg.fault.sweep_bers, fc, model_name(id));
            reports.insert(reports.end(), r.begin(), r.end());
        }
        log("sweep: " + model_name(id) + " done");
    }
    run.write("sweep/ccr.csv", fault_csv(reports));
    run.write("sweep/summary.csv", summary_csv(reports, asi));
    run.mark_complete("sweep", {"sweep/ccr.csv", "sweep/summary.csv"});
}

struct FaultSummaryRow {
    std::string model, method;
    double ber = 0, asi = 0, mean = 0, std_error = 0;
};

inline std::vector<FaultSummaryRow> read_fault_summary(const RunDir& run, const std::string& rel)
{
    const auto t = Table::parse(run.read(rel));
    std::vector<FaultSummaryRow> out;
    for (const auto& r : t.rows)
        out.push_back({r[t.column("model")], r[t.column("method")], parse_double(r[t.column("ber")]),
                       parse_double(r[t.column("asi")]), parse_double(r[t.column("mean_ccr")]),
                       parse_double(r[t.column("stderr")])});
    return out;
}

/// Summary table, pairwise and regression data, sweep curves and plots; a
/// pure function of the earlier stages' files.
inline void stage_report(const RunDir& run, const RunConfig& cfg, const LogFn& log)
{
    if (run.complete("report"))
        return;
    run.require({"data", "search", "select", "retrain", "quantize", "inject", "sweep"});
    const auto models = selected_models(run);
    const auto named = named_models(models);
    const auto inject = read_fault_summary(run, "inject/summary.csv");
    const auto sweep = read_fault_summary(run, "sweep/summary.csv");
    const auto qt = Table::parse(run.read("quantize/metrics.csv"));
    std::map<std::uint64_t, std::vector<std::string>> qrow;
    for (const auto& r : qt.rows)
        qrow[std::stoull(r[0])] = r;
    std::map<std::uint64_t, ModelRow> by_id;
    for (const auto& m : models)
        by_id[m.id] = m;
    auto ccr_of = [&](std::uint64_t id, const std::string& method, double ber) {
        for (const auto& r : inject)
            if (r.model == model_name(id) && r.method == method && r.ber == ber)
                return r.mean;
        return std::nan("");
    };
    const double ref_ber = cfg.fault.bers.front();
    std::vector<std::string> outputs;
    auto emit = [&](const std::string& rel, const std::string& text) {
        run.write(rel, text);
        outputs.push_back(rel);
    };

    Table t1{{"row", "model", "val_error", "float_test_error", "minpqe_test_error", "maxrange_test_error", "asi",
              "latency_ops", "energy_transfers", "adcr", "ccr_minpqe", "ccr_maxrange", "ccr_ber"},
             {}};
    for (const auto& n : named) {
        const auto& m = by_id.at(n.id);
        const auto& q = qrow.at(n.id);
        t1.rows.push_back({n.name, model_name(n.id), fmt(m.val_error), q[qt.column("float_test_error")],
                           q[qt.column("minpqe_test_error")], q[qt.column("maxrange_test_error")], fmt(m.cheap.asi),
                           fmt(m.cheap.latency_ops), fmt(m.cheap.energy_transfers), fmt(m.cheap.adcr),
                           fmt(ccr_of(n.id, "minpqe", ref_ber)), fmt(ccr_of(n.id, "maxrange", ref_ber)), fmt(ref_ber)});
    }
    emit("report/table1.csv", t1.str());

    Table pairs{{"model", "asi", "val_error", "latency_ops", "energy_transfers", "adcr"}, {}};
    for (const auto& m : models)
        pairs.rows.push_back({model_name(m.id), fmt(m.cheap.asi), fmt(m.val_error), fmt(m.cheap.latency_ops),
                              fmt(m.cheap.energy_transfers), fmt(m.cheap.adcr)});
    emit("report/pairs.csv", pairs.str());
    const std::pair<const char*, std::function<double(const ModelRow&)>> others[] = {
        {"val_error", [](const ModelRow& m) { return m.val_error; }},
        {"latency_ops", [](const ModelRow& m) { return static_cast<double>(m.cheap.latency_ops); }},
        {"energy_transfers", [](const ModelRow& m) { return static_cast<double>(m.cheap.energy_transfers); }},
        {"adcr", [](const ModelRow& m) { return m.cheap.adcr; }},
    };
    for (const auto& [name, get] : others) {
        Series s{"selected models", {}};
        for (const auto& m : models)
            s.points.emplace_back(m.cheap.asi, get(m));
        emit(std::string("report/asi_vs_") + name + ".svg",
             svg_plot({s}, {std::string("ASI vs ") + name, "ASI", name, false, false}));
    }

    Table reg{{"method", "ber", "models", "mean_ccr", "slope", "intercept", "pearson_r", "spearman"}, {}};
    Table qcmp{{"ber", "models", "maxrange_ge_minpqe", "fraction"}, {}};
    for (double ber : cfg.fault.bers) {
        std::map<std::string, std::map<std::string, double>> by_method;
        std::map<std::string, double> asi;
        for (const auto& r : inject)
            if (r.ber == ber) {
                by_method[r.method][r.model] = r.mean;
                asi[r.model] = r.asi;
            }
        for (auto method : kMethods) {
            const std::string mname = quant_method_name(method);
            std::vector<std::pair<double, double>> pts;
            std::vector<double> xs, ys;
            double mean = 0;
            for (const auto& [model, ccr] : by_method[mname]) {
                pts.emplace_back(asi[model], ccr);
                xs.push_back(asi[model]);
                ys.push_back(ccr);
                mean += ccr;
            }
            mean /= std::max<std::size_t>(1, pts.size());
            std::vector<std::string> row{mname, fmt(ber), std::to_string(pts.size()), fmt(mean)};
            try {
                const auto g = asi_ccr_regression(pts);
                row.insert(row.end(), {fmt(g.slope), fmt(g.intercept), fmt(g.r), fmt(spearman(xs, ys))});
            } catch (const Error& e) {
                if (e.code() != Errc::DegenerateInput)
                    throw;
                row.insert(row.end(), {"nan", "nan", "nan", "nan"});
            }
            reg.rows.push_back(row);
            emit("report/asi_vs_ccr_" + mname + "_" + fmt(ber) + ".svg",
                 svg_plot({{mname, pts}}, {"ASI vs CCR at BER " + fmt(ber), "ASI", "mean CCR", false, false}));
        }
        std::size_t n = 0, ge = 0;
        for (const auto& [model, c] : by_method["minpqe"]) {
            const auto it = by_method["maxrange"].find(model);
            if (it == by_method["maxrange"].end())
                continue;
            ++n;
            ge += it->second >= c;
        }
        qcmp.rows.push_back({fmt(ber), std::to_string(n), std::to_string(ge),
                             fmt(n ? static_cast<double>(ge) / static_cast<double>(n) : std::nan(""))});
    }
    emit("report/regression.csv", reg.str());
    emit("report/quantizer_comparison.csv", qcmp.str());

    Table curves{{"row", "model", "method", "ber", "mean_ccr", "stderr"}, {}};
    for (const auto& n : named)
        for (const auto& r : sweep)
            if (r.model == model_name(n.id))
                curves.rows.push_back({n.name, r.model, r.method, fmt(r.ber), fmt(r.mean), fmt(r.std_error)});
    emit("report/sweep_curves.csv", curves.str());
    for (auto method : kMethods) {
        const std::string mname = quant_method_name(method);
        std::vector<Series> ss;
        for (const auto& n : named) {
            Series s{n.name + " (" + model_name(n.id) + ")", {}};
            for (const auto& r : sweep)
                if (r.model == model_name(n.id) && r.method == mname && r.ber > 0)
                    s.points.emplace_back(r.ber, r.mean);
            ss.push_back(std::move(s));
        }
        emit("report/sweep_" + mname + ".svg", svg_plot(ss, {"CCR vs BER (" + mname + ")", "BER", "mean CCR", true, true}));
    }
    run.mark_complete("report", outputs);
    log("report: " + std::to_string(outputs.size()) + " files in " + run.path("report").string());
}

/// Every stage in order; completed stages are skipped.
inline void run_pipeline(const RunDir& run, const RunConfig& cfg, const LogFn& log)
{
    stage_data(run, cfg, log);
    stage_search(run, cfg, log);
    stage_select(run, cfg, log);
    stage_retrain(run, cfg, log);
    stage_quantize(run, cfg, log);
    stage_inject(run, cfg, log);
    stage_sweep(run, cfg, log);
    stage_report(run, cfg, log);
}

} // namespace hwnas

#endif
