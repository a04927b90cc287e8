#ifndef HWNAS_CHECKPOINT_HPP
#define HWNAS_CHECKPOINT_HPP

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <string_view>

#include <json.hpp>

#include "hwnas/dataset.hpp"
#include "hwnas/quant.hpp"
#include "hwnas/tensor.hpp"

namespace hwnas {

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept
{
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string file_checksum(const std::string& path) { return hex64(fnv1a(detail::read_file(path))); }

namespace detail {

inline void put_u64(std::string& buf, std::uint64_t v) { buf.append(reinterpret_cast<const char*>(&v), 8); }

inline std::uint64_t get_u64(std::string_view buf, std::size_t& pos)
{
    if (pos + 8 > buf.size())
        throw Error(Errc::ParseError, "truncated file", pos);
    std::uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
}

} // namespace detail

/// Weight file: "HWNW", u32 version, u32 layer count, then per layer u32 node
/// id and u32 tensor count, per tensor u32 name length, name, u32 rank, i32
/// dims, f64 values; trailed by the FNV-1a of everything before it.
inline std::string encode_weights(const WeightStore& w)
{
    std::string buf = "HWNW";
    detail::put_u32(buf, 1);
    detail::put_u32(buf, static_cast<std::uint32_t>(w.layers.size()));
    for (const auto& [id, params] : w.layers) {
        detail::put_u32(buf, static_cast<std::uint32_t>(id));
        detail::put_u32(buf, static_cast<std::uint32_t>(params.size()));
        for (const auto& [name, t] : params) {
            detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
            buf += name;
            detail::put_u32(buf, static_cast<std::uint32_t>(t.dims.size()));
            for (int d : t.dims)
                detail::put_u32(buf, static_cast<std::uint32_t>(d));
            for (double v : t.values)
                detail::put_u64(buf, std::bit_cast<std::uint64_t>(v));
        }
    }
    detail::put_u64(buf, fnv1a(buf));
    return buf;
}

inline WeightStore decode_weights(std::string_view buf)
{
    if (buf.size() < 16 || buf.substr(0, 4) != "HWNW")
        throw Error(Errc::ParseError, "not a weight file", 0);
    std::size_t tail = buf.size() - 8;
    const std::uint64_t stored = detail::get_u64(buf, tail);
    if (stored != fnv1a(buf.substr(0, buf.size() - 8)))
        throw Error(Errc::ChecksumMismatch, "weight file checksum does not match its contents");
    const auto body = buf.substr(0, buf.size() - 8);
    std::size_t pos = 4;
    if (detail::get_u32(body, pos) != 1)
        throw Error(Errc::ParseError, "unsupported weight file version", 4);
    WeightStore w;
    const auto layers = detail::get_u32(body, pos);
    for (std::uint32_t l = 0; l < layers; ++l) {
        const NodeId id = detail::get_u32(body, pos);
        const auto count = detail::get_u32(body, pos);
        auto& params = w.layers[id];
        for (std::uint32_t t = 0; t < count; ++t) {
            const auto len = detail::get_u32(body, pos);
            if (pos + len > body.size())
                throw Error(Errc::ParseError, "truncated tensor name", pos);
            std::string name(body.substr(pos, len));
            pos += len;
            const auto rank = detail::get_u32(body, pos);
            if (rank > 8)
                throw Error(Errc::ParseError, "implausible tensor rank", pos);
            std::vector<int> dims;
            for (std::uint32_t r = 0; r < rank; ++r)
                dims.push_back(static_cast<int>(detail::get_u32(body, pos)));
            Tensor tensor(dims);
            if (pos + 8 * tensor.size() > body.size())
                throw Error(Errc::ParseError, "truncated tensor data", pos);
            for (double& v : tensor.values)
                v = std::bit_cast<double>(detail::get_u64(body, pos));
            params[name] = std::move(tensor);
        }
    }
    if (pos != body.size())
        throw Error(Errc::ParseError, "trailing bytes in weight file", pos);
    return w;
}

inline void save_weights(const std::string& path, const WeightStore& w) { detail::write_file(path, encode_weights(w)); }
inline WeightStore load_weights(const std::string& path) { return decode_weights(detail::read_file(path)); }

inline void save_graph(const std::string& path, const ArchGraph& g) { detail::write_file(path, serialize(g)); }
inline ArchGraph load_graph(const std::string& path) { return deserialize(detail::read_file(path)); }

/// log2 of a step if it is an exact power of two.
inline std::optional<int> step_exponent(double step)
{
    int e = 0;
    if (std::frexp(step, &e) == 0.5)
        return e - 1;
    return std::nullopt;
}

/// Quantized model as JSON: graph, bit width, per-node steps (with their
/// power-of-two exponents where exact) and integer tensors, plus a checksum
/// over the canonical dump of everything else.
inline std::string encode_quantized(const QuantizedModel& qm)
{
    nlohmann::ordered_json doc;
    doc["format_version"] = 1;
    doc["method"] = quant_method_name(qm.method);
    doc["bits"] = qm.format.bits;
    doc["graph"] = to_json(qm.graph);
    auto step_json = [](double s) {
        nlohmann::ordered_json j;
        j["step"] = s;
        if (auto e = step_exponent(s))
            j["exponent"] = *e;
        return j;
    };
    auto& acts = doc["activations"] = nlohmann::ordered_json::array();
    for (const auto& [id, s] : qm.format.act_step) {
        auto j = step_json(s);
        j["node"] = id;
        acts.push_back(j);
    }
    auto& layers = doc["layers"] = nlohmann::ordered_json::array();
    for (const auto& [id, tensors] : qm.codes) {
        nlohmann::ordered_json l;
        l["node"] = id;
        l["weight"] = step_json(qm.format.weight_step.at(id));
        l["bias"] = step_json(qm.format.bias_step.at(id));
        auto& ts = l["tensors"] = nlohmann::ordered_json::object();
        for (const auto& [name, codes] : tensors) {
            ts[name]["dims"] = qm.weights.at(id, name).dims;
            ts[name]["codes"] = codes;
        }
        layers.push_back(l);
    }
    doc["checksum"] = hex64(fnv1a(doc.dump()));
    return doc.dump(1) + "\n";
}

inline QuantizedModel decode_quantized(std::string_view bytes)
{
    nlohmann::ordered_json doc;
    try {
        doc = nlohmann::ordered_json::parse(bytes);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(Errc::ParseError, e.what(), e.byte);
    }
    try {
        const std::string sum = doc.at("checksum").get<std::string>();
        doc.erase("checksum");
        if (sum != hex64(fnv1a(doc.dump())))
            throw Error(Errc::ChecksumMismatch, "quantized model checksum does not match its contents");
        if (doc.at("format_version").get<int>() != 1)
            throw Error(Errc::ParseError, "unsupported quantized model version");
        QuantizedModel qm;
        qm.method = parse_quant_method(doc.at("method").get<std::string>());
        qm.format.bits = doc.at("bits").get<int>();
        check_bits(qm.format.bits);
        qm.graph = from_json(nlohmann::json::parse(doc.at("graph").dump()));
        for (const auto& a : doc.at("activations"))
            qm.format.act_step[a.at("node").get<NodeId>()] = a.at("step").get<double>();
        for (const auto& l : doc.at("layers")) {
            const NodeId id = l.at("node").get<NodeId>();
            qm.format.weight_step[id] = l.at("weight").at("step").get<double>();
            qm.format.bias_step[id] = l.at("bias").at("step").get<double>();
        }
        for (const auto& l : doc.at("layers")) {
            const NodeId id = l.at("node").get<NodeId>();
            const auto& n = qm.graph.node(id);
            for (const auto& [name, t] : l.at("tensors").items()) {
                Tensor tensor(t.at("dims").get<std::vector<int>>());
                auto codes = t.at("codes").get<std::vector<std::int64_t>>();
                if (codes.size() != tensor.size())
                    throw Error(Errc::ParseError, "tensor '" + name + "' has the wrong number of codes");
                const double step = name == bias_name(n) ? qm.format.bias_step.at(id) : qm.format.weight_step.at(id);
                for (std::size_t i = 0; i < codes.size(); ++i)
                    tensor[i] = static_cast<double>(codes[i]) * step;
                qm.weights.layers[id][name] = std::move(tensor);
                qm.codes[id][name] = std::move(codes);
            }
        }
        return qm;
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::ParseError, std::string("malformed quantized model: ") + e.what());
    }
}

inline void save_quantized(const std::string& path, const QuantizedModel& qm)
{
    detail::write_file(path, encode_quantized(qm));
}
inline QuantizedModel load_quantized(const std::string& path) { return decode_quantized(detail::read_file(path)); }

} // namespace hwnas

#endif
