#ifndef HWNAS_ARCHGRAPH_HPP
#define HWNAS_ARCHGRAPH_HPP

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <queue>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "hwnas/error.hpp"

namespace hwnas {

using NodeId = std::uint32_t;

/// Activation tensor shape of a single sample, channel-major.
struct Shape {
    int channels = 0;
    int height = 0;
    int width = 0;

    std::size_t size() const noexcept
    {
        return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    }
    std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
    friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s)
{
    return "(" + std::to_string(s.channels) + "," + std::to_string(s.height) + "," + std::to_string(s.width) + ")";
}

struct InputLayer {
    int height = 0;
    int width = 0;
    int channels = 0;
    friend bool operator==(const InputLayer&, const InputLayer&) = default;
};

/// SAME-padded, stride-1 convolution. With `separable` set it is a depthwise
/// kernel_h x kernel_w stage followed by a pointwise in->out stage.
struct ConvLayer {
    int kernel_h = 3;
    int kernel_w = 3;
    int out_channels = 0;
    bool separable = false;
    friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

/// Global average pool followed by a dense layer producing the logits.
struct DenseHead {
    int num_classes = 0;
    friend bool operator==(const DenseHead&, const DenseHead&) = default;
};

struct AddMerge {
    friend bool operator==(const AddMerge&, const AddMerge&) = default;
};

struct ConcatMerge {
    friend bool operator==(const ConcatMerge&, const ConcatMerge&) = default;
};

using LayerKind = std::variant<InputLayer, ConvLayer, DenseHead, AddMerge, ConcatMerge>;

enum class Activation { None, ReLU };

/// Pool factor 4 means a 2x2 max-pool attached to the layer output.
inline constexpr int kMaxPoolFactor = 4;

struct LayerNode {
    NodeId id = 0;
    LayerKind kind;
    bool batchnorm = false;
    Activation activation = Activation::None;
    int pool_factor = 1;
    std::vector<NodeId> preds;

    bool is_input() const noexcept { return std::holds_alternative<InputLayer>(kind); }
    bool is_conv() const noexcept { return std::holds_alternative<ConvLayer>(kind); }
    bool is_head() const noexcept { return std::holds_alternative<DenseHead>(kind); }
    bool is_add() const noexcept { return std::holds_alternative<AddMerge>(kind); }
    bool is_concat() const noexcept { return std::holds_alternative<ConcatMerge>(kind); }
    bool is_merge() const noexcept { return is_add() || is_concat(); }
    /// Layers that own trainable parameters.
    bool is_weighted() const noexcept { return is_conv() || is_head(); }

    const ConvLayer& conv() const { return std::get<ConvLayer>(kind); }
    ConvLayer& conv() { return std::get<ConvLayer>(kind); }

    friend bool operator==(const LayerNode&, const LayerNode&) = default;
};

/// Per-layer counters used by every hardware objective.
struct LayerCosts {
    std::uint64_t n_inputs = 0;
    std::uint64_t n_outputs = 0;
    std::uint64_t n_params = 0;
    std::uint64_t n_op = 0;
    friend bool operator==(const LayerCosts&, const LayerCosts&) = default;
};

namespace detail {

inline Shape conv_output(const LayerNode& n, const Shape& in)
{
    const auto& c = n.conv();
    if (c.kernel_h < 1 || c.kernel_w < 1 || c.kernel_h % 2 == 0 || c.kernel_w % 2 == 0)
        throw Error(Errc::InvalidArgument, "node " + std::to_string(n.id) + ": SAME padding needs odd kernel sizes");
    if (c.out_channels < 1)
        throw Error(Errc::InvalidArgument, "node " + std::to_string(n.id) + ": out_channels must be positive");
    return {c.out_channels, in.height, in.width};
}

inline Shape apply_pool(const LayerNode& n, Shape s)
{
    if (n.pool_factor == 1)
        return s;
    if (s.height % 2 != 0 || s.width % 2 != 0)
        throw Error(Errc::ShapeMismatch,
                    "node " + std::to_string(n.id) + ": 2x2 max-pool needs even spatial dims, got " + to_string(s));
    return {s.channels, s.height / 2, s.width / 2};
}

} // namespace detail

/// Immutable DAG of layers. Construction validates structure and infers every
/// output shape; an ArchGraph that exists is always well formed.
class ArchGraph {
public:
    ArchGraph() = default;

    ArchGraph(std::vector<LayerNode> nodes, NodeId input_id, NodeId output_id)
        : input_id_(input_id), output_id_(output_id)
    {
        for (auto& n : nodes) {
            const NodeId id = n.id;
            if (!nodes_.emplace(id, std::move(n)).second)
                throw Error(Errc::InvalidArgument, "duplicate node id " + std::to_string(id));
        }
        validate();
    }

    NodeId input_id() const noexcept { return input_id_; }
    NodeId output_id() const noexcept { return output_id_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    bool empty() const noexcept { return nodes_.empty(); }

    const std::map<NodeId, LayerNode>& nodes() const noexcept { return nodes_; }
    bool contains(NodeId id) const noexcept { return nodes_.count(id) != 0; }

    const LayerNode& node(NodeId id) const
    {
        auto it = nodes_.find(id);
        if (it == nodes_.end())
            throw Error(Errc::UnknownNode, "node " + std::to_string(id));
        return it->second;
    }

    /// Topological order; ties resolved by ascending id.
    const std::vector<NodeId>& order() const noexcept { return order_; }

    /// Output shape after activation and pooling.
    const Shape& shape(NodeId id) const
    {
        auto it = shapes_.find(id);
        if (it == shapes_.end())
            throw Error(Errc::UnknownNode, "node " + std::to_string(id));
        return it->second;
    }

    /// Consumers of a node, ascending id.
    const std::vector<NodeId>& successors(NodeId id) const
    {
        auto it = succ_.find(id);
        if (it == succ_.end())
            throw Error(Errc::UnknownNode, "node " + std::to_string(id));
        return it->second;
    }

    /// Shape seen by a layer at its input. Concat inputs are stacked along channels.
    Shape input_shape(NodeId id) const
    {
        const auto& n = node(id);
        if (n.preds.empty())
            return shape(id);
        Shape s = shape(n.preds.front());
        if (n.is_concat())
            s.channels = shape(n.preds[0]).channels + shape(n.preds[1]).channels;
        return s;
    }

    NodeId next_free_id() const noexcept { return nodes_.empty() ? 0 : nodes_.rbegin()->first + 1; }

    /// Copy of all nodes, ready for editing and rebuilding.
    std::vector<LayerNode> node_list() const
    {
        std::vector<LayerNode> out;
        out.reserve(nodes_.size());
        for (const auto& [id, n] : nodes_)
            out.push_back(n);
        return out;
    }

    /// True if `from` reaches `to` along directed edges (a node reaches itself).
    bool reaches(NodeId from, NodeId to) const
    {
        std::vector<NodeId> stack{from};
        std::set<NodeId> seen;
        while (!stack.empty()) {
            NodeId cur = stack.back();
            stack.pop_back();
            if (cur == to)
                return true;
            if (!seen.insert(cur).second)
                continue;
            for (NodeId s : successors(cur))
                stack.push_back(s);
        }
        return false;
    }

    friend bool operator==(const ArchGraph& a, const ArchGraph& b)
    {
        return a.input_id_ == b.input_id_ && a.output_id_ == b.output_id_ && a.nodes_ == b.nodes_;
    }

private:
    void validate()
    {
        if (nodes_.empty())
            throw Error(Errc::EmptyGraph, "graph has no nodes");
        if (!contains(input_id_))
            throw Error(Errc::UnknownNode, "input node " + std::to_string(input_id_));
        if (!contains(output_id_))
            throw Error(Errc::UnknownNode, "output node " + std::to_string(output_id_));

        for (auto& [id, n] : nodes_) {
            succ_[id];
            const std::string where = "node " + std::to_string(id);
            if (n.is_input() != (id == input_id_))
                throw Error(Errc::InvalidArgument, where + ": exactly one input node, which must be the designated one");
            std::size_t want = n.is_input() ? 0 : n.is_merge() ? 2 : 1;
            if (n.preds.size() != want)
                throw Error(Errc::InvalidArgument, where + ": expected " + std::to_string(want) + " predecessors");
            if (n.pool_factor != 1 && n.pool_factor != kMaxPoolFactor)
                throw Error(Errc::InvalidArgument, where + ": pool factor must be 1 or 4");
            if (n.pool_factor != 1 && !n.is_conv())
                throw Error(Errc::InvalidArgument, where + ": only convolutions carry a max-pool attachment");
            if (n.batchnorm && !n.is_conv())
                throw Error(Errc::InvalidArgument, where + ": only convolutions carry batch normalization");
            if (n.is_merge() && n.preds[0] == n.preds[1])
                throw Error(Errc::InvalidArgument, where + ": merge inputs must be distinct nodes");
            if ((n.is_input() || n.is_head() || n.is_concat()) && n.activation != Activation::None)
                throw Error(Errc::InvalidArgument, where + ": activation not allowed on this layer kind");
            if (n.is_head() && std::get<DenseHead>(n.kind).num_classes < 1)
                throw Error(Errc::InvalidArgument, where + ": num_classes must be positive");
            if (n.is_input()) {
                const auto& in = std::get<InputLayer>(n.kind);
                if (in.height < 1 || in.width < 1 || in.channels < 1)
                    throw Error(Errc::InvalidArgument, where + ": input dims must be positive");
            }
        }
        for (auto& [id, n] : nodes_) {
            for (NodeId p : n.preds) {
                if (!contains(p))
                    throw Error(Errc::UnknownNode, "node " + std::to_string(id) + " references missing predecessor " +
                                                       std::to_string(p));
                succ_[p].push_back(id);
            }
        }
        for (auto& [id, s] : succ_)
            std::sort(s.begin(), s.end());

        // Kahn's algorithm with a min-heap keeps the order deterministic.
        std::map<NodeId, std::size_t> indeg;
        for (auto& [id, n] : nodes_)
            indeg[id] = n.preds.size();
        std::priority_queue<NodeId, std::vector<NodeId>, std::greater<>> ready;
        for (auto& [id, d] : indeg)
            if (d == 0)
                ready.push(id);
        while (!ready.empty()) {
            NodeId cur = ready.top();
            ready.pop();
            order_.push_back(cur);
            for (NodeId s : succ_[cur])
                if (--indeg[s] == 0)
                    ready.push(s);
        }
        if (order_.size() != nodes_.size())
            throw Error(Errc::CycleDetected, "graph contains a cycle");

        for (auto& [id, n] : nodes_) {
            if (id != output_id_ && succ_[id].empty())
                throw Error(Errc::InvalidArgument, "node " + std::to_string(id) + " has no consumer and is not the output");
        }
        if (!succ_[output_id_].empty())
            throw Error(Errc::InvalidArgument, "output node must not have consumers");

        for (NodeId id : order_)
            shapes_[id] = infer_node(nodes_.at(id));
    }

    Shape infer_node(const LayerNode& n) const
    {
        const std::string where = "node " + std::to_string(n.id);
        return std::visit(
            [&](const auto& k) -> Shape {
                using K = std::decay_t<decltype(k)>;
                if constexpr (std::is_same_v<K, InputLayer>) {
                    return {k.channels, k.height, k.width};
                } else if constexpr (std::is_same_v<K, ConvLayer>) {
                    return detail::apply_pool(n, detail::conv_output(n, shapes_.at(n.preds[0])));
                } else if constexpr (std::is_same_v<K, DenseHead>) {
                    return {k.num_classes, 1, 1};
                } else if constexpr (std::is_same_v<K, AddMerge>) {
                    const Shape& a = shapes_.at(n.preds[0]);
                    const Shape& b = shapes_.at(n.preds[1]);
                    if (!(a == b))
                        throw Error(Errc::ShapeMismatch, where + ": add inputs " + to_string(a) + " and " + to_string(b));
                    return a;
                } else {
                    const Shape& a = shapes_.at(n.preds[0]);
                    const Shape& b = shapes_.at(n.preds[1]);
                    if (a.height != b.height || a.width != b.width)
                        throw Error(Errc::ShapeMismatch,
                                    where + ": concat inputs " + to_string(a) + " and " + to_string(b));
                    return {a.channels + b.channels, a.height, a.width};
                }
            },
            n.kind);
    }

    std::map<NodeId, LayerNode> nodes_;
    NodeId input_id_ = 0;
    NodeId output_id_ = 0;
    std::vector<NodeId> order_;
    std::map<NodeId, Shape> shapes_;
    std::map<NodeId, std::vector<NodeId>> succ_;
};

/// Output shape of every node (post-activation, post-pool).
inline std::map<NodeId, Shape> infer_shapes(const ArchGraph& g)
{
    std::map<NodeId, Shape> out;
    for (NodeId id : g.order())
        out.emplace(id, g.shape(id));
    return out;
}

/// Counters for one layer. A MAC counts as two operations; BN scale and shift
/// count as parameters; running statistics do not.
inline LayerCosts layer_costs(const ArchGraph& g, NodeId id)
{
    const LayerNode& n = g.node(id);
    LayerCosts c;
    const Shape out = g.shape(id);
    c.n_outputs = out.size();
    if (n.is_input())
        return c;
    for (NodeId p : n.preds)
        c.n_inputs += g.shape(p).size();

    const Shape in = g.input_shape(id);
    if (n.is_conv()) {
        const auto& k = n.conv();
        const std::uint64_t cin = static_cast<std::uint64_t>(in.channels);
        const std::uint64_t cout = static_cast<std::uint64_t>(k.out_channels);
        const std::uint64_t taps = static_cast<std::uint64_t>(k.kernel_h) * static_cast<std::uint64_t>(k.kernel_w);
        const std::uint64_t plane = in.plane(); // stride 1, SAME: pre-pool plane equals input plane
        if (k.separable) {
            c.n_params = taps * cin + cin * cout + cout;
            c.n_op = 2 * (taps * cin + cin * cout) * plane;
        } else {
            c.n_params = taps * cin * cout + cout;
            c.n_op = 2 * taps * cin * cout * plane;
        }
        if (n.batchnorm)
            c.n_params += 2 * cout;
    } else if (n.is_head()) {
        const std::uint64_t cin = static_cast<std::uint64_t>(in.channels);
        const std::uint64_t k = static_cast<std::uint64_t>(std::get<DenseHead>(n.kind).num_classes);
        c.n_params = cin * k + k;
        c.n_op = in.size() + 2 * cin * k; // average-pool accumulation + dense MACs
    } else if (n.is_add()) {
        c.n_op = out.size();
    }
    // Concat: address remapping only, no parameters and no operations.
    return c;
}

// ---------------------------------------------------------------------------
// Interchange format

inline constexpr int kArchSchemaVersion = 1;

inline std::string activation_name(Activation a) { return a == Activation::ReLU ? "relu" : "none"; }

inline nlohmann::ordered_json to_json(const ArchGraph& g)
{
    nlohmann::ordered_json doc;
    doc["schema_version"] = kArchSchemaVersion;
    doc["input_id"] = g.input_id();
    doc["output_id"] = g.output_id();
    auto& arr = doc["nodes"] = nlohmann::ordered_json::array();
    for (const auto& [id, n] : g.nodes()) {
        nlohmann::ordered_json j;
        j["id"] = id;
        std::visit(
            [&](const auto& k) {
                using K = std::decay_t<decltype(k)>;
                if constexpr (std::is_same_v<K, InputLayer>) {
                    j["kind"] = "input";
                    j["height"] = k.height;
                    j["width"] = k.width;
                    j["channels"] = k.channels;
                } else if constexpr (std::is_same_v<K, ConvLayer>) {
                    j["kind"] = "conv";
                    j["kernel"] = {k.kernel_h, k.kernel_w};
                    j["out_channels"] = k.out_channels;
                    j["separable"] = k.separable;
                } else if constexpr (std::is_same_v<K, DenseHead>) {
                    j["kind"] = "head";
                    j["num_classes"] = k.num_classes;
                } else if constexpr (std::is_same_v<K, AddMerge>) {
                    j["kind"] = "add";
                } else {
                    j["kind"] = "concat";
                }
            },
            n.kind);
        j["batchnorm"] = n.batchnorm;
        j["activation"] = activation_name(n.activation);
        j["pool"] = n.pool_factor;
        j["preds"] = n.preds;
        arr.push_back(std::move(j));
    }
    return doc;
}

inline std::string serialize(const ArchGraph& g) { return to_json(g).dump(1) + "\n"; }

namespace detail {

template <typename T>
T field(const nlohmann::json& j, const char* key, const std::string& path)
{
    if (!j.is_object() || !j.contains(key))
        throw Error(Errc::ParseError, path + "." + key + ": missing");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw Error(Errc::ParseError, path + "." + key + ": wrong type");
    }
}

} // namespace detail

inline ArchGraph from_json(const nlohmann::json& doc)
{
    using detail::field;
    if (field<int>(doc, "schema_version", "$") != kArchSchemaVersion)
        throw Error(Errc::ParseError, "$.schema_version: unsupported version");
    const auto& arr = doc.at("nodes");
    if (!arr.is_array())
        throw Error(Errc::ParseError, "$.nodes: expected array");
    std::vector<LayerNode> nodes;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const auto& j = arr[i];
        const std::string path = "$.nodes[" + std::to_string(i) + "]";
        LayerNode n;
        n.id = field<NodeId>(j, "id", path);
        const auto kind = field<std::string>(j, "kind", path);
        if (kind == "input") {
            n.kind = InputLayer{field<int>(j, "height", path), field<int>(j, "width", path),
                                field<int>(j, "channels", path)};
        } else if (kind == "conv") {
            auto kernel = field<std::vector<int>>(j, "kernel", path);
            if (kernel.size() != 2)
                throw Error(Errc::ParseError, path + ".kernel: expected [h, w]");
            n.kind = ConvLayer{kernel[0], kernel[1], field<int>(j, "out_channels", path),
                               field<bool>(j, "separable", path)};
        } else if (kind == "head") {
            n.kind = DenseHead{field<int>(j, "num_classes", path)};
        } else if (kind == "add") {
            n.kind = AddMerge{};
        } else if (kind == "concat") {
            n.kind = ConcatMerge{};
        } else {
            throw Error(Errc::ParseError, path + ".kind: unknown layer kind '" + kind + "'");
        }
        n.batchnorm = field<bool>(j, "batchnorm", path);
        const auto act = field<std::string>(j, "activation", path);
        if (act != "relu" && act != "none")
            throw Error(Errc::ParseError, path + ".activation: unknown activation '" + act + "'");
        n.activation = act == "relu" ? Activation::ReLU : Activation::None;
        n.pool_factor = field<int>(j, "pool", path);
        n.preds = field<std::vector<NodeId>>(j, "preds", path);
        nodes.push_back(std::move(n));
    }
    return ArchGraph(std::move(nodes), field<NodeId>(doc, "input_id", "$"), field<NodeId>(doc, "output_id", "$"));
}

inline ArchGraph deserialize(std::string_view bytes)
{
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(Errc::ParseError, "malformed architecture document", e.byte);
    }
    return from_json(doc);
}

// ---------------------------------------------------------------------------
// Builders

/// Convenience builder for hand-written graphs in tests and tools.
class GraphBuilder {
public:
    GraphBuilder(int height, int width, int channels)
    {
        LayerNode in;
        in.id = next_++;
        in.kind = InputLayer{height, width, channels};
        input_ = in.id;
        nodes_.push_back(std::move(in));
    }

    NodeId input() const noexcept { return input_; }

    NodeId conv(NodeId pred, int kernel, int out_channels, bool bn = true, bool relu = true, bool pool = false,
                bool separable = false)
    {
        LayerNode n;
        n.id = next_++;
        n.kind = ConvLayer{kernel, kernel, out_channels, separable};
        n.batchnorm = bn;
        n.activation = relu ? Activation::ReLU : Activation::None;
        n.pool_factor = pool ? kMaxPoolFactor : 1;
        n.preds = {pred};
        nodes_.push_back(std::move(n));
        return nodes_.back().id;
    }

    NodeId add(NodeId a, NodeId b, bool relu = true)
    {
        LayerNode n;
        n.id = next_++;
        n.kind = AddMerge{};
        n.activation = relu ? Activation::ReLU : Activation::None;
        n.preds = {a, b};
        nodes_.push_back(std::move(n));
        return nodes_.back().id;
    }

    NodeId concat(NodeId a, NodeId b)
    {
        LayerNode n;
        n.id = next_++;
        n.kind = ConcatMerge{};
        n.preds = {a, b};
        nodes_.push_back(std::move(n));
        return nodes_.back().id;
    }

    NodeId head(NodeId pred, int num_classes)
    {
        LayerNode n;
        n.id = next_++;
        n.kind = DenseHead{num_classes};
        n.preds = {pred};
        nodes_.push_back(std::move(n));
        return nodes_.back().id;
    }

    /// Builds with `output` as the designated output node.
    ArchGraph build(NodeId output) const { return ArchGraph(nodes_, input_, output); }
    ArchGraph build() const { return build(nodes_.back().id); }

private:
    std::vector<LayerNode> nodes_;
    NodeId input_ = 0;
    NodeId next_ = 0;
};

} // namespace hwnas

#endif // HWNAS_ARCHGRAPH_HPP
