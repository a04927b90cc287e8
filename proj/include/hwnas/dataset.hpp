#ifndef HWNAS_DATASET_HPP
#define HWNAS_DATASET_HPP

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hwnas/archgraph.hpp"
#include "hwnas/error.hpp"
#include "hwnas/random.hpp"

namespace hwnas {

/// Labelled image set, samples stored [n][c][h][w].
struct Dataset {
    Shape shape;
    int num_classes = 0;
    std::vector<double> values;
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::span<const double> sample(std::size_t i) const { return {values.data() + i * shape.size(), shape.size()}; }

    /// Subset in the given index order.
    Dataset subset(std::span<const std::size_t> idx) const
    {
        Dataset d{shape, num_classes, {}, {}};
        d.values.reserve(idx.size() * shape.size());
        for (std::size_t i : idx) {
            auto s = sample(i);
            d.values.insert(d.values.end(), s.begin(), s.end());
            d.labels.push_back(labels[i]);
        }
        return d;
    }

    Dataset head(std::size_t n) const
    {
        std::vector<std::size_t> idx(std::min(n, size()));
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        return subset(idx);
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct SyntheticSpec {
    int height = 16;
    int width = 16;
    double noise = 0.15;   ///< std of additive Gaussian pixel noise
    int distractors = 3;   ///< random bright pixels per image
};

inline constexpr int kSyntheticClasses = 4;

/// Procedural single-channel shape images with four classes: horizontal bar,
/// vertical bar, diagonal stroke and hollow box. Pixel values lie in [0, 1].
inline Dataset make_synthetic(std::size_t count, std::uint64_t seed, const SyntheticSpec& spec = {})
{
    if (spec.height < 8 || spec.width < 8)
        throw Error(Errc::InvalidArgument, "synthetic images need at least 8x8 pixels");
    Rng rng(seed);
    Dataset d{{1, spec.height, spec.width}, kSyntheticClasses, {}, {}};
    d.values.assign(count * d.shape.size(), 0.0);
    d.labels.resize(count);
    const int H = spec.height, W = spec.width;
    for (std::size_t s = 0; s < count; ++s) {
        const int label = static_cast<int>(s % kSyntheticClasses); // balanced classes
        d.labels[s] = label;
        double* img = d.values.data() + s * d.shape.size();
        auto put = [&](int y, int x, double v) {
            if (y >= 0 && y < H && x >= 0 && x < W)
                img[y * W + x] = std::max(img[y * W + x], v);
        };
        const double ink = uniform(rng, 0.55, 1.0);
        const int len = 4 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(std::min(H, W) / 2)));
        const int y0 = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(H)));
        const int x0 = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(W)));
        switch (label) {
        case 0:
            for (int i = 0; i < len; ++i)
                put(y0, x0 - len / 2 + i, ink);
            break;
        case 1:
            for (int i = 0; i < len; ++i)
                put(y0 - len / 2 + i, x0, ink);
            break;
        case 2: {
            const int dir = uniform_index(rng, 2) == 0 ? 1 : -1;
            for (int i = 0; i < len; ++i)
                put(y0 - len / 2 + i, x0 + dir * (i - len / 2), ink);
            break;
        }
        default: {
            const int side = 3 + static_cast<int>(uniform_index(rng, 4));
            const int top = y0 - side / 2, left = x0 - side / 2;
            for (int i = 0; i <= side; ++i) {
                put(top, left + i, ink);
                put(top + side, left + i, ink);
                put(top + i, left, ink);
                put(top + i, left + side, ink);
            }
            break;
        }
        }
        for (int k = 0; k < spec.distractors; ++k)
            put(static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(H))),
                static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(W))), uniform(rng, 0.3, 0.9));
        for (std::size_t i = 0; i < d.shape.size(); ++i)
            img[i] = std::clamp(img[i] + spec.noise * normal(rng), 0.0, 1.0);
    }
    return d;
}

// ---------------------------------------------------------------------------
// Binary dataset file: "HWND", u32 version, u32 count, u32 channels,
// u32 height, u32 width, u32 classes, f32 values[count*c*h*w], u32 labels[count].
// All fields little-endian.

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace detail {
inline void put_u32(std::string& buf, std::uint32_t v) { buf.append(reinterpret_cast<const char*>(&v), 4); }

inline std::uint32_t get_u32(std::string_view buf, std::size_t& pos)
{
    if (pos + 4 > buf.size())
        throw Error(Errc::ParseError, "truncated file", pos);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
}

inline std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(Errc::IoError, "cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes through a temporary file and a rename, so readers never see a partial file.
inline void write_file(const std::string& path, std::string_view bytes)
{
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw Error(Errc::IoError, "cannot write " + path);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw Error(Errc::IoError, "write failed for " + path);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        throw Error(Errc::IoError, "cannot move " + tmp + " to " + path + ": " + ec.message());
}
} // namespace detail

inline std::string encode_dataset(const Dataset& d)
{
    std::string buf = "HWND";
    detail::put_u32(buf, 1);
    detail::put_u32(buf, static_cast<std::uint32_t>(d.size()));
    detail::put_u32(buf, static_cast<std::uint32_t>(d.shape.channels));
    detail::put_u32(buf, static_cast<std::uint32_t>(d.shape.height));
    detail::put_u32(buf, static_cast<std::uint32_t>(d.shape.width));
    detail::put_u32(buf, static_cast<std::uint32_t>(d.num_classes));
    for (double v : d.values) {
        const float f = static_cast<float>(v);
        buf.append(reinterpret_cast<const char*>(&f), 4);
    }
    for (int l : d.labels)
        detail::put_u32(buf, static_cast<std::uint32_t>(l));
    return buf;
}

inline Dataset decode_dataset(std::string_view buf)
{
    if (buf.size() < 4 || buf.substr(0, 4) != "HWND")
        throw Error(Errc::ParseError, "not a dataset file", 0);
    std::size_t pos = 4;
    if (detail::get_u32(buf, pos) != 1)
        throw Error(Errc::ParseError, "unsupported dataset version", 4);
    const auto count = detail::get_u32(buf, pos);
    Dataset d;
    d.shape.channels = static_cast<int>(detail::get_u32(buf, pos));
    d.shape.height = static_cast<int>(detail::get_u32(buf, pos));
    d.shape.width = static_cast<int>(detail::get_u32(buf, pos));
    d.num_classes = static_cast<int>(detail::get_u32(buf, pos));
    const std::size_t n_values = static_cast<std::size_t>(count) * d.shape.size();
    if (buf.size() != pos + 4 * n_values + 4 * static_cast<std::size_t>(count))
        throw Error(Errc::ParseError, "dataset payload size does not match header", pos);
    d.values.resize(n_values);
    for (std::size_t i = 0; i < n_values; ++i) {
        float f;
        std::memcpy(&f, buf.data() + pos, 4);
        pos += 4;
        d.values[i] = f;
    }
    d.labels.resize(count);
    for (auto& l : d.labels) {
        l = static_cast<int>(detail::get_u32(buf, pos));
        if (l < 0 || l >= d.num_classes)
            throw Error(Errc::ParseError, "label out of range", pos - 4);
    }
    return d;
}

inline void save_dataset(const Dataset& d, const std::string& path) { detail::write_file(path, encode_dataset(d)); }
inline Dataset load_dataset(const std::string& path) { return decode_dataset(detail::read_file(path)); }

} // namespace hwnas

#endif // HWNAS_DATASET_HPP
