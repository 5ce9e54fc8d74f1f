#ifndef QMRI_TENSOR_IO_HPP
#define QMRI_TENSOR_IO_HPP

#include <bit>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qmri/array.hpp"
#include "qmri/neural_fields.hpp"

namespace qmri {

/// On disk: `<base>.json` (manifest) and `<base>.bin` (raw little-endian
/// float32, complex values interleaved re/im), row-major over `shape`.
struct Tensor {
    std::vector<index_t> shape;
    std::vector<std::string> axes;
    bool is_complex = false;
    std::vector<float> values;  // 2 per element when complex

    index_t elements() const {
        index_t n = 1;
        for (auto s : shape) n *= s;
        return n;
    }
};

inline constexpr int kTensorFormatVersion = 1;

namespace detail {

inline std::uint32_t to_le(std::uint32_t x) {
    if constexpr (std::endian::native == std::endian::big)
        return ((x & 0xffu) << 24) | ((x & 0xff00u) << 8) | ((x >> 8) & 0xff00u) | (x >> 24);
    return x;
}

inline std::filesystem::path with_ext(const std::filesystem::path& base, const char* ext) {
    auto p = base;
    p += ext;
    return p;
}

}  // namespace detail

inline void save_tensor(const std::filesystem::path& base, const Tensor& t) {
    if (t.axes.size() != t.shape.size()) throw std::invalid_argument("save_tensor: axes and shape differ in length");
    const index_t per = t.is_complex ? 2 : 1;
    if (static_cast<index_t>(t.values.size()) != t.elements() * per)
        throw std::invalid_argument("save_tensor: value count does not match shape");
    if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
    const auto bin = detail::with_ext(base, ".bin");
    nlohmann::ordered_json m;
    m["version"] = kTensorFormatVersion;
    m["shape"] = t.shape;
    m["axes"] = t.axes;
    m["dtype"] = t.is_complex ? "complex64" : "float32";
    m["endianness"] = "little";
    m["blob"] = bin.filename().string();
    std::ofstream mf(detail::with_ext(base, ".json"));
    if (!mf) throw std::runtime_error("save_tensor: cannot write " + detail::with_ext(base, ".json").string());
    mf << m.dump(2) << '\n';
    std::ofstream bf(bin, std::ios::binary);
    if (!bf) throw std::runtime_error("save_tensor: cannot write " + bin.string());
    for (float f : t.values) {
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        u = detail::to_le(u);
        bf.write(reinterpret_cast<const char*>(&u), 4);
    }
    if (!bf) throw std::runtime_error("save_tensor: write failed for " + bin.string());
}

inline Tensor load_tensor(const std::filesystem::path& base) {
    const auto mpath = detail::with_ext(base, ".json");
    std::ifstream mf(mpath);
    if (!mf) throw std::runtime_error("load_tensor: missing manifest " + mpath.string());
    nlohmann::json m;
    try {
        mf >> m;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_tensor: malformed manifest " + mpath.string() + ": " + e.what());
    }
    if (m.value("version", 0) != kTensorFormatVersion)
        throw std::runtime_error("load_tensor: unsupported version in " + mpath.string());
    if (m.value("endianness", "") != "little")
        throw std::runtime_error("load_tensor: unsupported endianness in " + mpath.string());
    Tensor t;
    t.shape = m.at("shape").get<std::vector<index_t>>();
    t.axes = m.at("axes").get<std::vector<std::string>>();
    const auto dtype = m.at("dtype").get<std::string>();
    if (dtype != "complex64" && dtype != "float32")
        throw std::runtime_error("load_tensor: unsupported dtype '" + dtype + "' in " + mpath.string());
    t.is_complex = dtype == "complex64";
    const auto bin = mpath.parent_path() / m.at("blob").get<std::string>();
    std::ifstream bf(bin, std::ios::binary);
    if (!bf) throw std::runtime_error("load_tensor: missing blob " + bin.string());
    const index_t n = t.elements() * (t.is_complex ? 2 : 1);
    t.values.resize(static_cast<std::size_t>(n));
    for (auto& f : t.values) {
        std::uint32_t u;
        if (!bf.read(reinterpret_cast<char*>(&u), 4)) throw std::runtime_error("load_tensor: truncated blob " + bin.string());
        u = detail::to_le(u);
        std::memcpy(&f, &u, 4);
    }
    if (bf.peek() != std::char_traits<char>::eof())
        throw std::runtime_error("load_tensor: blob " + bin.string() + " is longer than the manifest shape");
    return t;
}

inline void save_volume(const std::filesystem::path& base, const Volume<double>& v) {
    const auto d = v.dims();
    Tensor t{{d.nx, d.ny, d.nz}, {"H", "W", "D"}, false, {}};
    t.values.reserve(static_cast<std::size_t>(v.size()));
    for (double x : v) t.values.push_back(static_cast<float>(x));
    save_tensor(base, t);
}

inline Volume<double> load_volume(const std::filesystem::path& base) {
    const auto t = load_tensor(base);
    if (t.shape.size() != 3 || t.is_complex) throw std::runtime_error("load_volume: " + base.string() + " is not a real 3D volume");
    Volume<double> v({t.shape[0], t.shape[1], t.shape[2]});
    for (index_t i = 0; i < v.size(); ++i) v[i] = t.values[static_cast<std::size_t>(i)];
    return v;
}

inline void save_stack(const std::filesystem::path& base, const Stack<cplx>& s, const std::string& lead_axis) {
    const auto d = s.dims();
    Tensor t{{s.count(), d.nx, d.ny, d.nz}, {lead_axis, "H", "W", "D"}, true, {}};
    t.values.reserve(static_cast<std::size_t>(2 * s.size()));
    for (const auto& x : s.values()) {
        t.values.push_back(static_cast<float>(x.real()));
        t.values.push_back(static_cast<float>(x.imag()));
    }
    save_tensor(base, t);
}

inline Stack<cplx> load_stack(const std::filesystem::path& base) {
    const auto t = load_tensor(base);
    if (t.shape.size() != 4 || !t.is_complex)
        throw std::runtime_error("load_stack: " + base.string() + " is not a complex 4D stack");
    Stack<cplx> s({t.shape[1], t.shape[2], t.shape[3]}, t.shape[0]);
    for (index_t i = 0; i < s.size(); ++i) s[i] = {t.values[2 * i], t.values[2 * i + 1]};
    return s;
}

/// Every block is stored as one real tensor `<dir>/<name>` plus an index.
template <class S>
void save_params(const std::filesystem::path& dir, const ParamList<S>& params) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json index = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        Tensor t{{static_cast<index_t>(p.value.size())}, {"P"}, false, {}};
        t.values.assign(p.value.begin(), p.value.end());
        const std::string file = "block_" + std::to_string(i);
        save_tensor(dir / file, t);
        index.push_back({{"name", p.name}, {"file", file}, {"size", p.value.size()}});
    }
    std::ofstream f(dir / "params.json");
    if (!f) throw std::runtime_error("save_params: cannot write " + (dir / "params.json").string());
    f << index.dump(2) << '\n';
}

template <class S>
void load_params(const std::filesystem::path& dir, const ParamList<S>& params) {
    std::ifstream f(dir / "params.json");
    if (!f) throw std::runtime_error("load_params: missing " + (dir / "params.json").string());
    nlohmann::json index;
    f >> index;
    if (!index.is_array() || index.size() != params.size())
        throw std::runtime_error("load_params: block count differs from the model");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = index[i];
        if (e.at("name").get<std::string>() != params[i].name)
            throw std::runtime_error("load_params: block " + std::to_string(i) + " is '" + e.at("name").get<std::string>() +
                                     "', model expects '" + params[i].name + "'");
        const auto t = load_tensor(dir / e.at("file").get<std::string>());
        if (t.values.size() != params[i].value.size())
            throw std::runtime_error("load_params: size mismatch for block '" + params[i].name + "'");
        for (std::size_t j = 0; j < t.values.size(); ++j) params[i].value[j] = static_cast<S>(t.values[j]);
    }
}

}  // namespace qmri

#endif  // QMRI_TENSOR_IO_HPP
