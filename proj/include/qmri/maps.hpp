#ifndef QMRI_MAPS_HPP
#define QMRI_MAPS_HPP

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include "qmri/array.hpp"

namespace qmri {

enum class MapType { A, B, T1, T2, T2s, Phi0, Freq };

inline constexpr std::array<MapType, 7> kAllMapTypes{MapType::A,  MapType::B,    MapType::T1,  MapType::T2,
                                                     MapType::T2s, MapType::Phi0, MapType::Freq};

inline std::string_view map_name(MapType m) {
    switch (m) {
        case MapType::A: return "a";
        case MapType::B: return "b";
        case MapType::T1: return "t1";
        case MapType::T2: return "t2";
        case MapType::T2s: return "t2s";
        case MapType::Phi0: return "phi0";
        case MapType::Freq: return "freq";
    }
    return "?";
}

inline MapType map_from_name(std::string_view name) {
    for (auto m : kAllMapTypes)
        if (map_name(m) == name) return m;
    throw std::invalid_argument("unknown map type '" + std::string(name) + "'");
}

/// Per-voxel quantitative maps. Times in ms, phase in rad, frequency in Hz.
struct ParametricMaps {
    Volume<double> a, b, t1, t2, t2s, phi0, freq;

    ParametricMaps() = default;
    explicit ParametricMaps(Dims3 d) : a(d), b(d), t1(d), t2(d), t2s(d), phi0(d), freq(d) {}

    const Dims3& dims() const { return a.dims(); }

    Volume<double>& operator[](MapType m) {
        switch (m) {
            case MapType::A: return a;
            case MapType::B: return b;
            case MapType::T1: return t1;
            case MapType::T2: return t2;
            case MapType::T2s: return t2s;
            case MapType::Phi0: return phi0;
            case MapType::Freq: return freq;
        }
        throw std::logic_error("bad map type");
    }
    const Volume<double>& operator[](MapType m) const { return const_cast<ParametricMaps&>(*this)[m]; }
};

}  // namespace qmri

#endif  // QMRI_MAPS_HPP
