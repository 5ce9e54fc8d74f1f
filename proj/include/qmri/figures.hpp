#ifndef QMRI_FIGURES_HPP
#define QMRI_FIGURES_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qmri/experiment.hpp"

namespace qmri {

using Rgb = std::array<int, 3>;

inline Rgb gray_color(double v, double lo, double hi) {
    const double t = hi > lo ? std::clamp((v - lo) / (hi - lo), 0.0, 1.0) : 0.0;
    const int g = static_cast<int>(std::lround(255.0 * t));
    return {g, g, g};
}

/// Blue (negative) through white (zero) to red (positive), symmetric about 0.
inline Rgb diverging_color(double v, double limit) {
    const double t = limit > 0 ? std::clamp(v / limit, -1.0, 1.0) : 0.0;
    const int fade = static_cast<int>(std::lround(255.0 * (1.0 - std::abs(t))));
    if (t >= 0) return {255, fade, fade};
    return {fade, fade, 255};
}

/// One image tile: a 2D slice (row-major, ny rows of nx) and its colour scale.
struct Panel {
    std::string title;
    std::string caption;
    index_t nx = 0, ny = 0;
    std::vector<double> values;
    bool diverging = false;
    double lo = 0.0, hi = 1.0;  // diverging panels use [-hi, hi]

    Rgb color(index_t x, index_t y) const {
        const double v = values[static_cast<std::size_t>(y * nx + x)];
        return diverging ? diverging_color(v, hi) : gray_color(v, lo, hi);
    }
};

struct Figure {
    std::string title;
    std::vector<std::vector<Panel>> rows;
};

namespace detail {

inline std::string hex(const Rgb& c) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        switch (ch) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += ch;
        }
    }
    return out;
}

inline std::string fmt(double x, const char* f = "%.4g") {
    char buf[32];
    std::snprintf(buf, sizeof buf, f, x);
    return buf;
}

/// Middle axial slice, masked; x along the first axis.
inline Panel slice_panel(const Volume<double>& v, const Volume<std::uint8_t>& mask, std::optional<ClampRange> clamp) {
    const auto d = v.dims();
    const index_t z = d.nz / 2;
    Panel p;
    p.nx = d.nx;
    p.ny = d.ny;
    p.values.resize(static_cast<std::size_t>(d.nx * d.ny));
    for (index_t y = 0; y < d.ny; ++y)
        for (index_t x = 0; x < d.nx; ++x) {
            double val = mask(x, y, z) ? v(x, y, z) : 0.0;
            if (clamp) val = std::clamp(val, clamp->first, clamp->second);
            p.values[static_cast<std::size_t>(y * d.nx + x)] = val;
        }
    return p;
}

}  // namespace detail

inline std::string render_svg(const Figure& fig, int pixel = 3) {
    constexpr int pad = 10, title_h = 24, head_h = 16, cap_h = 30, bar_w = 10;
    int cols = 0;
    index_t tile_w = 0, tile_h = 0;
    for (const auto& row : fig.rows) {
        cols = std::max(cols, static_cast<int>(row.size()));
        for (const auto& p : row) {
            tile_w = std::max(tile_w, p.nx);
            tile_h = std::max(tile_h, p.ny);
        }
    }
    const int cell_w = static_cast<int>(tile_w) * pixel + bar_w + 3 * pad;
    const int cell_h = head_h + static_cast<int>(tile_h) * pixel + cap_h;
    const int width = pad + cols * cell_w;
    const int height = title_h + static_cast<int>(fig.rows.size()) * (cell_h + pad) + pad;
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) + "\" height=\"" +
         std::to_string(height) + "\" font-family=\"sans-serif\" shape-rendering=\"crispEdges\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
    s += "<text x=\"" + std::to_string(pad) + "\" y=\"17\" font-size=\"14\">" + detail::xml_escape(fig.title) + "</text>\n";
    for (std::size_t r = 0; r < fig.rows.size(); ++r)
        for (std::size_t c = 0; c < fig.rows[r].size(); ++c) {
            const auto& p = fig.rows[r][c];
            if (p.nx == 0) continue;
            const int x0 = pad + static_cast<int>(c) * cell_w;
            const int y0 = title_h + static_cast<int>(r) * (cell_h + pad);
            s += "<text x=\"" + std::to_string(x0) + "\" y=\"" + std::to_string(y0 + 12) + "\" font-size=\"11\">" +
                 detail::xml_escape(p.title) + "</text>\n";
            s += "<g class=\"" + std::string(p.diverging ? "error" : "map") + "\">\n";
            const int iy = y0 + head_h;
            for (index_t y = 0; y < p.ny; ++y) {
                index_t x = 0;
                while (x < p.nx) {
                    const auto col = p.color(x, y);
                    index_t run = 1;
                    while (x + run < p.nx && p.color(x + run, y) == col) ++run;
                    s += "<rect x=\"" + std::to_string(x0 + static_cast<int>(x) * pixel) + "\" y=\"" +
                         std::to_string(iy + static_cast<int>(p.ny - 1 - y) * pixel) + "\" width=\"" +
                         std::to_string(static_cast<int>(run) * pixel) + "\" height=\"" + std::to_string(pixel) +
                         "\" fill=\"" + detail::hex(col) + "\"/>\n";
                    x += run;
                }
            }
            s += "</g>\n";
            // colour bar, top = high end
            const int bx = x0 + static_cast<int>(p.nx) * pixel + pad / 2, bh = static_cast<int>(p.ny) * pixel;
            constexpr int steps = 32;
            const double lo = p.diverging ? -p.hi : p.lo, hi = p.hi;
            for (int k = 0; k < steps; ++k) {
                const double v = hi - (hi - lo) * (k + 0.5) / steps;
                const auto col = p.diverging ? diverging_color(v, p.hi) : gray_color(v, p.lo, p.hi);
                s += "<rect x=\"" + std::to_string(bx) + "\" y=\"" + std::to_string(iy + k * bh / steps) +
                     "\" width=\"" + std::to_string(bar_w) + "\" height=\"" + std::to_string(bh / steps + 1) +
                     "\" fill=\"" + detail::hex(col) + "\"/>\n";
            }
            s += "<text x=\"" + std::to_string(x0) + "\" y=\"" + std::to_string(iy + bh + 12) + "\" font-size=\"10\">[" +
                 detail::fmt(lo) + ", " + detail::fmt(hi) + "]</text>\n";
            if (!p.caption.empty())
                s += "<text x=\"" + std::to_string(x0) + "\" y=\"" + std::to_string(iy + bh + 25) +
                     "\" font-size=\"11\">" + detail::xml_escape(p.caption) + "</text>\n";
        }
    s += "</svg>\n";
    return s;
}

/// For one map type: a map row (ground truth, then every method) and a
/// signed-error row per acceleration factor.
inline Figure map_figure(const fs::path& root, const ExperimentConfig& cfg, MapType m) {
    const fs::path gt_dir = root / "ground_truth";
    const auto mask = detail::mask_from_real(load_volume(gt_dir / "brain_mask"));
    const auto gt = load_volume(gt_dir / ("map_" + std::string(map_name(m))));
    const auto it = cfg.clamps.find(m);
    const std::optional<ClampRange> clamp = it == cfg.clamps.end() ? std::nullopt : std::optional<ClampRange>(it->second);
    Figure fig;
    fig.title = std::string(map_name(m)) + " (middle slice)";
    auto gt_panel = detail::slice_panel(gt, mask, clamp);
    const double hi = *std::max_element(gt_panel.values.begin(), gt_panel.values.end());
    gt_panel.title = "ground truth";
    gt_panel.lo = std::min(0.0, *std::min_element(gt_panel.values.begin(), gt_panel.values.end()));
    gt_panel.hi = hi > gt_panel.lo ? hi : gt_panel.lo + 1.0;
    for (double r : cfg.r_values) {
        std::vector<Panel> maps{gt_panel}, errors;
        Panel blank;
        blank.title = "";
        errors.push_back(blank);
        double limit = 0.0;
        for (auto method : cfg.methods) {
            const std::string name = method_name(method);
            const auto pred = load_volume(root / r_label(r) / name / ("map_" + std::string(map_name(m))));
            require_same_dims(pred.dims(), gt.dims(), "figures: " + name + " " + std::string(map_name(m)));
            auto p = detail::slice_panel(pred, mask, clamp);
            p.title = name + " " + r_label(r);
            p.lo = gt_panel.lo;
            p.hi = gt_panel.hi;
            p.caption = "NRMSE " + detail::fmt(nrmse(pred, gt, clamp, mask), "%.4f");
            Panel e = p;
            e.title = name + " error";
            e.diverging = true;
            for (std::size_t i = 0; i < e.values.size(); ++i) {
                e.values[i] = p.values[i] - gt_panel.values[i];
                limit = std::max(limit, std::abs(e.values[i]));
            }
            maps.push_back(std::move(p));
            errors.push_back(std::move(e));
        }
        for (auto& e : errors) e.hi = limit > 0 ? limit : 1.0;
        errors.front().nx = 0;
        errors.front().ny = 0;
        errors.front().caption = "";
        fig.rows.push_back(std::move(maps));
        fig.rows.push_back(std::move(errors));
    }
    return fig;
}

/// One SVG per scored map type under `<root>/figures`.
inline std::vector<fs::path> emit_figures(const fs::path& root) {
    if (!fs::exists(root / "config.json")) throw std::runtime_error("figures: missing " + (root / "config.json").string());
    const auto cfg = load_config(root / "config.json");
    const fs::path dir = root / "figures";
    fs::create_directories(dir);
    std::vector<fs::path> out;
    for (auto m : scored_maps(cfg.protocol())) {
        const auto path = dir / (std::string(map_name(m)) + ".svg");
        std::ofstream f(path);
        if (!f) throw std::runtime_error("figures: cannot write " + path.string());
        f << render_svg(map_figure(root, cfg, m));
        out.push_back(path);
    }
    return out;
}

}  // namespace qmri

#endif  // QMRI_FIGURES_HPP
