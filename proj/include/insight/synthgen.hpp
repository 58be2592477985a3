#pragma once

// Seeded synthetic BEV scenes, the rasterizer, and dataset persistence.
//
// Generation uses only +, -, *, / and sqrt on doubles together with the
// integer conversions in rng.hpp, so a seed maps to the same scene on every
// IEEE-754 platform.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "insight/binary_io.hpp"
#include "insight/geometry.hpp"
#include "insight/rng.hpp"

namespace insight {

struct CountRange {
  int min = 0;
  int max = 0;

  friend bool operator==(const CountRange&, const CountRange&) = default;
};

struct SceneConfig {
  double x_min = -15.0;
  double x_max = 15.0;
  double y_min = -30.0;
  double y_max = 30.0;
  CountRange boundaries{2, 2};
  CountRange dividers{1, 2};
  CountRange crossings{0, 2};
  CountRange centerlines{2, 3};
  double jitter = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(x_min < x_max) || !(y_min < y_max)) throw Error("SceneConfig: empty range");
    for (const auto* r : {&boundaries, &dividers, &crossings, &centerlines}) {
      if (r->min < 0 || r->max < r->min) throw Error("SceneConfig: invalid count range");
    }
    if (jitter < 0.0) throw Error("SceneConfig: negative jitter");
  }
};

struct GeneratedScene {
  VectorMapGraph graph;
  std::vector<Instance> instances;
};

namespace detail {

class GraphBuilder {
 public:
  explicit GraphBuilder(VectorMapGraph& g) : g_(g) {}

  int vertex(Point2 p) {
    g_.vertices.push_back(p);
    return static_cast<int>(g_.vertices.size()) - 1;
  }

  void edge(int a, int b, ElementClass c) {
    g_.edges.emplace_back(a, b);
    g_.edge_class.push_back(c);
  }

  /// Chains `ids` with edges of class `c`; closes the loop when `closed`.
  void chain(const std::vector<int>& ids, ElementClass c, bool closed = false) {
    for (std::size_t i = 1; i < ids.size(); ++i) edge(ids[i - 1], ids[i], c);
    if (closed && ids.size() > 2) edge(ids.back(), ids.front(), c);
  }

 private:
  VectorMapGraph& g_;
};

}  // namespace detail

/// Builds one scene: two flanking boundaries, interior dividers, quadrilateral
/// pedestrian crossings and a centerline trunk whose branches create degree-3
/// junctions. Returns the raw graph and its decomposed, canonical instances.
inline GeneratedScene generate_scene(const SceneConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  GeneratedScene scene;
  detail::GraphBuilder b(scene.graph);

  const double xw = cfg.x_max - cfg.x_min;
  const double yh = cfg.y_max - cfg.y_min;
  const double xc = 0.5 * (cfg.x_min + cfg.x_max);
  const double margin = 0.02 * xw;
  auto clamp_pt = [&](Point2 p) {
    return Point2{std::clamp(p.x, cfg.x_min + margin, cfg.x_max - margin), std::clamp(p.y, cfg.y_min, cfg.y_max)};
  };
  auto jit = [&](double scale) { return rng.uniform(-scale, scale); };

  const int n_boundary = rng.uniform_int(cfg.boundaries.min, cfg.boundaries.max);
  const int n_divider = rng.uniform_int(cfg.dividers.min, cfg.dividers.max);
  const int n_crossing = rng.uniform_int(cfg.crossings.min, cfg.crossings.max);
  const int n_center = rng.uniform_int(cfg.centerlines.min, cfg.centerlines.max);

  // Half-width of the drivable area, as a fraction of the x extent.
  const double half_width = xw * rng.uniform(0.30, 0.41);
  constexpr int kLongVertices = 7;

  auto long_line = [&](double x, double y0, double y1, ElementClass c) {
    std::vector<int> ids;
    for (int i = 0; i < kLongVertices; ++i) {
      const double t = static_cast<double>(i) / (kLongVertices - 1);
      const double y = y0 + t * (y1 - y0) + (i == 0 || i == kLongVertices - 1 ? 0.0 : jit(cfg.jitter));
      ids.push_back(b.vertex(clamp_pt({x + jit(cfg.jitter), y})));
    }
    b.chain(ids, c);
    return ids;
  };

  for (int k = 0; k < n_boundary; ++k) {
    const double side = k % 2 == 0 ? -1.0 : 1.0;
    const double offset = half_width + static_cast<double>(k / 2) * 0.04 * xw;
    long_line(xc + side * offset, cfg.y_min, cfg.y_max, ElementClass::boundary);
  }

  for (int k = 0; k < n_divider; ++k) {
    const double x = xc - half_width + static_cast<double>(k + 1) * 2.0 * half_width / (n_divider + 1) +
                     jit(0.05 * half_width);
    const double y0 = cfg.y_min + rng.uniform(0.0, 0.15 * yh);
    const double y1 = cfg.y_max - rng.uniform(0.0, 0.15 * yh);
    long_line(x, y0, y1, ElementClass::divider);
  }

  for (int k = 0; k < n_crossing; ++k) {
    const double depth = rng.uniform(0.04, 0.065) * yh;
    // Crossings occupy disjoint bands of the y extent.
    const double band = (yh - 0.2 * yh) / std::max(n_crossing, 1);
    const double y_lo = cfg.y_min + 0.1 * yh + k * band + rng.uniform(0.0, std::max(band - depth, 0.0));
    const double x0 = xc - half_width + 0.5;
    const double x1 = xc + half_width - 0.5;
    const double j = 0.5 * cfg.jitter;
    std::vector<int> ids = {
        b.vertex(clamp_pt({x0 + jit(j), y_lo + jit(j)})),
        b.vertex(clamp_pt({x1 + jit(j), y_lo + jit(j)})),
        b.vertex(clamp_pt({x1 + jit(j), y_lo + depth + jit(j)})),
        b.vertex(clamp_pt({x0 + jit(j), y_lo + depth + jit(j)})),
    };
    b.chain(ids, ElementClass::pedestrian_crossing, true);
  }

  if (n_center > 0) {
    const double trunk_x = xc + rng.uniform(-0.4, 0.4) * half_width;
    const auto trunk = long_line(trunk_x, cfg.y_min, cfg.y_max, ElementClass::centerline);
    std::vector<int> slots = {1, 2, 3, 4, 5};
    rng.shuffle(std::span<int>(slots));
    for (int k = 1; k < n_center; ++k) {
      const int junction = trunk[static_cast<std::size_t>(slots[static_cast<std::size_t>((k - 1) % 5)])];
      const Point2 start = scene.graph.vertices[static_cast<std::size_t>(junction)];
      const double side = rng.bernoulli(0.5) ? 1.0 : -1.0;
      const double dir = rng.bernoulli(0.5) ? 1.0 : -1.0;
      const Point2 end = clamp_pt({xc + side * rng.uniform(half_width - 0.1 * xw, half_width - 0.03 * xw),
                                   start.y + dir * rng.uniform(0.2, 0.33) * yh});
      std::vector<int> ids = {junction};
      for (int i = 1; i <= 3; ++i) {
        const double t = static_cast<double>(i) / 3.0;
        // Bend the branch: lateral motion first, then along y.
        const double tx = t * (2.0 - t);
        Point2 p{start.x + tx * (end.x - start.x), start.y + t * (end.y - start.y)};
        if (i < 3) p = p + Point2{jit(cfg.jitter), jit(cfg.jitter)};
        ids.push_back(b.vertex(clamp_pt(p)));
      }
      b.chain(ids, ElementClass::centerline);
    }
  }

  scene.instances = decompose(scene.graph);
  return scene;
}

// ------------------------------------------------------------------ raster

/// H x W x C grid, row-major [row][col][channel]. Row 0 is at y_min and
/// column 0 at x_min; cell (r, c) is centred at
/// (x_min + (c + 0.5) res, y_min + (r + 0.5) res).
struct BevRaster {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  double resolution = 0.0;
  std::vector<float> data;

  float at(std::uint32_t r, std::uint32_t c, std::uint32_t ch) const {
    return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
  }
  float& at(std::uint32_t r, std::uint32_t c, std::uint32_t ch) {
    return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
  }

  friend bool operator==(const BevRaster& a, const BevRaster& b) {
    return a.height == b.height && a.width == b.width && a.channels == b.channels && a.data == b.data;
  }
};

struct RasterRange {
  double x_min = -15.0;
  double x_max = 15.0;
  double y_min = -30.0;
  double y_max = 30.0;
};

inline std::uint32_t cells_for(double span, double resolution) {
  const double n = std::round(span / resolution);
  if (n < 1.0 || std::abs(n * resolution - span) > 1e-6 * std::max(1.0, span)) {
    throw Error("resolution " + std::to_string(resolution) + " does not divide extent " + std::to_string(span));
  }
  return static_cast<std::uint32_t>(n);
}

/// Draws every instance into its class channel. Intensity at a cell centre is
/// max(0, 1 - d / resolution), d being the distance to the nearest segment;
/// overlapping strokes take the maximum. Geometry outside the range is
/// clipped and reported through `diagnostics` when provided.
inline BevRaster rasterize(std::span<const Instance> instances, double resolution, const RasterRange& range = {},
                           std::vector<Diagnostic>* diagnostics = nullptr) {
  if (!(resolution > 0.0)) throw Error("rasterize: resolution must be positive");
  BevRaster r;
  r.resolution = resolution;
  r.width = cells_for(range.x_max - range.x_min, resolution);
  r.height = cells_for(range.y_max - range.y_min, resolution);
  r.channels = kNumClasses;
  r.data.assign(static_cast<std::size_t>(r.height) * r.width * r.channels, 0.0f);

  for (std::size_t idx = 0; idx < instances.size(); ++idx) {
    const auto& inst = instances[idx];
    const auto ch = static_cast<std::uint32_t>(inst.cls);
    bool outside = false;
    for (const auto& p : inst.points) {
      if (p.x < range.x_min || p.x > range.x_max || p.y < range.y_min || p.y > range.y_max) outside = true;
    }
    if (outside && diagnostics) {
      diagnostics->push_back({"instance " + std::to_string(idx) + " extends outside the raster range; clipped",
                              std::nullopt, std::nullopt});
    }
    for (std::size_t s = 1; s < inst.points.size(); ++s) {
      const Point2 a = inst.points[s - 1];
      const Point2 bpt = inst.points[s];
      const double lo_x = std::min(a.x, bpt.x) - resolution;
      const double hi_x = std::max(a.x, bpt.x) + resolution;
      const double lo_y = std::min(a.y, bpt.y) - resolution;
      const double hi_y = std::max(a.y, bpt.y) + resolution;
      const auto c0 = static_cast<long>(std::floor((lo_x - range.x_min) / resolution));
      const auto c1 = static_cast<long>(std::floor((hi_x - range.x_min) / resolution));
      const auto r0 = static_cast<long>(std::floor((lo_y - range.y_min) / resolution));
      const auto r1 = static_cast<long>(std::floor((hi_y - range.y_min) / resolution));
      for (long row = std::max(r0, 0L); row <= std::min(r1, static_cast<long>(r.height) - 1); ++row) {
        for (long col = std::max(c0, 0L); col <= std::min(c1, static_cast<long>(r.width) - 1); ++col) {
          const Point2 centre{range.x_min + (static_cast<double>(col) + 0.5) * resolution,
                              range.y_min + (static_cast<double>(row) + 0.5) * resolution};
          const double v = 1.0 - segment_distance(centre, a, bpt) / resolution;
          if (v <= 0.0) continue;
          float& cell = r.at(static_cast<std::uint32_t>(row), static_cast<std::uint32_t>(col), ch);
          cell = std::max(cell, static_cast<float>(v));
        }
      }
    }
  }
  return r;
}

// ------------------------------------------------------------------ dataset

/// One persisted scene: its canonical instances and raster.
struct SceneRecord {
  int scene_id = 0;
  std::vector<Instance> instances;
  BevRaster raster;

  friend bool operator==(const SceneRecord& a, const SceneRecord& b) {
    return a.scene_id == b.scene_id && a.instances == b.instances && a.raster == b.raster &&
           a.raster.resolution == b.raster.resolution;
  }
};

inline constexpr int kDatasetVersion = 1;
inline constexpr std::string_view kDatasetFormat = "bev-scenes";

inline std::string encode_raster(const BevRaster& r) {
  std::string out = "BEVR";
  binio::put_u32(out, r.height);
  binio::put_u32(out, r.width);
  binio::put_u32(out, r.channels);
  out.reserve(out.size() + r.data.size() * 4);
  for (float v : r.data) binio::put_f32(out, v);
  return out;
}

inline BevRaster decode_raster(std::string_view bytes, double resolution, const std::string& context) {
  binio::Reader rd(bytes, context);
  if (rd.take(4, "magic") != "BEVR") throw ParseError(context + ": bad magic, expected BEVR", 0);
  BevRaster r;
  r.resolution = resolution;
  r.height = rd.u32("height");
  r.width = rd.u32("width");
  r.channels = rd.u32("channels");
  const std::size_t n = static_cast<std::size_t>(r.height) * r.width * r.channels;
  if (n > (bytes.size() - rd.offset()) / 4) {
    throw ParseError(context + ": truncated raster data, expected " + std::to_string(n) + " floats", bytes.size());
  }
  r.data.resize(n);
  for (auto& v : r.data) v = rd.f32("raster data");
  if (!rd.at_end()) throw ParseError(context + ": trailing bytes after raster data", rd.offset());
  return r;
}

inline std::string raster_file_name(int scene_id) {
  std::ostringstream os;
  os << "rasters/scene_" << std::setw(6) << std::setfill('0') << scene_id << ".bevr";
  return os.str();
}

inline nlohmann::json instance_to_json(const Instance& inst) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : inst.points) pts.push_back({p.x, p.y});
  return {{"class", to_string(inst.cls)}, {"kind", to_string(inst.kind)}, {"points", pts}};
}

/// Writes `scenes` to the JSON Lines file `path`; rasters go to
/// `<dir of path>/rasters/`. The first line is a format header carrying the
/// version and raster resolution.
inline void write_dataset(std::span<const SceneRecord> scenes, const std::string& path) {
  namespace fs = std::filesystem;
  const fs::path file(path);
  const fs::path dir = file.has_parent_path() ? file.parent_path() : fs::path(".");
  std::error_code ec;
  fs::create_directories(dir / "rasters", ec);
  if (ec) throw Error("cannot create directory '" + (dir / "rasters").string() + "': " + ec.message());

  double resolution = scenes.empty() ? 0.0 : scenes.front().raster.resolution;
  std::string out;
  nlohmann::json header = {{"format", kDatasetFormat}, {"version", kDatasetVersion}, {"resolution", resolution}};
  out += header.dump() + "\n";
  for (const auto& s : scenes) {
    if (s.raster.resolution != resolution) throw Error("write_dataset: scenes use different raster resolutions");
    nlohmann::json line;
    line["scene_id"] = s.scene_id;
    line["instances"] = nlohmann::json::array();
    for (const auto& inst : s.instances) line["instances"].push_back(instance_to_json(inst));
    line["raster_file"] = raster_file_name(s.scene_id);
    out += line.dump() + "\n";
    binio::write_file((dir / raster_file_name(s.scene_id)).string(), encode_raster(s.raster));
  }
  binio::write_file(path, out);
}

/// Reads only the JSON Lines part; `load_rasters` = false skips raster files.
inline std::vector<SceneRecord> read_dataset(const std::string& path, bool load_rasters = true) {
  namespace fs = std::filesystem;
  const std::string text = binio::read_file(path);
  const fs::path dir = fs::path(path).has_parent_path() ? fs::path(path).parent_path() : fs::path(".");

  std::vector<SceneRecord> scenes;
  std::size_t line_start = 0;
  std::size_t line_no = 0;
  double resolution = 0.0;
  while (line_start < text.size()) {
    const std::size_t nl = text.find('\n', line_start);
    if (nl == std::string::npos) {
      throw ParseError(path + ": line " + std::to_string(line_no + 1) + " is not newline-terminated (truncated?)",
                       text.size());
    }
    const std::string_view line(text.data() + line_start, nl - line_start);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path + ": line " + std::to_string(line_no + 1) + ": " + e.what(),
                       line_start + (e.byte > 0 ? e.byte - 1 : 0));
    }
    try {
      if (line_no == 0) {
        if (!j.is_object() || j.value("format", std::string{}) != kDatasetFormat) {
          throw ParseError(path + ": missing dataset header line", 0);
        }
        const int version = j.at("version").get<int>();
        if (version != kDatasetVersion) {
          throw VersionError(path + ": dataset version " + std::to_string(version) + " is not supported (expected " +
                             std::to_string(kDatasetVersion) + ")");
        }
        resolution = j.at("resolution").get<double>();
      } else {
        SceneRecord s;
        s.scene_id = j.at("scene_id").get<int>();
        for (const auto& ji : j.at("instances")) {
          Instance inst;
          const auto cls = class_from_string(ji.at("class").get<std::string>());
          const auto kind = kind_from_string(ji.at("kind").get<std::string>());
          if (!cls || !kind) throw ParseError(path + ": unknown class or kind", line_start);
          inst.cls = *cls;
          inst.kind = *kind;
          for (const auto& p : ji.at("points")) inst.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
          s.instances.push_back(std::move(inst));
        }
        if (load_rasters) {
          const auto rf = (dir / j.at("raster_file").get<std::string>()).string();
          s.raster = decode_raster(binio::read_file(rf), resolution, rf);
        }
        s.raster.resolution = resolution;
        scenes.push_back(std::move(s));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ": line " + std::to_string(line_no + 1) + ": " + e.what(), line_start);
    }
    line_start = nl + 1;
    ++line_no;
  }
  if (line_no == 0) throw ParseError(path + ": empty file, missing dataset header", 0);
  return scenes;
}

/// Generates `count` scenes; scene i uses child_seed(seed, i).
inline std::vector<SceneRecord> generate_dataset(const SceneConfig& base, int count, double resolution) {
  std::vector<SceneRecord> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  const RasterRange range{base.x_min, base.x_max, base.y_min, base.y_max};
  for (int i = 0; i < count; ++i) {
    SceneConfig cfg = base;
    cfg.seed = child_seed(base.seed, static_cast<std::uint64_t>(i));
    auto gs = generate_scene(cfg);
    SceneRecord rec;
    rec.scene_id = i;
    rec.raster = rasterize(gs.instances, resolution, range);
    rec.instances = std::move(gs.instances);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace insight
